//! Decoder-only transformer language model and the prompt controller.
//!
//! Both networks share one block layout (pre-norm, causal multi-head
//! attention, GELU feed-forward). The output projection is tied to the word
//! embedding table.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub controller_layers: usize,
    pub controller_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_positions: 96,
            controller_layers: 2,
            controller_heads: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.vocab_size > 0, "vocab_size must be positive")?;
        check(self.d_model > 0 && self.d_ff > 0, "d_model and d_ff must be positive")?;
        check(self.max_positions > 0, "max_positions must be positive")?;
        check(
            self.n_heads > 0 && self.d_model % self.n_heads == 0,
            "d_model must be divisible by n_heads",
        )?;
        check(
            self.controller_heads > 0 && self.d_model % self.controller_heads == 0,
            "d_model must be divisible by controller_heads",
        )
    }
}

/// Named parameter groups. Freezing rules are expressed over these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    WordEmbeddings,
    PositionEmbeddings,
    Body,
    Output,
    PromptPool,
    Controller,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::WordEmbeddings,
        ParamGroup::PositionEmbeddings,
        ParamGroup::Body,
        ParamGroup::Output,
        ParamGroup::PromptPool,
        ParamGroup::Controller,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::WordEmbeddings => "word_embeddings",
            ParamGroup::PositionEmbeddings => "position_embeddings",
            ParamGroup::Body => "body",
            ParamGroup::Output => "output",
            ParamGroup::PromptPool => "prompt_pool",
            ParamGroup::Controller => "controller",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything that owns named, grouped parameter tensors.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamGroup, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor));

    /// Scalar parameter count per group.
    fn census(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        self.visit(&mut |_, g, t| *out.entry(g).or_insert(0) += t.len());
        out
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub(crate) fn normal(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(vec![d], 1.0),
            bias: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
    pub ln2: LayerNormParams,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl BlockParams {
    fn new(init: &mut Init, d: usize, d_ff: usize) -> Self {
        Self {
            ln1: LayerNormParams::new(d),
            w_qkv: init.normal(vec![d, 3 * d]),
            b_qkv: Tensor::zeros(vec![3 * d]),
            w_proj: init.normal(vec![d, d]),
            b_proj: Tensor::zeros(vec![d]),
            ln2: LayerNormParams::new(d),
            w_fc: init.normal(vec![d, d_ff]),
            b_fc: Tensor::zeros(vec![d_ff]),
            w_out: init.normal(vec![d_ff, d]),
            b_out: Tensor::zeros(vec![d]),
        }
    }

    fn visit(&self, prefix: &str, group: ParamGroup, f: &mut dyn FnMut(&str, ParamGroup, &Tensor)) {
        for (name, t) in [
            ("ln1.gain", &self.ln1.gain),
            ("ln1.bias", &self.ln1.bias),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
            ("ln2.gain", &self.ln2.gain),
            ("ln2.bias", &self.ln2.bias),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ] {
            f(&format!("{prefix}.{name}"), group, t);
        }
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        group: ParamGroup,
        f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor),
    ) {
        for (name, t) in [
            ("ln1.gain", &mut self.ln1.gain),
            ("ln1.bias", &mut self.ln1.bias),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
            ("ln2.gain", &mut self.ln2.gain),
            ("ln2.bias", &mut self.ln2.bias),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ] {
            f(&format!("{prefix}.{name}"), group, t);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageModelParams {
    pub word_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    pub output_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub params: LanguageModelParams,
}

impl LanguageModel {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(config.seed);
        let d = config.d_model;
        let word_embeddings = init.normal(vec![config.vocab_size, d]);
        let position_embeddings = init.normal(vec![config.max_positions, d]);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::new(&mut init, d, config.d_ff))
            .collect();
        Ok(Self {
            params: LanguageModelParams {
                word_embeddings,
                position_embeddings,
                blocks,
                final_norm: LayerNormParams::new(d),
                output_bias: Tensor::zeros(vec![config.vocab_size]),
            },
            config,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }
}

impl Parameterized for LanguageModel {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamGroup, &Tensor)) {
        let p = &self.params;
        f("lm.wte", ParamGroup::WordEmbeddings, &p.word_embeddings);
        f("lm.wpe", ParamGroup::PositionEmbeddings, &p.position_embeddings);
        for (i, b) in p.blocks.iter().enumerate() {
            b.visit(&format!("lm.h{i}"), ParamGroup::Body, f);
        }
        f("lm.ln_f.gain", ParamGroup::Output, &p.final_norm.gain);
        f("lm.ln_f.bias", ParamGroup::Output, &p.final_norm.bias);
        f("lm.out_bias", ParamGroup::Output, &p.output_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor)) {
        let p = &mut self.params;
        f("lm.wte", ParamGroup::WordEmbeddings, &mut p.word_embeddings);
        f("lm.wpe", ParamGroup::PositionEmbeddings, &mut p.position_embeddings);
        for (i, b) in p.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("lm.h{i}"), ParamGroup::Body, f);
        }
        f("lm.ln_f.gain", ParamGroup::Output, &mut p.final_norm.gain);
        f("lm.ln_f.bias", ParamGroup::Output, &mut p.final_norm.bias);
        f("lm.out_bias", ParamGroup::Output, &mut p.output_bias);
    }
}

/// Causal transformer encoder mapping query embeddings to prompt vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub heads: usize,
    pub position_embeddings: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl ControllerParams {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.d_model;
        Ok(Self {
            heads: config.controller_heads,
            position_embeddings: init.normal(vec![config.max_positions, d]),
            blocks: (0..config.controller_layers)
                .map(|_| BlockParams::new(&mut init, d, config.d_ff))
                .collect(),
            final_norm: LayerNormParams::new(d),
            w_proj: init.normal(vec![d, d]),
            b_proj: Tensor::zeros(vec![d]),
        })
    }
}

impl Parameterized for ControllerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamGroup, &Tensor)) {
        let g = ParamGroup::Controller;
        f("ctrl.wpe", g, &self.position_embeddings);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("ctrl.h{i}"), g, f);
        }
        f("ctrl.ln_f.gain", g, &self.final_norm.gain);
        f("ctrl.ln_f.bias", g, &self.final_norm.bias);
        f("ctrl.w_proj", g, &self.w_proj);
        f("ctrl.b_proj", g, &self.b_proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor)) {
        let g = ParamGroup::Controller;
        f("ctrl.wpe", g, &mut self.position_embeddings);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("ctrl.h{i}"), g, f);
        }
        f("ctrl.ln_f.gain", g, &mut self.final_norm.gain);
        f("ctrl.ln_f.bias", g, &mut self.final_norm.bias);
        f("ctrl.w_proj", g, &mut self.w_proj);
        f("ctrl.b_proj", g, &mut self.b_proj);
    }
}

/// Prompt vectors, one row per query token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix(pub Tensor);

impl PromptMatrix {
    pub fn rows(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNormVars {
    gain: Var,
    bias: Var,
}

#[derive(Debug, Clone, Copy)]
struct BlockVars {
    ln1: LayerNormVars,
    w_qkv: Var,
    b_qkv: Var,
    w_proj: Var,
    b_proj: Var,
    ln2: LayerNormVars,
    w_fc: Var,
    b_fc: Var,
    w_out: Var,
    b_out: Var,
}

fn bind_block(tape: &mut Tape, prefix: &str, b: &BlockParams, trainable: bool) -> BlockVars {
    let mut p = |name: &str, t: &Tensor| tape.param(&format!("{prefix}.{name}"), t, trainable);
    BlockVars {
        ln1: LayerNormVars {
            gain: p("ln1.gain", &b.ln1.gain),
            bias: p("ln1.bias", &b.ln1.bias),
        },
        w_qkv: p("w_qkv", &b.w_qkv),
        b_qkv: p("b_qkv", &b.b_qkv),
        w_proj: p("w_proj", &b.w_proj),
        b_proj: p("b_proj", &b.b_proj),
        ln2: LayerNormVars {
            gain: p("ln2.gain", &b.ln2.gain),
            bias: p("ln2.bias", &b.ln2.bias),
        },
        w_fc: p("w_fc", &b.w_fc),
        b_fc: p("b_fc", &b.b_fc),
        w_out: p("w_out", &b.w_out),
        b_out: p("b_out", &b.b_out),
    }
}

fn block_forward(tape: &mut Tape, b: &BlockVars, x: Var, heads: usize) -> Result<Var> {
    let a = tape.layer_norm(x, b.ln1.gain, b.ln1.bias)?;
    let qkv = tape.matmul(a, b.w_qkv)?;
    let qkv = tape.add_row(qkv, b.b_qkv)?;
    let att = tape.causal_attention(qkv, heads)?;
    let proj = tape.matmul(att, b.w_proj)?;
    let proj = tape.add_row(proj, b.b_proj)?;
    let x = tape.add(x, proj)?;
    let a = tape.layer_norm(x, b.ln2.gain, b.ln2.bias)?;
    let hidden = tape.matmul(a, b.w_fc)?;
    let hidden = tape.add_row(hidden, b.b_fc)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, b.w_out)?;
    let out = tape.add_row(out, b.b_out)?;
    tape.add(x, out)
}

/// Language-model parameters bound into a tape.
#[derive(Debug, Clone)]
pub struct LmVars {
    pub word_embeddings: Var,
    position_embeddings: Var,
    blocks: Vec<BlockVars>,
    final_norm: LayerNormVars,
    output_bias: Var,
    heads: usize,
    vocab_size: usize,
    max_positions: usize,
}

impl LmVars {
    /// Binds every LM parameter; `trainable(group)` decides which ones carry
    /// gradients.
    pub fn bind(tape: &mut Tape, lm: &LanguageModel, trainable: &dyn Fn(ParamGroup) -> bool) -> Self {
        let p = &lm.params;
        let body = trainable(ParamGroup::Body);
        let out = trainable(ParamGroup::Output);
        Self {
            word_embeddings: tape.param(
                "lm.wte",
                &p.word_embeddings,
                trainable(ParamGroup::WordEmbeddings),
            ),
            position_embeddings: tape.param(
                "lm.wpe",
                &p.position_embeddings,
                trainable(ParamGroup::PositionEmbeddings),
            ),
            blocks: p
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| bind_block(tape, &format!("lm.h{i}"), b, body))
                .collect(),
            final_norm: LayerNormVars {
                gain: tape.param("lm.ln_f.gain", &p.final_norm.gain, out),
                bias: tape.param("lm.ln_f.bias", &p.final_norm.bias, out),
            },
            output_bias: tape.param("lm.out_bias", &p.output_bias, out),
            heads: lm.config.n_heads,
            vocab_size: lm.config.vocab_size,
            max_positions: lm.config.max_positions,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    /// Row gather from the word table, extended by `pool` rows when given:
    /// ids `vocab_size..vocab_size + pool_rows` address the pool.
    pub fn embed(&self, tape: &mut Tape, pool: Option<Var>, ids: &[usize]) -> Result<Var> {
        let extended = ids.iter().any(|&id| id >= self.vocab_size);
        match (extended, pool) {
            (false, _) => tape.gather(self.word_embeddings, ids),
            (true, Some(pool)) => {
                let table = tape.concat_rows(&[self.word_embeddings, pool])?;
                tape.gather(table, ids)
            }
            (true, None) => {
                let id = ids.iter().copied().max().unwrap_or(0);
                Err(Error::Vocabulary {
                    id,
                    size: self.vocab_size,
                })
            }
        }
    }

    /// Logits `L×vocab` for `L×d_model` input embeddings at the given absolute
    /// positions. Row `t` depends only on rows `0..=t`.
    pub fn forward(&self, tape: &mut Tape, input: Var, positions: &[usize]) -> Result<Var> {
        let [l, _] = tape.shape(input);
        if positions.len() != l {
            return Err(Error::Shape {
                op: "forward_lm",
                lhs: tape.shape(input).to_vec(),
                rhs: vec![positions.len()],
            });
        }
        if l > self.max_positions {
            return Err(Error::Capacity {
                what: "language model input",
                needed: l,
                capacity: self.max_positions,
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_positions) {
            return Err(Error::Capacity {
                what: "position index",
                needed: p + 1,
                capacity: self.max_positions,
            });
        }
        let pos = tape.gather(self.position_embeddings, positions)?;
        let mut x = tape.add(input, pos)?;
        for b in &self.blocks {
            x = block_forward(tape, b, x, self.heads)?;
        }
        let x = tape.layer_norm(x, self.final_norm.gain, self.final_norm.bias)?;
        let logits = tape.matmul_nt(x, self.word_embeddings)?;
        tape.add_row(logits, self.output_bias)
    }
}

#[derive(Debug, Clone)]
pub struct ControllerVars {
    position_embeddings: Var,
    blocks: Vec<BlockVars>,
    final_norm: LayerNormVars,
    w_proj: Var,
    b_proj: Var,
    heads: usize,
}

impl ControllerVars {
    pub fn bind(tape: &mut Tape, c: &ControllerParams, trainable: bool) -> Self {
        Self {
            position_embeddings: tape.param("ctrl.wpe", &c.position_embeddings, trainable),
            blocks: c
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| bind_block(tape, &format!("ctrl.h{i}"), b, trainable))
                .collect(),
            final_norm: LayerNormVars {
                gain: tape.param("ctrl.ln_f.gain", &c.final_norm.gain, trainable),
                bias: tape.param("ctrl.ln_f.bias", &c.final_norm.bias, trainable),
            },
            w_proj: tape.param("ctrl.w_proj", &c.w_proj, trainable),
            b_proj: tape.param("ctrl.b_proj", &c.b_proj, trainable),
            heads: c.heads,
        }
    }

    /// One prompt vector per query row, computed causally.
    pub fn forward(&self, tape: &mut Tape, query_embeddings: Var) -> Result<Var> {
        let [m, _] = tape.shape(query_embeddings);
        if m == 0 {
            return Err(Error::EmptyInput("controller query"));
        }
        let [cap, _] = tape.shape(self.position_embeddings);
        if m > cap {
            return Err(Error::Capacity {
                what: "controller input",
                needed: m,
                capacity: cap,
            });
        }
        let positions: Vec<usize> = (0..m).collect();
        let pos = tape.gather(self.position_embeddings, &positions)?;
        let mut x = tape.add(query_embeddings, pos)?;
        for b in &self.blocks {
            x = block_forward(tape, b, x, self.heads)?;
        }
        let x = tape.layer_norm(x, self.final_norm.gain, self.final_norm.bias)?;
        let h = tape.matmul(x, self.w_proj)?;
        tape.add_row(h, self.b_proj)
    }
}

fn all_frozen(_: ParamGroup) -> bool {
    false
}

/// Forward pass without gradients: logits for the given input embeddings.
pub fn forward_lm(lm: &LanguageModel, input_embeddings: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = LmVars::bind(&mut tape, lm, &all_frozen);
    let input = tape.leaf(input_embeddings);
    let logits = vars.forward(&mut tape, input, positions)?;
    Ok(tape.to_tensor(logits))
}

/// Gathers word-embedding rows (extended by `pool` when given).
pub fn embed(lm: &LanguageModel, pool: Option<&Tensor>, token_ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = LmVars::bind(&mut tape, lm, &all_frozen);
    let pool = pool.map(|p| tape.param("prompt_pool", p, false));
    let e = vars.embed(&mut tape, pool, token_ids)?;
    Ok(tape.to_tensor(e))
}

pub fn controller_forward(controller: &ControllerParams, query_embeddings: &Tensor) -> Result<PromptMatrix> {
    let mut tape = Tape::new();
    let vars = ControllerVars::bind(&mut tape, controller, false);
    let q = tape.leaf(query_embeddings);
    let h = vars.forward(&mut tape, q)?;
    Ok(PromptMatrix(tape.to_tensor(h)))
}
