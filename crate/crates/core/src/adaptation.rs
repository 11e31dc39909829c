//! The three adaptation regimes: what is prepended to the query, which
//! parameter groups train, and the response-only sequence loss.
//!
//! Layout of an assembled sequence for a query of `m` tokens:
//!
//! ```text
//! fine-tune:       x_1 .. x_m  x_{m+1} .. x_N
//! soft / dynamic:  p_1 .. p_m  x_1 .. x_m  x_{m+1} .. x_N
//! ```
//!
//! Prompt rows `p_i` come from the first `m` rows of the soft-prompt pool or
//! from the controller applied to the query. Positions are contiguous from 0
//! and only positions that predict a response token carry loss.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ControllerParams, ControllerVars, Init, LanguageModel, LmVars, ModelConfig, ParamGroup,
    Parameterized,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::PAD;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogPair {
    query: Vec<usize>,
    response: Vec<usize>,
}

impl DialogPair {
    pub fn new(query: Vec<usize>, response: Vec<usize>) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::EmptyInput("dialog query"));
        }
        if response.is_empty() {
            return Err(Error::EmptyInput("dialog response"));
        }
        Ok(Self { query, response })
    }

    pub fn query(&self) -> &[usize] {
        &self.query
    }

    pub fn response(&self) -> &[usize] {
        &self.response
    }

    /// Query length `m`.
    pub fn m(&self) -> usize {
        self.query.len()
    }

    /// Total length `N = m + |response|`.
    pub fn n(&self) -> usize {
        self.query.len() + self.response.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    FineTune,
    SoftPrompt,
    DynamicPrompt,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 3] = [
        RegimeKind::FineTune,
        RegimeKind::SoftPrompt,
        RegimeKind::DynamicPrompt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::FineTune => "fine_tune",
            RegimeKind::SoftPrompt => "soft_prompt",
            RegimeKind::DynamicPrompt => "dynamic_prompt",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            RegimeKind::FineTune => "fine-tuning",
            RegimeKind::SoftPrompt => "soft-prompting",
            RegimeKind::DynamicPrompt => "dynamic-prompting",
        }
    }

    pub fn uses_prompt(self) -> bool {
        self != RegimeKind::FineTune
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "fine_tune" | "fine_tuning" | "finetune" => Ok(RegimeKind::FineTune),
            "soft_prompt" | "soft_prompting" | "soft" => Ok(RegimeKind::SoftPrompt),
            "dynamic_prompt" | "dynamic_prompting" | "dynamic" => Ok(RegimeKind::DynamicPrompt),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

/// Trainable soft-prompt rows; a length-`m` query uses the first `m` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub embeddings: Tensor,
}

impl PromptPool {
    pub fn new(capacity: usize, d_model: usize, seed: u64) -> Self {
        Self {
            embeddings: Init::new(seed).normal(vec![capacity, d_model]),
        }
    }

    pub fn capacity(&self) -> usize {
        self.embeddings.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRegime {
    pub kind: RegimeKind,
    pub prompt_pool: Option<PromptPool>,
    pub controller: Option<ControllerParams>,
}

impl AdaptationRegime {
    pub fn fine_tune() -> Self {
        Self {
            kind: RegimeKind::FineTune,
            prompt_pool: None,
            controller: None,
        }
    }

    pub fn soft_prompt(config: &ModelConfig, capacity: usize, seed: u64) -> Self {
        Self {
            kind: RegimeKind::SoftPrompt,
            prompt_pool: Some(PromptPool::new(capacity, config.d_model, seed)),
            controller: None,
        }
    }

    pub fn dynamic_prompt(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            kind: RegimeKind::DynamicPrompt,
            prompt_pool: None,
            controller: Some(ControllerParams::new(config, seed)?),
        })
    }

    /// Fresh regime parameters of the given kind.
    pub fn init(kind: RegimeKind, config: &ModelConfig, pool_capacity: usize, seed: u64) -> Result<Self> {
        match kind {
            RegimeKind::FineTune => Ok(Self::fine_tune()),
            RegimeKind::SoftPrompt => Ok(Self::soft_prompt(config, pool_capacity, seed)),
            RegimeKind::DynamicPrompt => Self::dynamic_prompt(config, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            RegimeKind::FineTune => self.prompt_pool.is_none() && self.controller.is_none(),
            RegimeKind::SoftPrompt => self.prompt_pool.is_some() && self.controller.is_none(),
            RegimeKind::DynamicPrompt => self.prompt_pool.is_none() && self.controller.is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} regime has the wrong prompt components",
                self.kind
            )))
        }
    }
}

impl Parameterized for AdaptationRegime {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamGroup, &Tensor)) {
        if let Some(p) = &self.prompt_pool {
            f("prompt_pool", ParamGroup::PromptPool, &p.embeddings);
        }
        if let Some(c) = &self.controller {
            c.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Tensor)) {
        if let Some(p) = &mut self.prompt_pool {
            f("prompt_pool", ParamGroup::PromptPool, &mut p.embeddings);
        }
        if let Some(c) = &mut self.controller {
            c.visit_mut(f);
        }
    }
}

/// Parameter groups updated under a regime; everything else stays frozen.
pub fn trainable_parameters(regime: &AdaptationRegime) -> BTreeSet<ParamGroup> {
    match regime.kind {
        RegimeKind::FineTune => [
            ParamGroup::WordEmbeddings,
            ParamGroup::PositionEmbeddings,
            ParamGroup::Body,
            ParamGroup::Output,
        ]
        .into(),
        RegimeKind::SoftPrompt => [ParamGroup::PromptPool, ParamGroup::WordEmbeddings].into(),
        RegimeKind::DynamicPrompt => [ParamGroup::Controller, ParamGroup::WordEmbeddings].into(),
    }
}

/// Every LM and regime parameter bound into one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub kind: RegimeKind,
    pub lm: LmVars,
    pub pool: Option<Var>,
    pub controller: Option<ControllerVars>,
}

impl BoundModel {
    pub fn bind(
        tape: &mut Tape,
        lm: &LanguageModel,
        regime: &AdaptationRegime,
        trainable: &BTreeSet<ParamGroup>,
    ) -> Result<Self> {
        regime.validate()?;
        let is = |g: ParamGroup| trainable.contains(&g);
        Ok(Self {
            kind: regime.kind,
            lm: LmVars::bind(tape, lm, &is),
            pool: regime
                .prompt_pool
                .as_ref()
                .map(|p| tape.param("prompt_pool", &p.embeddings, is(ParamGroup::PromptPool))),
            controller: regime
                .controller
                .as_ref()
                .map(|c| ControllerVars::bind(tape, c, is(ParamGroup::Controller))),
        })
    }

    /// Binds with every parameter frozen (inference).
    pub fn frozen(tape: &mut Tape, lm: &LanguageModel, regime: &AdaptationRegime) -> Result<Self> {
        Self::bind(tape, lm, regime, &BTreeSet::new())
    }

    fn prompt_len(&self, tape: &Tape, m: usize) -> Result<usize> {
        match self.kind {
            RegimeKind::FineTune => Ok(0),
            RegimeKind::SoftPrompt => {
                let cap = self.pool.map_or(0, |p| tape.shape(p)[0]);
                if m > cap {
                    return Err(Error::Capacity {
                        what: "soft-prompt pool",
                        needed: m,
                        capacity: cap,
                    });
                }
                Ok(m)
            }
            RegimeKind::DynamicPrompt => Ok(m),
        }
    }

    /// Input embeddings for `prompt ⊕ query ⊕ tokens`; `tokens` may be empty.
    pub fn prefix_embeddings(&self, tape: &mut Tape, query: &[usize], tokens: &[usize]) -> Result<Var> {
        let m = query.len();
        if m == 0 {
            return Err(Error::EmptyInput("query"));
        }
        let prompt_len = self.prompt_len(tape, m)?;
        let vocab = self.lm.vocab_size();
        if let Some(&id) = query.iter().chain(tokens).find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary { id, size: vocab });
        }
        let needed = prompt_len + m + tokens.len();
        if needed > self.lm.max_positions() {
            return Err(Error::Capacity {
                what: "assembled sequence",
                needed,
                capacity: self.lm.max_positions(),
            });
        }
        match self.kind {
            RegimeKind::FineTune => {
                let ids: Vec<usize> = query.iter().chain(tokens).copied().collect();
                self.lm.embed(tape, None, &ids)
            }
            RegimeKind::SoftPrompt => {
                let ids: Vec<usize> = (vocab..vocab + m).chain(query.iter().chain(tokens).copied()).collect();
                self.lm.embed(tape, self.pool, &ids)
            }
            RegimeKind::DynamicPrompt => {
                let ids: Vec<usize> = query.iter().chain(tokens).copied().collect();
                let body = self.lm.embed(tape, None, &ids)?;
                let q = tape.slice_rows(body, 0, m)?;
                let ctrl = self
                    .controller
                    .as_ref()
                    .ok_or_else(|| Error::State("dynamic regime without controller".into()))?;
                let prompt = ctrl.forward(tape, q)?;
                tape.concat_rows(&[prompt, body])
            }
        }
    }

    /// Assembles `pair` on the tape. Responses that overflow `max_positions`
    /// are truncated on the right; the query never is.
    pub fn assemble(&self, tape: &mut Tape, pair: &DialogPair) -> Result<AssembledVars> {
        let m = pair.m();
        let prompt_len = self.prompt_len(tape, m)?;
        let prefix = prompt_len + m;
        let cap = self.lm.max_positions();
        if prefix >= cap {
            return Err(Error::Capacity {
                what: "query plus prompt",
                needed: prefix + 1,
                capacity: cap,
            });
        }
        let kept = pair.response().len().min(cap - prefix);
        let input = self.prefix_embeddings(tape, pair.query(), &pair.response()[..kept])?;
        let len = prefix + kept;
        let (targets, loss_mask) = response_targets(prefix, len, pair.response());
        Ok(AssembledVars {
            input,
            targets,
            loss_mask,
            positions: (0..len).collect(),
            layout: Layout {
                prompt_len,
                query_len: m,
                response_len: kept,
            },
        })
    }

    /// Mean negative log-likelihood of the response tokens.
    pub fn sequence_loss(&self, tape: &mut Tape, pair: &DialogPair) -> Result<Var> {
        let a = self.assemble(tape, pair)?;
        let logits = self.lm.forward(tape, a.input, &a.positions)?;
        tape.masked_cross_entropy(logits, &a.targets, &a.loss_mask)
    }
}

/// Position `p` predicts the token at `p + 1`; only response tokens count.
fn response_targets(prefix: usize, len: usize, response: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = vec![PAD as usize; len];
    let mut mask = vec![false; len];
    for p in prefix.saturating_sub(1)..len {
        let idx = p + 1 - prefix;
        if idx < response.len() {
            targets[p] = response[idx];
            mask[p] = true;
        }
    }
    (targets, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub prompt_len: usize,
    pub query_len: usize,
    pub response_len: usize,
}

#[derive(Debug, Clone)]
pub struct AssembledVars {
    pub input: Var,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub positions: Vec<usize>,
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledExample {
    pub input_embeddings: Tensor,
    pub loss_mask: Vec<bool>,
    pub target_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub layout: Layout,
}

impl AssembledExample {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Prompt rows of the input (empty for fine-tuning).
    pub fn prompt_rows(&self) -> Result<Tensor> {
        let d = self.input_embeddings.cols();
        let n = self.layout.prompt_len;
        Tensor::new(vec![n, d], self.input_embeddings.data()[..n * d].to_vec())
    }
}

pub fn assemble_input(
    regime: &AdaptationRegime,
    lm: &LanguageModel,
    pair: &DialogPair,
) -> Result<AssembledExample> {
    let mut tape = Tape::new();
    let bound = BoundModel::frozen(&mut tape, lm, regime)?;
    let a = bound.assemble(&mut tape, pair)?;
    Ok(AssembledExample {
        input_embeddings: tape.to_tensor(a.input),
        loss_mask: a.loss_mask,
        target_ids: a.targets,
        positions: a.positions,
        layout: a.layout,
    })
}

/// Logits of the assembled example (no gradients).
pub fn assembled_logits(lm: &LanguageModel, example: &AssembledExample) -> Result<Tensor> {
    crate::model::forward_lm(lm, &example.input_embeddings, &example.positions)
}

/// Masked cross-entropy of given logits against an assembled example.
pub fn loss_from_logits(logits: &Tensor, example: &AssembledExample) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let loss = tape.masked_cross_entropy(l, &example.target_ids, &example.loss_mask)?;
    Ok(tape.scalar_value(loss))
}

pub fn sequence_loss(regime: &AdaptationRegime, lm: &LanguageModel, pair: &DialogPair) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundModel::frozen(&mut tape, lm, regime)?;
    let loss = bound.sequence_loss(&mut tape, pair)?;
    Ok(Tensor::scalar(tape.scalar_value(loss)))
}
