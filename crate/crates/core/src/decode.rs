//! Greedy decoding and test-set evaluation.
//!
//! Decoding runs the language model incrementally with a key/value cache.
//! Every step repeats the exact arithmetic of the tape forward pass for the
//! new row, so cached logits are bit-identical to a full recomputation.

use std::collections::BTreeSet;

use crate::adaptation::{AdaptationRegime, BoundModel};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::metrics::{EvalBatch, MetricRow};
use crate::model::{BlockParams, LanguageModel};
use crate::tensor::{dot, gelu, layer_norm_rows, matmul_acc, matmul_nt_acc, softmax_into, Tape, Tensor};
use crate::tokenizer::{Tokenizer, EOS};

struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Incremental forward pass over one sequence.
pub struct Decoder<'a> {
    lm: &'a LanguageModel,
    caches: Vec<LayerCache>,
    len: usize,
}

fn linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let c = w.cols();
    let mut out = vec![0.0; c];
    matmul_acc(&mut out, x, w.data(), 1, x.len(), c);
    out.iter().zip(b.data()).map(|(v, bb)| v + bb).collect()
}

fn norm(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layer_norm_rows(x, x.len(), gain.data(), bias.data(), &mut out);
    out
}

impl<'a> Decoder<'a> {
    pub fn new(lm: &'a LanguageModel) -> Self {
        let caches = lm
            .params
            .blocks
            .iter()
            .map(|_| LayerCache {
                keys: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        Self { lm, caches, len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.lm.config.max_positions
    }

    fn block(&mut self, layer: usize, b: &BlockParams, x: Vec<f64>) -> Vec<f64> {
        let d = x.len();
        let heads = self.lm.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let a = norm(&x, &b.ln1.gain, &b.ln1.bias);
        let qkv = linear(&a, &b.w_qkv, &b.b_qkv);
        let cache = &mut self.caches[layer];
        cache.keys.extend_from_slice(&qkv[d..2 * d]);
        cache.values.extend_from_slice(&qkv[2 * d..]);
        let n = self.len + 1;
        let mut att = vec![0.0; d];
        let mut scores = vec![0.0; n];
        let mut probs = vec![0.0; n];
        for h in 0..heads {
            let q = &qkv[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(q, &cache.keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            softmax_into(&scores, &mut probs);
            let o = &mut att[h * dh..(h + 1) * dh];
            for (j, &p) in probs.iter().enumerate() {
                let v = &cache.values[j * d + h * dh..j * d + (h + 1) * dh];
                for (oo, &vv) in o.iter_mut().zip(v) {
                    *oo += p * vv;
                }
            }
        }
        let proj = linear(&att, &b.w_proj, &b.b_proj);
        let x: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let a = norm(&x, &b.ln2.gain, &b.ln2.bias);
        let hidden: Vec<f64> = linear(&a, &b.w_fc, &b.b_fc).into_iter().map(gelu).collect();
        let out = linear(&hidden, &b.w_out, &b.b_out);
        x.iter().zip(&out).map(|(a, b)| a + b).collect()
    }

    /// Appends one input embedding row; returns next-token logits when asked.
    pub fn push(&mut self, embedding: &[f64], want_logits: bool) -> Result<Option<Vec<f64>>> {
        let cfg = &self.lm.config;
        if self.is_full() {
            return Err(Error::Capacity {
                what: "decoder",
                needed: self.len + 1,
                capacity: cfg.max_positions,
            });
        }
        let d = cfg.d_model;
        if embedding.len() != d {
            return Err(Error::Shape {
                op: "decoder_push",
                lhs: vec![d],
                rhs: vec![embedding.len()],
            });
        }
        let p = &self.lm.params;
        let mut x: Vec<f64> = embedding
            .iter()
            .zip(p.position_embeddings.row(self.len))
            .map(|(a, b)| a + b)
            .collect();
        for (i, b) in p.blocks.iter().enumerate() {
            x = self.block(i, b, x);
        }
        self.len += 1;
        if !want_logits {
            return Ok(None);
        }
        let x = norm(&x, &p.final_norm.gain, &p.final_norm.bias);
        let v = cfg.vocab_size;
        let mut logits = vec![0.0; v];
        matmul_nt_acc(&mut logits, &x, p.word_embeddings.data(), 1, d, v);
        Ok(Some(
            logits
                .iter()
                .zip(p.output_bias.data())
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }
}

/// Index of the largest logit; ties go to the smallest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy chain: take the argmax of `first`, feed it to `step` for the next
/// logits, and repeat until `eos`, `max_new` tokens, or `step` returns `None`
/// (out of room).
pub fn greedy_chain(
    first: Vec<f64>,
    eos: usize,
    max_new: usize,
    mut step: impl FnMut(usize) -> Result<Option<Vec<f64>>>,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut logits = first;
    while out.len() < max_new {
        let next = argmax(&logits);
        if next == eos {
            break;
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        match step(next)? {
            Some(l) => logits = l,
            None => break,
        }
    }
    Ok(out)
}

/// Prompt ⊕ query input rows for a regime, without gradients.
pub fn prefix_embeddings(regime: &AdaptationRegime, lm: &LanguageModel, query: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundModel::frozen(&mut tape, lm, regime)?;
    let prefix = bound.prefix_embeddings(&mut tape, query, &[])?;
    Ok(tape.to_tensor(prefix))
}

/// Greedy response token ids (without the terminating `EOS`).
pub fn greedy_decode(
    regime: &AdaptationRegime,
    lm: &LanguageModel,
    query_tokens: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    let prefix = prefix_embeddings(regime, lm, query_tokens)?;
    let mut dec = Decoder::new(lm);
    let rows = prefix.rows();
    let mut first = None;
    for r in 0..rows {
        first = dec.push(prefix.row(r), r + 1 == rows)?;
    }
    let first = first.ok_or(Error::EmptyInput("query"))?;
    let table = &lm.params.word_embeddings;
    greedy_chain(first, EOS as usize, max_new_tokens, |tok| {
        if dec.is_full() {
            return Ok(None);
        }
        dec.push(table.row(tok), true)
    })
}

/// Greedy responses for each example, detokenized.
pub fn decode_responses(
    regime: &AdaptationRegime,
    lm: &LanguageModel,
    tokenizer: &Tokenizer,
    examples: &[Example],
    max_new_tokens: usize,
) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| {
            let ids = greedy_decode(regime, lm, ex.pair.query(), max_new_tokens)?;
            // ids the tokenizer never produced carry no text
            let ids: Vec<u32> = ids
                .into_iter()
                .filter(|&t| t < tokenizer.vocab_size())
                .map(|t| t as u32)
                .collect();
            tokenizer.decode(&ids)
        })
        .collect()
}

/// Decodes every test query and scores BLEU1..4, novelty and diversity.
pub fn evaluate(
    regime: &AdaptationRegime,
    lm: &LanguageModel,
    tokenizer: &Tokenizer,
    test: &[Example],
    training_responses: &BTreeSet<String>,
    max_new_tokens: usize,
) -> Result<MetricRow> {
    let hypotheses = decode_responses(regime, lm, tokenizer, test, max_new_tokens)?;
    let references: Vec<String> = test.iter().map(|e| e.response.clone()).collect();
    EvalBatch {
        hypotheses: &hypotheses,
        references: &references,
        training_responses,
    }
    .score()
}
