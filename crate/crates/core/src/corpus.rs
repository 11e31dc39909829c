//! Dialog corpus ingestion, single-turn pairing and data-fraction subsampling.
//!
//! Corpus files follow the DailyDialog text convention: one dialog per line,
//! turns separated by the literal `__eou__`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::DialogPair;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub const TURN_SEPARATOR: &str = "__eou__";

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub turns: Vec<String>,
}

/// Parses one corpus line; `None` when fewer than two non-empty turns remain.
pub fn parse_dialog(line: &str) -> Option<Dialog> {
    let turns: Vec<String> = line
        .split(TURN_SEPARATOR)
        .map(normalize)
        .filter(|t| !t.is_empty())
        .collect();
    (turns.len() >= 2).then_some(Dialog { turns })
}

pub fn load_dialogs(path: impl AsRef<Path>) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dialogs: Vec<Dialog> = text.lines().filter_map(parse_dialog).collect();
    if dialogs.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no dialog with at least two turns".into(),
        });
    }
    Ok(dialogs)
}

/// Non-overlapping consecutive pairs `(t1,t2), (t3,t4), …`; an odd trailing
/// turn is dropped.
pub fn make_pairs(dialog: &Dialog) -> Vec<(String, String)> {
    dialog
        .turns
        .chunks_exact(2)
        .map(|p| (p[0].clone(), p[1].clone()))
        .collect()
}

/// Uniform sample without replacement of `round(fraction·n)` items, kept in
/// their original order. `fraction == 1.0` is the identity.
pub fn subsample<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(items.to_vec());
    }
    let size = (fraction * items.len() as f64).round() as usize;
    if size == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} pairs leaves nothing to train on",
            items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, items.len(), size).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| items[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub query: String,
    pub response: String,
}

/// A tokenized pair together with its source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub pair: DialogPair,
    pub query: String,
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub fraction: f64,
}

fn text_pairs(dialogs: &[Dialog]) -> Vec<TextPair> {
    dialogs
        .iter()
        .flat_map(make_pairs)
        .map(|(query, response)| TextPair { query, response })
        .collect()
}

/// Paired text splits plus a tokenizer learned from the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCorpus {
    pub tokenizer: Tokenizer,
    pub train: Vec<TextPair>,
    pub valid: Vec<TextPair>,
    pub test: Vec<TextPair>,
}

impl PreparedCorpus {
    pub fn from_dialogs(
        train: &[Dialog],
        valid: &[Dialog],
        test: &[Dialog],
        target_vocab: usize,
    ) -> Result<Self> {
        let train = text_pairs(train);
        let tokenizer = Tokenizer::train(
            train
                .iter()
                .flat_map(|p| [p.query.as_str(), p.response.as_str()]),
            target_vocab,
        )?;
        Ok(Self {
            tokenizer,
            train,
            valid: text_pairs(valid),
            test: text_pairs(test),
        })
    }

    /// Loads the three corpus files. Validation and test files are optional;
    /// a missing one yields an empty split.
    pub fn load(
        train: &Path,
        valid: Option<&Path>,
        test: Option<&Path>,
        target_vocab: usize,
    ) -> Result<Self> {
        let train = load_dialogs(train)?;
        let valid = valid.map(load_dialogs).transpose()?.unwrap_or_default();
        let test = test.map(load_dialogs).transpose()?.unwrap_or_default();
        Self::from_dialogs(&train, &valid, &test, target_vocab)
    }

    pub fn encode(&self, pairs: &[TextPair]) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.query.is_empty() || p.response.is_empty() {
                continue;
            }
            let query = self.tokenizer.encode(&p.query)?;
            let response = self.tokenizer.encode_response(&p.response)?;
            let pair = DialogPair::new(
                query.into_iter().map(|t| t as usize).collect(),
                response.into_iter().map(|t| t as usize).collect(),
            )?;
            out.push(Example {
                pair,
                query: p.query.clone(),
                response: p.response.clone(),
            });
        }
        Ok(out)
    }

    /// Training subset at `fraction`; validation and test stay full-sized.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<CorpusSplit> {
        let train = subsample(&self.train, fraction, seed)?;
        Ok(CorpusSplit {
            train: self.encode(&train)?,
            valid: self.encode(&self.valid)?,
            test: self.encode(&self.test)?,
            fraction,
        })
    }

    /// Normalized responses of the full training split, for novelty.
    pub fn training_responses(&self) -> BTreeSet<String> {
        self.train.iter().map(|p| normalize(&p.response)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_json(path, self)
    }

    pub fn open(path: &Path) -> Result<Self> {
        crate::checkpoint::read_json(path)
    }
}
