//! Versioned JSON checkpoints and small file helpers.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! exact rounding, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationRegime;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::tokenizer::Tokenizer;

pub const CHECKPOINT_FORMAT: &str = "dynprompt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` through a temporary sibling and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub learning_rate: Option<f64>,
    pub epoch: Option<usize>,
    pub val_bleu: Option<f64>,
    pub train_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub lm: LanguageModel,
    pub regime: AdaptationRegime,
    pub tokenizer: Tokenizer,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(lm: LanguageModel, regime: AdaptationRegime, tokenizer: Tokenizer) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            lm,
            regime,
            tokenizer,
            meta: CheckpointMeta::default(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                    ckpt.format, ckpt.version
                ),
            });
        }
        ckpt.regime.validate()?;
        if ckpt.tokenizer.vocab_size() > ckpt.lm.vocab_size() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "tokenizer vocabulary exceeds model vocabulary".into(),
            });
        }
        Ok(ckpt)
    }
}
