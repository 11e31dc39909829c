//! Byte-level BPE tokenizer.
//!
//! Ids `0..256` are raw bytes, followed by the `EOS` and `PAD` specials and
//! then one id per learned merge. Every byte string is encodable, so there
//! is no unknown token.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::normalize;
use crate::error::{Error, Result};

pub const EOS: u32 = 256;
pub const PAD: u32 = 257;
const FIRST_MERGE: u32 = 258;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TokenizerState {
    trained: bool,
    merges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenizerState", into = "TokenizerState")]
pub struct Tokenizer {
    trained: bool,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    bytes: Vec<Vec<u8>>,
}

impl From<TokenizerState> for Tokenizer {
    fn from(s: TokenizerState) -> Self {
        let mut t = Tokenizer::from_merges(s.merges);
        t.trained = s.trained;
        t
    }
}

impl From<Tokenizer> for TokenizerState {
    fn from(t: Tokenizer) -> Self {
        TokenizerState {
            trained: t.trained,
            merges: t.merges,
        }
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut t = Tokenizer::from_merges(Vec::new());
        t.trained = false;
        t
    }
}

/// Splits normalized text into words, each carrying its leading space.
fn chunks(text: &str) -> Vec<&[u8]> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i] == b' ' {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

fn merge_pair(seq: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

impl Tokenizer {
    fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        bytes.push(Vec::new()); // EOS
        bytes.push(Vec::new()); // PAD
        let mut ranks = HashMap::new();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let mut joined = bytes[a as usize].clone();
            joined.extend_from_slice(&bytes[b as usize]);
            bytes.push(joined);
            ranks.insert((a, b), i as u32);
        }
        Self {
            trained: true,
            merges,
            ranks,
            bytes,
        }
    }

    /// Learns merges from `texts` until the vocabulary reaches `target_vocab`
    /// or no pair occurs at least twice. Ties go to the smallest pair.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, target_vocab: usize) -> Result<Self> {
        if target_vocab < FIRST_MERGE as usize {
            return Err(Error::Config(format!(
                "tokenizer vocabulary must hold at least {FIRST_MERGE} ids"
            )));
        }
        let mut words: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
        for text in texts {
            let norm = normalize(text);
            for c in chunks(&norm) {
                *words.entry(c.iter().map(|&b| b as u32).collect()).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = words.into_iter().collect();
        let mut merges = Vec::new();
        let mut next = FIRST_MERGE;
        while (next as usize) < target_vocab {
            let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_insert(0) += n;
                }
            }
            let Some((&pair, &count)) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            else {
                break;
            };
            if count < 2 {
                break;
            }
            for (w, _) in &mut words {
                merge_pair(w, pair, next);
            }
            merges.push(pair);
            next += 1;
        }
        Ok(Self::from_merges(merges))
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn vocab_size(&self) -> usize {
        self.bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    fn check_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("tokenizer used before training".into()))
        }
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut seq: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = seq
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|r| (*r, (p[0], p[1]))))
                .min();
            match best {
                Some((rank, pair)) => merge_pair(&mut seq, pair, FIRST_MERGE + rank),
                None => break,
            }
        }
        out.extend(seq);
    }

    /// Encodes raw bytes without normalization.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        self.check_trained()?;
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..bytes.len() {
            if bytes[i] == b' ' {
                self.encode_chunk(&bytes[start..i], &mut out);
                start = i;
            }
        }
        if start < bytes.len() {
            self.encode_chunk(&bytes[start..], &mut out);
        }
        Ok(out)
    }

    /// Encodes whitespace-normalized text.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.encode_bytes(normalize(text).as_bytes())
    }

    /// Encodes a response: normalized text followed by `EOS`.
    pub fn encode_response(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Concatenated bytes of `ids`; specials decode to nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        self.check_trained()?;
        let mut out = Vec::new();
        for &id in ids {
            let b = self.bytes.get(id as usize).ok_or(Error::Vocabulary {
                id: id as usize,
                size: self.bytes.len(),
            })?;
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}
