//! Corpus BLEU, novelty and diversity.
//!
//! BLEU works on whitespace tokens of detokenized text, so scores do not
//! depend on the subword vocabulary. Novelty and diversity compare whole
//! responses after whitespace normalization.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::normalize;
use crate::error::{Error, Result};

pub const MAX_BLEU_ORDER: usize = 4;

/// One results row: BLEU1..4, novelty, diversity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub novelty: f64,
    pub diversity: f64,
}

impl MetricRow {
    pub fn bleu(&self, n: usize) -> Option<f64> {
        match n {
            1 => Some(self.bleu1),
            2 => Some(self.bleu2),
            3 => Some(self.bleu3),
            4 => Some(self.bleu4),
            _ => None,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.novelty,
            self.diversity,
        ]
    }
}

/// Hypotheses with their references and the training-response population.
#[derive(Debug, Clone)]
pub struct EvalBatch<'a> {
    pub hypotheses: &'a [String],
    pub references: &'a [String],
    pub training_responses: &'a BTreeSet<String>,
}

impl EvalBatch<'_> {
    pub fn score(&self) -> Result<MetricRow> {
        if self.hypotheses.len() != self.references.len() {
            return Err(Error::Shape {
                op: "eval_batch",
                lhs: vec![self.hypotheses.len()],
                rhs: vec![self.references.len()],
            });
        }
        let b = |n| bleu(self.hypotheses, self.references, n);
        Ok(MetricRow {
            bleu1: b(1)?,
            bleu2: b(2)?,
            bleu3: b(3)?,
            bleu4: b(4)?,
            novelty: novelty(self.hypotheses, self.training_responses)?,
            diversity: diversity(self.hypotheses)?,
        })
    }
}

fn ngram_counts<'t, 's>(tokens: &'t [&'s str], k: usize) -> HashMap<&'t [&'s str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-`n` with uniform weights and brevity penalty
/// `exp(min(0, 1 - ref_len / hyp_len))`. For orders ≥ 2 a zero match count
/// is smoothed by adding one to numerator and denominator.
pub fn bleu(hypotheses: &[String], references: &[String], n: usize) -> Result<f64> {
    if !(1..=MAX_BLEU_ORDER).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("BLEU hypotheses"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Shape {
            op: "bleu",
            lhs: vec![hypotheses.len()],
            rhs: vec![references.len()],
        });
    }
    let mut matches = [0usize; MAX_BLEU_ORDER];
    let mut totals = [0usize; MAX_BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for k in 1..=n {
            let hc = ngram_counts(&ht, k);
            let rc = ngram_counts(&rt, k);
            totals[k - 1] += ht.len().saturating_sub(k - 1);
            matches[k - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let (mut num, mut den) = (matches[k] as f64, totals[k] as f64);
        if matches[k] == 0 {
            if k == 0 {
                return Ok(0.0);
            }
            num += 1.0;
            den += 1.0;
        }
        log_sum += (num / den).ln();
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / n as f64).exp())
}

/// Share of hypotheses absent from the training responses.
pub fn novelty(hypotheses: &[String], training_responses: &BTreeSet<String>) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("novelty hypotheses"));
    }
    let novel = hypotheses
        .iter()
        .filter(|h| !training_responses.contains(&normalize(h)))
        .count();
    Ok(novel as f64 / hypotheses.len() as f64)
}

/// Distinct hypotheses divided by the number of hypotheses.
pub fn diversity(hypotheses: &[String]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("diversity hypotheses"));
    }
    let unique: HashSet<String> = hypotheses.iter().map(|h| normalize(h)).collect();
    Ok(unique.len() as f64 / hypotheses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_hand_cases() {
        let cases: [(&[&str], &[&str], usize, f64); 6] = [
            (&["a b c d"], &["a b c d"], 4, 1.0),
            (&["a b c"], &["a b d"], 1, 2.0 / 3.0),
            (&["the the the the"], &["the cat"], 1, 0.25),
            (&["a b c d"], &["a b c e"], 2, 0.5f64.sqrt()),
            (&["a b"], &["a b c d"], 1, (-1.0f64).exp()),
            (&["a b"], &["b a"], 2, 0.5f64.sqrt()),
        ];
        for (h, r, n, expect) in cases {
            let got = bleu(&s(h), &s(r), n).unwrap();
            assert!((got - expect).abs() < 1e-9, "{h:?} vs {r:?}: {got} != {expect}");
        }
    }

    #[test]
    fn bleu_errors_and_empty_hypothesis() {
        assert!(bleu(&[], &[], 4).is_err());
        assert!(bleu(&s(&["a"]), &s(&["a"]), 5).is_err());
        assert_eq!(bleu(&s(&[""]), &s(&["a b"]), 2).unwrap(), 0.0);
        let got = bleu(&s(&["", "a b"]), &s(&["x", "a b"]), 1).unwrap();
        assert!((got - (1.0f64 - 3.0 / 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn novelty_and_diversity_examples() {
        let train: BTreeSet<String> = ["x".to_string()].into();
        assert_eq!(novelty(&s(&["x", "x "]), &train).unwrap(), 0.0);
        assert_eq!(novelty(&s(&["x", "y"]), &train).unwrap(), 0.5);
        assert_eq!(novelty(&s(&["y", "z"]), &train).unwrap(), 1.0);
        assert_eq!(diversity(&s(&["q"; 5])).unwrap(), 0.2);
        assert_eq!(diversity(&s(&["a", "b", "c"])).unwrap(), 1.0);
        assert_eq!(diversity(&s(&["a", "a", "b", "c"])).unwrap(), 0.75);
        assert!(novelty(&[], &train).is_err());
        assert!(diversity(&[]).is_err());
    }

    #[test]
    fn row_from_batch() {
        let refs = s(&["hello there", "good bye"]);
        let train: BTreeSet<String> = ["hello there".to_string()].into();
        let row = EvalBatch {
            hypotheses: &refs,
            references: &refs,
            training_responses: &train,
        }
        .score()
        .unwrap();
        assert_eq!(row.bleu1, 1.0);
        assert!((row.bleu4 - 1.0).abs() < 1e-12);
        assert_eq!(row.novelty, 0.5);
        assert_eq!(row.diversity, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn metrics_are_ratios_and_order_invariant(
            pairs in proptest::collection::vec(("[abc]( [abc]){0,5}", "[abc]( [abc]){0,5}"), 1..6)
        ) {
            let hyps: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
            let mut rh = hyps.clone();
            let mut rr = refs.clone();
            rh.reverse();
            rr.reverse();
            for n in 1..=4 {
                let b = bleu(&hyps, &refs, n).unwrap();
                proptest::prop_assert!((0.0..=1.0).contains(&b));
                proptest::prop_assert!((b - bleu(&rh, &rr, n).unwrap()).abs() < 1e-12);
                proptest::prop_assert!((bleu(&hyps, &hyps, n).unwrap() - 1.0).abs() < 1e-12);
            }
            let d = diversity(&hyps).unwrap();
            proptest::prop_assert!(d >= 1.0 / hyps.len() as f64 && d <= 1.0);
            proptest::prop_assert_eq!(d, diversity(&rh).unwrap());
            let train: BTreeSet<String> = refs.iter().cloned().collect();
            proptest::prop_assert_eq!(novelty(&hyps, &train).unwrap(), novelty(&rh, &train).unwrap());
        }
    }
}
