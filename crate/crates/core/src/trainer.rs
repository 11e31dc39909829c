//! Optimization loop, learning-rate sweep and best-checkpoint selection.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{trainable_parameters, AdaptationRegime, BoundModel, DialogPair};
use crate::corpus::Example;
use crate::decode::decode_responses;
use crate::error::{Error, Result};
use crate::metrics::bleu;
use crate::model::{LanguageModel, ParamGroup, Parameterized};
use crate::tensor::{Tape, Var};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-BLEU improvement before stopping.
    pub patience_epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// BLEU order used for model selection.
    pub selection_order: usize,
    pub max_new_tokens: usize,
    pub grad_clip: f64,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 300,
            patience_epochs: 100,
            eval_every: 1,
            seed: 0,
            selection_order: 4,
            max_new_tokens: 32,
            grad_clip: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, max_epochs and eval_every must be at least 1");
        }
        if self.patience_epochs > self.max_epochs {
            return bad("patience_epochs exceeds max_epochs");
        }
        if !(1..=4).contains(&self.selection_order) {
            return bad("selection_order must be in 1..=4");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub trials: usize,
    pub lr_low: f64,
    pub lr_high: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trials: 12,
            lr_low: 3e-6,
            lr_high: 0.009,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("sweep needs at least one trial".into()));
        }
        if !(self.lr_low > 0.0 && self.lr_low < self.lr_high) {
            return Err(Error::Config(format!(
                "learning-rate range [{}, {}] is empty",
                self.lr_low, self.lr_high
            )));
        }
        Ok(())
    }

    /// Log-uniform grid from `lr_low` to `lr_high` inclusive. A single trial
    /// uses the geometric midpoint.
    pub fn grid(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.trials;
        if n == 1 {
            return Ok(vec![(self.lr_low * self.lr_high).sqrt()]);
        }
        let ratio = (self.lr_high / self.lr_low).ln();
        Ok((0..n)
            .map(|i| match i {
                0 => self.lr_low,
                i if i == n - 1 => self.lr_high,
                i => self.lr_low * (ratio * i as f64 / (n - 1) as f64).exp(),
            })
            .collect())
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, grad_clip: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], scale: f64) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..grad.len() {
            let g = grad[i] * scale;
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Applies one clipped update from the gradients on `tape` to every
    /// parameter in `trainable`. Returns the pre-clip gradient norm.
    pub fn apply(
        &mut self,
        tape: &Tape,
        lm: &mut LanguageModel,
        regime: &mut AdaptationRegime,
        trainable: &BTreeSet<ParamGroup>,
    ) -> f64 {
        let grads: BTreeMap<String, Vec<f64>> = tape
            .param_grads()
            .map(|(n, g)| (n.to_string(), g.to_vec()))
            .collect();
        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let mut visit = |name: &str, group: ParamGroup, t: &mut crate::tensor::Tensor| {
            if !trainable.contains(&group) {
                return;
            }
            if let Some(g) = grads.get(name) {
                self.update(name, t.data_mut(), g, scale);
            }
        };
        lm.visit_mut(&mut visit);
        regime.visit_mut(&mut visit);
        norm
    }
}

/// Binds the model, builds a loss with `loss_fn`, backpropagates and applies
/// one optimizer update. Returns the loss value before the update.
pub fn optimize_step(
    lm: &mut LanguageModel,
    regime: &mut AdaptationRegime,
    trainable: &BTreeSet<ParamGroup>,
    adam: &mut Adam,
    loss_fn: impl FnOnce(&mut Tape, &BoundModel) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, lm, regime, trainable)?;
    let step = adam.steps() as usize + 1;
    let loss = match loss_fn(&mut tape, &bound) {
        Err(Error::Numeric(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
        other => other?,
    };
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    tape.backward(loss)?;
    adam.apply(&tape, lm, regime, trainable);
    Ok(value)
}

/// Mean over the batch of each pair's mean response-token loss.
pub fn batch_loss(tape: &mut Tape, bound: &BoundModel, batch: &[&DialogPair]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for pair in batch {
        let l = bound.sequence_loss(tape, pair)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or(Error::EmptyInput("batch"))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub learning_rate: f64,
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_bleu: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub lm: LanguageModel,
    pub regime: AdaptationRegime,
    pub learning_rate: f64,
    pub best_val_bleu: f64,
    pub epoch_of_best: usize,
    pub epochs_run: usize,
    pub steps: usize,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
    /// Validation score per evaluated epoch.
    pub val_bleu_history: Vec<f64>,
}

/// Training loop with a caller-supplied validation score. Epochs are numbered
/// from 1; the returned model is the one from the best-scoring epoch.
pub fn train_with_evaluator(
    lm: &LanguageModel,
    regime: &AdaptationRegime,
    train: &[DialogPair],
    config: &TrainConfig,
    mut evaluate: impl FnMut(&LanguageModel, &AdaptationRegime) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult> {
    config.validate()?;
    regime.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training pairs"));
    }
    let trainable = trainable_parameters(regime);
    if trainable.is_empty() {
        return Err(Error::Config("regime has no trainable parameters".into()));
    }
    let mut lm = lm.clone();
    let mut regime = regime.clone();
    let mut adam = Adam::new(config.learning_rate, config.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, LanguageModel, AdaptationRegime)> = None;
    let mut loss_history = Vec::new();
    let mut val_bleu_history = Vec::new();
    let mut steps = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&DialogPair> = chunk.iter().map(|&i| &train[i]).collect();
            epoch_loss += optimize_step(&mut lm, &mut regime, &trainable, &mut adam, |t, b| {
                batch_loss(t, b, &batch)
            })?;
            batches += 1;
            steps += 1;
        }
        let out_of_steps = config.max_steps.is_some_and(|m| steps >= m);
        if batches == 0 {
            break;
        }
        epochs_run = epoch;
        let train_loss = epoch_loss / batches as f64;
        loss_history.push(train_loss);
        let last = epoch == config.max_epochs || out_of_steps;
        let mut val_bleu = None;
        if epoch % config.eval_every == 0 || last {
            let score = evaluate(&lm, &regime)?;
            val_bleu_history.push(score);
            val_bleu = Some(score);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, lm.clone(), regime.clone()));
            }
        }
        on_epoch(&EpochRecord {
            learning_rate: config.learning_rate,
            epoch,
            steps,
            train_loss,
            val_bleu,
        });
        let since_best = best.as_ref().map_or(0, |b| epoch - b.1);
        if last || since_best >= config.patience_epochs {
            break;
        }
    }
    let (best_val_bleu, epoch_of_best, lm, regime) = match best {
        Some(b) => b,
        None => {
            // step budget ran out before the first epoch finished
            let score = evaluate(&lm, &regime)?;
            val_bleu_history.push(score);
            (score, 0, lm, regime)
        }
    };
    Ok(TrainResult {
        lm,
        regime,
        learning_rate: config.learning_rate,
        best_val_bleu,
        epoch_of_best,
        epochs_run,
        steps,
        loss_history,
        val_bleu_history,
    })
}

/// Corpus BLEU of greedy responses against gold responses.
pub fn validation_bleu(
    lm: &LanguageModel,
    regime: &AdaptationRegime,
    tokenizer: &Tokenizer,
    examples: &[Example],
    order: usize,
    max_new_tokens: usize,
) -> Result<f64> {
    let hyps = decode_responses(regime, lm, tokenizer, examples, max_new_tokens)?;
    let refs: Vec<String> = examples.iter().map(|e| e.response.clone()).collect();
    bleu(&hyps, &refs, order)
}

/// Trains on `train`, selecting by validation BLEU over `valid`.
pub fn train(
    lm: &LanguageModel,
    regime: &AdaptationRegime,
    tokenizer: &Tokenizer,
    train: &[Example],
    valid: &[Example],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult> {
    if valid.is_empty() {
        return Err(Error::EmptyInput("validation pairs"));
    }
    let pairs: Vec<DialogPair> = train.iter().map(|e| e.pair.clone()).collect();
    train_with_evaluator(
        lm,
        regime,
        &pairs,
        config,
        |lm, r| validation_bleu(lm, r, tokenizer, valid, config.selection_order, config.max_new_tokens),
        on_epoch,
    )
}

/// One row of the per-trial sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub learning_rate: f64,
    pub best_val_bleu: Option<f64>,
    pub epoch_of_best: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best: TrainResult,
    pub trials: Vec<TrialRecord>,
}

/// Runs `run(lr)` for each learning rate and keeps the best validation score;
/// ties go to the smaller learning rate.
pub fn sweep_with(learning_rates: &[f64], mut run: impl FnMut(f64) -> Result<TrainResult>) -> Result<SweepOutcome> {
    let mut lrs = learning_rates.to_vec();
    lrs.sort_by(f64::total_cmp);
    let mut best: Option<TrainResult> = None;
    let mut trials = Vec::with_capacity(lrs.len());
    for lr in lrs {
        match run(lr) {
            Ok(r) => {
                trials.push(TrialRecord {
                    learning_rate: lr,
                    best_val_bleu: Some(r.best_val_bleu),
                    epoch_of_best: Some(r.epoch_of_best),
                    error: None,
                });
                if best.as_ref().is_none_or(|b| r.best_val_bleu > b.best_val_bleu) {
                    best = Some(r);
                }
            }
            Err(e) => trials.push(TrialRecord {
                learning_rate: lr,
                best_val_bleu: None,
                epoch_of_best: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some(best) => Ok(SweepOutcome { best, trials }),
        None => Err(Error::SweepFailed(
            trials
                .iter()
                .map(|t| format!("lr {:e}: {}", t.learning_rate, t.error.as_deref().unwrap_or("")))
                .collect(),
        )),
    }
}

/// Learning-rate sweep of [`train`] over the configured grid.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    lm: &LanguageModel,
    regime: &AdaptationRegime,
    tokenizer: &Tokenizer,
    train_set: &[Example],
    valid: &[Example],
    config: &TrainConfig,
    sweep_config: &SweepConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<SweepOutcome> {
    let grid = sweep_config.grid()?;
    sweep_with(&grid, |lr| {
        let cfg = TrainConfig {
            learning_rate: lr,
            ..config.clone()
        };
        train(lm, regime, tokenizer, train_set, valid, &cfg, &mut on_epoch)
    })
}
