//! Experiment pipeline behind the command-line tool: corpus preparation,
//! surrogate pre-training, the regime × fraction grid, export and chat.
//!
//! Everything lives under one output directory:
//!
//! ```text
//! corpus.json               prepared corpus + tokenizer
//! base.json                 pre-trained base checkpoint
//! cells/<regime>-<frac>/    log.jsonl, trials.json, checkpoint.json, row.json
//! report.json, report.csv   one row per grid cell
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{trainable_parameters, AdaptationRegime, BoundModel, RegimeKind};
use crate::checkpoint::{read_json, write_atomic, write_json, Checkpoint, CheckpointMeta};
use crate::corpus::{CorpusSplit, Example, PreparedCorpus};
use crate::decode::{evaluate, greedy_decode};
use crate::error::{Error, Result};
use crate::metrics::MetricRow;
use crate::model::{LanguageModel, ModelConfig};
use crate::tensor::{Tape, Var};
use crate::tokenizer::EOS;
use crate::trainer::{optimize_step, sweep, Adam, EpochRecord, SweepConfig, TrainConfig};

pub const DEFAULT_FRACTIONS: [f64; 6] = [0.1, 0.2, 0.3, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub target_vocab: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train.txt"),
            valid: Some(PathBuf::from("data/valid.txt")),
            test: Some(PathBuf::from("data/test.txt")),
            target_vocab: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 3e-3,
            batch_size: 8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub regimes: Vec<RegimeKind>,
    pub fractions: Vec<f64>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            regimes: RegimeKind::ALL.to_vec(),
            fractions: DEFAULT_FRACTIONS.to_vec(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        if self.regimes.is_empty() {
            return Err(Error::Config("at least one regime is required".into()));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("fractions must lie in (0, 1]".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("fractions must be strictly ascending".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.learning_rate > 0.0) {
            return Err(Error::Config("pretrain batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.output_dir.join("corpus.json")
    }

    pub fn base_path(&self) -> PathBuf {
        self.output_dir.join("base.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join("report.json")
    }

    pub fn cell_dir(&self, regime: RegimeKind, fraction: f64) -> PathBuf {
        self.output_dir
            .join("cells")
            .join(format!("{regime}-{fraction:.2}"))
    }

    /// Longest query every regime can hold with room for one response token.
    pub fn max_query_len(&self) -> usize {
        (self.model.max_positions.saturating_sub(1)) / 2
    }
}

/// Stable seed for one grid cell.
pub fn cell_seed(master: u64, regime: RegimeKind, fraction: f64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(regime.as_str().as_bytes());
    h.update(fraction.to_bits().to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Loads the corpus files named in the config and stores the prepared corpus.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedCorpus> {
    let c = &cfg.corpus;
    let corpus = PreparedCorpus::load(&c.train, c.valid.as_deref(), c.test.as_deref(), c.target_vocab)?;
    if corpus.tokenizer.vocab_size() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer vocabulary {} exceeds model vocab_size {}",
            corpus.tokenizer.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    corpus.save(&cfg.corpus_path())?;
    Ok(corpus)
}

/// Token sequences for language-model pre-training: every training
/// utterance followed by `EOS`.
pub fn pretraining_sequences(corpus: &PreparedCorpus, pairs: &[crate::corpus::TextPair]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for p in pairs {
        for text in [&p.query, &p.response] {
            let ids = corpus.tokenizer.encode_response(text)?;
            out.push(ids.into_iter().map(|t| t as usize).collect());
        }
    }
    Ok(out)
}

/// Next-token loss over every position of `seq`, truncated to fit.
fn lm_sequence_loss(tape: &mut Tape, bound: &BoundModel, seq: &[usize]) -> Result<Option<Var>> {
    let len = (seq.len().saturating_sub(1)).min(bound.lm.max_positions());
    if len == 0 {
        return Ok(None);
    }
    let x = bound.lm.embed(tape, None, &seq[..len])?;
    let positions: Vec<usize> = (0..len).collect();
    let logits = bound.lm.forward(tape, x, &positions)?;
    let loss = tape.masked_cross_entropy(logits, &seq[1..=len], &vec![true; len])?;
    Ok(Some(loss))
}

/// Plain language-model training over all positions, for a fixed number of
/// steps. Zero steps returns `lm` unchanged.
pub fn pretrain_lm(lm: &LanguageModel, sequences: &[Vec<usize>], cfg: &PretrainConfig, seed: u64) -> Result<LanguageModel> {
    let mut lm = lm.clone();
    if cfg.steps == 0 {
        return Ok(lm);
    }
    let usable: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::EmptyInput("pre-training sequences"));
    }
    let mut regime = AdaptationRegime::fine_tune();
    let trainable = trainable_parameters(&regime);
    let mut adam = Adam::new(cfg.learning_rate, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(usable[order[cursor]]);
            cursor += 1;
        }
        optimize_step(&mut lm, &mut regime, &trainable, &mut adam, |tape, bound| {
            let mut total: Option<Var> = None;
            for seq in &batch {
                if let Some(l) = lm_sequence_loss(tape, bound, seq)? {
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
            }
            let total = total.ok_or(Error::EmptyInput("batch"))?;
            Ok(tape.scale(total, 1.0 / batch.len() as f64))
        })?;
    }
    Ok(lm)
}

/// Per-token perplexity of `sequences` under `lm`.
pub fn perplexity(lm: &LanguageModel, sequences: &[Vec<usize>]) -> Result<f64> {
    let regime = AdaptationRegime::fine_tune();
    let (mut nll, mut tokens) = (0.0, 0usize);
    for seq in sequences {
        let mut tape = Tape::new();
        let bound = BoundModel::frozen(&mut tape, lm, &regime)?;
        if let Some(l) = lm_sequence_loss(&mut tape, &bound, seq)? {
            let n = (seq.len() - 1).min(lm.config.max_positions);
            nll += tape.scalar_value(l) * n as f64;
            tokens += n;
        }
    }
    if tokens == 0 {
        return Err(Error::EmptyInput("perplexity sequences"));
    }
    Ok((nll / tokens as f64).exp())
}

/// Initializes the LM sized to the tokenizer, pre-trains it on the training
/// split and stores the base checkpoint.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let corpus = PreparedCorpus::open(&cfg.corpus_path())?;
    let model = ModelConfig {
        vocab_size: corpus.tokenizer.vocab_size(),
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    let lm = LanguageModel::new(model)?;
    let seqs = pretraining_sequences(&corpus, &corpus.train)?;
    let lm = pretrain_lm(&lm, &seqs, &cfg.pretrain, cfg.seed)?;
    let mut ckpt = Checkpoint::new(lm, AdaptationRegime::fine_tune(), corpus.tokenizer.clone());
    ckpt.meta.train_steps = Some(cfg.pretrain.steps);
    ckpt.save(&cfg.base_path())?;
    Ok(ckpt)
}

/// Drops examples whose query cannot be held by every regime.
pub fn retain_fitting(examples: Vec<Example>, max_query: usize) -> Vec<Example> {
    examples.into_iter().filter(|e| e.pair.m() <= max_query).collect()
}

/// Training subset plus full validation and test sets, filtered to fit.
pub fn cell_split(cfg: &ExperimentConfig, corpus: &PreparedCorpus, fraction: f64, seed: u64) -> Result<CorpusSplit> {
    let s = corpus.split(fraction, seed)?;
    let max_q = cfg.max_query_len();
    let split = CorpusSplit {
        train: retain_fitting(s.train, max_q),
        valid: retain_fitting(s.valid, max_q),
        test: retain_fitting(s.test, max_q),
        fraction,
    };
    if split.train.is_empty() || split.valid.is_empty() || split.test.is_empty() {
        return Err(Error::EmptyInput("train, validation and test splits must be non-empty"));
    }
    Ok(split)
}

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub regime: RegimeKind,
    pub fraction: f64,
    pub metrics: Option<MetricRow>,
    pub best_lr: Option<f64>,
    pub epoch_of_best: Option<usize>,
    pub val_bleu: Option<f64>,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "regime",
    "fraction",
    "BLEU1",
    "BLEU2",
    "BLEU3",
    "BLEU4",
    "Novelty",
    "Diversity",
    "best_lr",
    "epoch_of_best",
    "val_bleu",
    "train_pairs",
    "valid_pairs",
    "test_pairs",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(REPORT_COLUMNS).map_err(ser)?;
        for r in &self.rows {
            let m = r.metrics.map(|m| m.values());
            let mut rec = vec![r.regime.label().to_string(), r.fraction.to_string()];
            rec.extend((0..6).map(|i| opt(m.map(|v| v[i]))));
            rec.extend([
                opt(r.best_lr),
                opt(r.epoch_of_best),
                opt(r.val_bleu),
                r.train_pairs.to_string(),
                r.valid_pairs.to_string(),
                r.test_pairs.to_string(),
                r.error.clone().unwrap_or_default(),
            ]);
            w.write_record(&rec).map_err(ser)?;
        }
        w.into_inner().map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Writes `bytes` unless the file already holds exactly them.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    write_atomic(path, bytes)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Adapts the base model under one regime and data fraction, then scores it
/// on the test set. Finished cells are read back from their marker file.
pub fn run_cell(
    cfg: &ExperimentConfig,
    corpus: &PreparedCorpus,
    base: &Checkpoint,
    regime: RegimeKind,
    fraction: f64,
) -> Result<ReportRow> {
    let dir = cfg.cell_dir(regime, fraction);
    let marker = dir.join("row.json");
    if marker.exists() {
        return read_json(&marker);
    }
    let seed = cell_seed(cfg.seed, regime, fraction);
    let split = cell_split(cfg, corpus, fraction, seed)?;
    let init = AdaptationRegime::init(regime, &base.lm.config, cfg.max_query_len(), seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut log = Vec::new();
    let outcome = sweep(
        &base.lm,
        &init,
        &base.tokenizer,
        &split.train,
        &split.valid,
        &train_cfg,
        &cfg.sweep,
        |rec: &EpochRecord| {
            if let Ok(line) = serde_json::to_string(rec) {
                log.extend_from_slice(line.as_bytes());
                log.push(b'\n');
            }
        },
    );
    write_atomic(&dir.join("log.jsonl"), &log)?;
    let mut row = ReportRow {
        regime,
        fraction,
        metrics: None,
        best_lr: None,
        epoch_of_best: None,
        val_bleu: None,
        train_pairs: split.train.len(),
        valid_pairs: split.valid.len(),
        test_pairs: split.test.len(),
        seed,
        error: None,
    };
    match outcome {
        Ok(out) => {
            write_json(&dir.join("trials.json"), &out.trials)?;
            let best = out.best;
            let training = corpus.training_responses();
            row.metrics = Some(evaluate(
                &best.regime,
                &best.lm,
                &base.tokenizer,
                &split.test,
                &training,
                cfg.train.max_new_tokens,
            )?);
            row.best_lr = Some(best.learning_rate);
            row.epoch_of_best = Some(best.epoch_of_best);
            row.val_bleu = Some(best.best_val_bleu);
            let mut ckpt = Checkpoint::new(best.lm, best.regime, base.tokenizer.clone());
            ckpt.meta = CheckpointMeta {
                learning_rate: Some(best.learning_rate),
                epoch: Some(best.epoch_of_best),
                val_bleu: Some(best.best_val_bleu),
                train_steps: Some(best.steps),
            };
            ckpt.save(&dir.join("checkpoint.json"))?;
        }
        Err(e @ (Error::SweepFailed(_) | Error::Divergence { .. })) => row.error = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    write_json(&marker, &row)?;
    Ok(row)
}

/// Runs every (regime, fraction) cell on up to `cfg.workers` threads and
/// writes `report.json` and `report.csv`.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let corpus = PreparedCorpus::open(&cfg.corpus_path())?;
    let base = Checkpoint::load(&cfg.base_path())?;
    let cells: Vec<(RegimeKind, f64)> = cfg
        .regimes
        .iter()
        .flat_map(|&r| cfg.fractions.iter().map(move |&f| (r, f)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ReportRow>>>> = Mutex::new(cells.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(regime, fraction)) = cells.get(i) else { break };
                let r = run_cell(cfg, &corpus, &base, regime, fraction);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    let report = Report { rows };
    write_if_changed(&cfg.report_path(), &json_bytes(&report)?)?;
    write_if_changed(&cfg.output_dir.join("report.csv"), &report.to_csv()?)?;
    Ok(report)
}

/// Plot data: for each metric, one series per regime over fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub fractions: Vec<f64>,
    pub metrics: BTreeMap<String, BTreeMap<String, Vec<(f64, Option<f64>)>>>,
}

pub const METRIC_NAMES: [&str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "novelty", "diversity"];

pub fn plot_data(report: &Report) -> PlotData {
    let mut fractions: Vec<f64> = report.rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut metrics: BTreeMap<String, BTreeMap<String, Vec<(f64, Option<f64>)>>> = BTreeMap::new();
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| a.regime.cmp(&b.regime).then(a.fraction.total_cmp(&b.fraction)));
    for r in rows {
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            metrics
                .entry(name.to_string())
                .or_default()
                .entry(r.regime.as_str().to_string())
                .or_default()
                .push((r.fraction, r.metrics.map(|m| m.values()[i])));
        }
    }
    PlotData { fractions, metrics }
}

/// Writes `table.csv` and `plot.json` into `out_dir`. Nothing is written for
/// a report without rows.
pub fn export(report_path: &Path, out_dir: &Path) -> Result<[PathBuf; 2]> {
    let report: Report = read_json(report_path)?;
    if report.rows.is_empty() {
        return Err(Error::Format {
            path: report_path.to_path_buf(),
            msg: "report has no rows".into(),
        });
    }
    let table = report.to_csv()?;
    let plot = json_bytes(&plot_data(&report))?;
    let paths = [out_dir.join("table.csv"), out_dir.join("plot.json")];
    write_atomic(&paths[0], &table)?;
    write_atomic(&paths[1], &plot)?;
    Ok(paths)
}

/// Test-set metrics of a stored checkpoint.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<MetricRow> {
    let corpus = PreparedCorpus::open(&cfg.corpus_path())?;
    if corpus.tokenizer != ckpt.tokenizer {
        return Err(Error::State("checkpoint tokenizer differs from the prepared corpus".into()));
    }
    let test = retain_fitting(corpus.encode(&corpus.test)?, cfg.max_query_len());
    evaluate(
        &ckpt.regime,
        &ckpt.lm,
        &ckpt.tokenizer,
        &test,
        &corpus.training_responses(),
        cfg.train.max_new_tokens,
    )
}

/// Greedy response to one typed query.
pub fn respond(ckpt: &Checkpoint, query: &str, max_new_tokens: usize) -> Result<String> {
    let ids: Vec<usize> = ckpt.tokenizer.encode(query)?.into_iter().map(|t| t as usize).collect();
    let out = greedy_decode(&ckpt.regime, &ckpt.lm, &ids, max_new_tokens)?;
    let vocab = ckpt.tokenizer.vocab_size();
    let ids: Vec<u32> = out
        .into_iter()
        .filter(|&t| t < vocab && t != EOS as usize)
        .map(|t| t as u32)
        .collect();
    ckpt.tokenizer.decode(&ids)
}

/// Interactive loop: one response per non-empty line until end of input.
pub fn chat(ckpt: &Checkpoint, max_new_tokens: usize, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let io = |e| Error::io("<stdio>", e);
    let mut lines = input.lines();
    loop {
        write!(output, "> ").map_err(io)?;
        output.flush().map_err(io)?;
        let Some(line) = lines.next() else {
            writeln!(output).map_err(io)?;
            return Ok(());
        };
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match respond(ckpt, &line, max_new_tokens) {
            Ok(text) => writeln!(output, "{text}").map_err(io)?,
            Err(e @ Error::Capacity { .. }) => writeln!(output, "[input too long: {e}]").map_err(io)?,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_seeds_are_stable_and_distinct() {
        let a = cell_seed(7, RegimeKind::FineTune, 0.1);
        assert_eq!(a, cell_seed(7, RegimeKind::FineTune, 0.1));
        assert_ne!(a, cell_seed(7, RegimeKind::FineTune, 0.2));
        assert_ne!(a, cell_seed(7, RegimeKind::SoftPrompt, 0.1));
        assert_ne!(a, cell_seed(8, RegimeKind::FineTune, 0.1));
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();
        let unsorted = ExperimentConfig {
            fractions: vec![0.5, 0.1],
            ..Default::default()
        };
        assert!(matches!(unsorted.validate(), Err(Error::Config(_))));
        let none = ExperimentConfig {
            regimes: vec![],
            ..Default::default()
        };
        assert!(none.validate().is_err());
        let text = "seed = 3\nregimes = [\"dynamic_prompt\"]\n[train]\nbatch_size = 4\n";
        let parsed: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(parsed.seed, 3);
        assert_eq!(parsed.train.batch_size, 4);
        assert_eq!(parsed.train.max_epochs, 300);
        assert_eq!(parsed.regimes, vec![RegimeKind::DynamicPrompt]);
        assert_eq!(parsed.fractions, DEFAULT_FRACTIONS.to_vec());
    }

    #[test]
    fn zero_step_pretraining_is_identity() {
        let lm = LanguageModel::new(ModelConfig {
            vocab_size: 260,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_positions: 8,
            controller_layers: 1,
            controller_heads: 2,
            seed: 1,
        })
        .unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert_eq!(pretrain_lm(&lm, &[vec![1, 2, 3]], &cfg, 0).unwrap(), lm);
    }
}
