//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any gated criterion
//! fails. Criterion 8 is reported but never gates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynprompt::adaptation::{
    assemble_input, assembled_logits, loss_from_logits, sequence_loss, trainable_parameters, AdaptationRegime,
    BoundModel, DialogPair, RegimeKind,
};
use dynprompt::corpus::{normalize, PreparedCorpus, TextPair};
use dynprompt::decode::{decode_responses, evaluate};
use dynprompt::experiment::{self, ExperimentConfig, PretrainConfig, Report};
use dynprompt::metrics::{bleu, diversity, novelty};
use dynprompt::model::{controller_forward, embed, forward_lm, LanguageModel, ModelConfig, ParamGroup, Parameterized};
use dynprompt::trainer::{batch_loss, optimize_step, sweep, train_with_evaluator, Adam, SweepConfig, TrainConfig};
use dynprompt::{Tape, Tensor};

const MASTER_SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn small_config(vocab: usize, d: usize, max_positions: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        d_ff: 2 * d,
        max_positions,
        controller_layers: 2,
        controller_heads: 2,
        seed: 17,
    }
}

/// Parameter values flattened by name across model and regime.
fn snapshot(lm: &LanguageModel, regime: &AdaptationRegime) -> BTreeMap<String, (ParamGroup, Vec<f64>)> {
    let mut out = BTreeMap::new();
    let mut f = |n: &str, g: ParamGroup, t: &Tensor| {
        out.insert(n.to_string(), (g, t.data().to_vec()));
    };
    lm.visit(&mut f);
    regime.visit(&mut f);
    out
}

fn nudge(lm: &mut LanguageModel, regime: &mut AdaptationRegime, name: &str, i: usize, delta: f64) {
    let mut f = |n: &str, _: ParamGroup, t: &mut Tensor| {
        if n == name {
            t.data_mut()[i] += delta;
        }
    };
    lm.visit_mut(&mut f);
    regime.visit_mut(&mut f);
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = small_config(24, 16, 16);
    let lm = LanguageModel::new(cfg.clone()).unwrap();
    let pair = DialogPair::new(vec![3, 7, 1, 20], vec![5, 9, 2, 11, 0]).unwrap();
    let all: BTreeSet<ParamGroup> = ParamGroup::ALL.into_iter().collect();
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for kind in RegimeKind::ALL {
        let regime = AdaptationRegime::init(kind, &cfg, 6, 4).unwrap();
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &lm, &regime, &all).unwrap();
        let loss = bound.sequence_loss(&mut tape, &pair).unwrap();
        tape.backward(loss).unwrap();
        let grads: BTreeMap<String, Vec<f64>> = tape.param_grads().map(|(n, g)| (n.to_string(), g.to_vec())).collect();
        let params = snapshot(&lm, &regime);
        if grads.len() != params.len() {
            return outcome(false, format!("{kind}: {} gradients for {} parameters", grads.len(), params.len()));
        }
        for (name, (_, values)) in &params {
            for i in 0..values.len() {
                let (mut a, mut ra) = (lm.clone(), regime.clone());
                nudge(&mut a, &mut ra, name, i, step);
                let plus = sequence_loss(&ra, &a, &pair).unwrap().data()[0];
                let (mut b, mut rb) = (lm.clone(), regime.clone());
                nudge(&mut b, &mut rb, name, i, -step);
                let minus = sequence_loss(&rb, &b, &pair).unwrap().data()[0];
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grads[name][i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 120.0,
        format!("{checked} partials over 3 regimes, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn group_values(lm: &LanguageModel, regime: &AdaptationRegime) -> BTreeMap<ParamGroup, Vec<f64>> {
    let mut out: BTreeMap<ParamGroup, Vec<f64>> = BTreeMap::new();
    for (_, (g, v)) in snapshot(lm, regime) {
        out.entry(g).or_default().extend(v);
    }
    out
}

fn criterion_2() -> Outcome {
    let cfg = small_config(30, 16, 24);
    let lm0 = LanguageModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let pairs: Vec<DialogPair> = (0..8)
        .map(|_| {
            let q = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..30)).collect();
            let r = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..30)).collect();
            DialogPair::new(q, r).unwrap()
        })
        .collect();
    let batch: Vec<&DialogPair> = pairs.iter().collect();
    let mut details = Vec::new();
    let mut pass = true;
    for kind in [RegimeKind::SoftPrompt, RegimeKind::DynamicPrompt] {
        let mut lm = lm0.clone();
        let mut regime = AdaptationRegime::init(kind, &cfg, 8, 3).unwrap();
        let before = group_values(&lm, &regime);
        let trainable = trainable_parameters(&regime);
        let mut adam = Adam::new(1e-3, 1.0);
        for _ in 0..50 {
            optimize_step(&mut lm, &mut regime, &trainable, &mut adam, |t, b| batch_loss(t, b, &batch)).unwrap();
        }
        let after = group_values(&lm, &regime);
        let mut changed = Vec::new();
        for (g, v) in &before {
            let moved = after[g] != *v;
            if moved {
                changed.push(g.name());
            }
            if moved != trainable.contains(g) {
                pass = false;
            }
        }
        details.push(format!("{kind}: changed {changed:?}"));
    }
    outcome(pass, details.join("; "))
}

fn criterion_3() -> Outcome {
    let cfg = small_config(40, 16, 32);
    let lm = LanguageModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 3);
    let mut trials = 0;
    for _ in 0..20 {
        let q: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..40)).collect();
        let r: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..40)).collect();
        let pair = DialogPair::new(q, r).unwrap();
        for kind in RegimeKind::ALL {
            let regime = AdaptationRegime::init(kind, &cfg, 8, 5).unwrap();
            let ex = assemble_input(&regime, &lm, &pair).unwrap();
            let logits = assembled_logits(&lm, &ex).unwrap();
            let base = loss_from_logits(&logits, &ex).unwrap();
            let prefix = ex.layout.prompt_len + ex.layout.query_len;
            let masked_out: Vec<usize> = (0..ex.len()).filter(|&p| !ex.loss_mask[p]).collect();
            // every prompt and query position except the last query token,
            // which predicts the first response token
            if !(0..prefix - 1).all(|p| masked_out.contains(&p)) {
                return outcome(false, format!("{kind}: a prompt/query position carries loss"));
            }
            let mut noisy = logits.clone();
            let c = noisy.cols();
            for &p in &masked_out {
                for v in &mut noisy.data_mut()[p * c..(p + 1) * c] {
                    *v = rng.gen_range(-50.0..50.0);
                }
            }
            let changed = loss_from_logits(&noisy, &ex).unwrap();
            if changed != base {
                return outcome(false, format!("{kind}: loss moved from {base} to {changed}"));
            }
            trials += 1;
        }
    }
    outcome(true, format!("{trials} randomized logit rewrites, loss change exactly 0"))
}

/// Independent BLEU: n-grams held as vectors, counted by linear scans.
fn brute_bleu(hyps: &[Vec<&str>], refs: &[Vec<&str>], n: usize) -> f64 {
    let grams = |s: &Vec<&str>, k: usize| -> Vec<Vec<String>> {
        if s.len() < k {
            return vec![];
        }
        (0..=s.len() - k).map(|i| s[i..i + k].iter().map(|x| x.to_string()).collect()).collect()
    };
    let (mut hl, mut rl) = (0usize, 0usize);
    let mut logp = 0.0;
    let mut num = vec![0usize; n + 1];
    let mut den = vec![0usize; n + 1];
    for (h, r) in hyps.iter().zip(refs) {
        hl += h.len();
        rl += r.len();
        for k in 1..=n {
            let hg = grams(h, k);
            let rg = grams(r, k);
            den[k] += hg.len();
            let mut seen: Vec<&Vec<String>> = vec![];
            for g in &hg {
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let ch = hg.iter().filter(|x| *x == g).count();
                let cr = rg.iter().filter(|x| *x == g).count();
                num[k] += ch.min(cr);
            }
        }
    }
    if hl == 0 || num[1] == 0 {
        return 0.0;
    }
    for k in 1..=n {
        let (a, b) = if num[k] == 0 { (1.0, den[k] as f64 + 1.0) } else { (num[k] as f64, den[k] as f64) };
        logp += (a / b).ln();
    }
    let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    bp * (logp / n as f64).exp()
}

fn toks(v: &[String]) -> Vec<Vec<&str>> {
    v.iter().map(|x| x.split_whitespace().collect()).collect()
}

fn brute_novelty(h: &[String], train: &BTreeSet<String>) -> f64 {
    let mut c = 0;
    for x in h {
        let nx = x.split_whitespace().collect::<Vec<_>>().join(" ");
        if !train.iter().any(|t| *t == nx) {
            c += 1;
        }
    }
    c as f64 / h.len() as f64
}

fn brute_diversity(h: &[String]) -> f64 {
    let mut uniq: Vec<String> = vec![];
    for x in h {
        let nx = x.split_whitespace().collect::<Vec<_>>().join(" ");
        if !uniq.contains(&nx) {
            uniq.push(nx);
        }
    }
    uniq.len() as f64 / h.len() as f64
}

fn criterion_4() -> Outcome {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let hand: [(&str, &str, usize, f64); 6] = [
        ("a b c d", "a b c d", 4, 1.0),
        ("a b c", "a b d", 1, 2.0 / 3.0),
        ("the the the the", "the cat", 1, 0.25),
        ("a b c d", "a b c e", 2, 0.5f64.sqrt()),
        ("a b", "a b c d", 1, (-1.0f64).exp()),
        ("a b", "b a", 2, 0.5f64.sqrt()),
    ];
    for (h, r, n, want) in hand {
        let got = bleu(&s(&[h]), &s(&[r]), n).unwrap();
        if (got - want).abs() >= 1e-9 {
            return outcome(false, format!("BLEU{n}({h:?}, {r:?}) = {got}, want {want}"));
        }
    }
    // every sentence over {a,b,c} with at most two tokens
    let words = ["a", "b", "c"];
    let mut sentences = vec![String::new()];
    for w in words {
        sentences.push(w.to_string());
        for v in words {
            sentences.push(format!("{w} {v}"));
        }
    }
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut check = |hyps: Vec<String>, refs: Vec<String>| {
        for n in 1..=4 {
            let fast = bleu(&hyps, &refs, n).unwrap();
            let slow = brute_bleu(&toks(&hyps), &toks(&refs), n);
            worst = worst.max((fast - slow).abs());
        }
        checked += 1;
    };
    for h1 in &sentences {
        for r1 in &sentences {
            check(vec![h1.clone()], vec![r1.clone()]);
            for h2 in &sentences {
                for r2 in &sentences {
                    check(vec![h1.clone(), h2.clone()], vec![r1.clone(), r2.clone()]);
                }
            }
        }
    }
    // random batches of up to five sentences of up to six tokens
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 4);
    let sentence = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(0..=6);
        (0..len).map(|_| words[rng.gen_range(0..3)]).collect::<Vec<_>>().join(" ")
    };
    let mut set_mismatch = 0;
    for _ in 0..3000 {
        let size = rng.gen_range(1..=5);
        let hyps: Vec<String> = (0..size).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<String> = (0..size).map(|_| sentence(&mut rng)).collect();
        let train: BTreeSet<String> = (0..rng.gen_range(0..4)).map(|_| normalize(&sentence(&mut rng))).collect();
        if novelty(&hyps, &train).unwrap() != brute_novelty(&hyps, &train)
            || diversity(&hyps).unwrap() != brute_diversity(&hyps)
        {
            set_mismatch += 1;
        }
        check(hyps, refs);
    }
    let train: BTreeSet<String> = ["x".to_string()].into();
    let forced = [
        (novelty(&s(&["x", "x"]), &train).unwrap(), 0.0),
        (novelty(&s(&["x", "y"]), &train).unwrap(), 0.5),
        (novelty(&s(&["y", "z"]), &train).unwrap(), 1.0),
        (diversity(&s(&["q"; 5])).unwrap(), 0.2),
        (diversity(&s(&["a", "b", "c"])).unwrap(), 1.0),
        (diversity(&s(&["a", "a", "b", "c"])).unwrap(), 0.75),
    ];
    let forced_ok = forced.iter().all(|(a, b)| a == b);
    outcome(
        worst < 1e-9 && set_mismatch == 0 && forced_ok,
        format!("6 hand cases, {checked} batches vs brute force (max |diff| {worst:.1e}), forced ratios exact: {forced_ok}"),
    )
}

fn criterion_5() -> Outcome {
    let cfg = small_config(50, 16, 72);
    let lm = LanguageModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED + 5);
    for kind in [RegimeKind::SoftPrompt, RegimeKind::DynamicPrompt] {
        let regime = AdaptationRegime::init(kind, &cfg, 32, 9).unwrap();
        for m in 1..=32 {
            let q: Vec<usize> = (0..m).map(|_| rng.gen_range(0..50)).collect();
            let pair = DialogPair::new(q, vec![1, 2]).unwrap();
            let ex = assemble_input(&regime, &lm, &pair).unwrap();
            let rows = ex.prompt_rows().unwrap().rows();
            if rows != m || ex.layout.prompt_len != m {
                return outcome(false, format!("{kind}: {rows} prompt rows for m = {m}"));
            }
        }
    }
    let regime = AdaptationRegime::dynamic_prompt(&cfg, 9).unwrap();
    let controller = regime.controller.as_ref().unwrap();
    let ids: Vec<usize> = (0..12).map(|_| rng.gen_range(0..50)).collect();
    let x = embed(&lm, None, &ids).unwrap();
    let h = controller_forward(controller, &x).unwrap().0;
    let logits = forward_lm(&lm, &x, &(0..12).collect::<Vec<_>>()).unwrap();
    for j in 0..12 {
        let mut edited = x.clone();
        let c = edited.cols();
        for v in &mut edited.data_mut()[j * c..(j + 1) * c] {
            *v += rng.gen_range(-1.0..1.0);
        }
        let h2 = controller_forward(controller, &edited).unwrap().0;
        let l2 = forward_lm(&lm, &edited, &(0..12).collect::<Vec<_>>()).unwrap();
        for i in 0..j {
            if h.row(i) != h2.row(i) {
                return outcome(false, format!("controller row {i} moved after editing {j}"));
            }
            if logits.row(i) != l2.row(i) {
                return outcome(false, format!("LM logits row {i} moved after editing {j}"));
            }
        }
        if h.row(j) == h2.row(j) || logits.row(j) == l2.row(j) {
            return outcome(false, format!("editing row {j} had no effect on itself"));
        }
    }
    outcome(true, "prompt rows = m for m in 1..=32; controller and LM rows bit-identical under later edits")
}

fn pipeline_config(dir: &Path, dialogs: usize) -> ExperimentConfig {
    let data = dir.join("data");
    dynprompt::synthetic::write_corpus(&data, dialogs, MASTER_SEED).unwrap();
    let mut cfg = ExperimentConfig {
        output_dir: dir.to_path_buf(),
        seed: MASTER_SEED,
        ..Default::default()
    };
    cfg.corpus.train = data.join("train.txt");
    cfg.corpus.valid = Some(data.join("valid.txt"));
    cfg.corpus.test = Some(data.join("test.txt"));
    cfg.corpus.target_vocab = 400;
    cfg.model = small_config(512, 32, 40);
    cfg.model.n_heads = 4;
    cfg.model.d_ff = 64;
    cfg.model.controller_layers = 1;
    cfg.train.max_new_tokens = 20;
    cfg
}

/// Fine-tuning a fresh model on eight pairs; returns how many greedy
/// responses match exactly and the steps used.
fn memorize_eight() -> (usize, usize) {
    let texts: Vec<TextPair> = [
        ("hello there", "hi how are you"),
        ("what is your name", "my name is bot"),
        ("where do you live", "in a small town"),
        ("do you like tea", "yes with milk"),
        ("how old are you", "two years old"),
        ("what time is it", "almost noon"),
        ("is it raining", "no it is sunny"),
        ("good night", "sleep well friend"),
    ]
    .iter()
    .map(|(q, r)| TextPair {
        query: q.to_string(),
        response: r.to_string(),
    })
    .collect();
    let dialogs: Vec<_> = texts
        .iter()
        .map(|p| dynprompt::corpus::Dialog {
            turns: vec![p.query.clone(), p.response.clone()],
        })
        .collect();
    let corpus = PreparedCorpus::from_dialogs(&dialogs, &[], &[], 300).unwrap();
    let examples = corpus.encode(&texts).unwrap();
    let pairs: Vec<DialogPair> = examples.iter().map(|e| e.pair.clone()).collect();
    let mut cfg = small_config(corpus.tokenizer.vocab_size(), 32, 48);
    cfg.n_heads = 4;
    let lm = LanguageModel::new(cfg).unwrap();
    let train_cfg = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 2000,
        patience_epochs: 2000,
        eval_every: 50,
        max_steps: Some(2000),
        seed: MASTER_SEED,
        ..Default::default()
    };
    let regime = AdaptationRegime::fine_tune();
    let matches = |lm: &LanguageModel, r: &AdaptationRegime| {
        let out = decode_responses(r, lm, &corpus.tokenizer, &examples, 24).unwrap();
        out.iter().zip(&texts).filter(|(o, t)| **o == t.response).count()
    };
    let result = train_with_evaluator(&lm, &regime, &pairs, &train_cfg, |lm, r| Ok(matches(lm, r) as f64), |_| {})
        .unwrap();
    (matches(&result.lm, &result.regime), result.steps)
}

struct EndToEnd {
    outcome: Outcome,
    rows: BTreeMap<RegimeKind, dynprompt::metrics::MetricRow>,
}

fn criterion_6() -> EndToEnd {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pipeline_config(dir.path(), 600);
    cfg.pretrain = PretrainConfig {
        steps: 1500,
        ..Default::default()
    };
    cfg.train.max_epochs = 20;
    cfg.train.patience_epochs = 6;
    cfg.train.selection_order = 1;
    cfg.sweep = SweepConfig {
        trials: 4,
        ..Default::default()
    };
    let corpus = experiment::prepare(&cfg).unwrap();
    let base = experiment::pretrain(&cfg).unwrap();
    let split = experiment::cell_split(&cfg, &corpus, 1.0, MASTER_SEED).unwrap();
    let tok = &base.tokenizer;
    let training = corpus.training_responses();
    let base_regime = AdaptationRegime::fine_tune();
    let base_val = dynprompt::trainer::validation_bleu(&base.lm, &base_regime, tok, &split.valid, 1, 20).unwrap();
    let mut pass = corpus.tokenizer.vocab_size() <= 512 && corpus.train.len() + corpus.valid.len() >= 500;
    let mut details = vec![format!("base val BLEU1 {base_val:.4}")];
    let mut rows = BTreeMap::new();
    for kind in RegimeKind::ALL {
        let regime = AdaptationRegime::init(kind, &base.lm.config, cfg.max_query_len(), MASTER_SEED).unwrap();
        let train_cfg = TrainConfig {
            seed: MASTER_SEED,
            ..cfg.train.clone()
        };
        let out = sweep(&base.lm, &regime, tok, &split.train, &split.valid, &train_cfg, &cfg.sweep, |_| {}).unwrap();
        let val1 = dynprompt::trainer::validation_bleu(&out.best.lm, &out.best.regime, tok, &split.valid, 1, 20).unwrap();
        let test = evaluate(&out.best.regime, &out.best.lm, tok, &split.test, &training, 20).unwrap();
        rows.insert(kind, test);
        pass &= val1 > base_val;
        details.push(format!("{kind} val BLEU1 {val1:.4} (lr {:.2e})", out.best.learning_rate));
    }
    let (reproduced, steps) = memorize_eight();
    pass &= reproduced >= 7;
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 1800.0;
    details.push(format!("memorized {reproduced}/8 in {steps} steps, {secs:.0}s"));
    EndToEnd {
        outcome: outcome(pass, details.join(", ")),
        rows,
    }
}

fn dir_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn grid_run(dir: &Path) -> (ExperimentConfig, Report) {
    let mut cfg = pipeline_config(dir, 200);
    cfg.pretrain.steps = 200;
    cfg.train.max_epochs = 2;
    cfg.train.patience_epochs = 2;
    cfg.train.max_new_tokens = 12;
    cfg.sweep.trials = 1;
    experiment::prepare(&cfg).unwrap();
    experiment::pretrain(&cfg).unwrap();
    let report = experiment::run_grid(&cfg).unwrap();
    (cfg, report)
}

fn criterion_7() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (cfg, report) = grid_run(a.path());
    let (_, again) = grid_run(b.path());
    let mut problems = Vec::new();
    if report.rows.len() != 18 {
        problems.push(format!("{} rows", report.rows.len()));
    }
    let csv = fs::read_to_string(a.path().join("report.csv")).unwrap();
    let header = csv.lines().next().unwrap_or("");
    if !header.contains("BLEU1,BLEU2,BLEU3,BLEU4,Novelty,Diversity") {
        problems.push(format!("header {header}"));
    }
    let held: BTreeSet<(usize, usize)> = report.rows.iter().map(|r| (r.valid_pairs, r.test_pairs)).collect();
    if held.len() != 1 {
        problems.push(format!("held-out sizes vary: {held:?}"));
    }
    if report.rows.iter().any(|r| r.metrics.is_none()) {
        problems.push("a cell failed".into());
    }
    let first = dir_bytes(a.path());
    if first != dir_bytes(b.path()) || report != again {
        problems.push("second run differs".into());
    }
    experiment::run_grid(&cfg).unwrap();
    if dir_bytes(a.path()) != first {
        problems.push("re-running the finished grid changed files".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("18 rows, held-out sizes {held:?}, {} files byte-identical across runs", first.len())
        } else {
            problems.join("; ")
        },
    )
}

fn criterion_8(rows: &BTreeMap<RegimeKind, dynprompt::metrics::MetricRow>) -> Outcome {
    let (Some(d), Some(f)) = (rows.get(&RegimeKind::DynamicPrompt), rows.get(&RegimeKind::FineTune)) else {
        return outcome(false, "end-to-end rows unavailable");
    };
    outcome(
        d.novelty >= f.novelty && d.diversity >= f.diversity,
        format!(
            "seed {MASTER_SEED}, 100% data: dynamic novelty {:.3} diversity {:.3}; fine-tuning novelty {:.3} diversity {:.3}",
            d.novelty, d.diversity, f.novelty, f.diversity
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    eprintln!("  ({name} took {:.1}s)", start.elapsed().as_secs_f64());
    out
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome, bool)> = Vec::new();
    results.push((1, "gradient check", run("1", criterion_1), true));
    results.push((2, "freezing", run("2", criterion_2), true));
    results.push((3, "loss mask", run("3", criterion_3), true));
    results.push((4, "metric oracles", run("4", criterion_4), true));
    results.push((5, "prompt length and causality", run("5", criterion_5), true));
    let mut e2e_rows = BTreeMap::new();
    let e2e = run("6", || {
        let r = criterion_6();
        e2e_rows = r.rows;
        r.outcome
    });
    results.push((6, "end-to-end desk experiment", e2e, true));
    results.push((7, "harness fidelity", run("7", criterion_7), true));
    results.push((8, "direction check (not gated)", criterion_8(&e2e_rows), false));
    let mut failed = 0;
    for (n, name, out, gated) in &results {
        let status = match (out.pass, gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported only)",
        };
        println!("criterion {n} {name}: {status}: {}", out.detail);
        if !out.pass && *gated {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
