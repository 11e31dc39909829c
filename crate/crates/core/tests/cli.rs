use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const CONFIG: &str = r#"
seed = 4
fractions = [0.5, 1.0]

[corpus]
target_vocab = 300

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_positions = 32
controller_layers = 1
controller_heads = 2

[pretrain]
steps = 20

[train]
max_epochs = 1
patience_epochs = 1
max_new_tokens = 8

[sweep]
trials = 1
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynprompt"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    let out = dir.join("out");
    bin()
        .args(["--config", cfg.to_str().unwrap(), "--output-dir", out.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let out = dir.path().join("out");

    assert!(ok(&run(dir.path(), &["prepare", "--synthetic", "80"])).contains("prepared"));
    ok(&run(dir.path(), &["pretrain"]));
    let grid = ok(&run(dir.path(), &["run-grid", "--workers", "2"]));
    assert_eq!(grid.lines().count(), 6);

    let ckpt = out.join("cells").join("dynamic_prompt-1.00").join("checkpoint.json");
    let eval = ok(&run(dir.path(), &["evaluate", "--checkpoint", ckpt.to_str().unwrap()]));
    let row: dynprompt::metrics::MetricRow = serde_json::from_str(&eval).unwrap();
    let report: dynprompt::experiment::Report =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let stored = report
        .rows
        .iter()
        .find(|r| r.regime == dynprompt::adaptation::RegimeKind::DynamicPrompt && r.fraction == 1.0)
        .unwrap();
    assert_eq!(stored.metrics, Some(row));

    let files = ok(&run(dir.path(), &["export"]));
    assert_eq!(files.lines().count(), 2);
    assert!(out.join("table.csv").exists() && out.join("plot.json").exists());

    let mut child = run_chat(dir.path(), &ckpt);
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"where does anna live\n\nwhere does anna live\n")
        .unwrap();
    let chat = child.wait_with_output().unwrap();
    let text = ok(&chat);
    let replies: Vec<&str> = text.split("> ").skip(1).collect();
    assert_eq!(replies.len(), 4);
    assert_eq!(replies[0], replies[2]);
}

fn run_chat(dir: &Path, ckpt: &Path) -> std::process::Child {
    let cfg = dir.join("config.toml");
    bin()
        .args(["--config", cfg.to_str().unwrap(), "chat", "--checkpoint", ckpt.to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap()
}

#[test]
fn exit_codes_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(dir.path(), &["pretrain"]);
    assert_eq!(missing.status.code(), Some(3), "missing config file is an I/O failure");

    fs::write(dir.path().join("config.toml"), "fractions = [0.5, 0.2]\n").unwrap();
    assert_eq!(run(dir.path(), &["pretrain"]).status.code(), Some(2));

    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let no_corpus = run(dir.path(), &["pretrain"]);
    assert_eq!(no_corpus.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&no_corpus.stderr).contains("corpus.json"));

    let bad = bin().arg("no-such-command").output().unwrap();
    assert!(!bad.status.success());
}
