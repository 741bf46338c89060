use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use mirage_core::cli::{read_checksums, sha256_hex};
use mirage_core::model::{tok, Checkpoint, Model, ModelConfig};

const TINY: &str = "[model]\nd_model = 16\nn_heads = 2\nd_ff = 32\nmax_seq = 200\nk_latent = 2\n\n[train]\nepochs = 1\nbatch_size = 2\ngrad_accum = 1\n";

fn mirage(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mirage")).current_dir(dir).env_remove("MIRAGE_OUT_DIR").args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Tiny config plus a 30-line sft file and a 10-line test file.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for args in [
        ["gen-data", "--task", "reason", "--n", "10", "--split", "sft", "--out", "data"],
        ["gen-data", "--task", "reason", "--n", "10", "--split", "test", "--out", "data"],
    ] {
        let o = mirage(dir.path(), &args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    dir
}

fn train1(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--stage", "1", "--config", "tiny.toml", "--data", "data/reason_sft_cot.jsonl", "--out-dir", out];
    args.extend_from_slice(extra);
    mirage(dir, &args)
}

#[test]
fn gen_data_writes_three_trajectories_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let o = mirage(dir.path(), &["gen-data", "--task", "reason", "--n", "1000", "--split", "sft", "--seed", "42", "--out", "data/"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("data/reason_sft_cot.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3000);
    let sums = read_checksums(&dir.path().join("data")).unwrap();
    assert_eq!(sums["reason_sft_cot.jsonl"], sha256_hex(&dir.path().join("data/reason_sft_cot.jsonl")).unwrap());
}

#[test]
fn stage_two_needs_an_init_checkpoint() {
    let dir = workspace();
    let o = mirage(dir.path(), &["train", "--stage", "2", "--config", "tiny.toml", "--data", "data/reason_sft_cot.jsonl", "--out-dir", "r"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paths.init_checkpoint"), "{}", stderr(&o));
    assert!(!dir.path().join("r/checkpoints/stage2.bin").exists());
}

#[test]
fn bad_flags_and_keys_fail_with_the_field_name() {
    let dir = workspace();
    let o = mirage(dir.path(), &["train", "--stage", "1", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus"));

    let o = train1(dir.path(), "r", &["--set", "train.warmpu=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.warmpu"), "{}", stderr(&o));

    let o = mirage(dir.path(), &["train", "--stage", "1", "--config", "missing.toml", "--out-dir", "r"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.toml"), "{}", stderr(&o));
}

#[test]
fn run_directory_layout_and_checksums() {
    let dir = workspace();
    let o = train1(dir.path(), "r1", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("r1");
    for f in ["config.resolved", "log.txt", "checksums.sha256", "metrics/stage1.csv", "checkpoints/stage1.bin", "plots/stage1_text_loss.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let sums = read_checksums(&run).unwrap();
    for (name, hash) in &sums {
        assert_eq!(*hash, sha256_hex(&run.join(name)).unwrap(), "{name}");
    }
    let resolved = std::fs::read_to_string(run.join("config.resolved")).unwrap();
    assert!(resolved.contains("d_model = 16 # file"));
    assert!(resolved.contains("stage = 1 # flag"));
    assert!(resolved.contains("lr = 0.00001 # default"));
}

fn checkpoint_hashes(run: &Path) -> BTreeMap<String, String> {
    read_checksums(run).unwrap().into_iter().filter(|(k, _)| k.starts_with("checkpoints/")).collect()
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = workspace();
    assert!(train1(dir.path(), "a", &[]).status.success());
    let o = mirage(dir.path(), &["train", "--stage", "1", "--config", "a/config.resolved", "--out-dir", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = train1(dir.path(), "c", &["--threads", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = checkpoint_hashes(&dir.path().join("a"));
    assert!(!a.is_empty());
    assert_eq!(a, checkpoint_hashes(&dir.path().join("b")));
    assert_eq!(a, checkpoint_hashes(&dir.path().join("c")));
}

#[test]
fn out_dir_defaults_to_the_environment() {
    let dir = workspace();
    let o = Command::new(env!("CARGO_BIN_EXE_mirage"))
        .current_dir(dir.path())
        .env("MIRAGE_OUT_DIR", "from_env")
        .args(["train", "--stage", "1", "--config", "tiny.toml", "--data", "data/reason_sft_cot.jsonl"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from_env/checkpoints/stage1.bin").exists());
}

#[test]
fn conflicting_model_shape_is_refused() {
    let dir = workspace();
    assert!(train1(dir.path(), "s1", &[]).status.success());
    let o = mirage(
        dir.path(),
        &["train", "--stage", "2", "--config", "tiny.toml", "--data", "data/reason_sft_cot.jsonl", "--init-checkpoint", "s1/checkpoints/stage1.bin", "--k", "3", "--out-dir", "s2"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.k_latent"), "{}", stderr(&o));
    let o = mirage(
        dir.path(),
        &["train", "--stage", "2", "--config", "tiny.toml", "--data", "data/reason_sft_cot.jsonl", "--init-checkpoint", "s1/checkpoints/stage1.bin", "--out-dir", "s2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mirage(dir.path(), &["eval", "--checkpoint", "s2/checkpoints/stage2.bin", "--data", "data/reason_test_cot.jsonl", "--out-dir", "ev"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("level,n,correct,accuracy,decode_failures"));
    let o = mirage(dir.path(), &["eval", "--checkpoint", "s2/checkpoints/stage2.bin", "--data", "data/reason_sft_cot.jsonl", "--out-dir", "ev2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paths.test_data"));
}

/// A model whose final norm emits a constant vector that the head maps to
/// `<vstart>`, so greedy decoding opens latent spans.
fn latent_happy_checkpoint(path: &Path) {
    let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, max_seq: 200, k_latent: 2, ..ModelConfig::default() };
    let mut m = Model::<f64>::init(cfg).unwrap();
    let idx = m.index().clone();
    m.params.at_mut(idx.lnf_g).data_mut().fill(0.0);
    let b = m.params.at_mut(idx.lnf_b).data_mut();
    b.fill(0.0);
    b[0] = 1.0;
    let v = m.config.vocab_size;
    let head = m.params.at_mut(idx.head).data_mut();
    head.fill(0.0);
    head[tok::VSTART] = 10.0;
    head[tok::EOS] = 5.0;
    assert_eq!(head.len(), 16 * v);
    Checkpoint::from_model(&m, None, BTreeMap::new()).save(path).unwrap();
}

#[test]
fn inspect_marks_latent_steps() {
    let dir = workspace();
    let o = mirage(dir.path(), &["inspect", "--data", "data/reason_sft_cot.jsonl", "--line", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("answer"));

    let ck = dir.path().join("latent.bin");
    latent_happy_checkpoint(&ck);
    let o = mirage(dir.path(), &["inspect", "--data", "data/reason_test_cot.jsonl", "--decode", "--checkpoint", "latent.bin", "--max-new", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let latent_lines: Vec<&str> = out.lines().filter(|l| l.contains("LATENT")).collect();
    assert_eq!(latent_lines.len(), 4, "{out}");
    assert!(latent_lines[0].contains("slot 0") && latent_lines[1].contains("slot 1"));
    assert!(out.lines().any(|l| l.contains("text") && l.contains("<vstart>")));
    assert!(out.lines().any(|l| l.contains("forced") && l.contains("<vend>")));
    assert!(!out.lines().any(|l| l.contains("text") && l.contains("LATENT")));
}
