use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "data.per_class=40",
    "data.dim=6",
    "data.label_budget=16",
    "model.hidden_dim=12",
    "model.proj_hidden=12",
    "model.embed_dim=8",
    "support.per_class=2",
    "views.local=2",
    "train.batch_size=16",
    "train.epochs=2",
    "finetune.epochs=2",
];

fn paws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paws")).args(args).output().expect("run paws")
}

fn with_small(mut args: Vec<&str>) -> Vec<&str> {
    for s in SMALL {
        args.push("--set");
        args.push(s);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn help_and_argument_errors() {
    assert_eq!(code(&paws(&["--help"])), 0);
    assert_eq!(code(&paws(&["train", "--bogus"])), 1);
    assert_eq!(code(&paws(&[])), 1);
    let o = paws(&["gen-data", "--out-dir", "/tmp", "--set", "paws.tau=-1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));
    assert_eq!(code(&paws(&["gen-data", "--out-dir", "/tmp", "--set", "no.such=1"])), 1);
    assert_eq!(code(&paws(&["train"])), 1, "missing --out-dir");
}

#[test]
fn train_eval_fine_tune_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = paws(&with_small(vec!["train", "--out-dir", out_s, "--seed", "3", "--set", "paws.T=0.3"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "checkpoint.paws", "config.resolved"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("paws.T = 0.3"), "{resolved}");
    assert!(resolved.contains("train.seed = 3") && resolved.contains("model.seed = 3"));

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,lr,"));
    assert_eq!(metrics.lines().count(), 1 + 2 * (4 * 32 / 16));

    let cfg = out.join("config.resolved");
    let ck = out.join("checkpoint.paws");
    let (cfg_s, ck_s) = (cfg.to_str().unwrap(), ck.to_str().unwrap());
    let o = paws(&["eval-nn", "--config", cfg_s, "--checkpoint", ck_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let acc: f64 = stdout(&o).lines().next().unwrap().strip_prefix("nn_accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let ft_dir = dir.path().join("ft");
    let o = paws(&["fine-tune", "--config", cfg_s, "--checkpoint", ck_s, "--out-dir", ft_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("selected_lr"));
    assert!(ft_dir.join("finetuned.paws").exists());

    // dimension mismatch between checkpoint and dataset
    let o = paws(&["eval-nn", "--config", cfg_s, "--checkpoint", ck_s, "--set", "data.dim=7"]);
    assert_eq!(code(&o), 2);
    // unreadable checkpoint is a runtime failure
    let o = paws(&["eval-nn", "--config", cfg_s, "--checkpoint", "/nonexistent.paws"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resume_continues_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let o = paws(&with_small(vec!["train", "--out-dir", full.to_str().unwrap(), "--set", "train.checkpoint_every=1"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mid = full.join("checkpoint-e1.paws");
    assert!(mid.exists());

    let resumed = dir.path().join("resumed");
    let o = paws(&with_small(vec![
        "train",
        "--out-dir",
        resumed.to_str().unwrap(),
        "--checkpoint",
        mid.to_str().unwrap(),
        "--set",
        "train.checkpoint_every=1",
    ]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let last = |p: &Path| std::fs::read_to_string(p.join("metrics.csv")).unwrap().lines().last().unwrap().to_string();
    assert_eq!(last(&full), last(&resumed));
}

#[test]
fn gen_data_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = paws(&with_small(vec!["gen-data", "--out-dir", dir.path().to_str().unwrap()]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 40);
    assert!(dir.path().join("config.resolved").exists());
}
