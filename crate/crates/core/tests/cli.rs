use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1

[env]
max_episode_steps = 80

[model]
embed_dim = 8
hidden = 12
deter = 10
stoch = 4

[agent]
hidden = 12
horizon = 4

[trainer]
batch_size = 3
seq_len = 8
total_steps = 10
eval_every = 5
eval_episodes = 2
warmup_episodes = 2
buffer_capacity = 2000

[truncation]
window = 2
tau_back = 1
warmup = 0

[eval]
transfer_seeds = 3
rollout_context = 5
rollout_horizon = 30
rollout_episodes = 2
"#;

fn retrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retrace"))
        .args(args)
        .env_remove("RETRACE_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = config(dir);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend(extra);
    let o = retrace(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a", &[]);
    let b = train(dir.path(), "b", &[]);
    let metrics = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, std::fs::read(b.join("metrics.csv")).unwrap());
    let r = rows(&a.join("metrics.csv"));
    assert!(!r.is_empty() && r.len() <= 10);
    assert!(!r[4][9].is_empty());
    for f in ["config.toml", "manifest.toml", "checkpoint.bin"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("mask_reading = \"conjunctive\""));
    assert!(manifest.contains("seed = 1"));

    // The echo alone reproduces the run.
    let c = dir.path().join("c");
    let o = retrace(&["train", "--config", s(&a.join("config.toml")), "--out", s(&c)]);
    assert!(o.status.success());
    assert_eq!(metrics, std::fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run", &["--set", "trainer.total_steps=2"]);
    let cfg = config(dir.path());
    let again = retrace(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(4));
    let forced = retrace(&["train", "--config", s(&cfg), "--out", s(&out), "--force", "--set", "trainer.total_steps=2"]);
    assert!(forced.status.success());
    assert_eq!(rows(&out.join("metrics.csv")).len(), 2);
}

#[test]
fn overrides_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "l2", &["--set", "losses.retrace_variant=l2", "--set", "trainer.total_steps=3", "--seed", "7"]);
    let manifest = std::fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("retrace_variant = \"l2\""));
    assert!(manifest.contains("seed = 7"));
    let echo = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("total_steps = 3"));
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[trainer]\nbatch = 3\n").unwrap();
    let o = retrace(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    let o = retrace(&["train", "--set", "trainer.window_len=100", "--out", s(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(retrace(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let o = retrace(&["eval", "--checkpoint", s(&missing), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(4));
    let o = retrace(&["truncdump", "--input", s(&dir.path().join("q.csv")), "--out", s(&dir.path().join("t"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn truncdump_matches_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("q.csv");
    std::fs::write(&input, "q\n0\n2\n4\n6\n").unwrap();
    let out = dir.path().join("dump");
    let o = retrace(&[
        "truncdump", "--input", s(&input), "--out", s(&out),
        "--set", "truncation.window=2", "--set", "truncation.eta=0.1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("truncdump.csv"));
    assert_eq!(r.len(), 4);
    let col = |c: usize| r.iter().map(|x| x[c].clone()).filter(|v| !v.is_empty()).collect::<Vec<_>>();
    assert_eq!(col(3), ["3", "5"]);
    let delta: Vec<f64> = col(4).iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(delta.len(), 1);
    assert!((delta[0] - 2.0 / 3.0).abs() < 1e-12);

    std::fs::write(&input, "episode,q\na,1\na,x\n").unwrap();
    let o = retrace(&["truncdump", "--input", s(&input), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn checkpoint_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", &["--set", "trainer.total_steps=2"]);
    let ckpt = run.join("checkpoint.bin");

    let roll = dir.path().join("roll");
    let o = retrace(&["rollout", "--checkpoint", s(&ckpt), "--out", s(&roll)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&roll.join("rollout.csv"));
    assert_eq!(r.len(), 30);
    assert_eq!(r[0][0], "1");
    assert!(roll.join("latents.csv").exists());
    let roll2 = dir.path().join("roll2");
    assert!(retrace(&["rollout", "--checkpoint", s(&ckpt), "--out", s(&roll2)]).status.success());
    assert_eq!(std::fs::read(roll.join("rollout.csv")).unwrap(), std::fs::read(roll2.join("rollout.csv")).unwrap());

    let ev = dir.path().join("ev");
    assert!(retrace(&["eval", "--checkpoint", s(&ckpt), "--out", s(&ev)]).status.success());
    assert_eq!(rows(&ev.join("eval.csv")).len(), 2);

    let tr = dir.path().join("tr");
    let o = retrace(&[
        "transfer", "--checkpoint", s(&ckpt), "--compare", s(&ckpt), "--out", s(&tr),
        "--set", "eval.change_sets=[{reward_offset = 1.0}]",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&tr.join("transfer.csv"));
    assert_eq!(r.len(), 1);
    assert_eq!(r[0][0], "R=1");
    assert_eq!(r[0][3].parse::<f64>().unwrap(), 0.5);
}

#[test]
fn ablation_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let out = dir.path().join("abl");
    let o = retrace(&[
        "ablate", "--config", s(&cfg), "--out", s(&out),
        "--set", "trainer.total_steps=3", "--set", "ablation.modes=[\"off\", \"adaptive\"]",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = rows(&out.join("ablation.csv"));
    assert_eq!(r.len(), 2 * 2 * 3);
    for row in r.iter().filter(|x| x[0] == "0") {
        assert_eq!(row[9].parse::<f64>().unwrap(), 0.0, "retrace column for lambda = 0");
    }

    // One cell reproduces a plain training run.
    let single = dir.path().join("single");
    let o = retrace(&[
        "ablate", "--config", s(&cfg), "--out", s(&single),
        "--set", "ablation.lambdas=[1.0]", "--set", "ablation.modes=[\"adaptive\"]",
    ]);
    assert!(o.status.success());
    let plain = train(dir.path(), "plain", &[]);
    let cells: Vec<Vec<String>> = rows(&single.join("ablation.csv")).into_iter().map(|r| r[4..].to_vec()).collect();
    assert_eq!(cells, rows(&plain.join("metrics.csv")));
}
