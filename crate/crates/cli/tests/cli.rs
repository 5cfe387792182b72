use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hedgelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hedgelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY: &str = r#"
maturity_days = 5
mvh_hidden = [4]
mvh_epochs = 2
mvh_samples = 200
mvh_minibatch = 100
"#;

#[test]
fn train_then_eval_and_rerun_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let train = hedgelab(&["train-mvh", "--config", &cfg, "--out", out_s, "--parametrization", "direct"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let eval = hedgelab(&[
        "eval", "--config", &cfg, "--out", out_s, "--episodes", "50", "--strategy", "delta", "--strategy", "deep_mvh",
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let table = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert!(table.starts_with("strategy,n_episodes,mean"));
    assert!(table.lines().any(|l| l.starts_with("deep_mvh,50,")));

    let again = dir.path().join("again");
    let rerun = hedgelab(&[
        "rerun",
        out.join("manifest.json").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(rerun.status.success(), "{}", String::from_utf8_lossy(&rerun.stderr));
    for f in ["eval.csv", "eval_costs.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = hedgelab(&["eval", "--out", dir.path().to_str().unwrap(), "--strategy", "ddpg"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = hedgelab(&["stability", "--agent", "deep_mvh", "--n-seeds", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    let bad = write_config(dir.path(), "volatility = 0.3\n");
    let o = hedgelab(&["eval", "--config", &bad, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("volatility"));
}
