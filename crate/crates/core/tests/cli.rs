use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--batch-size",
    "4",
    "--buffer-capacity",
    "16",
    "--set",
    "max_seq_len=12",
    "--set",
    "emb_dim=8",
    "--set",
    "gen_hidden=8",
    "--set",
    "gen_layers=1",
    "--set",
    "disc_hidden=12",
    "--set",
    "disc_layers=1",
    "--set",
    "ffn_mult=2",
    "--set",
    "drift_eval_masks=1",
];

fn tmr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmr")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn verify_prints_each_check() {
    let out = tmr(&["verify", "losses"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    assert!(stdout.lines().filter(|l| !l.trim().is_empty()).count() >= 3);
    assert!(stdout.contains("PASS losses uniform MLM"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn config_errors_exit_2_and_name_every_key() {
    let out = tmr(&["--set", "bogus=1", "--set", "alpha=-1", "verify", "losses"]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("bogus") && err.contains("alpha"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "steps = 3\nnot_a_key = 4\n").unwrap();
    let out = tmr(&["--config", cfg.to_str().unwrap(), "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("not_a_key"));

    assert_eq!(tmr(&["verify", "nosuite"]).status.code(), Some(2));
    assert_eq!(tmr(&["--help"]).status.code(), Some(0));
}

#[test]
fn baseline_with_buffer_flags_warns() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL.to_vec();
    let out_dir = dir.path().to_str().unwrap();
    args.extend(["--mode", "electra_baseline", "--alpha", "2", "--steps", "2", "--out-dir", out_dir, "pretrain"]);
    let out = tmr(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let err = text(&out.stderr);
    assert!(err.contains("buffer settings ignored in electra_baseline mode"), "{err}");
    assert!(err.contains("alpha"));
}

fn pretrain(dir: &Path, mode: &str) {
    let mut args = SMALL.to_vec();
    let out_dir = dir.join(mode);
    let out_dir = out_dir.to_str().unwrap();
    args.extend(["--mode", mode, "--steps", "6", "--set", "checkpoint_every=3", "--out-dir", out_dir, "pretrain"]);
    let out = tmr(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
}

#[test]
fn pretrain_then_probe() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["tmr", "electra_baseline"] {
        pretrain(dir.path(), mode);
    }
    let run = dir.path().join("tmr");
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["mode"], "tmr");
    for step in [0, 3, 6] {
        assert!(run.join(format!("checkpoints/step_{step:06}.manifest")).exists());
    }

    let task = dir.path().join("task.tsv");
    let out = tmr(&["make-probe-task", "--output", task.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&task).unwrap().lines().count(), 100);

    let table = dir.path().join("cmp.csv");
    let pattern = format!("{}/*/checkpoints/*.manifest", dir.path().display());
    let out = tmr(&[
        "--jobs", "2", "--set", "probe_epochs=1", "probe", "--checkpoints", &pattern, "--task",
        task.to_str().unwrap(), "--seeds", "2", "--output", table.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rows = std::fs::read_to_string(&table).unwrap();
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("mode,pretrain_step,mean_acc,std_acc,n_seeds"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn probe_with_no_checkpoints_fails() {
    let out = tmr(&["probe", "--checkpoints", "/nonexistent/*.manifest"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let mut args = SMALL.to_vec();
    args.extend(["bench", "--iterations", "3", "--rounds", "1", "--output", csv.to_str().unwrap()]);
    let out = tmr(&args);
    assert_eq!(out.status.code(), Some(0));
    let body = std::fs::read_to_string(&csv).unwrap();
    let header = body.lines().next().unwrap();
    assert_eq!(header, "strategy,seconds_per_100_iters,backward_calls_per_step");
    let strategies: Vec<&str> = body.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(strategies, ["baseline", "loss_diff", "grad_bound", "grad_norm"]);
    assert!(text(&out.stdout).contains("ordering "));
}
