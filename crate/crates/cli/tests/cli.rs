use std::process::Command;

use gla_icl_cli::{execute, Cli, CliError};
use clap::Parser;

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("gla-icl").chain(args.iter().copied())).unwrap()
}

/// CSV body without the manifest row.
fn body(csv: &str) -> String {
    csv.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    body(csv).lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn constants_row_at_the_stationary_corner() {
    let out = execute(&cli(&[
        "constants",
        "--set", "lam=1", "--set", "task.gamma=1", "--set", "task.n=3",
        "--set", "task.sigma_w2=1", "--set", "task.sigma_e2=1", "--set", "task.d=2",
        "--check",
    ]))
    .unwrap();
    let b = body(&out.csv);
    assert_eq!(b.lines().next().unwrap(), "lam,gamma,n,d,sw2,se2,D1,D2,D3,D4");
    let r = &rows(&out.csv)[0];
    assert_eq!(r.len(), 10);
    assert_eq!(r[6].parse::<f64>().unwrap(), 9.0);
    assert!(out.check.unwrap().passed);
}

#[test]
fn manifest_and_determinism() {
    let args = ["mc-error", "--set", "trials=500", "--set", "task.d=3", "--set", "task.n=20", "--seed", "4"];
    let a = execute(&cli(&args)).unwrap();
    let b = execute(&cli(&args)).unwrap();
    assert_eq!(body(&a.csv), body(&b.csv));
    let first = a.csv.lines().next().unwrap();
    assert!(first.starts_with("# kind=mc-error;"));
    assert!(first.contains(" seed=4 hash="));
    assert!(first.contains("timestamp="));
    assert_eq!(body(&a.csv).lines().filter(|l| l.starts_with("setting")).count(), 1);
}

#[test]
fn flag_beats_file_and_lands_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\ntask.d = 3\ntask.n = 10\n").unwrap();
    let out = dir.path().join("out.csv");
    let res = execute(&cli(&[
        "constants",
        "--config", cfg.to_str().unwrap(),
        "--set", "task.d=4",
        "--out", out.to_str().unwrap(),
    ]))
    .unwrap();
    let written = std::fs::read_to_string(&out).unwrap();
    assert_eq!(written, res.csv);
    assert!(written.lines().next().unwrap().contains("flag_overrides=task.d"));
    assert_eq!(rows(&written)[0][3], "4");
}

#[test]
fn config_errors_are_exit_code_one() {
    let e = execute(&cli(&["sweep-lambda", "--set", "lambdas=,"])).unwrap_err();
    assert!(matches!(e, CliError::Config(_)));
    assert_eq!(e.exit_code(), 1);
    let e = execute(&cli(&["constants", "--set", "task.d=ten"])).unwrap_err();
    assert!(e.to_string().contains("task.d"));
    let e = execute(&cli(&["constants", "--set", "task.bogus=1"])).unwrap_err();
    assert!(e.to_string().contains("task.bogus"));
}

#[test]
fn check_failure_is_exit_code_three() {
    // An SGD run with no steps cannot reach the optimum.
    let e = execute(&cli(&[
        "train-sgd",
        "--set", "task.d=2", "--set", "task.n=10", "--set", "sgd.steps=1",
        "--set", "sgd.batch_size=16", "--set", "trials=2000", "--check",
    ]))
    .unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
}

#[test]
fn every_subcommand_emits_its_header() {
    let small = ["--set", "task.d=2", "--set", "task.n=8", "--set", "trials=64"];
    let cases: [(&str, &[&str], &str); 6] = [
        ("sweep-lambda", &["--set", "lambdas=0.5,0.9"], "lambda,theory_error,mc_error,mc_stderr"),
        ("train-flow", &["--set", "flow.t_end=5"], "t,loss_gap,residual,balancedness"),
        ("train-sgd", &["--set", "sgd.steps=3", "--set", "sgd.batch_size=8"], "t,loss_gap,residual,balancedness,batch_loss"),
        ("mc-error", &["--set", "test.m=5"], "setting,lam,trials,theory_error,mc_error,mc_stderr,z"),
        ("baselines", &["--set", "baselines.length=20", "--set", "baselines.gammas=0.9"], "algo,gamma,param,steady_state_mean,stderr,diverged_count"),
        ("multilayer", &["--set", "sgd.steps=2", "--set", "sgd.batch_size=4", "--set", "multilayer.layers=1,2"], "layers,heldout_error,heldout_stderr,final_batch_loss"),
    ];
    for (kind, extra, header) in cases {
        let mut args = vec![kind];
        args.extend_from_slice(&small);
        args.extend_from_slice(extra);
        let out = execute(&cli(&args)).unwrap_or_else(|e| panic!("{kind}: {e}"));
        let b = body(&out.csv);
        let mut lines = b.lines();
        assert_eq!(lines.next().unwrap(), header, "{kind}");
        let width = header.split(',').count();
        assert!(lines.all(|l| l.split(',').count() == width), "{kind}");
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_gla-icl");
    let ok = Command::new(bin).args(["constants", "--set", "task.n=5"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("lam,gamma,n,d"));
    let bad = Command::new(bin).args(["constants", "--set", "nope=1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let unknown = Command::new(bin).args(["not-a-kind"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
    // 30 halvings of a huge step still diverge: a numerical failure
    let diverge = Command::new(bin)
        .args(["train-flow", "--set", "task.d=2", "--set", "task.n=5", "--set", "flow.step=1e12", "--set", "flow.t_end=1e13"])
        .output()
        .unwrap();
    assert_eq!(diverge.status.code(), Some(2), "{}", String::from_utf8_lossy(&diverge.stderr));
}
