//! End-to-end runs of the `contraction-lab` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_contraction-lab"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], config: &Path, out: &Path) -> i32 {
    let status = bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .expect("binary runs");
    status.code().expect("exit code")
}

#[test]
fn psi_table_writes_400_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["psi-table"], &configs().join("psi_table.toml"), dir.path()), 0);
    let csv = std::fs::read_to_string(dir.path().join("psi_table.csv")).unwrap();
    assert!(!csv.contains('\r'));
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# {") && lines[0].contains("\"constants\""));
    assert_eq!(lines[1], "r,psi,psi_prime,psi_double_prime");
    assert_eq!(lines.len(), 2 + 400);
    // 17 significant digits
    let first = lines[2].split(',').next().unwrap();
    assert_eq!(first.split('e').next().unwrap().len(), "1.0000000000000000".len());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 1);
    assert_eq!(report["overall_pass"], true);
    assert_eq!(report["config"]["profile"]["k2"], 2.0);
    let c = &report["report"]["constants"];
    // r0 = 1, k1 ≡ 1, k2 = 2: E = exp(1/4 + 1/4), λ = 1/E, c_2 = sqrt(2 E)
    let e = 0.5f64.exp();
    assert!((c["lambda"].as_f64().unwrap() - 1.0 / e).abs() < 1e-14);
    assert!((c["c_p"].as_f64().unwrap() - (2.0 * e).sqrt()).abs() < 1e-14);

    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metadata.json")).unwrap()).unwrap();
    assert!(meta["timestamp_unix"].as_f64().unwrap() > 0.0);
    assert_eq!(meta["seed"], 1);
}

#[test]
fn broken_profile_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["contract-check"], &configs().join("contract_ou_broken.toml"), dir.path());
    assert_eq!(code, 2);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[run]\nseed = 1\npaths = \"many\"\n").unwrap();
    let out = bin()
        .args(["couple-run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.paths"));

    std::fs::write(&cfg, "[model]\nkind = \"ou\"\na = 1.0\n[run]\nx = [0.0]\ny = [1.0]\ntimes = [1.0]\n").unwrap();
    assert_eq!(run(&["couple-run"], &cfg, dir.path()), 2, "missing seed");
    assert_eq!(run(&["couple-run", "--seed", "4", "--paths", "20"], &cfg, dir.path()), 0);

    assert_eq!(run(&["couple-run"], &dir.path().join("absent.toml"), dir.path()), 2);
    let status = bin().arg("no-such-command").output().unwrap().status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn failed_check_exits_with_one() {
    // OU with a = 1 does not satisfy I <= -2ρ: as an experiment of its own
    // the validation runs and reports the failure
    let dir = tempfile::tempdir().unwrap();
    let code = run(&["validate"], &configs().join("contract_ou_broken.toml"), dir.path());
    assert_eq!(code, 1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall_pass"], false);
    assert!(report["report"]["validation"]["max_violation"].as_f64().unwrap() > 1.0);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("couple_run_ou.toml");
    let args = ["couple-run", "--paths", "300", "--dt", "2e-3"];
    assert_eq!(run(&args, &cfg, a.path()), 0);
    let mut with_threads = args.to_vec();
    with_threads.extend(["--threads", "2"]);
    assert_eq!(run(&with_threads, &cfg, b.path()), 0);
    for file in ["report.json", "summary.csv", "terminal.csv"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
    let report = std::fs::read_to_string(a.path().join("report.json")).unwrap();
    assert!(report.contains("\"paths\": 300") && report.contains("\"dt\": 0.002"));

    let other = tempfile::tempdir().unwrap();
    assert_eq!(run(&["couple-run", "--paths", "300", "--dt", "2e-3", "--seed", "12"], &cfg, other.path()), 0);
    assert_ne!(std::fs::read(a.path().join("report.json")).unwrap(), std::fs::read(other.path().join("report.json")).unwrap());
}

#[test]
fn wasserstein_reads_sample_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.csv"), "x\n0\n1\n2\n").unwrap();
    std::fs::write(dir.path().join("b.csv"), "x\n3\n1.5\n2.5\n").unwrap();
    let cfg = dir.path().join("w.toml");
    std::fs::write(&cfg, "[run]\nseed = 1\np = 1.0\nsamples_a = \"a.csv\"\nsamples_b = \"b.csv\"\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["wasserstein"], &cfg, &out), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    // sorted pairing 0-1.5, 1-2.5, 2-3
    assert!((report["report"]["value"].as_f64().unwrap() - 4.0 / 3.0).abs() < 1e-14);
    assert_eq!(report["report"]["method"], "quantile");
    assert!(report["report"]["ci"]["upper"].as_f64().unwrap() >= 4.0 / 3.0);
}
