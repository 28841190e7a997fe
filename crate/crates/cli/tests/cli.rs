//! End-to-end tests of the binary: exit codes, artifacts, determinism and
//! manifest completeness.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vns"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vns_cli_{}_{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gronwall_prints_rate_and_exits_zero() {
    let dir = tmp("gronwall");
    let cfg = write_cfg(&dir, "gronwall.kappa = 1.0\ngronwall.alpha = 0.0\ngronwall.T = 1.0\n");
    let out = bin()
        .args(["gronwall", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("lambda = 1"), "stdout: {stdout}");
}

#[test]
fn inadmissible_gronwall_exits_with_gate_code() {
    let dir = tmp("gronwall_bad");
    let cfg = write_cfg(&dir, "gronwall.alpha = 2.0\n");
    let out = bin()
        .args(["gronwall", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tmp("badkey");
    let cfg = write_cfg(&dir, "not.a.key = 1\n");
    let out = bin()
        .args(["gronwall", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not.a.key"));
}

#[test]
fn egc_offender_produces_gate_status_and_offender_file() {
    let dir = tmp("egc");
    // A single sample on the conserved line: trapped under a weak flow.
    let cfg = write_cfg(
        &dir,
        "flow.u_max = 0.05\negc.kind = lateral\negc.time_bound = 3.0\n\
         egc.x2_min = 0.2\negc.x2_max = 0.2\negc.v1_min = 0.5\negc.v1_max = 0.5\n\
         egc.v2_min = 0.8\negc.v2_max = 0.8\negc.n_x2 = 1\negc.n_v1 = 1\negc.n_v2 = 1\n\
         trace.dt = 1e-2\n",
    );
    let out_dir = dir.join("out");
    let out = bin()
        .args(["egc-check", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let offenders = std::fs::read_to_string(out_dir.join("offenders.csv")).unwrap();
    assert!(offenders.lines().count() >= 2, "offender row expected:\n{offenders}");
    assert!(offenders.contains("Trapped"));
}

#[test]
fn trace_writes_expected_columns() {
    let dir = tmp("trace");
    let cfg = write_cfg(
        &dir,
        "trace.x1 = 0.0\ntrace.x2 = 0.0\ntrace.v1 = 2.0\ntrace.v2 = 0.0\n\
         trace.t_end = 0.5\ntrace.dt = 1e-3\n",
    );
    let out_dir = dir.join("out");
    let out = bin()
        .args(["trace", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2,v1,v2\n"));
    assert!(csv.lines().count() > 100);
}

#[test]
fn evolve_writes_ledger_and_final_state() {
    let dir = tmp("evolve");
    let cfg = write_cfg(
        &dir,
        "flow.u_max = 0.05\nfluid.nx = 12\nfluid.ny = 8\n\
         kinetic.nx = 8\nkinetic.ny = 6\nkinetic.nvx = 16\nkinetic.nvy = 16\n\
         kinetic.v_box = 4.0\npsi.amplitude = 0.5\npsi.v2_min = -1.2\npsi.v2_max = 1.2\n\
         time.dt = 0.01\ntime.horizon = 0.3\noutput.snapshot_every = 20\ntrace.dt = 1e-2\n",
    );
    let out_dir = dir.join("out");
    let out = bin()
        .args(["evolve", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ledger = std::fs::read_to_string(out_dir.join("ledger.csv")).unwrap();
    assert!(ledger.starts_with("t,E,grad_diss,drag_diss,residual,M0,M2,M4,f_max\n"));
    assert!(ledger.lines().count() >= 30);
    assert!(out_dir.join("final_u.vnsfld").exists());
    assert!(out_dir.join("final_f.vnssnap").exists());
    assert!(out_dir.join("mass_report.txt").exists());
    // mass grows from zero under injection
    let last = ledger.lines().last().unwrap();
    let m0: f64 = last.split(',').nth(5).unwrap().parse().unwrap();
    assert!(m0 > 0.0, "inflow must inject mass, got {last}");
}

#[test]
fn reruns_with_same_seed_are_byte_identical_and_manifest_complete() {
    let dir = tmp("determinism");
    let cfg = write_cfg(
        &dir,
        "fluid.nx = 12\nfluid.ny = 8\nseed = 31\nflow.u_max = 0.05\n",
    );
    let run = |out_dir: &Path| {
        let out = bin()
            .args(["diagnostics", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let a = dir.join("a");
    let b = dir.join("b");
    run(&a);
    run(&b);
    let ma = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    let mb = std::fs::read_to_string(b.join("manifest.txt")).unwrap();
    assert_eq!(ma, mb, "manifests (hashes) must match across reruns");

    // Manifest completeness: every file in the directory is listed.
    let listed: Vec<String> = ma
        .lines()
        .filter_map(|l| l.split_whitespace().nth(2).map(str::to_string))
        .collect();
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().into_owned();
        if name == "manifest.txt" {
            continue;
        }
        assert!(listed.contains(&name), "file {name} missing from manifest");
    }
}
