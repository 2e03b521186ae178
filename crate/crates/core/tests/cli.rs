//! End-to-end runs of the `dpuflow` binary.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpuflow::graph::{Layer, LayerSpec, ModelGraph};
use dpuflow::quant::save_qmodel;
use dpuflow::sim::{Arch, TargetConfig};

fn dpuflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpuflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn repo(rel: &str) -> PathBuf {
    common::workspace_root().join(rel)
}

fn ok(args: &[&str]) -> String {
    let o = dpuflow(args);
    assert_eq!(code(&o), 0, "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// init-model, synth-cifar, quantize and compile for the dual B4096 target.
fn build_test8(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let model = dir.join("test8.json");
    let images = dir.join("images.bin");
    let q = dir.join("test8.q.json");
    let c = dir.join("test8.c.json");
    ok(&["init-model", s(&repo("models/test8.arch.json")), "--out", s(&model)]);
    ok(&["synth-cifar", "--count", "40", "--seed", "3", "--out", s(&images)]);
    ok(&[
        "quantize",
        s(&model),
        "--calib",
        s(&images),
        "--out",
        s(&q),
        "--batch",
        "8",
    ]);
    ok(&[
        "compile",
        s(&q),
        "--target",
        s(&repo("targets/zcu104_dual_b4096.json")),
        "--out",
        s(&c),
    ]);
    (images, q, c)
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _, c) = build_test8(dir.path());
    assert!(c.with_extension("lst").exists());
    assert!(c.with_extension("fingerprint.json").exists());
    let report = dir.path().join("report.csv");
    let target = repo("targets/zcu104_dual_b4096.json");
    ok(&[
        "run",
        s(&c),
        "--target",
        s(&target),
        "--images",
        s(&images),
        "--labels",
        "--threads",
        "1,2,3",
        "--out",
        s(&report),
    ]);
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "threads,fps,latency_s,achieved_gops,bandwidth_mbps_used,fps_per_watt,makespan_cycles"
    );
    assert_eq!(lines.len(), 4);

    let trace = ok(&["trace", s(&c), "--target", s(&target), "--images", s(&images)]);
    assert!(trace.starts_with("layer,compute_cycles,memory_cycles,bound\n"));
}

#[test]
fn fingerprint_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _, c) = build_test8(dir.path());
    let o = dpuflow(&[
        "run",
        s(&c),
        "--target",
        s(&repo("targets/zcu104_single_b512.json")),
        "--images",
        s(&images),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
    let o = dpuflow(&["trace", s(&c), "--target", s(&repo("targets/zcu104_single_b512.json"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn interior_softmax_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let g = common::random_small_graph(1, 6);
    let mut layers = g.layers().to_vec();
    let at = layers
        .iter()
        .position(|l| matches!(l.spec, LayerSpec::GlobalAvgPool))
        .unwrap();
    layers.insert(at, Layer::new("mid_softmax", LayerSpec::Softmax));
    let g = ModelGraph::chain(g.input_shape(), layers).unwrap();
    let (_, q) = common::quantize_random(&g, 4, 1);
    let qpath = dir.path().join("bad.q.json");
    save_qmodel(&qpath, &q).unwrap();
    let o = dpuflow(&[
        "compile",
        s(&qpath),
        "--target",
        s(&repo("targets/zcu104_dual_b4096.json")),
        "--out",
        s(&dir.path().join("bad.c.json")),
    ]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("bad.c.json").exists());
}

#[test]
fn resource_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("triple.json");
    TargetConfig::new(Arch::B4096, 3).save(&t).unwrap();
    let o = dpuflow(&["resources", "--target", s(&t)]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("BRAM"));
    let out = ok(&["resources", "--target", s(&repo("targets/zcu104_dual_b4096.json"))]);
    assert!(out.contains("82.18"));
}

#[test]
fn validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("bad_target.json");
    std::fs::write(&t, r#"{"arch":"B4096","cores":0}"#).unwrap();
    assert_eq!(code(&dpuflow(&["resources", "--target", s(&t)])), 2);

    let truncated = dir.path().join("short.bin");
    std::fs::write(&truncated, vec![0u8; 3000]).unwrap();
    let model = dir.path().join("m.json");
    ok(&["init-model", s(&repo("models/test8.arch.json")), "--out", s(&model)]);
    let o = dpuflow(&[
        "quantize",
        s(&model),
        "--calib",
        s(&truncated),
        "--out",
        s(&dir.path().join("q.json")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let rows = dir.path().join("rows.csv");
    std::fs::write(&rows, "platform,fps,power_w\ngpu,1,1\n").unwrap();
    assert_eq!(code(&dpuflow(&["report", "--rows", s(&rows), "--baseline", "cpu"])), 2);
}

#[test]
fn report_reproduces_platform_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("table.csv");
    ok(&[
        "report",
        "--rows",
        s(&repo("scenarios/platform_rows.csv")),
        "--baseline",
        "cpu",
        "--out",
        s(&out),
    ]);
    let csv = std::fs::read_to_string(out).unwrap();
    assert!(csv.contains("cpu,175.47,65.00,10000,68.62,56.99,2.70,1.00,1.00,2.70,"));
    assert!(csv.contains("fpga-2thread,1021.45,60.00,10000,58.76,9.79,17.02,5.82,6.31,17.02,"));
}

#[test]
fn fit_then_bench_reproduces_observations() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("fit.json");
    let text = ok(&[
        "fit",
        "--observations",
        s(&repo("scenarios/thread_scaling_observations.csv")),
        "--target",
        s(&repo("targets/zcu104_dual_b4096.json")),
        "--out",
        s(&scenario),
    ]);
    assert!(text.contains("kappa"));
    let out = dir.path().join("bench.csv");
    ok(&["bench", "--scenario", s(&scenario), "--out", s(&out)]);
    let fps: Vec<f64> = std::fs::read_to_string(out)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for (got, want) in fps.iter().zip([584.11, 1021.45, 920.81]) {
        assert!((got / want - 1.0).abs() < 0.05, "{got} vs {want}");
    }
}
