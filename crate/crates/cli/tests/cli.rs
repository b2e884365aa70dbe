use std::path::Path;
use std::process::{Command, Output};

fn csn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = csn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn totals(arch: &str) -> serde_json::Value {
    let text = ok(&["analyze", "--arch", arch, "--input", "8x224x224", "--classes", "400"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["totals"].clone()
}

fn close(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol * expected
}

#[test]
fn analyze_matches_published_totals() {
    let ir50 = totals("ir-csn-50");
    assert!(close(ir50["interactions"].as_f64().unwrap(), 5.42e9, 0.02), "{ir50}");
    let r26 = totals("resnet3d-26");
    assert!(close(r26["params"].as_f64().unwrap(), 20.4e6, 0.03), "{r26}");
    assert_eq!(totals("ip-csn-101")["interactions"], totals("resnet3d-101")["interactions"]);
}

#[test]
fn analyze_is_byte_stable_and_checks_exit_zero() {
    let a = ok(&["analyze", "--arch", "ip-csn-50"]);
    let b = ok(&["analyze", "--arch", "ip-csn-50"]);
    assert_eq!(a, b);
    let out = csn(&["analyze", "--arch", "ip-csn-26", "--check", "table2"]);
    assert_eq!(out.status.code(), Some(0));
    let log = String::from_utf8(out.stderr).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("PASS")).count(), 30, "{log}");
}

#[test]
fn analyze_csv_and_file_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let stdout = ok(&["analyze", "--arch", "simple-8", "--format", "csv", "--out", path.to_str().unwrap()]);
    assert!(stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().starts_with("name,"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("conv1,")));
}

#[test]
fn validation_failures_exit_one() {
    for args in [
        &["analyze", "--arch", "resnet3d-27"][..],
        &["analyze", "--arch", "ir-csn-50", "--input", "8x224"],
        &["analyze", "--arch", "ir-csn-50", "--voxels", "both"],
        &["analyze"],
        &["sweep", "--out", "/dev/null", "--axis", "diagonal"],
        &["frobnicate"],
    ] {
        let out = csn(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(csn(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_scopes_pass() {
    let layers = ok(&["gradcheck", "layers"]);
    assert!(layers.lines().skip(1).all(|l| l.ends_with("PASS")), "{layers}");
    let blocks = ok(&["gradcheck", "blocks", "--seed", "3"]);
    assert_eq!(blocks.lines().skip(1).filter(|l| l.ends_with("PASS")).count(), 8, "{blocks}");
    let model = ok(&["gradcheck", "tiny-model"]);
    assert_eq!(model.lines().count(), 2);
}

fn sweep_rows(dir: &Path, arch: &str, axis: &str) -> Vec<Vec<String>> {
    let path = dir.join(format!("{arch}-{axis}.csv"));
    ok(&["sweep", "--arch", arch, "--axis", axis, "--out", path.to_str().unwrap()]);
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "axis,variant,groups,params,flops,interactions,accuracy");
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn simple_sweep_interactions_strictly_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_rows(dir.path(), "simple-8", "groups-3x3x3");
    assert!(rows.len() >= 5);
    assert_eq!(rows[0][2], "1");
    assert_eq!(rows.last().unwrap()[2], "dw");
    // G = 1 → 64, the widest count dividing every stage
    let grouped: Vec<u64> = rows[..rows.len() - 1].iter().map(|r| r[5].parse().unwrap()).collect();
    assert_eq!(rows[rows.len() - 2][2], "64");
    assert!(grouped.windows(2).all(|w| w[1] < w[0]), "{grouped:?}");
    // simple-D keeps dense 1x1x1 projections where the width grows, which
    // puts it above simple-G64 but far below the dense block
    let dw: u64 = rows.last().unwrap()[5].parse().unwrap();
    assert!(dw > grouped[grouped.len() - 1] && dw * 5 < grouped[0], "{dw}");
    assert!(rows.iter().all(|r| r.len() == 7 && r[6].is_empty()));
}

#[test]
fn bottleneck_sweep_drops_only_once_pointwise_layers_are_grouped() {
    let dir = tempfile::tempdir().unwrap();
    let g3 = sweep_rows(dir.path(), "bottleneck-16", "groups-3x3x3");
    let g1 = sweep_rows(dir.path(), "bottleneck-16", "groups-1x1x1");
    let inter = |r: &Vec<String>| r[5].parse::<f64>().unwrap();
    let base = inter(&g3[0]);
    assert!(g3.iter().all(|r| inter(r) > 0.9 * base), "grouping 3x3x3 only should barely move interactions");
    let g4 = g1.iter().find(|r| r[2] == "4").expect("g=4 row");
    assert!(inter(g4) * 4.0 < base, "{} vs {base}", inter(g4));
}

#[test]
fn data_train_eval_viz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    ok(&["gen-data", "--out", &d("train"), "--per-class", "3", "--seed", "1"]);
    ok(&["gen-data", "--out", &d("held"), "--per-class", "1", "--seed", "2"]);
    let config = d("cfg.json");
    std::fs::write(&config, r#"{"train": {"iters_per_epoch": 3, "batch_size": 4}, "sample": {"clip_len": 4}}"#).unwrap();
    let run = |out: &str| {
        ok(&[
            "train", "--arch", "tiny-ip-csn", "--data", &d("train"), "--held-out", &d("held"), "--out", &d(out),
            "--config", &config, "--epochs", "2", "--warmup-epochs", "1", "--eval-clips", "2", "--seed", "5",
            "--checkpoint-every", "3",
        ])
    };
    let line = run("a");
    let eval: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(eval["iter"], 5);
    run("b");
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/history.json"), read("b/history.json"));
    assert_eq!(read("a/final.csnw"), read("b/final.csnw"));
    assert_eq!(read("a/checkpoints/iter_000006.csnw"), read("a/final.csnw"));
    assert_eq!(String::from_utf8(read("a/history.csv")).unwrap().lines().count(), 7);

    let e = ok(&["eval", "--arch", "tiny-ip-csn", "--checkpoint", &d("a/final.csnw"), "--data", &d("held"), "--clips", "3"]);
    let e: serde_json::Value = serde_json::from_str(e.trim()).unwrap();
    assert_eq!(e["videos"], 4);
    assert_eq!(e["clips_per_video"], 3);
    let wrong = csn(&["eval", "--arch", "tiny-ir-csn", "--checkpoint", &d("a/final.csnw"), "--data", &d("held")]);
    assert_eq!(wrong.status.code(), Some(1));

    let p = ok(&["viz-filters", "--checkpoint", &d("a/final.csnw"), "--layer", "conv1", "--out", &d("viz")]);
    let img = std::fs::read(p.trim()).unwrap();
    assert!(img.starts_with(b"P6\n"));
    let p = ok(&["viz-filters", "--checkpoint", &d("a/final.csnw"), "--layer", "comp_0", "--out", &d("viz")]);
    assert!(p.trim().ends_with("conv2_1.spatial.pgm"), "{p}");
    let bad = csn(&["viz-filters", "--checkpoint", &d("a/final.csnw"), "--layer", "conv2_1.reduce", "--out", &d("viz")]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("eligible layers: conv1, conv2_1.spatial"));
}

#[test]
fn sweep_with_training_fills_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    ok(&["gen-data", "--out", &d("train"), "--per-class", "2", "--classes", "2"]);
    ok(&["gen-data", "--out", &d("held"), "--per-class", "1", "--classes", "2", "--seed", "9"]);
    ok(&[
        "sweep", "--arch", "micro-bottleneck", "--axis", "block-kind", "--input", "4x32x32", "--out", &d("s.csv"),
        "--train", "--data", &d("train"), "--held-out", &d("held"), "--epochs", "2", "--warmup-epochs", "1",
        "--iters-per-epoch", "1", "--batch-size", "2", "--eval-clips", "1",
    ]);
    let text = std::fs::read_to_string(d("s.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{text}");
    for r in rows {
        let acc: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
