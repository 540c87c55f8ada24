//! End-to-end tests of the `rht` binary: command behavior, file outputs
//! and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn rht() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rht"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn rht");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn rht").status.code().unwrap_or(-1)
}

fn write_pts(path: &Path, points: &[(f64, f64)]) {
    let mut text = format!("version: 1\nn_points: {}\n{{\n", points.len());
    for (x, y) in points {
        text.push_str(&format!("{x} {y}\n"));
    }
    text.push_str("}\n");
    std::fs::write(path, text).unwrap();
}

fn synthetic_68(seed: u64) -> Vec<(f64, f64)> {
    // Deterministic spread of 68 points in a 256x256 frame.
    (0..68)
        .map(|i| {
            let t = (i as f64 + seed as f64 * 0.37) * 2.399963;
            (128.0 + 80.0 * t.cos(), 128.0 + 80.0 * (1.7 * t).sin())
        })
        .collect()
}

fn write_noise_pgm(path: &Path, extent: usize, seed: u64) {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut data = Vec::with_capacity(extent * extent);
    for _ in 0..extent * extent {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        data.push((state >> 56) as u8);
    }
    let mut bytes = format!("P5\n{extent} {extent}\n255\n").into_bytes();
    bytes.extend_from_slice(&data);
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn render_68_points_produces_81_channels_and_stable_visualization() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("face.pts");
    write_pts(&pts, &synthetic_68(1));
    let out = dir.path().join("face.rhm1");
    run_ok(rht()
        .arg("render")
        .args(["--pts", pts.to_str().unwrap()])
        .args(["--size", "64x64"])
        .args(["--scale-from", "256x256"])
        .args(["--out", out.to_str().unwrap()]));

    let grid = rht_core::rhm1::load_grid(&out).unwrap();
    assert_eq!(grid.shape(), (64, 64, 81));

    // visualize(render(x)) is byte-stable and peaks at 255.
    let pgm_a = dir.path().join("a.pgm");
    let pgm_b = dir.path().join("b.pgm");
    for p in [&pgm_a, &pgm_b] {
        run_ok(rht()
            .arg("visualize")
            .args(["--in", out.to_str().unwrap()])
            .args(["--channel", "3"])
            .args(["--out", p.to_str().unwrap()]));
    }
    let a = std::fs::read(&pgm_a).unwrap();
    let b = std::fs::read(&pgm_b).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().skip(13).max(), Some(&255u8));
}

#[test]
fn render_rejects_zero_sigma_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("p.pts");
    write_pts(&pts, &[(4.0, 4.0)]);
    let code = exit_code(rht()
        .arg("render")
        .args(["--pts", pts.to_str().unwrap()])
        .args(["--sigma", "0"])
        .args(["--out", dir.path().join("x.rhm1").to_str().unwrap()]));
    assert_eq!(code, 1);
}

#[test]
fn unknown_flags_are_rejected_with_exit_1() {
    assert_eq!(exit_code(rht().arg("render").arg("--no-such-flag")), 1);
    assert_eq!(exit_code(rht().arg("no-such-command")), 1);
}

#[test]
fn help_exits_zero() {
    assert_eq!(exit_code(rht().arg("--help")), 0);
}

#[test]
fn evaluate_identical_dirs_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let truth = dir.path().join("truth");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    for stem in ["a", "b", "c"] {
        let points = synthetic_68(stem.len() as u64);
        write_pts(&pred.join(format!("{stem}.pts")), &points);
        write_pts(&truth.join(format!("{stem}.pts")), &points);
    }
    let report_path = dir.path().join("report.json");
    run_ok(rht()
        .arg("evaluate")
        .args(["--pred-dir", pred.to_str().unwrap()])
        .args(["--truth-dir", truth.to_str().unwrap()])
        .args(["--norm", "diag"])
        .args(["--report", report_path.to_str().unwrap()]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["mean_nme"], 0.0);
    assert_eq!(report["failure_rate"], 0.0);
    assert_eq!(report["auc"], 1.0);
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn evaluate_lists_unmatched_stems_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let truth = dir.path().join("truth");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    write_pts(&pred.join("a.pts"), &[(1.0, 1.0)]);
    write_pts(&truth.join("b.pts"), &[(1.0, 1.0)]);
    let out = rht()
        .arg("evaluate")
        .args(["--pred-dir", pred.to_str().unwrap()])
        .args(["--truth-dir", truth.to_str().unwrap()])
        .args(["--norm", "diag"])
        .args(["--report", dir.path().join("r.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("a") && stderr.contains("b"), "stems not listed: {stderr}");
}

#[test]
fn evaluate_box_norm_without_manifest_boxes_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let truth = dir.path().join("truth");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    write_pts(&pred.join("a.pts"), &[(1.0, 1.0), (5.0, 5.0)]);
    write_pts(&truth.join("a.pts"), &[(1.0, 1.0), (5.0, 5.0)]);
    let code = exit_code(rht()
        .arg("evaluate")
        .args(["--pred-dir", pred.to_str().unwrap()])
        .args(["--truth-dir", truth.to_str().unwrap()])
        .args(["--norm", "box-geomean"])
        .args(["--report", dir.path().join("r.json").to_str().unwrap()]));
    assert_eq!(code, 1);
}

#[test]
fn evaluate_hand_built_two_image_case() {
    // Image a: exact; image b: every landmark off by (3, 4) px with a
    // 10x10 ground-truth box, so NME_b = 5/10 = 0.5 exactly.
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let truth = dir.path().join("truth");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&truth).unwrap();
    let base = vec![(10.0, 10.0), (20.0, 10.0)];
    write_pts(&truth.join("a.pts"), &base);
    write_pts(&pred.join("a.pts"), &base);
    write_pts(&truth.join("b.pts"), &base);
    write_pts(
        &pred.join("b.pts"),
        &base.iter().map(|&(x, y)| (x + 3.0, y + 4.0)).collect::<Vec<_>>(),
    );
    let manifest = serde_json::json!({
        "entries": [
            {"image": "a.pgm", "annotation": "truth/a.pts", "box": [10.0, 10.0]},
            {"image": "b.pgm", "annotation": "truth/b.pts", "box": [10.0, 10.0]},
        ]
    });
    // Manifest path checks require the files to exist.
    std::fs::write(dir.path().join("a.pgm"), b"P5\n1 1\n255\n\x00").unwrap();
    std::fs::write(dir.path().join("b.pgm"), b"P5\n1 1\n255\n\x00").unwrap();
    let mpath = dir.path().join("m.json");
    std::fs::write(&mpath, manifest.to_string()).unwrap();

    let report_path = dir.path().join("report.json");
    let out = run_ok(rht()
        .arg("--json")
        .arg("evaluate")
        .args(["--pred-dir", pred.to_str().unwrap()])
        .args(["--truth-dir", truth.to_str().unwrap()])
        .args(["--norm", "box-geomean"])
        .args(["--manifest", mpath.to_str().unwrap()])
        .args(["--threshold", "0.1"])
        .args(["--report", report_path.to_str().unwrap()]));
    let line: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().last().unwrap()).unwrap();
    assert_eq!(line["mean_nme"], 0.25);
    assert_eq!(line["failure_rate"], 0.5);
}

#[test]
fn fuse_quarter_scale_predicts_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("t.pgm");
    let reference = dir.path().join("r.pgm");
    write_noise_pgm(&target, 32, 1);
    write_noise_pgm(&reference, 32, 2);
    let pts = dir.path().join("p.pts");
    write_pts(&pts, &[(10.0, 12.0), (20.0, 11.0), (16.0, 22.0)]);
    let heat = dir.path().join("h.rhm1");
    run_ok(rht()
        .arg("render")
        .args(["--pts", pts.to_str().unwrap()])
        .args(["--size", "32x32"])
        .args(["--out", heat.to_str().unwrap()]));
    let pred = dir.path().join("pred.rhm1");
    run_ok(rht()
        .arg("fuse")
        .args(["--target", target.to_str().unwrap()])
        .args(["--reference", reference.to_str().unwrap()])
        .args(["--ref-heatmaps", heat.to_str().unwrap()])
        .args(["--scale", "quarter"])
        .args(["--out", pred.to_str().unwrap()]));
    let grid = rht_core::rhm1::load_grid(&pred).unwrap();
    assert_eq!(grid.shape(), (32, 32, 3));
    assert!(grid.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn transfer_writes_named_container_with_theta() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("t.pgm");
    let reference = dir.path().join("r.pgm");
    write_noise_pgm(&target, 32, 3);
    write_noise_pgm(&reference, 32, 4);
    let prefix = dir.path().join("xfer");
    run_ok(rht()
        .arg("transfer")
        .args(["--target", target.to_str().unwrap()])
        .args(["--reference", reference.to_str().unwrap()])
        .args(["--out", prefix.to_str().unwrap()]));
    let container = dir.path().join("xfer.rhm1");
    let (maps, _) = rht_core::rhm1::load_container(&container).unwrap();
    let names: Vec<&str> = maps.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["fs_1x", "fe_1x", "d_1x", "a_1x", "fs_2x", "fs_4x", "theta"] {
        assert!(names.contains(&expected), "missing map {expected} in {names:?}");
    }
    let theta = maps.iter().find(|(n, _)| n == "theta").unwrap();
    assert_eq!(theta.1.len(), 6);
}

#[test]
fn transfer_self_reference_gives_identity_selection() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("t.pgm");
    write_noise_pgm(&target, 32, 5);
    let prefix = dir.path().join("self");
    run_ok(rht()
        .arg("transfer")
        .args(["--target", target.to_str().unwrap()])
        .args(["--reference", target.to_str().unwrap()])
        .args(["--out", prefix.to_str().unwrap()]));
    let (maps, _) = rht_core::rhm1::load_container(dir.path().join("self.rhm1")).unwrap();
    let d = maps.iter().find(|(n, _)| n == "d_1x").unwrap();
    for (i, &v) in d.1.data().iter().enumerate() {
        assert_eq!(v as usize, i, "self-reference argmax must be the identity");
    }
    let a = maps.iter().find(|(n, _)| n == "a_1x").unwrap();
    for &v in a.1.data() {
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn overfit_quarter_halves_loss_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let trace_a = dir.path().join("a.csv");
    let trace_b = dir.path().join("b.csv");
    for trace in [&trace_a, &trace_b] {
        let out = run_ok(rht()
            .arg("--json")
            .args(["--seed", "11"])
            .arg("overfit")
            .args(["--scale", "quarter"])
            .args(["--steps", "50"])
            .args(["--lr", "0.3"])
            .args(["--trace", trace.to_str().unwrap()]));
        let line: serde_json::Value =
            serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().last().unwrap()).unwrap();
        let ratio = line["ratio"].as_f64().unwrap();
        assert!(ratio < 0.5, "loss ratio {ratio} not below one half");
    }
    assert_eq!(std::fs::read(&trace_a).unwrap(), std::fs::read(&trace_b).unwrap());
}

#[test]
fn selfcheck_passes_within_budget() {
    let start = std::time::Instant::now();
    let out = run_ok(rht().arg("selfcheck"));
    let elapsed = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 10, "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(elapsed < 120.0, "selfcheck took {elapsed:.1}s (budget 120s)");
}
