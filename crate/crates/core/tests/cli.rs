use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geoground::bank::{GridShape, RawLayerStack};
use geoground::bank_io::{encode_geobank, write_geobank};
use geoground::numerics::Tensor2D;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn geoground(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoground"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn fixture_config() -> String {
    repo_file("../../configs/fixture.toml").display().to_string()
}

#[test]
fn fixture_run_writes_metrics_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let r = geoground(&["run", &fixture_config(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    for key in ["test_accuracy", "train_loss_final", "agreement"] {
        assert!(
            metrics.lines().any(|l| l.starts_with(&format!("{key} = "))),
            "no {key} in metrics"
        );
    }
    for kind in ["avg_layer_index", "roi_similarity", "layer_histogram"] {
        assert!(out.join("heatmaps").join(format!("{kind}.csv")).is_file(), "{kind}");
    }
    assert!(out.join("runtime.txt").is_file());
    assert!(!metrics.contains("wall_seconds"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let r = geoground(&["run", &fixture_config(), "--out-dir", out.to_str().unwrap(), "--threads", threads]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    assert_eq!(fs::read(a.join("metrics.txt")).unwrap(), fs::read(b.join("metrics.txt")).unwrap());
    for kind in ["avg_layer_index", "roi_similarity", "layer_histogram"] {
        let f = format!("heatmaps/{kind}.csv");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{kind}");
    }
}

#[test]
fn seed_override_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = geoground(&["run", &fixture_config(), "--out-dir", out.to_str().unwrap(), "--seed-override", "7"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let metrics = fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("seeds = [7]"));
}

#[test]
fn empty_seeds_exit_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = []\n");
    let r = geoground(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("`seeds`"), "{}", stderr(&r));
}

#[test]
fn unknown_field_exit_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = [0]\n\n[head]\ntopk = 2\n");
    let r = geoground(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    let err = stderr(&r);
    assert!(err.contains("line 4") && err.contains("topk"), "{err}");
}

#[test]
fn invalid_value_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = [0]\n[task]\ngrid_h = 7\n");
    let r = geoground(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("grid_h"), "{}", stderr(&r));
}

#[test]
fn missing_config_exit_2() {
    let r = geoground(&["run", "/nonexistent/config.toml"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn divergence_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seeds = [0]\n[task]\ntrain_samples = 32\ntest_samples = 8\nsteps = 20\nlr = 1e300\n",
    );
    let out = dir.path().join("o");
    let r = geoground(&["run", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&r), 3, "{}", stderr(&r));
    assert!(stderr(&r).contains("step"), "{}", stderr(&r));
}

#[test]
fn unknown_axis_exit_2() {
    let r = geoground(&["ablate", "depth", &fixture_config()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("allocation"));
}

#[test]
fn ablation_writes_rows_in_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seeds = [0]\n[task]\ntrain_samples = 16\ntest_samples = 8\nsteps = 5\n",
    );
    let out = dir.path().join("o");
    let r = geoground(&["ablate", "allocation", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let csv = fs::read_to_string(out.join("ablation_allocation.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["uniform", "global", "token_adaptive"]);
    assert!(out.join("ablation_allocation.txt").is_file());
    assert!(out.join("runtime_allocation.txt").is_file());
}

#[test]
fn failing_ablation_rows_keep_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seeds = [0]\n[task]\ntrain_samples = 16\ntest_samples = 8\nsteps = 5\nlr = 1e300\n",
    );
    let out = dir.path().join("o");
    let r = geoground(&["ablate", "position", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&r), 3, "{}", stderr(&r));
    let txt = fs::read_to_string(out.join("ablation_position.txt")).unwrap();
    assert!(txt.contains("complete = false"), "{txt}");
}

#[test]
fn inspect_fixture() {
    let path = repo_file("tests/fixtures/latter12_2f_8x8.geobank");
    let r = geoground(&["inspect", path.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("num_layers = 12"));
    assert!(text.contains("grid = 8x8"));
    // header block, blank line, section header, column names, 12 layer rows
    let rows: Vec<&str> = text.lines().skip_while(|l| *l != "[layers]").skip(2).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows[0].starts_with("12 "));
    assert!(rows[11].starts_with("23 "));
}

#[test]
fn inspect_corrupt_magic_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = fs::read(repo_file("tests/fixtures/latter12_2f_8x8.geobank")).unwrap();
    bytes[0] = b'X';
    let p = dir.path().join("bad.geobank");
    fs::write(&p, bytes).unwrap();
    let r = geoground(&["inspect", p.to_str().unwrap()]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("format error"), "{}", stderr(&r));
}

#[test]
fn inspect_constant_layer_reports_zero_std() {
    let shape = GridShape {
        num_frames: 1,
        grid_h: 2,
        grid_w: 2,
    };
    let layers = vec![
        Tensor2D::filled(4, 3, 0.75),
        Tensor2D::from_vec(4, 3, (0..12).map(|i| i as f64).collect()).unwrap(),
    ];
    let raw = RawLayerStack::new(vec![5, 6], shape, 3, layers).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.geobank");
    write_geobank(&p, &raw).unwrap();
    assert_eq!(fs::read(&p).unwrap(), encode_geobank(&raw).unwrap());
    let r = geoground(&["inspect", p.to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("5  0.750000  0.000000  0.750000  0.750000"), "{text}");
    // 0..11: mean 5.5, population variance (144 - 1) / 12
    let std = (143.0f64 / 12.0).sqrt();
    assert!(text.contains(&format!("6  5.500000  {std:.6}  0.000000  11.000000")), "{text}");
}

#[test]
fn selftest_passes() {
    let r = geoground(&["selftest"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));
    let text = String::from_utf8(r.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}

#[test]
fn gradcheck_single_seed() {
    let r = geoground(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));
    assert!(String::from_utf8(r.stdout).unwrap().contains("0 failing configurations"));
}
