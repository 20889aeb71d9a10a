use std::path::Path;
use std::process::{Command, Output};

use kem_core::volume::{load_volume, normalize_to_unit, store_volume};
use kem_core::{Dims, Volume};

fn kem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kem"))
        .args(args)
        .output()
        .expect("spawn kem")
}

fn ok(args: &[&str]) -> Output {
    let out = kem(args);
    assert!(
        out.status.success(),
        "kem {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Range of `mu_m` over the voxels where class `m` has the largest prior.
fn dominant_means(dir: &Path, m: usize) -> Vec<(f64, f64)> {
    let load = |name: &str, c: usize| -> Volume { load_volume(dir.join(format!("{name}_{c}.kvol"))).unwrap() };
    let pis: Vec<Volume> = (1..=m).map(|c| load("pi", c)).collect();
    (1..=m)
        .map(|c| {
            let mu = load("mu", c);
            let picked: Vec<f64> = (0..mu.data().len())
                .filter(|&i| (1..=m).all(|o| pis[c - 1].data()[i] >= pis[o - 1].data()[i]))
                .map(|i| mu.data()[i])
                .collect();
            let lo = picked.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect()
}

fn assert_means_within(dir: &Path, bands: &[(f64, f64)]) {
    let got = dominant_means(dir, bands.len());
    for (&(lo, hi), &(a, b)) in got.iter().zip(bands) {
        assert!(lo >= a && hi <= b, "{got:?} vs {bands:?}");
    }
}

fn phantom(dir: &Path, seed: &str) {
    ok(&["phantom", "--dims", "16", "--seed", seed, "--out-dir", s(dir)]);
}

#[test]
fn phantom_is_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    phantom(&a, "5");
    phantom(&b, "5");
    for name in ["volume.raw", "labels.raw", "truth/mu_2.raw", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = tmp.path().join("c");
    phantom(&c, "6");
    assert_ne!(
        std::fs::read(a.join("volume.raw")).unwrap(),
        std::fs::read(c.join("volume.raw")).unwrap()
    );
}

#[test]
fn invalid_dims_are_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kem(&["phantom", "--dims", "0,4,4", "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = kem(&["phantom", "--dims", "4,4", "--out-dir", s(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn fit_writes_fields_posteriors_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    let fit = tmp.path().join("fit");
    phantom(&ph, "2");
    let out = ok(&[
        "fit",
        "--input",
        s(&ph),
        "--out-dir",
        s(&fit),
        "--max-iter",
        "4",
        "--filter-size",
        "3",
    ]);

    let log = String::from_utf8(out.stderr).unwrap();
    let iterations: Vec<serde_json::Value> = log
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter(|v| v["event"] == "iteration")
        .collect();
    assert_eq!(iterations.len(), 4);
    for v in &iterations {
        assert!(v["iter"].is_u64() && v["max_delta"].is_f64() && v["seconds"].is_f64());
    }

    let pis: Vec<Volume> = (1..=3)
        .map(|m| load_volume(fit.join(format!("pi_{m}.kvol"))).unwrap())
        .collect();
    for i in 0..pis[0].data().len() {
        let total: f64 = pis.iter().map(|p| p.data()[i]).sum();
        assert!((total - 1.0).abs() < 1e-5, "voxel {i}: {total}");
    }
    for m in 1..=3 {
        let post: Volume = load_volume(fit.join(format!("posterior_{m}.kvol"))).unwrap();
        assert!(post.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit.join("fit.json")).unwrap()).unwrap();
    assert_eq!(summary["s"], 3);
    assert_eq!(summary["trace"].as_array().unwrap().len(), 4);

    let report = std::fs::read_to_string(fit.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,r,Ch,rmse_pi,rmse_mu,rmse_sigma,spe,accuracy,seconds"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "KEM");
    assert!(row[3..8].iter().all(|c| c.parse::<f64>().is_ok()), "{row:?}");
}

#[test]
fn fit_without_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kem(&["fit", "--out-dir", s(tmp.path())]);
    assert!(!out.status.success());
    let out = kem(&[
        "fit",
        "--input",
        s(&tmp.path().join("missing.kvol")),
        "--out-dir",
        s(tmp.path()),
    ]);
    assert!(!out.status.success());
}

#[test]
fn config_file_supplies_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, "1");
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"input": "{}", "max_iter": 2, "filter_size": 5, "r": 0.5}}"#,
            s(&ph)
        ),
    )
    .unwrap();
    let fit = tmp.path().join("fit");
    ok(&["fit", "--config", s(&cfg), "--out-dir", s(&fit), "--filter-size", "3"]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit.join("fit.json")).unwrap()).unwrap();
    assert_eq!(summary["s"], 3);
    assert_eq!(summary["iterations"], 2);
    assert!(std::fs::read_to_string(fit.join("report.csv"))
        .unwrap()
        .contains("KEM,0.5,"));
}

#[test]
fn raw_volume_fit_and_posterior_export_use_original_range() {
    let tmp = tempfile::tempdir().unwrap();
    let dims = Dims::cube(12).unwrap();
    let v = Volume::from_fn(dims, |c| {
        let [x, _, _] = c.as_array();
        let base = if x < 6 { -500.0 } else { 300.0 };
        base + 7.0 * ((c.as_array()[1] * 5 + c.as_array()[2] * 3) % 7) as f64
    });
    let input = tmp.path().join("ct.kvol");
    store_volume(&v, &input).unwrap();
    let fit = tmp.path().join("fit");
    ok(&[
        "fit",
        "--input",
        s(&input),
        "--out-dir",
        s(&fit),
        "--M",
        "2",
        "--max-iter",
        "5",
        "--filter-size",
        "3",
    ]);

    assert_means_within(&fit, &[(-500.0, -458.0), (300.0, 342.0)]);

    let out = tmp.path().join("export/post.kvol");
    ok(&[
        "export-posterior",
        "--input",
        s(&input),
        "--params",
        s(&fit),
        "--class",
        "2",
        "--out",
        s(&out),
    ]);
    let exported: Volume = load_volume(&out).unwrap();
    let (lo, hi) = v.min_max();
    assert!(exported.data().iter().all(|&p| p >= lo - 1e-3 && p <= hi + 1e-3));
    let posterior: Volume = load_volume(fit.join("posterior_2.kvol")).unwrap();
    let expected = kem_core::volume::denormalize(&posterior, (lo, hi)).unwrap();
    for (a, b) in exported.data().iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-6 * (hi - lo), "{a} {b}");
    }

    let bad = kem(&[
        "export-posterior",
        "--input",
        s(&input),
        "--params",
        s(&fit),
        "--class",
        "3",
        "--out-dir",
        s(tmp.path()),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn normalized_input_keeps_its_recorded_range() {
    let tmp = tempfile::tempdir().unwrap();
    let dims = Dims::cube(10).unwrap();
    let v = Volume::from_fn(
        dims,
        |c| if c.as_array()[0] < 5 { 10.0 } else { 30.0 } + (c.as_array()[1] % 3) as f64,
    );
    let input = tmp.path().join("unit.kvol");
    store_volume(&normalize_to_unit(&v).unwrap(), &input).unwrap();
    let fit = tmp.path().join("fit");
    ok(&[
        "fit",
        "--input",
        s(&input),
        "--out-dir",
        s(&fit),
        "--M",
        "2",
        "--max-iter",
        "3",
        "--filter-size",
        "3",
    ]);
    assert_means_within(&fit, &[(10.0, 12.0), (30.0, 32.0)]);

    let out = tmp.path().join("post.kvol");
    ok(&[
        "export-posterior",
        "--input",
        s(&input),
        "--params",
        s(&fit),
        "--class",
        "2",
        "--out",
        s(&out),
    ]);
    let exported: Volume = load_volume(&out).unwrap();
    for (i, &p) in exported.data().iter().enumerate() {
        let expected = if i % 10 < 5 { 10.0 } else { 32.0 };
        assert!((p - expected).abs() < 0.1, "voxel {i}: {p}");
    }
}

#[test]
fn bandwidth_emits_pilot_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, "4");
    for (method, pilots) in [("reg", 5), ("cv", 25)] {
        let dir = tmp.path().join(method);
        let out = ok(&[
            "bandwidth",
            "--input",
            s(&ph),
            "--method",
            method,
            "--reference-extent",
            "32",
            "--max-iter",
            "3",
            "--out-dir",
            s(&dir),
        ]);
        let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(printed["pilots"].as_array().unwrap().len(), pilots);
        assert!(printed["selected"]["Ch"].as_f64().unwrap() > 0.0);
        assert!(dir.join("bandwidth.json").exists());
    }
}

#[test]
fn evaluate_writes_four_rows_per_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, "7");
    let out = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--input",
        s(&ph),
        "--out-dir",
        s(&out),
        "--ratios",
        "0.5,1.0",
        "--reference-extent",
        "32",
        "--max-iter",
        "3",
    ]);
    let rows = kem_core::metrics::read_reports(out.join("eval.csv")).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        methods,
        ["KEM-CV", "KEM-REG", "kmeans", "GMM", "KEM-CV", "KEM-REG", "kmeans", "GMM"]
    );
    for row in &rows {
        assert_eq!(row.ch.is_some(), row.method.starts_with("KEM"));
        assert!(row.accuracy.is_some());
    }
}

#[test]
fn baselines_write_labels_and_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, "3");
    for kind in ["kmeans", "gmm"] {
        let out = tmp.path().join(kind);
        ok(&["baseline", "--input", s(&ph), "--out-dir", s(&out), "--kind", kind]);
        assert!(out.join("labels.json").exists() && out.join("labels.raw").exists());
        let rows = kem_core::metrics::read_reports(out.join("report.csv")).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].ch.is_none() && rows[0].accuracy.unwrap() > 0.5);
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let ph = tmp.path().join("ph");
    phantom(&ph, "8");
    let runs: Vec<Vec<u8>> = ["1", "3"]
        .iter()
        .map(|t| {
            let out = tmp.path().join(format!("t{t}"));
            ok(&[
                "fit",
                "--input",
                s(&ph),
                "--out-dir",
                s(&out),
                "--threads",
                t,
                "--max-iter",
                "4",
            ]);
            std::fs::read(out.join("mu_1.raw")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
