//! `kem`: kernel EM segmentation of 3D volumes from the command line.

mod config;
mod files;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use kem_core::bandwidth::{cv_schedule, pilot_for_constant, reg_schedule, select_bandwidth, Method, REFERENCE_EXTENT};
use kem_core::baselines::{gmm_fit_global, gmm_labels, kmeans, nearest_centroid_labels, GlobalTheta};
use kem_core::experiment::{make_split, run_gmm, run_kmeans, run_selected, Split, Truth};
use kem_core::kem::{hard_labels_from_theta, kem_fit_observed, posterior_volume, predict_response, IterationRecord};
use kem_core::kernel::make_kernel;
use kem_core::metrics::{accuracy, align_labels, append_reports, rmse_all, spe_constant, spe_report, EvalReport};
use kem_core::phantom::{generate, Phantom, PhantomSpec};
use kem_core::volume::{denormalize, normalize_to_unit, store_labels, store_volume};
use kem_core::{Config, Dims, Params, Volume};

use config::Common;
use files::{load_fields, load_input, store_fields, write_json, Manifest, MANIFEST};

#[derive(Parser, Debug)]
#[command(
    name = "kem",
    version,
    about = "Kernel EM for spatially varying Gaussian mixtures on 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled volume with known parameter fields
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Grid extents as dx,dy,dz
        #[arg(long, value_delimiter = ',', num_args = 1..=3, value_parser = positive)]
        dims: Vec<usize>,
    },
    /// Fit KEM and write parameter fields, posteriors and hard labels
    Fit {
        #[command(flatten)]
        common: Common,
        /// Fit in the input's own units instead of rescaling to [0, 1]
        #[arg(long)]
        no_normalize: bool,
    },
    /// Score the pilot bandwidths and select one
    Bandwidth {
        #[command(flatten)]
        common: Common,
        /// Pilot bandwidths are h = s / reference-extent
        #[arg(long, default_value_t = REFERENCE_EXTENT)]
        reference_extent: f64,
    },
    /// Compare KEM-CV, KEM-REG, k-means and a global GMM
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Sampling ratios to sweep (defaults to --r)
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = REFERENCE_EXTENT)]
        reference_extent: f64,
    },
    /// Write one class posterior, rescaled to the input's intensity range
    ExportPosterior {
        #[command(flatten)]
        common: Common,
        /// Directory written by `kem fit`
        #[arg(long)]
        params: PathBuf,
        /// Class index, starting at 1
        #[arg(long)]
        class: usize,
        /// Output path (default: <out-dir>/posterior_<class>.kvol)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a global k-means or GMM baseline
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "gmm")]
        kind: BaselineKind,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum BaselineKind {
    Kmeans,
    Gmm,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("extents must be positive".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn log_line(value: serde_json::Value) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{value}");
}

fn log_iteration(rec: &IterationRecord) {
    log_line(json!({
        "event": "iteration",
        "iter": rec.iter,
        "max_delta": rec.max_delta,
        "seconds": rec.seconds,
        "carried": rec.carried,
        "loglik": rec.loglik,
    }));
}

fn init_threads(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        bail!("sampling ratio {r} is outside (0, 1]");
    }
    Ok(())
}

/// Working copy in [0, 1] plus the range to map results back with.
fn working_volume(v: &Volume, normalize: bool) -> Result<(Volume, Option<(f64, f64)>)> {
    if let Some(range) = v.value_range {
        return Ok((v.clone(), Some(range)));
    }
    if normalize {
        let n = normalize_to_unit(v)?;
        let range = n.value_range;
        return Ok((n, range));
    }
    Ok((v.clone(), None))
}

/// The volume in its original units.
fn raw_units(v: &Volume) -> Result<Volume> {
    Ok(match v.value_range {
        Some(range) => denormalize(v, range)?,
        None => v.clone(),
    })
}

fn template(common: &Common, dims: Dims, scale: f64) -> Result<Config> {
    let mut cfg = Config::new(common.components(), make_kernel(0.1, 1, dims)?);
    cfg.sigma_mode = common.sigma_mode();
    cfg.sigma_init *= scale;
    cfg.sigma_floor *= scale;
    if let Some(n) = common.max_iter {
        cfg.max_iter = n;
    }
    if let Some(t) = common.tol {
        cfg.tol = t * scale;
    }
    Ok(cfg)
}

fn truth_ref(truth: &Option<(Params, kem_core::LabelVolume)>) -> Option<Truth<'_, f64>> {
    truth.as_ref().map(|(theta, labels)| Truth { theta, labels })
}

fn cmd_phantom(common: Common, dims: Vec<usize>) -> Result<()> {
    let out = common.out_dir()?;
    let dims = match dims.as_slice() {
        [] => Dims::cube(64)?,
        [d] => Dims::cube(*d)?,
        [a, b, c] => Dims::new(*a, *b, *c)?,
        _ => bail!("--dims takes one or three extents"),
    };
    let mut spec = PhantomSpec::new(dims, common.seed());
    if common.m.is_some_and(|m| m != 3) {
        bail!("the phantom has exactly 3 classes");
    }
    spec.sigma_floor = 1e-4;
    let started = Instant::now();
    let ph: Phantom<f64> = generate(&spec)?;
    std::fs::create_dir_all(out)?;
    store_volume(&ph.volume, out.join("volume.kvol"))?;
    store_labels(&ph.labels, out.join("labels.kvol"))?;
    store_labels(&ph.geometry, out.join("geometry.kvol"))?;
    store_fields(&out.join("truth"), &ph.truth)?;
    let manifest = Manifest {
        spec,
        volume: "volume.kvol".into(),
        labels: "labels.kvol".into(),
        geometry: "geometry.kvol".into(),
        truth: "truth".into(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    log_line(json!({"event": "phantom", "dims": dims, "seconds": started.elapsed().as_secs_f64()}));
    Ok(())
}

fn kernel_for(common: &Common, split: &Split, dims: Dims) -> kem_core::bandwidth::Pilot {
    let mut pilot = pilot_for_constant(common.bandwidth_constant(), split.fit.count(), dims);
    if let Some(s) = common.filter_size {
        pilot.s = s;
    }
    pilot
}

fn cmd_fit(common: Common, no_normalize: bool) -> Result<()> {
    let out = common.out_dir()?.to_path_buf();
    let input = load_input(common.input()?)?;
    let r = common.ratio();
    check_ratio(r)?;
    let original = &raw_units(&input.volume)?;
    let dims = original.dims();
    // phantoms are fitted in their own units so the truth stays comparable
    let normalize = !no_normalize && input.truth.is_none();
    let (work, range) = working_volume(&input.volume, normalize)?;
    let scale = if normalize || range.is_some() {
        1.0
    } else {
        width(original)
    };
    let split = make_split(dims, r, common.seed())?;
    let pilot = kernel_for(&common, &split, dims);
    let cfg = template(&common, dims, scale)?.with_kernel(make_kernel(pilot.h, pilot.s, dims)?);
    log_line(
        json!({"event": "fit", "dims": dims, "M": cfg.components, "Ch": pilot.ch, "h": pilot.h, "s": pilot.s,
        "samples": split.fit.count()}),
    );

    let started = Instant::now();
    let fit = kem_fit_observed(&work, &split.fit, &cfg, &mut log_iteration)?;
    let seconds = started.elapsed().as_secs_f64();
    let theta = match range {
        Some(range) => fit.theta.denormalized(range)?,
        None => fit.theta.clone(),
    };

    std::fs::create_dir_all(&out)?;
    store_fields(&out, &theta)?;
    for m in 0..theta.components() {
        store_volume(
            &posterior_volume(original, &theta, m)?,
            out.join(format!("posterior_{}.kvol", m + 1)),
        )?;
    }
    let labels = hard_labels_from_theta(original, &theta)?;
    store_labels(&labels, out.join("labels.kvol"))?;

    let spe = spe_report(original, &predict_response(&theta), &split.test)?;
    let mut row = EvalReport {
        method: "KEM".into(),
        r,
        ch: Some(pilot.ch),
        rmse_pi: None,
        rmse_mu: None,
        rmse_sigma: None,
        spe,
        accuracy: None,
        seconds,
    };
    if let Some((truth, truth_labels)) = &input.truth {
        let [p, m, s] = rmse_all(&theta, truth)?;
        (row.rmse_pi, row.rmse_mu, row.rmse_sigma) = (Some(p), Some(m), Some(s));
        let aligned = align_labels(&labels, &theta.mean_mu(), &truth.mean_mu())?;
        row.accuracy = Some(accuracy(&aligned, truth_labels, &split.test)?);
    }
    append_reports(out.join("report.csv"), std::slice::from_ref(&row))?;
    let summary = json!({
        "dims": dims,
        "components": theta.components(),
        "value_range": range,
        "Ch": pilot.ch,
        "h": pilot.h,
        "s": pilot.s,
        "sigma_mode": cfg.sigma_mode,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "final_delta": fit.final_delta,
        "carried_voxels": fit.carried_voxels,
        "seconds": seconds,
        "trace": fit.trace,
    });
    write_json(&out.join("fit.json"), &summary)?;
    let defect = theta.simplex_defect();
    if defect > 1e-8 {
        bail!("fitted priors are off the simplex by {defect:e}");
    }
    Ok(())
}

fn width(v: &Volume) -> f64 {
    let (lo, hi) = v.min_max();
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

fn plan_for(method: Method, n: usize, reference: f64) -> kem_core::bandwidth::BandwidthPlan {
    match method {
        Method::Cv => cv_schedule(n, reference),
        Method::Reg => reg_schedule(n, reference),
    }
}

fn cmd_bandwidth(common: Common, reference: f64) -> Result<()> {
    let input = load_input(common.input()?)?;
    let r = common.ratio();
    check_ratio(r)?;
    let (work, _) = working_volume(&input.volume, input.truth.is_none())?;
    let dims = work.dims();
    let split = make_split(dims, r, common.seed())?;
    let plan = plan_for(common.method(), split.fit.count(), reference);
    let cfg = template(&common, dims, 1.0)?;
    let selection = select_bandwidth(&work, &split.fit, &split.test, &plan, &cfg)?;
    let text = serde_json::to_string_pretty(&selection)?;
    println!("{text}");
    if let Some(dir) = &common.out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("bandwidth.json"), &selection)?;
    }
    Ok(())
}

fn cmd_evaluate(common: Common, ratios: Vec<f64>, reference: f64) -> Result<()> {
    let out = common.out_dir()?.to_path_buf();
    let input = load_input(common.input()?)?;
    let (work, _) = working_volume(&input.volume, input.truth.is_none())?;
    let dims = work.dims();
    let ratios = if ratios.is_empty() {
        vec![common.ratio()]
    } else {
        ratios
    };
    let cfg = template(&common, dims, 1.0)?;
    let truth = truth_ref(&input.truth);
    std::fs::create_dir_all(&out)?;
    let csv = out.join("eval.csv");
    let mut selections = Vec::new();
    for &r in &ratios {
        check_ratio(r)?;
        let split = make_split(dims, r, common.seed())?;
        let n = split.fit.count();
        let (cv, kem_cv) = run_selected("KEM-CV", &work, &split, r, &cv_schedule(n, reference), &cfg, truth)?;
        let (reg, kem_reg) = run_selected("KEM-REG", &work, &split, r, &reg_schedule(n, reference), &cfg, truth)?;
        let rows = [
            kem_cv.report,
            kem_reg.report,
            run_kmeans(&work, &split, r, &cfg, truth)?,
            run_gmm(&work, &split, r, &cfg, truth)?,
        ];
        for row in &rows {
            log_line(serde_json::to_value(row)?);
        }
        append_reports(&csv, &rows)?;
        selections.push(json!({"r": r, "CV": cv, "REG": reg}));
    }
    write_json(&out.join("selections.json"), &selections)?;
    print!("{}", std::fs::read_to_string(&csv)?);
    Ok(())
}

fn fitted_components(params: &Path) -> Result<usize> {
    let path = params.join("fit.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary: serde_json::Value = serde_json::from_str(&text)?;
    summary["components"]
        .as_u64()
        .map(|m| m as usize)
        .context("fit.json has no component count")
}

fn cmd_export_posterior(common: Common, params: PathBuf, class: usize, out: Option<PathBuf>) -> Result<()> {
    let input = load_input(common.input()?)?;
    let v = &raw_units(&input.volume)?;
    let m = fitted_components(&params)?;
    if class == 0 || class > m {
        bail!("class {class} is out of range 1..={m}");
    }
    let theta = load_fields(&params, m)?;
    let posterior = posterior_volume(v, &theta, class - 1)?;
    let range = input.volume.value_range.unwrap_or_else(|| v.min_max());
    let exported = denormalize(&posterior, range)?;
    let path = match out {
        Some(p) => p,
        None => common.out_dir()?.join(format!("posterior_{class}.kvol")),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    store_volume(&exported, &path)?;
    log_line(json!({"event": "export", "class": class, "range": range, "path": path}));
    Ok(())
}

fn cmd_baseline(common: Common, kind: BaselineKind) -> Result<()> {
    let out = common.out_dir()?.to_path_buf();
    let input = load_input(common.input()?)?;
    let v = &raw_units(&input.volume)?;
    let r = common.ratio();
    check_ratio(r)?;
    let split = make_split(v.dims(), r, common.seed())?;
    let m = common.components();
    let floor = 1e-4 * width(v);
    std::fs::create_dir_all(&out)?;
    let started = Instant::now();
    let values = split.fit.gather(v.data());
    let km = kmeans(&values, m, 300)?;
    let (method, theta, labels, extra): (&str, GlobalTheta<f64>, _, _) = match kind {
        BaselineKind::Kmeans => {
            let theta = km.to_theta(&values, floor);
            let labels = nearest_centroid_labels(v, &km.centroids)?;
            (
                "kmeans",
                theta,
                labels,
                json!({"iterations": km.iterations, "sse_trace": km.sse_trace}),
            )
        }
        BaselineKind::Gmm => {
            let tol = common.tol.unwrap_or(1e-4) * width(v);
            let gmm = gmm_fit_global(&values, &km.to_theta(&values, floor), tol, 500, floor)?;
            let labels = gmm_labels(v, &gmm.theta)?;
            let extra = json!({"iterations": gmm.iterations, "converged": gmm.converged,
                "collapsed": gmm.collapsed, "loglik_trace": gmm.loglik_trace});
            ("GMM", gmm.theta, labels, extra)
        }
    };
    let seconds = started.elapsed().as_secs_f64();
    let prediction = kem_core::baselines::baseline_predict(&theta);
    let mut row = EvalReport {
        method: method.into(),
        r,
        ch: None,
        rmse_pi: None,
        rmse_mu: None,
        rmse_sigma: None,
        spe: spe_constant(v, prediction, &split.test)?,
        accuracy: None,
        seconds,
    };
    if let Some((truth, truth_labels)) = &input.truth {
        let field = kem_core::baselines::baseline_field(&theta, v.dims())?;
        let [p, mu, s] = rmse_all(&field, truth)?;
        (row.rmse_pi, row.rmse_mu, row.rmse_sigma) = (Some(p), Some(mu), Some(s));
        let aligned = align_labels(&labels, &theta.mu, &truth.mean_mu())?;
        row.accuracy = Some(accuracy(&aligned, truth_labels, &split.test)?);
    }
    store_labels(&labels, out.join("labels.kvol"))?;
    write_json(
        &out.join("baseline.json"),
        &json!({"method": method, "theta": theta, "fit": extra}),
    )?;
    append_reports(out.join("report.csv"), &[row])?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { common, dims } => {
            let common = common.resolve()?;
            init_threads(&common)?;
            cmd_phantom(common, dims)
        }
        Command::Fit { common, no_normalize } => {
            let common = common.resolve()?;
            init_threads(&common)?;
            cmd_fit(common, no_normalize)
        }
        Command::Bandwidth {
            common,
            reference_extent,
        } => {
            let common = common.resolve()?;
            init_threads(&common)?;
            cmd_bandwidth(common, reference_extent)
        }
        Command::Evaluate {
            common,
            ratios,
            reference_extent,
        } => {
            let common = common.resolve()?;
            init_threads(&common)?;
            cmd_evaluate(common, ratios, reference_extent)
        }
        Command::ExportPosterior {
            common,
            params,
            class,
            out,
        } => {
            let common = common.resolve()?;
            init_threads(&common)?;
            cmd_export_posterior(common, params, class, out)
        }
        Command::Baseline { common, kind } => {
            let common = common.resolve()?;
            init_threads(&common)?;
            cmd_baseline(common, kind)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
