//! End-to-end comparisons of KEM against the global baselines on one volume.

use std::time::Instant;

use crate::bandwidth::{pilot_for_constant, select_bandwidth, BandwidthPlan, Pilot, Selection};
use crate::baselines::{baseline_field, baseline_predict, gmm_fit_global, gmm_labels, kmeans, nearest_centroid_labels};
use crate::error::Result;
use crate::kem::{hard_labels_from_theta, kem_fit, predict_response, FitConfig, FitResult};
use crate::kernel::make_kernel;
use crate::metrics::{accuracy, align_labels, rmse_all, spe_constant, spe_report, EvalReport};
use crate::scalar::Real;
use crate::volume::{
    split_train_test, subsample_mask, Dims, LabelVolume, MaskRole, ParameterField, SampleMask, Volume3D,
};

pub const TRAIN_FRACTION: f64 = 0.8;
const SUBSAMPLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Held-out split of the grid: `fit` is the part of `train` kept at ratio `r`.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: SampleMask,
    pub test: SampleMask,
    pub fit: SampleMask,
}

pub fn make_split(dims: Dims, r: f64, seed: u64) -> Result<Split> {
    let (train, test) = split_train_test(dims, TRAIN_FRACTION, seed)?;
    let fit = if r >= 1.0 {
        train.clone()
    } else {
        let sub = subsample_mask(dims, r, seed ^ SUBSAMPLE_SALT)?;
        let both = train
            .as_slice()
            .iter()
            .zip(sub.as_slice())
            .map(|(&a, &b)| a && b)
            .collect();
        SampleMask::from_bools(dims, both, MaskRole::Subsample)?
    };
    Ok(Split { train, test, fit })
}

/// Ground truth available for synthetic data.
#[derive(Clone, Copy, Debug)]
pub struct Truth<'a, T> {
    pub theta: &'a ParameterField<T>,
    pub labels: &'a LabelVolume,
}

#[allow(clippy::too_many_arguments)]
fn scored<T: Real>(
    method: &str,
    r: f64,
    ch: Option<f64>,
    estimate: &ParameterField<T>,
    labels: &LabelVolume,
    spe: f64,
    test: &SampleMask,
    truth: Option<Truth<'_, T>>,
    seconds: f64,
) -> Result<EvalReport> {
    let mut row = EvalReport {
        method: method.into(),
        r,
        ch,
        rmse_pi: None,
        rmse_mu: None,
        rmse_sigma: None,
        spe,
        accuracy: None,
        seconds,
    };
    if let Some(t) = truth {
        let [p, m, s] = rmse_all(estimate, t.theta)?;
        row.rmse_pi = Some(p);
        row.rmse_mu = Some(m);
        row.rmse_sigma = Some(s);
        let aligned = align_labels(labels, &estimate.mean_mu(), &t.theta.mean_mu())?;
        row.accuracy = Some(accuracy(&aligned, t.labels, test)?);
    }
    Ok(row)
}

/// KEM fit with a fixed bandwidth, scored on the split.
pub struct KemRun<T> {
    pub fit: FitResult<T>,
    pub report: EvalReport,
}

pub fn run_kem<T: Real>(
    method: &str,
    v: &Volume3D<T>,
    split: &Split,
    r: f64,
    pilot: &Pilot,
    template: &FitConfig<T>,
    truth: Option<Truth<'_, T>>,
) -> Result<KemRun<T>> {
    let started = Instant::now();
    let cfg = template.with_kernel(make_kernel(T::lit(pilot.h), pilot.s, v.dims())?);
    let fit = kem_fit(v, &split.fit, &cfg)?;
    let seconds = started.elapsed().as_secs_f64();
    let spe = spe_report(v, &predict_response(&fit.theta), &split.test)?;
    let labels = hard_labels_from_theta(v, &fit.theta)?;
    let report = scored(
        method,
        r,
        Some(pilot.ch),
        &fit.theta,
        &labels,
        spe,
        &split.test,
        truth,
        seconds,
    )?;
    Ok(KemRun { fit, report })
}

/// KEM with the bandwidth constant `ch`, mapped to `(h, s)` with `N = |fit|`.
pub fn run_kem_with_constant<T: Real>(
    method: &str,
    v: &Volume3D<T>,
    split: &Split,
    r: f64,
    ch: f64,
    template: &FitConfig<T>,
    truth: Option<Truth<'_, T>>,
) -> Result<KemRun<T>> {
    let pilot = pilot_for_constant(ch, split.fit.count(), v.dims());
    run_kem(method, v, split, r, &pilot, template, truth)
}

pub fn run_kmeans<T: Real>(
    v: &Volume3D<T>,
    split: &Split,
    r: f64,
    template: &FitConfig<T>,
    truth: Option<Truth<'_, T>>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let values = split.fit.gather(v.data());
    let km = kmeans(&values, template.components, 300)?;
    let theta = km.to_theta(&values, template.sigma_floor);
    let seconds = started.elapsed().as_secs_f64();
    let field = baseline_field(&theta, v.dims())?;
    let labels = nearest_centroid_labels(v, &km.centroids)?;
    let spe = spe_constant(v, baseline_predict(&theta), &split.test)?;
    scored("kmeans", r, None, &field, &labels, spe, &split.test, truth, seconds)
}

pub fn run_gmm<T: Real>(
    v: &Volume3D<T>,
    split: &Split,
    r: f64,
    template: &FitConfig<T>,
    truth: Option<Truth<'_, T>>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let values = split.fit.gather(v.data());
    let km = kmeans(&values, template.components, 300)?;
    let init = km.to_theta(&values, template.sigma_floor);
    let gmm = gmm_fit_global(&values, &init, template.tol, 500, template.sigma_floor)?;
    let seconds = started.elapsed().as_secs_f64();
    let field = baseline_field(&gmm.theta, v.dims())?;
    let labels = gmm_labels(v, &gmm.theta)?;
    let spe = spe_constant(v, baseline_predict(&gmm.theta), &split.test)?;
    scored("GMM", r, None, &field, &labels, spe, &split.test, truth, seconds)
}

/// Bandwidth selection on the `fit`/`test` split followed by a KEM fit at the
/// chosen bandwidth.
pub fn run_selected<T: Real>(
    method: &str,
    v: &Volume3D<T>,
    split: &Split,
    r: f64,
    plan: &BandwidthPlan,
    template: &FitConfig<T>,
    truth: Option<Truth<'_, T>>,
) -> Result<(Selection, KemRun<T>)> {
    let started = Instant::now();
    let selection = select_bandwidth(v, &split.fit, &split.test, plan, template)?;
    let pilot = Pilot {
        ch: selection.selected.ch,
        h: selection.selected.h,
        s: selection.selected.s,
    };
    let mut run = run_kem(method, v, split, r, &pilot, template, truth)?;
    run.report.seconds = started.elapsed().as_secs_f64();
    Ok((selection, run))
}
