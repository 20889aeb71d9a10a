//! Kernel EM: alternating a per-voxel E-step with kernel-weighted M-steps.
//!
//! Parameters are estimated at every voxel of the grid; the sample mask only
//! restricts which voxels contribute observations to the local sums.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{argmax, kmeans, log_sum_exp};
use crate::error::{invalid, Error, Result};
use crate::kernel::{check_kernel_dims, convolve_separable, KernelSpec};
use crate::scalar::{std_normal_ln_pdf, Real};
use crate::volume::{Dims, LabelVolume, ParameterField, SampleMask, Volume3D};

const KMEANS_MAX_ITER: usize = 300;

/// How the variance M-step weights squared residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// Residuals weighted by the class responsibility (weighted EM).
    #[default]
    Standard,
    /// Unweighted residuals in the numerator, responsibility mass in the denominator.
    PaperLiteral,
}

#[derive(Clone, Debug)]
pub struct FitConfig<T> {
    pub components: usize,
    pub max_iter: usize,
    /// Stop once the largest absolute change over all parameter fields is below this.
    pub tol: T,
    pub sigma_floor: T,
    pub sigma_init: T,
    pub kernel: KernelSpec<T>,
    pub sigma_mode: SigmaMode,
    /// Flat voxel indices where the local log-likelihood is traced.
    pub probes: Vec<usize>,
}

impl<T: Real> FitConfig<T> {
    pub fn new(components: usize, kernel: KernelSpec<T>) -> Self {
        let dims = kernel.dims();
        let center = dims.index(dims.dx / 2, dims.dy / 2, dims.dz / 2);
        Self {
            components,
            max_iter: 50,
            tol: T::lit(1e-4),
            sigma_floor: T::lit(1e-4),
            sigma_init: T::lit(0.05),
            kernel,
            sigma_mode: SigmaMode::Standard,
            probes: vec![center],
        }
    }

    /// Same settings with another kernel.
    pub fn with_kernel(&self, kernel: KernelSpec<T>) -> Self {
        Self { kernel, ..self.clone() }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if self.components == 0 {
            return Err(invalid("component count must be at least 1"));
        }
        if !(self.tol > T::zero()) {
            return Err(invalid("tolerance must be positive"));
        }
        if !(self.sigma_floor > T::zero()) {
            return Err(invalid("sigma floor must be positive"));
        }
        if !(self.sigma_init >= self.sigma_floor) {
            return Err(invalid("initial sigma must not be below the floor"));
        }
        if let Some(&p) = self.probes.iter().find(|&&p| p >= dims.len()) {
            return Err(invalid(format!("probe voxel {p} outside the grid")));
        }
        check_kernel_dims(&self.kernel, dims)
    }
}

/// Class posteriors at the sampled voxels (zero elsewhere), voxel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities<T> {
    dims: Dims,
    components: usize,
    values: Vec<T>,
}

impl<T: Real> Responsibilities<T> {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn components(&self) -> usize {
        self.components
    }

    #[inline]
    pub fn get(&self, idx: usize, m: usize) -> T {
        self.values[idx * self.components + m]
    }

    /// Posteriors of all classes at one voxel.
    pub fn at(&self, idx: usize) -> &[T] {
        &self.values[idx * self.components..(idx + 1) * self.components]
    }

    /// Field of class `m` (zero-based).
    pub fn class_field(&self, m: usize) -> Vec<T> {
        self.values.par_chunks(self.components).map(|r| r[m]).collect()
    }

    /// Largest `|Σ_m r_m - 1|` over the given voxels.
    pub fn sum_defect(&self, mask: &SampleMask) -> T {
        mask.indices()
            .map(|idx| (self.at(idx).iter().copied().sum::<T>() - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

/// Output of one M-step: new fields and how many voxel values were carried over
/// from the previous iterate because their local weight sum was zero.
#[derive(Clone, Debug)]
pub struct FieldUpdate<T> {
    pub fields: Vec<Volume3D<T>>,
    pub carried: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub max_delta: f64,
    pub seconds: f64,
    pub carried: usize,
    /// Local log-likelihood at each probe voxel after the update.
    pub loglik: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub theta: ParameterField<T>,
    pub iterations: usize,
    pub final_delta: T,
    pub converged: bool,
    pub carried_voxels: usize,
    pub trace: Vec<IterationRecord>,
}

fn check_inputs<T: Real>(v: &Volume3D<T>, mask: &SampleMask) -> Result<()> {
    v.dims().check_same(&mask.dims())?;
    if mask.count() == 0 {
        return Err(Error::EmptySample);
    }
    Ok(())
}

/// Starting point: k-means centroids (ascending) as constant mean fields,
/// uniform priors and a constant initial scale.
pub fn init_params<T: Real>(v: &Volume3D<T>, mask: &SampleMask, cfg: &FitConfig<T>) -> Result<ParameterField<T>> {
    check_inputs(v, mask)?;
    let m = cfg.components;
    let values = mask.gather(v.data());
    let km = kmeans(&values, m, KMEANS_MAX_ITER)?;
    let uniform = T::one() / T::from_usize_lossy(m);
    ParameterField::constant(v.dims(), &vec![uniform; m], &km.centroids, &vec![cfg.sigma_init; m])
}

#[inline]
fn posterior_into<T: Real>(y: T, theta: &ParameterField<T>, idx: usize, out: &mut [T]) {
    for (m, o) in out.iter_mut().enumerate() {
        let sigma = theta.sigma[m].data()[idx];
        let z = (y - theta.mu[m].data()[idx]) / sigma;
        *o = theta.pi[m].data()[idx].ln() - sigma.ln() + std_normal_ln_pdf(z);
    }
    let max = out.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Class posteriors at each sampled voxel under the current fields, evaluated
/// in log space with max subtraction.
pub fn e_step<T: Real>(v: &Volume3D<T>, mask: &SampleMask, theta: &ParameterField<T>) -> Result<Responsibilities<T>> {
    v.dims().check_same(&mask.dims())?;
    v.dims().check_same(&theta.dims())?;
    let m = theta.components();
    let mut values = vec![T::zero(); v.dims().len() * m];
    values.par_chunks_mut(m).enumerate().for_each(|(idx, out)| {
        if mask.contains(idx) {
            posterior_into(v.data()[idx], theta, idx, out);
        }
    });
    Ok(Responsibilities {
        dims: v.dims(),
        components: m,
        values,
    })
}

fn masked_product<T: Real>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Elementwise `num / den`, carrying `prev` where the denominator vanishes.
fn ratio<T: Real>(num: &[T], den: &[T], prev: &Volume3D<T>, post: impl Fn(T) -> T + Sync) -> (Volume3D<T>, usize) {
    let out: Vec<(T, bool)> = num
        .par_iter()
        .zip(den)
        .zip(prev.data())
        .map(|((&a, &b), &p)| {
            let q = a / b;
            if b > T::zero() && q.is_finite() {
                (post(q), false)
            } else {
                (p, true)
            }
        })
        .collect();
    let carried = out.iter().filter(|(_, c)| *c).count();
    let data = out.into_iter().map(|(v, _)| v).collect();
    (Volume3D::from_vec(prev.dims(), data).expect("same length"), carried)
}

fn check_previous<T: Real>(previous: &[Volume3D<T>], m: usize, dims: Dims) -> Result<()> {
    if previous.len() != m {
        return Err(Error::ComponentMismatch(m, previous.len()));
    }
    previous.iter().try_for_each(|p| dims.check_same(&p.dims()))
}

fn prior_update<T: Real>(smoothed: &[Vec<T>], sample_mass: &[T], previous: &[Volume3D<T>]) -> FieldUpdate<T> {
    let mut carried = 0;
    let fields = smoothed
        .iter()
        .zip(previous)
        .map(|(num, prev)| {
            let (f, c) = ratio(num, sample_mass, prev, |q| q);
            carried += c;
            f
        })
        .collect();
    FieldUpdate { fields, carried }
}

fn mean_update<T: Real>(
    v: &Volume3D<T>,
    resp: &Responsibilities<T>,
    smoothed: &[Vec<T>],
    kernel: &KernelSpec<T>,
    previous: &[Volume3D<T>],
) -> FieldUpdate<T> {
    let n = v.dims().len();
    let mut carried = 0;
    let fields = (0..resp.components())
        .map(|m| {
            let weighted = masked_product(n, |idx| resp.get(idx, m) * v.data()[idx]);
            let num = convolve_separable(&weighted, kernel);
            let (f, c) = ratio(&num, &smoothed[m], &previous[m], |q| q);
            carried += c;
            f
        })
        .collect();
    FieldUpdate { fields, carried }
}

#[allow(clippy::too_many_arguments)]
fn scale_update<T: Real>(
    v: &Volume3D<T>,
    resp: &Responsibilities<T>,
    mu_next: &[Volume3D<T>],
    mask: &SampleMask,
    smoothed: &[Vec<T>],
    kernel: &KernelSpec<T>,
    mode: SigmaMode,
    sigma_floor: T,
    previous: &[Volume3D<T>],
) -> FieldUpdate<T> {
    let n = v.dims().len();
    let mut carried = 0;
    let fields = (0..resp.components())
        .map(|m| {
            let mu = mu_next[m].data();
            let residual = |idx: usize| {
                let d = v.data()[idx] - mu[idx];
                d * d
            };
            let weighted = match mode {
                SigmaMode::Standard => masked_product(n, |idx| resp.get(idx, m) * residual(idx)),
                SigmaMode::PaperLiteral => {
                    masked_product(n, |idx| if mask.contains(idx) { residual(idx) } else { T::zero() })
                }
            };
            let num = convolve_separable(&weighted, kernel);
            let (f, c) = ratio(&num, &smoothed[m], &previous[m], |q| {
                q.max(T::zero()).sqrt().max(sigma_floor)
            });
            carried += c;
            f
        })
        .collect();
    FieldUpdate { fields, carried }
}

fn smooth_classes<T: Real>(resp: &Responsibilities<T>, kernel: &KernelSpec<T>) -> Vec<Vec<T>> {
    (0..resp.components())
        .map(|m| convolve_separable(&resp.class_field(m), kernel))
        .collect()
}

fn check_step_inputs<T: Real>(resp: &Responsibilities<T>, mask: &SampleMask, kernel: &KernelSpec<T>) -> Result<()> {
    resp.dims().check_same(&mask.dims())?;
    check_kernel_dims(kernel, resp.dims())
}

/// Prior update: kernel-smoothed responsibilities over kernel-smoothed sample
/// indicator.
pub fn m_step_pi<T: Real>(
    resp: &Responsibilities<T>,
    mask: &SampleMask,
    kernel: &KernelSpec<T>,
    previous: &[Volume3D<T>],
) -> Result<FieldUpdate<T>> {
    check_step_inputs(resp, mask, kernel)?;
    check_previous(previous, resp.components(), resp.dims())?;
    let mass = convolve_separable(&mask.indicator(), kernel);
    Ok(prior_update(&smooth_classes(resp, kernel), &mass, previous))
}

/// Mean update: responsibility-weighted local average of the observations.
pub fn m_step_mu<T: Real>(
    v: &Volume3D<T>,
    resp: &Responsibilities<T>,
    mask: &SampleMask,
    kernel: &KernelSpec<T>,
    previous: &[Volume3D<T>],
) -> Result<FieldUpdate<T>> {
    check_step_inputs(resp, mask, kernel)?;
    v.dims().check_same(&resp.dims())?;
    check_previous(previous, resp.components(), resp.dims())?;
    Ok(mean_update(v, resp, &smooth_classes(resp, kernel), kernel, previous))
}

/// Scale update using the already-updated mean fields evaluated at each
/// sample's own position.
#[allow(clippy::too_many_arguments)]
pub fn m_step_sigma<T: Real>(
    v: &Volume3D<T>,
    resp: &Responsibilities<T>,
    mu_next: &[Volume3D<T>],
    mask: &SampleMask,
    kernel: &KernelSpec<T>,
    mode: SigmaMode,
    sigma_floor: T,
    previous: &[Volume3D<T>],
) -> Result<FieldUpdate<T>> {
    check_step_inputs(resp, mask, kernel)?;
    v.dims().check_same(&resp.dims())?;
    check_previous(mu_next, resp.components(), resp.dims())?;
    check_previous(previous, resp.components(), resp.dims())?;
    Ok(scale_update(
        v,
        resp,
        mu_next,
        mask,
        &smooth_classes(resp, kernel),
        kernel,
        mode,
        sigma_floor,
        previous,
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct StepReport<T> {
    pub max_delta: T,
    pub carried: usize,
}

/// Iteration state of a KEM fit. [`kem_fit`] drives it to convergence; the
/// state is exposed so callers can inspect every iterate.
pub struct KemState<'a, T> {
    v: &'a Volume3D<T>,
    mask: &'a SampleMask,
    cfg: &'a FitConfig<T>,
    theta: ParameterField<T>,
    resp: Option<Responsibilities<T>>,
    sample_mass: Vec<T>,
    iteration: usize,
    carried: usize,
}

impl<'a, T: Real> KemState<'a, T> {
    pub fn new(v: &'a Volume3D<T>, mask: &'a SampleMask, cfg: &'a FitConfig<T>) -> Result<Self> {
        cfg.validate(v.dims())?;
        let theta = init_params(v, mask, cfg)?;
        Self::from_theta(v, mask, cfg, theta)
    }

    /// Starts from given parameter fields instead of the k-means initialization.
    pub fn from_theta(
        v: &'a Volume3D<T>,
        mask: &'a SampleMask,
        cfg: &'a FitConfig<T>,
        theta: ParameterField<T>,
    ) -> Result<Self> {
        cfg.validate(v.dims())?;
        check_inputs(v, mask)?;
        v.dims().check_same(&theta.dims())?;
        if theta.components() != cfg.components {
            return Err(Error::ComponentMismatch(cfg.components, theta.components()));
        }
        let sample_mass = convolve_separable(&mask.indicator(), &cfg.kernel);
        Ok(Self {
            v,
            mask,
            cfg,
            theta,
            resp: None,
            sample_mass,
            iteration: 0,
            carried: 0,
        })
    }

    pub fn theta(&self) -> &ParameterField<T> {
        &self.theta
    }

    /// Responsibilities from the most recent E-step.
    pub fn responsibilities(&self) -> Option<&Responsibilities<T>> {
        self.resp.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn into_theta(self) -> ParameterField<T> {
        self.theta
    }

    /// One E-step followed by the prior, mean and scale updates.
    pub fn step(&mut self) -> Result<StepReport<T>> {
        let kernel = &self.cfg.kernel;
        let resp = e_step(self.v, self.mask, &self.theta)?;
        let smoothed = smooth_classes(&resp, kernel);
        let pi = prior_update(&smoothed, &self.sample_mass, &self.theta.pi);
        let mu = mean_update(self.v, &resp, &smoothed, kernel, &self.theta.mu);
        let sigma = scale_update(
            self.v,
            &resp,
            &mu.fields,
            self.mask,
            &smoothed,
            kernel,
            self.cfg.sigma_mode,
            self.cfg.sigma_floor,
            &self.theta.sigma,
        );
        let next = ParameterField::new(pi.fields, mu.fields, sigma.fields)?;
        let max_delta = next.max_abs_diff(&self.theta);
        let carried = pi.carried + mu.carried + sigma.carried;
        self.theta = next;
        self.resp = Some(resp);
        self.iteration += 1;
        self.carried += carried;
        Ok(StepReport { max_delta, carried })
    }
}

/// Runs KEM from the k-means initialization until the largest parameter change
/// falls below `cfg.tol` or `cfg.max_iter` iterations have run.
pub fn kem_fit<T: Real>(v: &Volume3D<T>, mask: &SampleMask, cfg: &FitConfig<T>) -> Result<FitResult<T>> {
    run(KemState::new(v, mask, cfg)?, &mut |_| {})
}

/// As [`kem_fit`], calling `observer` after every iteration.
pub fn kem_fit_observed<T: Real>(
    v: &Volume3D<T>,
    mask: &SampleMask,
    cfg: &FitConfig<T>,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<FitResult<T>> {
    run(KemState::new(v, mask, cfg)?, observer)
}

/// As [`kem_fit`] but from explicit starting fields.
pub fn kem_fit_from<T: Real>(
    v: &Volume3D<T>,
    mask: &SampleMask,
    cfg: &FitConfig<T>,
    theta0: ParameterField<T>,
) -> Result<FitResult<T>> {
    run(KemState::from_theta(v, mask, cfg, theta0)?, &mut |_| {})
}

fn run<T: Real>(mut state: KemState<'_, T>, observer: &mut dyn FnMut(&IterationRecord)) -> Result<FitResult<T>> {
    let cfg = state.cfg;
    let mut trace = Vec::new();
    let mut last = T::infinity();
    let mut converged = false;
    while state.iteration() < cfg.max_iter {
        let started = Instant::now();
        let report = state.step()?;
        let loglik = local_loglik(state.v, state.mask, state.theta(), &cfg.kernel, &cfg.probes)?;
        trace.push(IterationRecord {
            iter: state.iteration(),
            max_delta: report.max_delta.to_f64_lossy(),
            seconds: started.elapsed().as_secs_f64(),
            carried: report.carried,
            loglik: loglik.iter().map(|l| l.to_f64_lossy()).collect(),
        });
        observer(trace.last().expect("just pushed"));
        last = report.max_delta;
        if report.max_delta < cfg.tol {
            converged = true;
            break;
        }
    }
    if state.carried > 0 {
        log::warn!("{} voxel updates carried over for lack of local samples", state.carried);
    }
    Ok(FitResult {
        iterations: state.iteration(),
        final_delta: last,
        converged,
        carried_voxels: state.carried,
        trace,
        theta: state.into_theta(),
    })
}

/// Locally weighted log-likelihood at each probe voxel, using the fitted
/// parameters at that voxel as the working parameter.
pub fn local_loglik<T: Real>(
    v: &Volume3D<T>,
    mask: &SampleMask,
    theta: &ParameterField<T>,
    kernel: &KernelSpec<T>,
    probes: &[usize],
) -> Result<Vec<T>> {
    let dims = v.dims();
    dims.check_same(&mask.dims())?;
    dims.check_same(&theta.dims())?;
    check_kernel_dims(kernel, dims)?;
    let m = theta.components();
    let r = kernel.radius() as isize;
    probes
        .iter()
        .map(|&p| {
            if p >= dims.len() {
                return Err(invalid(format!("probe voxel {p} outside the grid")));
            }
            let c = dims.coord(p);
            let pi: Vec<T> = (0..m).map(|k| theta.pi[k].data()[p]).collect();
            let mu: Vec<T> = (0..m).map(|k| theta.mu[k].data()[p]).collect();
            let sigma: Vec<T> = (0..m).map(|k| theta.sigma[k].data()[p]).collect();
            let mut w = vec![T::zero(); m];
            let mut acc = T::zero();
            for oz in -r..=r {
                for oy in -r..=r {
                    for ox in -r..=r {
                        let (i, j, k) = (c.i as isize + ox, c.j as isize + oy, c.k as isize + oz);
                        if i < 0 || j < 0 || k < 0 {
                            continue;
                        }
                        let (i, j, k) = (i as usize, j as usize, k as usize);
                        if i >= dims.dx || j >= dims.dy || k >= dims.dz {
                            continue;
                        }
                        let q = dims.index(i, j, k);
                        if !mask.contains(q) {
                            continue;
                        }
                        let y = v.data()[q];
                        for (n, o) in w.iter_mut().enumerate() {
                            *o = pi[n].ln() - sigma[n].ln() + std_normal_ln_pdf((y - mu[n]) / sigma[n]);
                        }
                        acc = acc + log_sum_exp(&w) * kernel.weight([ox, oy, oz]);
                    }
                }
            }
            Ok(acc)
        })
        .collect()
}

/// Conditional mean `Σ_m π_m(x) μ_m(x)` at every voxel.
pub fn predict_response<T: Real>(theta: &ParameterField<T>) -> Volume3D<T> {
    let dims = theta.dims();
    let data = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            (0..theta.components())
                .map(|m| theta.pi[m].data()[idx] * theta.mu[m].data()[idx])
                .sum()
        })
        .collect();
    Volume3D::from_vec(dims, data).expect("grid length")
}

/// Posterior of class `class` (zero-based) at every voxel.
pub fn posterior_volume<T: Real>(v: &Volume3D<T>, theta: &ParameterField<T>, class: usize) -> Result<Volume3D<T>> {
    if class >= theta.components() {
        return Err(invalid(format!(
            "class {class} out of range for {} components",
            theta.components()
        )));
    }
    let resp = e_step(v, &SampleMask::full(v.dims()), theta)?;
    Volume3D::from_vec(v.dims(), resp.class_field(class))
}

/// Argmax class per voxel as 1-based labels; ties go to the smaller index.
pub fn hard_labels<T: Real>(resp: &Responsibilities<T>) -> Result<LabelVolume> {
    let m = resp.components();
    let labels = resp.values.chunks(m).map(|r| (argmax(r) + 1) as u8).collect();
    LabelVolume::new(resp.dims(), labels, m)
}

/// Hard labels at every voxel under the given fields.
pub fn hard_labels_from_theta<T: Real>(v: &Volume3D<T>, theta: &ParameterField<T>) -> Result<LabelVolume> {
    hard_labels(&e_step(v, &SampleMask::full(v.dims()), theta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::make_kernel;
    use crate::scalar::std_normal_pdf;
    use crate::volume::subsample_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_theta(dims: Dims, m: usize, rng: &mut impl Rng) -> ParameterField<f64> {
        let raw: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..dims.len()).map(|_| rng.gen_range(0.05..1.0)).collect())
            .collect();
        let pi = (0..m)
            .map(|k| {
                Volume3D::from_fn(dims, |c| {
                    let idx = dims.index(c.i, c.j, c.k);
                    raw[k][idx] / raw.iter().map(|r| r[idx]).sum::<f64>()
                })
            })
            .collect();
        let mu = (0..m)
            .map(|k| Volume3D::from_fn(dims, |_| k as f64 * 0.3 + rng.gen_range(-0.1..0.1)))
            .collect();
        let sigma = (0..m)
            .map(|_| Volume3D::from_fn(dims, |_| rng.gen_range(0.05..0.3)))
            .collect();
        ParameterField::new(pi, mu, sigma).unwrap()
    }

    #[test]
    fn e_step_symmetric_case() {
        let dims = Dims::cube(1).unwrap();
        let theta = ParameterField::constant(dims, &[0.5, 0.5], &[0.0, 1.0], &[0.1, 0.1]).unwrap();
        let v = Volume3D::filled(dims, 0.5);
        let r = e_step(&v, &SampleMask::full(dims), &theta).unwrap();
        assert!(f64::abs(r.get(0, 0) - 0.5) < 1e-15);
        assert!(f64::abs(r.get(0, 1) - 0.5) < 1e-15);
    }

    #[test]
    fn e_step_degenerate_prior() {
        let dims = Dims::new(5, 1, 1).unwrap();
        let theta = ParameterField::constant(dims, &[1.0, 0.0, 0.0], &[0.0, 0.5, 1.0], &[0.1; 3]).unwrap();
        let v = Volume3D::from_vec(dims, vec![-3.0, 0.0, 0.5, 1.0, 9.0]).unwrap();
        let r = e_step(&v, &SampleMask::full(dims), &theta).unwrap();
        for idx in 0..5 {
            assert_eq!(r.at(idx), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn e_step_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::cube(6).unwrap();
        let theta = random_theta(dims, 3, &mut rng);
        let v = Volume3D::from_fn(dims, |_| rng.gen_range(-0.2..1.0));
        let mask = subsample_mask(dims, 0.7, 1).unwrap();
        let r = e_step(&v, &mask, &theta).unwrap();
        for idx in 0..dims.len() {
            if !mask.contains(idx) {
                assert!(r.at(idx).iter().all(|&x| x == 0.0));
                continue;
            }
            let y = v.data()[idx];
            let terms: Vec<f64> = (0..3)
                .map(|m| {
                    let s = theta.sigma[m].data()[idx];
                    std_normal_pdf((y - theta.mu[m].data()[idx]) / s) * theta.pi[m].data()[idx] / s
                })
                .collect();
            let total: f64 = terms.iter().sum();
            for m in 0..3 {
                assert!((r.get(idx, m) - terms[m] / total).abs() <= 1e-12);
            }
        }
        assert!(r.sum_defect(&mask) <= 1e-12);
    }

    #[test]
    fn m_steps_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = Dims::new(6, 5, 4).unwrap();
        let theta = random_theta(dims, 2, &mut rng);
        let v = Volume3D::from_fn(dims, |_| rng.gen_range(0.0..1.0));
        let mask = subsample_mask(dims, 0.8, 4).unwrap();
        let kernel = make_kernel(0.25, 3, dims).unwrap();
        let resp = e_step(&v, &mask, &theta).unwrap();
        let pi = m_step_pi(&resp, &mask, &kernel, &theta.pi).unwrap();
        let mu = m_step_mu(&v, &resp, &mask, &kernel, &theta.mu).unwrap();
        let sigma = m_step_sigma(
            &v,
            &resp,
            &mu.fields,
            &mask,
            &kernel,
            SigmaMode::Standard,
            1e-4,
            &theta.sigma,
        )
        .unwrap();
        for idx in 0..dims.len() {
            let c = dims.coord(idx);
            for m in 0..2 {
                let (mut kw, mut rkw, mut rkwy, mut rkwd) = (0.0, 0.0, 0.0, 0.0);
                for q in mask.indices() {
                    let n = dims.coord(q);
                    let off = [
                        n.i as isize - c.i as isize,
                        n.j as isize - c.j as isize,
                        n.k as isize - c.k as isize,
                    ];
                    let w = kernel.weight(off);
                    let r = resp.get(q, m);
                    let d = v.data()[q] - mu.fields[m].data()[q];
                    kw += w;
                    rkw += r * w;
                    rkwy += r * w * v.data()[q];
                    rkwd += r * w * d * d;
                }
                assert!((pi.fields[m].data()[idx] - rkw / kw).abs() <= 1e-12);
                assert!((mu.fields[m].data()[idx] - rkwy / rkw).abs() <= 1e-12);
                assert!((sigma.fields[m].data()[idx] - (rkwd / rkw).sqrt().max(1e-4)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn prior_update_fixed_points() {
        let dims = Dims::cube(5).unwrap();
        let kernel = make_kernel(0.3, 3, dims).unwrap();
        let mask = subsample_mask(dims, 0.5, 2).unwrap();
        let prev = vec![Volume3D::filled(dims, 0.5); 2];
        let theta = ParameterField::constant(dims, &[1.0, 0.0], &[0.0, 1.0], &[0.1, 0.1]).unwrap();
        let v = Volume3D::filled(dims, 0.3);
        let resp = e_step(&v, &mask, &theta).unwrap();
        let pi = m_step_pi(&resp, &mask, &kernel, &prev).unwrap();
        assert!(pi.fields[0].data().iter().all(|&p| f64::abs(p - 1.0) < 1e-15));

        let theta = ParameterField::constant(dims, &[0.3, 0.7], &[0.0, 0.0], &[0.1, 0.1]).unwrap();
        let resp = e_step(&v, &mask, &theta).unwrap();
        let pi = m_step_pi(&resp, &mask, &kernel, &prev).unwrap();
        assert!(pi.fields[0].data().iter().all(|&p| f64::abs(p - 0.3) < 1e-14));
        assert!(pi.fields[1].data().iter().all(|&p| f64::abs(p - 0.7) < 1e-14));
    }

    #[test]
    fn constant_data_fixed_points() {
        let dims = Dims::cube(5).unwrap();
        let kernel = make_kernel(0.3, 3, dims).unwrap();
        let mask = SampleMask::full(dims);
        let v = Volume3D::filled(dims, 0.42);
        let theta = ParameterField::constant(dims, &[0.5, 0.5], &[0.2, 0.6], &[0.1, 0.1]).unwrap();
        let resp = e_step(&v, &mask, &theta).unwrap();
        let mu = m_step_mu(&v, &resp, &mask, &kernel, &theta.mu).unwrap();
        for f in &mu.fields {
            assert!(f.data().iter().all(|&x| f64::abs(x - 0.42) < 1e-14));
        }
        let sigma = m_step_sigma(
            &v,
            &resp,
            &mu.fields,
            &mask,
            &kernel,
            SigmaMode::Standard,
            1e-4,
            &theta.sigma,
        )
        .unwrap();
        for f in &sigma.fields {
            assert!(f.data().iter().all(|&x| x == 1e-4));
        }
    }

    #[test]
    fn empty_neighbourhood_carries_previous_value() {
        let dims = Dims::new(9, 1, 1).unwrap();
        let kernel = make_kernel(0.05, 3, dims).unwrap();
        let mut inc = vec![false; 9];
        inc[0] = true;
        let mask = SampleMask::from_bools(dims, inc, crate::volume::MaskRole::Subsample).unwrap();
        let v = Volume3D::filled(dims, 0.5);
        let theta = ParameterField::constant(dims, &[1.0], &[0.5], &[0.1]).unwrap();
        let prev = vec![Volume3D::filled(dims, 0.77)];
        let resp = e_step(&v, &mask, &theta).unwrap();
        let pi = m_step_pi(&resp, &mask, &kernel, &prev).unwrap();
        // voxels 0 and 1 see the sample, the other seven do not
        assert_eq!(pi.carried, 7);
        assert_eq!(pi.fields[0].data()[5], 0.77);
        assert_eq!(pi.fields[0].data()[1], 1.0);
    }

    #[test]
    fn sigma_modes_agree_only_for_unit_responsibilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = Dims::cube(5).unwrap();
        let kernel = make_kernel(0.3, 3, dims).unwrap();
        let mask = SampleMask::full(dims);
        let v = Volume3D::from_fn(dims, |_| rng.gen::<f64>());
        let one = ParameterField::constant(dims, &[1.0], &[0.5], &[0.2]).unwrap();
        let resp = e_step(&v, &mask, &one).unwrap();
        let mu = m_step_mu(&v, &resp, &mask, &kernel, &one.mu).unwrap();
        let a = m_step_sigma(
            &v,
            &resp,
            &mu.fields,
            &mask,
            &kernel,
            SigmaMode::Standard,
            1e-4,
            &one.sigma,
        )
        .unwrap();
        let b = m_step_sigma(
            &v,
            &resp,
            &mu.fields,
            &mask,
            &kernel,
            SigmaMode::PaperLiteral,
            1e-4,
            &one.sigma,
        )
        .unwrap();
        assert_eq!(a.fields, b.fields);

        let two = ParameterField::constant(dims, &[0.5, 0.5], &[0.3, 0.7], &[0.2, 0.2]).unwrap();
        let resp = e_step(&v, &mask, &two).unwrap();
        let mu = m_step_mu(&v, &resp, &mask, &kernel, &two.mu).unwrap();
        let a = m_step_sigma(
            &v,
            &resp,
            &mu.fields,
            &mask,
            &kernel,
            SigmaMode::Standard,
            1e-4,
            &two.sigma,
        )
        .unwrap();
        let b = m_step_sigma(
            &v,
            &resp,
            &mu.fields,
            &mask,
            &kernel,
            SigmaMode::PaperLiteral,
            1e-4,
            &two.sigma,
        )
        .unwrap();
        assert!(a.fields[0]
            .data()
            .iter()
            .zip(b.fields[0].data())
            .any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn init_uses_sorted_centroids_and_constants() {
        let dims = Dims::cube(6).unwrap();
        let values = [0.9, 0.1, 0.5];
        let v = Volume3D::from_fn(dims, |c| values[(c.i + c.j + c.k) % 3]);
        let cfg = FitConfig::new(3, make_kernel(0.2, 3, dims).unwrap());
        let theta = init_params(&v, &SampleMask::full(dims), &cfg).unwrap();
        for m in 0..3 {
            assert!(theta.pi[m].data().iter().all(|&p| p == 1.0 / 3.0));
            assert!(theta.sigma[m].data().iter().all(|&s| s == 0.05));
        }
        for (m, e) in [0.1, 0.5, 0.9].into_iter().enumerate() {
            assert!(f64::abs(theta.mu[m].data()[0] - e) < 1e-14);
        }
    }

    #[test]
    fn predict_and_posterior_basics() {
        let dims = Dims::cube(2).unwrap();
        let theta = ParameterField::constant(dims, &[1.0, 0.0, 0.0], &[0.25, 1.0, 2.0], &[0.1; 3]).unwrap();
        assert!(predict_response(&theta).data().iter().all(|&y| y == 0.25));
        let third = 1.0 / 3.0;
        let theta = ParameterField::constant(dims, &[third; 3], &[0.0, 1.0, 2.0], &[0.1; 3]).unwrap();
        assert!(predict_response(&theta)
            .data()
            .iter()
            .all(|&y| f64::abs(y - 1.0) < 1e-15));

        let theta = ParameterField::constant(dims, &[0.0, 1.0], &[0.0, 1.0], &[0.1; 2]).unwrap();
        let v = Volume3D::filled(dims, 0.0);
        assert!(posterior_volume(&v, &theta, 1)
            .unwrap()
            .data()
            .iter()
            .all(|&p| p == 1.0));
        assert!(posterior_volume(&v, &theta, 2).is_err());
    }

    #[test]
    fn hard_label_ties_go_low() {
        let dims = Dims::new(2, 1, 1).unwrap();
        let resp = Responsibilities {
            dims,
            components: 3,
            values: vec![0.2, 0.5, 0.3, 0.5, 0.5, 0.0],
        };
        assert_eq!(hard_labels(&resp).unwrap().labels(), &[2, 1]);
    }

    #[test]
    fn local_loglik_constant_case() {
        let dims = Dims::cube(7).unwrap();
        let kernel = make_kernel(0.2, 3, dims).unwrap();
        let sigma = 0.2;
        let theta = ParameterField::constant(dims, &[1.0], &[0.6], &[sigma]).unwrap();
        let v = Volume3D::filled(dims, 0.6);
        let centre = dims.index(3, 3, 3);
        let ll = local_loglik(&v, &SampleMask::full(dims), &theta, &kernel, &[centre]).unwrap();
        let expected = (std_normal_pdf(0.0f64) / sigma).ln() * crate::kernel::window_mass(&kernel);
        assert!((ll[0] - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn config_validation() {
        let dims = Dims::cube(4).unwrap();
        let mut cfg = FitConfig::new(2, make_kernel(0.2, 3, dims).unwrap());
        assert!(cfg.validate(dims).is_ok());
        assert!(cfg.validate(Dims::cube(5).unwrap()).is_err());
        cfg.tol = 0.0;
        assert!(cfg.validate(dims).is_err());
        cfg.tol = 1e-4;
        cfg.sigma_floor = 0.0;
        assert!(cfg.validate(dims).is_err());
        cfg.sigma_floor = 1e-4;
        cfg.probes = vec![64];
        assert!(cfg.validate(dims).is_err());
    }
}
