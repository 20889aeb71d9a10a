//! Choosing the bandwidth constant `C_h` in `h = C_h N^{-1/7}`.
//!
//! Both selectors score a schedule of pilot bandwidths by held-out squared
//! prediction error. Cross-validation keeps the best pilot. The regression
//! selector fits the leading-order SPE expansion
//! `σ² + (C_h⁴ C₁ / 4 + C_h⁻³ C₂) N^{-4/7}` to the pilot scores and returns its
//! minimizer `(3 C₂ / C₁)^{1/7}`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kem::{kem_fit, predict_response, FitConfig};
use crate::kernel::make_kernel;
use crate::metrics::spe_report;
use crate::scalar::Real;
use crate::volume::{Dims, SampleMask, Volume3D};

/// Grid extent that pilot bandwidths are expressed against: `h = s / 512`.
pub const REFERENCE_EXTENT: f64 = 512.0;
pub const CV_MULTIPLIERS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const MIN_FILTER_SIZE: usize = 3;
pub const MAX_FILTER_SIZE: usize = 11;
/// Largest accepted condition number of the (column-scaled) normal equations.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CV")]
    Cv,
    #[serde(rename = "REG")]
    Reg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pilot {
    #[serde(rename = "Ch")]
    pub ch: f64,
    pub h: f64,
    pub s: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthPlan {
    pub pilots: Vec<Pilot>,
    /// Sample size `N` in `h = C_h N^{-1/7}`.
    pub n: usize,
    pub method: Method,
}

impl BandwidthPlan {
    pub fn len(&self) -> usize {
        self.pilots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pilots.is_empty()
    }
}

#[inline]
fn root7(n: usize) -> f64 {
    (n as f64).powf(1.0 / 7.0)
}

fn base_pilots(reference: f64) -> impl Iterator<Item = (f64, usize)> {
    (1..=5).map(move |g| {
        let s = 2 * g + 1;
        (s as f64 / reference, s)
    })
}

/// Five pilots `s = 2g + 1`, `h = s / reference` for `g = 1..=5`.
pub fn reg_schedule(n: usize, reference: f64) -> BandwidthPlan {
    let pilots = base_pilots(reference)
        .map(|(h, s)| Pilot { ch: h * root7(n), h, s })
        .collect();
    BandwidthPlan {
        pilots,
        n,
        method: Method::Reg,
    }
}

/// The five base pilots each scaled by 0.3 to 0.7, keeping the base filter size.
pub fn cv_schedule(n: usize, reference: f64) -> BandwidthPlan {
    let pilots = base_pilots(reference)
        .flat_map(|(h, s)| {
            CV_MULTIPLIERS.iter().map(move |&f| {
                let h = h * f;
                Pilot { ch: h * root7(n), h, s }
            })
        })
        .collect();
    BandwidthPlan {
        pilots,
        n,
        method: Method::Cv,
    }
}

pub fn default_reg_schedule(n: usize) -> BandwidthPlan {
    reg_schedule(n, REFERENCE_EXTENT)
}

pub fn default_cv_schedule(n: usize) -> BandwidthPlan {
    cv_schedule(n, REFERENCE_EXTENT)
}

/// Bandwidth and filter size for a constant: `h = C_h N^{-1/7}` and the
/// smallest odd `s ≥ h · max(dims)`, clamped to `[3, 11]`.
pub fn pilot_for_constant(ch: f64, n: usize, dims: Dims) -> Pilot {
    let h = ch / root7(n);
    let reach = (h * dims.max_extent() as f64).ceil().max(1.0) as usize;
    let odd = if reach.is_multiple_of(2) { reach + 1 } else { reach };
    Pilot {
        ch,
        h,
        s: odd.clamp(MIN_FILTER_SIZE, MAX_FILTER_SIZE),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpePoint {
    #[serde(rename = "Ch")]
    pub ch: f64,
    pub h: f64,
    pub s: usize,
    pub spe: f64,
    pub seconds: f64,
}

impl SpePoint {
    pub fn synthetic(ch: f64, spe: f64) -> Self {
        Self {
            ch,
            h: f64::NAN,
            s: 0,
            spe,
            seconds: 0.0,
        }
    }
}

/// Fits KEM on `train` with the pilot kernel and scores the conditional mean on
/// `test`. Settings other than the kernel come from `template`.
pub fn spe<T: Real>(
    v: &Volume3D<T>,
    train: &SampleMask,
    test: &SampleMask,
    pilot: &Pilot,
    template: &FitConfig<T>,
) -> Result<f64> {
    if test.count() == 0 {
        return Err(Error::EmptySample);
    }
    let cfg = template.with_kernel(make_kernel(T::lit(pilot.h), pilot.s, v.dims())?);
    let fit = kem_fit(v, train, &cfg)?;
    spe_report(v, &predict_response(&fit.theta), test)
}

/// SPE of every pilot, in schedule order.
pub fn spe_curve<T: Real>(
    v: &Volume3D<T>,
    train: &SampleMask,
    test: &SampleMask,
    plan: &BandwidthPlan,
    template: &FitConfig<T>,
) -> Result<Vec<SpePoint>> {
    plan.pilots
        .iter()
        .map(|p| {
            let started = Instant::now();
            let spe = spe(v, train, test, p, template)?;
            log::info!("pilot Ch={:.5} h={:.5} s={} spe={:.6e}", p.ch, p.h, p.s, spe);
            Ok(SpePoint {
                ch: p.ch,
                h: p.h,
                s: p.s,
                spe,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Pilot with the lowest SPE; ties go to the smaller constant.
pub fn select_cv(curve: &[SpePoint]) -> Result<SpePoint> {
    curve
        .iter()
        .copied()
        .min_by(|a, b| a.spe.total_cmp(&b.spe).then(a.ch.total_cmp(&b.ch)))
        .ok_or(Error::EmptyCurve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegFit {
    #[serde(rename = "Ch")]
    pub ch: f64,
    pub c1: f64,
    pub c2: f64,
    /// The regression gave a non-positive constant and the CV choice was used.
    pub fell_back: bool,
}

/// Least-squares estimates of `(C₁, C₂)` from a centered design with rows
/// `(N^{-4/7} C_h⁴ / 4, N^{-4/7} C_h⁻³)`.
pub fn reg_constants(curve: &[SpePoint], n: usize) -> Result<(f64, f64)> {
    if curve.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let scale = (n as f64).powf(-4.0 / 7.0);
    let g = curve.len() as f64;
    let rows: Vec<[f64; 2]> = curve
        .iter()
        .map(|p| [scale * p.ch.powi(4) / 4.0, scale * p.ch.powi(-3)])
        .collect();
    let mean = |f: &dyn Fn(usize) -> f64| (0..curve.len()).map(f).sum::<f64>() / g;
    let m0 = mean(&|i| rows[i][0]);
    let m1 = mean(&|i| rows[i][1]);
    let my = mean(&|i| curve[i].spe);
    let x: Vec<[f64; 2]> = rows.iter().map(|r| [r[0] - m0, r[1] - m1]).collect();
    let y: Vec<f64> = curve.iter().map(|p| p.spe - my).collect();

    let norm = |a: usize| x.iter().map(|r| r[a] * r[a]).sum::<f64>().sqrt();
    let (n0, n1) = (norm(0), norm(1));
    if !(n0 > 0.0 && n1 > 0.0) {
        return Err(Error::SingularDesign(f64::INFINITY));
    }
    // normal equations of the unit-norm columns
    let z: Vec<[f64; 2]> = x.iter().map(|r| [r[0] / n0, r[1] / n1]).collect();
    let rho: f64 = z.iter().map(|r| r[0] * r[1]).sum();
    let cond = (1.0 + rho.abs()) / (1.0 - rho.abs());
    if !(cond.is_finite() && cond <= MAX_CONDITION) {
        return Err(Error::SingularDesign(cond));
    }
    let b0: f64 = z.iter().zip(&y).map(|(r, y)| r[0] * y).sum();
    let b1: f64 = z.iter().zip(&y).map(|(r, y)| r[1] * y).sum();
    let det = 1.0 - rho * rho;
    let u0 = (b0 - rho * b1) / det;
    let u1 = (b1 - rho * b0) / det;
    Ok((u0 / n0, u1 / n1))
}

/// Regression selector. Falls back to [`select_cv`] on the same curve when
/// either estimated constant is not positive.
pub fn select_reg(curve: &[SpePoint], n: usize) -> Result<RegFit> {
    let (c1, c2) = reg_constants(curve, n)?;
    if c1 > 0.0 && c2 > 0.0 {
        return Ok(RegFit {
            ch: (3.0 * c2 / c1).powf(1.0 / 7.0),
            c1,
            c2,
            fell_back: false,
        });
    }
    log::warn!("regression constants C1={c1:.3e} C2={c2:.3e} are not both positive; using the CV choice");
    Ok(RegFit {
        ch: select_cv(curve)?.ch,
        c1,
        c2,
        fell_back: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    #[serde(rename = "Ch")]
    pub ch: f64,
    pub h: f64,
    pub s: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reg: Option<RegFit>,
}

/// Scored pilots and the chosen bandwidth; serializes to the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub pilots: Vec<SpePoint>,
    pub selected: Selected,
    pub method: Method,
    pub n: usize,
    pub seconds: f64,
}

/// Chooses `(h, s)` from an already scored curve.
pub fn select_from_curve(curve: Vec<SpePoint>, plan: &BandwidthPlan, dims: Dims, seconds: f64) -> Result<Selection> {
    let selected = match plan.method {
        Method::Cv => {
            let best = select_cv(&curve)?;
            Selected {
                ch: best.ch,
                h: best.h,
                s: best.s,
                reg: None,
            }
        }
        Method::Reg => {
            let fit = select_reg(&curve, plan.n)?;
            let p = pilot_for_constant(fit.ch, plan.n, dims);
            Selected {
                ch: fit.ch,
                h: p.h,
                s: p.s,
                reg: Some(fit),
            }
        }
    };
    Ok(Selection {
        pilots: curve,
        selected,
        method: plan.method,
        n: plan.n,
        seconds,
    })
}

/// Scores every pilot of `plan` and applies its selector.
pub fn select_bandwidth<T: Real>(
    v: &Volume3D<T>,
    train: &SampleMask,
    test: &SampleMask,
    plan: &BandwidthPlan,
    template: &FitConfig<T>,
) -> Result<Selection> {
    let started = Instant::now();
    let curve = spe_curve(v, train, test, plan, template)?;
    select_from_curve(curve, plan, v.dims(), started.elapsed().as_secs_f64())
}
