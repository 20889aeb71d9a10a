//! Evaluation quantities: parameter-field RMSE, squared prediction error and
//! hard-label accuracy, plus the CSV report format.
//!
//! Classes of an estimate are matched to the reference by rank of their mean
//! intensity (ascending).

use std::fs::OpenOptions;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;
use crate::volume::{LabelVolume, ParameterField, SampleMask, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Pi,
    Mu,
    Sigma,
}

fn ranks<T: Real>(means: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| {
        means[a]
            .partial_cmp(&means[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// `order[c]` is the estimate class matched to reference class `c`: both are
/// ranked by mean and paired rank for rank.
pub fn class_alignment<T: Real>(estimate_means: &[T], reference_means: &[T]) -> Result<Vec<usize>> {
    if estimate_means.len() != reference_means.len() {
        return Err(Error::ComponentMismatch(reference_means.len(), estimate_means.len()));
    }
    let est = ranks(estimate_means);
    let reference = ranks(reference_means);
    let mut order = vec![0; est.len()];
    for (e, r) in est.into_iter().zip(reference) {
        order[r] = e;
    }
    Ok(order)
}

/// The estimate with classes reordered to match `truth`.
pub fn align_to<T: Real>(estimate: &ParameterField<T>, truth: &ParameterField<T>) -> Result<ParameterField<T>> {
    estimate.dims().check_same(&truth.dims())?;
    let order = class_alignment(&estimate.mean_mu(), &truth.mean_mu())?;
    estimate.permuted(&order)
}

/// Relabels hard labels of an estimate into the reference class numbering.
pub fn align_labels<T: Real>(pred: &LabelVolume, estimate_means: &[T], reference_means: &[T]) -> Result<LabelVolume> {
    let order = class_alignment(estimate_means, reference_means)?;
    let mut map = vec![0u8; order.len()];
    for (reference, &est) in order.iter().enumerate() {
        map[est] = reference as u8 + 1;
    }
    pred.relabel(&map)
}

fn fields<T>(theta: &ParameterField<T>, which: Which) -> &[Volume3D<T>] {
    match which {
        Which::Pi => &theta.pi,
        Which::Mu => &theta.mu,
        Which::Sigma => &theta.sigma,
    }
}

/// Root mean square difference over all voxels and classes. Classes are
/// compared index by index, so the fields must already be aligned.
pub fn rmse_aligned<T: Real>(estimate: &ParameterField<T>, truth: &ParameterField<T>, which: Which) -> Result<f64> {
    estimate.dims().check_same(&truth.dims())?;
    if estimate.components() != truth.components() {
        return Err(Error::ComponentMismatch(truth.components(), estimate.components()));
    }
    let m = truth.components();
    let n = truth.dims().len();
    let per_class: Vec<f64> = fields(estimate, which)
        .iter()
        .zip(fields(truth, which))
        .map(|(a, b)| {
            a.data()
                .par_iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y).to_f64_lossy().powi(2))
                .collect::<Vec<f64>>()
                .iter()
                .sum()
        })
        .collect();
    Ok((per_class.iter().sum::<f64>() / (n * m) as f64).sqrt())
}

/// RMSE of one parameter after matching estimate classes to the truth.
pub fn rmse_field<T: Real>(estimate: &ParameterField<T>, truth: &ParameterField<T>, which: Which) -> Result<f64> {
    rmse_aligned(&align_to(estimate, truth)?, truth, which)
}

/// `[π, μ, σ]` RMSEs with one alignment.
pub fn rmse_all<T: Real>(estimate: &ParameterField<T>, truth: &ParameterField<T>) -> Result<[f64; 3]> {
    let aligned = align_to(estimate, truth)?;
    Ok([
        rmse_aligned(&aligned, truth, Which::Pi)?,
        rmse_aligned(&aligned, truth, Which::Mu)?,
        rmse_aligned(&aligned, truth, Which::Sigma)?,
    ])
}

/// Fraction of masked voxels whose labels agree. Labels must already share a
/// class numbering (see [`align_labels`]).
pub fn accuracy(pred: &LabelVolume, truth: &LabelVolume, mask: &SampleMask) -> Result<f64> {
    pred.dims().check_same(&truth.dims())?;
    pred.dims().check_same(&mask.dims())?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let hits = mask
        .indices()
        .filter(|&i| pred.labels()[i] == truth.labels()[i])
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean squared error of `predicted` against `observed` over the test voxels.
pub fn spe_report<T: Real>(observed: &Volume3D<T>, predicted: &Volume3D<T>, test: &SampleMask) -> Result<f64> {
    observed.dims().check_same(&predicted.dims())?;
    observed.dims().check_same(&test.dims())?;
    if test.count() == 0 {
        return Err(Error::EmptySample);
    }
    let total: f64 = test
        .indices()
        .map(|i| (observed.data()[i] - predicted.data()[i]).to_f64_lossy().powi(2))
        .sum();
    Ok(total / test.count() as f64)
}

/// SPE of a constant prediction, as made by the global baselines.
pub fn spe_constant<T: Real>(observed: &Volume3D<T>, prediction: T, test: &SampleMask) -> Result<f64> {
    spe_report(observed, &Volume3D::filled(observed.dims(), prediction), test)
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub r: f64,
    #[serde(rename = "Ch")]
    pub ch: Option<f64>,
    pub rmse_pi: Option<f64>,
    pub rmse_mu: Option<f64>,
    pub rmse_sigma: Option<f64>,
    pub spe: f64,
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let values = [
            self.rmse_pi,
            self.rmse_mu,
            self.rmse_sigma,
            Some(self.spe),
            self.accuracy,
            Some(self.seconds),
        ];
        if values.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(invalid(format!("negative or missing metric in {} row", self.method)));
        }
        if self.accuracy.is_some_and(|a| a > 1.0) {
            return Err(invalid("accuracy above 1"));
        }
        Ok(())
    }
}

/// Appends rows to a CSV file, writing the header only when the file is new or
/// empty.
pub fn append_reports(path: impl AsRef<Path>, rows: &[EvalReport]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        row.validate()?;
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, MaskRole};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(dims: Dims, rng: &mut impl Rng) -> ParameterField<f64> {
        let mut vol = |lo: f64, hi: f64| Volume3D::from_fn(dims, |_| rng.gen_range(lo..hi));
        let (a, b) = (vol(0.1, 0.9), vol(0.0, 1.0));
        let pi = vec![a.clone(), a.map(|p| 1.0 - p)];
        let mu = vec![b.map(|x| x * 0.1), b.map(|x| 1.0 + x * 0.1)];
        let sigma = vec![vol(0.01, 0.2), vol(0.01, 0.2)];
        ParameterField::new(pi, mu, sigma).unwrap()
    }

    #[test]
    fn identical_fields_have_zero_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_field(Dims::cube(4).unwrap(), &mut rng);
        assert_eq!(rmse_all(&t, &t).unwrap(), [0.0; 3]);
    }

    #[test]
    fn constant_offset_gives_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_field(Dims::cube(4).unwrap(), &mut rng);
        let mut e = t.clone();
        for f in &mut e.mu {
            *f = f.map(|x| x + 0.125);
        }
        assert!((rmse_field(&e, &t, Which::Mu).unwrap() - 0.125).abs() < 1e-14);
    }

    #[test]
    fn alignment_undoes_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_field(Dims::cube(3).unwrap(), &mut rng);
        let swapped = t.permuted(&[1, 0]).unwrap();
        assert!(rmse_aligned(&swapped, &t, Which::Mu).unwrap() > 0.5);
        assert_eq!(rmse_all(&swapped, &t).unwrap(), [0.0; 3]);
        assert_eq!(
            class_alignment(&[0.3, 1.0, 0.75], &[1.0, 0.3, 0.75]).unwrap(),
            vec![1, 0, 2]
        );
    }

    #[test]
    fn rmse_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_field(Dims::cube(3).unwrap(), &mut rng);
        let b = random_field(Dims::cube(4).unwrap(), &mut rng);
        assert!(rmse_field(&a, &b, Which::Pi).is_err());
        let c = ParameterField::constant(Dims::cube(3).unwrap(), &[1.0], &[0.0], &[1.0]).unwrap();
        assert!(rmse_field(&a, &c, Which::Pi).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let dims = Dims::new(10, 1, 1).unwrap();
        let truth = LabelVolume::new(dims, vec![1, 1, 2, 2, 3, 3, 1, 2, 3, 1], 3).unwrap();
        let pred = LabelVolume::new(dims, vec![1, 2, 2, 2, 3, 1, 1, 2, 2, 1], 3).unwrap();
        let full = SampleMask::full(dims);
        assert_eq!(accuracy(&truth, &truth, &full).unwrap(), 1.0);
        assert_eq!(accuracy(&pred, &truth, &full).unwrap(), 0.7);
        let mask = SampleMask::from_bools(dims, (0..10).map(|i| i < 4).collect(), MaskRole::Test).unwrap();
        assert_eq!(accuracy(&pred, &truth, &mask).unwrap(), 0.75);

        let a = LabelVolume::new(dims, vec![1; 10], 2).unwrap();
        let b = LabelVolume::new(dims, vec![2; 10], 2).unwrap();
        assert_eq!(accuracy(&a, &b, &full).unwrap(), 0.0);
        let empty = SampleMask::from_bools(dims, vec![false; 10], MaskRole::Test).unwrap();
        assert!(accuracy(&a, &b, &empty).is_err());
    }

    #[test]
    fn label_alignment_maps_by_mean_rank() {
        let dims = Dims::new(3, 1, 1).unwrap();
        let pred = LabelVolume::new(dims, vec![1, 2, 3], 3).unwrap();
        let aligned = align_labels(&pred, &[0.3, 0.75, 1.0], &[1.0, 0.3, 0.75]).unwrap();
        assert_eq!(aligned.labels(), &[2, 3, 1]);
    }

    #[test]
    fn spe_examples() {
        let dims = Dims::new(5, 1, 1).unwrap();
        let y = Volume3D::from_vec(dims, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let full = SampleMask::full(dims);
        assert_eq!(spe_report(&y, &y, &full).unwrap(), 0.0);
        let c = Volume3D::filled(dims, 0.7);
        assert_eq!(spe_constant(&c, 0.7, &full).unwrap(), 0.0);
        let yhat = Volume3D::from_vec(dims, vec![1.5, 2.0, 2.0, 4.0, 7.0]).unwrap();
        // (0.25 + 0 + 1 + 0 + 4) / 5
        assert!((spe_report(&y, &yhat, &full).unwrap() - 1.05).abs() < 1e-15);
        let empty = SampleMask::from_bools(dims, vec![false; 5], MaskRole::Test).unwrap();
        assert!(spe_report(&y, &yhat, &empty).is_err());
    }

    #[test]
    fn csv_round_trip_with_blank_bandwidth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.csv");
        let kem = EvalReport {
            method: "KEM-REG".into(),
            r: 1.0,
            ch: Some(0.8),
            rmse_pi: Some(0.02),
            rmse_mu: Some(0.03),
            rmse_sigma: Some(0.01),
            spe: 0.05,
            accuracy: Some(0.97),
            seconds: 1.5,
        };
        let km = EvalReport {
            method: "kmeans".into(),
            ch: None,
            ..kem.clone()
        };
        append_reports(&path, std::slice::from_ref(&kem)).unwrap();
        append_reports(&path, std::slice::from_ref(&km)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,r,Ch,rmse_pi,rmse_mu,rmse_sigma,spe,accuracy,seconds");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("kmeans,1.0,,"));
        assert_eq!(read_reports(&path).unwrap(), vec![kem, km]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rmse_matches_triple_loop_and_is_a_metric(seed in any::<u64>()) {
            let dims = Dims::new(3, 4, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_field(dims, &mut rng);
            let b = random_field(dims, &mut rng);
            let c = random_field(dims, &mut rng);
            for which in [Which::Pi, Which::Mu, Which::Sigma] {
                let mut direct = 0.0;
                for m in 0..2 {
                    for k in 0..dims.dz {
                        for j in 0..dims.dy {
                            for i in 0..dims.dx {
                                direct += (fields(&a, which)[m].get(i, j, k) - fields(&b, which)[m].get(i, j, k)).powi(2);
                            }
                        }
                    }
                }
                let direct = (direct / (2 * dims.len()) as f64).sqrt();
                let ab = rmse_aligned(&a, &b, which).unwrap();
                prop_assert!((ab - direct).abs() <= 1e-14);
                prop_assert!((ab - rmse_aligned(&b, &a, which).unwrap()).abs() <= 1e-15);
                let ac = rmse_aligned(&a, &c, which).unwrap();
                let cb = rmse_aligned(&c, &b, which).unwrap();
                prop_assert!(ab <= ac + cb + 1e-15);
            }
        }

        #[test]
        fn accuracy_invariant_under_joint_relabel(seed in any::<u64>()) {
            let dims = Dims::new(20, 1, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels = || LabelVolume::new(dims, (0..20).map(|_| rng.gen_range(1..=3)).collect(), 3).unwrap();
            let (p, t) = (labels(), labels());
            let map = [3, 1, 2];
            let full = SampleMask::full(dims);
            prop_assert_eq!(
                accuracy(&p, &t, &full).unwrap(),
                accuracy(&p.relabel(&map).unwrap(), &t.relabel(&map).unwrap(), &full).unwrap()
            );
        }
    }
}
