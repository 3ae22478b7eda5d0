//! Dense datasets, synthetic generators and per-dimension diagnostics.

pub mod vecs;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `n` rows of dimension `d`, row-major, with cached row norms.
///
/// Rows are checked on construction: non-finite values and zero-norm rows
/// are rejected since neither the residual decomposition nor the loss
/// weights are defined for them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    values: Vec<f64>,
    norms: Vec<f64>,
    normalized: bool,
}

impl Dataset {
    pub fn new(d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 {
            if !values.is_empty() {
                return Err(Error::InvalidDimension(0, "rows must have at least one component"));
            }
            return Ok(Self::empty());
        }
        if !values.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: values.len() % d,
            });
        }
        let n = values.len() / d;
        let mut norms = Vec::with_capacity(n);
        for (i, row) in values.chunks_exact(d).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { index: i });
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormDatapoint { index: Some(i) });
            }
            norms.push(norm);
        }
        Ok(Self {
            n,
            d,
            values,
            norms,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Ok(Self::empty());
        };
        let d = first.as_ref().len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for row in rows {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(d, values)
    }

    pub fn empty() -> Self {
        Self {
            n: 0,
            d: 0,
            values: Vec::new(),
            norms: Vec::new(),
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics; an empty dataset simply yields nothing.
        self.values.chunks_exact(self.d.max(1)).take(self.n)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// `|x_i|^2`, summed exactly as the quantizers' residual statistics are.
    #[inline]
    pub fn norm_sq(&self, i: usize) -> f64 {
        crate::geometry::norm_sq(self.row(i))
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: Range<usize>) -> Dataset {
        let range = range.start.min(self.n)..range.end.min(self.n);
        Dataset {
            n: range.len(),
            d: if range.is_empty() { 0 } else { self.d },
            values: self.values[range.start * self.d..range.end * self.d].to_vec(),
            norms: self.norms[range.clone()].to_vec(),
            normalized: self.normalized,
        }
    }

    /// Scales every row to unit norm.
    pub fn unit_normalize(&self) -> Result<Dataset> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut values = self.values.clone();
        let mut norms = Vec::with_capacity(self.n);
        for (i, row) in values.chunks_exact_mut(self.d.max(1)).take(self.n).enumerate() {
            let norm = self.norms[i];
            if norm == 0.0 {
                return Err(Error::ZeroNormDatapoint { index: Some(i) });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        Ok(Dataset {
            n: self.n,
            d: self.d,
            values,
            norms,
            normalized: true,
        })
    }

    /// Hex SHA-256 of the dataset's fvecs encoding.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::with_capacity(self.values.len() * 4 + self.n * 4);
        vecs::write_fvecs_to(&mut buf, self).expect("writing to a Vec cannot fail");
        hasher.update(&buf);
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Uniform directions on the unit sphere.
    UniformSphere,
    /// Isotropic Gaussian clusters around standard-normal centers.
    GaussianMixture {
        centers: usize,
        spread: f64,
        normalize: bool,
    },
}

pub fn generate_synthetic(kind: &SyntheticKind, n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if d < 2 {
        return Err(Error::InvalidDimension(d, "synthetic data needs d >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * d);
    match kind {
        SyntheticKind::UniformSphere => {
            let mut row = vec![0.0; d];
            for _ in 0..n {
                // Resample the vanishingly unlikely all-zero draw.
                loop {
                    row.iter_mut().for_each(|v| *v = gauss(&mut rng));
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        values.extend(row.iter().map(|v| v / norm));
                        break;
                    }
                }
            }
            let mut ds = Dataset::new(d, values)?;
            ds.normalized = true;
            Ok(ds)
        }
        SyntheticKind::GaussianMixture {
            centers,
            spread,
            normalize,
        } => {
            if *centers == 0 || !(*spread >= 0.0) {
                return Err(Error::InvalidArgument(
                    "gaussian mixture needs at least one center and spread >= 0".into(),
                ));
            }
            let means: Vec<f64> = (0..centers * d).map(|_| gauss(&mut rng)).collect();
            for _ in 0..n {
                let c = rng.random_range(0..*centers) * d;
                for t in 0..d {
                    values.push(means[c + t] + spread * gauss(&mut rng));
                }
            }
            let ds = Dataset::new(d, values)?;
            if *normalize {
                ds.unit_normalize()
            } else {
                Ok(ds)
            }
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub per_dimension_variance: Vec<f64>,
    pub max_abs_offdiagonal_correlation: f64,
    /// Largest over smallest per-dimension variance.
    pub variance_ratio: f64,
}

/// Sample variance per dimension and the largest off-diagonal Pearson
/// correlation magnitude. Dimensions with zero variance have no defined
/// correlation and are skipped.
pub fn diagnose(dataset: &Dataset) -> Result<DiagnosticsReport> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "diagnostics need at least 2 rows, got {n}"
        )));
    }
    let d = dataset.dim();
    let mut mean = vec![0.0; d];
    for row in dataset.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in dataset.rows() {
        for t in 0..d {
            centered[t] = row[t] - mean[t];
        }
        for a in 0..d {
            let ca = centered[a];
            let line = &mut cov[a * d..(a + 1) * d];
            for b in a..d {
                line[b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    let variance: Vec<f64> = (0..d).map(|a| cov[a * d + a] / denom).collect();
    let mut max_corr: f64 = 0.0;
    for a in 0..d {
        for b in (a + 1)..d {
            let scale = (cov[a * d + a] * cov[b * d + b]).sqrt();
            if scale > 0.0 {
                max_corr = max_corr.max((cov[a * d + b] / scale).abs());
            }
        }
    }
    let max_var = variance.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_var = variance.iter().cloned().fold(f64::INFINITY, f64::min);
    let variance_ratio = if min_var > 0.0 {
        max_var / min_var
    } else {
        f64::INFINITY
    };
    Ok(DiagnosticsReport {
        per_dimension_variance: variance,
        max_abs_offdiagonal_correlation: max_corr,
        variance_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_zero_and_non_finite_rows() {
        assert!(matches!(
            Dataset::new(2, vec![1.0, 0.0, 0.0, 0.0]),
            Err(Error::ZeroNormDatapoint { index: Some(1) })
        ));
        assert!(matches!(
            Dataset::new(2, vec![f64::NAN, 1.0]),
            Err(Error::NonFiniteValue { index: 0 })
        ));
        assert!(Dataset::new(3, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn caches_norms() {
        let ds = Dataset::from_rows(&[[3.0, 4.0], [1.0, 0.0]]).unwrap();
        assert_eq!(ds.norms(), &[5.0, 1.0]);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
    }

    #[test]
    fn normalizes_rows() {
        let ds = Dataset::from_rows(&[[3.0, 4.0]]).unwrap().unit_normalize().unwrap();
        assert!((ds.row(0)[0] - 0.6).abs() < 1e-15 && (ds.row(0)[1] - 0.8).abs() < 1e-15);
        assert!(ds.is_normalized());
        let again = ds.unit_normalize().unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn normalized_random_rows_have_unit_norm() {
        let kind = SyntheticKind::GaussianMixture {
            centers: 4,
            spread: 0.5,
            normalize: false,
        };
        let ds = generate_synthetic(&kind, 500, 10, 3).unwrap().unit_normalize().unwrap();
        for row in ds.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(ds.norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
    }

    #[test]
    fn normalization_preserves_direction_ranking() {
        let ds = generate_synthetic(
            &SyntheticKind::GaussianMixture {
                centers: 3,
                spread: 1.0,
                normalize: false,
            },
            50,
            6,
            8,
        )
        .unwrap();
        let unit = ds.unit_normalize().unwrap();
        let q = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4];
        for i in 0..ds.len() {
            let a: f64 = ds.row(i).iter().zip(&q).map(|(x, y)| x * y).sum();
            let b: f64 = unit.row(i).iter().zip(&q).map(|(x, y)| x * y).sum();
            assert!((a / ds.norm(i) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_sphere_is_unit_and_deterministic() {
        let a = generate_synthetic(&SyntheticKind::UniformSphere, 200, 16, 42).unwrap();
        let b = generate_synthetic(&SyntheticKind::UniformSphere, 200, 16, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.norms().iter().all(|n| (n - 1.0).abs() < 1e-6));
        let c = generate_synthetic(&SyntheticKind::UniformSphere, 200, 16, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_sphere_statistics() {
        let ds = generate_synthetic(&SyntheticKind::UniformSphere, 50_000, 32, 2024).unwrap();
        let report = diagnose(&ds).unwrap();
        assert!(report.variance_ratio < 1.2, "{}", report.variance_ratio);
        assert!(report.max_abs_offdiagonal_correlation < 0.05);
    }

    #[test]
    fn diagnose_gaussian_and_duplicated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..20_000)
            .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let report = diagnose(&Dataset::from_rows(&rows).unwrap()).unwrap();
        assert!(report.variance_ratio < 1.1);
        assert!(report.max_abs_offdiagonal_correlation < 0.05);

        let dup: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0], r[0], r[1]]).collect();
        let report = diagnose(&Dataset::from_rows(&dup).unwrap()).unwrap();
        assert!((report.max_abs_offdiagonal_correlation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagnose_recovers_constructed_scales() {
        // Dimension t has standard deviation 2^-t, so the variance ratio is 4^(d-1).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let rows: Vec<Vec<f64>> = (0..50_000)
            .map(|_| {
                (0..d)
                    .map(|t| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        g * 0.5f64.powi(t)
                    })
                    .collect()
            })
            .collect();
        let report = diagnose(&Dataset::from_rows(&rows).unwrap()).unwrap();
        let expected = 4f64.powi(d - 1);
        assert!((report.variance_ratio / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn diagnose_needs_two_rows() {
        let ds = Dataset::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(diagnose(&ds), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn slice_rows() {
        let ds = Dataset::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]]).unwrap();
        let s = ds.slice(1..3);
        assert_eq!(s.len(), 2);
        assert_eq!(s.row(0), &[0.0, 2.0]);
        assert_eq!(s.norm(0), 2.0);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..20)) {
            prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
            let ds = Dataset::from_rows(&rows).unwrap();
            let once = ds.unit_normalize().unwrap();
            let twice = Dataset::new(3, once.values().to_vec()).unwrap().unit_normalize().unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }
    }
}
