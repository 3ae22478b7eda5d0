//! Anisotropic vector quantization.
//!
//! Lloyd-style alternation: every point goes to the codeword with the lowest
//! anisotropic loss, then each codeword is replaced by the minimizer of its
//! partition's loss. That minimizer solves the `d x d` system
//!
//! ```text
//! (sum h_perp I + sum (h_par - h_perp) x x^T / |x|^2) c = sum h_par x
//! ```
//!
//! which reduces to the partition mean when `h_par == h_perp`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{norm_sq, residual_stats, AnisotropicWeights};
use crate::linalg::solve_spd;
use crate::pq::CodeMatrix;

/// `k` codewords of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    data: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidArgument("codebook needs k >= 1 and d >= 1".into()));
        }
        if data.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("codewords must be finite".into()));
        }
        Ok(Self { k, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.as_ref().len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: r.as_ref().len(),
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), d, data)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn codeword(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    fn codeword_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPartitionPolicy {
    /// Move the codeword onto the datapoint with the highest current loss.
    #[default]
    ReseedHighestLoss,
    KeepPrevious,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// Trainer-chosen diagonal loading; see the trainers for the exact rule.
    #[default]
    Auto,
    Fixed(f64),
}

/// Coordinate-descent sweeps over subspaces per product-quantization
/// assignment step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPolicy {
    Passes(usize),
    UntilFixedPoint { max_passes: usize },
}

impl Default for SweepPolicy {
    fn default() -> Self {
        SweepPolicy::Passes(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub seed: u64,
    pub empty_partition_policy: EmptyPartitionPolicy,
    pub ridge: Ridge,
    pub sweeps: SweepPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-6,
            seed: 0,
            empty_partition_policy: EmptyPartitionPolicy::default(),
            ridge: Ridge::default(),
            sweeps: SweepPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.relative_tolerance >= 0.0) {
            return Err(Error::InvalidArgument("relative_tolerance must be >= 0".into()));
        }
        if let Ridge::Fixed(r) = self.ridge {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::InvalidArgument("ridge must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqAssignment {
    pub assignments: Vec<u32>,
    /// Total loss after the initial assignment and after every iteration.
    pub loss_history: Vec<f64>,
}

/// Codewords are stored at `f32` precision so trained artifacts serialize
/// without loss.
#[inline]
pub(crate) fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

/// Index of the codeword with the smallest anisotropic loss for `x`; ties go
/// to the lowest index.
pub fn assign_point(x: &[f64], codebook: &Codebook, weights: &AnisotropicWeights) -> Result<usize> {
    if x.len() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: x.len(),
        });
    }
    let nsq = norm_sq(x);
    if nsq == 0.0 {
        return Err(Error::ZeroNormDatapoint { index: None });
    }
    Ok(nearest(x, nsq, codebook, weights))
}

#[inline]
pub(crate) fn nearest(x: &[f64], x_norm_sq: f64, codebook: &Codebook, w: &AnisotropicWeights) -> usize {
    let mut best = 0;
    let mut best_key = f64::INFINITY;
    for j in 0..codebook.k() {
        let (sq, rd) = residual_stats(x, codebook.codeword(j));
        let key = w.rank_key(sq, rd, x_norm_sq);
        if key < best_key {
            best_key = key;
            best = j;
        }
    }
    best
}

/// Minimizer of the summed anisotropic loss of `points` over one codeword,
/// with `ridge * I` added to the system.
pub fn update_codeword(
    points: &[&[f64]],
    weights_per_point: &[AnisotropicWeights],
    ridge: f64,
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if points.len() != weights_per_point.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            found: weights_per_point.len(),
        });
    }
    let d = points[0].len();
    let mut members = Vec::with_capacity(points.len());
    for (i, (p, w)) in points.iter().zip(weights_per_point).enumerate() {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.len(),
            });
        }
        let nsq = norm_sq(p);
        if nsq == 0.0 {
            return Err(Error::ZeroNormDatapoint { index: Some(i) });
        }
        members.push((*p, nsq, *w));
    }
    solve_partition(members.into_iter(), d, ridge)
}

pub(crate) fn solve_partition<'a>(
    members: impl Iterator<Item = (&'a [f64], f64, AnisotropicWeights)> + Clone,
    d: usize,
    ridge: f64,
) -> Result<Vec<f64>> {
    if members.clone().all(|(_, _, w)| w.is_isotropic()) {
        let mut acc = vec![0.0; d];
        let mut denom = 0.0;
        for (x, _, w) in members {
            let h = w.h_perpendicular;
            for (a, v) in acc.iter_mut().zip(x) {
                *a += h * v;
            }
            denom += h;
        }
        denom += ridge;
        if !(denom > 0.0) {
            return Err(Error::SingularSystem);
        }
        return Ok(acc.into_iter().map(|a| a / denom).collect());
    }
    let mut matrix = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut diag = ridge;
    for (x, nsq, w) in members {
        diag += w.h_perpendicular;
        let coupling = (w.h_parallel - w.h_perpendicular) / nsq;
        for a in 0..d {
            rhs[a] += w.h_parallel * x[a];
            let s = coupling * x[a];
            let line = &mut matrix[a * d..(a + 1) * d];
            for b in a..d {
                line[b] += s * x[b];
            }
        }
    }
    for a in 0..d {
        matrix[a * d + a] += diag;
        for b in (a + 1)..d {
            matrix[b * d + a] = matrix[a * d + b];
        }
    }
    solve_spd(&matrix, d, &rhs)
}

/// The datapoint indices used as initial codewords: `k` distinct rows drawn
/// uniformly with the given seed.
pub fn initial_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, k).into_vec()
}

pub(crate) fn check_training_inputs(
    dataset: &Dataset,
    k: usize,
    weights: &[AnisotropicWeights],
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 || k > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= n, got k={k}, n={}",
            dataset.len()
        )));
    }
    if weights.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            found: weights.len(),
        });
    }
    Ok(())
}

fn assign_all(dataset: &Dataset, codebook: &Codebook, weights: &[AnisotropicWeights]) -> Vec<u32> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let nsq = dataset.norm_sq(i);
            nearest(dataset.row(i), nsq, codebook, &weights[i]) as u32
        })
        .collect()
}

fn point_losses(
    dataset: &Dataset,
    codebook: &Codebook,
    codes: &[u32],
    weights: &[AnisotropicWeights],
) -> Vec<f64> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.row(i);
            let (sq, rd) = residual_stats(x, codebook.codeword(codes[i] as usize));
            let nsq = dataset.norm_sq(i);
            weights[i].loss_from_stats(sq, rd, nsq)
        })
        .collect()
}

/// Total anisotropic loss of a VQ encoding, summed in point order.
pub fn total_loss(
    dataset: &Dataset,
    codebook: &Codebook,
    codes: &[u32],
    weights: &[AnisotropicWeights],
) -> f64 {
    point_losses(dataset, codebook, codes, weights).iter().sum()
}

/// Indices sorted by descending loss, ties by ascending index.
pub(crate) fn highest_loss_order(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order
}

pub(crate) fn relative_change(previous: f64, current: f64) -> f64 {
    if previous == 0.0 {
        0.0
    } else {
        (previous - current) / previous
    }
}

/// Ridge for one VQ partition under [`Ridge::Auto`]: `1e-10` times the mean
/// `h_perp` when any weight is anisotropic, zero otherwise.
pub(crate) fn auto_partition_ridge(weights: impl Iterator<Item = AnisotropicWeights> + Clone) -> f64 {
    if weights.clone().all(|w| w.is_isotropic()) {
        return 0.0;
    }
    let count = weights.clone().count() as f64;
    let (par, perp) = weights.fold((0.0, 0.0), |(a, b), w| (a + w.h_parallel, b + w.h_perpendicular));
    let scale = if perp > 0.0 { perp } else { par };
    1e-10 * scale / count
}

pub fn train_avq(
    dataset: &Dataset,
    k: usize,
    weights: &[AnisotropicWeights],
    config: &TrainConfig,
) -> Result<(Codebook, VqAssignment)> {
    check_training_inputs(dataset, k, weights, config)?;
    let d = dataset.dim();
    let init = initial_indices(dataset.len(), k, config.seed);
    let mut codebook = Codebook::new(
        k,
        d,
        init.iter()
            .flat_map(|&i| dataset.row(i).iter().map(|&v| to_storage(v)))
            .collect(),
    )?;
    let mut codes = assign_all(dataset, &codebook, weights);
    let mut history = vec![total_loss(dataset, &codebook, &codes, weights)];

    for _ in 0..config.max_iterations {
        update_step(dataset, &mut codebook, &codes, weights, config)?;
        let next = assign_all(dataset, &codebook, weights);
        let loss = total_loss(dataset, &codebook, &next, weights);
        let previous = *history.last().unwrap();
        history.push(loss);
        let changed = next != codes;
        codes = next;
        if !changed || relative_change(previous, loss) < config.relative_tolerance {
            break;
        }
    }
    Ok((
        codebook,
        VqAssignment {
            assignments: codes,
            loss_history: history,
        },
    ))
}

fn update_step(
    dataset: &Dataset,
    codebook: &mut Codebook,
    codes: &[u32],
    weights: &[AnisotropicWeights],
    config: &TrainConfig,
) -> Result<()> {
    let k = codebook.k();
    let d = codebook.dim();
    let mut partitions: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in codes.iter().enumerate() {
        partitions[c as usize].push(i);
    }
    let solved: Vec<Option<Result<Vec<f64>>>> = partitions
        .par_iter()
        .map(|members| {
            if members.is_empty() {
                return None;
            }
            let iter = members.iter().map(|&i| {
                let nsq = dataset.norm_sq(i);
                (dataset.row(i), nsq, weights[i])
            });
            let ridge = match config.ridge {
                Ridge::Fixed(r) => r,
                Ridge::Auto => auto_partition_ridge(members.iter().map(|&i| weights[i])),
            };
            Some(solve_partition(iter, d, ridge))
        })
        .collect();
    let mut empty = Vec::new();
    for (j, result) in solved.into_iter().enumerate() {
        match result {
            None => empty.push(j),
            Some(Ok(c)) => {
                for (dst, v) in codebook.codeword_mut(j).iter_mut().zip(c) {
                    *dst = to_storage(v);
                }
            }
            // Zero-weight partitions contribute nothing to the loss.
            Some(Err(Error::SingularSystem)) => {}
            Some(Err(e)) => return Err(e),
        }
    }
    if !empty.is_empty() && config.empty_partition_policy == EmptyPartitionPolicy::ReseedHighestLoss {
        let losses = point_losses(dataset, codebook, codes, weights);
        for (j, i) in empty.into_iter().zip(highest_loss_order(&losses)) {
            for (dst, &v) in codebook.codeword_mut(j).iter_mut().zip(dataset.row(i)) {
                *dst = to_storage(v);
            }
        }
    }
    Ok(())
}

/// Encodes every datapoint with its loss-minimizing codeword.
pub fn vq_quantize(
    dataset: &Dataset,
    codebook: &Codebook,
    weights: &[AnisotropicWeights],
) -> Result<CodeMatrix> {
    if dataset.dim() != codebook.dim() && !dataset.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: dataset.dim(),
        });
    }
    if weights.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            found: weights.len(),
        });
    }
    CodeMatrix::new(dataset.len(), 1, codebook.k(), assign_all(dataset, codebook, weights))
}

#[cfg(test)]
mod tests;
