//! Anisotropic product quantization.
//!
//! Vectors are split into `M` contiguous subspaces of `d / M` dimensions, each
//! with its own dictionary of `k` sub-codewords. Unlike reconstruction-loss PQ
//! the anisotropic loss does not separate over subspaces, so assignment is a
//! coordinate descent over subspaces and the dictionary update is one joint
//! quadratic solve over all `M * k` sub-codewords.

use rayon::prelude::*;

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{norm_sq, residual_stats, AnisotropicWeights};
use crate::linalg::solve_spd;
use crate::vq::{
    auto_partition_ridge, check_training_inputs, highest_loss_order, initial_indices,
    relative_change, solve_partition, to_storage, Codebook, EmptyPartitionPolicy, Ridge,
    SweepPolicy, TrainConfig,
};

/// Largest stacked dictionary (`d * k`) the dense joint solve accepts.
pub const MAX_SYSTEM_DIM: usize = 16_384;

/// Points accumulated per partial system before merging.
const ASSEMBLY_CHUNK: usize = 2048;

/// `M` dictionaries of `k` sub-codewords each, stored as one stacked vector
/// ordered by subspace, then codeword, then component.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductCodebook {
    m: usize,
    k: usize,
    sub_dim: usize,
    data: Vec<f64>,
}

impl ProductCodebook {
    pub fn new(m: usize, k: usize, sub_dim: usize, data: Vec<f64>) -> Result<Self> {
        if m == 0 || k == 0 || sub_dim == 0 {
            return Err(Error::InvalidArgument(
                "product codebook needs M, k and d/M >= 1".into(),
            ));
        }
        if data.len() != m * k * sub_dim {
            return Err(Error::DimensionMismatch {
                expected: m * k * sub_dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("codewords must be finite".into()));
        }
        Ok(Self {
            m,
            k,
            sub_dim,
            data,
        })
    }

    /// Builds from per-subspace dictionaries, `dictionaries[m][j]` being a
    /// sub-codeword.
    pub fn from_dictionaries(dictionaries: &[Vec<Vec<f64>>]) -> Result<Self> {
        let m = dictionaries.len();
        let k = dictionaries.first().map_or(0, Vec::len);
        let sub_dim = dictionaries
            .first()
            .and_then(|d| d.first())
            .map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * k * sub_dim);
        for dict in dictionaries {
            if dict.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: dict.len(),
                });
            }
            for word in dict {
                if word.len() != sub_dim {
                    return Err(Error::DimensionMismatch {
                        expected: sub_dim,
                        found: word.len(),
                    });
                }
                data.extend_from_slice(word);
            }
        }
        Self::new(m, k, sub_dim, data)
    }

    pub fn from_codebook(codebook: &Codebook) -> Self {
        Self {
            m: 1,
            k: codebook.k(),
            sub_dim: codebook.dim(),
            data: codebook.as_slice().to_vec(),
        }
    }

    pub fn num_subspaces(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn dim(&self) -> usize {
        self.m * self.sub_dim
    }

    #[inline]
    pub fn sub_codeword(&self, m: usize, j: usize) -> &[f64] {
        let start = (m * self.k + j) * self.sub_dim;
        &self.data[start..start + self.sub_dim]
    }

    fn sub_codeword_mut(&mut self, m: usize, j: usize) -> &mut [f64] {
        let start = (m * self.k + j) * self.sub_dim;
        &mut self.data[start..start + self.sub_dim]
    }

    /// The stacked dictionary vector.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn check_codes(&self, codes: &[u32]) -> Result<()> {
        if codes.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                found: codes.len(),
            });
        }
        match codes.iter().find(|&&c| c as usize >= self.k) {
            Some(&code) => Err(Error::CodeOutOfRange { code, k: self.k }),
            None => Ok(()),
        }
    }
}

/// One code per subspace per datapoint, row-major `n x M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    n: usize,
    m: usize,
    k: usize,
    codes: Vec<u32>,
}

impl CodeMatrix {
    pub fn new(n: usize, m: usize, k: usize, codes: Vec<u32>) -> Result<Self> {
        if codes.len() != n * m {
            return Err(Error::DimensionMismatch {
                expected: n * m,
                found: codes.len(),
            });
        }
        if let Some(&code) = codes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::CodeOutOfRange { code, k });
        }
        Ok(Self { n, m, k, codes })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_subspaces(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.codes[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.codes
    }
}

/// The normal equations of the joint dictionary update, `A c = b` with `A`
/// of size `dk x dk` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSystem {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl SelectorSystem {
    /// Solves with `ridge` added to every diagonal entry.
    pub fn solve(&self, ridge: f64) -> Result<Vec<f64>> {
        self.solve_with_diagonal(|_| ridge)
    }

    fn solve_with_diagonal(&self, extra: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
        if self.dim > MAX_SYSTEM_DIM {
            return Err(Error::SystemTooLarge {
                size: self.dim,
                max: MAX_SYSTEM_DIM,
            });
        }
        let mut matrix = self.matrix.clone();
        for a in 0..self.dim {
            matrix[a * self.dim + a] += extra(a);
        }
        solve_spd(&matrix, self.dim, &self.rhs)
    }

    /// `c^T A c - 2 b^T c`, the loss up to a constant.
    pub fn objective(&self, c: &[f64]) -> f64 {
        let mut quad = 0.0;
        for a in 0..self.dim {
            let row = &self.matrix[a * self.dim..(a + 1) * self.dim];
            quad += c[a] * row.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        }
        quad - 2.0 * self.rhs.iter().zip(c).map(|(x, y)| x * y).sum::<f64>()
    }

    /// `|A c - b| / |b|`.
    pub fn relative_residual(&self, c: &[f64]) -> f64 {
        let mut res = 0.0;
        for a in 0..self.dim {
            let row = &self.matrix[a * self.dim..(a + 1) * self.dim];
            let r = row.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() - self.rhs[a];
            res += r * r;
        }
        res.sqrt() / norm_sq(&self.rhs).sqrt().max(f64::MIN_POSITIVE)
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|a| self.matrix[a * self.dim + a]).sum()
    }
}

pub fn reconstruct(codes_row: &[u32], codebook: &ProductCodebook) -> Result<Vec<f64>> {
    codebook.check_codes(codes_row)?;
    let mut out = Vec::with_capacity(codebook.dim());
    for (m, &c) in codes_row.iter().enumerate() {
        out.extend_from_slice(codebook.sub_codeword(m, c as usize));
    }
    Ok(out)
}

#[inline]
fn subvector(x: &[f64], m: usize, sub_dim: usize) -> &[f64] {
    &x[m * sub_dim..(m + 1) * sub_dim]
}

/// Per-subspace residual summaries `(|x_m - c_m|^2, <x_m - c_m, x_m>)`.
fn subspace_stats(x: &[f64], codes: &[u32], cb: &ProductCodebook) -> Vec<(f64, f64)> {
    codes
        .iter()
        .enumerate()
        .map(|(m, &c)| residual_stats(subvector(x, m, cb.sub_dim), cb.sub_codeword(m, c as usize)))
        .collect()
}

#[inline]
fn summed(stats: &[(f64, f64)]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut dot = 0.0;
    for &(s, d) in stats {
        sq += s;
        dot += d;
    }
    (sq, dot)
}

fn point_loss(x_norm_sq: f64, stats: &[(f64, f64)], w: &AnisotropicWeights) -> f64 {
    let (sq, dot) = summed(stats);
    w.loss_from_stats(sq, dot, x_norm_sq)
}

fn nearest_codes(x: &[f64], cb: &ProductCodebook) -> Vec<u32> {
    (0..cb.m)
        .map(|m| {
            let xm = subvector(x, m, cb.sub_dim);
            let mut best = 0;
            let mut best_sq = f64::INFINITY;
            for j in 0..cb.k {
                let (sq, _) = residual_stats(xm, cb.sub_codeword(m, j));
                if sq < best_sq {
                    best_sq = sq;
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// One coordinate-descent pass over `order`. Returns whether any code changed.
fn coordinate_pass(
    x: &[f64],
    x_norm_sq: f64,
    codes: &mut [u32],
    stats: &mut [(f64, f64)],
    cb: &ProductCodebook,
    w: &AnisotropicWeights,
    order: &[usize],
) -> bool {
    let mut changed = false;
    for &m in order {
        let xm = subvector(x, m, cb.sub_dim);
        let mut best = 0;
        let mut best_key = f64::INFINITY;
        let mut best_stats = (0.0, 0.0);
        for j in 0..cb.k {
            let cand = residual_stats(xm, cb.sub_codeword(m, j));
            let key = if w.is_isotropic() {
                cand.0
            } else {
                let mut sq = 0.0;
                let mut dot = 0.0;
                for (mm, s) in stats.iter().enumerate() {
                    let s = if mm == m { cand } else { *s };
                    sq += s.0;
                    dot += s.1;
                }
                w.loss_from_stats(sq, dot, x_norm_sq)
            };
            if key < best_key {
                best_key = key;
                best = j;
                best_stats = cand;
            }
        }
        if codes[m] != best as u32 {
            codes[m] = best as u32;
            changed = true;
        }
        stats[m] = best_stats;
    }
    changed
}

/// One coordinate-descent pass: for each subspace in `sweep_order`, picks the
/// sub-codeword minimizing the full anisotropic loss with the other
/// subspaces held fixed.
pub fn pq_assign_point(
    x: &[f64],
    current_codes: &[u32],
    codebook: &ProductCodebook,
    weights: &AnisotropicWeights,
    sweep_order: &[usize],
) -> Result<Vec<u32>> {
    if x.len() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: x.len(),
        });
    }
    codebook.check_codes(current_codes)?;
    if let Some(&m) = sweep_order.iter().find(|&&m| m >= codebook.m) {
        return Err(Error::InvalidArgument(format!(
            "subspace {m} out of range for M={}",
            codebook.m
        )));
    }
    let nsq = norm_sq(x);
    if nsq == 0.0 {
        return Err(Error::ZeroNormDatapoint { index: None });
    }
    let mut codes = current_codes.to_vec();
    let mut stats = subspace_stats(x, &codes, codebook);
    coordinate_pass(x, nsq, &mut codes, &mut stats, codebook, weights, sweep_order);
    Ok(codes)
}

/// Runs up to `max_passes` full sweeps, stopping early at a fixed point.
fn descend(
    x: &[f64],
    x_norm_sq: f64,
    codes: &mut [u32],
    cb: &ProductCodebook,
    w: &AnisotropicWeights,
    max_passes: usize,
) {
    let order: Vec<usize> = (0..cb.m).collect();
    let mut stats = subspace_stats(x, codes, cb);
    for _ in 0..max_passes {
        if !coordinate_pass(x, x_norm_sq, codes, &mut stats, cb, w, &order) {
            break;
        }
    }
}

fn max_passes(sweeps: SweepPolicy) -> usize {
    match sweeps {
        SweepPolicy::Passes(p) => p,
        SweepPolicy::UntilFixedPoint { max_passes } => max_passes,
    }
}

fn check_dataset_shape(dataset: &Dataset, cb: &ProductCodebook) -> Result<()> {
    if !dataset.is_empty() && dataset.dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            found: dataset.dim(),
        });
    }
    Ok(())
}

/// Encodes every point: reconstruction-nearest codes per subspace, followed
/// by up to `passes` coordinate-descent sweeps under `weights`.
pub fn pq_quantize(
    dataset: &Dataset,
    codebook: &ProductCodebook,
    weights: &[AnisotropicWeights],
    passes: usize,
) -> Result<CodeMatrix> {
    check_dataset_shape(dataset, codebook)?;
    if weights.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            found: weights.len(),
        });
    }
    let codes = encode_all(dataset, codebook, weights, None, passes);
    CodeMatrix::new(dataset.len(), codebook.m, codebook.k, codes)
}

fn encode_all(
    dataset: &Dataset,
    cb: &ProductCodebook,
    weights: &[AnisotropicWeights],
    start: Option<&CodeMatrix>,
    passes: usize,
) -> Vec<u32> {
    let rows: Vec<Vec<u32>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.row(i);
            let mut codes = match start {
                Some(s) => s.row(i).to_vec(),
                None => nearest_codes(x, cb),
            };
            let nsq = dataset.norm_sq(i);
            descend(x, nsq, &mut codes, cb, &weights[i], passes);
            codes
        })
        .collect();
    rows.concat()
}

fn point_losses(
    dataset: &Dataset,
    cb: &ProductCodebook,
    codes: &CodeMatrix,
    weights: &[AnisotropicWeights],
) -> Vec<f64> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.row(i);
            let nsq = dataset.norm_sq(i);
            point_loss(nsq, &subspace_stats(x, codes.row(i), cb), &weights[i])
        })
        .collect()
}

/// Total anisotropic loss of a PQ encoding, summed in point order.
pub fn pq_total_loss(
    dataset: &Dataset,
    codebook: &ProductCodebook,
    codes: &CodeMatrix,
    weights: &[AnisotropicWeights],
) -> f64 {
    point_losses(dataset, codebook, codes, weights).iter().sum()
}

fn check_update_inputs(
    dataset: &Dataset,
    codes: &CodeMatrix,
    weights: &[AnisotropicWeights],
    m: usize,
    k: usize,
) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if m == 0 || !dataset.dim().is_multiple_of(m) {
        return Err(Error::DimensionNotDivisible {
            dim: dataset.dim(),
            subspaces: m,
        });
    }
    if codes.len() != dataset.len() || codes.m != m || codes.k != k {
        return Err(Error::InvalidArgument(format!(
            "code matrix shape ({}, {}, {}) does not match n={}, M={m}, k={k}",
            codes.len(),
            codes.m,
            codes.k,
            dataset.len()
        )));
    }
    if weights.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            found: weights.len(),
        });
    }
    Ok(dataset.dim() / m)
}

/// Assembles `sum_i B_i^T ((h_par - h_perp) x x^T / |x|^2 + h_perp I) B_i`
/// and `sum_i h_par B_i^T x_i`, where `B_i` selects point `i`'s sub-codewords
/// out of the stacked dictionary.
pub fn assemble_selector_system(
    dataset: &Dataset,
    codes: &CodeMatrix,
    weights: &[AnisotropicWeights],
    m: usize,
    k: usize,
) -> Result<SelectorSystem> {
    let sub_dim = check_update_inputs(dataset, codes, weights, m, k)?;
    let dim = dataset.dim() * k;
    if dim > MAX_SYSTEM_DIM {
        return Err(Error::SystemTooLarge {
            size: dim,
            max: MAX_SYSTEM_DIM,
        });
    }
    let n = dataset.len();
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(ASSEMBLY_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut matrix = vec![0.0; dim * dim];
            let mut rhs = vec![0.0; dim];
            let end = ((c + 1) * ASSEMBLY_CHUNK).min(n);
            for i in c * ASSEMBLY_CHUNK..end {
                accumulate_point(
                    &mut matrix,
                    &mut rhs,
                    dim,
                    dataset.row(i),
                    dataset.norm_sq(i),
                    codes.row(i),
                    &weights[i],
                    k,
                    sub_dim,
                );
            }
            (matrix, rhs)
        })
        .collect();
    let mut iter = chunks.into_iter();
    let (mut matrix, mut rhs) = iter.next().unwrap_or_else(|| (vec![0.0; dim * dim], vec![0.0; dim]));
    for (pm, pr) in iter {
        matrix.iter_mut().zip(pm).for_each(|(a, b)| *a += b);
        rhs.iter_mut().zip(pr).for_each(|(a, b)| *a += b);
    }
    // Mirrored entries are accumulated with operands in the opposite order;
    // copy the upper triangle so the matrix is exactly symmetric.
    for a in 0..dim {
        for b in (a + 1)..dim {
            matrix[b * dim + a] = matrix[a * dim + b];
        }
    }
    Ok(SelectorSystem { dim, matrix, rhs })
}

#[allow(clippy::too_many_arguments)]
fn accumulate_point(
    matrix: &mut [f64],
    rhs: &mut [f64],
    dim: usize,
    x: &[f64],
    x_norm_sq: f64,
    codes: &[u32],
    w: &AnisotropicWeights,
    k: usize,
    sub_dim: usize,
) {
    let coupling = (w.h_parallel - w.h_perpendicular) / x_norm_sq;
    let offset = |m: usize| (m * k + codes[m] as usize) * sub_dim;
    let m_count = codes.len();
    for a in 0..m_count {
        let ra = offset(a);
        let xa = subvector(x, a, sub_dim);
        for s in 0..sub_dim {
            rhs[ra + s] += w.h_parallel * xa[s];
            matrix[(ra + s) * dim + ra + s] += w.h_perpendicular;
        }
        if coupling == 0.0 {
            continue;
        }
        for b in 0..m_count {
            let rb = offset(b);
            let xb = subvector(x, b, sub_dim);
            for s in 0..sub_dim {
                let v = coupling * xa[s];
                let line = &mut matrix[(ra + s) * dim + rb..(ra + s) * dim + rb + sub_dim];
                for (dst, &xt) in line.iter_mut().zip(xb) {
                    *dst += v * xt;
                }
            }
        }
    }
}

/// Minimizes the total anisotropic loss over all dictionaries with the codes
/// fixed. `ridge` is added to every diagonal entry of the joint system.
pub fn pq_codebook_update(
    dataset: &Dataset,
    codes: &CodeMatrix,
    weights: &[AnisotropicWeights],
    m: usize,
    k: usize,
    ridge: f64,
) -> Result<ProductCodebook> {
    let sub_dim = check_update_inputs(dataset, codes, weights, m, k)?;
    let members = block_members(codes, m, k);
    let mut data = vec![0.0; m * k * sub_dim];
    if m == 1 || weights.iter().all(|w| w.is_isotropic()) {
        // Block-diagonal: each (subspace, codeword) block solves independently.
        for sub in 0..m {
            for j in 0..k {
                let ids = &members[sub * k + j];
                let solved = if m == 1 {
                    let iter = ids.iter().map(|&i| {
                        let nsq = dataset.norm_sq(i);
                        (dataset.row(i), nsq, weights[i])
                    });
                    solve_partition(iter, sub_dim, ridge)?
                } else {
                    isotropic_block(dataset, ids, weights, sub, sub_dim, ridge)?
                };
                data[(sub * k + j) * sub_dim..(sub * k + j + 1) * sub_dim].copy_from_slice(&solved);
            }
        }
    } else {
        let system = assemble_selector_system(dataset, codes, weights, m, k)?;
        data = system.solve(ridge)?;
    }
    ProductCodebook::new(m, k, sub_dim, data)
}

fn block_members(codes: &CodeMatrix, m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); m * k];
    for i in 0..codes.len() {
        for (sub, &c) in codes.row(i).iter().enumerate() {
            members[sub * k + c as usize].push(i);
        }
    }
    members
}

fn isotropic_block(
    dataset: &Dataset,
    ids: &[usize],
    weights: &[AnisotropicWeights],
    sub: usize,
    sub_dim: usize,
    ridge: f64,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; sub_dim];
    let mut denom = 0.0;
    for &i in ids {
        let h = weights[i].h_perpendicular;
        for (a, v) in acc.iter_mut().zip(subvector(dataset.row(i), sub, sub_dim)) {
            *a += h * v;
        }
        denom += h;
    }
    denom += ridge;
    if !(denom > 0.0) {
        return Err(Error::SingularSystem);
    }
    Ok(acc.into_iter().map(|a| a / denom).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PqAssignment {
    pub codes: CodeMatrix,
    /// Total loss after the initial assignment and after every iteration.
    pub loss_history: Vec<f64>,
}

fn check_pq_training_inputs(
    dataset: &Dataset,
    m: usize,
    k: usize,
    weights: &[AnisotropicWeights],
    config: &TrainConfig,
) -> Result<usize> {
    if !dataset.is_empty() && (m == 0 || !dataset.dim().is_multiple_of(m)) {
        return Err(Error::DimensionNotDivisible {
            dim: dataset.dim(),
            subspaces: m,
        });
    }
    check_training_inputs(dataset, k, weights, config)?;
    if max_passes(config.sweeps) == 0 {
        return Err(Error::InvalidArgument(
            "training needs at least one coordinate-descent pass".into(),
        ));
    }
    Ok(dataset.dim() / m)
}

fn sampled_dictionaries(dataset: &Dataset, m: usize, k: usize, seed: u64) -> Result<ProductCodebook> {
    let sub_dim = dataset.dim() / m;
    let init = initial_indices(dataset.len(), k, seed);
    let mut data = Vec::with_capacity(m * k * sub_dim);
    for sub in 0..m {
        for &i in &init {
            data.extend(subvector(dataset.row(i), sub, sub_dim).iter().map(|&v| to_storage(v)));
        }
    }
    ProductCodebook::new(m, k, sub_dim, data)
}

/// Trains `M` dictionaries under the anisotropic loss. With `warm_start` the
/// dictionaries start from [`train_l2_pq`]; otherwise from `k` sampled
/// datapoints split into subspaces.
pub fn train_apq(
    dataset: &Dataset,
    m: usize,
    k: usize,
    weights: &[AnisotropicWeights],
    config: &TrainConfig,
    warm_start: bool,
) -> Result<(ProductCodebook, PqAssignment)> {
    check_pq_training_inputs(dataset, m, k, weights, config)?;
    let mut codebook = if warm_start {
        train_l2_pq(dataset, m, k, config)?.0
    } else {
        sampled_dictionaries(dataset, m, k, config.seed)?
    };
    let passes = max_passes(config.sweeps);
    let flat = encode_all(dataset, &codebook, weights, None, passes);
    let mut codes = CodeMatrix::new(dataset.len(), m, k, flat)?;
    let mut history = vec![pq_total_loss(dataset, &codebook, &codes, weights)];
    for _ in 0..config.max_iterations {
        pq_update_step(dataset, &mut codebook, &codes, weights, config)?;
        let flat = encode_all(dataset, &codebook, weights, Some(&codes), passes);
        let next = CodeMatrix::new(dataset.len(), m, k, flat)?;
        let loss = pq_total_loss(dataset, &codebook, &next, weights);
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
        PqAssignment {
            codes,
            loss_history: history,
        },
    ))
}

/// Dictionary update used by [`train_apq`].
///
/// With `M = 1` or isotropic weights the joint system is block-diagonal and
/// every block is solved on its own. Otherwise the full system is solved;
/// under [`Ridge::Auto`] only the diagonal of never-assigned codewords is
/// loaded (by `1e-6 * trace / dk`), falling back to loading every diagonal
/// entry if the system is still not positive definite. Never-assigned
/// codewords are then re-seeded from the highest-loss datapoints.
fn pq_update_step(
    dataset: &Dataset,
    cb: &mut ProductCodebook,
    codes: &CodeMatrix,
    weights: &[AnisotropicWeights],
    config: &TrainConfig,
) -> Result<()> {
    let (m, k, sub_dim) = (cb.m, cb.k, cb.sub_dim);
    let members = block_members(codes, m, k);
    let used: Vec<bool> = members.iter().map(|ids| !ids.is_empty()).collect();
    let isotropic = weights.iter().all(|w| w.is_isotropic());

    if m == 1 || isotropic {
        let solved: Vec<Option<Result<Vec<f64>>>> = members
            .par_iter()
            .enumerate()
            .map(|(block, ids)| {
                if ids.is_empty() {
                    return None;
                }
                let sub = block / k;
                Some(if m == 1 {
                    let ridge = match config.ridge {
                        Ridge::Fixed(r) => r,
                        Ridge::Auto => auto_partition_ridge(ids.iter().map(|&i| weights[i])),
                    };
                    let iter = ids.iter().map(|&i| {
                        let nsq = dataset.norm_sq(i);
                        (dataset.row(i), nsq, weights[i])
                    });
                    solve_partition(iter, sub_dim, ridge)
                } else {
                    let ridge = match config.ridge {
                        Ridge::Fixed(r) => r,
                        Ridge::Auto => 0.0,
                    };
                    isotropic_block(dataset, ids, weights, sub, sub_dim, ridge)
                })
            })
            .collect();
        for (block, result) in solved.into_iter().enumerate() {
            match result {
                None | Some(Err(Error::SingularSystem)) => {}
                Some(Ok(c)) => {
                    for (dst, v) in cb.sub_codeword_mut(block / k, block % k).iter_mut().zip(c) {
                        *dst = to_storage(v);
                    }
                }
                Some(Err(e)) => return Err(e),
            }
        }
    } else {
        let system = assemble_selector_system(dataset, codes, weights, m, k)?;
        let solution = match config.ridge {
            Ridge::Fixed(r) => system.solve(r)?,
            Ridge::Auto => {
                let load = 1e-6 * system.trace() / system.dim as f64;
                let unused_only = system.solve_with_diagonal(|a| {
                    if used[a / sub_dim] {
                        0.0
                    } else {
                        load
                    }
                });
                match unused_only {
                    Ok(c) => c,
                    Err(Error::SingularSystem) => system.solve(load)?,
                    Err(e) => return Err(e),
                }
            }
        };
        for (block, &is_used) in used.iter().enumerate() {
            if is_used {
                let dst = cb.sub_codeword_mut(block / k, block % k);
                let src = &solution[block * sub_dim..(block + 1) * sub_dim];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = to_storage(v);
                }
            }
        }
    }

    if config.empty_partition_policy == EmptyPartitionPolicy::ReseedHighestLoss
        && used.iter().any(|u| !u)
    {
        reseed_unused(dataset, cb, codes, weights, &used, isotropic && m > 1);
    }
    Ok(())
}

/// Moves never-assigned sub-codewords onto subvectors of the highest-loss
/// points. With isotropic weights the loss separates, so points are ranked by
/// their loss within the subspace being re-seeded.
fn reseed_unused(
    dataset: &Dataset,
    cb: &mut ProductCodebook,
    codes: &CodeMatrix,
    weights: &[AnisotropicWeights],
    used: &[bool],
    per_subspace: bool,
) {
    let (m, k, sub_dim) = (cb.m, cb.k, cb.sub_dim);
    let total_order = if per_subspace {
        Vec::new()
    } else {
        highest_loss_order(&point_losses(dataset, cb, codes, weights))
    };
    for sub in 0..m {
        let empty: Vec<usize> = (0..k).filter(|&j| !used[sub * k + j]).collect();
        if empty.is_empty() {
            continue;
        }
        let order = if per_subspace {
            let losses: Vec<f64> = (0..dataset.len())
                .map(|i| {
                    let xs = subvector(dataset.row(i), sub, sub_dim);
                    let c = codes.row(i)[sub] as usize;
                    let (sq, _) = residual_stats(xs, cb.sub_codeword(sub, c));
                    weights[i].h_perpendicular * sq
                })
                .collect();
            highest_loss_order(&losses)
        } else {
            total_order.clone()
        };
        for (j, i) in empty.into_iter().zip(order) {
            let src: Vec<f64> = subvector(dataset.row(i), sub, sub_dim)
                .iter()
                .map(|&v| to_storage(v))
                .collect();
            cb.sub_codeword_mut(sub, j).copy_from_slice(&src);
        }
    }
}

/// Classical product quantization: independent k-means in every subspace,
/// run with the same schedule as the anisotropic trainers.
pub fn train_l2_pq(
    dataset: &Dataset,
    m: usize,
    k: usize,
    config: &TrainConfig,
) -> Result<(ProductCodebook, CodeMatrix)> {
    let unit = vec![AnisotropicWeights::ISOTROPIC; dataset.len()];
    let sub_dim = check_pq_training_inputs(dataset, m, k, &unit, config)?;
    let n = dataset.len();
    let init = initial_indices(n, k, config.seed);
    let per_subspace: Vec<(Vec<f64>, Vec<u32>)> = (0..m)
        .into_par_iter()
        .map(|sub| {
            let rows: Vec<&[f64]> = (0..n).map(|i| subvector(dataset.row(i), sub, sub_dim)).collect();
            lloyd(&rows, sub_dim, k, &init, config)
        })
        .collect();
    let mut data = Vec::with_capacity(m * k * sub_dim);
    let mut codes = vec![0u32; n * m];
    for (sub, (centroids, assignment)) in per_subspace.into_iter().enumerate() {
        data.extend(centroids);
        for (i, c) in assignment.into_iter().enumerate() {
            codes[i * m + sub] = c;
        }
    }
    Ok((
        ProductCodebook::new(m, k, sub_dim, data)?,
        CodeMatrix::new(n, m, k, codes)?,
    ))
}

/// Plain Lloyd iterations on squared Euclidean distance.
fn lloyd(rows: &[&[f64]], dim: usize, k: usize, init: &[usize], config: &TrainConfig) -> (Vec<f64>, Vec<u32>) {
    let mut centroids: Vec<f64> = init
        .iter()
        .flat_map(|&i| rows[i].iter().map(|&v| to_storage(v)))
        .collect();
    let assign = |centroids: &[f64]| -> Vec<u32> {
        rows.iter()
            .map(|x| {
                let mut best = 0;
                let mut best_sq = f64::INFINITY;
                for (j, c) in centroids.chunks_exact(dim).enumerate() {
                    let (sq, _) = residual_stats(x, c);
                    if sq < best_sq {
                        best_sq = sq;
                        best = j;
                    }
                }
                best as u32
            })
            .collect()
    };
    let losses = |centroids: &[f64], codes: &[u32]| -> Vec<f64> {
        rows.iter()
            .zip(codes)
            .map(|(x, &c)| residual_stats(x, &centroids[c as usize * dim..(c as usize + 1) * dim]).0)
            .collect()
    };
    let mut codes = assign(&centroids);
    let mut previous: f64 = losses(&centroids, &codes).iter().sum();
    for _ in 0..config.max_iterations {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0.0f64; k];
        for (x, &c) in rows.iter().zip(&codes) {
            let c = c as usize;
            for (a, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x.iter()) {
                *a += 1.0 * v;
            }
            counts[c] += 1.0;
        }
        let mut empty = Vec::new();
        for j in 0..k {
            if counts[j] == 0.0 {
                empty.push(j);
                continue;
            }
            for t in 0..dim {
                centroids[j * dim + t] = to_storage(sums[j * dim + t] / (counts[j] + 0.0));
            }
        }
        if !empty.is_empty() && config.empty_partition_policy == EmptyPartitionPolicy::ReseedHighestLoss {
            let order = highest_loss_order(&losses(&centroids, &codes));
            for (j, i) in empty.into_iter().zip(order) {
                for t in 0..dim {
                    centroids[j * dim + t] = to_storage(rows[i][t]);
                }
            }
        }
        let next = assign(&centroids);
        let loss: f64 = losses(&centroids, &next).iter().sum();
        let changed = next != codes;
        codes = next;
        if !changed || relative_change(previous, loss) < config.relative_tolerance {
            break;
        }
        previous = loss;
    }
    (centroids, codes)
}
