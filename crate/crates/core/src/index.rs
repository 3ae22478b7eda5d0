//! Query-time scoring: lookup-table inner products against encoded points,
//! exact brute-force search, and retrieval metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::vecs::{read_ivecs, write_ivecs};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::geometry::dot;
use crate::pq::{CodeMatrix, ProductCodebook};

/// Partial inner products of one query with every sub-codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    m: usize,
    k: usize,
    partials: Vec<f64>,
}

impl LookupTable {
    pub fn num_subspaces(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Row `m` of the table: `<q_m, C_m[j]>` for every `j`.
    pub fn partials(&self, m: usize) -> &[f64] {
        &self.partials[m * self.k..(m + 1) * self.k]
    }
}

pub fn build_lut(q: &[f64], codebook: &ProductCodebook) -> Result<LookupTable> {
    if q.len() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            found: q.len(),
        });
    }
    let (m, k, sub_dim) = (codebook.num_subspaces(), codebook.k(), codebook.sub_dim());
    let mut partials = Vec::with_capacity(m * k);
    for sub in 0..m {
        let qm = &q[sub * sub_dim..(sub + 1) * sub_dim];
        for j in 0..k {
            partials.push(dot(qm, codebook.sub_codeword(sub, j)));
        }
    }
    Ok(LookupTable { m, k, partials })
}

/// Approximate inner product of the query with an encoded point.
pub fn adc_score(codes_row: &[u32], lut: &LookupTable) -> Result<f64> {
    if codes_row.len() != lut.m {
        return Err(Error::DimensionMismatch {
            expected: lut.m,
            found: codes_row.len(),
        });
    }
    if let Some(&code) = codes_row.iter().find(|&&c| c as usize >= lut.k) {
        return Err(Error::CodeOutOfRange { code, k: lut.k });
    }
    Ok(score_unchecked(codes_row, lut))
}

#[inline]
fn score_unchecked(codes_row: &[u32], lut: &LookupTable) -> f64 {
    let mut s = 0.0;
    for (m, &c) in codes_row.iter().enumerate() {
        s += lut.partials[m * lut.k + c as usize];
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
}

/// Hits ordered by score descending, ties broken by lower index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
}

impl SearchResult {
    pub fn indices(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.index).collect()
    }
}

/// Heap entry ordered so that the worst-ranked hit is the maximum.
struct Worst(Hit);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .score
            .total_cmp(&self.0.score)
            .then(self.0.index.cmp(&other.0.index))
    }
}

fn top_n(scores: impl Iterator<Item = f64>, top: usize) -> SearchResult {
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(top + 1);
    for (index, score) in scores.enumerate() {
        let hit = Worst(Hit { index, score });
        if heap.len() < top {
            heap.push(hit);
        } else if let Some(worst) = heap.peek() {
            if hit < *worst {
                heap.pop();
                heap.push(hit);
            }
        }
    }
    SearchResult {
        hits: heap.into_sorted_vec().into_iter().map(|w| w.0).collect(),
    }
}

fn check_top(top: usize) -> Result<()> {
    if top == 0 {
        return Err(Error::InvalidArgument("topN must be at least 1".into()));
    }
    Ok(())
}

/// Top-`top` encoded points by approximate inner product with `q`.
pub fn adc_search(
    q: &[f64],
    codes: &CodeMatrix,
    codebook: &ProductCodebook,
    top: usize,
) -> Result<SearchResult> {
    check_top(top)?;
    if codes.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if codes.num_subspaces() != codebook.num_subspaces() || codes.k() != codebook.k() {
        return Err(Error::InvalidArgument(format!(
            "codes (M={}, k={}) do not match codebook (M={}, k={})",
            codes.num_subspaces(),
            codes.k(),
            codebook.num_subspaces(),
            codebook.k()
        )));
    }
    let lut = build_lut(q, codebook)?;
    Ok(top_n(
        (0..codes.len()).map(|i| score_unchecked(codes.row(i), &lut)),
        top,
    ))
}

/// Exhaustive top-`top` by true inner product.
pub fn exact_search(q: &[f64], dataset: &Dataset, top: usize) -> Result<SearchResult> {
    check_top(top)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if q.len() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            found: q.len(),
        });
    }
    Ok(top_n(dataset.rows().map(|x| dot(q, x)), top))
}

/// Exact nearest neighbours (by inner product) of every query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub neighbors: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn compute(queries: &Dataset, dataset: &Dataset, depth: usize) -> Result<Self> {
        check_top(depth)?;
        let neighbors = (0..queries.len())
            .into_par_iter()
            .map(|i| exact_search(queries.row(i), dataset, depth).map(|r| r.indices()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { neighbors })
    }

    /// Depth available for every query.
    pub fn depth(&self) -> usize {
        self.neighbors.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let rows = read_ivecs(path)?;
        let neighbors = rows
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|v| {
                        usize::try_from(v).map_err(|_| {
                            Error::MalformedFile(format!("negative neighbour index {v}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { neighbors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows = self
            .neighbors
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&v| {
                        i32::try_from(v).map_err(|_| {
                            Error::InvalidArgument(format!("neighbour index {v} exceeds i32"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        write_ivecs(path, &rows)
    }

    fn check_against(&self, queries: &Dataset, dataset: &Dataset, depth: usize) -> Result<()> {
        if self.neighbors.len() != queries.len() {
            return Err(Error::GroundTruthMismatch(format!(
                "{} ground-truth rows for {} queries",
                self.neighbors.len(),
                queries.len()
            )));
        }
        let need = depth.min(dataset.len());
        if self.depth() < need {
            return Err(Error::GroundTruthMismatch(format!(
                "ground truth has depth {}, evaluation needs {need}",
                self.depth()
            )));
        }
        if let Some(&bad) = self.neighbors.iter().flatten().find(|&&i| i >= dataset.len()) {
            return Err(Error::GroundTruthMismatch(format!(
                "neighbour index {bad} out of range for {} points",
                dataset.len()
            )));
        }
        Ok(())
    }
}

/// Sidecar path under `dir` for a dataset/query pair at `depth`.
pub fn ground_truth_cache_path(dir: &Path, queries: &Dataset, dataset: &Dataset, depth: usize) -> PathBuf {
    let data = dataset.digest();
    let query = queries.digest();
    dir.join(format!("gt-{}-{}-{depth}.ivecs", &data[..16], &query[..16]))
}

/// Loads the cached ground truth for this dataset/query pair, computing and
/// persisting it when absent.
pub fn cached_ground_truth(
    dir: &Path,
    queries: &Dataset,
    dataset: &Dataset,
    depth: usize,
) -> Result<GroundTruth> {
    let depth = depth.min(dataset.len()).max(1);
    let path = ground_truth_cache_path(dir, queries, dataset, depth);
    if path.exists() {
        let gt = GroundTruth::read(&path)?;
        if gt.check_against(queries, dataset, depth).is_ok() {
            return Ok(gt);
        }
    }
    let gt = GroundTruth::compute(queries, dataset, depth)?;
    std::fs::create_dir_all(dir)?;
    gt.write(&path)?;
    Ok(gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// Queries contributing (those with a non-zero true top-1 score).
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl ErrorSummary {
    fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let count = values.len();
        if count == 0 {
            return Self {
                count,
                mean: f64::NAN,
                p50: f64::NAN,
                p90: f64::NAN,
                p99: f64::NAN,
                max: f64::NAN,
            };
        }
        let q = |p: f64| values[(((count - 1) as f64) * p).round() as usize];
        Self {
            count,
            mean: values.iter().sum::<f64>() / count as f64,
            p50: q(0.5),
            p90: q(0.9),
            p99: q(0.99),
            max: values[count - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_queries: usize,
    /// Fraction of queries whose true top-1 is among the top `N` retrieved.
    pub recall_1_at_n: BTreeMap<usize, f64>,
    /// `k` used for `recall_k_at_k` (10, capped at the dataset size).
    pub recall_k: usize,
    /// Mean of `|retrieved top-k ∩ true top-k| / k`.
    pub recall_k_at_k: f64,
    /// `|(<q,x> - <q,x~>) / <q,x>|` on each query's true top-1 point.
    pub relative_error_top1: ErrorSummary,
    pub latency: LatencySummary,
}

impl EvalReport {
    /// One `key value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("num_queries {}\n", self.num_queries));
        for (n, r) in &self.recall_1_at_n {
            out.push_str(&format!("recall_1_at_{n} {r:.6}\n"));
        }
        out.push_str(&format!(
            "recall_{k}_at_{k} {:.6}\n",
            self.recall_k_at_k,
            k = self.recall_k
        ));
        let e = &self.relative_error_top1;
        out.push_str(&format!("relative_error_top1_count {}\n", e.count));
        for (name, v) in [
            ("mean", e.mean),
            ("p50", e.p50),
            ("p90", e.p90),
            ("p99", e.p99),
            ("max", e.max),
        ] {
            out.push_str(&format!("relative_error_top1_{name} {v:.6e}\n"));
        }
        out.push_str(&format!("latency_mean_us {:.3}\n", self.latency.mean_us));
        out.push_str(&format!("latency_p50_us {:.3}\n", self.latency.p50_us));
        out.push_str(&format!("latency_p99_us {:.3}\n", self.latency.p99_us));
        out
    }
}

/// `k` in recall k@k.
pub const RECALL_K: usize = 10;

/// Scores every query against the encoded dataset. Ground truth is computed
/// by exact search unless supplied.
pub fn evaluate(
    queries: &Dataset,
    dataset: &Dataset,
    codes: &CodeMatrix,
    codebook: &ProductCodebook,
    ns: &[usize],
    ground_truth: Option<&GroundTruth>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    if codes.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            found: codes.len(),
        });
    }
    if let Some(&bad) = ns.iter().find(|&&n| n == 0) {
        return Err(Error::InvalidArgument(format!("recall depth {bad} must be >= 1")));
    }
    let n = dataset.len();
    let k = RECALL_K.min(n);
    let depth = ns.iter().copied().max().unwrap_or(1).max(k).min(n);
    let computed;
    let gt = match ground_truth {
        Some(gt) => {
            gt.check_against(queries, dataset, k)?;
            gt
        }
        None => {
            computed = GroundTruth::compute(queries, dataset, k)?;
            &computed
        }
    };

    struct PerQuery {
        rank_of_top1: Option<usize>,
        overlap: usize,
        relative_error: Option<f64>,
        micros: f64,
    }
    let per_query = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let start = Instant::now();
            let result = adc_search(q, codes, codebook, depth)?;
            let micros = start.elapsed().as_secs_f64() * 1e6;
            let truth = &gt.neighbors[qi];
            let top1 = truth[0];
            let rank_of_top1 = result.hits.iter().position(|h| h.index == top1);
            let retrieved: Vec<usize> = result.hits.iter().take(k).map(|h| h.index).collect();
            let overlap = truth[..k].iter().filter(|t| retrieved.contains(t)).count();
            let exact = dot(q, dataset.row(top1));
            let lut = build_lut(q, codebook)?;
            let approx = adc_score(codes.row(top1), &lut)?;
            let relative_error = (exact != 0.0).then(|| ((exact - approx) / exact).abs());
            Ok(PerQuery {
                rank_of_top1,
                overlap,
                relative_error,
                micros,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let nq = queries.len() as f64;
    let recall_1_at_n = ns
        .iter()
        .map(|&big_n| {
            let hits = per_query
                .iter()
                .filter(|p| p.rank_of_top1.is_some_and(|r| r < big_n))
                .count();
            (big_n, hits as f64 / nq)
        })
        .collect();
    let recall_k_at_k =
        per_query.iter().map(|p| p.overlap as f64 / k as f64).sum::<f64>() / nq;
    let errors = per_query.iter().filter_map(|p| p.relative_error).collect();
    let mut micros: Vec<f64> = per_query.iter().map(|p| p.micros).collect();
    micros.sort_by(f64::total_cmp);
    let pick = |p: f64| micros[(((micros.len() - 1) as f64) * p).round() as usize];
    Ok(EvalReport {
        num_queries: queries.len(),
        recall_1_at_n,
        recall_k: k,
        recall_k_at_k,
        relative_error_top1: ErrorSummary::from_values(errors),
        latency: LatencySummary {
            mean_us: micros.iter().sum::<f64>() / nq,
            p50_us: pick(0.5),
            p99_us: pick(0.99),
        },
    })
}
