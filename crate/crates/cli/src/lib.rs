//! Command-line experiments: data generation and conversion, training,
//! encoding, search, evaluation and `eta` tables.

pub mod config;
mod manifest;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anisoq::datasets::vecs::{read_fvecs, write_fvecs};
use anisoq::datasets::{diagnose, generate_synthetic, Dataset, SyntheticKind};
use anisoq::format::{read_artifact, read_codes, write_artifact, write_codes, CodebookArtifact};
use anisoq::geometry::{dataset_weights, eta_exact, eta_limit, AnisotropicWeights, EtaMethod};
use anisoq::index::{adc_search, cached_ground_truth, evaluate, exact_search, GroundTruth, RECALL_K};
use anisoq::pq::{pq_quantize, pq_total_loss, train_apq, CodeMatrix};
use anisoq::vq::{train_avq, vq_quantize};
use anisoq::{Codebook, ProductCodebook};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

pub use config::ExperimentConfig;
use config::{existing, LossChoice, QuantizerChoice};
use manifest::Manifest;

/// Exit status for bad input: flags, config, missing files, invalid data.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for failures while running a valid request.
pub const EXIT_RUNTIME: i32 = 1;

/// A problem with the request itself rather than with running it.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

/// Maps an error to its exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use anisoq::Error as E;
    if err.downcast_ref::<ValidationError>().is_some() {
        return EXIT_VALIDATION;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::ZeroNormDatapoint { .. }
            | E::NonFiniteValue { .. }
            | E::DimensionMismatch { .. }
            | E::InvalidDimension(..)
            | E::InvalidThreshold { .. }
            | E::InvalidWeightFunction(_)
            | E::EmptyDataset
            | E::EmptyIndex
            | E::DimensionNotDivisible { .. }
            | E::CodeOutOfRange { .. }
            | E::GroundTruthMismatch(_)
            | E::MalformedFile(_)
            | E::InsufficientData(_)
            | E::InvalidArgument(_)
            | E::SystemTooLarge { .. },
        ) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "anisoq", version, about = "Score-aware quantization for inner-product search")]
pub struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Convert text vectors (one per line, optional leading label) or fvecs to fvecs.
    Convert(ConvertArgs),
    /// Per-dimension variance and cross-dimension correlation of a dataset.
    Diagnose(DiagnoseArgs),
    /// Train a codebook and encode the training data.
    Train(ExperimentArgs),
    /// Encode a dataset with an existing codebook.
    Encode(EncodeArgs),
    /// Top-N search for ad-hoc queries.
    Search(SearchArgs),
    /// Recall and relative-error report against exact search.
    Eval(EvalArgs),
    /// Table of exact and limit `eta` over dimensions.
    Eta(EtaArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum GenKind {
    UniformSphere,
    GaussianMixture,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "gaussian_mixture")]
    pub kind: GenKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub centers: usize,
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    /// Do not unit-normalize gaussian-mixture rows.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum InputFormat {
    Text,
    Fvecs,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub from: InputFormat,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Config file plus per-field overrides.
#[derive(Debug, Args, Default)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Keep data at its original scale.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossChoice>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_enum)]
    pub eta_method: Option<EtaMethodArg>,
    #[arg(long, value_enum)]
    pub quantizer: Option<QuantizerChoice>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub warm_start: Option<bool>,
    #[arg(long)]
    pub encode_passes: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EtaMethodArg {
    Limit,
    Exact,
    Integral,
}

impl From<EtaMethodArg> for EtaMethod {
    fn from(m: EtaMethodArg) -> Self {
        match m {
            EtaMethodArg::Limit => EtaMethod::Limit,
            EtaMethodArg::Exact => EtaMethod::Exact,
            EtaMethodArg::Integral => EtaMethod::Integral,
        }
    }
}

impl ExperimentArgs {
    /// Loads the config file (or defaults) and applies the overrides.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.data {
            cfg.data.path = Some(v.clone());
        }
        if self.no_normalize {
            cfg.data.normalize = false;
        }
        if let Some(v) = &self.output {
            cfg.output = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.loss {
            cfg.loss.kind = v;
        }
        if let Some(v) = self.threshold {
            cfg.loss.threshold = v;
        }
        if let Some(v) = self.eta {
            cfg.loss.eta = Some(v);
            if self.loss.is_none() {
                cfg.loss.kind = LossChoice::Eta;
            }
        }
        if let Some(v) = self.eta_method {
            cfg.loss.method = v.into();
        }
        if let Some(v) = self.quantizer {
            cfg.quantizer.kind = v;
        }
        if let Some(v) = self.m {
            cfg.quantizer.m = v;
        }
        if let Some(v) = self.k {
            cfg.quantizer.k = v;
        }
        if let Some(v) = self.warm_start {
            cfg.quantizer.warm_start = v;
        }
        if let Some(v) = self.encode_passes {
            cfg.quantizer.encode_passes = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.train.max_iterations = v;
        }
        if let Some(v) = self.tolerance {
            cfg.train.relative_tolerance = v;
        }
        if let Some(v) = &self.queries {
            cfg.eval.queries = Some(v.clone());
        }
        if let Some(v) = &self.ns {
            cfg.eval.ns = v.clone();
        }
        if let Some(v) = &self.ground_truth {
            cfg.eval.ground_truth = Some(v.clone());
        }
        if let Some(v) = &self.cache_dir {
            cfg.eval.cache_dir = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Queries (fvecs).
    #[arg(long)]
    pub query: PathBuf,
    /// Only search for this query row.
    #[arg(long)]
    pub row: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, required_unless_present = "data")]
    pub codebook: Option<PathBuf>,
    #[arg(long, requires = "codebook")]
    pub codes: Option<PathBuf>,
    /// Exact search over this dataset instead of the encoded index.
    #[arg(long, conflicts_with_all = ["codebook", "codes"])]
    pub data: Option<PathBuf>,
    /// Keep queries (and data) at their original scale.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Defaults to `<output>/codebook.bin`.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Defaults to `<output>/codes.bin`.
    #[arg(long)]
    pub codes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EtaArgs {
    #[arg(long)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    pub norm: f64,
    #[arg(long, default_value_t = 3)]
    pub d_min: usize,
    #[arg(long, default_value_t = 512)]
    pub d_max: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(ValidationError("--threads must be >= 1".into()).into());
        }
        // A pool may already exist when called repeatedly in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, &mut out),
        Command::Convert(a) => cmd_convert(&a, &mut out),
        Command::Diagnose(a) => cmd_diagnose(&a, &mut out),
        Command::Train(a) => cmd_train(&a.resolve()?, &mut out),
        Command::Encode(a) => cmd_encode(&a, &mut out),
        Command::Search(a) => cmd_search(&a, &mut out),
        Command::Eval(a) => cmd_eval(&a, &mut out),
        Command::Eta(a) => cmd_eta(&a, &mut out),
    }
}

fn load_dataset(path: &Path, normalize: bool) -> Result<Dataset> {
    let ds = read_fvecs(path).with_context(|| format!("reading {}", path.display()))?;
    if ds.is_empty() {
        return Err(ValidationError(format!("{} contains no vectors", path.display())).into());
    }
    Ok(if normalize { ds.unit_normalize()? } else { ds })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn cmd_gen(a: &GenArgs, out: &mut impl Write) -> Result<()> {
    let kind = match a.kind {
        GenKind::UniformSphere => SyntheticKind::UniformSphere,
        GenKind::GaussianMixture => SyntheticKind::GaussianMixture {
            centers: a.centers,
            spread: a.spread,
            normalize: !a.raw,
        },
    };
    let ds = generate_synthetic(&kind, a.n, a.d, a.seed)?;
    write_fvecs(&a.out, &ds)?;
    let mut m = Manifest::new("gen", &json!({ "generator": kind, "n": a.n, "d": a.d, "seed": a.seed }));
    m.output(&a.out)?;
    write_json(&sidecar(&a.out), &m)?;
    writeln!(out, "wrote {} vectors of dimension {} to {}", ds.len(), ds.dim(), a.out.display())?;
    Ok(())
}

/// Parses whitespace-separated rows; a non-numeric first token is a label.
fn parse_text_vectors(text: &str) -> Result<Dataset> {
    let mut values = Vec::new();
    let mut d = None;
    for (line_no, line) in text.lines().enumerate() {
        let mut tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens[0].parse::<f64>().is_err() {
            tokens.remove(0);
        }
        let row = tokens
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ValidationError(format!("line {}: {e}", line_no + 1)))?;
        match d {
            None => d = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(ValidationError(format!(
                    "line {} has {} values, expected {d}",
                    line_no + 1,
                    row.len()
                ))
                .into())
            }
            Some(_) => {}
        }
        values.extend(row);
    }
    Ok(Dataset::new(d.unwrap_or(0), values)?)
}

pub fn cmd_convert(a: &ConvertArgs, out: &mut impl Write) -> Result<()> {
    existing(Some(&a.input), "--input")?;
    let ds = match a.from {
        InputFormat::Fvecs => read_fvecs(&a.input)?,
        InputFormat::Text => parse_text_vectors(&fs::read_to_string(&a.input)?)?,
    };
    let ds = if a.normalize { ds.unit_normalize()? } else { ds };
    write_fvecs(&a.out, &ds)?;
    let mut m = Manifest::new("convert", &json!({ "from": format!("{:?}", a.from).to_lowercase(), "normalize": a.normalize }));
    m.input(&a.input)?;
    m.output(&a.out)?;
    write_json(&sidecar(&a.out), &m)?;
    writeln!(out, "wrote {} vectors of dimension {} to {}", ds.len(), ds.dim(), a.out.display())?;
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs, out: &mut impl Write) -> Result<()> {
    existing(Some(&a.input), "--input")?;
    let ds = read_fvecs(&a.input)?;
    let report = diagnose(&ds)?;
    writeln!(out, "n {}", ds.len())?;
    writeln!(out, "d {}", ds.dim())?;
    writeln!(out, "variance_ratio {:.6}", report.variance_ratio)?;
    writeln!(out, "max_abs_offdiagonal_correlation {:.6}", report.max_abs_offdiagonal_correlation)?;
    for (i, v) in report.per_dimension_variance.iter().enumerate() {
        writeln!(out, "variance_{i} {v:.6e}")?;
    }
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EtaSummary {
    min: f64,
    max: f64,
    mean: f64,
    /// Distinct values, ascending, at most 16.
    distinct: Vec<f64>,
}

fn eta_summary(weights: &[AnisotropicWeights]) -> EtaSummary {
    let mut etas: Vec<f64> = weights.iter().map(|w| w.eta()).collect();
    etas.sort_by(f64::total_cmp);
    let mut distinct = etas.clone();
    distinct.dedup();
    distinct.truncate(16);
    EtaSummary {
        min: etas[0],
        max: etas[etas.len() - 1],
        mean: etas.iter().sum::<f64>() / etas.len() as f64,
        distinct,
    }
}

pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const CODES_FILE: &str = "codes.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn cmd_train(cfg: &ExperimentConfig, out: &mut impl Write) -> Result<()> {
    let data_path = cfg.data_path()?;
    let ds = load_dataset(data_path, cfg.data.normalize)?;
    let loss = cfg.loss.to_loss_kind()?;
    let weights = dataset_weights(&ds, &loss)?;
    let train = cfg.train_config();
    let q = &cfg.quantizer;
    let (artifact, codes, history) = match q.kind {
        QuantizerChoice::Vq => {
            let (cb, a) = train_avq(&ds, q.k, &weights, &train)?;
            let codes = CodeMatrix::new(ds.len(), 1, q.k, a.assignments)?;
            (CodebookArtifact::Vq(cb), codes, a.loss_history)
        }
        QuantizerChoice::Pq => {
            if ds.dim() % q.m != 0 {
                return Err(ValidationError(format!(
                    "dimension {} is not divisible by quantizer.m = {}",
                    ds.dim(),
                    q.m
                ))
                .into());
            }
            let (cb, a) = train_apq(&ds, q.m, q.k, &weights, &train, q.warm_start)?;
            (CodebookArtifact::Pq(cb), a.codes, a.loss_history)
        }
    };
    fs::create_dir_all(&cfg.output)?;
    let cb_path = cfg.output.join(CODEBOOK_FILE);
    let codes_path = cfg.output.join(CODES_FILE);
    let log_path = cfg.output.join(TRAIN_LOG_FILE);
    write_artifact(&cb_path, &artifact)?;
    write_codes(&codes_path, &codes)?;
    let log = json!({
        "n": ds.len(),
        "d": ds.dim(),
        "loss": loss,
        "eta": eta_summary(&weights),
        "iterations": history.len() - 1,
        "loss_history": history,
    });
    write_json(&log_path, &log)?;
    let mut m = Manifest::new("train", cfg);
    m.input(data_path)?;
    m.output(&cb_path)?;
    m.output(&codes_path)?;
    m.output(&log_path)?;
    write_json(&cfg.output.join(MANIFEST_FILE), &m)?;
    writeln!(
        out,
        "trained {} iterations, final loss {:.6e}; artifacts in {}",
        history.len() - 1,
        history.last().unwrap(),
        cfg.output.display()
    )?;
    Ok(())
}

fn load_artifact(path: &Path) -> Result<CodebookArtifact> {
    existing(Some(path), "codebook")?;
    read_artifact(path).with_context(|| format!("reading {}", path.display()))
}

fn encode(ds: &Dataset, artifact: &CodebookArtifact, weights: &[AnisotropicWeights], passes: usize) -> Result<CodeMatrix> {
    Ok(match artifact {
        CodebookArtifact::Vq(cb) => vq_quantize(ds, cb, weights)?,
        CodebookArtifact::Pq(cb) => pq_quantize(ds, cb, weights, passes)?,
    })
}

pub fn cmd_encode(a: &EncodeArgs, out: &mut impl Write) -> Result<()> {
    let cfg = a.experiment.resolve()?;
    let data_path = cfg.data_path()?;
    let ds = load_dataset(data_path, cfg.data.normalize)?;
    let artifact = load_artifact(&a.codebook)?;
    let weights = dataset_weights(&ds, &cfg.loss.to_loss_kind()?)?;
    let codes = encode(&ds, &artifact, &weights, cfg.quantizer.encode_passes)?;
    write_codes(&a.out, &codes)?;
    let product = artifact.to_product();
    let loss = pq_total_loss(&ds, &product, &codes, &weights);
    let mut m = Manifest::new("encode", &cfg);
    m.input(data_path)?;
    m.input(&a.codebook)?;
    m.output(&a.out)?;
    write_json(&sidecar(&a.out), &m)?;
    writeln!(out, "encoded {} vectors, total loss {loss:.6e}", ds.len())?;
    Ok(())
}

fn check_codes_match(codes: &CodeMatrix, cb: &ProductCodebook, n: Option<usize>) -> Result<()> {
    if codes.num_subspaces() != cb.num_subspaces() || codes.k() != cb.k() {
        return Err(ValidationError(format!(
            "codes (M={}, k={}) do not belong to codebook (M={}, k={})",
            codes.num_subspaces(),
            codes.k(),
            cb.num_subspaces(),
            cb.k()
        ))
        .into());
    }
    if let Some(n) = n {
        if codes.len() != n {
            return Err(ValidationError(format!(
                "codes cover {} points but the dataset has {n}",
                codes.len()
            ))
            .into());
        }
    }
    Ok(())
}

pub fn cmd_search(a: &SearchArgs, out: &mut impl Write) -> Result<()> {
    existing(Some(&a.query), "--query")?;
    let queries = load_dataset(&a.query, !a.no_normalize)?;
    let rows: Vec<usize> = match a.row {
        Some(r) if r >= queries.len() => {
            return Err(ValidationError(format!("--row {r} out of range for {} queries", queries.len())).into())
        }
        Some(r) => vec![r],
        None => (0..queries.len()).collect(),
    };
    if a.top == 0 {
        return Err(ValidationError("--top must be >= 1".into()).into());
    }
    enum Target {
        Exact(Dataset),
        Adc(ProductCodebook, CodeMatrix),
    }
    let target = match (&a.data, &a.codebook, &a.codes) {
        (Some(data), _, _) => {
            existing(Some(data), "--data")?;
            Target::Exact(load_dataset(data, !a.no_normalize)?)
        }
        (None, Some(cb), Some(codes)) => {
            let cb = load_artifact(cb)?.to_product();
            existing(Some(codes), "--codes")?;
            let codes = read_codes(codes)?;
            check_codes_match(&codes, &cb, None)?;
            Target::Adc(cb, codes)
        }
        _ => return Err(ValidationError("search needs --data, or --codebook with --codes".into()).into()),
    };
    writeln!(out, "query rank index score")?;
    for qi in rows {
        let q = queries.row(qi);
        let result = match &target {
            Target::Exact(ds) => exact_search(q, ds, a.top)?,
            Target::Adc(cb, codes) => adc_search(q, codes, cb, a.top)?,
        };
        for (rank, hit) in result.hits.iter().enumerate() {
            writeln!(out, "{qi} {rank} {} {:.9}", hit.index, hit.score)?;
        }
    }
    Ok(())
}

pub const EVAL_TEXT_FILE: &str = "eval.txt";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_LATENCY_FILE: &str = "eval_latency.json";
pub const EVAL_MANIFEST_FILE: &str = "eval_manifest.json";

pub fn cmd_eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let cfg = a.experiment.resolve()?;
    let data_path = cfg.data_path()?;
    let query_path = cfg.queries_path()?;
    let cb_path = a.codebook.clone().unwrap_or_else(|| cfg.output.join(CODEBOOK_FILE));
    let codes_path = a.codes.clone().unwrap_or_else(|| cfg.output.join(CODES_FILE));
    let cb = load_artifact(&cb_path)?.to_product();
    existing(Some(&codes_path), "codes")?;
    let codes = read_codes(&codes_path)?;
    let ds = load_dataset(data_path, cfg.data.normalize)?;
    let queries = load_dataset(query_path, cfg.data.normalize)?;
    if queries.dim() != ds.dim() {
        return Err(ValidationError(format!(
            "queries have dimension {}, data has {}",
            queries.dim(),
            ds.dim()
        ))
        .into());
    }
    check_codes_match(&codes, &cb, Some(ds.len()))?;

    let depth = cfg.eval.ns.iter().copied().max().unwrap_or(1).max(RECALL_K);
    let (gt, gt_path) = match &cfg.eval.ground_truth {
        Some(path) => {
            existing(Some(path), "eval.ground_truth")?;
            (GroundTruth::read(path)?, path.clone())
        }
        None => {
            let dir = cfg.eval.cache_dir.clone().unwrap_or_else(|| cfg.output.clone());
            let gt = cached_ground_truth(&dir, &queries, &ds, depth)?;
            let path = anisoq::index::ground_truth_cache_path(&dir, &queries, &ds, depth.min(ds.len()).max(1));
            (gt, path)
        }
    };
    let report = evaluate(&queries, &ds, &codes, &cb, &cfg.eval.ns, Some(&gt))?;

    fs::create_dir_all(&cfg.output)?;
    let text_path = cfg.output.join(EVAL_TEXT_FILE);
    let json_path = cfg.output.join(EVAL_JSON_FILE);
    let latency_path = cfg.output.join(EVAL_LATENCY_FILE);
    // Latency varies run to run, so it is kept apart from the reproducible metrics.
    let text: String = report
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("latency_"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&text_path, &text)?;
    let metrics = json!({
        "num_queries": report.num_queries,
        "recall_1_at_n": report.recall_1_at_n,
        "recall_k": report.recall_k,
        "recall_k_at_k": report.recall_k_at_k,
        "relative_error_top1": report.relative_error_top1,
    });
    write_json(&json_path, &metrics)?;
    write_json(&latency_path, &report.latency)?;
    let mut m = Manifest::new("eval", &cfg);
    m.input(data_path)?;
    m.input(query_path)?;
    m.input(&cb_path)?;
    m.input(&codes_path)?;
    m.input(&gt_path)?;
    m.output(&text_path)?;
    m.output(&json_path)?;
    write_json(&cfg.output.join(EVAL_MANIFEST_FILE), &m)?;
    out.write_all(text.as_bytes())?;
    writeln!(
        out,
        "latency_mean_us {:.3}\nlatency_p99_us {:.3}",
        report.latency.mean_us, report.latency.p99_us
    )?;
    Ok(())
}

pub fn cmd_eta(a: &EtaArgs, out: &mut impl Write) -> Result<()> {
    if a.d_min < 3 || a.d_max < a.d_min {
        return Err(ValidationError(format!(
            "need 3 <= --d-min <= --d-max, got {}..{}",
            a.d_min, a.d_max
        ))
        .into());
    }
    // Validates the threshold before printing anything.
    eta_limit(a.threshold, a.norm, a.d_min)?;
    writeln!(out, "d eta_exact eta_limit eta_exact_per_dim eta_limit_per_dim")?;
    for d in a.d_min..=a.d_max {
        let exact = eta_exact(a.threshold, a.norm, d)?;
        let limit = eta_limit(a.threshold, a.norm, d)?;
        let k = (d - 1) as f64;
        writeln!(out, "{d} {exact:.12} {limit:.12} {:.12} {:.12}", exact / k, limit / k)?;
    }
    Ok(())
}

/// Codebook loaded as a VQ codebook, for callers that need one.
pub fn read_vq_codebook(path: &Path) -> Result<Codebook> {
    match load_artifact(path)? {
        CodebookArtifact::Vq(cb) => Ok(cb),
        CodebookArtifact::Pq(_) => Err(ValidationError(format!("{} is a product codebook", path.display())).into()),
    }
}
