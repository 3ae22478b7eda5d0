//! Experiment configuration: one TOML document, every field defaulted, with
//! command-line flags layered on top.

use std::path::{Path, PathBuf};

use anisoq::geometry::EtaMethod;
use anisoq::vq::{EmptyPartitionPolicy, Ridge, SweepPolicy};
use anisoq::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::ValidationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataSection,
    pub loss: LossSection,
    pub quantizer: QuantizerSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            data: DataSection::default(),
            loss: LossSection::default(),
            quantizer: QuantizerSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// Scale datapoints and queries to unit norm after loading.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum LossChoice {
    Reconstruction,
    ScoreAware,
    Eta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossChoice,
    /// Score threshold `T` for `score_aware`.
    pub threshold: f64,
    /// How `eta` is derived from `T` for `score_aware`.
    pub method: EtaMethod,
    /// Fixed `eta` for `eta`.
    pub eta: Option<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            kind: LossChoice::ScoreAware,
            threshold: 0.2,
            method: EtaMethod::Limit,
            eta: None,
        }
    }
}

impl LossSection {
    pub fn to_loss_kind(&self) -> Result<LossKind, ValidationError> {
        match self.kind {
            LossChoice::Reconstruction => Ok(LossKind::Reconstruction),
            LossChoice::ScoreAware => {
                if !self.threshold.is_finite() || self.threshold < 0.0 {
                    return Err(ValidationError(format!(
                        "loss.threshold must be a finite value >= 0, got {}",
                        self.threshold
                    )));
                }
                Ok(LossKind::ScoreAware {
                    threshold: self.threshold,
                    method: self.method,
                })
            }
            LossChoice::Eta => match self.eta {
                Some(eta) if eta >= 0.0 && !eta.is_nan() => Ok(LossKind::Eta(eta)),
                Some(eta) => Err(ValidationError(format!("loss.eta must be >= 0, got {eta}"))),
                None => Err(ValidationError(
                    "loss.kind = \"eta\" needs loss.eta (or --eta)".into(),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum QuantizerChoice {
    Vq,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    pub kind: QuantizerChoice,
    /// Number of subspaces (product quantization only).
    pub m: usize,
    pub k: usize,
    /// Start product quantization from reconstruction-loss dictionaries.
    pub warm_start: bool,
    /// Coordinate-descent passes per point when encoding.
    pub encode_passes: usize,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            kind: QuantizerChoice::Pq,
            m: 8,
            k: 16,
            warm_start: true,
            encode_passes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub empty_partition_policy: EmptyPartitionPolicy,
    pub ridge: Ridge,
    pub sweeps: SweepPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            max_iterations: d.max_iterations,
            relative_tolerance: d.relative_tolerance,
            empty_partition_policy: d.empty_partition_policy,
            ridge: d.ridge,
            sweeps: d.sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub queries: Option<PathBuf>,
    /// Depths `N` for recall 1@N.
    pub ns: Vec<usize>,
    /// Precomputed ground truth (ivecs); computed and cached when absent.
    pub ground_truth: Option<PathBuf>,
    /// Where computed ground truth is cached; defaults to the output directory.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            queries: None,
            ns: vec![1, 2, 5, 10, 20, 50, 100],
            ground_truth: None,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ValidationError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| ValidationError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_iterations: self.train.max_iterations,
            relative_tolerance: self.train.relative_tolerance,
            seed: self.seed,
            empty_partition_policy: self.train.empty_partition_policy,
            ridge: self.train.ridge,
            sweeps: self.train.sweeps,
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), ValidationError> {
        self.loss.to_loss_kind()?;
        self.train_config()
            .validate()
            .map_err(|e| ValidationError(format!("train: {e}")))?;
        if self.quantizer.k == 0 {
            return Err(ValidationError("quantizer.k must be >= 1".into()));
        }
        if self.quantizer.kind == QuantizerChoice::Pq && self.quantizer.m == 0 {
            return Err(ValidationError("quantizer.m must be >= 1".into()));
        }
        if self.quantizer.k > anisoq::format::MAX_CODEBOOK_SIZE {
            return Err(ValidationError(format!(
                "quantizer.k must be <= {}",
                anisoq::format::MAX_CODEBOOK_SIZE
            )));
        }
        if self.eval.ns.is_empty() || self.eval.ns.contains(&0) {
            return Err(ValidationError("eval.ns must be a non-empty list of depths >= 1".into()));
        }
        Ok(())
    }

    /// The data path, which must exist.
    pub fn data_path(&self) -> Result<&Path, ValidationError> {
        existing(self.data.path.as_deref(), "data.path (or --data)")
    }

    pub fn queries_path(&self) -> Result<&Path, ValidationError> {
        existing(self.eval.queries.as_deref(), "eval.queries (or --queries)")
    }
}

pub(crate) fn existing<'a>(path: Option<&'a Path>, what: &str) -> Result<&'a Path, ValidationError> {
    match path {
        None => Err(ValidationError(format!("{what} is required"))),
        Some(p) if !p.exists() => Err(ValidationError(format!("{} does not exist", p.display()))),
        Some(p) => Ok(p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_document_keeps_other_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            seed = 7
            [loss]
            kind = "eta"
            eta = 4.125
            [quantizer]
            kind = "vq"
            k = 32
            [train]
            ridge = { fixed = 1e-8 }
            sweeps = { until_fixed_point = { max_passes = 4 } }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.loss.to_loss_kind().unwrap(), LossKind::Eta(4.125));
        assert_eq!(cfg.quantizer.m, 8);
        assert_eq!(cfg.train.ridge, Ridge::Fixed(1e-8));
        assert_eq!(cfg.train.sweeps, SweepPolicy::UntilFixedPoint { max_passes: 4 });
        assert!(cfg.data.normalize);
    }

    #[test]
    fn rejects_unknown_and_invalid_fields() {
        assert!(toml::from_str::<ExperimentConfig>("sed = 1").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.loss.kind = LossChoice::Eta;
        assert!(cfg.validate().is_err());
        cfg.loss.eta = Some(-1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.eval.ns = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.train.max_iterations = 0;
        assert!(cfg.validate().is_err());
    }
}
