//! Experiment configuration.
//!
//! Every field has a default, so `{}` is a valid config. Defaults:
//!
//! | key | default |
//! |---|---|
//! | `data` | `{"source": "generator", "design": "linear", "alpha": 0.6, "beta": [0.2, 0.5], "sigma": 0.1, "len": 200, "seed": 0}` |
//! | `standardize` | `false` |
//! | `model.kinds` | `["ARX"]` |
//! | `model.m`, `model.n` | `[1, 2, 3]` |
//! | `model.train_ratio` | `0.8` |
//! | `model.training` | 500 epochs, lr 0.01, full batch, Adam, seed 0, hidden 8, 1 layer |
//! | `model.path` | none: fit by grid search |
//! | `ce.anchor` | last index of the series |
//! | `ce.q` / `ce.q_grid` | `3` / `[]` |
//! | `ce.lambda` / `ce.lambda_grid` | `3.0` / `[]` |
//! | `ce.momentum_grid` | `[]` (uses `optimizer.momentum`) |
//! | `ce.weights` | `{"kind": "uniform"}` |
//! | `ce.distance` | `"weighted-squared"` |
//! | `ce.delta` | none (all ones) |
//! | `ce.keep_sets` | `[]` (all variables) |
//! | `ce.target` | `{"kind": "fixed", "value": 2.0}` |
//! | `ce.boundary` | `"observed-history"` |
//! | `ce.lambda_prime` | none (same as λ) |
//! | `ce.mae_denominator` | `"k-plus-q"` |
//! | `optimizer` | lr 0.01, momentum 0.1, 5000 iterations, tolerance 1e-8, seed 0 |
//! | `sweep.sampling` | `{"kind": "all"}` |
//! | `sweep.retain_solutions` | `false` |
//! | `out` | `"out"` |
//!
//! Grids left empty fall back to the matching scalar. Variable indices in
//! `keep_sets` are zero-based. Relative paths resolve against the working
//! directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cetx::analysis::{MaeDenominator, Sampling, TargetRule};
use cetx::ce::{BoundaryMode, DistanceKind, OptimizerConfig, WeightScheme};
use cetx::forecast::{ModelKind, TrainingHyper};
use cetx::simgen::{GeneratorSpec, LinearGenSpec};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataSource,
    pub standardize: bool,
    pub model: ModelConfig,
    pub ce: CeConfig,
    pub optimizer: OptimizerConfig,
    pub sweep: SweepConfig,
    /// Not echoed, so reruns into different directories match byte for byte.
    #[serde(skip_serializing)]
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: DataSource::default(),
            standardize: false,
            model: ModelConfig::default(),
            ce: CeConfig::default(),
            optimizer: OptimizerConfig::default(),
            sweep: SweepConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv(CsvSource),
    Generator(GeneratorSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generator(GeneratorSpec::Linear(LinearGenSpec::reference(0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Target column.
    pub x: String,
    /// Exogenous columns; every other numeric column when absent.
    #[serde(default)]
    pub z: Option<Vec<String>>,
    #[serde(default)]
    pub time: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kinds: Vec<ModelKind>,
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    pub train_ratio: f64,
    pub training: TrainingHyper,
    /// Previously saved model; skips fitting in `explain` and `importance`.
    pub path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ModelKind::Arx],
            m: vec![1, 2, 3],
            n: vec![1, 2, 3],
            train_ratio: 0.8,
            training: TrainingHyper::default(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeConfig {
    pub anchor: Option<usize>,
    pub q: usize,
    pub q_grid: Vec<usize>,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub momentum_grid: Vec<f64>,
    pub weights: WeightScheme,
    pub distance: DistanceKind,
    pub delta: Option<Vec<Vec<f64>>>,
    pub keep_sets: Vec<Vec<usize>>,
    pub target: TargetRule,
    pub boundary: BoundaryMode,
    pub lambda_prime: Option<f64>,
    pub mae_denominator: MaeDenominator,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            anchor: None,
            q: 3,
            q_grid: Vec::new(),
            lambda: 3.0,
            lambda_grid: Vec::new(),
            momentum_grid: Vec::new(),
            weights: WeightScheme::Uniform,
            distance: DistanceKind::WeightedSquared,
            delta: None,
            keep_sets: Vec::new(),
            target: TargetRule::default(),
            boundary: BoundaryMode::ObservedHistory,
            lambda_prime: None,
            mae_denominator: MaeDenominator::KPlusQ,
        }
    }
}

impl CeConfig {
    pub fn qs(&self) -> Vec<usize> {
        if self.q_grid.is_empty() {
            vec![self.q]
        } else {
            self.q_grid.clone()
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        if self.lambda_grid.is_empty() {
            vec![self.lambda]
        } else {
            self.lambda_grid.clone()
        }
    }

    pub fn momenta(&self, opt: &OptimizerConfig) -> Vec<f64> {
        if self.momentum_grid.is_empty() {
            vec![opt.momentum]
        } else {
            self.momentum_grid.clone()
        }
    }

    /// `None` stands for "all variables".
    pub fn keeps(&self) -> Vec<Option<Vec<usize>>> {
        if self.keep_sets.is_empty() {
            vec![None]
        } else {
            self.keep_sets.iter().cloned().map(Some).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sampling: Sampling,
    pub retain_solutions: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sampling: Sampling::All,
            retain_solutions: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            bail!("unsupported config schema_version {}", cfg.schema_version);
        }
        Ok(cfg)
    }

    /// Applies a global seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let DataSource::Generator(g) = self.data {
            self.data = DataSource::Generator(g.with_seed(seed));
        }
        self.model.training.seed = seed;
        self.optimizer.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::default().with_seed(7);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let elsewhere = ExperimentConfig { out: "elsewhere".into(), ..cfg.clone() };
        assert_eq!(serde_json::to_string(&elsewhere).unwrap(), serde_json::to_string(&cfg).unwrap());
        let DataSource::Generator(g) = &back.data else { panic!() };
        assert_eq!(g.seed(), 7);
    }

    #[test]
    fn csv_source_parses() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"data": {"source": "csv", "path": "d.csv", "x": "sales"}}"#).unwrap();
        assert!(matches!(cfg.data, DataSource::Csv(ref c) if c.x == "sales" && c.z.is_none()));
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [
            include_str!("../../../configs/linear-lambda.json"),
            include_str!("../../../configs/linear-q.json"),
            include_str!("../../../configs/linear-momentum.json"),
            include_str!("../../../configs/nonlinear.json"),
        ] {
            serde_json::from_str::<ExperimentConfig>(text).unwrap();
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"lamda": 3}"#).is_err());
    }

    #[test]
    fn empty_grids_fall_back() {
        let ce = CeConfig::default();
        assert_eq!(ce.qs(), vec![3]);
        assert_eq!(ce.lambdas(), vec![3.0]);
        assert_eq!(ce.momenta(&OptimizerConfig::default()), vec![0.1]);
        assert_eq!(ce.keeps(), vec![None]);
    }
}
