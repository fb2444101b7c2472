//! One-step forecasters `x_t = f(x lags, z lags)`.
//!
//! All models consume the feature layout documented in [`crate::data`]. The
//! forward pass is generic over [`Scalar`], so the same code serves plain
//! prediction, parameter gradients for training, and input gradients for
//! counterfactual search.

mod arx;
mod neural;
mod select;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::{LaggedDataset, ScalerParams};
use crate::error::{domain, Error, Result};

pub use arx::{fit_arx, ArxCoefficients};
pub use neural::{fit_neural, Optimizer, TrainingHyper};
pub use select::{select_model, Candidate, FailedCandidate, Selection, SelectionReport};

/// Version tag written into serialized models.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelKind {
    Arx,
    Mlp,
    Rnn,
    Lstm,
    Gru,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Arx,
        ModelKind::Mlp,
        ModelKind::Rnn,
        ModelKind::Lstm,
        ModelKind::Gru,
    ];

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::Rnn | ModelKind::Lstm | ModelKind::Gru)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Arx => "ARX",
            ModelKind::Mlp => "MLP",
            ModelKind::Rnn => "RNN",
            ModelKind::Lstm => "LSTM",
            ModelKind::Gru => "GRU",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ARX" => Ok(ModelKind::Arx),
            "MLP" => Ok(ModelKind::Mlp),
            "RNN" => Ok(ModelKind::Rnn),
            "LSTM" => Ok(ModelKind::Lstm),
            "GRU" => Ok(ModelKind::Gru),
            other => Err(domain(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Hidden width and depth of a neural model. Ignored for ARX.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { hidden: 8, layers: 1 }
    }
}

/// How a model was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Absent for models built from given coefficients.
    #[serde(default)]
    pub train_mse: Option<f64>,
    #[serde(default)]
    pub test_mse: Option<f64>,
    /// Training loss at the recorded epoch checkpoints.
    #[serde(default)]
    pub loss_checkpoints: Vec<(usize, f64)>,
}

/// A trained one-step predictor with lag orders `(m, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    kind: ModelKind,
    m: usize,
    n: usize,
    k: usize,
    arch: Architecture,
    params: Vec<f64>,
    training: TrainingRecord,
    #[serde(default)]
    scaler: Option<ScalerParams>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    #[serde(flatten)]
    model: ForecastModel,
}

impl ForecastModel {
    pub(crate) fn from_parts(
        kind: ModelKind,
        (m, n, k): (usize, usize, usize),
        arch: Architecture,
        params: Vec<f64>,
        training: TrainingRecord,
    ) -> Result<Self> {
        let model = Self {
            kind,
            m,
            n,
            k,
            arch,
            params,
            training,
            scaler: None,
        };
        let expected = model.param_count();
        if model.params.len() != expected {
            return Err(Error::Arity {
                expected,
                got: model.params.len(),
            });
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(domain("model parameters must be finite"));
        }
        Ok(model)
    }

    /// Linear ARX model from explicit coefficients.
    pub fn arx(coefficients: ArxCoefficients) -> Result<Self> {
        let (m, n, k) = coefficients.shape()?;
        let params = coefficients.to_params();
        Self::from_parts(
            ModelKind::Arx,
            (m, n, k),
            Architecture::default(),
            params,
            TrainingRecord {
                epochs: 0,
                learning_rate: 0.0,
                seed: 0,
                train_mse: None,
                test_mse: None,
                loss_checkpoints: Vec::new(),
            },
        )
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// `(m, n)`.
    pub fn lags(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn num_exogenous(&self) -> usize {
        self.k
    }

    pub fn feature_dim(&self) -> usize {
        self.m + self.n * self.k
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn training(&self) -> &TrainingRecord {
        &self.training
    }

    pub fn training_mut(&mut self) -> &mut TrainingRecord {
        &mut self.training
    }

    pub fn scaler(&self) -> Option<&ScalerParams> {
        self.scaler.as_ref()
    }

    /// Records the standardization the model was trained under.
    pub fn with_scaler(mut self, scaler: Option<ScalerParams>) -> Self {
        self.scaler = scaler;
        self
    }

    /// Coefficients of a linear ARX model, `None` for neural kinds.
    pub fn arx_coefficients(&self) -> Option<ArxCoefficients> {
        (self.kind == ModelKind::Arx).then(|| ArxCoefficients::from_params(&self.params, self.m, self.n, self.k))
    }

    pub(crate) fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Arx => 1 + self.feature_dim(),
            _ => neural::param_count(self.kind, self.arch, self.feature_dim(), 1 + self.k),
        }
    }

    /// Forward pass with caller-supplied parameters.
    pub(crate) fn forward_with<S: Scalar>(&self, params: &[S], features: &[S]) -> S {
        match self.kind {
            ModelKind::Arx => arx::forward(params, features),
            _ => neural::forward(self.kind, self.arch, (self.m, self.n, self.k), params, features),
        }
    }

    /// Forward pass with the model's own parameters lifted into `S`.
    pub fn forward<S: Scalar>(&self, features: &[S]) -> S {
        if self.kind == ModelKind::Arx {
            // constant weights keep the tape short
            let mut acc = S::lift(self.params[0]);
            for (&w, &u) in self.params[1..].iter().zip(features) {
                acc = acc + u * w;
            }
            return acc;
        }
        let lifted: Vec<S> = self.params.iter().map(|&p| S::lift(p)).collect();
        self.forward_with(&lifted, features)
    }

    /// Deterministic one-step prediction.
    pub fn predict_one(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim() {
            return Err(Error::Arity {
                expected: self.feature_dim(),
                got: features.len(),
            });
        }
        Ok(self.forward(features))
    }

    /// Mean squared one-step error over `data`.
    pub fn evaluate_mse(&self, data: &LaggedDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(domain("cannot evaluate on an empty dataset"));
        }
        if data.lags() != (self.m, self.n) || data.num_exogenous() != self.k {
            return Err(domain(format!(
                "dataset layout (m, n, K) = ({}, {}, {}) does not match model ({}, {}, {})",
                data.lags().0,
                data.lags().1,
                data.num_exogenous(),
                self.m,
                self.n,
                self.k
            )));
        }
        Ok(mse_with(|f| self.forward(f), data))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Unsupported(format!(
                "model schema version {}",
                doc.schema_version
            )));
        }
        let m = doc.model;
        let scaler = m.scaler.clone();
        Ok(Self::from_parts(m.kind, (m.m, m.n, m.k), m.arch, m.params, m.training)?.with_scaler(scaler))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }
}

pub(crate) fn mse_with(predict: impl Fn(&[f64]) -> f64, data: &LaggedDataset) -> f64 {
    let sum: f64 = data
        .features()
        .iter()
        .zip(data.targets())
        .map(|(f, &y)| (predict(f) - y).powi(2))
        .sum();
    sum / data.len() as f64
}

/// Free-function form of [`ForecastModel::predict_one`].
pub fn predict_one(model: &ForecastModel, features: &[f64]) -> Result<f64> {
    model.predict_one(features)
}

/// Free-function form of [`ForecastModel::evaluate_mse`].
pub fn evaluate_mse(model: &ForecastModel, data: &LaggedDataset) -> Result<f64> {
    model.evaluate_mse(data)
}
