//! Counterfactual search over the exogenous inputs of a forecast window.
//!
//! For an anchor `T` and horizon `q`, the intervention grid `z̃` covers the
//! exogenous values at times `T-q .. T-1` (one row per variable, one column
//! per time, oldest first). The rollout predicts `x̂_{T-q} .. x̂_T` recursively:
//! the first prediction uses only pre-window history, each later one feeds
//! the previous predictions back as autoregressive inputs and reads `z̃` for
//! exogenous lags inside the window and observed `z` for lags before it.
//!
//! The objective is
//!
//! ```text
//! L(z̃) = Σ_{t=T-q}^{T} w_t (x̄_t − x̂_t)² + λ d(z̃, z)
//! ```
//!
//! over the masked cells. `x̂_{T-q}` never depends on `z̃`, so its term is a
//! constant offset; it is kept so reported values match the definition.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::data::{feature_row, SeriesSet};
use crate::error::{domain, Error, Result};
use crate::forecast::ForecastModel;

/// Weight vector generator for the `q + 1` fit terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `1/(q+1)` everywhere.
    Uniform,
    /// `r^i / Σ_j r^j` for `i = 1..q+1`, oldest slot first.
    Exponential { r: f64 },
    /// Only the final prediction counts.
    FinalOnly,
}

/// Builds the length `q + 1` weight vector for `scheme`.
pub fn make_weights(scheme: WeightScheme, q: usize) -> Result<Vec<f64>> {
    if q < 1 {
        return Err(domain("horizon q must be at least 1"));
    }
    Ok(match scheme {
        WeightScheme::Uniform => vec![1.0 / (q + 1) as f64; q + 1],
        WeightScheme::Exponential { r } => {
            if !(r > 0.0 && r < 1.0) {
                return Err(domain(format!("exponential decay r must lie in (0, 1), got {r}")));
            }
            let powers: Vec<f64> = (1..=q as i32 + 1).map(|i| r.powi(i)).collect();
            let sum: f64 = powers.iter().sum();
            powers.into_iter().map(|p| p / sum).collect()
        }
        WeightScheme::FinalOnly => {
            let mut w = vec![0.0; q + 1];
            w[q] = 1.0;
            w
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// `Σ δ (z̃ − z)²`.
    #[default]
    WeightedSquared,
    /// `Σ √(δ (z̃ − z)²)`; subgradient 0 where `z̃ = z`.
    WeightedEuclidean,
}

/// Source of the `x` values preceding the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    #[default]
    ObservedHistory,
    /// One-step predictions from observed inputs replace observed `x` before the window.
    PredictedHistory,
}

/// Mask with every cell of the listed variables optimizable.
pub fn restrict_mask(k: usize, q: usize, keep: &[usize]) -> Result<Vec<Vec<bool>>> {
    if keep.is_empty() {
        return Err(domain("keep set must name at least one variable"));
    }
    if let Some(&bad) = keep.iter().find(|&&v| v >= k) {
        return Err(domain(format!("variable index {bad} out of range for K={k}")));
    }
    Ok((0..k).map(|v| vec![keep.contains(&v); q]).collect())
}

/// Everything that defines one counterfactual instance apart from the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    /// Zero-based index of the last predicted point `T`.
    pub anchor: usize,
    pub q: usize,
    /// `x̄_{T-q} .. x̄_T`.
    pub target: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    #[serde(default)]
    pub distance: DistanceKind,
    /// Per-cell costs `δ_{k,t}` (K × q); all ones when absent.
    #[serde(default)]
    pub delta: Option<Vec<Vec<f64>>>,
    /// Optimizable cells (K × q); all true when absent.
    #[serde(default)]
    pub mask: Option<Vec<Vec<bool>>>,
    #[serde(default)]
    pub boundary: BoundaryMode,
}

/// The fixed part of a rollout: model, data, anchor and pre-window history.
#[derive(Debug, Clone)]
struct Window<'a> {
    model: &'a ForecastModel,
    series: &'a SeriesSet,
    anchor: usize,
    q: usize,
    /// `x` values used for times before the window, indexed by absolute time.
    history: Vec<f64>,
}

impl<'a> Window<'a> {
    fn new(model: &'a ForecastModel, series: &'a SeriesSet, anchor: usize, q: usize, boundary: BoundaryMode) -> Result<Self> {
        if q < 1 {
            return Err(domain("horizon q must be at least 1"));
        }
        if model.num_exogenous() != series.num_exogenous() {
            return Err(domain(format!(
                "model expects K={} exogenous series, data has {}",
                model.num_exogenous(),
                series.num_exogenous()
            )));
        }
        if anchor >= series.len() {
            return Err(domain(format!("anchor {anchor} beyond series of length {}", series.len())));
        }
        let (m, n) = model.lags();
        let lag = m.max(n);
        // first prediction at anchor-q needs lag points of history
        if anchor < q + lag {
            return Err(domain(format!(
                "anchor {anchor} leaves too little history for q={q} and max lag {lag}"
            )));
        }
        let start = anchor - q;
        let mut history = series.x()[..start].to_vec();
        if boundary == BoundaryMode::PredictedHistory {
            if start < m + lag {
                return Err(domain(format!(
                    "predicted-history boundary needs {} points before the window, have {start}",
                    m + lag
                )));
            }
            let k = series.num_exogenous();
            for (t, h) in history.iter_mut().enumerate().skip(start - m) {
                let f = feature_row(|i| series.x()[i], |v, i| series.z()[v][i], t, m, n, k);
                *h = model.forward(&f);
            }
        }
        Ok(Self {
            model,
            series,
            anchor,
            q,
            history,
        })
    }

    fn start(&self) -> usize {
        self.anchor - self.q
    }

    /// Window of observed `z`, variable-major flat (`k * q + j`).
    fn observed_flat(&self) -> Vec<f64> {
        let s = self.start();
        self.series
            .z()
            .iter()
            .flat_map(|zk| zk[s..self.anchor].iter().copied())
            .collect()
    }

    fn rollout<S: Scalar>(&self, z_tilde: &[S]) -> Vec<S> {
        let (m, n) = self.model.lags();
        let k = self.series.num_exogenous();
        let start = self.start();
        let mut preds: Vec<S> = Vec::with_capacity(self.q + 1);
        for t in start..=self.anchor {
            let feats = {
                let preds = &preds;
                feature_row(
                    |i| {
                        if i >= start {
                            preds[i - start]
                        } else {
                            S::lift(self.history[i])
                        }
                    },
                    |v, i| {
                        if i >= start {
                            z_tilde[v * self.q + (i - start)]
                        } else {
                            S::lift(self.series.z()[v][i])
                        }
                    },
                    t,
                    m,
                    n,
                    k,
                )
            };
            preds.push(self.model.forward(&feats));
        }
        preds
    }
}

/// Objective value split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub fit: f64,
    pub dist: f64,
}

/// A validated counterfactual instance.
#[derive(Debug, Clone)]
pub struct CeProblem<'a> {
    window: Window<'a>,
    spec: ProblemSpec,
    observed: Vec<f64>,
    delta: Vec<f64>,
    mask: Vec<bool>,
}

fn flatten_grid<T: Copy>(grid: &[Vec<T>], k: usize, q: usize, what: &str) -> Result<Vec<T>> {
    if grid.len() != k || grid.iter().any(|r| r.len() != q) {
        return Err(domain(format!("{what} must be a {k} × {q} grid")));
    }
    Ok(grid.iter().flatten().copied().collect())
}

impl<'a> CeProblem<'a> {
    pub fn new(model: &'a ForecastModel, series: &'a SeriesSet, spec: ProblemSpec) -> Result<Self> {
        let window = Window::new(model, series, spec.anchor, spec.q, spec.boundary)?;
        let (k, q) = (series.num_exogenous(), spec.q);
        if spec.target.len() != q + 1 || spec.weights.len() != q + 1 {
            return Err(domain(format!("target and weights need q+1 = {} entries", q + 1)));
        }
        if spec.target.iter().any(|v| !v.is_finite()) {
            return Err(domain("target values must be finite"));
        }
        if spec.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || !spec.weights.iter().any(|&w| w > 0.0) {
            return Err(domain("weights must be non-negative with at least one positive"));
        }
        if !(spec.lambda >= 0.0) || !spec.lambda.is_finite() {
            return Err(domain(format!("lambda must be finite and ≥ 0, got {}", spec.lambda)));
        }
        let delta = match &spec.delta {
            Some(d) => flatten_grid(d, k, q, "delta")?,
            None => vec![1.0; k * q],
        };
        if delta.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(domain("distance weights must be strictly positive"));
        }
        let mask = match &spec.mask {
            Some(m) => flatten_grid(m, k, q, "mask")?,
            None => vec![true; k * q],
        };
        if !mask.iter().any(|&b| b) {
            return Err(domain("mask must contain at least one optimizable cell"));
        }
        let observed = window.observed_flat();
        Ok(Self {
            window,
            spec,
            observed,
            delta,
            mask,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn model(&self) -> &ForecastModel {
        self.window.model
    }

    pub fn series(&self) -> &SeriesSet {
        self.window.series
    }

    pub fn num_exogenous(&self) -> usize {
        self.window.series.num_exogenous()
    }

    pub fn q(&self) -> usize {
        self.spec.q
    }

    /// Observed `z` over the window, one row per variable.
    pub fn observed(&self) -> Vec<Vec<f64>> {
        self.unflatten(&self.observed)
    }

    pub fn mask(&self) -> Vec<Vec<bool>> {
        self.mask.chunks(self.spec.q).map(<[bool]>::to_vec).collect()
    }

    pub(crate) fn mask_flat(&self) -> &[bool] {
        &self.mask
    }

    #[cfg(test)]
    pub(crate) fn observed_flat(&self) -> &[f64] {
        &self.observed
    }

    /// `x` values used before the window, indexed by absolute time.
    pub(crate) fn boundary_history(&self) -> &[f64] {
        &self.window.history
    }

    pub(crate) fn unflatten(&self, flat: &[f64]) -> Vec<Vec<f64>> {
        flat.chunks(self.spec.q).map(<[f64]>::to_vec).collect()
    }

    pub(crate) fn flatten(&self, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
        flatten_grid(grid, self.num_exogenous(), self.spec.q, "intervention grid")
    }

    pub(crate) fn rollout_flat<S: Scalar>(&self, z_tilde: &[S]) -> Vec<S> {
        self.window.rollout(z_tilde)
    }

    /// `(total, fit, dist)` for a flat grid.
    pub(crate) fn objective_flat<S: Scalar>(&self, z_tilde: &[S]) -> (S, S, S) {
        let preds = self.rollout_flat(z_tilde);
        let fit = crate::autodiff::weighted_squared_error(&preds, &self.spec.target, &self.spec.weights);
        let mut dist = S::lift(0.0);
        for (((&z, &obs), &free), &delta) in z_tilde.iter().zip(&self.observed).zip(&self.mask).zip(&self.delta) {
            if !free {
                continue;
            }
            let d = z - obs;
            dist = dist
                + match self.spec.distance {
                    DistanceKind::WeightedSquared => d.square() * delta,
                    DistanceKind::WeightedEuclidean => d.abs() * delta.sqrt(),
                };
        }
        (fit + dist * self.spec.lambda, fit, dist)
    }

    /// Recursive predictions `x̂_{T-q} .. x̂_T` under the intervention `z_tilde`.
    pub fn rollout(&self, z_tilde: &[Vec<f64>]) -> Result<Vec<f64>> {
        let flat = self.flatten(z_tilde)?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(domain("intervention grid must be finite"));
        }
        let preds = self.rollout_flat(&flat);
        if let Some(step) = preds.iter().position(|p| !p.is_finite()) {
            return Err(Error::RolloutDiverged { step });
        }
        Ok(preds)
    }

    /// Rollout with no intervention.
    pub fn baseline_rollout(&self) -> Vec<f64> {
        self.rollout_flat(&self.observed)
    }

    pub fn objective(&self, z_tilde: &[Vec<f64>]) -> Result<ObjectiveValue> {
        self.rollout(z_tilde)?;
        let (total, fit, dist) = self.objective_flat(&self.flatten(z_tilde)?);
        Ok(ObjectiveValue { total, fit, dist })
    }

    /// Objective value and its gradient on the masked cells (zero elsewhere).
    pub(crate) fn value_and_gradient(&self, z_tilde: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::with_capacity(256);
        let vars: Vec<Var<'_>> = z_tilde
            .iter()
            .zip(&self.mask)
            .map(|(&v, &free)| if free { tape.var(v) } else { Var::constant(v) })
            .collect();
        let (total, _, _) = self.objective_flat(&vars);
        tape.check_finite()?;
        let g = tape.gradient(total);
        Ok((total.value(), g.wrt_all(&vars)))
    }

    /// Gradient of the total objective, one row per variable.
    pub fn gradient(&self, z_tilde: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (_, g) = self.value_and_gradient(&self.flatten(z_tilde)?)?;
        Ok(self.unflatten(&g))
    }
}

/// Plain recursive forecast over `[anchor-q, anchor]` with observed inputs.
pub fn baseline_rollout(
    model: &ForecastModel,
    series: &SeriesSet,
    anchor: usize,
    q: usize,
    boundary: BoundaryMode,
) -> Result<Vec<f64>> {
    let w = Window::new(model, series, anchor, q, boundary)?;
    Ok(w.rollout(&w.observed_flat()))
}

/// Settings for [`solve_ce`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_iterations: usize,
    /// Stop once `|Δ objective|` stays below this for 10 consecutive iterations.
    pub tolerance: f64,
    /// Recorded for provenance; the solver is deterministic.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.1,
            max_iterations: 5000,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

const PATIENCE: usize = 10;
/// An iterate whose objective exceeds this multiple of the starting value
/// restarts from the best iterate with half the step.
const BLOWUP_FACTOR: f64 = 10.0;
const MAX_HALVINGS: usize = 60;

/// Optimized intervention and its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeSolution {
    pub z_tilde: Vec<Vec<f64>>,
    pub rollout: Vec<f64>,
    pub objective: ObjectiveValue,
    /// Objective at each evaluated iterate, starting from the observed `z`.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Step size in effect at the end (smaller than configured after restarts).
    pub final_learning_rate: f64,
    #[serde(default)]
    pub metrics: Option<crate::analysis::MetricsReport>,
}

/// Momentum gradient descent from the observed `z`, returning the best iterate.
pub fn solve_ce(problem: &CeProblem<'_>, opt: &OptimizerConfig) -> Result<CeSolution> {
    if !(opt.learning_rate > 0.0) {
        return Err(domain("learning rate must be positive"));
    }
    if !(0.0..1.0).contains(&opt.momentum) {
        return Err(domain("momentum must lie in [0, 1)"));
    }
    let mut z = problem.observed.clone();
    let mut velocity = vec![0.0; z.len()];
    let mut lr = opt.learning_rate;
    let mut trace = Vec::with_capacity(opt.max_iterations.min(10_000) + 1);

    let (mut value, mut grad) = problem.value_and_gradient(&z)?;
    if !value.is_finite() {
        return Err(Error::OptimizerDiverged { iteration: 0, trace });
    }
    trace.push(value);
    let start_value = value;
    let mut best = (value, z.clone());
    let mut calm = 0;
    let mut converged = false;
    let mut halvings = 0;
    let mut iterations = 0;

    while iterations < opt.max_iterations {
        iterations += 1;
        for i in 0..z.len() {
            if problem.mask[i] {
                velocity[i] = opt.momentum * velocity[i] - lr * grad[i];
                z[i] += velocity[i];
            }
        }
        let (next, next_grad) = match problem.value_and_gradient(&z) {
            Ok(r) if r.0.is_finite() => r,
            _ => (f64::INFINITY, Vec::new()),
        };
        if !next.is_finite() || next > BLOWUP_FACTOR * start_value + 1e-12 {
            halvings += 1;
            if halvings > MAX_HALVINGS {
                trace.push(next);
                return Err(Error::OptimizerDiverged { iteration: iterations, trace });
            }
            lr *= 0.5;
            z.clone_from(&best.1);
            velocity.iter_mut().for_each(|v| *v = 0.0);
            let (v, g) = problem.value_and_gradient(&z)?;
            value = v;
            grad = g;
            trace.push(next);
            calm = 0;
            continue;
        }
        trace.push(next);
        if next < best.0 {
            best = (next, z.clone());
        }
        if (next - value).abs() < opt.tolerance {
            calm += 1;
        } else {
            calm = 0;
        }
        value = next;
        grad = next_grad;
        if calm >= PATIENCE {
            converged = true;
            break;
        }
    }

    let (_, z_best) = best;
    let rollout = problem.rollout_flat(&z_best);
    let (total, fit, dist) = problem.objective_flat(&z_best);
    Ok(CeSolution {
        z_tilde: problem.unflatten(&z_best),
        rollout,
        objective: ObjectiveValue { total, fit, dist },
        trace,
        converged,
        iterations,
        final_learning_rate: lr,
        metrics: None,
    })
}
