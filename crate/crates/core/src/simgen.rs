//! Seeded synthetic series: a linear ARX(1,1) process and a nonlinear process
//! with `tanh`, a 1.5-power term, squared exogenous drivers and
//! target/exogenous interactions.
//!
//! Both start from zero initial values, draw `z` i.i.d. standard normal and
//! add Gaussian noise. No burn-in is discarded.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::SeriesSet;
use crate::error::{domain, Error, Result};

/// `x_t = α x_{t-1} + Σ_k β_k z_{k,t-1} + ε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGenSpec {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub len: usize,
    pub seed: u64,
}

impl LinearGenSpec {
    /// α = 0.6, β = (0.2, 0.5), σ = 0.1, T = 200.
    pub fn reference(seed: u64) -> Self {
        Self {
            alpha: 0.6,
            beta: vec![0.2, 0.5],
            sigma: 0.1,
            len: 200,
            seed,
        }
    }

    /// Stationary variance `(Σβ² + σ²) / (1 − α²)`.
    pub fn stationary_variance(&self) -> f64 {
        (self.beta.iter().map(|b| b * b).sum::<f64>() + self.sigma * self.sigma) / (1.0 - self.alpha * self.alpha)
    }
}

/// How `x^1.5` treats negative bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerConvention {
    /// `sign(x)·|x|^p`.
    #[default]
    SignPreserving,
    /// `max(x, 0)^p`.
    ClampAtZero,
    /// Plain `powf`; negative bases yield NaN and fail generation.
    Raw,
}

impl PowerConvention {
    pub fn apply(self, v: f64, p: f64) -> f64 {
        match self {
            PowerConvention::SignPreserving => v.signum() * v.abs().powf(p),
            PowerConvention::ClampAtZero => v.max(0.0).powf(p),
            PowerConvention::Raw => v.powf(p),
        }
    }
}

/// `x_t = a tanh(x_{t-1}) + b x_{t-2}^p + Σ β_k z_{k,t-1}² + c Σ_k x_{t-1} z_{k,t-2} + ε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearGenSpec {
    pub tanh_weight: f64,
    pub power_weight: f64,
    pub power: f64,
    pub beta: Vec<f64>,
    pub interaction_weight: f64,
    pub sigma: f64,
    pub len: usize,
    pub seed: u64,
    #[serde(default)]
    pub convention: PowerConvention,
}

impl NonlinearGenSpec {
    /// Weights 0.3, 0.1, power 1.5, β = (0.2, 0.5), interaction 0.05, σ = 0.1, T = 200.
    pub fn reference(seed: u64) -> Self {
        Self {
            tanh_weight: 0.3,
            power_weight: 0.1,
            power: 1.5,
            beta: vec![0.2, 0.5],
            interaction_weight: 0.05,
            sigma: 0.1,
            len: 200,
            seed,
            convention: PowerConvention::SignPreserving,
        }
    }
}

fn draw_exogenous(rng: &mut ChaCha8Rng, k: usize, len: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect()
}

/// Generates the linear design. `z` is drawn first, then the noise stream.
pub fn gen_linear(spec: &LinearGenSpec) -> Result<SeriesSet> {
    if !(spec.alpha.abs() < 1.0) {
        return Err(domain(format!("|alpha| must be < 1, got {}", spec.alpha)));
    }
    if !(spec.sigma >= 0.0) || spec.len < 2 || spec.beta.is_empty() {
        return Err(domain("need sigma ≥ 0, len ≥ 2 and at least one beta"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = draw_exogenous(&mut rng, spec.beta.len(), spec.len);
    let mut x = vec![0.0; spec.len];
    for t in 1..spec.len {
        let eps: f64 = StandardNormal.sample(&mut rng);
        let drive: f64 = spec.beta.iter().zip(&z).map(|(b, zk)| b * zk[t - 1]).sum();
        x[t] = spec.alpha * x[t - 1] + drive + spec.sigma * eps;
    }
    SeriesSet::new(x, z)
}

/// Generates the nonlinear design.
pub fn gen_nonlinear(spec: &NonlinearGenSpec) -> Result<SeriesSet> {
    if spec.len < 3 || !(spec.sigma >= 0.0) || spec.beta.is_empty() {
        return Err(domain("need len ≥ 3, sigma ≥ 0 and at least one beta"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = draw_exogenous(&mut rng, spec.beta.len(), spec.len);
    let mut x = vec![0.0; spec.len];
    for t in 1..spec.len {
        let eps: f64 = StandardNormal.sample(&mut rng);
        let x1 = x[t - 1];
        let x2 = if t >= 2 { x[t - 2] } else { 0.0 };
        let squares: f64 = spec.beta.iter().zip(&z).map(|(b, zk)| b * zk[t - 1] * zk[t - 1]).sum();
        let interaction: f64 = if t >= 2 { z.iter().map(|zk| x1 * zk[t - 2]).sum() } else { 0.0 };
        let v = spec.tanh_weight * x1.tanh()
            + spec.power_weight * spec.convention.apply(x2, spec.power)
            + squares
            + spec.interaction_weight * interaction
            + spec.sigma * eps;
        if !v.is_finite() {
            return Err(Error::Domain(format!("generation produced a non-finite value at t={t}")));
        }
        x[t] = v;
    }
    SeriesSet::new(x, z)
}

/// Provenance sidecar written next to generated CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "design", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Linear(LinearGenSpec),
    Nonlinear(NonlinearGenSpec),
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<SeriesSet> {
        match self {
            GeneratorSpec::Linear(s) => gen_linear(s),
            GeneratorSpec::Nonlinear(s) => gen_nonlinear(s),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            GeneratorSpec::Linear(s) => s.seed,
            GeneratorSpec::Nonlinear(s) => s.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            GeneratorSpec::Linear(s) => s.seed = seed,
            GeneratorSpec::Nonlinear(s) => s.seed = seed,
        }
        self
    }
}

/// Sample mean and (population) variance.
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_lagged_dataset;
    use crate::forecast::fit_arx;

    #[test]
    fn zero_dynamics() {
        let s = gen_linear(&LinearGenSpec {
            sigma: 0.0,
            beta: vec![0.0, 0.0],
            ..LinearGenSpec::reference(1)
        })
        .unwrap();
        assert!(s.x().iter().all(|&v| v == 0.0));
        let s = gen_nonlinear(&NonlinearGenSpec {
            sigma: 0.0,
            beta: vec![0.0, 0.0],
            interaction_weight: 0.0,
            ..NonlinearGenSpec::reference(1)
        })
        .unwrap();
        assert!(s.x().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_determinism() {
        assert_eq!(gen_linear(&LinearGenSpec::reference(9)).unwrap(), gen_linear(&LinearGenSpec::reference(9)).unwrap());
        assert_ne!(gen_linear(&LinearGenSpec::reference(9)).unwrap(), gen_linear(&LinearGenSpec::reference(10)).unwrap());
        assert_eq!(
            gen_nonlinear(&NonlinearGenSpec::reference(9)).unwrap(),
            gen_nonlinear(&NonlinearGenSpec::reference(9)).unwrap()
        );
    }

    #[test]
    fn noise_free_linear_is_recovered_by_ols() {
        let s = gen_linear(&LinearGenSpec { sigma: 0.0, ..LinearGenSpec::reference(4) }).unwrap();
        let c = fit_arx(&make_lagged_dataset(&s, 1, 1).unwrap()).unwrap().arx_coefficients().unwrap();
        for (got, want) in [(c.x[0], 0.6), (c.z[0][0], 0.2), (c.z[1][0], 0.5)] {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn exogenous_series_are_uncorrelated() {
        for seed in 0..20 {
            let s = gen_linear(&LinearGenSpec::reference(seed)).unwrap();
            let (m1, v1) = mean_var(&s.z()[0]);
            let (m2, v2) = mean_var(&s.z()[1]);
            let cov = s.z()[0].iter().zip(&s.z()[1]).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / 200.0;
            assert!((cov / (v1 * v2).sqrt()).abs() <= 0.2, "seed {seed}");
        }
    }

    #[test]
    fn nonlinear_square_terms_are_nonnegative() {
        let spec = NonlinearGenSpec::reference(2);
        let s = gen_nonlinear(&spec).unwrap();
        for t in 1..s.len() {
            let sq: f64 = spec.beta.iter().zip(s.z()).map(|(b, zk)| b * zk[t - 1].powi(2)).sum();
            assert!(sq >= 0.0);
        }
    }

    #[test]
    fn nonlinear_statistics_band() {
        // band over seeds 0..200 (computed): mean 1.0123 ± 0.0812, variance 0.6496 ± 0.1698
        let (mut means, mut vars) = (Vec::new(), Vec::new());
        for seed in 0..200 {
            let (m, v) = mean_var(gen_nonlinear(&NonlinearGenSpec::reference(seed)).unwrap().x());
            means.push(m);
            vars.push(v);
        }
        let (mm, mv) = mean_var(&means);
        let (vm, vv) = mean_var(&vars);
        assert!((mm - 1.0123).abs() < 1e-3 && (mv.sqrt() - 0.0812).abs() < 1e-3);
        assert!((vm - 0.6496).abs() < 1e-3 && (vv.sqrt() - 0.1698).abs() < 1e-3);
        // a single reported run (mean 0.963, variance 0.750) is plausible under it
        assert!((0.963 - mm).abs() < 2.0 * mv.sqrt());
        assert!((0.750 - vm).abs() < 2.0 * vv.sqrt());
    }

    #[test]
    fn power_conventions() {
        assert_eq!(PowerConvention::SignPreserving.apply(-4.0, 1.5), -8.0);
        assert_eq!(PowerConvention::ClampAtZero.apply(-4.0, 1.5), 0.0);
        assert!(PowerConvention::Raw.apply(-4.0, 1.5).is_nan());
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_linear(&LinearGenSpec { alpha: 1.0, ..LinearGenSpec::reference(0) }).is_err());
        assert!(gen_linear(&LinearGenSpec { len: 1, ..LinearGenSpec::reference(0) }).is_err());
        assert!(gen_nonlinear(&NonlinearGenSpec { len: 2, ..NonlinearGenSpec::reference(0) }).is_err());
    }

    #[test]
    fn spec_sidecar_round_trips() {
        let g = GeneratorSpec::Nonlinear(NonlinearGenSpec::reference(3));
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains("\"design\":\"nonlinear\""));
        let back: GeneratorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }
}
