use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Architecture, ForecastModel, ModelKind, TrainingRecord};
use crate::autodiff::Scalar;
use crate::data::LaggedDataset;
use crate::error::{domain, Error, Result};

/// Coefficients of `x_t = c + Σ a_i x_{t-i} + Σ_k Σ_j b_{k,j} z_{k,t-j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArxCoefficients {
    pub intercept: f64,
    /// `a_1..a_m`, most recent lag first.
    pub x: Vec<f64>,
    /// `z[k] = b_{k,1}..b_{k,n}`.
    pub z: Vec<Vec<f64>>,
}

impl ArxCoefficients {
    pub(crate) fn shape(&self) -> Result<(usize, usize, usize)> {
        let m = self.x.len();
        let k = self.z.len();
        let n = self.z.first().map_or(0, Vec::len);
        if m == 0 || k == 0 || n == 0 || self.z.iter().any(|b| b.len() != n) {
            return Err(domain("ARX coefficients need m ≥ 1, K ≥ 1 and n ≥ 1 lags per variable"));
        }
        Ok((m, n, k))
    }

    pub(crate) fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(1 + self.x.len() + self.z.len() * self.z[0].len());
        p.push(self.intercept);
        p.extend(&self.x);
        for b in &self.z {
            p.extend(b);
        }
        p
    }

    pub(crate) fn from_params(p: &[f64], m: usize, n: usize, k: usize) -> Self {
        Self {
            intercept: p[0],
            x: p[1..=m].to_vec(),
            z: (0..k).map(|v| p[1 + m + v * n..1 + m + (v + 1) * n].to_vec()).collect(),
        }
    }
}

pub(super) fn forward<S: Scalar>(params: &[S], features: &[S]) -> S {
    params[1..]
        .iter()
        .zip(features)
        .fold(params[0], |acc, (&w, &u)| acc + w * u)
}

/// Ordinary least squares with intercept.
pub fn fit_arx(train: &LaggedDataset) -> Result<ForecastModel> {
    let (m, n) = train.lags();
    let k = train.num_exogenous();
    let cols = 1 + train.feature_dim();
    let rows = train.len();
    if rows < cols + 1 {
        return Err(domain(format!(
            "ARX fit needs at least {} rows, got {rows}",
            cols + 1
        )));
    }
    let design = DMatrix::from_fn(rows, cols, |r, c| {
        if c == 0 {
            1.0
        } else {
            train.features()[r][c - 1]
        }
    });
    let y = DVector::from_column_slice(train.targets());

    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let cutoff = f64::EPSILON * smax * rows.max(cols) as f64;
    if !(smin > cutoff) {
        return Err(Error::SingularDesign { condition });
    }
    let theta = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::Singular(e.to_string()))?;

    let residual = &y - &design * &theta;
    let train_mse = residual.norm_squared() / rows as f64;
    ForecastModel::from_parts(
        ModelKind::Arx,
        (m, n, k),
        Architecture::default(),
        theta.iter().copied().collect(),
        TrainingRecord {
            epochs: 0,
            learning_rate: 0.0,
            seed: 0,
            train_mse: Some(train_mse),
            test_mse: None,
            loss_checkpoints: Vec::new(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_lagged_dataset, SeriesSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_series(sigma: f64, len: usize, seed: u64) -> SeriesSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let z1: Vec<f64> = (0..len).map(|_| draw()).collect();
        let z2: Vec<f64> = (0..len).map(|_| draw()).collect();
        let mut x = vec![0.0; len];
        for t in 1..len {
            x[t] = 0.6 * x[t - 1] + 0.2 * z1[t - 1] + 0.5 * z2[t - 1] + sigma * draw();
        }
        SeriesSet::new(x, vec![z1, z2]).unwrap()
    }

    #[test]
    fn recovers_noise_free_coefficients() {
        let d = make_lagged_dataset(&linear_series(0.0, 200, 7), 1, 1).unwrap();
        let c = fit_arx(&d).unwrap().arx_coefficients().unwrap();
        assert!((c.x[0] - 0.6).abs() < 1e-6);
        assert!((c.z[0][0] - 0.2).abs() < 1e-6);
        assert!((c.z[1][0] - 0.5).abs() < 1e-6);
        assert!(c.intercept.abs() < 1e-6);
    }

    #[test]
    fn normal_equation_residual_is_tiny() {
        let d = make_lagged_dataset(&linear_series(0.1, 200, 3), 2, 2).unwrap();
        let model = fit_arx(&d).unwrap();
        let p = model.params();
        let mut grad = vec![0.0; p.len()];
        for (f, &y) in d.features().iter().zip(d.targets()) {
            let r = y - model.predict_one(f).unwrap();
            grad[0] += r;
            for (g, &u) in grad[1..].iter_mut().zip(f) {
                *g += r * u;
            }
        }
        assert!(grad.iter().all(|g| g.abs() <= 1e-8), "{grad:?}");
    }

    #[test]
    fn zero_targets_give_zero_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z2: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        // x must vary for a full-rank design; use an independent regressor as x lag source
        let x_lagged: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = SeriesSet::new(x_lagged, vec![z, z2]).unwrap();
        let mut d = make_lagged_dataset(&s, 1, 1).unwrap();
        d = zero_targets(d);
        let model = fit_arx(&d).unwrap();
        assert!(model.params().iter().all(|&p| p == 0.0), "{:?}", model.params());
    }

    fn zero_targets(d: LaggedDataset) -> LaggedDataset {
        LaggedDataset::with_targets(d, |_| 0.0)
    }

    #[test]
    fn noisy_fit_within_three_standard_errors() {
        let sigma = 0.1;
        let d = make_lagged_dataset(&linear_series(sigma, 200, 11), 1, 1).unwrap();
        let c = fit_arx(&d).unwrap().arx_coefficients().unwrap();
        // SE_j = σ̂ sqrt([(XᵀX)⁻¹]_jj)
        let x = DMatrix::from_fn(d.len(), 4, |r, c| if c == 0 { 1.0 } else { d.features()[r][c - 1] });
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let theta = DVector::from_vec(vec![c.intercept, c.x[0], c.z[0][0], c.z[1][0]]);
        let resid = DVector::from_column_slice(d.targets()) - &x * &theta;
        let s2 = resid.norm_squared() / (d.len() - 4) as f64;
        let truth = [0.0, 0.6, 0.2, 0.5];
        for j in 0..4 {
            let se = (s2 * xtx_inv[(j, j)]).sqrt();
            assert!((theta[j] - truth[j]).abs() < 3.0 * se, "coef {j}: {} vs {}", theta[j], truth[j]);
        }
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let s = SeriesSet::new(vec![1.0; 20], vec![vec![2.0; 20]]).unwrap();
        let d = make_lagged_dataset(&s, 1, 1).unwrap();
        assert!(matches!(fit_arx(&d), Err(Error::SingularDesign { .. })));
        let short = make_lagged_dataset(&linear_series(0.1, 4, 0), 1, 1).unwrap();
        assert!(matches!(fit_arx(&short), Err(Error::Domain(_))));
    }
}
