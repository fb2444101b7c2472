//! Closed-form optimal intervention for linear ARX models.
//!
//! A linear rollout is affine in the intervention, so the window predictions
//! can be written as
//!
//! ```text
//! x̂ = A x + B_fix Z_fix + B_opt Z_opt + c
//! ```
//!
//! where `x` holds the `m` boundary values `x_{T-q-1} .. x_{T-q-m}`, `Z_fix`
//! the exogenous values before the window reachable through the lags, `Z_opt`
//! the in-window values, and `c` the intercept accumulated through the
//! recursion. Both `Z` vectors are time-major then variable
//! (`z_{T-q,1}, z_{T-q,2}, .., z_{T-1,K}`). For `m = n = 1` the matrices have
//! the familiar powers-of-α structure; higher lags fall out of the same
//! recursion.
//!
//! With weighted-squared distance and unit costs, the optimum solves the
//! ridge system `(B_optᵀ W B_opt + λI) Z* = B_optᵀ W r + λ Z_opt` with
//! `r = x̄ − A x − B_fix Z_fix − c`.

use nalgebra::{DMatrix, DVector};

use crate::ce::{CeProblem, DistanceKind};
use crate::error::{Error, Result};
use crate::forecast::ModelKind;

/// Matrices of the linear window system.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    /// `(q+1) × m`: effect of each boundary value, most recent first.
    pub a: DMatrix<f64>,
    /// Boundary values `x_{T-q-1} .. x_{T-q-m}`.
    pub x: DVector<f64>,
    /// `(q+1) × (K n)`.
    pub b_fix: DMatrix<f64>,
    /// `z` at `T-q-1 .. T-q-n`, time-major.
    pub z_fix: DVector<f64>,
    /// `(q+1) × (K q)`.
    pub b_opt: DMatrix<f64>,
    /// Observed in-window `z`, time-major.
    pub z_opt: DVector<f64>,
    /// Accumulated intercept per prediction.
    pub intercept: DVector<f64>,
    /// Diagonal weights.
    pub w: DMatrix<f64>,
    pub x_bar: DVector<f64>,
    pub k: usize,
    pub q: usize,
}

/// Affine form over (boundary x, fixed z, optimized z) plus a constant.
#[derive(Clone)]
struct Affine {
    x: Vec<f64>,
    fix: Vec<f64>,
    opt: Vec<f64>,
    c: f64,
}

impl Affine {
    fn zero(m: usize, nfix: usize, nopt: usize) -> Self {
        Self {
            x: vec![0.0; m],
            fix: vec![0.0; nfix],
            opt: vec![0.0; nopt],
            c: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &Affine, s: f64) {
        let axpy = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(u, v)| *u += s * v);
        axpy(&mut self.x, &other.x);
        axpy(&mut self.fix, &other.fix);
        axpy(&mut self.opt, &other.opt);
        self.c += s * other.c;
    }
}

impl LinearSystem {
    /// Transcribes a linear ARX problem into matrix form.
    pub fn build(problem: &CeProblem<'_>) -> Result<Self> {
        let model = problem.model();
        let coef = model
            .arx_coefficients()
            .filter(|_| model.kind() == ModelKind::Arx)
            .ok_or_else(|| Error::Unsupported(format!("closed form needs a linear ARX model, got {}", model.kind())))?;
        let spec = problem.spec();
        if spec.distance != DistanceKind::WeightedSquared {
            return Err(Error::Unsupported("closed form needs the weighted-squared distance".into()));
        }
        if spec.delta.as_ref().is_some_and(|d| d.iter().flatten().any(|&v| v != 1.0)) {
            return Err(Error::Unsupported("closed form needs unit distance weights".into()));
        }
        if problem.mask_flat().iter().any(|&b| !b) {
            return Err(Error::Unsupported("closed form needs every cell optimizable".into()));
        }

        let (m, n) = model.lags();
        let k = problem.num_exogenous();
        let q = spec.q;
        let start = spec.anchor - q;
        let (nfix, nopt) = (k * n, k * q);

        let mut preds: Vec<Affine> = Vec::with_capacity(q + 1);
        for i in 0..=q {
            let t = start + i;
            let mut row = Affine::zero(m, nfix, nopt);
            row.c = coef.intercept;
            for (lag, &a) in (1..=m).zip(&coef.x) {
                let s = t - lag;
                if s >= start {
                    let prev = preds[s - start].clone();
                    row.add_scaled(&prev, a);
                } else {
                    row.x[start - 1 - s] += a;
                }
            }
            for (var, b) in coef.z.iter().enumerate() {
                for (lag, &bv) in (1..=n).zip(b) {
                    let s = t - lag;
                    if s >= start {
                        row.opt[(s - start) * k + var] += bv;
                    } else {
                        row.fix[(start - 1 - s) * k + var] += bv;
                    }
                }
            }
            preds.push(row);
        }

        let series = problem.series();
        let history = problem.boundary_history();
        let x = DVector::from_fn(m, |j, _| history[start - 1 - j]);
        let z_fix = DVector::from_fn(nfix, |i, _| {
            let (back, var) = (i / k, i % k);
            series.z()[var][start - 1 - back]
        });
        let z_opt = DVector::from_fn(nopt, |i, _| {
            let (j, var) = (i / k, i % k);
            series.z()[var][start + j]
        });
        Ok(Self {
            a: DMatrix::from_fn(q + 1, m, |i, j| preds[i].x[j]),
            x,
            b_fix: DMatrix::from_fn(q + 1, nfix, |i, j| preds[i].fix[j]),
            z_fix,
            b_opt: DMatrix::from_fn(q + 1, nopt, |i, j| preds[i].opt[j]),
            z_opt,
            intercept: DVector::from_fn(q + 1, |i, _| preds[i].c),
            w: DMatrix::from_diagonal(&DVector::from_column_slice(&spec.weights)),
            x_bar: DVector::from_column_slice(&spec.target),
            k,
            q,
        })
    }

    /// Predictions `A x + B_fix Z_fix + B_opt z_opt + c` for a time-major intervention.
    pub fn predict(&self, z_opt: &DVector<f64>) -> DVector<f64> {
        &self.a * &self.x + &self.b_fix * &self.z_fix + &self.b_opt * z_opt + &self.intercept
    }

    /// Residual `r = x̄ − A x − B_fix Z_fix − c`.
    pub fn residual(&self) -> DVector<f64> {
        &self.x_bar - &self.a * &self.x - &self.b_fix * &self.z_fix - &self.intercept
    }

    /// For `m = 1`, the square lower-triangular form with entry `(i, j) = α^{i-j+1}`
    /// acting on `(x_{T-q-1}, 0, .., 0)`.
    pub fn square_a(&self) -> Option<DMatrix<f64>> {
        if self.a.ncols() != 1 {
            return None;
        }
        let alpha = self.a[(0, 0)];
        Some(DMatrix::from_fn(self.q + 1, self.q + 1, |i, j| {
            if i >= j {
                alpha.powi((i - j + 1) as i32)
            } else {
                0.0
            }
        }))
    }

    fn normal_matrix(&self, lambda: f64) -> DMatrix<f64> {
        let bt_w = self.b_opt.transpose() * &self.w;
        &bt_w * &self.b_opt + DMatrix::identity(self.b_opt.ncols(), self.b_opt.ncols()) * lambda
    }

    fn normal_rhs(&self, lambda: f64) -> DVector<f64> {
        self.b_opt.transpose() * &self.w * self.residual() + &self.z_opt * lambda
    }

    /// Largest entry of `(B_optᵀWB_opt + λI) z − B_optᵀWr − λ Z_opt`.
    pub fn stationarity_residual(&self, z: &DVector<f64>, lambda: f64) -> f64 {
        (self.normal_matrix(lambda) * z - self.normal_rhs(lambda)).amax()
    }

    /// Objective `‖W^{1/2}(r − B_opt z)‖² + λ‖z − Z_opt‖²`.
    pub fn objective(&self, z: &DVector<f64>, lambda: f64) -> f64 {
        let e = self.residual() - &self.b_opt * z;
        let fit: f64 = e.iter().zip(self.w.diagonal().iter()).map(|(v, w)| w * v * v).sum();
        fit + lambda * (z - &self.z_opt).norm_squared()
    }

    /// Converts a time-major vector into a `K × q` grid.
    pub fn to_grid(&self, v: &DVector<f64>) -> Vec<Vec<f64>> {
        (0..self.k).map(|var| (0..self.q).map(|j| v[j * self.k + var]).collect()).collect()
    }

    /// Converts a `K × q` grid into a time-major vector.
    pub fn from_grid(&self, grid: &[Vec<f64>]) -> DVector<f64> {
        DVector::from_fn(self.k * self.q, |i, _| grid[i % self.k][i / self.k])
    }
}

/// Builds the matrix form of a linear ARX problem.
pub fn build_matrices(problem: &CeProblem<'_>) -> Result<LinearSystem> {
    LinearSystem::build(problem)
}

/// Solves the regularized normal equations by Cholesky factorization.
pub fn solve_closed_form(sys: &LinearSystem, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(crate::error::domain("lambda must be ≥ 0"));
    }
    let chol = sys.normal_matrix(lambda).cholesky().ok_or_else(|| {
        Error::Singular("regularized normal matrix is not positive definite; use lambda > 0".into())
    })?;
    Ok(chol.solve(&sys.normal_rhs(lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ce::{make_weights, solve_ce, BoundaryMode, OptimizerConfig, ProblemSpec, WeightScheme};
    use crate::data::SeriesSet;
    use crate::forecast::{ArxCoefficients, ForecastModel};
    use crate::simgen::{gen_linear, LinearGenSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arx(alpha: &[f64], beta: &[Vec<f64>], c: f64) -> ForecastModel {
        ForecastModel::arx(ArxCoefficients {
            intercept: c,
            x: alpha.to_vec(),
            z: beta.to_vec(),
        })
        .unwrap()
    }

    fn spec(anchor: usize, q: usize, target: Vec<f64>, scheme: WeightScheme, lambda: f64) -> ProblemSpec {
        ProblemSpec {
            anchor,
            q,
            target,
            weights: make_weights(scheme, q).unwrap(),
            lambda,
            distance: DistanceKind::WeightedSquared,
            delta: None,
            mask: None,
            boundary: BoundaryMode::ObservedHistory,
        }
    }

    #[test]
    fn q1_matrices() {
        let s = gen_linear(&LinearGenSpec::reference(1)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.0);
        let p = CeProblem::new(&model, &s, spec(20, 1, vec![2.0; 2], WeightScheme::Uniform, 1.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        assert!((sys.a[(0, 0)] - 0.6).abs() < 1e-15 && (sys.a[(1, 0)] - 0.36).abs() < 1e-15);
        assert_eq!(sys.b_opt, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.2, 0.5]));
        assert!((sys.b_fix[(1, 1)] - 0.3).abs() < 1e-15);
        assert_eq!(sys.b_fix[(0, 0)], 0.2);
        let sq = sys.square_a().unwrap();
        let e1 = DVector::from_vec(vec![sys.x[0], 0.0]);
        assert!((sq * e1 - &sys.a * &sys.x).amax() < 1e-15);
    }

    #[test]
    fn causality_and_square_form() {
        let s = gen_linear(&LinearGenSpec::reference(2)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.0);
        let q = 5;
        let p = CeProblem::new(&model, &s, spec(60, q, vec![2.0; q + 1], WeightScheme::Uniform, 1.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        for s_time in 0..q {
            for row in 0..=s_time {
                for var in 0..2 {
                    assert_eq!(sys.b_opt[(row, s_time * 2 + var)], 0.0);
                }
            }
        }
        let sq = sys.square_a().unwrap();
        for i in 0..=q {
            assert!((sq[(i, 0)] - 0.6f64.powi(i as i32 + 1)).abs() < 1e-15);
            assert_eq!(sq[(i, i)], 0.6);
        }
    }

    #[test]
    fn zero_alpha_removes_boundary_dependence() {
        let s = gen_linear(&LinearGenSpec::reference(3)).unwrap();
        let model = arx(&[0.0], &[vec![0.2], vec![0.5]], 0.0);
        let p = CeProblem::new(&model, &s, spec(60, 3, vec![2.0; 4], WeightScheme::Uniform, 1.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        assert!(sys.a.iter().all(|&v| v == 0.0));
        assert_eq!(sys.b_opt[(3, 4)], 0.2);
        assert_eq!(sys.b_opt[(3, 2)], 0.0);
    }

    #[test]
    fn rollout_equivalence_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let k = rng.random_range(1..=3);
            let m = rng.random_range(1..=3);
            let n = rng.random_range(1..=3);
            let q = rng.random_range(1..=6);
            let len = 40;
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: Vec<Vec<f64>> = (0..k).map(|_| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let s = SeriesSet::new(x, z).unwrap();
            let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(-0.9..0.9) / m as f64).collect();
            let beta: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let model = arx(&alpha, &beta, rng.random_range(-0.5..0.5));
            let anchor = rng.random_range(q + m.max(n) + 2..len);
            let boundary = if case % 5 == 0 { BoundaryMode::PredictedHistory } else { BoundaryMode::ObservedHistory };
            let mut sp = spec(anchor, q, vec![1.0; q + 1], WeightScheme::Uniform, 1.0);
            sp.boundary = boundary;
            let Ok(p) = CeProblem::new(&model, &s, sp) else { continue };
            let sys = build_matrices(&p).unwrap();
            let zt: Vec<Vec<f64>> = (0..k).map(|_| (0..q).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let via_matrices = sys.predict(&sys.from_grid(&zt));
            let via_rollout = p.rollout(&zt).unwrap();
            for (a, b) in via_matrices.iter().zip(&via_rollout) {
                assert!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
            }
            assert!((sys.predict(&sys.z_opt) - DVector::from_vec(p.baseline_rollout())).amax() <= 1e-12);
        }
    }

    #[test]
    fn identity_target_returns_observed() {
        let s = gen_linear(&LinearGenSpec::reference(5)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.05);
        let base = crate::ce::baseline_rollout(&model, &s, 70, 3, BoundaryMode::ObservedHistory).unwrap();
        let p = CeProblem::new(&model, &s, spec(70, 3, base, WeightScheme::Uniform, 3.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        let z = solve_closed_form(&sys, 3.0).unwrap();
        assert!((z - &sys.z_opt).amax() < 1e-12);
    }

    #[test]
    fn ridge_limit_and_stationarity() {
        let s = gen_linear(&LinearGenSpec::reference(6)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.0);
        let p = CeProblem::new(&model, &s, spec(70, 3, vec![2.0; 4], WeightScheme::Uniform, 3.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        let z = solve_closed_form(&sys, 1e9).unwrap();
        assert!((z - &sys.z_opt).amax() < 1e-6);
        for lambda in [0.1, 1.0, 3.0, 5.0] {
            let z = solve_closed_form(&sys, lambda).unwrap();
            assert!(sys.stationarity_residual(&z, lambda) <= 1e-10);
        }
    }

    #[test]
    fn lambda_zero_rank_deficient_is_singular() {
        let s = gen_linear(&LinearGenSpec::reference(7)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.0);
        let p = CeProblem::new(&model, &s, spec(70, 3, vec![2.0; 4], WeightScheme::FinalOnly, 0.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        assert!(matches!(solve_closed_form(&sys, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn closed_form_is_global_minimum() {
        let s = gen_linear(&LinearGenSpec::reference(8)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.0);
        let p = CeProblem::new(&model, &s, spec(90, 4, vec![2.0; 5], WeightScheme::Exponential { r: 0.5 }, 2.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        let z = solve_closed_form(&sys, 2.0).unwrap();
        let best = sys.objective(&z, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..100 {
            let scale = 10f64.powi(i % 7 - 4);
            let dz = DVector::from_fn(z.len(), |_, _| rng.random_range(-1.0..1.0) * scale);
            assert!(sys.objective(&(&z + dz), 2.0) > best);
        }
        // matrix objective agrees with the engine's objective
        let via_engine = p.objective(&sys.to_grid(&z)).unwrap().total;
        assert!((via_engine - best).abs() < 1e-12);
    }

    #[test]
    fn unsupported_configurations() {
        let s = gen_linear(&LinearGenSpec::reference(9)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.0);
        let mut sp = spec(70, 3, vec![2.0; 4], WeightScheme::Uniform, 1.0);
        sp.distance = DistanceKind::WeightedEuclidean;
        let p = CeProblem::new(&model, &s, sp).unwrap();
        assert!(matches!(build_matrices(&p), Err(Error::Unsupported(_))));
        let mut sp = spec(70, 3, vec![2.0; 4], WeightScheme::Uniform, 1.0);
        sp.mask = Some(crate::ce::restrict_mask(2, 3, &[0]).unwrap());
        let p = CeProblem::new(&model, &s, sp).unwrap();
        assert!(matches!(build_matrices(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn gradient_descent_reaches_closed_form() {
        let s = gen_linear(&LinearGenSpec::reference(10)).unwrap();
        let model = arx(&[0.6], &[vec![0.2], vec![0.5]], 0.0);
        let p = CeProblem::new(&model, &s, spec(120, 3, vec![2.0; 4], WeightScheme::Uniform, 3.0)).unwrap();
        let sys = build_matrices(&p).unwrap();
        let exact = sys.to_grid(&solve_closed_form(&sys, 3.0).unwrap());
        let sol = solve_ce(&p, &OptimizerConfig::default()).unwrap();
        let err = exact.iter().flatten().zip(sol.z_tilde.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }
}
