//! Quality metrics for a counterfactual solution and the whole-series
//! importance sweep.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ce::{baseline_rollout, restrict_mask, solve_ce, BoundaryMode, CeProblem, CeSolution, DistanceKind, OptimizerConfig, ProblemSpec};
use crate::data::{format_f64, SeriesSet};
use crate::error::{domain, Result};
use crate::forecast::ForecastModel;

/// The five solution metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub x_loss: f64,
    pub z_loss: f64,
    pub total_loss: f64,
    pub lambda_prime: f64,
    /// Absent when `q < 3`.
    pub ts: Option<f64>,
    /// Present only when an exact solution was available.
    pub mae: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "x_loss,z_loss,total_loss,lambda_prime,ts,mae";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            format_f64(self.x_loss),
            format_f64(self.z_loss),
            format_f64(self.total_loss),
            format_f64(self.lambda_prime),
            opt(self.ts),
            opt(self.mae)
        )
    }
}

/// Validity: `Σ w_t (x̄_t − x̂_t)²`.
pub fn x_loss(problem: &CeProblem<'_>, solution: &CeSolution) -> f64 {
    let spec = problem.spec();
    solution
        .rollout
        .iter()
        .zip(&spec.target)
        .zip(&spec.weights)
        .map(|((x, t), w)| w * (t - x).powi(2))
        .sum()
}

/// Proximity: unweighted `Σ (z̃ − z)²` over the window.
pub fn z_loss(problem: &CeProblem<'_>, solution: &CeSolution) -> f64 {
    solution
        .z_tilde
        .iter()
        .flatten()
        .zip(problem.observed().iter().flatten())
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

pub fn total_loss(x_loss: f64, z_loss: f64, lambda_prime: f64) -> f64 {
    x_loss + lambda_prime * z_loss
}

/// Sum of absolute second differences along time, or `None` when `q < 3`.
pub fn temporal_smoothness(z_tilde: &[Vec<f64>]) -> Option<f64> {
    let q = z_tilde.first()?.len();
    if q < 3 {
        return None;
    }
    Some(
        z_tilde
            .iter()
            .flat_map(|row| row.windows(3).map(|w| ((w[2] - w[1]) - (w[1] - w[0])).abs()))
            .sum(),
    )
}

/// Denominator convention for [`mae_vs_oracle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaeDenominator {
    /// `K + q`.
    #[default]
    KPlusQ,
    /// `K · q`, the cell count.
    KTimesQ,
}

/// `Σ |z_true − z̃| / (K + q)` (or `/ (K q)`).
pub fn mae_vs_oracle(z_tilde: &[Vec<f64>], oracle: &[Vec<f64>], denominator: MaeDenominator) -> Result<f64> {
    let k = z_tilde.len();
    let q = z_tilde.first().map_or(0, Vec::len);
    if oracle.len() != k || z_tilde.iter().chain(oracle).any(|r| r.len() != q) || k == 0 || q == 0 {
        return Err(domain("solution and oracle grids must have the same nonempty K × q shape"));
    }
    let sum: f64 = z_tilde
        .iter()
        .flatten()
        .zip(oracle.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let d = match denominator {
        MaeDenominator::KPlusQ => k + q,
        MaeDenominator::KTimesQ => k * q,
    };
    Ok(sum / d as f64)
}

/// All metrics for one solution.
pub fn evaluate_metrics(
    problem: &CeProblem<'_>,
    solution: &CeSolution,
    lambda_prime: f64,
    oracle: Option<&[Vec<f64>]>,
    denominator: MaeDenominator,
) -> Result<MetricsReport> {
    if !(lambda_prime >= 0.0) {
        return Err(domain("lambda' must be ≥ 0"));
    }
    let xl = x_loss(problem, solution);
    let zl = z_loss(problem, solution);
    Ok(MetricsReport {
        x_loss: xl,
        z_loss: zl,
        total_loss: total_loss(xl, zl, lambda_prime),
        lambda_prime,
        ts: temporal_smoothness(&solution.z_tilde),
        mae: oracle.map(|o| mae_vs_oracle(&solution.z_tilde, o, denominator)).transpose()?,
    })
}

/// How each sweep window's target trajectory is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetRule {
    /// The same absolute value at every point.
    Fixed { value: f64 },
    /// The window's own unintervened rollout shifted by `offset`.
    Offset { offset: f64 },
}

impl Default for TargetRule {
    fn default() -> Self {
        TargetRule::Fixed { value: 2.0 }
    }
}

/// Which admissible anchors the sweep visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    All,
    /// Every `step`-th anchor, starting from the latest.
    EveryKth { step: usize },
    /// `count` anchors drawn without replacement.
    Random { count: usize, seed: u64 },
}

/// Problem settings shared by every window of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTemplate {
    pub q: usize,
    pub weights: Vec<f64>,
    pub lambda: f64,
    #[serde(default)]
    pub distance: DistanceKind,
    #[serde(default)]
    pub delta: Option<Vec<Vec<f64>>>,
    /// Optimizable variables (zero-based); all when absent.
    #[serde(default)]
    pub keep: Option<Vec<usize>>,
    #[serde(default)]
    pub boundary: BoundaryMode,
    #[serde(default)]
    pub target: TargetRule,
}

impl SweepTemplate {
    /// Concrete problem for one anchor.
    pub fn instantiate(&self, model: &ForecastModel, series: &SeriesSet, anchor: usize) -> Result<ProblemSpec> {
        let target = match self.target {
            TargetRule::Fixed { value } => vec![value; self.q + 1],
            TargetRule::Offset { offset } => baseline_rollout(model, series, anchor, self.q, self.boundary)?
                .into_iter()
                .map(|v| v + offset)
                .collect(),
        };
        let mask = self
            .keep
            .as_deref()
            .map(|keep| restrict_mask(series.num_exogenous(), self.q, keep))
            .transpose()?;
        Ok(ProblemSpec {
            anchor,
            q: self.q,
            target,
            weights: self.weights.clone(),
            lambda: self.lambda,
            distance: self.distance,
            delta: self.delta.clone(),
            mask,
            boundary: self.boundary,
        })
    }
}

/// Statistics of `z̃* − z` for one variable at one lag offset from the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// Zero-based variable index.
    pub variable: usize,
    pub label: String,
    /// `o` in `z_{t-o}`; 1 is the value just before the anchor.
    pub offset: usize,
    pub mean: f64,
    /// Population standard deviation across windows.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub q: usize,
    /// Number of windows that contributed.
    pub windows: usize,
    /// Anchors visited, latest first.
    pub anchors: Vec<usize>,
    /// Windows whose solve failed and were skipped.
    pub failures: usize,
    pub cells: Vec<CellStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solutions: Option<Vec<CeSolution>>,
}

impl ImportanceReport {
    pub const CSV_HEADER: &'static str = "variable,label,offset,mean,std,min,max,mean_abs";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.variable,
                c.label,
                c.offset,
                format_f64(c.mean),
                format_f64(c.std),
                format_f64(c.min),
                format_f64(c.max),
                format_f64(c.mean_abs)
            );
        }
        out
    }

    pub fn cell(&self, variable: usize, offset: usize) -> Option<&CellStats> {
        self.cells.iter().find(|c| c.variable == variable && c.offset == offset)
    }
}

/// Anchors from one step before the series end back to the earliest with
/// enough history, latest first.
pub fn sweep_anchors(series_len: usize, q: usize, max_lag: usize) -> Vec<usize> {
    let earliest = q + max_lag;
    if series_len < 2 || series_len - 2 < earliest {
        return Vec::new();
    }
    (earliest..=series_len - 2).rev().collect()
}

/// Solves the counterfactual problem at every sampled anchor and aggregates
/// the per-cell shifts.
pub fn importance_sweep(
    model: &ForecastModel,
    series: &SeriesSet,
    template: &SweepTemplate,
    sampling: Sampling,
    opt: &OptimizerConfig,
    retain_solutions: bool,
) -> Result<ImportanceReport> {
    let (m, n) = model.lags();
    let all = sweep_anchors(series.len(), template.q, m.max(n));
    if all.is_empty() {
        return Err(domain(format!(
            "no admissible anchors for T={}, q={}, max lag {}",
            series.len(),
            template.q,
            m.max(n)
        )));
    }
    let anchors: Vec<usize> = match sampling {
        Sampling::All => all,
        Sampling::EveryKth { step } => {
            if step == 0 {
                return Err(domain("sampling step must be at least 1"));
            }
            all.into_iter().step_by(step).collect()
        }
        Sampling::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, all.len(), count.min(all.len())).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i]).collect()
        }
    };

    let results: Vec<Result<(Vec<Vec<f64>>, CeSolution)>> = anchors
        .par_iter()
        .map(|&anchor| {
            let spec = template.instantiate(model, series, anchor)?;
            let problem = CeProblem::new(model, series, spec)?;
            let sol = solve_ce(&problem, opt)?;
            let diff = sol
                .z_tilde
                .iter()
                .zip(problem.observed())
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect();
            Ok((diff, sol))
        })
        .collect();

    let k = series.num_exogenous();
    let q = template.q;
    let mut diffs = Vec::new();
    let mut solutions = Vec::new();
    let mut failures = 0;
    for r in results {
        match r {
            Ok((d, s)) => {
                diffs.push(d);
                if retain_solutions {
                    solutions.push(s);
                }
            }
            Err(_) => failures += 1,
        }
    }
    if diffs.is_empty() {
        return Err(domain(format!("all {failures} sweep windows failed")));
    }

    let mut cells = Vec::with_capacity(k * q);
    for var in 0..k {
        for offset in 1..=q {
            let col = q - offset;
            let vals: Vec<f64> = diffs.iter().map(|d| d[var][col]).collect();
            let cnt = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / cnt;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cnt).sqrt();
            cells.push(CellStats {
                variable: var,
                label: series.labels()[var].clone(),
                offset,
                mean,
                std,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_abs: vals.iter().map(|v| v.abs()).sum::<f64>() / cnt,
            });
        }
    }
    Ok(ImportanceReport {
        q,
        windows: diffs.len(),
        anchors,
        failures,
        cells,
        solutions: retain_solutions.then_some(solutions),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ce::{make_weights, WeightScheme};
    use crate::forecast::ArxCoefficients;
    use crate::oracle::{build_matrices, solve_closed_form};
    use crate::simgen::{gen_linear, LinearGenSpec};
    use proptest::prelude::*;

    fn reference_arx() -> ForecastModel {
        ForecastModel::arx(ArxCoefficients {
            intercept: 0.0,
            x: vec![0.6],
            z: vec![vec![0.2], vec![0.5]],
        })
        .unwrap()
    }

    fn template(lambda: f64) -> SweepTemplate {
        SweepTemplate {
            q: 3,
            weights: make_weights(WeightScheme::Uniform, 3).unwrap(),
            lambda,
            distance: DistanceKind::WeightedSquared,
            delta: None,
            keep: None,
            boundary: BoundaryMode::ObservedHistory,
            target: TargetRule::Fixed { value: 2.0 },
        }
    }

    fn solve(s: &SeriesSet, model: &ForecastModel, lambda: f64) -> (ProblemSpec, CeSolution) {
        let spec = template(lambda).instantiate(model, s, 100).unwrap();
        let p = CeProblem::new(model, s, spec.clone()).unwrap();
        (spec, solve_ce(&p, &OptimizerConfig::default()).unwrap())
    }

    #[test]
    fn loss_examples() {
        let s = gen_linear(&LinearGenSpec::reference(1)).unwrap();
        let model = reference_arx();
        let (spec, mut sol) = solve(&s, &model, 1.0);
        let p = CeProblem::new(&model, &s, spec.clone()).unwrap();
        // x_loss equals the engine's fit term
        let fit = p.objective(&sol.z_tilde).unwrap();
        assert!((x_loss(&p, &sol) - fit.fit).abs() < 1e-12);
        // metric total equals engine total for λ' = λ with unit weights
        let xl = x_loss(&p, &sol);
        let zl = z_loss(&p, &sol);
        assert!((total_loss(xl, zl, 1.0) - fit.total).abs() < 1e-12);

        sol.rollout = spec.target.clone();
        assert_eq!(x_loss(&p, &sol), 0.0);
        let mut spec2 = spec.clone();
        spec2.weights = make_weights(WeightScheme::FinalOnly, 3).unwrap();
        let p2 = CeProblem::new(&model, &s, spec2).unwrap();
        sol.rollout[3] -= 0.5;
        assert!((x_loss(&p2, &sol) - 0.25).abs() < 1e-15);

        sol.z_tilde = p.observed();
        assert_eq!(z_loss(&p, &sol), 0.0);
        sol.z_tilde[1][2] += 2.0;
        assert_eq!(z_loss(&p, &sol), 4.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 5.0, 1.0), 5.0);
        assert_eq!(total_loss(2.0, 0.0, 7.0), 2.0);
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(temporal_smoothness(&[vec![2.0; 5]]), Some(0.0));
        assert_eq!(temporal_smoothness(&[vec![1.0, 3.0, 5.0, 7.0]]), Some(0.0));
        assert_eq!(temporal_smoothness(&[vec![0.0, 1.0, 3.0]]), Some(1.0));
        assert_eq!(temporal_smoothness(&[vec![0.0, 1.0]]), None);
    }

    #[test]
    fn mae_examples() {
        let a = vec![vec![0.0; 3]; 2];
        let b = vec![vec![0.1; 3]; 2];
        assert_eq!(mae_vs_oracle(&a, &a, MaeDenominator::KPlusQ).unwrap(), 0.0);
        assert!((mae_vs_oracle(&a, &b, MaeDenominator::KPlusQ).unwrap() - 0.12).abs() < 1e-15);
        assert!((mae_vs_oracle(&a, &b, MaeDenominator::KTimesQ).unwrap() - 0.1).abs() < 1e-15);
        assert!(mae_vs_oracle(&a, &b[..1], MaeDenominator::KPlusQ).is_err());
    }

    #[test]
    fn metrics_report_against_oracle() {
        let s = gen_linear(&LinearGenSpec::reference(2)).unwrap();
        let model = reference_arx();
        let (spec, sol) = solve(&s, &model, 3.0);
        let p = CeProblem::new(&model, &s, spec).unwrap();
        let sys = build_matrices(&p).unwrap();
        let exact = sys.to_grid(&solve_closed_form(&sys, 3.0).unwrap());
        let m = evaluate_metrics(&p, &sol, 3.0, Some(&exact), MaeDenominator::KPlusQ).unwrap();
        assert!(m.mae.unwrap() <= 1e-2);
        assert!(m.ts.is_some());
        assert_eq!(m.total_loss, m.x_loss + 3.0 * m.z_loss);
        assert!(m.csv_row().split(',').count() == 6);
    }

    #[test]
    fn z_loss_shrinks_along_lambda_path() {
        let s = gen_linear(&LinearGenSpec::reference(3)).unwrap();
        let model = reference_arx();
        let spec = template(1.0).instantiate(&model, &s, 120).unwrap();
        let p = CeProblem::new(&model, &s, spec).unwrap();
        let sys = build_matrices(&p).unwrap();
        let mut prev = f64::INFINITY;
        for lambda in [0.1, 1.0, 10.0, 100.0, 1e4, 1e8] {
            let z = solve_closed_form(&sys, lambda).unwrap();
            let zl = (&z - &sys.z_opt).norm_squared();
            assert!(zl <= prev);
            prev = zl;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn anchors_follow_stopping_rule() {
        // T=10, q=3, lag 1: anchors 8 down to 4 (1-based T-1 .. q+lag+1)
        assert_eq!(sweep_anchors(10, 3, 1), vec![8, 7, 6, 5, 4]);
        assert!(sweep_anchors(5, 3, 1).is_empty());
    }

    #[test]
    fn sweep_direction_and_penalty_limit() {
        let s = gen_linear(&LinearGenSpec::reference(4)).unwrap();
        let model = reference_arx();
        let opt = OptimizerConfig::default();
        let r = importance_sweep(&model, &s, &template(3.0), Sampling::All, &opt, false).unwrap();
        assert_eq!(r.windows, 200 - 1 - 3 - 1);
        for offset in 1..=3 {
            assert!(r.cell(1, offset).unwrap().mean > r.cell(0, offset).unwrap().mean);
        }
        for c in &r.cells {
            assert!(c.min <= c.mean && c.mean <= c.max);
        }
        let flat = importance_sweep(&model, &s, &template(1e6), Sampling::EveryKth { step: 10 }, &opt, false).unwrap();
        assert!(flat.cells.iter().all(|c| c.mean.abs() < 1e-3));
    }

    #[test]
    fn sweep_sampling_and_determinism() {
        let s = gen_linear(&LinearGenSpec::reference(5)).unwrap();
        let model = reference_arx();
        let opt = OptimizerConfig::default();
        let total = sweep_anchors(200, 3, 1).len();
        let one = importance_sweep(&model, &s, &template(3.0), Sampling::EveryKth { step: total }, &opt, true).unwrap();
        assert_eq!(one.windows, 1);
        assert!(one.cells.iter().all(|c| c.std == 0.0));
        assert_eq!(one.solutions.as_ref().unwrap().len(), 1);
        let rnd = Sampling::Random { count: 12, seed: 9 };
        let a = importance_sweep(&model, &s, &template(3.0), rnd, &opt, false).unwrap();
        let b = importance_sweep(&model, &s, &template(3.0), rnd, &opt, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.windows, 12);
        assert_eq!(a.to_csv().lines().count(), 1 + 2 * 3);
    }

    #[test]
    fn no_anchor_is_an_error() {
        let s = SeriesSet::new(vec![0.0; 5], vec![vec![0.0; 5]]).unwrap();
        let model = ForecastModel::arx(ArxCoefficients { intercept: 0.0, x: vec![0.5], z: vec![vec![1.0]] }).unwrap();
        let t = SweepTemplate { weights: make_weights(WeightScheme::Uniform, 3).unwrap(), ..template(1.0) };
        assert!(importance_sweep(&model, &s, &t, Sampling::All, &OptimizerConfig::default(), false).is_err());
    }

    proptest! {
        #[test]
        fn smoothness_is_affine_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-10.0..10.0f64, 6), 1..4),
            a in -5.0..5.0f64,
            b in -5.0..5.0f64,
        ) {
            let base = temporal_smoothness(&rows).unwrap();
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().enumerate().map(|(t, v)| v + a + b * t as f64).collect()).collect();
            prop_assert!((temporal_smoothness(&shifted).unwrap() - base).abs() < 1e-9);
        }
    }
}
