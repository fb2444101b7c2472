use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_arx, fit_neural, ForecastModel, ModelKind, TrainingHyper};
use crate::data::{make_lagged_dataset, split_train_test, SeriesSet};
use crate::error::{domain, Error, Result};

/// One evaluated `(kind, m, n)` combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: ModelKind,
    pub m: usize,
    pub n: usize,
    pub train_mse: f64,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCandidate {
    pub kind: ModelKind,
    pub m: usize,
    pub n: usize,
    pub reason: String,
}

/// Candidates ranked by ascending test MSE. All share one chronological split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub ranking: Vec<Candidate>,
    pub failures: Vec<FailedCandidate>,
    pub winner: Candidate,
    /// Zero-based time index of the first test row.
    pub test_start: usize,
    pub train_ratio: f64,
}

impl SelectionReport {
    /// Plain-text table of the best `top` candidates.
    pub fn table(&self, top: usize) -> String {
        let mut out = String::from("rank  model  m  n  train_mse     test_mse\n");
        for (i, c) in self.ranking.iter().take(top).enumerate() {
            out.push_str(&format!(
                "{:<5} {:<6} {:<2} {:<2} {:<13.6e} {:.6e}\n",
                i + 1,
                c.kind.to_string(),
                c.m,
                c.n,
                c.train_mse,
                c.test_mse
            ));
        }
        out
    }
}

/// Report plus the fitted winning model.
#[derive(Debug, Clone)]
pub struct Selection {
    pub report: SelectionReport,
    pub model: ForecastModel,
}

/// Fits every `(kind, m, n)` in the grid and ranks them by test MSE.
///
/// Every candidate's lagged rows start at the largest lag in the grid, so all
/// of them see the same training and test time points.
pub fn select_model(
    s: &SeriesSet,
    kinds: &[ModelKind],
    m_grid: &[usize],
    n_grid: &[usize],
    hyper: &TrainingHyper,
    train_ratio: f64,
) -> Result<Selection> {
    if kinds.is_empty() || m_grid.is_empty() || n_grid.is_empty() {
        return Err(domain("model kinds and lag grids must be nonempty"));
    }
    let max_lag = m_grid.iter().chain(n_grid).copied().max().unwrap_or(1);
    let grid: Vec<(ModelKind, usize, usize)> = kinds
        .iter()
        .flat_map(|&kind| m_grid.iter().flat_map(move |&m| n_grid.iter().map(move |&n| (kind, m, n))))
        .collect();

    let results: Vec<Result<(Candidate, ForecastModel)>> = grid
        .par_iter()
        .map(|&(kind, m, n)| {
            let data = make_lagged_dataset(s, m, n)?.starting_at(max_lag);
            let (train, test) = split_train_test(&data, train_ratio)?;
            let mut model = match kind {
                ModelKind::Arx => fit_arx(&train)?,
                _ => fit_neural(&train, kind, hyper)?,
            };
            let test_mse = model.evaluate_mse(&test)?;
            model.training_mut().test_mse = Some(test_mse);
            let cand = Candidate {
                kind,
                m,
                n,
                train_mse: model.training().train_mse.unwrap_or(f64::NAN),
                test_mse,
            };
            Ok((cand, model))
        })
        .collect();

    let mut ranked = Vec::new();
    let mut failures = Vec::new();
    for (&(kind, m, n), r) in grid.iter().zip(results) {
        match r {
            Ok((c, model)) if c.test_mse.is_finite() => ranked.push((c, model)),
            Ok(_) => failures.push(FailedCandidate {
                kind,
                m,
                n,
                reason: "non-finite test MSE".into(),
            }),
            Err(e) => failures.push(FailedCandidate {
                kind,
                m,
                n,
                reason: e.to_string(),
            }),
        }
    }
    if ranked.is_empty() {
        return Err(Error::AllCandidatesFailed(grid.len()));
    }
    // stable sort keeps grid order among ties
    ranked.sort_by(|a, b| a.0.test_mse.total_cmp(&b.0.test_mse));

    let test_start = {
        let data = make_lagged_dataset(s, 1, 1)?.starting_at(max_lag);
        let (_, test) = split_train_test(&data, train_ratio)?;
        test.origins()[0]
    };
    let (winner, model) = ranked[0].clone();
    let report = SelectionReport {
        ranking: ranked.into_iter().map(|(c, _)| c).collect(),
        failures,
        winner,
        test_start,
        train_ratio,
    };
    Ok(Selection { report, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{gen_linear, LinearGenSpec};

    #[test]
    fn single_candidate_wins() {
        let s = gen_linear(&LinearGenSpec::reference(3)).unwrap();
        let sel = select_model(&s, &[ModelKind::Arx], &[2], &[1], &TrainingHyper::default(), 0.8).unwrap();
        assert_eq!(sel.report.ranking.len(), 1);
        assert_eq!((sel.report.winner.m, sel.report.winner.n), (2, 1));
        assert_eq!(sel.model.lags(), (2, 1));
    }

    #[test]
    fn ranking_is_sorted_and_reproducible() {
        let s = gen_linear(&LinearGenSpec::reference(5)).unwrap();
        let grid = [1, 2, 3];
        let a = select_model(&s, &[ModelKind::Arx], &grid, &grid, &TrainingHyper::default(), 0.8).unwrap();
        let b = select_model(&s, &[ModelKind::Arx], &grid, &grid, &TrainingHyper::default(), 0.8).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.ranking.len(), 9);
        assert!(a.report.ranking.windows(2).all(|w| w[0].test_mse <= w[1].test_mse));
        assert_eq!(a.report.winner, a.report.ranking[0]);
        assert!(a.report.table(5).lines().count() == 6);
    }

    #[test]
    fn failed_candidates_are_recorded() {
        // lag 60 on a 61-point series leaves a single row: the split fails for that candidate only
        let s = gen_linear(&LinearGenSpec { len: 61, ..LinearGenSpec::reference(1) }).unwrap();
        let err = select_model(&s, &[ModelKind::Arx], &[60], &[1], &TrainingHyper::default(), 0.8).unwrap_err();
        assert!(matches!(err, Error::AllCandidatesFailed(1)));
        let ok = select_model(&s, &[ModelKind::Arx], &[1, 40], &[1], &TrainingHyper::default(), 0.8).unwrap();
        assert_eq!(ok.report.ranking.len(), 1);
        assert_eq!(ok.report.failures.len(), 1);
    }
}
