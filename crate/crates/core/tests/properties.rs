use cetx::ce::{
    make_weights, restrict_mask, solve_ce, BoundaryMode, CeProblem, DistanceKind, OptimizerConfig, ProblemSpec,
    WeightScheme,
};
use cetx::data::SeriesSet;
use cetx::forecast::{ArxCoefficients, ForecastModel};
use cetx::oracle::{build_matrices, solve_closed_form};
use proptest::prelude::*;

fn arx(alpha: f64, betas: &[f64]) -> ForecastModel {
    ForecastModel::arx(ArxCoefficients {
        intercept: 0.1,
        x: vec![alpha],
        z: betas.iter().map(|&b| vec![b]).collect(),
    })
    .unwrap()
}

fn series(vals: &[f64], k: usize) -> SeriesSet {
    let len = vals.len() / (k + 1);
    let x = vals[..len].to_vec();
    let z = (0..k).map(|v| vals[(v + 1) * len..(v + 2) * len].to_vec()).collect();
    SeriesSet::new(x, z).unwrap()
}

fn problem_spec(anchor: usize, q: usize, target: f64, lambda: f64) -> ProblemSpec {
    ProblemSpec {
        anchor,
        q,
        target: vec![target; q + 1],
        weights: make_weights(WeightScheme::Uniform, q).unwrap(),
        lambda,
        distance: DistanceKind::WeightedSquared,
        delta: None,
        mask: None,
        boundary: BoundaryMode::ObservedHistory,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unintervened_rollout_is_the_baseline(
        vals in proptest::collection::vec(-2.0..2.0f64, 36),
        alpha in -0.9..0.9f64,
        q in 1usize..5,
    ) {
        let s = series(&vals, 2);
        let model = arx(alpha, &[0.3, -0.7]);
        let p = CeProblem::new(&model, &s, problem_spec(11, q, 1.0, 1.0)).unwrap();
        prop_assert_eq!(p.rollout(&p.observed()).unwrap(), p.baseline_rollout());
    }

    #[test]
    fn objective_is_nonnegative_and_solver_never_worsens(
        vals in proptest::collection::vec(-2.0..2.0f64, 36),
        target in -3.0..3.0f64,
        lambda in 0.01..10.0f64,
    ) {
        let s = series(&vals, 2);
        let model = arx(0.5, &[0.4, 0.9]);
        let p = CeProblem::new(&model, &s, problem_spec(11, 3, target, lambda)).unwrap();
        let opt = OptimizerConfig { max_iterations: 400, ..OptimizerConfig::default() };
        let sol = solve_ce(&p, &opt).unwrap();
        prop_assert!(sol.objective.total >= 0.0);
        prop_assert!(sol.objective.total <= sol.trace[0] + 1e-15);
    }

    #[test]
    fn closed_form_is_no_worse_than_the_solver(
        vals in proptest::collection::vec(-2.0..2.0f64, 36),
        target in -3.0..3.0f64,
        lambda in 0.1..10.0f64,
    ) {
        let s = series(&vals, 2);
        let model = arx(-0.4, &[1.1, 0.2]);
        let p = CeProblem::new(&model, &s, problem_spec(11, 4, target, lambda)).unwrap();
        let sys = build_matrices(&p).unwrap();
        let exact = sys.to_grid(&solve_closed_form(&sys, lambda).unwrap());
        let sol = solve_ce(&p, &OptimizerConfig { max_iterations: 300, ..OptimizerConfig::default() }).unwrap();
        let best = p.objective(&exact).unwrap().total;
        prop_assert!(best <= sol.objective.total + 1e-12);
    }

    #[test]
    fn masked_cells_never_move(
        vals in proptest::collection::vec(-2.0..2.0f64, 48),
        keep in 0usize..3,
    ) {
        let s = series(&vals, 3);
        let model = arx(0.3, &[0.5, -0.5, 1.0]);
        let mut sp = problem_spec(10, 3, 2.0, 0.5);
        sp.mask = Some(restrict_mask(3, 3, &[keep]).unwrap());
        let p = CeProblem::new(&model, &s, sp).unwrap();
        let sol = solve_ce(&p, &OptimizerConfig { max_iterations: 200, ..OptimizerConfig::default() }).unwrap();
        for v in (0..3).filter(|&v| v != keep) {
            prop_assert_eq!(&sol.z_tilde[v], &p.observed()[v]);
        }
    }
}
