use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use cetx::analysis::{evaluate_metrics, importance_sweep, MetricsReport, SweepTemplate};
use cetx::ce::{make_weights, solve_ce, CeProblem, CeSolution, OptimizerConfig};
use cetx::data::{load_csv, make_lagged_dataset, split_train_test, standardize, CsvSchema, SeriesSet};
use cetx::forecast::{fit_arx, fit_neural, select_model, ForecastModel, ModelKind};
use cetx::oracle::{build_matrices, solve_closed_form};
use cetx::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::svg::{self, Line, Panel};

/// Version stamped into every JSON artifact.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, quiet: bool) -> Result<Self> {
        let out = cfg.out.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        let ctx = Self { cfg, out, quiet };
        ctx.write_json("resolved_config.json", &ctx.cfg)?;
        Ok(ctx)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn write_versioned<T: Serialize>(&self, name: &str, body: &T) -> Result<()> {
        self.write_json(
            name,
            &Versioned {
                schema_version: OUTPUT_SCHEMA_VERSION,
                body,
            },
        )
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn load_series(cfg: &ExperimentConfig) -> Result<SeriesSet> {
    let raw = match &cfg.data {
        DataSource::Generator(g) => g.generate()?,
        DataSource::Csv(c) => load_csv(
            &c.path,
            &CsvSchema {
                x: c.x.clone(),
                z: c.z.clone(),
                time: c.time.clone(),
            },
        )
        .with_context(|| format!("loading {}", c.path.display()))?,
    };
    Ok(raw)
}

/// Loaded (and optionally standardized) series plus the scaler used.
fn prepared_series(cfg: &ExperimentConfig) -> Result<(SeriesSet, Option<cetx::data::ScalerParams>)> {
    let s = load_series(cfg)?;
    if cfg.standardize {
        let (s, scaler) = standardize(&s)?;
        Ok((s, Some(scaler)))
    } else {
        Ok((s, None))
    }
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    let DataSource::Generator(spec) = &ctx.cfg.data else {
        bail!("simulate needs a generator data source");
    };
    let s = spec.generate()?;
    s.write_csv(&ctx.path("data.csv"))?;
    ctx.write_versioned("generator.json", spec)?;
    ctx.say(format!("wrote {} rows with {} exogenous series", s.len(), s.num_exogenous()));
    Ok(())
}

pub fn select(ctx: &Ctx) -> Result<()> {
    let (s, scaler) = prepared_series(&ctx.cfg)?;
    let model = run_selection(ctx, &s)?.with_scaler(scaler);
    model.save(&ctx.path("model.json"))?;
    Ok(())
}

fn run_selection(ctx: &Ctx, s: &SeriesSet) -> Result<ForecastModel> {
    let mc = &ctx.cfg.model;
    let sel = match select_model(s, &mc.kinds, &mc.m, &mc.n, &mc.training, mc.train_ratio) {
        Ok(sel) => sel,
        Err(e @ Error::AllCandidatesFailed(_)) => bail!("{e}"),
        Err(e) => return Err(e.into()),
    };
    for f in &sel.report.failures {
        eprintln!("candidate {} (m={}, n={}) failed: {}", f.kind, f.m, f.n, f.reason);
    }
    ctx.write_versioned("selection.json", &sel.report)?;
    let table = sel.report.table(5);
    ctx.write_text("selection.txt", &table)?;
    ctx.say(table.trim_end());
    Ok(sel.model)
}

#[derive(Serialize)]
struct FitSummary {
    kind: ModelKind,
    m: usize,
    n: usize,
    train_mse: Option<f64>,
    test_mse: f64,
}

pub fn fit(ctx: &Ctx) -> Result<()> {
    let mc = &ctx.cfg.model;
    let (kind, m, n) = match (mc.kinds.first(), mc.m.first(), mc.n.first()) {
        (Some(&k), Some(&m), Some(&n)) => (k, m, n),
        _ => bail!("model.kinds, model.m and model.n must be nonempty"),
    };
    let (s, scaler) = prepared_series(&ctx.cfg)?;
    let data = make_lagged_dataset(&s, m, n)?;
    let (train, test) = split_train_test(&data, mc.train_ratio)?;
    let mut model = match kind {
        ModelKind::Arx => fit_arx(&train)?,
        _ => fit_neural(&train, kind, &mc.training)?,
    };
    let test_mse = model.evaluate_mse(&test)?;
    model.training_mut().test_mse = Some(test_mse);
    let model = model.with_scaler(scaler);
    model.save(&ctx.path("model.json"))?;
    let summary = FitSummary {
        kind,
        m,
        n,
        train_mse: model.training().train_mse,
        test_mse,
    };
    ctx.write_versioned("fit.json", &summary)?;
    let cps = &model.training().loss_checkpoints;
    if !cps.is_empty() {
        let pts = cps.iter().map(|&(e, l)| (e as f64, l)).collect();
        ctx.write_text(
            "training_loss.svg",
            &svg::render(&[Panel {
                title: format!("{kind} training loss"),
                lines: vec![Line::new("train MSE", pts)],
            }]),
        )?;
    }
    ctx.say(format!("{kind} (m={m}, n={n}) test MSE {test_mse:.6e}"));
    Ok(())
}

/// Model named in the config, or the grid-search winner.
fn obtain_model(ctx: &Ctx, s: &SeriesSet, scaler: Option<cetx::data::ScalerParams>) -> Result<ForecastModel> {
    let model = match &ctx.cfg.model.path {
        Some(p) => ForecastModel::load(p).with_context(|| format!("loading model {}", p.display()))?,
        None => run_selection(ctx, s)?.with_scaler(scaler),
    };
    if model.num_exogenous() != s.num_exogenous() {
        bail!(
            "model expects {} exogenous series, data has {}",
            model.num_exogenous(),
            s.num_exogenous()
        );
    }
    model.save(&ctx.path("model.json"))?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct RunKey {
    lambda: f64,
    q: usize,
    momentum: f64,
    keep: Option<Vec<usize>>,
}

impl RunKey {
    fn keep_label(&self) -> String {
        match &self.keep {
            None => "all".into(),
            Some(k) => k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("+"),
        }
    }
}

#[derive(Serialize)]
struct RunRecord {
    #[serde(flatten)]
    key: RunKey,
    anchor: usize,
    target: Vec<f64>,
    weights: Vec<f64>,
    /// Observed `x` over the window.
    actual: Vec<f64>,
    observed_z: Vec<Vec<f64>>,
    baseline_rollout: Vec<f64>,
    solution: CeSolution,
}

#[derive(Serialize)]
struct RunFailure {
    #[serde(flatten)]
    key: RunKey,
    error: String,
    trace: Vec<f64>,
}

fn template(ctx: &Ctx, q: usize, lambda: f64, keep: Option<Vec<usize>>) -> Result<SweepTemplate> {
    let ce = &ctx.cfg.ce;
    Ok(SweepTemplate {
        q,
        weights: make_weights(ce.weights, q)?,
        lambda,
        distance: ce.distance,
        delta: ce.delta.clone(),
        keep,
        boundary: ce.boundary,
        target: ce.target,
    })
}

fn solve_run(ctx: &Ctx, model: &ForecastModel, s: &SeriesSet, anchor: usize, key: &RunKey) -> Result<RunRecord, Error> {
    let ce = &ctx.cfg.ce;
    let t = template(ctx, key.q, key.lambda, key.keep.clone()).map_err(|e| Error::Domain(e.to_string()))?;
    let spec = t.instantiate(model, s, anchor)?;
    let problem = CeProblem::new(model, s, spec)?;
    let opt = OptimizerConfig {
        momentum: key.momentum,
        ..ctx.cfg.optimizer.clone()
    };
    let mut solution = solve_ce(&problem, &opt)?;
    // exact answer when the problem is linear; otherwise no reference
    let oracle = build_matrices(&problem)
        .and_then(|sys| solve_closed_form(&sys, key.lambda).map(|z| sys.to_grid(&z)))
        .ok();
    let lambda_prime = ce.lambda_prime.unwrap_or(key.lambda);
    solution.metrics = Some(evaluate_metrics(&problem, &solution, lambda_prime, oracle.as_deref(), ce.mae_denominator)?);
    Ok(RunRecord {
        key: key.clone(),
        anchor,
        target: problem.spec().target.clone(),
        weights: problem.spec().weights.clone(),
        actual: s.x()[anchor - key.q..=anchor].to_vec(),
        observed_z: problem.observed(),
        baseline_rollout: problem.baseline_rollout(),
        solution,
    })
}

pub fn explain(ctx: &Ctx) -> Result<()> {
    let (s, scaler) = prepared_series(&ctx.cfg)?;
    let model = obtain_model(ctx, &s, scaler)?;
    let ce = &ctx.cfg.ce;
    let anchor = ce.anchor.unwrap_or(s.len() - 1);

    let mut keys = Vec::new();
    for q in ce.qs() {
        for lambda in ce.lambdas() {
            for momentum in ce.momenta(&ctx.cfg.optimizer) {
                for keep in ce.keeps() {
                    keys.push(RunKey { lambda, q, momentum, keep });
                }
            }
        }
    }
    let results: Vec<Result<RunRecord, Error>> = keys.par_iter().map(|k| solve_run(ctx, &model, &s, anchor, k)).collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (key, r) in keys.iter().zip(results) {
        match r {
            Ok(rec) => runs.push(rec),
            Err(e) => failures.push(RunFailure {
                key: key.clone(),
                trace: match &e {
                    Error::OptimizerDiverged { trace, .. } => trace.clone(),
                    _ => Vec::new(),
                },
                error: e.to_string(),
            }),
        }
    }
    if !failures.is_empty() {
        #[derive(Serialize)]
        struct Failures<'a> {
            failures: &'a [RunFailure],
        }
        ctx.write_versioned("failure.json", &Failures { failures: &failures })?;
        bail!(
            "{} of {} counterfactual runs failed; see {}",
            failures.len(),
            keys.len(),
            ctx.path("failure.json").display()
        );
    }

    ctx.write_versioned("solution.json", &runs[0])?;
    #[derive(Serialize)]
    struct Runs<'a> {
        runs: &'a [RunRecord],
    }
    ctx.write_versioned("runs.json", &Runs { runs: &runs })?;
    ctx.write_text("metrics.csv", &metrics_csv(&runs))?;
    write_plots(ctx, &runs, &s)?;

    for r in &runs {
        let m = r.solution.metrics.as_ref().expect("metrics set above");
        ctx.say(format!(
            "lambda={} q={} momentum={} keep={}: x_loss={:.4e} z_loss={:.4e} iterations={}{}",
            r.key.lambda,
            r.key.q,
            r.key.momentum,
            r.key.keep_label(),
            m.x_loss,
            m.z_loss,
            r.solution.iterations,
            m.mae.map(|v| format!(" mae={v:.3e}")).unwrap_or_default()
        ));
    }
    Ok(())
}

fn metrics_csv(runs: &[RunRecord]) -> String {
    let mut out = format!("lambda,q,momentum,keep,converged,iterations,{}\n", MetricsReport::CSV_HEADER);
    for r in runs {
        let m = r.solution.metrics.as_ref().expect("metrics set");
        out.push_str(&format!(
            "{:?},{},{:?},{},{},{},{}\n",
            r.key.lambda,
            r.key.q,
            r.key.momentum,
            r.key.keep_label(),
            r.solution.converged,
            r.solution.iterations,
            m.csv_row()
        ));
    }
    out
}

fn write_plots(ctx: &Ctx, runs: &[RunRecord], s: &SeriesSet) -> Result<()> {
    let first = &runs[0];
    let trace: Vec<(f64, f64)> = first.solution.trace.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
    ctx.write_text(
        "loss.svg",
        &svg::render(&[Panel {
            title: format!("total loss (lambda={}, q={})", first.key.lambda, first.key.q),
            lines: vec![Line::new("objective", trace)],
        }]),
    )?;

    let times = |len: usize| -> Vec<f64> { (0..len).map(|i| (first.anchor - first.key.q + i) as f64).collect() };
    let ts = times(first.key.q + 1);
    let zip = |v: &[f64]| ts.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
    ctx.write_text(
        "trajectory.svg",
        &svg::render(&[Panel {
            title: format!("{} around anchor {}", s.x_label(), first.anchor),
            lines: vec![
                Line::new("actual", zip(&first.actual)),
                Line::new("forecast", zip(&first.baseline_rollout)),
                Line::new("counterfactual forecast", zip(&first.solution.rollout)),
                Line::new("target", zip(&first.target)).dashed(),
            ],
        }]),
    )?;

    // one panel per keep set at the first (q, lambda, momentum)
    let panels: Vec<Panel> = runs
        .iter()
        .filter(|r| r.key.q == first.key.q && r.key.lambda == first.key.lambda && r.key.momentum == first.key.momentum)
        .map(|r| {
            let zt = times(r.key.q);
            let pts = |v: &[f64]| zt.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
            let mut lines = Vec::new();
            for (k, label) in s.labels().iter().enumerate() {
                lines.push(Line::new(label.clone(), pts(&r.observed_z[k])));
                lines.push(Line::new(format!("{label} counterfactual"), pts(&r.solution.z_tilde[k])).dashed());
            }
            Panel {
                title: format!("exogenous inputs, optimized: {}", r.key.keep_label()),
                lines,
            }
        })
        .collect();
    ctx.write_text("z_panels.svg", &svg::render(&panels))?;
    Ok(())
}

pub fn importance(ctx: &Ctx) -> Result<()> {
    let (s, scaler) = prepared_series(&ctx.cfg)?;
    let model = obtain_model(ctx, &s, scaler)?;
    let ce = &ctx.cfg.ce;
    let keep = ce.keeps().into_iter().next().flatten();
    let t = template(ctx, ce.q, ce.lambda, keep)?;
    let report = importance_sweep(
        &model,
        &s,
        &t,
        ctx.cfg.sweep.sampling,
        &ctx.cfg.optimizer,
        ctx.cfg.sweep.retain_solutions,
    )?;
    ctx.write_versioned("importance.json", &report)?;
    ctx.write_text("importance.csv", &report.to_csv())?;
    ctx.say(format!(
        "{} windows ({} failed)\n{}",
        report.windows,
        report.failures,
        report.to_csv().trim_end()
    ));
    Ok(())
}
