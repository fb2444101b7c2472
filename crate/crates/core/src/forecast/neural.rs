//! MLP, Elman RNN, LSTM and GRU forecasters.
//!
//! Recurrent models read the flat feature vector as a sequence of
//! `L = max(m, n)` steps, oldest first. Step `s` carries
//! `[x_{t-(L-s)}, z_{1,t-(L-s)}, .., z_{K,t-(L-s)}]`, with zeros in place of
//! any lag beyond `m` (for `x`) or `n` (for `z`). The prediction is a linear
//! readout of the final hidden state of the last layer.
//!
//! Parameter layout, per layer: for each gate a block `W_x (h×e)`, `W_h (h×h)`,
//! `b (h)` (row-major), gates ordered RNN `[h]`, LSTM `[i, f, g, o]`,
//! GRU `[z, r, n]`; then the readout `w (h)`, `c`. The MLP stores `W (h×in)`,
//! `b (h)` per layer followed by the readout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Architecture, ForecastModel, ModelKind, TrainingRecord};
use crate::autodiff::{Scalar, Tape, Var};
use crate::data::{x_lag_position, z_lag_position, LaggedDataset};
use crate::error::{domain, Error, Result};

fn gates(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Lstm => 4,
        ModelKind::Gru => 3,
        _ => 1,
    }
}

pub(super) fn param_count(kind: ModelKind, arch: Architecture, dim: usize, step_dim: usize) -> usize {
    let h = arch.hidden;
    let body: usize = (0..arch.layers)
        .map(|l| match kind {
            ModelKind::Mlp => {
                let input = if l == 0 { dim } else { h };
                h * (input + 1)
            }
            _ => {
                let input = if l == 0 { step_dim } else { h };
                gates(kind) * h * (input + h + 1)
            }
        })
        .sum();
    body + h + 1
}

/// Sequential reader over a flat parameter slice.
struct Cursor<'a, S> {
    params: &'a [S],
    at: usize,
}

impl<'a, S: Scalar> Cursor<'a, S> {
    fn take(&mut self, len: usize) -> &'a [S] {
        let out = &self.params[self.at..self.at + len];
        self.at += len;
        out
    }

    /// `W u + b` for a row-major `rows × u.len()` matrix followed by `rows` biases.
    fn dense(&mut self, rows: usize, u: &[S]) -> Vec<S> {
        let w = self.take(rows * u.len());
        let b = self.take(rows);
        (0..rows)
            .map(|r| dot(&w[r * u.len()..(r + 1) * u.len()], u, b[r]))
            .collect()
    }

    /// `W_x u + W_h h + b` for one gate.
    fn gate(&mut self, hidden: usize, u: &[S], h: &[S]) -> Vec<S> {
        let wx = self.take(hidden * u.len());
        let wh = self.take(hidden * hidden);
        let b = self.take(hidden);
        (0..hidden)
            .map(|r| {
                let acc = dot(&wx[r * u.len()..(r + 1) * u.len()], u, b[r]);
                dot(&wh[r * hidden..(r + 1) * hidden], h, acc)
            })
            .collect()
    }
}

fn dot<S: Scalar>(w: &[S], u: &[S], init: S) -> S {
    w.iter().zip(u).fold(init, |acc, (&a, &b)| acc + a * b)
}

fn sequence<S: Scalar>(features: &[S], m: usize, n: usize, k: usize) -> Vec<Vec<S>> {
    let len = m.max(n);
    (0..len)
        .map(|s| {
            let lag = len - s;
            let mut step = Vec::with_capacity(1 + k);
            step.push(if lag <= m { features[x_lag_position(lag)] } else { S::lift(0.0) });
            for var in 0..k {
                step.push(if lag <= n {
                    features[z_lag_position(m, n, var, lag)]
                } else {
                    S::lift(0.0)
                });
            }
            step
        })
        .collect()
}

pub(super) fn forward<S: Scalar>(
    kind: ModelKind,
    arch: Architecture,
    (m, n, k): (usize, usize, usize),
    params: &[S],
    features: &[S],
) -> S {
    let h = arch.hidden;
    let mut cur = Cursor { params, at: 0 };
    let top = match kind {
        ModelKind::Mlp => {
            let mut act = features.to_vec();
            for _ in 0..arch.layers {
                act = cur.dense(h, &act).into_iter().map(Scalar::tanh).collect();
            }
            act
        }
        ModelKind::Rnn | ModelKind::Lstm | ModelKind::Gru => {
            let mut inputs = sequence(features, m, n, k);
            for _ in 0..arch.layers {
                // each layer reads its own weights once, then runs the whole sequence
                let start = cur.at;
                let mut hid = vec![S::lift(0.0); h];
                let mut cell = vec![S::lift(0.0); h];
                let mut outputs = Vec::with_capacity(inputs.len());
                for u in &inputs {
                    cur.at = start;
                    hid = step(kind, &mut cur, h, u, &hid, &mut cell);
                    outputs.push(hid.clone());
                }
                let e = inputs.first().map_or(0, Vec::len);
                cur.at = start + gates(kind) * h * (e + h + 1);
                inputs = outputs;
            }
            inputs.pop().unwrap_or_else(|| vec![S::lift(0.0); h])
        }
        ModelKind::Arx => unreachable!("ARX has its own forward pass"),
    };
    let w = cur.take(h);
    let c = cur.take(1)[0];
    dot(w, &top, c)
}

fn step<S: Scalar>(kind: ModelKind, cur: &mut Cursor<'_, S>, h: usize, u: &[S], hid: &[S], cell: &mut [S]) -> Vec<S> {
    match kind {
        ModelKind::Rnn => cur.gate(h, u, hid).into_iter().map(Scalar::tanh).collect(),
        ModelKind::Lstm => {
            let i = cur.gate(h, u, hid);
            let f = cur.gate(h, u, hid);
            let g = cur.gate(h, u, hid);
            let o = cur.gate(h, u, hid);
            (0..h)
                .map(|j| {
                    cell[j] = f[j].sigmoid() * cell[j] + i[j].sigmoid() * g[j].tanh();
                    o[j].sigmoid() * cell[j].tanh()
                })
                .collect()
        }
        ModelKind::Gru => {
            let z = cur.gate(h, u, hid);
            let r = cur.gate(h, u, hid);
            let z: Vec<S> = z.into_iter().map(Scalar::sigmoid).collect();
            let reset: Vec<S> = r.into_iter().zip(hid).map(|(r, &hv)| r.sigmoid() * hv).collect();
            let cand = cur.gate(h, u, &reset);
            (0..h)
                .map(|j| {
                    let nj = cand[j].tanh();
                    nj + (hid[j] - nj) * z[j]
                })
                .collect()
        }
        _ => unreachable!(),
    }
}

/// Parameter update rule for neural training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent.
    Gd,
    /// Heavy-ball momentum.
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyperparameters for [`fit_neural`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Rows per update; `None` means the full training set.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Record the training loss every this many epochs.
    pub checkpoint_every: usize,
    pub arch: Architecture,
}

impl Default for TrainingHyper {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.01,
            batch_size: None,
            seed: 0,
            optimizer: Optimizer::adam(),
            checkpoint_every: 50,
            arch: Architecture::default(),
        }
    }
}

fn init_params(kind: ModelKind, arch: Architecture, dim: usize, step_dim: usize, target_mean: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let h = arch.hidden;
    let mut p = Vec::with_capacity(param_count(kind, arch, dim, step_dim));
    let mut uniform = |p: &mut Vec<f64>, count: usize, fan_in: usize, fan_out: usize| {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        p.extend((0..count).map(|_| rng.random_range(-a..a)));
    };
    for l in 0..arch.layers {
        match kind {
            ModelKind::Mlp => {
                let input = if l == 0 { dim } else { h };
                uniform(&mut p, h * input, input, h);
                p.extend(std::iter::repeat_n(0.0, h));
            }
            _ => {
                let input = if l == 0 { step_dim } else { h };
                for g in 0..gates(kind) {
                    uniform(&mut p, h * input, input, h);
                    uniform(&mut p, h * h, h, h);
                    // LSTM forget gate starts open
                    let bias = if kind == ModelKind::Lstm && g == 1 { 1.0 } else { 0.0 };
                    p.extend(std::iter::repeat_n(bias, h));
                }
            }
        }
    }
    uniform(&mut p, h, h, 1);
    p.push(target_mean);
    p
}

const CHUNK: usize = 8;

/// Mean squared error over `rows` and its gradient with respect to `params`.
fn loss_and_gradient(model: &ForecastModel, params: &[f64], data: &LaggedDataset, rows: &[usize]) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let tape = Tape::with_capacity(4096);
            let p = tape.vars(params);
            let mut loss = Var::constant(0.0);
            for &r in chunk {
                let feats: Vec<Var<'_>> = data.features()[r].iter().map(|&v| Var::constant(v)).collect();
                let pred = model.forward_with(&p, &feats);
                loss = loss + (pred - data.targets()[r]).square();
            }
            (loss.value(), tape.gradient(loss).wrt_all(&p))
        })
        .collect();
    let scale = 1.0 / rows.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for (l, g) in partials {
        total += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    (total * scale, grad)
}

/// Trains a neural forecaster by minimizing the training MSE.
pub fn fit_neural(train: &LaggedDataset, kind: ModelKind, hyper: &TrainingHyper) -> Result<ForecastModel> {
    if kind == ModelKind::Arx {
        return Err(domain("ARX is fit by least squares; use fit_arx"));
    }
    if train.is_empty() {
        return Err(domain("empty training set"));
    }
    if hyper.arch.hidden == 0 || hyper.arch.layers == 0 {
        return Err(domain("hidden width and layer count must be positive"));
    }
    if !(hyper.learning_rate > 0.0) {
        return Err(domain("learning rate must be positive"));
    }
    let (m, n) = train.lags();
    let k = train.num_exogenous();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let target_mean = train.targets().iter().sum::<f64>() / train.len() as f64;
    let params = init_params(kind, hyper.arch, train.feature_dim(), 1 + k, target_mean, &mut rng);
    let record = TrainingRecord {
        epochs: hyper.epochs,
        learning_rate: hyper.learning_rate,
        seed: hyper.seed,
        train_mse: None,
        test_mse: None,
        loss_checkpoints: Vec::new(),
    };
    let mut model = ForecastModel::from_parts(kind, (m, n, k), hyper.arch, params, record)?;
    let mut params = model.params.clone();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = hyper.batch_size.unwrap_or(train.len()).clamp(1, train.len());
    let mut first = vec![0.0; params.len()];
    let mut second = vec![0.0; params.len()];
    let mut updates = 0i32;
    let mut checkpoints = Vec::new();
    let every = hyper.checkpoint_every.max(1);

    for epoch in 0..hyper.epochs {
        if batch < train.len() {
            // Fisher-Yates with the seeded stream keeps minibatch order reproducible
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        for rows in order.chunks(batch) {
            let (loss, grad) = loss_and_gradient(&model, &params, train, rows);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            updates += 1;
            apply_update(hyper, &mut params, &grad, &mut first, &mut second, updates);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        if epoch % every == 0 {
            model.params.clone_from(&params);
            checkpoints.push((epoch, super::mse_with(|f| model.forward(f), train)));
        }
    }

    model.params = params;
    let train_mse = super::mse_with(|f| model.forward(f), train);
    if !train_mse.is_finite() {
        return Err(Error::TrainingDiverged { epoch: hyper.epochs });
    }
    checkpoints.push((hyper.epochs, train_mse));
    let rec = model.training_mut();
    rec.train_mse = Some(train_mse);
    rec.loss_checkpoints = checkpoints;
    Ok(model)
}

fn apply_update(hyper: &TrainingHyper, params: &mut [f64], grad: &[f64], first: &mut [f64], second: &mut [f64], t: i32) {
    let lr = hyper.learning_rate;
    match hyper.optimizer {
        Optimizer::Gd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
        Optimizer::Momentum { beta } => {
            for ((p, g), v) in params.iter_mut().zip(grad).zip(first.iter_mut()) {
                *v = beta * *v - lr * g;
                *p += *v;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), m1), m2) in params.iter_mut().zip(grad).zip(first.iter_mut()).zip(second.iter_mut()) {
                *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                *p -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
            }
        }
    }
}
