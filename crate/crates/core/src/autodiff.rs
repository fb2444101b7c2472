//! Scalar reverse-mode differentiation on a tape.
//!
//! Numeric code in this crate is written once against the [`Scalar`] trait.
//! Instantiated with `f64` it is a plain evaluation; instantiated with
//! [`Var`] every primitive is recorded on a [`Tape`] and a single backward
//! sweep yields the gradient with respect to all recorded inputs.
//!
//! The primitive set is closed: add, subtract, multiply, divide, negate,
//! scale/shift by constants, `tanh`, `sigmoid`, `exp`, `abs`, `square`, and the
//! sign-preserving power `sign(u)·|u|^p`. Affine maps and squared-error
//! reductions are compositions of these (see [`affine`] and
//! [`weighted_squared_error`]).
//!
//! Constants never touch the tape: a `Var` without a node behaves like a
//! plain number, so model parameters that are not being differentiated cost
//! nothing to record.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Arithmetic needed by the models and objectives in this crate.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    /// Lifts a constant.
    fn lift(v: f64) -> Self;
    fn value(&self) -> f64;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn exp(self) -> Self;
    /// `|u|`, with derivative taken as 0 at the kink.
    fn abs(self) -> Self;
    fn square(self) -> Self;
    /// `sign(u)·|u|^p`, odd and continuously differentiable for `p ≥ 1`.
    fn signed_pow(self, p: f64) -> Self;
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn signed_pow(v: f64, p: f64) -> f64 {
    v.signum() * v.abs().powf(p)
}

impl Scalar for f64 {
    fn lift(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn signed_pow(self, p: f64) -> Self {
        if self == 0.0 {
            0.0
        } else {
            signed_pow(self, p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Shift,
    Scale,
    Tanh,
    Sigmoid,
    Exp,
    Abs,
    Square,
    Pow,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Shift => "shift",
            Op::Scale => "scale",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Pow => "pow",
        }
    }
}

/// One recorded primitive: up to two parents with their local partials.
#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
    arity: u8,
}

/// Append-only record of primitives. Parents always precede children, so the
/// recording order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    inputs: Cell<usize>,
    first_non_finite: Cell<Option<(usize, Op)>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
            ..Self::default()
        }
    }

    /// Records an input slot.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.inputs.set(self.inputs.get() + 1);
        self.push(value, Op::Input, &[])
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: f64, op: Op, parents: &[(u32, f64)]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        let mut node = Node {
            parents: [0; 2],
            partials: [0.0; 2],
            arity: parents.len() as u8,
        };
        for (i, &(p, d)) in parents.iter().enumerate() {
            node.parents[i] = p;
            node.partials[i] = d;
        }
        nodes.push(node);
        if !value.is_finite() && self.first_non_finite.get().is_none() {
            self.first_non_finite.set(Some((idx, op)));
        }
        Var {
            value,
            node: Some((self, idx as u32)),
        }
    }

    /// Fails if any recorded value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            Some((node, op)) => Err(Error::NonFinite {
                node,
                op: op.name(),
            }),
            None => Ok(()),
        }
    }

    /// Accumulates adjoints from `output` back to every node, visiting each
    /// node once in reverse recording order.
    pub fn gradient(&self, output: Var<'_>) -> Gradient {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if let Some((tape, idx)) = output.node {
            assert!(std::ptr::eq(tape, self), "output recorded on a different tape");
            adj[idx as usize] = 1.0;
            for i in (0..=idx as usize).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let node = &nodes[i];
                for j in 0..node.arity as usize {
                    adj[node.parents[j] as usize] += node.partials[j] * a;
                }
            }
        }
        Gradient { adjoints: adj }
    }
}

/// Adjoints of every node with respect to one output.
#[derive(Debug, Clone)]
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    /// d(output)/d(v). Constants have zero gradient.
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        v.node
            .map(|(_, i)| self.adjoints.get(i as usize).copied().unwrap_or(0.0))
            .unwrap_or(0.0)
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(v)).collect()
    }
}

/// A value that is either a constant or a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    value: f64,
    node: Option<(&'t Tape, u32)>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some((_, i)) => write!(f, "Var({}, #{i})", self.value),
            None => write!(f, "Const({})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Self { value, node: None }
    }

    fn unary(self, value: f64, op: Op, d: f64) -> Self {
        match self.node {
            Some((tape, i)) => tape.push(value, op, &[(i, d)]),
            None => Self::constant(value),
        }
    }

    fn binary(self, rhs: Self, value: f64, op: Op, da: f64, db: f64) -> Self {
        match (self.node, rhs.node) {
            (Some((tape, i)), Some((_, j))) => tape.push(value, op, &[(i, da), (j, db)]),
            (Some((tape, i)), None) => tape.push(value, op, &[(i, da)]),
            (None, Some((tape, j))) => tape.push(value, op, &[(j, db)]),
            (None, None) => Self::constant(value),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, Op::Add, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, Op::Sub, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, Op::Mul, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, Op::Div, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, Op::Neg, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.value + rhs, Op::Shift, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.value - rhs, Op::Shift, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.value * rhs, Op::Scale, rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn lift(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, Op::Tanh, 1.0 - t * t)
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.value);
        self.unary(s, Op::Sigmoid, s * (1.0 - s))
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, Op::Exp, e)
    }
    fn abs(self) -> Self {
        let d = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.value.abs(), Op::Abs, d)
    }
    fn square(self) -> Self {
        self.unary(self.value * self.value, Op::Square, 2.0 * self.value)
    }
    fn signed_pow(self, p: f64) -> Self {
        let u = self.value;
        let (v, d) = if u == 0.0 {
            // derivative at 0 is 0 for p > 1
            (0.0, if p == 1.0 { 1.0 } else { 0.0 })
        } else {
            (signed_pow(u, p), p * u.abs().powf(p - 1.0))
        };
        self.unary(v, Op::Pow, d)
    }
}

/// `bias + Σ weights[i]·inputs[i]`.
pub fn affine<S: Scalar>(weights: &[S], inputs: &[S], bias: S) -> S {
    debug_assert_eq!(weights.len(), inputs.len());
    weights
        .iter()
        .zip(inputs)
        .fold(bias, |acc, (&w, &u)| acc + w * u)
}

/// `Σ weights[i]·(targets[i] − predictions[i])²`.
pub fn weighted_squared_error<S: Scalar>(predictions: &[S], targets: &[f64], weights: &[f64]) -> S {
    predictions
        .iter()
        .zip(targets)
        .zip(weights)
        .fold(S::lift(0.0), |acc, ((&p, &t), &w)| {
            if w == 0.0 {
                acc
            } else {
                acc + (p - t).square() * w
            }
        })
}

/// Evaluates `f` at `inputs` and returns its value and exact gradient.
pub fn evaluate_with_gradient<F>(f: F, inputs: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars = tape.vars(inputs);
    let out = f(&vars);
    tape.check_finite()?;
    if !out.value.is_finite() {
        return Err(Error::NonFinite {
            node: tape.len(),
            op: "output",
        });
    }
    let grad = tape.gradient(out);
    Ok((out.value, grad.wrt_all(&vars)))
}

/// Default finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central differences `(f(u + h·e_i) − f(u − h·e_i)) / 2h`.
pub fn finite_diff_gradient<F>(f: F, inputs: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut u = inputs.to_vec();
    (0..u.len())
        .map(|i| {
            let orig = u[i];
            u[i] = orig + h;
            let up = f(&u);
            u[i] = orig - h;
            let down = f(&u);
            u[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
