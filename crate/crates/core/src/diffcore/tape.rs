//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every primitive application appends one node holding its output value.
//! Node ids are handed out in creation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use super::array::{gemm, Array, Mat};
use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Training or evaluation behaviour for batchnorm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activation fused into [`Prim::Linear`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    Tanh,
    Sigmoid,
}

/// Primitive operations and their attributes.
///
/// Input arity per primitive:
/// - `MatMul`, `Add`, `Sub`, `Mul`: two inputs. Elementwise ops broadcast
///   numpy-style. `MatMul` takes `[.., m, k] x [k, n]` or `[m, k] x [b, k, n]`.
/// - `Concat`: one or more inputs.
/// - `BatchNorm`: `x, gamma, beta` in train mode, plus `running_mean,
///   running_var` in eval mode.
/// - `Linear`: `x, w` or `x, w, b`, with `w` laid out `[in, out]`.
/// - `Conv1d`: `x [s, t, c_in]`, `w [kernel * c_in, c_out]`, `b [c_out]`.
/// - everything else: one input.
#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Sum {
        axis: usize,
    },
    SumAll,
    Mean {
        axis: usize,
    },
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Softmax {
        axis: usize,
    },
    Log,
    Square,
    /// `x ln x`, continuously extended with 0 at 0.
    XLogX,
    BatchNorm {
        axis: usize,
        mode: Mode,
    },
    /// Elementwise multiplication by a pre-scaled keep mask; an empty mask
    /// is the identity.
    Dropout {
        mask: Vec<f64>,
    },
    Linear {
        act: Activation,
    },
    Conv1d {
        kernel: usize,
    },
    MaxPool1d {
        width: usize,
    },
}

pub const BATCHNORM_EPS: f64 = 1e-5;

impl Prim {
    /// Stable name used in error messages and gradient-check reports.
    pub fn name(&self) -> &'static str {
        match self {
            Prim::MatMul => "matmul",
            Prim::Add => "add",
            Prim::Sub => "subtract",
            Prim::Mul => "multiply",
            Prim::Scale(_) => "scale",
            Prim::Concat { .. } => "concat",
            Prim::Slice { .. } => "slice",
            Prim::Reshape { .. } => "reshape",
            Prim::Sum { .. } => "sum",
            Prim::SumAll => "sum_all",
            Prim::Mean { .. } => "mean",
            Prim::Relu => "relu",
            Prim::Elu => "elu",
            Prim::Tanh => "tanh",
            Prim::Sigmoid => "sigmoid",
            Prim::Softmax { .. } => "softmax",
            Prim::Log => "log",
            Prim::Square => "square",
            Prim::XLogX => "xlogx",
            Prim::BatchNorm { .. } => "batchnorm",
            Prim::Dropout { .. } => "dropout",
            Prim::Linear { .. } => "linear",
            Prim::Conv1d { .. } => "conv1d",
            Prim::MaxPool1d { .. } => "max_pool1d",
        }
    }
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    BatchNorm { mean: Vec<f64>, inv_std: Vec<f64> },
    ArgMax(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Option<(Prim, Vec<Var>)>,
    saved: Saved,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    corrupt: Option<&'static str>,
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Array>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.leaves.get(&v.0))
    }

    /// Parameter gradients; parameters the seed does not depend on are skipped.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.leaves.get(&v.0).map(|g| (n.as_str(), g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Perturbs the backward rule of the named primitive. Used only as a
    /// negative control for gradient checking.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, prim_name: &'static str) {
        self.corrupt = Some(prim_name);
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Records a constant or input leaf.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(Node {
            value,
            op: None,
            saved: Saved::None,
        })
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node
    /// so gradients from every use accumulate on it.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Applies a primitive and records it.
    pub fn apply(&mut self, prim: Prim, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::contract(format!("node {} is not on this tape", v.0)));
            }
        }
        let (value, saved) = {
            let nodes = &self.nodes;
            forward(&prim, inputs, |v| &nodes[v.0].value)?
        };
        Ok(self.push(Node {
            value,
            op: Some((prim, inputs.to_vec())),
            saved,
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Prim::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Prim::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Prim::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Prim::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Prim::Scale(c), &[a])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Prim::Concat { axis }, xs)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Prim::Slice { axis, start, end }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Prim::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Prim::Sum { axis }, &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::SumAll, &[a])
    }
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Prim::Mean { axis }, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Relu, &[a])
    }
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Elu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Prim::Softmax { axis }, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Log, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::Square, &[a])
    }
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        self.apply(Prim::XLogX, &[a])
    }
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, act: Activation) -> Result<Var> {
        match b {
            Some(b) => self.apply(Prim::Linear { act }, &[x, w, b]),
            None => self.apply(Prim::Linear { act }, &[x, w]),
        }
    }
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var> {
        self.apply(Prim::Conv1d { kernel }, &[x, w, b])
    }
    pub fn max_pool1d(&mut self, x: Var, width: usize) -> Result<Var> {
        self.apply(Prim::MaxPool1d { width }, &[x])
    }

    /// Batch normalization over every axis except `axis`. Eval mode requires
    /// running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        running: Option<(Var, Var)>,
    ) -> Result<Var> {
        match running {
            None => self.apply(
                Prim::BatchNorm {
                    axis,
                    mode: Mode::Train,
                },
                &[x, gamma, beta],
            ),
            Some((m, v)) => self.apply(
                Prim::BatchNorm {
                    axis,
                    mode: Mode::Eval,
                },
                &[x, gamma, beta, m, v],
            ),
        }
    }

    /// Per-feature batch mean and biased variance recorded by a train-mode
    /// batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[v.0].saved {
            Saved::BatchNorm { mean, inv_std } => {
                let var = inv_std
                    .iter()
                    .map(|s| 1.0 / (s * s) - BATCHNORM_EPS)
                    .collect();
                Some((mean.clone(), var))
            }
            _ => None,
        }
    }

    /// Inverted dropout; identity in eval mode or for `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain {
                op: "dropout",
                detail: format!("p = {p}"),
            });
        }
        let mask = if mode == Mode::Eval || p == 0.0 {
            Vec::new()
        } else {
            let keep = 1.0 / (1.0 - p);
            (0..self.value(x).len())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        self.apply(Prim::Dropout { mask }, &[x])
    }

    /// Recomputes every node from the leaves and returns the fresh values.
    pub fn replay(&self) -> Result<Vec<Array>> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                None => node.value.clone(),
                Some((prim, inputs)) => forward(prim, inputs, |v| &values[v.0])?.0,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar node. Returns gradients for every leaf.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed_value = self.value(seed);
        if seed_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward seed must be scalar, got shape {:?}",
                seed_value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(Array::full(seed_value.shape(), 1.0));
        let mut leaves = HashMap::new();
        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let Some((prim, inputs)) = &node.op else {
                leaves.insert(id, g);
                continue;
            };
            let mut input_grads = backward_rule(prim, inputs, node, &g, |v| &self.nodes[v.0])?;
            if self.corrupt == Some(prim.name()) {
                for ig in input_grads.iter_mut().flatten() {
                    ig.data_mut().iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (inp, ig) in inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        let mut params: Vec<(String, Var)> =
            self.params.iter().map(|(n, v)| (n.clone(), *v)).collect();
        params.sort();
        Ok(Gradients { leaves, params })
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` when viewed as `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 || out[i + pad] == 1 {
            strides[i + pad] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    loop {
        let base_a: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let base_b: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for k in 0..last {
            f(o, base_a + k * la, base_b + k * lb);
            o += 1;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn binary(op: &'static str, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut out = Array::zeros(&shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(&shape, &sa, &sb, |o, i, j| od[o] = f(ad[i], bd[j]));
    Ok(out)
}

/// Sums a gradient of broadcast shape back down to `target`.
fn unbroadcast(g: Array, target: &[usize]) -> Array {
    if g.shape() == target {
        return g;
    }
    let out_shape = g.shape().to_vec();
    let st = broadcast_strides(target, &out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut out = Array::zeros(target);
    let gd = g.data();
    let od = out.data_mut();
    for_each_broadcast(&out_shape, &st, &zeros, |o, t, _| od[t] += gd[o]);
    out
}

/// Like [`binary`] but `f` also receives the broadcast operand indices.
fn binary_grad(
    g: &Array,
    a: &Array,
    b: &Array,
    fa: impl Fn(f64, f64, f64) -> f64,
    fb: impl Fn(f64, f64, f64) -> f64,
) -> (Array, Array) {
    let shape = g.shape().to_vec();
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut ga = Array::zeros(&shape);
    let mut gb = Array::zeros(&shape);
    {
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let gad = ga.data_mut();
        let gbd = gb.data_mut();
        for_each_broadcast(&shape, &sa, &sb, |o, i, j| {
            gad[o] = fa(gd[o], ad[i], bd[j]);
            gbd[o] = fb(gd[o], ad[i], bd[j]);
        });
    }
    (unbroadcast(ga, a.shape()), unbroadcast(gb, b.shape()))
}

fn check_axis(op: &'static str, a: &Array, axis: usize) -> Result<()> {
    if axis >= a.rank() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {:?}", a.shape()),
        ));
    }
    Ok(())
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn activate(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Derivative expressed through the activation output `y`.
fn activate_grad(act: Activation, y: f64) -> f64 {
    match act {
        Activation::Identity => 1.0,
        Activation::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Elu => {
            if y > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        Activation::Tanh => 1.0 - y * y,
        Activation::Sigmoid => y * (1.0 - y),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const XLOGX_FLOOR: f64 = f64::MIN_POSITIVE;

// ---------------------------------------------------------------------------
// forward rules

fn arity(prim: &Prim, n: usize) -> Result<()> {
    let ok = match prim {
        Prim::MatMul | Prim::Add | Prim::Sub | Prim::Mul => n == 2,
        Prim::Concat { .. } => n >= 1,
        Prim::BatchNorm {
            mode: Mode::Train, ..
        } => n == 3,
        Prim::BatchNorm {
            mode: Mode::Eval, ..
        } => n == 5,
        Prim::Linear { .. } => n == 2 || n == 3,
        Prim::Conv1d { .. } => n == 3,
        _ => n == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::dim(
            prim.name(),
            format!("wrong number of inputs ({n})"),
        ))
    }
}

fn forward<'a>(
    prim: &Prim,
    inputs: &[Var],
    val: impl Fn(Var) -> &'a Array,
) -> Result<(Array, Saved)> {
    arity(prim, inputs.len())?;
    let x = val(inputs[0]);
    let name = prim.name();
    let out = match prim {
        Prim::MatMul => matmul_forward(x, val(inputs[1]))?,
        Prim::Add => binary(name, x, val(inputs[1]), |a, b| a + b)?,
        Prim::Sub => binary(name, x, val(inputs[1]), |a, b| a - b)?,
        Prim::Mul => binary(name, x, val(inputs[1]), |a, b| a * b)?,
        Prim::Scale(c) => x.map(|v| v * c),
        Prim::Concat { axis } => {
            let parts: Vec<&Array> = inputs.iter().map(|&v| val(v)).collect();
            concat_forward(&parts, *axis)?
        }
        Prim::Slice { axis, start, end } => {
            check_axis(name, x, *axis)?;
            let (outer, len, inner) = x.axis_split(*axis);
            if start > end || *end > len {
                return Err(Error::dim(
                    name,
                    format!("range {start}..{end} on extent {len}"),
                ));
            }
            let w = end - start;
            let mut shape = x.shape().to_vec();
            shape[*axis] = w;
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            Array::new(shape, data)?
        }
        Prim::Reshape { shape } => x.clone().reshape(shape)?,
        Prim::Sum { axis } | Prim::Mean { axis } => {
            check_axis(name, x, *axis)?;
            let (outer, len, inner) = x.axis_split(*axis);
            let mut out = Array::zeros(&without_axis(x.shape(), *axis));
            let od = out.data_mut();
            for o in 0..outer {
                for k in 0..len {
                    let row = &x.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (acc, v) in od[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            if matches!(prim, Prim::Mean { .. }) {
                if len == 0 {
                    return Err(Error::Domain {
                        op: name,
                        detail: "mean over empty axis".into(),
                    });
                }
                let inv = 1.0 / len as f64;
                od.iter_mut().for_each(|v| *v *= inv);
            }
            out
        }
        Prim::SumAll => Array::scalar(x.sum()),
        Prim::Relu => x.map(|v| v.max(0.0)),
        Prim::Elu => x.map(|v| activate(Activation::Elu, v)),
        Prim::Tanh => x.map(f64::tanh),
        Prim::Sigmoid => x.map(sigmoid),
        Prim::Log => x.map(f64::ln),
        Prim::Square => x.map(|v| v * v),
        Prim::XLogX => x.map(|v| if v == 0.0 { 0.0 } else { v * v.ln() }),
        Prim::Softmax { axis } => {
            check_axis(name, x, *axis)?;
            let (outer, len, inner) = x.axis_split(*axis);
            if len == 0 {
                return Err(Error::Domain {
                    op: name,
                    detail: "softmax over empty axis".into(),
                });
            }
            let mut out = x.clone();
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..len {
                        let e = (d[at(k)] - max).exp();
                        d[at(k)] = e;
                        total += e;
                    }
                    for k in 0..len {
                        d[at(k)] /= total;
                    }
                }
            }
            out
        }
        Prim::BatchNorm { axis, mode } => {
            check_axis(name, x, *axis)?;
            let (outer, c, inner) = x.axis_split(*axis);
            let gamma = val(inputs[1]);
            let beta = val(inputs[2]);
            if gamma.len() != c || beta.len() != c {
                return Err(Error::dim(
                    name,
                    format!("{c} features but affine of {}", gamma.len()),
                ));
            }
            let m = outer * inner;
            let (mean, var) = match mode {
                Mode::Train => {
                    if m == 0 {
                        return Err(Error::Domain {
                            op: name,
                            detail: "empty batch".into(),
                        });
                    }
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for o in 0..outer {
                        for k in 0..c {
                            let row = &x.data()[(o * c + k) * inner..(o * c + k + 1) * inner];
                            mean[k] += row.iter().sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m as f64);
                    for o in 0..outer {
                        for k in 0..c {
                            let row = &x.data()[(o * c + k) * inner..(o * c + k + 1) * inner];
                            var[k] += row.iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>();
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m as f64);
                    (mean, var)
                }
                Mode::Eval => {
                    let rm = val(inputs[3]);
                    let rv = val(inputs[4]);
                    if rm.len() != c || rv.len() != c {
                        return Err(Error::dim(name, "running statistics size mismatch"));
                    }
                    (rm.data().to_vec(), rv.data().to_vec())
                }
            };
            let inv_std: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
                .collect();
            let mut out = Array::zeros(x.shape());
            let (g, b) = (gamma.data(), beta.data());
            for o in 0..outer {
                for k in 0..c {
                    let span = (o * c + k) * inner..(o * c + k + 1) * inner;
                    for (y, v) in out.data_mut()[span.clone()].iter_mut().zip(&x.data()[span]) {
                        *y = g[k] * (v - mean[k]) * inv_std[k] + b[k];
                    }
                }
            }
            return Ok((out, Saved::BatchNorm { mean, inv_std }));
        }
        Prim::Dropout { mask } => {
            if mask.is_empty() {
                x.clone()
            } else if mask.len() != x.len() {
                return Err(Error::dim(name, "mask size mismatch"));
            } else {
                let mut out = x.clone();
                out.data_mut()
                    .iter_mut()
                    .zip(mask)
                    .for_each(|(v, m)| *v *= m);
                out
            }
        }
        Prim::Linear { act } => {
            let w = val(inputs[1]);
            if w.rank() != 2 || x.rank() == 0 || x.shape()[x.rank() - 1] != w.shape()[0] {
                return Err(Error::dim(
                    name,
                    format!("input {:?} with weight {:?}", x.shape(), w.shape()),
                ));
            }
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / fan_in.max(1);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = fan_out;
            let mut out = Array::zeros(&shape);
            if let Some(&bv) = inputs.get(2) {
                let b = val(bv);
                if b.len() != fan_out {
                    return Err(Error::dim(name, format!("bias {:?}", b.shape())));
                }
                for row in out.data_mut().chunks_mut(fan_out.max(1)) {
                    row.copy_from_slice(b.data());
                }
                gemm(
                    Mat::new(x.data(), rows, fan_in),
                    Mat::new(w.data(), fan_in, fan_out),
                    1.0,
                    out.data_mut(),
                );
            } else {
                gemm(
                    Mat::new(x.data(), rows, fan_in),
                    Mat::new(w.data(), fan_in, fan_out),
                    0.0,
                    out.data_mut(),
                );
            }
            if *act != Activation::Identity {
                out.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = activate(*act, *v));
            }
            out
        }
        Prim::Conv1d { kernel } => conv1d_forward(x, val(inputs[1]), val(inputs[2]), *kernel)?,
        Prim::MaxPool1d { width } => {
            if x.rank() != 3 || *width == 0 {
                return Err(Error::dim(
                    name,
                    format!("input {:?}, width {width}", x.shape()),
                ));
            }
            let (s, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let to = t / width;
            if to == 0 {
                return Err(Error::dim(
                    name,
                    format!("sequence length {t} shorter than window {width}"),
                ));
            }
            let mut out = Array::zeros(&[s, to, c]);
            let mut arg = vec![0usize; s * to * c];
            for si in 0..s {
                for ti in 0..to {
                    for ci in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for wi in 0..*width {
                            let at = (si * t + ti * width + wi) * c + ci;
                            if x.data()[at] > best {
                                best = x.data()[at];
                                best_at = at;
                            }
                        }
                        let o = (si * to + ti) * c + ci;
                        out.data_mut()[o] = best;
                        arg[o] = best_at;
                    }
                }
            }
            return Ok((out, Saved::ArgMax(arg)));
        }
    };
    Ok((out, Saved::None))
}

fn matmul_forward(a: &Array, b: &Array) -> Result<Array> {
    let op = "matmul";
    match (a.rank(), b.rank()) {
        (ra, 2) if ra >= 2 => {
            let k = a.shape()[ra - 1];
            let (kb, n) = (b.shape()[0], b.shape()[1]);
            if k != kb {
                return Err(Error::dim(op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let rows = a.len() / k.max(1);
            let mut shape = a.shape().to_vec();
            shape[ra - 1] = n;
            let mut out = Array::zeros(&shape);
            gemm(
                Mat::new(a.data(), rows, k),
                Mat::new(b.data(), k, n),
                0.0,
                out.data_mut(),
            );
            Ok(out)
        }
        (2, 3) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (batch, kb, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if k != kb {
                return Err(Error::dim(op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = Array::zeros(&[batch, m, n]);
            for (bi, chunk) in out
                .data_mut()
                .chunks_mut((m * n).max(1))
                .enumerate()
                .take(batch)
            {
                let bs = &b.data()[bi * k * n..(bi + 1) * k * n];
                gemm(Mat::new(a.data(), m, k), Mat::new(bs, k, n), 0.0, chunk);
            }
            Ok(out)
        }
        _ => Err(Error::dim(
            op,
            format!("unsupported ranks {:?} x {:?}", a.shape(), b.shape()),
        )),
    }
}

fn concat_forward(parts: &[&Array], axis: usize) -> Result<Array> {
    let op = "concat";
    let first = parts[0];
    check_axis(op, first, axis)?;
    let mut shape = first.shape().to_vec();
    let mut total = 0;
    for p in parts {
        if p.rank() != first.rank()
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
        total += p.shape()[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = first.axis_split(axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Array::new(shape, data)
}

fn conv1d_forward(x: &Array, w: &Array, b: &Array, kernel: usize) -> Result<Array> {
    let op = "conv1d";
    if x.rank() != 3 || w.rank() != 2 || kernel == 0 {
        return Err(Error::dim(
            op,
            format!("input {:?}, weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (s, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[1];
    if w.shape()[0] != kernel * cin || b.len() != cout {
        return Err(Error::dim(
            op,
            format!("weight {:?} for kernel {kernel}, {cin} channels", w.shape()),
        ));
    }
    if t < kernel {
        return Err(Error::dim(
            op,
            format!("sequence length {t} shorter than kernel {kernel}"),
        ));
    }
    let to = t - kernel + 1;
    let mut out = Array::zeros(&[s, to, cout]);
    for row in out.data_mut().chunks_mut(cout.max(1)) {
        row.copy_from_slice(b.data());
    }
    for si in 0..s {
        let xs = &x.data()[si * t * cin..];
        let os = &mut out.data_mut()[si * to * cout..(si + 1) * to * cout];
        // Window t of the input is the contiguous run xs[t*cin .. (t+kernel)*cin].
        // SAFETY: rows advance by `cin`, the last row ends at t*cin <= xs.len().
        unsafe {
            matrixmultiply::dgemm(
                to,
                kernel * cin,
                cout,
                1.0,
                xs.as_ptr(),
                cin as isize,
                1,
                w.data().as_ptr(),
                cout as isize,
                1,
                1.0,
                os.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// backward rules

fn backward_rule<'a>(
    prim: &Prim,
    inputs: &[Var],
    node: &Node,
    g: &Array,
    node_of: impl Fn(Var) -> &'a Node,
) -> Result<Vec<Option<Array>>> {
    let x = &node_of(inputs[0]).value;
    let y = &node.value;
    let grads = match prim {
        Prim::MatMul => {
            let b = &node_of(inputs[1]).value;
            let (ga, gb) = matmul_backward(x, b, g);
            vec![Some(ga), Some(gb)]
        }
        Prim::Add => {
            let b = &node_of(inputs[1]).value;
            vec![
                Some(unbroadcast(g.clone(), x.shape())),
                Some(unbroadcast(g.clone(), b.shape())),
            ]
        }
        Prim::Sub => {
            let b = &node_of(inputs[1]).value;
            vec![
                Some(unbroadcast(g.clone(), x.shape())),
                Some(unbroadcast(g.map(|v| -v), b.shape())),
            ]
        }
        Prim::Mul => {
            let b = &node_of(inputs[1]).value;
            let (ga, gb) = binary_grad(g, x, b, |g, _, b| g * b, |g, a, _| g * a);
            vec![Some(ga), Some(gb)]
        }
        Prim::Scale(c) => vec![Some(g.map(|v| v * c))],
        Prim::Concat { axis } => {
            let (outer, _, inner) = y.axis_split(*axis);
            let total = y.shape()[*axis];
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for &inp in inputs {
                let p = &node_of(inp).value;
                let w = p.shape()[*axis];
                let mut data = Vec::with_capacity(p.len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    data.extend_from_slice(&g.data()[base..base + w * inner]);
                }
                offset += w;
                out.push(Some(Array::new(p.shape().to_vec(), data)?));
            }
            out
        }
        Prim::Slice { axis, start, end } => {
            let (outer, len, inner) = x.axis_split(*axis);
            let w = end - start;
            let mut gx = Array::zeros(x.shape());
            for o in 0..outer {
                let dst = (o * len + start) * inner;
                gx.data_mut()[dst..dst + w * inner]
                    .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(gx)]
        }
        Prim::Reshape { .. } => vec![Some(g.clone().reshape(x.shape())?)],
        Prim::Sum { axis } | Prim::Mean { axis } => {
            let (outer, len, inner) = x.axis_split(*axis);
            let factor = if matches!(prim, Prim::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut gx = Array::zeros(x.shape());
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for k in 0..len {
                    let dst = &mut gx.data_mut()[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s * factor;
                    }
                }
            }
            vec![Some(gx)]
        }
        Prim::SumAll => vec![Some(Array::full(x.shape(), g.item()))],
        Prim::Relu => vec![Some(g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }))],
        Prim::Elu => {
            let mut gx = g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 });
            for ((d, &gv), (&xv, &yv)) in gx
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(x.data().iter().zip(y.data()))
            {
                if xv <= 0.0 {
                    *d = gv * (yv + 1.0);
                }
            }
            vec![Some(gx)]
        }
        Prim::Tanh => vec![Some(g.zip_map(y, |g, y| g * (1.0 - y * y)))],
        Prim::Sigmoid => vec![Some(g.zip_map(y, |g, y| g * y * (1.0 - y)))],
        Prim::Log => vec![Some(g.zip_map(x, |g, x| g / x))],
        Prim::Square => vec![Some(g.zip_map(x, |g, x| 2.0 * g * x))],
        Prim::XLogX => vec![Some(
            g.zip_map(x, |g, x| g * (x.max(XLOGX_FLOOR).ln() + 1.0)),
        )],
        Prim::Softmax { axis } => {
            let (outer, len, inner) = y.axis_split(*axis);
            let mut gx = Array::zeros(y.shape());
            let (yd, gd) = (y.data(), g.data());
            let gxd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
                    for k in 0..len {
                        gxd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Prim::BatchNorm { axis, mode } => {
            let Saved::BatchNorm { mean, inv_std } = &node.saved else {
                return Err(Error::contract("batchnorm node lost its statistics"));
            };
            let gamma = &node_of(inputs[1]).value;
            let (outer, c, inner) = x.axis_split(*axis);
            let m = (outer * inner) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for o in 0..outer {
                for k in 0..c {
                    let span = (o * c + k) * inner..(o * c + k + 1) * inner;
                    for (&gv, &xv) in g.data()[span.clone()].iter().zip(&x.data()[span]) {
                        let xhat = (xv - mean[k]) * inv_std[k];
                        dgamma[k] += gv * xhat;
                        dbeta[k] += gv;
                        let dxhat = gv * gamma.data()[k];
                        sum_dxhat[k] += dxhat;
                        sum_dxhat_xhat[k] += dxhat * xhat;
                    }
                }
            }
            let mut gx = Array::zeros(x.shape());
            for o in 0..outer {
                for k in 0..c {
                    let span = (o * c + k) * inner..(o * c + k + 1) * inner;
                    let gk = gamma.data()[k];
                    for ((d, &gv), &xv) in gx.data_mut()[span.clone()]
                        .iter_mut()
                        .zip(&g.data()[span.clone()])
                        .zip(&x.data()[span])
                    {
                        let dxhat = gv * gk;
                        *d = match mode {
                            Mode::Eval => dxhat * inv_std[k],
                            Mode::Train => {
                                let xhat = (xv - mean[k]) * inv_std[k];
                                inv_std[k] / m
                                    * (m * dxhat - sum_dxhat[k] - xhat * sum_dxhat_xhat[k])
                            }
                        };
                    }
                }
            }
            let gamma_shape = gamma.shape().to_vec();
            let beta_shape = node_of(inputs[2]).value.shape().to_vec();
            let mut out = vec![
                Some(gx),
                Some(Array::new(gamma_shape, dgamma)?),
                Some(Array::new(beta_shape, dbeta)?),
            ];
            if *mode == Mode::Eval {
                out.extend([None, None]);
            }
            out
        }
        Prim::Dropout { mask } => {
            if mask.is_empty() {
                vec![Some(g.clone())]
            } else {
                let mut gx = g.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(mask)
                    .for_each(|(v, m)| *v *= m);
                vec![Some(gx)]
            }
        }
        Prim::Linear { act } => {
            let w = &node_of(inputs[1]).value;
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / fan_in.max(1);
            let pre = if *act == Activation::Identity {
                g.clone()
            } else {
                g.zip_map(y, |g, y| g * activate_grad(*act, y))
            };
            let mut gx = Array::zeros(x.shape());
            gemm(
                Mat::new(pre.data(), rows, fan_out),
                Mat::new(w.data(), fan_in, fan_out).t(),
                0.0,
                gx.data_mut(),
            );
            let mut gw = Array::zeros(w.shape());
            gemm(
                Mat::new(x.data(), rows, fan_in).t(),
                Mat::new(pre.data(), rows, fan_out),
                0.0,
                gw.data_mut(),
            );
            let mut out = vec![Some(gx), Some(gw)];
            if inputs.len() == 3 {
                let mut gb = vec![0.0; fan_out];
                for row in pre.data().chunks(fan_out.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push(Some(Array::new(
                    node_of(inputs[2]).value.shape().to_vec(),
                    gb,
                )?));
            }
            out
        }
        Prim::Conv1d { kernel } => {
            let w = &node_of(inputs[1]).value;
            let b = &node_of(inputs[2]).value;
            let (s, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = w.shape()[1];
            let to = t - kernel + 1;
            let kc = kernel * cin;
            let mut gx = Array::zeros(x.shape());
            let mut gw = Array::zeros(w.shape());
            let mut gb = vec![0.0; cout];
            let mut dcol = vec![0.0; to * kc];
            for si in 0..s {
                let gs = &g.data()[si * to * cout..(si + 1) * to * cout];
                let xs = &x.data()[si * t * cin..];
                // SAFETY: same window view as the forward pass, transposed.
                unsafe {
                    matrixmultiply::dgemm(
                        kc,
                        to,
                        cout,
                        1.0,
                        xs.as_ptr(),
                        1,
                        cin as isize,
                        gs.as_ptr(),
                        cout as isize,
                        1,
                        1.0,
                        gw.data_mut().as_mut_ptr(),
                        cout as isize,
                        1,
                    );
                }
                gemm(
                    Mat::new(gs, to, cout),
                    Mat::new(w.data(), kc, cout).t(),
                    0.0,
                    &mut dcol,
                );
                let gxs = &mut gx.data_mut()[si * t * cin..(si + 1) * t * cin];
                for ti in 0..to {
                    for (d, v) in gxs[ti * cin..ti * cin + kc]
                        .iter_mut()
                        .zip(&dcol[ti * kc..(ti + 1) * kc])
                    {
                        *d += v;
                    }
                }
                for row in gs.chunks(cout.max(1)) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            vec![
                Some(gx),
                Some(gw),
                Some(Array::new(b.shape().to_vec(), gb)?),
            ]
        }
        Prim::MaxPool1d { .. } => {
            let Saved::ArgMax(arg) = &node.saved else {
                return Err(Error::contract("max_pool1d node lost its argmax"));
            };
            let mut gx = Array::zeros(x.shape());
            for (o, &src) in arg.iter().enumerate() {
                gx.data_mut()[src] += g.data()[o];
            }
            vec![Some(gx)]
        }
    };
    Ok(grads)
}

fn matmul_backward(a: &Array, b: &Array, g: &Array) -> (Array, Array) {
    if b.rank() == 2 {
        let k = b.shape()[0];
        let n = b.shape()[1];
        let rows = a.len() / k.max(1);
        let mut ga = Array::zeros(a.shape());
        gemm(
            Mat::new(g.data(), rows, n),
            Mat::new(b.data(), k, n).t(),
            0.0,
            ga.data_mut(),
        );
        let mut gb = Array::zeros(b.shape());
        gemm(
            Mat::new(a.data(), rows, k).t(),
            Mat::new(g.data(), rows, n),
            0.0,
            gb.data_mut(),
        );
        (ga, gb)
    } else {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (batch, n) = (b.shape()[0], b.shape()[2]);
        let mut ga = Array::zeros(a.shape());
        let mut gb = Array::zeros(b.shape());
        for bi in 0..batch {
            let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
            let bs = &b.data()[bi * k * n..(bi + 1) * k * n];
            gemm(
                Mat::new(gs, m, n),
                Mat::new(bs, k, n).t(),
                1.0,
                ga.data_mut(),
            );
            gemm(
                Mat::new(a.data(), m, k).t(),
                Mat::new(gs, m, n),
                0.0,
                &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n],
            );
        }
        (ga, gb)
    }
}
