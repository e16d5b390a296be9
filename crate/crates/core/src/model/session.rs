use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Activation, Array, Mode, ParameterStore, Tape, Var};
use crate::error::Result;

/// Exponential-moving-average weight of the newest batch statistics.
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Batch statistics observed by one train-mode batchnorm layer.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// One forward pass: a fresh tape bound to a read-only parameter store.
///
/// Batchnorm layers in [`Mode::Train`] record their batch statistics; the
/// caller folds them into the running buffers with [`apply_batch_stats`]
/// once it regains mutable access to the store.
pub struct Session<'s, R: Rng = ChaCha8Rng> {
    pub tape: Tape,
    pub store: &'s ParameterStore,
    pub mode: Mode,
    pub rng: R,
    bn_nodes: Vec<(String, Var, usize)>,
}

impl<'s, R: Rng> Session<'s, R> {
    pub fn new(store: &'s ParameterStore, mode: Mode, rng: R) -> Self {
        Session {
            tape: Tape::new(),
            store,
            mode,
            rng,
            bn_nodes: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }

    pub fn input(&mut self, value: Array) -> Var {
        self.tape.leaf(value)
    }

    /// `x @ {prefix}.w + {prefix}.b`, bias optional, activation fused.
    pub fn linear(&mut self, prefix: &str, x: Var, act: Activation) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b_name = format!("{prefix}.b");
        let b = if self.store.contains(&b_name) {
            Some(self.param(&b_name)?)
        } else {
            None
        };
        self.tape.linear(x, w, b, act)
    }

    /// Batchnorm over every axis but the last.
    pub fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let axis = self.tape.value(x).rank() - 1;
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let count = self.tape.value(x).len() / self.tape.value(x).shape()[axis].max(1);
                let out = self.tape.batchnorm(x, gamma, beta, axis, None)?;
                self.bn_nodes.push((prefix.to_string(), out, count));
                Ok(out)
            }
            Mode::Eval => {
                let mean = running(self.store, prefix, "running_mean")?;
                let var = running(self.store, prefix, "running_var")?;
                let m = self.tape.leaf(mean);
                let v = self.tape.leaf(var);
                self.tape.batchnorm(x, gamma, beta, axis, Some((m, v)))
            }
        }
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p == 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, p, self.mode, &mut self.rng)
    }

    /// Statistics gathered by train-mode batchnorm layers, in call order.
    pub fn batch_stats(&self) -> Vec<BatchStats> {
        self.bn_nodes
            .iter()
            .filter_map(|(layer, node, count)| {
                let (mean, var) = self.tape.batch_stats(*node)?;
                let n = *count as f64;
                let unbiased = if *count > 1 { n / (n - 1.0) } else { 1.0 };
                Some(BatchStats {
                    layer: layer.clone(),
                    mean,
                    var: var.iter().map(|v| v * unbiased).collect(),
                })
            })
            .collect()
    }
}

fn running(store: &ParameterStore, prefix: &str, what: &str) -> Result<Array> {
    store
        .buffer(&format!("{prefix}.{what}"))
        .cloned()
        .ok_or_else(|| crate::Error::contract(format!("missing buffer {prefix}.{what}")))
}

/// Folds recorded batch statistics into the running buffers.
pub fn apply_batch_stats(
    store: &mut ParameterStore,
    stats: &[BatchStats],
    momentum: f64,
) -> Result<()> {
    for s in stats {
        for (what, fresh) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{}.{what}", s.layer);
            let buf = store
                .buffer_mut(&name)
                .ok_or_else(|| crate::Error::contract(format!("missing buffer {name}")))?;
            for (r, &f) in buf.data_mut().iter_mut().zip(fresh) {
                *r = (1.0 - momentum) * *r + momentum * f;
            }
        }
    }
    Ok(())
}

/// Registers a Glorot-initialized weight and a zero bias under `prefix`.
pub fn add_linear<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) {
    store.insert_glorot(format!("{prefix}.w"), fan_in, fan_out, rng);
    if bias {
        store.insert(format!("{prefix}.b"), Array::zeros(&[fan_out]));
    }
}

/// Registers batchnorm scale/shift parameters and running buffers.
pub fn add_batchnorm(store: &mut ParameterStore, prefix: &str, features: usize) {
    store.insert(format!("{prefix}.gamma"), Array::full(&[features], 1.0));
    store.insert(format!("{prefix}.beta"), Array::zeros(&[features]));
    store.insert_buffer(format!("{prefix}.running_mean"), Array::zeros(&[features]));
    store.insert_buffer(
        format!("{prefix}.running_var"),
        Array::full(&[features], 1.0),
    );
}
