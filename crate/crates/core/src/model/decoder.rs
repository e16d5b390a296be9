use rand::Rng;

use super::session::{add_linear, Session};
use super::{DecoderConfig, DecoderKind, NriModel};
use crate::diffcore::{Activation, Array, ParameterStore, Var};
use crate::error::{Error, Result};

/// Which inputs the decoder sees while unrolling over a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rollout {
    /// Ground truth at steps `0, M, 2M, ..`; own predictions in between.
    TrainMarkov(usize),
    /// Ground truth for the first `T - M` inputs, own predictions after.
    TrainRecurrent(usize),
    /// Ground truth for the first `burn_in` inputs, own predictions after.
    FreeRun(usize),
}

impl Rollout {
    /// Training schedule for a decoder kind.
    pub fn training(kind: DecoderKind, m: usize) -> Self {
        match kind {
            DecoderKind::Markov => Rollout::TrainMarkov(m),
            DecoderKind::Recurrent => Rollout::TrainRecurrent(m),
        }
    }

    /// Whether input step `t` (0-based) of a `t_len`-frame trajectory is
    /// ground truth.
    pub fn teacher_forced(self, t: usize, t_len: usize) -> bool {
        match self {
            Rollout::TrainMarkov(m) => t.is_multiple_of(m),
            Rollout::TrainRecurrent(m) => t < t_len - m,
            Rollout::FreeRun(burn_in) => t < burn_in,
        }
    }

    fn validate(self, t_len: usize) -> Result<()> {
        if t_len < 2 {
            return Err(Error::contract(format!(
                "rollout needs at least 2 frames, got {t_len}"
            )));
        }
        match self {
            Rollout::TrainMarkov(m) | Rollout::TrainRecurrent(m) if m == 0 || m >= t_len => Err(
                Error::contract(format!("prediction steps M = {m} must lie in 1..{t_len}")),
            ),
            Rollout::FreeRun(0) => {
                Err(Error::contract("free run needs at least one burn-in frame"))
            }
            _ => Ok(()),
        }
    }
}

pub(super) fn init<R: Rng>(store: &mut ParameterStore, cfg: &DecoderConfig, rng: &mut R) {
    let (h, f) = (cfg.hidden, cfg.n_features);
    let msg_in = match cfg.kind {
        DecoderKind::Markov => 2 * f,
        DecoderKind::Recurrent => 2 * h,
    };
    for k in cfg.first_type()..cfg.k_types {
        add_linear(store, &format!("dec.msg_fc1.{k}"), msg_in, h, true, rng);
        add_linear(store, &format!("dec.msg_fc2.{k}"), h, h, true, rng);
    }
    let out_in = match cfg.kind {
        DecoderKind::Markov => f + h,
        DecoderKind::Recurrent => h,
    };
    if cfg.kind == DecoderKind::Recurrent {
        for gate in ["r", "i", "n"] {
            add_linear(store, &format!("dec.input_{gate}"), f, h, true, rng);
            add_linear(store, &format!("dec.hidden_{gate}"), h, h, false, rng);
        }
    }
    add_linear(store, "dec.out_fc1", out_in, h, true, rng);
    add_linear(store, "dec.out_fc2", h, h, true, rng);
    add_linear(store, "dec.out_fc3", h, f, true, rng);
}

impl NriModel {
    /// Edge-type weighted messages `[.., E, H]` from node states `[.., N, D]`.
    fn messages<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        nodes: Var,
        z: Var,
        average: bool,
    ) -> Result<Var> {
        let cfg = self.decoder_cfg()?;
        let z_shape = s.tape.value(z).shape().to_vec();
        let n_shape = s.tape.value(nodes).shape().to_vec();
        let batch_ok = z_shape.len() == n_shape.len()
            && z_shape[..z_shape.len() - 2] == n_shape[..n_shape.len() - 2];
        if !batch_ok
            || z_shape[z_shape.len() - 2] != self.inc.e
            || z_shape[z_shape.len() - 1] != cfg.k_types
        {
            return Err(Error::dim(
                "decode",
                format!(
                    "edge sample {z_shape:?} for nodes {n_shape:?}, E = {}, K = {}",
                    self.inc.e, cfg.k_types
                ),
            ));
        }
        let pre = self.inc.node2edge(&mut s.tape, nodes)?;
        let axis = z_shape.len() - 1;
        let types = cfg.first_type()..cfg.k_types;
        let weight = if average {
            1.0 / types.len() as f64
        } else {
            1.0
        };
        let mut total: Option<Var> = None;
        for k in types {
            let m = s.linear(&format!("dec.msg_fc1.{k}"), pre, Activation::Relu)?;
            let m = s.linear(&format!("dec.msg_fc2.{k}"), m, Activation::Relu)?;
            let zk = s.tape.slice(z, axis, k, k + 1)?;
            let zk = if average {
                s.tape.scale(zk, weight)?
            } else {
                zk
            };
            let m = s.tape.mul(m, zk)?;
            total = Some(match total {
                None => m,
                Some(acc) => s.tape.add(acc, m)?,
            });
        }
        Ok(total.expect("at least one message type"))
    }

    fn output_mlp<R: Rng>(&self, s: &mut Session<'_, R>, x: Var, h: Var) -> Result<Var> {
        let p = s.linear("dec.out_fc1", h, Activation::Relu)?;
        let p = s.linear("dec.out_fc2", p, Activation::Relu)?;
        let delta = s.linear("dec.out_fc3", p, Activation::Identity)?;
        s.tape.add(x, delta)
    }

    /// One Markov step: `x_t [.., N, F]`, `z [.., E, K]` → `μ_{t+1}`.
    pub fn decode_markov_step<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        x: Var,
        z: Var,
    ) -> Result<Var> {
        let msgs = self.messages(s, x, z, false)?;
        let agg = self.inc.edge2node(&mut s.tape, msgs)?;
        let axis = s.tape.value(x).rank() - 1;
        let hidden = s.tape.concat(&[x, agg], axis)?;
        self.output_mlp(s, x, hidden)
    }

    /// One recurrent step: returns `(μ_{t+1}, h_{t+1})` from `x_t`, `h_t`.
    pub fn decode_recurrent_step<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        x: Var,
        h: Var,
        z: Var,
    ) -> Result<(Var, Var)> {
        let msgs = self.messages(s, h, z, true)?;
        let agg = self.inc.edge2node(&mut s.tape, msgs)?;
        let gate = |s: &mut Session<'_, R>, name: &str, act: Activation| -> Result<Var> {
            let a = s.linear(&format!("dec.input_{name}"), x, Activation::Identity)?;
            let b = s.linear(&format!("dec.hidden_{name}"), agg, Activation::Identity)?;
            let sum = s.tape.add(a, b)?;
            match act {
                Activation::Sigmoid => s.tape.sigmoid(sum),
                _ => Ok(sum),
            }
        };
        let r = gate(s, "r", Activation::Sigmoid)?;
        let i = gate(s, "i", Activation::Sigmoid)?;
        let xn = s.linear("dec.input_n", x, Activation::Identity)?;
        let hn = s.linear("dec.hidden_n", agg, Activation::Identity)?;
        let rhn = s.tape.mul(r, hn)?;
        let pre_n = s.tape.add(xn, rhn)?;
        let n = s.tape.tanh(pre_n)?;
        // (1 - i) * n + i * h == n + i * (h - n)
        let diff = s.tape.sub(h, n)?;
        let gated = s.tape.mul(i, diff)?;
        let h_next = s.tape.add(n, gated)?;
        let mu = self.output_mlp(s, x, h_next)?;
        Ok((mu, h_next))
    }

    /// Unrolls the decoder over `x [B, N, T, F]` with a fixed edge sample
    /// `z [B, E, K]`. Returns predictions `[B, N, T-1, F]` for frames `1..T`.
    pub fn rollout<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        x: Var,
        z: Var,
        mode: Rollout,
    ) -> Result<Var> {
        let cfg = self.decoder_cfg()?;
        let shape = s.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.inc.n || shape[3] != cfg.n_features {
            return Err(Error::dim(
                "rollout",
                format!(
                    "expected [B, {}, T, {}], got {shape:?}",
                    self.inc.n, cfg.n_features
                ),
            ));
        }
        let (b, n, t_len, f) = (shape[0], shape[1], shape[2], shape[3]);
        mode.validate(t_len)?;
        let mut hidden = match cfg.kind {
            DecoderKind::Recurrent => Some(s.input(Array::zeros(&[b, n, cfg.hidden]))),
            DecoderKind::Markov => None,
        };
        let mut preds = Vec::with_capacity(t_len - 1);
        let mut last: Option<Var> = None;
        for t in 0..t_len - 1 {
            let input = match last {
                Some(mu) if !mode.teacher_forced(t, t_len) => mu,
                _ => {
                    let frame = s.tape.slice(x, 2, t, t + 1)?;
                    s.tape.reshape(frame, &[b, n, f])?
                }
            };
            let mu = match hidden {
                None => self.decode_markov_step(s, input, z)?,
                Some(h) => {
                    let (mu, h_next) = self.decode_recurrent_step(s, input, h, z)?;
                    hidden = Some(h_next);
                    mu
                }
            };
            last = Some(mu);
            preds.push(s.tape.reshape(mu, &[b, n, 1, f])?);
        }
        s.tape.concat(&preds, 2)
    }

    /// Continues `x [B, N, T, F]` for `steps` frames after its last frame.
    /// Returns `[B, N, steps, F]`. The recurrent decoder first consumes the
    /// whole prefix; the Markov decoder only needs the last frame.
    pub fn predict<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        x: Var,
        z: Var,
        steps: usize,
    ) -> Result<Var> {
        let cfg = self.decoder_cfg()?;
        let shape = s.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[2] == 0 {
            return Err(Error::dim(
                "predict",
                format!("expected [B, N, T, F], got {shape:?}"),
            ));
        }
        if steps == 0 {
            return Err(Error::contract("prediction needs at least one step"));
        }
        let (b, n, t_len, f) = (shape[0], shape[1], shape[2], shape[3]);
        let start = match cfg.kind {
            DecoderKind::Markov => t_len - 1,
            DecoderKind::Recurrent => 0,
        };
        let tail = s.tape.slice(x, 2, start, t_len)?;
        let pad = s.input(Array::zeros(&[b, n, steps, f]));
        let padded = s.tape.concat(&[tail, pad], 2)?;
        let all = self.rollout(s, padded, z, Rollout::FreeRun(t_len - start))?;
        let total = s.tape.value(all).shape()[2];
        s.tape.slice(all, 2, total - steps, total)
    }
}
