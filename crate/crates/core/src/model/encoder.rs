use rand::Rng;

use super::session::{add_batchnorm, add_linear, Session};
use super::{EncoderConfig, EncoderKind, NriModel};
use crate::diffcore::{Activation, ParameterStore, Var};
use crate::error::{Error, Result};

/// Width of both temporal convolutions in the CNN encoder.
pub const CNN_KERNEL: usize = 5;
/// Max-pool window between the two convolutions.
pub const CNN_POOL: usize = 2;

/// Two ELU layers followed by batchnorm.
fn add_mlp<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    n_in: usize,
    hidden: usize,
    rng: &mut R,
) {
    add_linear(store, &format!("{prefix}.fc1"), n_in, hidden, true, rng);
    add_linear(store, &format!("{prefix}.fc2"), hidden, hidden, true, rng);
    add_batchnorm(store, &format!("{prefix}.bn"), hidden);
}

pub(super) fn init<R: Rng>(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut R) {
    let h = cfg.hidden;
    match cfg.kind {
        EncoderKind::Mlp => {
            add_mlp(store, "enc.mlp1", cfg.input_dim, h, rng);
            add_mlp(store, "enc.mlp2", 2 * h, h, rng);
            add_mlp(store, "enc.mlp3", h, h, rng);
            add_mlp(store, "enc.mlp4", 3 * h, h, rng);
        }
        EncoderKind::Cnn => {
            add_linear(
                store,
                "enc.cnn.conv1",
                CNN_KERNEL * 2 * cfg.input_dim,
                h,
                true,
                rng,
            );
            add_batchnorm(store, "enc.cnn.bn1", h);
            add_linear(store, "enc.cnn.conv2", CNN_KERNEL * h, h, true, rng);
            add_batchnorm(store, "enc.cnn.bn2", h);
            add_linear(store, "enc.cnn.conv_out", h, h, true, rng);
            add_linear(store, "enc.cnn.conv_attn", h, 1, true, rng);
            add_mlp(store, "enc.mlp1", h, h, rng);
            add_mlp(store, "enc.mlp2", h, h, rng);
            add_mlp(store, "enc.mlp3", 3 * h, h, rng);
        }
    }
    add_linear(store, "enc.fc_out", h, cfg.k_types, true, rng);
}

/// Shortest input the CNN encoder accepts: after the first convolution and
/// pooling, the second convolution still needs a full window.
pub fn cnn_min_length() -> usize {
    (CNN_KERNEL - 1) + CNN_POOL * CNN_KERNEL
}

impl NriModel {
    fn mlp_block<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        prefix: &str,
        x: Var,
        dropout: f64,
    ) -> Result<Var> {
        let h = s.linear(&format!("{prefix}.fc1"), x, Activation::Elu)?;
        let h = s.dropout(h, dropout)?;
        let h = s.linear(&format!("{prefix}.fc2"), h, Activation::Elu)?;
        s.batchnorm(&format!("{prefix}.bn"), h)
    }

    /// Edge logits `[B, E, K]` from trajectories `[B, N, T, F]`.
    pub fn encode<R: Rng>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let cfg = self.encoder_cfg()?;
        let shape = s.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.inc.n {
            return Err(Error::dim(
                "encode",
                format!("expected [B, {}, T, F], got {shape:?}", self.inc.n),
            ));
        }
        match cfg.kind {
            EncoderKind::Mlp => self.encode_mlp(s, x, cfg),
            EncoderKind::Cnn => self.encode_cnn(s, x, cfg),
        }
    }

    fn encode_mlp<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        x: Var,
        cfg: &EncoderConfig,
    ) -> Result<Var> {
        let shape = s.tape.value(x).shape().to_vec();
        let (b, n, flat) = (shape[0], shape[1], shape[2] * shape[3]);
        if flat != cfg.input_dim {
            return Err(Error::dim(
                "encode_mlp",
                format!("T*F = {flat}, encoder expects {}", cfg.input_dim),
            ));
        }
        let p = cfg.dropout_p;
        let x = s.tape.reshape(x, &[b, n, flat])?;
        let h = self.mlp_block(s, "enc.mlp1", x, p)?;
        let h = self.inc.node2edge(&mut s.tape, h)?;
        let h = self.mlp_block(s, "enc.mlp2", h, p)?;
        let skip = h;
        let h = self.inc.edge2node(&mut s.tape, h)?;
        let h = self.mlp_block(s, "enc.mlp3", h, p)?;
        let h = self.inc.node2edge(&mut s.tape, h)?;
        let h = s.tape.concat(&[h, skip], 2)?;
        let h = self.mlp_block(s, "enc.mlp4", h, p)?;
        s.linear("enc.fc_out", h, Activation::Identity)
    }

    /// Per-edge time series `[B, E, T, 2F]`, receiver features first.
    fn edge_series<R: Rng>(&self, s: &mut Session<'_, R>, x: Var) -> Result<Var> {
        let shape = s.tape.value(x).shape().to_vec();
        let (b, n, t, f) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = s.tape.reshape(x, &[b, n, t * f])?;
        let e = self.inc.node2edge(&mut s.tape, flat)?;
        let halves = [
            s.tape.slice(e, 2, 0, t * f)?,
            s.tape.slice(e, 2, t * f, 2 * t * f)?,
        ];
        let mut parts = Vec::with_capacity(2);
        for half in halves {
            parts.push(s.tape.reshape(half, &[b, self.inc.e, t, f])?);
        }
        s.tape.concat(&parts, 3)
    }

    /// Attention weights `[B*E, T', 1]` and pooled features `[B*E, H]`.
    pub(crate) fn cnn_block<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        series: Var,
    ) -> Result<(Var, Var)> {
        let shape = s.tape.value(series).shape().to_vec();
        let (b, e, t, c) = (shape[0], shape[1], shape[2], shape[3]);
        if t < cnn_min_length() {
            return Err(Error::contract(format!(
                "CNN encoder needs at least {} time steps, got {t}",
                cnn_min_length()
            )));
        }
        let x = s.tape.reshape(series, &[b * e, t, c])?;
        let h = self.conv(s, "enc.cnn.conv1", x)?;
        let h = s.tape.relu(h)?;
        let h = s.batchnorm("enc.cnn.bn1", h)?;
        let h = s.tape.max_pool1d(h, CNN_POOL)?;
        let h = self.conv(s, "enc.cnn.conv2", h)?;
        let h = s.tape.relu(h)?;
        let h = s.batchnorm("enc.cnn.bn2", h)?;
        // Kernel-1 convolutions are per-step linear maps.
        let out = s.linear("enc.cnn.conv_out", h, Activation::Identity)?;
        let attn = s.linear("enc.cnn.conv_attn", h, Activation::Identity)?;
        let attn = s.tape.softmax(attn, 1)?;
        let weighted = s.tape.mul(out, attn)?;
        let pooled = s.tape.mean(weighted, 1)?;
        Ok((attn, pooled))
    }

    fn conv<R: Rng>(&self, s: &mut Session<'_, R>, prefix: &str, x: Var) -> Result<Var> {
        let w = s.param(&format!("{prefix}.w"))?;
        let b = s.param(&format!("{prefix}.b"))?;
        s.tape.conv1d(x, w, b, CNN_KERNEL)
    }

    fn encode_cnn<R: Rng>(
        &self,
        s: &mut Session<'_, R>,
        x: Var,
        cfg: &EncoderConfig,
    ) -> Result<Var> {
        let shape = s.tape.value(x).shape().to_vec();
        if shape[3] != cfg.input_dim {
            return Err(Error::dim(
                "encode_cnn",
                format!("F = {}, encoder expects {}", shape[3], cfg.input_dim),
            ));
        }
        let p = cfg.dropout_p;
        let series = self.edge_series(s, x)?;
        let (_, pooled) = self.cnn_block(s, series)?;
        let h = s
            .tape
            .reshape(pooled, &[shape[0], self.inc.e, cfg.hidden])?;
        let h = self.mlp_block(s, "enc.mlp1", h, p)?;
        let skip = h;
        let h = self.inc.edge2node(&mut s.tape, h)?;
        let h = self.mlp_block(s, "enc.mlp2", h, p)?;
        let h = self.inc.node2edge(&mut s.tape, h)?;
        let h = s.tape.concat(&[h, skip], 2)?;
        let h = self.mlp_block(s, "enc.mlp3", h, p)?;
        s.linear("enc.fc_out", h, Activation::Identity)
    }
}
