//! Encoder, relaxed edge sampling and decoders of the relational model.
//!
//! Parameters live in a [`ParameterStore`] under dotted names (`enc.mlp1.fc1.w`,
//! `dec.msg_fc1.0.b`, ...). All networks run on a [`Session`], which owns the
//! tape for one forward/backward pass.

mod decoder;
mod encoder;
mod infer;
mod sampling;
mod session;

pub use decoder::Rollout;
pub use encoder::{cnn_min_length, CNN_KERNEL, CNN_POOL};
pub use infer::{constant_edges, graphs_one_hot};
pub use sampling::{argmax, discretize, edge_types, gumbel_noise, sample_concrete};
pub use session::{
    add_batchnorm, add_linear, apply_batch_stats, BatchStats, Session, BATCHNORM_MOMENTUM,
};

use rand::Rng;

use crate::diffcore::ParameterStore;
use crate::error::{Error, Result};
use crate::graphops::{build_incidence, IncidenceMatrices};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden: usize,
    pub k_types: usize,
    /// `T * F` for the MLP encoder, `F` for the CNN encoder.
    pub input_dim: usize,
    pub dropout_p: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_types < 2 {
            return Err(Error::Config(format!(
                "encoder needs at least 2 edge types, got {}",
                self.k_types
            )));
        }
        if self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Markov,
    Recurrent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub hidden: usize,
    pub k_types: usize,
    pub n_features: usize,
    /// Edge type 0 carries no messages.
    pub skip_first_type: bool,
    /// Prediction steps between ground-truth inputs during training.
    pub msg_steps: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_types < 1 || (self.skip_first_type && self.k_types < 2) {
            return Err(Error::Config(format!(
                "decoder with {} edge types (skip_first_type = {})",
                self.k_types, self.skip_first_type
            )));
        }
        if self.hidden == 0 || self.n_features == 0 || self.msg_steps == 0 {
            return Err(Error::Config(
                "decoder widths and prediction steps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn first_type(&self) -> usize {
        usize::from(self.skip_first_type)
    }
}

/// Encoder and/or decoder over a fixed number of objects. Baselines that
/// train only one half leave the other `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_objects: usize,
    pub encoder: Option<EncoderConfig>,
    pub decoder: Option<DecoderConfig>,
}

pub struct NriModel {
    pub cfg: ModelConfig,
    pub inc: IncidenceMatrices,
}

impl NriModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if let Some(e) = &cfg.encoder {
            e.validate()?;
        }
        if let Some(d) = &cfg.decoder {
            d.validate()?;
        }
        if let (Some(e), Some(d)) = (&cfg.encoder, &cfg.decoder) {
            if e.k_types != d.k_types {
                return Err(Error::Config(format!(
                    "encoder K = {} but decoder K = {}",
                    e.k_types, d.k_types
                )));
            }
        }
        let inc = build_incidence(cfg.n_objects).map_err(|e| Error::Config(e.to_string()))?;
        Ok(NriModel { cfg, inc })
    }

    pub fn encoder_cfg(&self) -> Result<&EncoderConfig> {
        self.cfg
            .encoder
            .as_ref()
            .ok_or_else(|| Error::contract("model has no encoder"))
    }

    pub fn decoder_cfg(&self) -> Result<&DecoderConfig> {
        self.cfg
            .decoder
            .as_ref()
            .ok_or_else(|| Error::contract("model has no decoder"))
    }

    pub fn n_edges(&self) -> usize {
        self.inc.e
    }

    /// Fresh parameters: Glorot-uniform weights, zero biases, unit batchnorm.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParameterStore {
        let mut store = ParameterStore::new();
        if let Some(e) = &self.cfg.encoder {
            encoder::init(&mut store, e, rng);
        }
        if let Some(d) = &self.cfg.decoder {
            decoder::init(&mut store, d, rng);
        }
        store
    }
}
