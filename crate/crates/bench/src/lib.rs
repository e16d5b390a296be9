//! Fixtures shared by the kernel benchmarks.

use nri_core::diffcore::ParameterStore;
use nri_core::model::Rollout;
use nri_core::noise::Stream;
use nri_core::train::LossConfig;
use nri_core::{
    Array, DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, ModelConfig, NriModel, Prior,
};
use rand::Rng;

/// Position and velocity channels per object.
pub const FEATURES: usize = 4;

/// Encoder and Markov decoder at the default widths for `n` objects and
/// `frames` observed steps.
pub fn model(n: usize, frames: usize, encoder: EncoderKind) -> NriModel {
    let input_dim = match encoder {
        EncoderKind::Mlp => frames * FEATURES,
        EncoderKind::Cnn => FEATURES,
    };
    NriModel::new(ModelConfig {
        n_objects: n,
        encoder: Some(EncoderConfig {
            kind: encoder,
            hidden: 256,
            k_types: 2,
            input_dim,
            dropout_p: 0.0,
        }),
        decoder: Some(DecoderConfig {
            kind: DecoderKind::Markov,
            hidden: 256,
            k_types: 2,
            n_features: FEATURES,
            skip_first_type: false,
            msg_steps: 2,
        }),
    })
    .expect("valid benchmark model")
}

pub fn params(model: &NriModel) -> ParameterStore {
    model.init_params(&mut Stream::new(0).rng())
}

/// Uniform values in `[-1, 1)` drawn from a fixed stream.
pub fn random(shape: &[usize], seed: u64) -> Array {
    let mut rng = Stream::new(seed).split("bench").rng();
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn loss_config() -> LossConfig {
    LossConfig {
        tau: 0.5,
        sigma_sq: 5e-5,
        prior: Prior::Uniform,
        rollout: Rollout::training(DecoderKind::Markov, 10),
    }
}
