//! Neural relational inference: infer latent interaction graphs from
//! trajectories of interacting objects while learning their dynamics.

pub mod config;
pub mod diffcore;
pub mod error;
pub mod evalsuite;
pub mod gradsuite;
pub mod graphops;
pub mod model;
pub mod noise;
pub mod sim;
pub mod tensorfile;
pub mod train;

pub use diffcore::{AdamConfig, Array, Mode, ParameterStore, Tape, Var};
pub use error::{Error, Result};
pub use graphops::{build_incidence, IncidenceMatrices, InteractionGraph};
pub use model::{DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, ModelConfig, NriModel};
pub use sim::{Dataset, Split, SystemKind, SystemSpec, Trajectory};
pub use train::{Checkpoint, Objective, Prior, TrainConfig};
