//! Flat `key = value` run configuration binding simulator, model, training
//! and evaluation settings.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are rejected. [`RunConfig::resolved`] writes
//! every setting back out, so the echo alone reproduces a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, ModelConfig};
use crate::sim::{ChargedSpec, KuramotoSpec, SpringsSpec, SystemKind, SystemSpec};
use crate::train::{parse_objective, Objective, Prior, TrainConfig};

/// Observation noise variance used by default for position/velocity systems.
pub const SIGMA_SQ_PARTICLES: f64 = 5e-5;
/// Observation noise variance used by default for phase-oscillator systems.
pub const SIGMA_SQ_OSCILLATORS: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub counts: (usize, usize, usize),
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub burn_in: usize,
    pub horizons: Vec<usize>,
    /// Encoder re-evaluation window for dynamic prediction.
    pub dynamic_window: usize,
}

const KEYS: &[&str] = &[
    "system",
    "n_objects",
    "k_types",
    "counts",
    "seed",
    "frames",
    "box_half_width",
    "integrator_dt",
    "subsample",
    "init_pos_std",
    "init_vel_norm",
    "spring_constants",
    "spring_probabilities",
    "charge_magnitude",
    "coulomb_constant",
    "force_clip",
    "coupling_k",
    "edge_probability",
    "omega_range",
    "phase_range",
    "standard_sign",
    "encoder",
    "encoder_hidden",
    "encoder_dropout",
    "decoder",
    "decoder_hidden",
    "skip_first_type",
    "prediction_steps",
    "objective",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay_factor",
    "lr_decay_every",
    "beta1",
    "beta2",
    "adam_epsilon",
    "tau",
    "sigma_sq",
    "prior",
    "val_horizon",
    "burn_in",
    "horizons",
    "dynamic_window",
];

fn parse_map(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                no + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", no + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: key {k:?} given twice",
                no + 1
            )));
        }
    }
    Ok(map)
}

struct Reader(BTreeMap<String, String>);

impl Reader {
    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
                })
                .collect(),
        }
    }

    fn pair(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        let v = self.list(key, vec![default.0, default.1])?;
        match v[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Config(format!("{key}: expected two numbers"))),
        }
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

fn list_text<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn parse_optional_kind<T>(
    v: Option<&str>,
    default: Option<T>,
    key: &str,
    f: impl Fn(&str) -> Option<T>,
) -> Result<Option<T>> {
    match v {
        None => Ok(default),
        Some("none") => Ok(None),
        Some(s) => f(s)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{key}: unknown value {s:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key=value` overrides, which may replace
    /// keys already present in the text.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = parse_map(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("override: unknown key {k:?}")));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        let r = Reader(map);
        let kind = SystemKind::parse(r.str("system").unwrap_or("springs"))?;
        let n: usize = r.get("n_objects", 5)?;

        let system = match kind {
            SystemKind::Springs => {
                let d = SpringsSpec::default();
                let constants: Vec<f64> = r.list(
                    "spring_constants",
                    d.edge_types.iter().map(|e| e.0).collect(),
                )?;
                let even = vec![1.0 / constants.len().max(1) as f64; constants.len()];
                let probs: Vec<f64> = r.list("spring_probabilities", even)?;
                if probs.len() != constants.len() {
                    return Err(Error::Config(
                        "spring_probabilities must match spring_constants in length".into(),
                    ));
                }
                SystemSpec::Springs(SpringsSpec {
                    n_objects: n,
                    edge_types: constants.into_iter().zip(probs).collect(),
                    box_half_width: r.get("box_half_width", d.box_half_width)?,
                    integrator_dt: r.get("integrator_dt", d.integrator_dt)?,
                    subsample: r.get("subsample", d.subsample)?,
                    n_steps_out: r.get("frames", d.n_steps_out)?,
                    init_pos_std: r.get("init_pos_std", d.init_pos_std)?,
                    init_vel_norm: r.get("init_vel_norm", d.init_vel_norm)?,
                })
            }
            SystemKind::Charged => {
                let d = ChargedSpec::default();
                SystemSpec::Charged(ChargedSpec {
                    n_objects: n,
                    charge_magnitude: r.get("charge_magnitude", d.charge_magnitude)?,
                    coulomb_constant: r.get("coulomb_constant", d.coulomb_constant)?,
                    force_clip: r.get("force_clip", d.force_clip)?,
                    box_half_width: r.get("box_half_width", d.box_half_width)?,
                    integrator_dt: r.get("integrator_dt", d.integrator_dt)?,
                    subsample: r.get("subsample", d.subsample)?,
                    n_steps_out: r.get("frames", d.n_steps_out)?,
                    init_pos_std: r.get("init_pos_std", d.init_pos_std)?,
                    init_vel_norm: r.get("init_vel_norm", d.init_vel_norm)?,
                })
            }
            SystemKind::Kuramoto => {
                let d = KuramotoSpec::default();
                SystemSpec::Kuramoto(KuramotoSpec {
                    n_objects: n,
                    coupling_k: r.get("coupling_k", d.coupling_k)?,
                    edge_probability: r.get("edge_probability", d.edge_probability)?,
                    omega_range: r.pair("omega_range", d.omega_range)?,
                    phase_range: r.pair("phase_range", d.phase_range)?,
                    integrator_dt: r.get("integrator_dt", d.integrator_dt)?,
                    subsample: r.get("subsample", d.subsample)?,
                    n_steps_out: r.get("frames", d.n_steps_out)?,
                    standard_sign: r.get("standard_sign", d.standard_sign)?,
                })
            }
        };

        let counts_v: Vec<usize> = r.list("counts", vec![50_000, 10_000, 10_000])?;
        let counts = match counts_v[..] {
            [a, b, c] => (a, b, c),
            _ => {
                return Err(Error::Config(
                    "counts: expected three numbers (train, valid, test)".into(),
                ))
            }
        };
        let k: usize = r.get("k_types", system.k_types())?;
        let oscillators = kind == SystemKind::Kuramoto;
        let f = system.n_features();
        let frames = system.frames();

        let enc_kind = parse_optional_kind(
            r.str("encoder"),
            Some(if kind == SystemKind::Springs {
                EncoderKind::Mlp
            } else {
                EncoderKind::Cnn
            }),
            "encoder",
            |s| match s {
                "mlp" => Some(EncoderKind::Mlp),
                "cnn" => Some(EncoderKind::Cnn),
                _ => None,
            },
        )?;
        let dec_kind = parse_optional_kind(
            r.str("decoder"),
            Some(DecoderKind::Markov),
            "decoder",
            |s| match s {
                "markov" => Some(DecoderKind::Markov),
                "recurrent" => Some(DecoderKind::Recurrent),
                _ => None,
            },
        )?;
        let encoder = match enc_kind {
            Some(kind) => Some(EncoderConfig {
                kind,
                hidden: r.get("encoder_hidden", 256)?,
                k_types: k,
                input_dim: if kind == EncoderKind::Mlp {
                    frames * f
                } else {
                    f
                },
                dropout_p: r.get("encoder_dropout", 0.0)?,
            }),
            None => None,
        };
        let decoder = match dec_kind {
            Some(kind) => Some(DecoderConfig {
                kind,
                hidden: r.get("decoder_hidden", 256)?,
                k_types: k,
                n_features: f,
                skip_first_type: r.get("skip_first_type", oscillators)?,
                msg_steps: r.get("prediction_steps", 10)?,
            }),
            None => None,
        };
        let model = ModelConfig {
            n_objects: n,
            encoder,
            decoder,
        };

        let objective = match r.str("objective") {
            None => Objective::Elbo,
            Some(s) => parse_objective(s)
                .ok_or_else(|| Error::Config(format!("objective: unknown value {s:?}")))?,
        };
        let prior = match r.str("prior") {
            None | Some("uniform") => Prior::Uniform,
            Some(_) => Prior::Sparse(r.list("prior", vec![])?),
        };
        let d = TrainConfig::default();
        let da = AdamConfig::default();
        let train = TrainConfig {
            epochs: r.get("epochs", d.epochs)?,
            batch_size: r.get("batch_size", d.batch_size)?,
            tau: r.get("tau", d.tau)?,
            sigma_sq: r.get(
                "sigma_sq",
                if oscillators {
                    SIGMA_SQ_OSCILLATORS
                } else {
                    SIGMA_SQ_PARTICLES
                },
            )?,
            prior,
            adam: AdamConfig {
                lr: r.get("lr", da.lr)?,
                beta1: r.get("beta1", da.beta1)?,
                beta2: r.get("beta2", da.beta2)?,
                epsilon: r.get("adam_epsilon", da.epsilon)?,
                decay_factor: r.get("lr_decay_factor", da.decay_factor)?,
                decay_every: r.get("lr_decay_every", da.decay_every)?,
            },
            seed: r.get("seed", d.seed)?,
            objective,
            val_horizon: r.get("val_horizon", d.val_horizon)?,
            checkpoint_dir: None::<PathBuf>,
            resume: false,
        };

        let cfg = RunConfig {
            seed: train.seed,
            system,
            counts,
            model,
            train,
            burn_in: r.get("burn_in", crate::evalsuite::DEFAULT_BURN_IN)?,
            horizons: r.list("horizons", crate::evalsuite::DEFAULT_HORIZONS.to_vec())?,
            dynamic_window: r.get("dynamic_window", crate::evalsuite::DEFAULT_BURN_IN)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.system {
            SystemSpec::Springs(s) => s.validate()?,
            SystemSpec::Charged(s) => s.validate()?,
            SystemSpec::Kuramoto(s) => s.validate()?,
        }
        if self.counts.0 == 0 || self.counts.1 == 0 || self.counts.2 == 0 {
            return Err(Error::Config(
                "every split needs at least one trajectory".into(),
            ));
        }
        if self.model.encoder.is_none() && self.model.decoder.is_none() {
            return Err(Error::Config(
                "encoder and decoder cannot both be none".into(),
            ));
        }
        crate::model::NriModel::new(self.model.clone())?;
        self.train.validate()?;
        if self.horizons.is_empty()
            || self.horizons.contains(&0)
            || self.burn_in == 0
            || self.dynamic_window == 0
        {
            return Err(Error::Config(
                "burn_in, dynamic_window and horizons must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn k_types(&self) -> usize {
        self.model
            .encoder
            .as_ref()
            .map(|e| e.k_types)
            .or(self.model.decoder.as_ref().map(|d| d.k_types))
            .unwrap_or(2)
    }

    /// Every setting as `key = value` lines; parsing this text yields `self`.
    pub fn resolved(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| writeln!(o, "{k} = {v}").unwrap();
        kv("system", self.system.kind().name().to_string());
        kv("n_objects", self.model.n_objects.to_string());
        kv("k_types", self.k_types().to_string());
        kv(
            "counts",
            format!("{}, {}, {}", self.counts.0, self.counts.1, self.counts.2),
        );
        kv("seed", self.seed.to_string());
        kv("frames", self.system.frames().to_string());
        match &self.system {
            SystemSpec::Springs(s) => {
                let (c, p): (Vec<f64>, Vec<f64>) = s.edge_types.iter().copied().unzip();
                kv("spring_constants", list_text(&c));
                kv("spring_probabilities", list_text(&p));
                kv("box_half_width", s.box_half_width.to_string());
                kv("integrator_dt", s.integrator_dt.to_string());
                kv("subsample", s.subsample.to_string());
                kv("init_pos_std", s.init_pos_std.to_string());
                kv("init_vel_norm", s.init_vel_norm.to_string());
            }
            SystemSpec::Charged(s) => {
                kv("charge_magnitude", s.charge_magnitude.to_string());
                kv("coulomb_constant", s.coulomb_constant.to_string());
                kv("force_clip", s.force_clip.to_string());
                kv("box_half_width", s.box_half_width.to_string());
                kv("integrator_dt", s.integrator_dt.to_string());
                kv("subsample", s.subsample.to_string());
                kv("init_pos_std", s.init_pos_std.to_string());
                kv("init_vel_norm", s.init_vel_norm.to_string());
            }
            SystemSpec::Kuramoto(s) => {
                kv("coupling_k", s.coupling_k.to_string());
                kv("edge_probability", s.edge_probability.to_string());
                kv(
                    "omega_range",
                    format!("{}, {}", s.omega_range.0, s.omega_range.1),
                );
                kv(
                    "phase_range",
                    format!("{}, {}", s.phase_range.0, s.phase_range.1),
                );
                kv("integrator_dt", s.integrator_dt.to_string());
                kv("subsample", s.subsample.to_string());
                kv("standard_sign", s.standard_sign.to_string());
            }
        }
        match &self.model.encoder {
            Some(e) => {
                kv(
                    "encoder",
                    if e.kind == EncoderKind::Mlp {
                        "mlp"
                    } else {
                        "cnn"
                    }
                    .into(),
                );
                kv("encoder_hidden", e.hidden.to_string());
                kv("encoder_dropout", e.dropout_p.to_string());
            }
            None => kv("encoder", "none".into()),
        }
        match &self.model.decoder {
            Some(d) => {
                kv(
                    "decoder",
                    if d.kind == DecoderKind::Markov {
                        "markov"
                    } else {
                        "recurrent"
                    }
                    .into(),
                );
                kv("decoder_hidden", d.hidden.to_string());
                kv("skip_first_type", d.skip_first_type.to_string());
                kv("prediction_steps", d.msg_steps.to_string());
            }
            None => kv("decoder", "none".into()),
        }
        let t = &self.train;
        kv(
            "objective",
            crate::train::objective_name(t.objective).into(),
        );
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.adam.lr.to_string());
        kv("lr_decay_factor", t.adam.decay_factor.to_string());
        kv("lr_decay_every", t.adam.decay_every.to_string());
        kv("beta1", t.adam.beta1.to_string());
        kv("beta2", t.adam.beta2.to_string());
        kv("adam_epsilon", t.adam.epsilon.to_string());
        kv("tau", t.tau.to_string());
        kv("sigma_sq", t.sigma_sq.to_string());
        kv(
            "prior",
            match &t.prior {
                Prior::Uniform => "uniform".into(),
                Prior::Sparse(p) => list_text(p),
            },
        );
        kv("val_horizon", t.val_horizon.to_string());
        kv("burn_in", self.burn_in.to_string());
        kv("horizons", list_text(&self.horizons));
        kv("dynamic_window", self.dynamic_window.to_string());
        o
    }

    /// Digest of the simulator settings, recorded next to generated data.
    pub fn system_hash(&self) -> String {
        hex(&Sha256::digest(
            format!("{:?}|{:?}", self.system, self.counts).as_bytes(),
        ))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}
