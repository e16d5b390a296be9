//! ELBO objective and the epoch loop with checkpointing.

mod checkpoint;
mod loss;

pub use checkpoint::{objective_name, parse_objective, Checkpoint, MANIFEST_FILE, TENSORS_FILE};
pub use loss::{elbo_loss, kl_categorical, nll_gaussian, ElboTerms, LossConfig, Prior};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::diffcore::{adam_step, lr_at_epoch, AdamConfig, Array, Mode, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::evalsuite::edge_accuracy;
use crate::graphops::InteractionGraph;
use crate::model::{
    apply_batch_stats, constant_edges, discretize, edge_types, graphs_one_hot, EncoderKind,
    NriModel, Rollout, Session, BATCHNORM_MOMENTUM,
};
use crate::noise::Stream;
use crate::sim::{Dataset, Split};

/// Learning rates above this are accepted but logged as risky.
pub const LR_WARNING_THRESHOLD: f64 = 0.005;
pub const CURVE_FILE: &str = "curve.csv";

/// Latent graph handed to a decoder trained without the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedGraph {
    /// Every pair connected with edge type 1.
    Full,
    /// Ground-truth graphs from the dataset.
    Truth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Encoder and decoder trained jointly on the negative ELBO.
    Elbo,
    /// Decoder only, on reconstruction error with a fixed graph.
    Decoder(FixedGraph),
    /// Encoder only, cross-entropy against ground-truth edge labels.
    Supervised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub sigma_sq: f64,
    pub prior: Prior,
    pub adam: AdamConfig,
    pub seed: u64,
    pub objective: Objective,
    /// Frames predicted from the tail of each validation trajectory.
    pub val_horizon: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from `checkpoint_dir/last` if present.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            tau: 0.5,
            sigma_sq: 5e-5,
            prior: Prior::Uniform,
            adam: AdamConfig::default(),
            seed: 42,
            objective: Objective::Elbo,
            val_horizon: 20,
            checkpoint_dir: None,
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.tau > 0.0) || !(self.sigma_sq > 0.0) {
            return Err(Error::Config(format!(
                "tau = {} and sigma_sq = {} must be positive",
                self.tau, self.sigma_sq
            )));
        }
        if self.val_horizon == 0 {
            return Err(Error::Config("val_horizon must be at least 1".into()));
        }
        self.adam
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Digest of every setting that influences the parameters after a
    /// given epoch. The epoch budget is excluded so a run can be extended.
    pub fn hash(&self, model: &NriModel) -> String {
        let text = format!(
            "{:?}|{}|{:?}|{:?}|{:?}|{:?}|{}|{:?}|{}",
            model.cfg,
            self.batch_size,
            self.tau,
            self.sigma_sq,
            self.prior,
            self.adam,
            self.seed,
            self.objective,
            self.val_horizon
        );
        Sha256::digest(text.as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                write!(s, "{b:02x}").unwrap();
                s
            })
    }
}

/// One line of the training curve.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub train_kl: f64,
    pub val_mse: f64,
    /// Validation edge accuracy in percent; NaN without an encoder.
    pub val_acc: f64,
    pub lr: f64,
}

pub fn curve_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_nll,train_kl,val_mse,val_acc,lr\n");
    for r in records {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.epoch, r.train_nll, r.train_kl, r.val_mse, r.val_acc, r.lr
        )
        .unwrap();
    }
    out
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = || Error::Data("malformed training curve".into());
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_nll: num(1)?,
                train_kl: num(2)?,
                val_mse: num(3)?,
                val_acc: num(4)?,
                lr: num(5)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub curve: Vec<EpochRecord>,
}

/// Checks that a split fits the model before any training starts.
pub fn check_compatible(model: &NriModel, split: &Split) -> Result<()> {
    let (n, t, f) = (split.n_objects(), split.n_frames(), split.n_features());
    if n != model.cfg.n_objects {
        return Err(Error::Data(format!(
            "dataset has {n} objects, model expects {}",
            model.cfg.n_objects
        )));
    }
    if let Some(d) = &model.cfg.decoder {
        if d.n_features != f {
            return Err(Error::Data(format!(
                "dataset has {f} features, decoder expects {}",
                d.n_features
            )));
        }
    }
    if let Some(e) = &model.cfg.encoder {
        let want = match e.kind {
            EncoderKind::Mlp => t * f,
            EncoderKind::Cnn => f,
        };
        if want != e.input_dim {
            return Err(Error::Data(format!(
                "encoder input width {} does not fit T = {t}, F = {f}",
                e.input_dim
            )));
        }
    }
    Ok(())
}

fn k_types(model: &NriModel) -> usize {
    model
        .cfg
        .encoder
        .as_ref()
        .map(|e| e.k_types)
        .or(model.cfg.decoder.as_ref().map(|d| d.k_types))
        .unwrap_or(2)
}

/// Edge assignment for validation and test under a given objective.
pub fn eval_edges(
    model: &NriModel,
    store: &ParameterStore,
    objective: Objective,
    states: &Array,
    graphs: &[InteractionGraph],
    chunk: usize,
) -> Result<Array> {
    let k = k_types(model);
    match objective {
        Objective::Elbo | Objective::Supervised => {
            Ok(discretize(&model.infer_logits(store, states, chunk)?))
        }
        Objective::Decoder(FixedGraph::Full) => {
            Ok(constant_edges(states.shape()[0], model.n_edges(), k, 1))
        }
        Objective::Decoder(FixedGraph::Truth) => graphs_one_hot(graphs, k),
    }
}

/// Mean squared error of predicting the last `horizon` frames of every
/// trajectory from the frames before them.
pub fn tail_prediction_mse(
    model: &NriModel,
    store: &ParameterStore,
    states: &Array,
    z: &Array,
    horizon: usize,
    chunk: usize,
) -> Result<f64> {
    let t = states.shape()[2];
    if horizon >= t {
        return Err(Error::contract(format!(
            "horizon {horizon} needs more than {t} frames"
        )));
    }
    let (prefix, truth) = split_time(states, t - horizon);
    let pred = model.infer_future(store, &prefix, z, horizon, chunk)?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / pred.len() as f64)
}

/// Splits `[B, N, T, F]` at frame `at` into prefix and remainder.
pub fn split_time(states: &Array, at: usize) -> (Array, Array) {
    let s = states.shape();
    let (b, n, t, f) = (s[0], s[1], s[2], s[3]);
    let mut head = Vec::with_capacity(b * n * at * f);
    let mut tail = Vec::with_capacity(b * n * (t - at) * f);
    for row in states.data().chunks(t * f) {
        head.extend_from_slice(&row[..at * f]);
        tail.extend_from_slice(&row[at * f..]);
    }
    (
        Array::new(vec![b, n, at, f], head).unwrap(),
        Array::new(vec![b, n, t - at, f], tail).unwrap(),
    )
}

struct Validation {
    mse: f64,
    acc: f64,
    /// Lower is better.
    metric: f64,
}

fn validate(
    model: &NriModel,
    store: &ParameterStore,
    cfg: &TrainConfig,
    split: &Split,
) -> Result<Validation> {
    let chunk = cfg.batch_size;
    let z = eval_edges(
        model,
        store,
        cfg.objective,
        &split.states,
        &split.graphs,
        chunk,
    )?;
    let acc = if model.cfg.encoder.is_some() {
        let pred = edge_types(&z);
        let per = model.n_edges();
        let graphs: Vec<InteractionGraph> = pred
            .chunks(per)
            .map(|c| InteractionGraph {
                n: model.cfg.n_objects,
                edge_types: c.to_vec(),
            })
            .collect();
        let fixed = cfg.objective == Objective::Supervised;
        let k = k_types(model);
        let result = if fixed {
            crate::evalsuite::edge_accuracy_fixed(&graphs, &split.graphs, k)?
        } else {
            let fix_first = model
                .cfg
                .decoder
                .as_ref()
                .is_some_and(|d| d.skip_first_type);
            edge_accuracy(&graphs, &split.graphs, k, fix_first)?
        };
        result.percent
    } else {
        f64::NAN
    };
    if model.cfg.decoder.is_none() {
        return Ok(Validation {
            mse: f64::NAN,
            acc,
            metric: 100.0 - acc,
        });
    }
    let horizon = cfg.val_horizon.min(split.n_frames() - 1);
    let mse = tail_prediction_mse(model, store, &split.states, &z, horizon, chunk)?;
    Ok(Validation {
        mse,
        acc,
        metric: mse,
    })
}

/// Loss of one batch. Returns the scalar to minimize and its two parts.
fn batch_loss(
    model: &NriModel,
    s: &mut Session<'_>,
    cfg: &TrainConfig,
    x: &Array,
    graphs: &[InteractionGraph],
) -> Result<(Var, f64, f64)> {
    let k = k_types(model);
    let xv = s.input(x.clone());
    match cfg.objective {
        Objective::Elbo => {
            let m = model.decoder_cfg()?;
            let loss_cfg = LossConfig {
                tau: cfg.tau,
                sigma_sq: cfg.sigma_sq,
                prior: cfg.prior.clone(),
                rollout: Rollout::training(m.kind, m.msg_steps),
            };
            let terms = elbo_loss(model, s, xv, &loss_cfg, None)?;
            Ok((
                terms.loss,
                s.tape.value(terms.nll).item(),
                s.tape.value(terms.kl).item(),
            ))
        }
        Objective::Decoder(which) => {
            let m = model.decoder_cfg()?;
            let z = match which {
                FixedGraph::Full => constant_edges(x.shape()[0], model.n_edges(), k, 1),
                FixedGraph::Truth => graphs_one_hot(graphs, k)?,
            };
            let zv = s.input(z);
            let mu = model.rollout(s, xv, zv, Rollout::training(m.kind, m.msg_steps))?;
            let t = x.shape()[2];
            let target = s.tape.slice(xv, 2, 1, t)?;
            let nll = nll_gaussian(&mut s.tape, mu, target, cfg.sigma_sq)?;
            Ok((nll, s.tape.value(nll).item(), 0.0))
        }
        Objective::Supervised => {
            let logits = model.encode(s, xv)?;
            let probs = s.tape.softmax(logits, 2)?;
            let floor = s.input(Array::scalar(1e-16));
            let safe = s.tape.add(probs, floor)?;
            let logp = s.tape.log(safe)?;
            let labels = s.input(graphs_one_hot(graphs, k)?);
            let picked = s.tape.mul(logp, labels)?;
            let total = s.tape.sum_all(picked)?;
            let ce = s
                .tape
                .scale(total, -1.0 / (x.shape()[0] * model.n_edges()) as f64)?;
            Ok((ce, s.tape.value(ce).item(), 0.0))
        }
    }
}

fn ensure_objective_fits(model: &NriModel, cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    match cfg.objective {
        Objective::Elbo if model.cfg.encoder.is_none() || model.cfg.decoder.is_none() => Err(
            Error::Config("the ELBO objective needs an encoder and a decoder".into()),
        ),
        Objective::Decoder(_) if model.cfg.decoder.is_none() => {
            Err(Error::Config("no decoder to train".into()))
        }
        Objective::Supervised if model.cfg.encoder.is_none() => {
            Err(Error::Config("no encoder to train".into()))
        }
        Objective::Decoder(FixedGraph::Truth) | Objective::Supervised => {
            let k = k_types(model);
            let max_type = [&data.train, &data.valid]
                .iter()
                .flat_map(|s| s.graphs.iter().flat_map(|g| g.edge_types.iter().copied()))
                .max()
                .unwrap_or(0);
            if max_type >= k {
                return Err(Error::contract(format!(
                    "ground-truth edge type {max_type} needs K > {k}"
                )));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn save_outputs(dir: &Path, name: &str, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(&dir.join(name))
}

/// Full training protocol: seeded shuffling, Adam with step decay, per-epoch
/// validation and checkpointing of the best and the latest state.
pub fn train_run(model: &NriModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.prior.validate(k_types(model))?;
    check_compatible(model, &data.train)?;
    check_compatible(model, &data.valid)?;
    ensure_objective_fits(model, cfg, data)?;
    if cfg.adam.lr > LR_WARNING_THRESHOLD {
        log::warn!(
            "learning rate {} exceeds {LR_WARNING_THRESHOLD}; high rates tend to give decoders that ignore the graph",
            cfg.adam.lr
        );
    }
    let root = Stream::new(cfg.seed);
    let hash = cfg.hash(model);
    let n_train = data.train.len();
    let batch = cfg.batch_size.min(n_train);
    let n_batches = n_train / batch;

    let mut store = model.init_params(&mut root.split("init").rng());
    let mut start_epoch = 0;
    let mut curve = Vec::new();
    let mut best: Option<Checkpoint> = None;
    if let (true, Some(dir)) = (cfg.resume, &cfg.checkpoint_dir) {
        if dir.join("last").join(MANIFEST_FILE).exists() {
            let last = Checkpoint::load(&dir.join("last"))?;
            if last.config_hash != hash {
                return Err(Error::Config(
                    "checkpoint was produced by a different configuration".into(),
                ));
            }
            start_epoch = last.epoch + 1;
            store = last.store;
            best = Some(Checkpoint::load(&dir.join("best"))?);
            curve = parse_curve_csv(&fs::read_to_string(dir.join(CURVE_FILE))?)?;
            curve.truncate(start_epoch);
            log::info!("resuming at epoch {start_epoch}");
        }
    }

    let mut last = None;
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at_epoch(cfg.adam.lr, epoch, &cfg.adam);
        let adam = AdamConfig {
            lr,
            ..cfg.adam.clone()
        };
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut root.split("shuffle").index(epoch as u64).rng());
        let (mut sum_nll, mut sum_kl) = (0.0, 0.0);
        let epoch_noise = root.split("batch").index(epoch as u64);
        for (b, idx) in order.chunks_exact(batch).enumerate() {
            let x = data.train.batch(idx);
            let graphs: Vec<InteractionGraph> =
                idx.iter().map(|&i| data.train.graphs[i].clone()).collect();
            let (grads, stats, nll, kl) = {
                let mut s = Session::new(&store, Mode::Train, epoch_noise.index(b as u64).rng());
                let (loss, nll, kl) = batch_loss(model, &mut s, cfg, &x, &graphs)?;
                let value = s.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, batch {b}"
                    )));
                }
                (s.tape.backward(loss)?, s.batch_stats(), nll, kl)
            };
            store.accumulate(&grads)?;
            apply_batch_stats(&mut store, &stats, BATCHNORM_MOMENTUM)?;
            adam_step(&mut store, &adam)?;
            sum_nll += nll;
            sum_kl += kl;
        }
        let v = validate(model, &store, cfg, &data.valid)?;
        let record = EpochRecord {
            epoch,
            train_nll: sum_nll / n_batches as f64,
            train_kl: sum_kl / n_batches as f64,
            val_mse: v.mse,
            val_acc: v.acc,
            lr,
        };
        log::info!(
            "epoch {epoch}: nll {:.4e} kl {:.4e} val_mse {:.4e} val_acc {:.2}",
            record.train_nll,
            record.train_kl,
            record.val_mse,
            record.val_acc
        );
        curve.push(record);
        let ckpt = Checkpoint {
            model: model.cfg.clone(),
            store: store.clone(),
            epoch,
            val_metric: v.metric,
            config_hash: hash.clone(),
            objective: cfg.objective,
        };
        let improved = best.as_ref().is_none_or(|b| v.metric < b.val_metric);
        if let Some(dir) = &cfg.checkpoint_dir {
            if improved {
                save_outputs(dir, "best", &ckpt)?;
            }
            save_outputs(dir, "last", &ckpt)?;
            crate::tensorfile::write_atomic(&dir.join(CURVE_FILE), curve_csv(&curve).as_bytes())?;
        }
        if improved {
            best = Some(ckpt.clone());
        }
        last = Some(ckpt);
    }
    let best = best.ok_or_else(|| Error::contract("no epochs were run"))?;
    let last = match last {
        Some(l) => l,
        None => Checkpoint::load(&cfg.checkpoint_dir.as_ref().unwrap().join("last"))?,
    };
    Ok(TrainOutcome { best, last, curve })
}
