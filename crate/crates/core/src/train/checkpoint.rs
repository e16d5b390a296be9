use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffcore::{Array, ParameterStore};
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, ModelConfig};
use crate::tensorfile::{self, Tensor};

use super::{FixedGraph, Objective};

pub const TENSORS_FILE: &str = "tensors.nrit";
pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT: &str = "nri-checkpoint-1";

/// Parameters with Adam state, plus the epoch and validation metric they
/// were saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub store: ParameterStore,
    pub epoch: usize,
    /// Lower is better: validation MSE, or error rate for encoder-only runs.
    pub val_metric: f64,
    pub config_hash: String,
    pub objective: Objective,
}

fn encoder_line(e: &EncoderConfig) -> String {
    let kind = match e.kind {
        EncoderKind::Mlp => "mlp",
        EncoderKind::Cnn => "cnn",
    };
    format!(
        "{kind} {} {} {} {:?}",
        e.hidden, e.k_types, e.input_dim, e.dropout_p
    )
}

fn decoder_line(d: &DecoderConfig) -> String {
    let kind = match d.kind {
        DecoderKind::Markov => "markov",
        DecoderKind::Recurrent => "recurrent",
    };
    format!(
        "{kind} {} {} {} {} {}",
        d.hidden, d.k_types, d.n_features, d.skip_first_type, d.msg_steps
    )
}

pub fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Elbo => "elbo",
        Objective::Decoder(FixedGraph::Full) => "full_graph",
        Objective::Decoder(FixedGraph::Truth) => "true_graph",
        Objective::Supervised => "supervised",
    }
}

pub fn parse_objective(v: &str) -> Option<Objective> {
    Some(match v {
        "elbo" => Objective::Elbo,
        "full_graph" => Objective::Decoder(FixedGraph::Full),
        "true_graph" => Objective::Decoder(FixedGraph::Truth),
        "supervised" => Objective::Supervised,
        _ => return None,
    })
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("checkpoint manifest: {}", msg.into()))
}

fn field<T: std::str::FromStr>(parts: &[&str], i: usize) -> Result<T> {
    parts
        .get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("field {i} of {parts:?}")))
}

fn parse_encoder(v: &str) -> Result<EncoderConfig> {
    let p: Vec<&str> = v.split_whitespace().collect();
    let kind = match p.first() {
        Some(&"mlp") => EncoderKind::Mlp,
        Some(&"cnn") => EncoderKind::Cnn,
        _ => return Err(bad(format!("encoder {v:?}"))),
    };
    Ok(EncoderConfig {
        kind,
        hidden: field(&p, 1)?,
        k_types: field(&p, 2)?,
        input_dim: field(&p, 3)?,
        dropout_p: field(&p, 4)?,
    })
}

fn parse_decoder(v: &str) -> Result<DecoderConfig> {
    let p: Vec<&str> = v.split_whitespace().collect();
    let kind = match p.first() {
        Some(&"markov") => DecoderKind::Markov,
        Some(&"recurrent") => DecoderKind::Recurrent,
        _ => return Err(bad(format!("decoder {v:?}"))),
    };
    Ok(DecoderConfig {
        kind,
        hidden: field(&p, 1)?,
        k_types: field(&p, 2)?,
        n_features: field(&p, 3)?,
        skip_first_type: field(&p, 4)?,
        msg_steps: field(&p, 5)?,
    })
}

impl Checkpoint {
    /// Writes `manifest.txt` and `tensors.nrit` into `dir`, each atomically.
    /// Tensors are stored per parameter as value, first and second moment,
    /// then buffers, all in name order.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::new();
        let mut m = String::new();
        writeln!(m, "format = {FORMAT}").unwrap();
        writeln!(m, "epoch = {}", self.epoch).unwrap();
        writeln!(m, "val_metric = {:e}", self.val_metric).unwrap();
        writeln!(m, "val_metric_bits = {:016x}", self.val_metric.to_bits()).unwrap();
        writeln!(m, "step_count = {}", self.store.step_count).unwrap();
        writeln!(m, "config_hash = {}", self.config_hash).unwrap();
        writeln!(m, "objective = {}", objective_name(self.objective)).unwrap();
        writeln!(m, "n_objects = {}", self.model.n_objects).unwrap();
        if let Some(e) = &self.model.encoder {
            writeln!(m, "encoder = {}", encoder_line(e)).unwrap();
        }
        if let Some(d) = &self.model.decoder {
            writeln!(m, "decoder = {}", decoder_line(d)).unwrap();
        }
        for (name, p) in self.store.params() {
            writeln!(m, "param = {name}").unwrap();
            for a in [&p.value, &p.adam_m, &p.adam_v] {
                tensors.push(Tensor::from_array(a));
            }
        }
        for (name, b) in self.store.buffers() {
            writeln!(m, "buffer = {name}").unwrap();
            tensors.push(Tensor::from_array(b));
        }
        tensorfile::save_all(&dir.join(TENSORS_FILE), &tensors)?;
        tensorfile::write_atomic(&dir.join(MANIFEST_FILE), m.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mut tensors = tensorfile::load_all(&dir.join(TENSORS_FILE))?.into_iter();
        let mut next = |what: &str| -> Result<Array> {
            tensors
                .next()
                .ok_or_else(|| bad(format!("missing tensor for {what}")))?
                .to_array()
        };
        let mut store = ParameterStore::new();
        let (mut epoch, mut metric, mut hash, mut n_objects) = (None, None, String::new(), None);
        let (mut encoder, mut decoder, mut objective) = (None, None, Objective::Elbo);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("line {line:?}")))?;
            match key {
                "format" if value != FORMAT => {
                    return Err(bad(format!("unsupported format {value}")))
                }
                "format" | "val_metric" => {}
                "epoch" => epoch = Some(value.parse().map_err(|_| bad("epoch"))?),
                "val_metric_bits" => {
                    metric = Some(f64::from_bits(
                        u64::from_str_radix(value, 16).map_err(|_| bad("metric"))?,
                    ))
                }
                "step_count" => store.step_count = value.parse().map_err(|_| bad("step_count"))?,
                "config_hash" => hash = value.to_string(),
                "n_objects" => n_objects = Some(value.parse().map_err(|_| bad("n_objects"))?),
                "objective" => {
                    objective =
                        parse_objective(value).ok_or_else(|| bad(format!("objective {value}")))?
                }
                "encoder" => encoder = Some(parse_encoder(value)?),
                "decoder" => decoder = Some(parse_decoder(value)?),
                "param" => {
                    let value_arr = next(value)?;
                    let m = next(value)?;
                    let v = next(value)?;
                    if m.shape() != value_arr.shape() || v.shape() != value_arr.shape() {
                        return Err(bad(format!("moment shapes of {value}")));
                    }
                    store.insert(value, value_arr);
                    let p = store.get_mut(value).unwrap();
                    p.adam_m = m;
                    p.adam_v = v;
                }
                "buffer" => store.insert_buffer(value, next(value)?),
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        if tensors.next().is_some() {
            return Err(bad("more tensors than manifest entries"));
        }
        Ok(Checkpoint {
            model: ModelConfig {
                n_objects: n_objects.ok_or_else(|| bad("n_objects"))?,
                encoder,
                decoder,
            },
            store,
            epoch: epoch.ok_or_else(|| bad("epoch"))?,
            val_metric: metric.ok_or_else(|| bad("val_metric_bits"))?,
            config_hash: hash,
            objective,
        })
    }
}
