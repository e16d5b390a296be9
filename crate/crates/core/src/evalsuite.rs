//! Edge-recovery and trajectory-prediction metrics, plus baselines.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Array, Mode, ParameterStore};
use crate::error::{Error, Result};
use crate::graphops::{edge_pairs, InteractionGraph};
use crate::model::{discretize, edge_types, DecoderKind, EncoderKind, NriModel, Session};
use crate::noise::Stream;
use crate::sim::{generate_split, Dataset, Split, SpringsSpec, SystemSpec};
use crate::train::{eval_edges, split_time, train_run, Checkpoint, Objective, TrainConfig};

/// Largest K for which all label permutations are searched.
pub const MAX_PERMUTED_TYPES: usize = 6;
pub const DEFAULT_BURN_IN: usize = 49;
pub const DEFAULT_HORIZONS: [usize; 3] = [1, 10, 20];

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub percent: f64,
    /// `permutation[p]` is the true type that predicted label `p` maps to.
    pub permutation: Vec<usize>,
    /// `confusion[true][predicted]`, before relabeling.
    pub confusion: Vec<Vec<u64>>,
}

fn permutations(k: usize, fix_first: bool) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for v in 0..used.len() {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                rec(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    let mut used = vec![false; k];
    let mut prefix = Vec::new();
    if fix_first && k > 0 {
        used[0] = true;
        prefix.push(0);
    }
    rec(&mut prefix, &mut used, &mut out);
    out
}

fn confusion(
    pred: &[InteractionGraph],
    truth: &[InteractionGraph],
    k: usize,
) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "edge_accuracy",
            format!("{} predictions for {} graphs", pred.len(), truth.len()),
        ));
    }
    let mut c = vec![vec![0u64; k]; k];
    for (p, t) in pred.iter().zip(truth) {
        if p.edge_types.len() != t.edge_types.len() {
            return Err(Error::dim(
                "edge_accuracy",
                format!("graphs over {} and {} objects", p.n, t.n),
            ));
        }
        for (&a, &b) in p.edge_types.iter().zip(&t.edge_types) {
            if a >= k || b >= k {
                return Err(Error::Data(format!("edge type outside 0..{k}")));
            }
            c[b][a] += 1;
        }
    }
    Ok(c)
}

/// Percentage of correctly typed edges, maximized over one relabeling of
/// the predicted types shared by the whole set. With `fix_first`, type 0
/// (a hard-coded non-edge) is kept in place.
pub fn edge_accuracy(
    pred: &[InteractionGraph],
    truth: &[InteractionGraph],
    k: usize,
    fix_first: bool,
) -> Result<Accuracy> {
    if k > MAX_PERMUTED_TYPES {
        return Err(Error::contract(format!(
            "refusing to search {k}! label permutations (K > {MAX_PERMUTED_TYPES})"
        )));
    }
    let c = confusion(pred, truth, k)?;
    let total: u64 = c.iter().flatten().sum();
    let mut best = (0u64, (0..k).collect::<Vec<_>>());
    for perm in permutations(k, fix_first) {
        let hits: u64 = (0..k).map(|p| c[perm[p]][p]).sum();
        if hits > best.0 {
            best = (hits, perm);
        }
    }
    Ok(Accuracy {
        percent: percent(best.0, total),
        permutation: best.1,
        confusion: c,
    })
}

/// Accuracy without relabeling, for predictions trained against labels.
pub fn edge_accuracy_fixed(
    pred: &[InteractionGraph],
    truth: &[InteractionGraph],
    k: usize,
) -> Result<Accuracy> {
    let c = confusion(pred, truth, k)?;
    let total: u64 = c.iter().flatten().sum();
    let hits: u64 = (0..k).map(|i| c[i][i]).sum();
    Ok(Accuracy {
        percent: percent(hits, total),
        permutation: (0..k).collect(),
        confusion: c,
    })
}

fn percent(hits: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Graphs from per-edge predicted types `[B * E]`.
pub fn graphs_from_types(types: &[usize], n: usize) -> Vec<InteractionGraph> {
    let e = n * (n - 1);
    types
        .chunks(e)
        .map(|c| InteractionGraph {
            n,
            edge_types: c.to_vec(),
        })
        .collect()
}

/// MSE per horizon between predictions and truth, both `[B, N, S, F]` where
/// step `s` is horizon `s + 1`; averaged over batch, objects and features.
pub fn horizon_mse(pred: &Array, truth: &Array, horizons: &[usize]) -> Result<Vec<(usize, f64)>> {
    if pred.shape() != truth.shape() || pred.rank() != 4 {
        return Err(Error::dim(
            "mse_horizons",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    let s = pred.shape();
    let (steps, f) = (s[2], s[3]);
    horizons
        .iter()
        .map(|&h| {
            if h == 0 || h > steps {
                return Err(Error::contract(format!("horizon {h} outside 1..={steps}")));
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for (pr, tr) in pred
                .data()
                .chunks(steps * f)
                .zip(truth.data().chunks(steps * f))
            {
                let (a, b) = (&pr[(h - 1) * f..h * f], &tr[(h - 1) * f..h * f]);
                sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                count += f;
            }
            Ok((h, sum / count as f64))
        })
        .collect()
}

/// Splits a test set into the observed burn-in and the frames to predict.
pub fn burn_in_split(states: &Array, burn_in: usize, horizons: &[usize]) -> Result<(Array, Array)> {
    let need = burn_in + horizons.iter().copied().max().unwrap_or(0);
    let t = states.shape()[2];
    if burn_in == 0 || t < need {
        return Err(Error::contract(format!(
            "trajectories of {t} frames cannot cover burn-in {burn_in} + horizons"
        )));
    }
    let (prefix, rest) = split_time(states, burn_in);
    let (future, _) = split_time(&rest, need - burn_in);
    Ok((prefix, future))
}

/// Repeats the last observed frame: `[B, N, T, F] -> [B, N, steps, F]`.
pub fn baseline_static(prefix: &Array, steps: usize) -> Array {
    let s = prefix.shape();
    let (t, f) = (s[2], s[3]);
    let mut data = Vec::with_capacity(s[0] * s[1] * steps * f);
    for row in prefix.data().chunks(t * f) {
        let last = &row[(t - 1) * f..];
        for _ in 0..steps {
            data.extend_from_slice(last);
        }
    }
    Array::new(vec![s[0], s[1], steps, f], data).unwrap()
}

/// Runs a trained model on the test protocol: encoder (or fixed graph) on
/// the burn-in frames, decoder free-running over the following frames.
pub fn mse_horizons(
    model: &NriModel,
    store: &ParameterStore,
    objective: Objective,
    test: &Split,
    burn_in: usize,
    horizons: &[usize],
    chunk: usize,
) -> Result<(Vec<(usize, f64)>, Array)> {
    let (prefix, future) = burn_in_split(&test.states, burn_in, horizons)?;
    let z = eval_edges(model, store, objective, &prefix, &test.graphs, chunk)?;
    let pred = model.infer_future(store, &prefix, &z, future.shape()[2], chunk)?;
    Ok((horizon_mse(&pred, &future, horizons)?, z))
}

/// Pearson correlation between flattened per-object trajectories; zero when
/// either has no variance. Returns one value per ordered pair.
pub fn trajectory_correlations(traj: &[f64], n: usize) -> Vec<f64> {
    let per = traj.len() / n;
    let centered: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|i| {
            let x = &traj[i * per..(i + 1) * per];
            let mean = x.iter().sum::<f64>() / per as f64;
            let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            (c, norm)
        })
        .collect();
    edge_pairs(n)
        .map(|(i, j)| {
            let ((a, na), (b, nb)) = (&centered[i], &centered[j]);
            if *na == 0.0 || *nb == 0.0 {
                0.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        })
        .collect()
}

/// Threshold maximizing accuracy of `score > θ` against binary labels.
/// Returns `(θ, correct count)`.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> (f64, usize) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // θ below everything: all predicted positive.
    let positives = labels.iter().filter(|&&l| l).count();
    let mut correct = positives;
    let mut best = (f64::NEG_INFINITY, correct);
    let mut k = 0;
    while k < idx.len() {
        // Move every sample tied at this score below the threshold.
        let v = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == v {
            correct = if labels[idx[k]] {
                correct - 1
            } else {
                correct + 1
            };
            k += 1;
        }
        if correct > best.1 {
            let theta = if k < idx.len() {
                0.5 * (v + scores[idx[k]])
            } else {
                v
            };
            best = (theta, correct);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrPathResult {
    pub graphs: Vec<InteractionGraph>,
    pub accuracy: f64,
    pub threshold: f64,
    /// Whether the absolute correlation won on train+valid.
    pub absolute: bool,
}

/// Correlation-threshold baseline. The threshold and the choice between
/// signed and absolute correlation are fit on train+valid, then applied to
/// test. Any non-zero ground-truth type counts as an edge.
pub fn baseline_corr_path(fit: &[&Split], test: &Split) -> Result<CorrPathResult> {
    let n = test.n_objects();
    let corr_of = |split: &Split| -> Vec<f64> {
        (0..split.len())
            .flat_map(|i| trajectory_correlations(split.trajectory(i), n))
            .collect()
    };
    let labels_of = |split: &Split| -> Vec<bool> {
        split
            .graphs
            .iter()
            .flat_map(|g| g.edge_types.iter().map(|&t| t > 0))
            .collect()
    };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in fit {
        if s.n_objects() != n {
            return Err(Error::Data("splits differ in object count".into()));
        }
        scores.extend(corr_of(s));
        labels.extend(labels_of(s));
    }
    let abs: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
    let signed_fit = best_threshold(&scores, &labels);
    let abs_fit = best_threshold(&abs, &labels);
    let absolute = abs_fit.1 > signed_fit.1;
    let threshold = if absolute { abs_fit.0 } else { signed_fit.0 };
    let test_scores = corr_of(test);
    let preds: Vec<usize> = test_scores
        .iter()
        .map(|&r| usize::from(if absolute { r.abs() } else { r } > threshold))
        .collect();
    let graphs = graphs_from_types(&preds, n);
    let truth: Vec<InteractionGraph> = test
        .graphs
        .iter()
        .map(|g| InteractionGraph {
            n,
            edge_types: g.edge_types.iter().map(|&t| usize::from(t > 0)).collect(),
        })
        .collect();
    let accuracy = edge_accuracy_fixed(&graphs, &truth, 2)?.percent;
    Ok(CorrPathResult {
        graphs,
        accuracy,
        threshold,
        absolute,
    })
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub accuracy: Option<f64>,
    pub mse: Vec<(usize, f64)>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub system: String,
    pub n_objects: usize,
    pub k_types: usize,
    pub checkpoint: String,
    pub rows: Vec<ReportRow>,
    /// `confusion[true][predicted]` of the main model, if it has an encoder.
    pub confusion: Option<Vec<Vec<u64>>>,
}

impl EvalReport {
    fn horizons(&self) -> Vec<usize> {
        let mut h: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.mse.iter().map(|m| m.0))
            .collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    pub fn to_csv(&self) -> String {
        let horizons = self.horizons();
        let mut out = String::from("system,n_objects,k_types,checkpoint,method,edge_accuracy");
        for h in &horizons {
            write!(out, ",mse_{h}").unwrap();
        }
        out.push_str(",note\n");
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},",
                self.system, self.n_objects, self.k_types, self.checkpoint, r.name
            )
            .unwrap();
            if let Some(a) = r.accuracy {
                write!(out, "{a}").unwrap();
            }
            for h in &horizons {
                out.push(',');
                if let Some((_, v)) = r.mse.iter().find(|m| m.0 == *h) {
                    write!(out, "{v:e}").unwrap();
                }
            }
            writeln!(out, ",{}", r.note.replace(',', ";")).unwrap();
        }
        out
    }

    /// Long-format per-horizon MSE for plotting.
    pub fn mse_csv(&self) -> String {
        let mut out = String::from("method,horizon,mse\n");
        for r in &self.rows {
            for (h, v) in &r.mse {
                writeln!(out, "{},{h},{v:e}", r.name).unwrap();
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let horizons = self.horizons();
        let mut out = format!(
            "{} (N = {}, K = {}) — {}\n",
            self.system, self.n_objects, self.k_types, self.checkpoint
        );
        write!(out, "{:<22} {:>10}", "method", "accuracy").unwrap();
        for h in &horizons {
            write!(out, " {:>12}", format!("mse@{h}")).unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{:<22} {:>10}",
                r.name,
                r.accuracy.map_or("-".into(), |a| format!("{a:.1}"))
            )
            .unwrap();
            for h in &horizons {
                let cell = r
                    .mse
                    .iter()
                    .find(|m| m.0 == *h)
                    .map_or("-".into(), |(_, v)| format!("{v:.3e}"));
                write!(out, " {cell:>12}").unwrap();
            }
            if !r.note.is_empty() {
                write!(out, "  {}", r.note).unwrap();
            }
            out.push('\n');
        }
        if let Some(c) = &self.confusion {
            out.push_str("confusion (rows: true type, columns: predicted type)\n");
            for row in c {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>8}")).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Evaluates a checkpoint on a test split: edge accuracy when an encoder is
/// present, per-horizon MSE when a decoder is present. A hard-coded
/// non-edge type is exempt from the label permutation.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    name: &str,
    test: &Split,
    burn_in: usize,
    horizons: &[usize],
    chunk: usize,
) -> Result<(ReportRow, Option<Accuracy>)> {
    let fix_first = ckpt
        .model
        .decoder
        .as_ref()
        .is_some_and(|d| d.skip_first_type);
    let model = NriModel::new(ckpt.model.clone())?;
    crate::train::check_compatible(&model, &test.truncate_frames(burn_in))?;
    let k = ckpt.model.encoder.as_ref().map(|e| e.k_types);
    let mut acc = None;
    let mut mse = Vec::new();
    let (prefix, _) = burn_in_split(&test.states, burn_in, horizons)?;
    if let Some(k) = k {
        let logits = model.infer_logits(&ckpt.store, &prefix, chunk)?;
        let pred = graphs_from_types(&edge_types(&logits), ckpt.model.n_objects);
        acc = Some(if ckpt.objective == Objective::Supervised {
            edge_accuracy_fixed(&pred, &test.graphs, k)?
        } else {
            edge_accuracy(&pred, &test.graphs, k, fix_first)?
        });
    }
    if ckpt.model.decoder.is_some() {
        mse = mse_horizons(
            &model,
            &ckpt.store,
            ckpt.objective,
            test,
            burn_in,
            horizons,
            chunk,
        )?
        .0;
    }
    let row = ReportRow {
        name: name.to_string(),
        accuracy: acc.as_ref().map(|a| a.percent),
        mse,
        note: String::new(),
    };
    Ok((row, acc))
}

/// Fraction (percent) of predicted edges that map to type 0 ("no edge")
/// under a label permutation learned elsewhere.
pub fn no_edge_rate(
    model: &NriModel,
    store: &ParameterStore,
    states: &Array,
    permutation: &[usize],
    chunk: usize,
) -> Result<f64> {
    let logits = model.infer_logits(store, states, chunk)?;
    let types = edge_types(&logits);
    let hits = types
        .iter()
        .filter(|&&t| permutation.get(t).copied() == Some(0))
        .count();
    Ok(100.0 * hits as f64 / types.len().max(1) as f64)
}

/// Percentage of pairs a checkpoint classifies as "no edge" on `count`
/// freshly simulated non-interacting springs systems. Simulation settings
/// follow `system` when it is a springs system; the label permutation comes
/// from the checkpoint's accuracy on real test data.
pub fn empty_graph_test(
    ckpt: &Checkpoint,
    system: &SystemSpec,
    permutation: &[usize],
    count: usize,
    stream: Stream,
    chunk: usize,
) -> Result<f64> {
    let enc = ckpt.model.encoder.as_ref().ok_or_else(|| {
        Error::Config("the empty-graph test needs a checkpoint with an encoder".into())
    })?;
    let base = match system {
        SystemSpec::Springs(s) => s.clone(),
        _ => SpringsSpec {
            n_objects: ckpt.model.n_objects,
            ..SpringsSpec::default()
        },
    };
    let frames = match enc.kind {
        EncoderKind::Mlp => enc.input_dim / 4,
        EncoderKind::Cnn => DEFAULT_BURN_IN,
    };
    let spec = SystemSpec::Springs(SpringsSpec {
        edge_types: vec![(0.0, 1.0)],
        n_steps_out: frames,
        ..base
    });
    let empty = generate_split(&spec, count, frames, stream)?;
    let model = NriModel::new(ckpt.model.clone())?;
    no_edge_rate(&model, &ckpt.store, &empty.states, permutation, chunk)
}

/// Baseline variants trained from scratch with a fixed recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    FullGraph,
    TrueGraph,
    Supervised,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::FullGraph => "NRI (full graph)",
            Variant::TrueGraph => "NRI (true graph)",
            Variant::Supervised => "Supervised",
        }
    }
}

/// Trains a baseline variant on `data` and evaluates it on the test split.
/// The supervised variant drops the decoder and uses dropout 0.5; the
/// graph-fixed variants drop the encoder.
pub fn run_variant(
    kind: Variant,
    base: &crate::model::ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    burn_in: usize,
    horizons: &[usize],
) -> Result<ReportRow> {
    let mut model_cfg = base.clone();
    let mut cfg = cfg.clone();
    match kind {
        Variant::FullGraph | Variant::TrueGraph => {
            model_cfg.encoder = None;
            cfg.objective = Objective::Decoder(if kind == Variant::FullGraph {
                crate::train::FixedGraph::Full
            } else {
                crate::train::FixedGraph::Truth
            });
        }
        Variant::Supervised => {
            model_cfg.decoder = None;
            if let Some(e) = model_cfg.encoder.as_mut() {
                e.dropout_p = 0.5;
            }
            cfg.objective = Objective::Supervised;
        }
    }
    if (kind == Variant::TrueGraph || kind == Variant::Supervised) && data.test.graphs.is_empty() {
        return Err(Error::contract("ground-truth graphs are required"));
    }
    let model = NriModel::new(model_cfg)?;
    let out = train_run(&model, data, &cfg)?;
    let (mut row, _) = evaluate_checkpoint(
        &out.best,
        kind.name(),
        &data.test,
        burn_in,
        horizons,
        cfg.batch_size,
    )?;
    row.note = format!("best epoch {}", out.best.epoch);
    Ok(row)
}

/// Result of prediction with the encoder re-run at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicPrediction {
    /// `[B, N, steps, F]`
    pub predictions: Array,
    /// Per step, the discrete edge assignment `[B, E, K]`.
    pub edges: Vec<Array>,
    /// Fraction of edges whose type changed from one step to the next.
    pub flip_rate: f64,
}

/// Self-conditioned prediction that re-infers the graph at every step from
/// the most recent `window` frames (ground truth, then own predictions).
pub fn dynamic_reeval_predict(
    model: &NriModel,
    store: &ParameterStore,
    prefix: &Array,
    steps: usize,
    window: usize,
    chunk: usize,
) -> Result<DynamicPrediction> {
    let dec = model.decoder_cfg()?.clone();
    let s = prefix.shape().to_vec();
    let (b, n, t, f) = (s[0], s[1], s[2], s[3]);
    if window == 0 || window > t {
        return Err(Error::contract(format!(
            "window {window} longer than the {t} available frames"
        )));
    }
    if steps == 0 {
        return Err(Error::contract("prediction needs at least one step"));
    }
    let mut history = prefix.clone();
    let mut edges: Vec<Array> = Vec::with_capacity(steps);
    let mut preds = Vec::with_capacity(steps);
    let mut hidden: Option<Array> = None;
    for _ in 0..steps {
        let len = history.shape()[2];
        let (_, recent) = split_time(&history, len - window);
        let z = discretize(&model.infer_logits(store, &recent, chunk)?);
        let mut sess = Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let zv = sess.input(z.clone());
        let next = match dec.kind {
            DecoderKind::Markov => {
                let (_, last) = split_time(&history, len - 1);
                let x = sess.input(last.reshape(&[b, n, f])?);
                let mu = model.decode_markov_step(&mut sess, x, zv)?;
                sess.tape.value(mu).clone()
            }
            DecoderKind::Recurrent => {
                // The hidden state first absorbs the burn-in under the first graph.
                let h0 = match hidden.take() {
                    Some(h) => h,
                    None => {
                        let mut h = Array::zeros(&[b, n, dec.hidden]);
                        for k in 0..t - 1 {
                            let (_, tail) = split_time(prefix, k);
                            let (frame, _) = split_time(&tail, 1);
                            let x = sess.input(frame.reshape(&[b, n, f])?);
                            let hv = sess.input(h);
                            let (_, hn) = model.decode_recurrent_step(&mut sess, x, hv, zv)?;
                            h = sess.tape.value(hn).clone();
                        }
                        h
                    }
                };
                let (_, last) = split_time(&history, len - 1);
                let x = sess.input(last.reshape(&[b, n, f])?);
                let hv = sess.input(h0);
                let (mu, hn) = model.decode_recurrent_step(&mut sess, x, hv, zv)?;
                hidden = Some(sess.tape.value(hn).clone());
                sess.tape.value(mu).clone()
            }
        };
        let frame = next.reshape(&[b, n, 1, f])?;
        history = concat_time(&history, &frame);
        preds.push(frame);
        edges.push(z);
    }
    let mut flips = 0usize;
    let mut total = 0usize;
    for pair in edges.windows(2) {
        let (a, c) = (edge_types(&pair[0]), edge_types(&pair[1]));
        flips += a.iter().zip(&c).filter(|(x, y)| x != y).count();
        total += a.len();
    }
    let predictions = preds
        .iter()
        .skip(1)
        .fold(preds[0].clone(), |acc, p| concat_time(&acc, p));
    Ok(DynamicPrediction {
        predictions,
        edges,
        flip_rate: if total == 0 {
            0.0
        } else {
            flips as f64 / total as f64
        },
    })
}

fn concat_time(a: &Array, b: &Array) -> Array {
    let (sa, sb) = (a.shape(), b.shape());
    let (ta, tb, f) = (sa[2], sb[2], sa[3]);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks(ta * f).zip(b.data().chunks(tb * f)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Array::new(vec![sa[0], sa[1], ta + tb, f], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(types: &[usize]) -> InteractionGraph {
        InteractionGraph {
            n: 2,
            edge_types: types.to_vec(),
        }
    }

    #[test]
    fn permutation_recovers_flipped_labels() {
        let truth = vec![g(&[0, 1]), g(&[1, 1])];
        let flipped = vec![g(&[1, 0]), g(&[0, 0])];
        assert_eq!(
            edge_accuracy(&flipped, &truth, 2, false).unwrap().percent,
            100.0
        );
        assert_eq!(
            edge_accuracy(&flipped, &truth, 2, true).unwrap().percent,
            0.0
        );
        assert!(edge_accuracy(&flipped, &truth, 7, false).is_err());
    }

    #[test]
    fn threshold_sweep() {
        let (theta, correct) = best_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(correct, 4);
        assert!(theta > 0.2 && theta < 0.8);
    }

    #[test]
    fn perfectly_correlated_pair() {
        let traj = [0.0, 1.0, 2.0, 0.0, 2.0, 4.0];
        let r = trajectory_correlations(&traj, 2);
        assert!((r[0] - 1.0).abs() < 1e-12);
        let flat = [1.0, 1.0, 1.0, 0.0, 2.0, 4.0];
        assert_eq!(trajectory_correlations(&flat, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn static_baseline_shape_and_zero_error() {
        let prefix = Array::full(&[2, 3, 5, 4], 0.5);
        let pred = baseline_static(&prefix, 7);
        assert_eq!(pred.shape(), &[2, 3, 7, 4]);
        let mse = horizon_mse(&pred, &Array::full(&[2, 3, 7, 4], 0.5), &[1, 7]).unwrap();
        assert_eq!(mse, vec![(1, 0.0), (7, 0.0)]);
    }
}
