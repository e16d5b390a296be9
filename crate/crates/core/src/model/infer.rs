use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NriModel, Session};
use crate::diffcore::{Array, Mode, ParameterStore};
use crate::error::{Error, Result};
use crate::graphops::InteractionGraph;

fn eval_session(store: &ParameterStore) -> Session<'_> {
    // Evaluation draws no randomness; the generator only satisfies the type.
    Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0))
}

fn chunks(total: usize, chunk: usize) -> impl Iterator<Item = (usize, usize)> {
    let chunk = chunk.max(1);
    (0..total)
        .step_by(chunk)
        .map(move |s| (s, (s + chunk).min(total)))
}

impl NriModel {
    /// Eval-mode edge logits `[B, E, K]` for trajectories `[B, N, T, F]`,
    /// processed `chunk` samples at a time.
    pub fn infer_logits(
        &self,
        store: &ParameterStore,
        states: &Array,
        chunk: usize,
    ) -> Result<Array> {
        let mut parts = Vec::new();
        for (a, b) in chunks(states.shape()[0], chunk) {
            let mut s = eval_session(store);
            let x = s.input(states.outer_range(a, b));
            let logits = self.encode(&mut s, x)?;
            parts.push(s.tape.value(logits).clone());
        }
        Array::concat_outer(&parts)
    }

    /// Eval-mode continuation `[B, N, steps, F]` of `prefix [B, N, T, F]`
    /// under the fixed edge assignment `z [B, E, K]`.
    pub fn infer_future(
        &self,
        store: &ParameterStore,
        prefix: &Array,
        z: &Array,
        steps: usize,
        chunk: usize,
    ) -> Result<Array> {
        if z.shape()[0] != prefix.shape()[0] {
            return Err(Error::dim(
                "predict",
                format!(
                    "edges {:?} for trajectories {:?}",
                    z.shape(),
                    prefix.shape()
                ),
            ));
        }
        let mut parts = Vec::new();
        for (a, b) in chunks(prefix.shape()[0], chunk) {
            let mut s = eval_session(store);
            let x = s.input(prefix.outer_range(a, b));
            let zv = s.input(z.outer_range(a, b));
            let out = self.predict(&mut s, x, zv, steps)?;
            parts.push(s.tape.value(out).clone());
        }
        Array::concat_outer(&parts)
    }
}

/// One-hot `[B, E, K]` edge assignment from graphs.
pub fn graphs_one_hot(graphs: &[InteractionGraph], k_types: usize) -> Result<Array> {
    let parts = graphs.iter().map(|g| {
        let h = g.one_hot(k_types)?;
        let shape = [&[1usize][..], h.shape()].concat();
        h.reshape(&shape)
    });
    Array::concat_outer(&parts.collect::<Result<Vec<_>>>()?)
}

/// Every edge assigned type `edge_type`.
pub fn constant_edges(batch: usize, n_edges: usize, k_types: usize, edge_type: usize) -> Array {
    Array::from_fn(&[batch, n_edges, k_types], |i| {
        if i % k_types == edge_type {
            1.0
        } else {
            0.0
        }
    })
}
