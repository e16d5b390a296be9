use rand::Rng;

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};

/// I.i.d. standard Gumbel samples `-ln(-ln u)`, `u` uniform on (0, 1).
pub fn gumbel_noise<R: Rng>(shape: &[usize], rng: &mut R) -> Array {
    Array::from_fn(shape, |_| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    })
}

/// Relaxed one-hot sample `softmax((logits + g) / tau)` over the last axis.
/// The noise is passed in so callers can freeze it.
pub fn sample_concrete(tape: &mut Tape, logits: Var, tau: f64, noise: &Array) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if noise.shape() != tape.value(logits).shape() {
        return Err(Error::dim(
            "sample_concrete",
            format!(
                "noise {:?} for logits {:?}",
                noise.shape(),
                tape.value(logits).shape()
            ),
        ));
    }
    let g = tape.leaf(noise.clone());
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    let axis = tape.value(scaled).rank() - 1;
    tape.softmax(scaled, axis)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Per-row argmax as a one-hot array of the same shape.
pub fn discretize(logits: &Array) -> Array {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = Array::zeros(logits.shape());
    if k == 0 {
        return out;
    }
    for (src, dst) in logits.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        dst[argmax(src)] = 1.0;
    }
    out
}

/// Per-row argmax indices.
pub fn edge_types(logits: &Array) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits.data().chunks(k.max(1)).map(argmax).collect()
}
