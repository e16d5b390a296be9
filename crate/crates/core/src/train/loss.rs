use rand::Rng;

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{gumbel_noise, sample_concrete, NriModel, Rollout, Session};

/// Edge-type prior for the KL term.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    Uniform,
    /// Explicit per-type probabilities, type 0 usually the non-edge.
    Sparse(Vec<f64>),
}

impl Prior {
    pub fn validate(&self, k_types: usize) -> Result<()> {
        if let Prior::Sparse(p) = self {
            if p.len() != k_types {
                return Err(Error::Config(format!(
                    "prior has {} entries for {k_types} edge types",
                    p.len()
                )));
            }
            if p.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::Config(format!(
                    "prior probabilities must lie in (0, 1): {p:?}"
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "prior probabilities sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }
}

fn batch_of(shape: &[usize], sample_rank: usize) -> f64 {
    if shape.len() > sample_rank {
        shape[0] as f64
    } else {
        1.0
    }
}

/// `Σ ||x - μ||² / (2σ²)`, averaged over the leading batch axis of a
/// `[B, N, T, F]` input; lower-rank inputs count as one sample.
pub fn nll_gaussian(tape: &mut Tape, mu: Var, target: Var, sigma_sq: f64) -> Result<Var> {
    if !(sigma_sq > 0.0) {
        return Err(Error::contract(format!(
            "variance must be positive, got {sigma_sq}"
        )));
    }
    let (ms, ts) = (
        tape.value(mu).shape().to_vec(),
        tape.value(target).shape().to_vec(),
    );
    if ms != ts {
        return Err(Error::dim(
            "nll_gaussian",
            format!("prediction {ms:?} vs target {ts:?}"),
        ));
    }
    let batch = batch_of(&ms, 3);
    let diff = tape.sub(mu, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / (2.0 * sigma_sq * batch))
}

/// KL divergence from the edge posterior `[B, E, K]` (or `[E, K]`) to the
/// prior, summed over edges and averaged over the batch. Zero probabilities
/// contribute nothing.
pub fn kl_categorical(tape: &mut Tape, probs: Var, prior: &Prior) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let k = *shape
        .last()
        .ok_or_else(|| Error::dim("kl_categorical", "scalar input".to_string()))?;
    prior.validate(k)?;
    let batch = batch_of(&shape, 2);
    let rows = (tape.value(probs).len() / k.max(1)) as f64;
    let qlogq = tape.xlogx(probs)?;
    let neg_entropy = tape.sum_all(qlogq)?;
    let total = match prior {
        Prior::Uniform => {
            let c = tape.leaf(Array::scalar(rows * (k as f64).ln()));
            tape.add(neg_entropy, c)?
        }
        Prior::Sparse(p) => {
            let log_p = tape.leaf(Array::new(vec![k], p.iter().map(|v| v.ln()).collect())?);
            let cross = tape.mul(probs, log_p)?;
            let cross = tape.sum_all(cross)?;
            tape.sub(neg_entropy, cross)?
        }
    };
    tape.scale(total, 1.0 / batch)
}

/// Loss settings shared by training and gradient checks.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub sigma_sq: f64,
    pub prior: Prior,
    pub rollout: Rollout,
}

/// Nodes of one ELBO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    pub loss: Var,
    pub nll: Var,
    pub kl: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Negative ELBO of a `[B, N, T, F]` batch: encode, sample relaxed edges,
/// unroll the decoder, add reconstruction and KL terms. `noise` freezes the
/// Gumbel perturbation; otherwise it is drawn from the session's stream.
pub fn elbo_loss<R: Rng>(
    model: &NriModel,
    s: &mut Session<'_, R>,
    batch: Var,
    cfg: &LossConfig,
    noise: Option<&Array>,
) -> Result<ElboTerms> {
    let logits = model.encode(s, batch)?;
    let axis = s.tape.value(logits).rank() - 1;
    let probs = s.tape.softmax(logits, axis)?;
    let drawn;
    let noise = match noise {
        Some(n) => n,
        None => {
            drawn = gumbel_noise(s.tape.value(logits).shape(), &mut s.rng);
            &drawn
        }
    };
    let z = sample_concrete(&mut s.tape, logits, cfg.tau, noise)?;
    let mu = model.rollout(s, batch, z, cfg.rollout)?;
    let t_len = s.tape.value(batch).shape()[2];
    let target = s.tape.slice(batch, 2, 1, t_len)?;
    let nll = nll_gaussian(&mut s.tape, mu, target, cfg.sigma_sq)?;
    let kl = kl_categorical(&mut s.tape, probs, &cfg.prior)?;
    let loss = s.tape.add(nll, kl)?;
    Ok(ElboTerms {
        loss,
        nll,
        kl,
        logits,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_hand_values() {
        let mut t = Tape::new();
        let mu = t.leaf(Array::new(vec![1], vec![1.0]).unwrap());
        let x = t.leaf(Array::new(vec![1], vec![0.0]).unwrap());
        let l = nll_gaussian(&mut t, mu, x, 0.5).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        let l2 = nll_gaussian(&mut t, mu, x, 1.0).unwrap();
        assert_eq!(t.value(l2).item(), 0.5);
        let same = nll_gaussian(&mut t, mu, mu, 1.0).unwrap();
        assert_eq!(t.value(same).item(), 0.0);
    }

    #[test]
    fn kl_one_hot_is_ln_k() {
        let mut t = Tape::new();
        let q = t.leaf(Array::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let kl = kl_categorical(&mut t, q, &Prior::Uniform).unwrap();
        assert!((t.value(kl).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prior_validation() {
        assert!(Prior::Sparse(vec![0.91, 0.03, 0.03, 0.03])
            .validate(4)
            .is_ok());
        assert!(Prior::Sparse(vec![0.5, 0.6]).validate(2).is_err());
        assert!(Prior::Sparse(vec![1.0, 0.0]).validate(2).is_err());
        assert!(Prior::Sparse(vec![0.5, 0.5]).validate(3).is_err());
    }
}
