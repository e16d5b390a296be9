//! Independent oracles shared by the focused property tests and the
//! acceptance run. Everything here is written from first principles (closed
//! forms, naive loops) rather than by calling the code under test twice.
#![allow(dead_code)]

use nri_core::diffcore::{Array, Tape};
use nri_core::graphops::{build_incidence, edge_pairs, InteractionGraph};
use nri_core::model::{gumbel_noise, sample_concrete};
use nri_core::noise::Stream;
use nri_core::sim::{
    charged_pair_force, simulate_charged_from, simulate_kuramoto_from, simulate_springs_from,
    ChargedSpec, KuramotoSpec, Leapfrog, ParticleState, SpringsSpec,
};
use nri_core::train::{kl_categorical, Prior};
use rand::Rng;

/// Mechanical energy of one springs frame: kinetic plus `½ k |r_i − r_j|²`
/// over unordered pairs.
pub fn springs_energy(
    states: &Array,
    graph: &InteractionGraph,
    constants: &[f64],
    t: usize,
) -> f64 {
    let (n, frames) = (states.shape()[0], states.shape()[1]);
    let at = |i: usize, c: usize| states.data()[(i * frames + t) * 4 + c];
    let mut e = 0.0;
    for i in 0..n {
        e += 0.5 * (at(i, 2).powi(2) + at(i, 3).powi(2));
        for j in i + 1..n {
            let k = constants[graph.edge_type(i, j)];
            e += 0.5 * k * ((at(i, 0) - at(j, 0)).powi(2) + (at(i, 1) - at(j, 1)).powi(2));
        }
    }
    e
}

/// Largest relative energy drift over 4900 raw leapfrog steps, across
/// `trials` random springs systems in a box too large to be reached.
pub fn springs_energy_drift(trials: u64) -> f64 {
    let spec = SpringsSpec {
        box_half_width: 1e6,
        n_steps_out: 50,
        ..SpringsSpec::default()
    };
    let constants: Vec<f64> = spec.edge_types.iter().map(|e| e.0).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = Stream::new(seed).split("energy").rng();
        let n = spec.n_objects;
        // Force at least one spring so the potential term is exercised.
        let graph =
            InteractionGraph::from_fn(n, |i, j| usize::from(i.min(j) == 0 || rng.gen::<bool>()));
        let graph = InteractionGraph::from_fn(n, |i, j| graph.edge_type(i.min(j), i.max(j)));
        let pos = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let vel = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                [0.5 * a.cos(), 0.5 * a.sin()]
            })
            .collect();
        let (traj, stats) =
            simulate_springs_from(&spec, &graph, ParticleState { pos, vel }).unwrap();
        assert_eq!(stats.wall_hits, 0);
        assert_eq!(stats.raw_steps, 4900);
        let e0 = springs_energy(&traj.states, &graph, &constants, 0);
        for t in 1..spec.n_steps_out {
            let e = springs_energy(&traj.states, &graph, &constants, t);
            worst = worst.max((e - e0).abs() / e0);
        }
    }
    worst
}

/// Angular frequency of the relative coordinate of two unit masses joined
/// by a unit spring, measured from successive downward zero crossings. The
/// closed form is `√(2k)`.
pub fn two_body_frequency() -> f64 {
    let dt = 0.001;
    let spec = SpringsSpec {
        n_objects: 2,
        box_half_width: 1e6,
        integrator_dt: dt,
        subsample: 1,
        n_steps_out: 10_000,
        ..SpringsSpec::default()
    };
    let graph = InteractionGraph::from_fn(2, |_, _| 1);
    let state = ParticleState {
        pos: vec![[0.5, 0.0], [-0.5, 0.0]],
        vel: vec![[0.0, 0.0], [0.0, 0.0]],
    };
    let (traj, _) = simulate_springs_from(&spec, &graph, state).unwrap();
    let frames = spec.n_steps_out;
    let rel: Vec<f64> = (0..frames)
        .map(|t| traj.states.data()[t * 4] - traj.states.data()[(frames + t) * 4])
        .collect();
    let mut crossings = Vec::new();
    for t in 1..frames {
        if rel[t - 1] > 0.0 && rel[t] <= 0.0 {
            let frac = rel[t - 1] / (rel[t - 1] - rel[t]);
            crossings.push((t as f64 - 1.0 + frac) * dt);
        }
    }
    assert!(
        crossings.len() >= 2,
        "fewer than two oscillation periods simulated"
    );
    std::f64::consts::TAU / (crossings[1] - crossings[0])
}

/// Largest deviation of uncoupled oscillators from `φ₀ + ωt` (through the
/// `sin φ` channel) and of the emitted `dφ/dt` from `ω`.
pub fn kuramoto_uncoupled_error(trials: u64) -> f64 {
    let spec = KuramotoSpec::default();
    let n = spec.n_objects;
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = Stream::new(seed).split("kuramoto").rng();
        let omega: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..10.0)).collect();
        let phi0: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        // A full graph with zero coupling strength.
        let graph = InteractionGraph::from_fn(n, |_, _| 1);
        let zero = KuramotoSpec {
            coupling_k: 0.0,
            ..spec.clone()
        };
        let traj = simulate_kuramoto_from(&zero, &graph, &omega, &phi0).unwrap();
        let frames = spec.n_steps_out;
        for i in 0..n {
            for t in 0..frames {
                let base = (i * frames + t) * 3;
                let time = (t * spec.subsample) as f64 * spec.integrator_dt;
                let d = traj.states.data();
                worst = worst.max((d[base] - omega[i]).abs());
                worst = worst.max((d[base + 1] - (phi0[i] + omega[i] * time).sin()).abs());
                worst = worst.max((d[base + 2] - omega[i]).abs());
            }
        }
    }
    worst
}

/// Largest per-pair force norm met while integrating tightly packed charges
/// (many near-collisions), measured at every raw step.
pub fn charged_max_pair_force(trials: u64) -> (f64, f64) {
    let spec = ChargedSpec {
        init_pos_std: 0.05,
        ..ChargedSpec::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = Stream::new(seed).split("charged").rng();
        let n = spec.n_objects;
        let charges: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let pos: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)])
            .collect();
        let mut state = ParticleState {
            pos,
            vel: vec![[0.0; 2]; n],
        };
        let clip = spec.force_clip;
        let mut seen: f64 = 0.0;
        let force = |p: &[[f64; 2]], out: &mut [[f64; 2]]| {
            out.fill([0.0; 2]);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let f = charged_pair_force(
                            p[i],
                            p[j],
                            charges[i] * charges[j] > 0.0,
                            1.0,
                            clip,
                        );
                        seen = seen.max(f[0].hypot(f[1]));
                        out[i][0] += f[0];
                        out[i][1] += f[1];
                    }
                }
            }
        };
        let mut lf =
            Leapfrog::new(&state, force, spec.integrator_dt, Some(spec.box_half_width)).unwrap();
        for _ in 0..2000 {
            lf.step(&mut state).unwrap();
        }
        drop(lf);
        worst = worst.max(seen);
    }
    (worst, spec.force_clip)
}

/// Inter-particle distances over the first frames of two resting same-sign
/// charges.
pub fn repelling_distances(frames: usize) -> Vec<f64> {
    let spec = ChargedSpec {
        n_objects: 2,
        n_steps_out: frames,
        ..ChargedSpec::default()
    };
    let state = ParticleState {
        pos: vec![[0.3, 0.0], [-0.3, 0.0]],
        vel: vec![[0.0; 2]; 2],
    };
    let (traj, _) = simulate_charged_from(&spec, &[1.0, 1.0], state).unwrap();
    let d = traj.states.data();
    (0..frames)
        .map(|t| {
            let a = &d[t * 4..t * 4 + 2];
            let b = &d[(frames + t) * 4..(frames + t) * 4 + 2];
            (a[0] - b[0]).hypot(a[1] - b[1])
        })
        .collect()
}

/// `[.., N, F]` → `[.., E, 2F]` by a double loop, rows `[h_receiver, h_sender]`.
pub fn naive_node2edge(h: &Array) -> Array {
    let shape = h.shape();
    let (n, f) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let e = n * (n - 1);
    let mut out = Vec::with_capacity(batch * e * 2 * f);
    for b in 0..batch {
        let node = |i: usize| &h.data()[(b * n + i) * f..(b * n + i + 1) * f];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.extend_from_slice(node(j));
                    out.extend_from_slice(node(i));
                }
            }
        }
    }
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.extend([e, 2 * f]);
    Array::new(out_shape, out).unwrap()
}

/// `[.., E, F]` → `[.., N, F]`: node `j` sums the rows of edges into `j`.
pub fn naive_edge2node(h: &Array, n: usize) -> Array {
    let shape = h.shape();
    let f = shape[shape.len() - 1];
    let e = n * (n - 1);
    let batch: usize = shape[..shape.len() - 2].iter().product();
    let mut out = vec![0.0; batch * n * f];
    for b in 0..batch {
        for (k, (_, j)) in edge_pairs(n).enumerate() {
            for c in 0..f {
                out[(b * n + j) * f + c] += h.data()[(b * e + k) * f + c];
            }
        }
    }
    let mut out_shape = shape[..shape.len() - 2].to_vec();
    out_shape.extend([n, f]);
    Array::new(out_shape, out).unwrap()
}

/// Largest disagreement between the vectorized message-passing operations
/// and the naive loops over N in `sizes`, for unbatched and batched inputs.
pub fn vectorization_error(sizes: std::ops::RangeInclusive<usize>) -> f64 {
    let mut rng = Stream::new(11).split("vectorization").rng();
    let mut worst: f64 = 0.0;
    for n in sizes {
        let inc = build_incidence(n).unwrap();
        for shape in [vec![n, 3], vec![4, n, 3]] {
            let h = Array::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
            let mut tape = Tape::new();
            let v = tape.leaf(h.clone());
            let e = inc.node2edge(&mut tape, v).unwrap();
            let diff = tape.value(e).zip_map(&naive_node2edge(&h), |a, b| a - b);
            worst = worst.max(diff.max_abs());

            let mut edge_shape = shape.clone();
            let len = edge_shape.len();
            edge_shape[len - 2] = n * (n - 1);
            let he = Array::from_fn(&edge_shape, |_| rng.gen_range(-1.0..1.0));
            let ve = tape.leaf(he.clone());
            let agg = inc.edge2node(&mut tape, ve).unwrap();
            let diff = tape
                .value(agg)
                .zip_map(&naive_edge2node(&he, n), |a, b| a - b);
            worst = worst.max(diff.max_abs());
        }
    }
    worst
}

/// Argmax frequencies of `draws` relaxed samples at temperature `tau`, and
/// the fraction of samples whose largest entry exceeds `sharp`.
pub fn concrete_statistics(
    logits: &[f64],
    tau: f64,
    draws: usize,
    seed: u64,
    sharp: f64,
) -> (Vec<f64>, f64) {
    let k = logits.len();
    let mut rng = Stream::new(seed).split("concrete").rng();
    let mut tape = Tape::new();
    let l = tape.leaf(Array::from_fn(&[draws, k], |i| logits[i % k]));
    let noise = gumbel_noise(&[draws, k], &mut rng);
    let z = sample_concrete(&mut tape, l, tau, &noise).unwrap();
    let mut counts = vec![0usize; k];
    let mut sharp_count = 0usize;
    for row in tape.value(z).data().chunks(k) {
        let (arg, max) =
            row.iter()
                .enumerate()
                .fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        counts[arg] += 1;
        if max > sharp {
            sharp_count += 1;
        }
    }
    let freq = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    (freq, sharp_count as f64 / draws as f64)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Probability that a relaxed two-type sample at temperature `tau` has its
/// largest entry at most `sharp`. The difference of two Gumbel variables is
/// standard logistic, so the sample is `σ((Δ + L)/τ)` with `L` logistic and
/// `Δ` the logit gap; the event is `|Δ + L| ≤ τ·ln(sharp/(1−sharp))`.
pub fn two_type_blur_probability(gap: f64, tau: f64, sharp: f64) -> f64 {
    let c = tau * (sharp / (1.0 - sharp)).ln();
    let logistic_cdf = |x: f64| 1.0 / (1.0 + (-x).exp());
    logistic_cdf(c - gap) - logistic_cdf(-c - gap)
}

/// KL of one posterior row to a prior, through the loss code.
pub fn kl_row(q: &[f64], prior: &Prior) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(Array::new(vec![1, q.len()], q.to_vec()).unwrap());
    let kl = kl_categorical(&mut tape, p, prior).unwrap();
    tape.value(kl).item()
}

/// Summary of the KL checks: (smallest KL over random posteriors, largest
/// |KL| at the prior, largest |KL(one-hot ‖ uniform) − ln K|).
pub fn kl_properties(samples: usize) -> (f64, f64, f64) {
    let mut rng = Stream::new(5).split("kl").rng();
    let mut min_kl = f64::INFINITY;
    let mut at_prior: f64 = 0.0;
    for s in 0..samples {
        let k = 2 + s % 5;
        let q = softmax(&(0..k).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>());
        let sparse = softmax(&(0..k).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        min_kl = min_kl.min(kl_row(&q, &Prior::Uniform));
        min_kl = min_kl.min(kl_row(&q, &Prior::Sparse(sparse.clone())));
        at_prior = at_prior.max(kl_row(&sparse, &Prior::Sparse(sparse.clone())).abs());
        at_prior = at_prior.max(kl_row(&vec![1.0 / k as f64; k], &Prior::Uniform).abs());
    }
    let mut one_hot: f64 = 0.0;
    for k in 2..=8 {
        for hot in 0..k {
            let q: Vec<f64> = (0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect();
            one_hot = one_hot.max((kl_row(&q, &Prior::Uniform) - (k as f64).ln()).abs());
        }
    }
    (min_kl, at_prior, one_hot)
}
