use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::integrators::{rk4_step, Leapfrog, ParticleState, Vec2};
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::graphops::{edge_pairs, InteractionGraph};
use crate::noise::Stream;

/// A simulated trajectory: `states` is `[N, T, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Array,
    pub graph: InteractionGraph,
}

/// Bookkeeping from a particle simulation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimStats {
    pub wall_hits: usize,
    pub raw_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpringsSpec {
    pub n_objects: usize,
    /// `(spring constant, probability)` per edge type; index is the type label.
    pub edge_types: Vec<(f64, f64)>,
    pub box_half_width: f64,
    pub integrator_dt: f64,
    pub subsample: usize,
    pub n_steps_out: usize,
    pub init_pos_std: f64,
    pub init_vel_norm: f64,
}

impl Default for SpringsSpec {
    fn default() -> Self {
        SpringsSpec {
            n_objects: 5,
            edge_types: vec![(0.0, 0.5), (1.0, 0.5)],
            box_half_width: 5.0,
            integrator_dt: 0.001,
            subsample: 100,
            n_steps_out: 49,
            init_pos_std: 0.5,
            init_vel_norm: 0.5,
        }
    }
}

impl SpringsSpec {
    /// Three interaction strengths (0, 0.5, 1) with equal probability.
    pub fn three_types() -> Self {
        let third = 1.0 / 3.0;
        SpringsSpec {
            edge_types: vec![(0.0, third), (0.5, third), (1.0, third)],
            ..Self::default()
        }
    }

    /// Every pair uncoupled.
    pub fn non_interacting() -> Self {
        SpringsSpec {
            edge_types: vec![(0.0, 1.0)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.edge_types.iter().map(|(_, p)| p).sum();
        if self.edge_types.is_empty()
            || (total - 1.0).abs() > 1e-9
            || self.edge_types.iter().any(|(_, p)| *p < 0.0)
        {
            return Err(Error::Config(format!(
                "spring edge-type probabilities must sum to 1: {:?}",
                self.edge_types
            )));
        }
        validate_common(
            self.n_objects,
            self.integrator_dt,
            self.subsample,
            self.n_steps_out,
        )?;
        if self.box_half_width <= 0.0 {
            return Err(Error::Config("box_half_width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChargedSpec {
    pub n_objects: usize,
    pub charge_magnitude: f64,
    pub coulomb_constant: f64,
    /// Upper bound on the norm of every pairwise force vector.
    pub force_clip: f64,
    pub box_half_width: f64,
    pub integrator_dt: f64,
    pub subsample: usize,
    pub n_steps_out: usize,
    pub init_pos_std: f64,
    pub init_vel_norm: f64,
}

impl Default for ChargedSpec {
    fn default() -> Self {
        ChargedSpec {
            n_objects: 5,
            charge_magnitude: 1.0,
            coulomb_constant: 1.0,
            force_clip: 100.0,
            box_half_width: 5.0,
            integrator_dt: 0.001,
            subsample: 100,
            n_steps_out: 49,
            init_pos_std: 0.5,
            init_vel_norm: 0.5,
        }
    }
}

impl ChargedSpec {
    pub fn validate(&self) -> Result<()> {
        validate_common(
            self.n_objects,
            self.integrator_dt,
            self.subsample,
            self.n_steps_out,
        )?;
        if self.force_clip <= 0.0 || self.box_half_width <= 0.0 {
            return Err(Error::Config(
                "force_clip and box_half_width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KuramotoSpec {
    pub n_objects: usize,
    pub coupling_k: f64,
    pub edge_probability: f64,
    /// Half-open `[lo, hi)` range for intrinsic frequencies.
    pub omega_range: (f64, f64),
    /// Half-open `[lo, hi)` range for initial phases.
    pub phase_range: (f64, f64),
    pub integrator_dt: f64,
    pub subsample: usize,
    pub n_steps_out: usize,
    /// Use `sin(phi_j - phi_i)` instead of `sin(phi_i - phi_j)` in the coupling.
    pub standard_sign: bool,
}

impl Default for KuramotoSpec {
    fn default() -> Self {
        KuramotoSpec {
            n_objects: 5,
            coupling_k: 1.0,
            edge_probability: 0.5,
            omega_range: (1.0, 10.0),
            phase_range: (0.0, 2.0 * PI),
            integrator_dt: 0.01,
            subsample: 10,
            n_steps_out: 49,
            standard_sign: false,
        }
    }
}

impl KuramotoSpec {
    pub fn validate(&self) -> Result<()> {
        validate_common(
            self.n_objects,
            self.integrator_dt,
            self.subsample,
            self.n_steps_out,
        )?;
        if !(0.0..=1.0).contains(&self.edge_probability) {
            return Err(Error::Config("edge_probability must lie in [0, 1]".into()));
        }
        if self.omega_range.0 >= self.omega_range.1 || self.phase_range.0 >= self.phase_range.1 {
            return Err(Error::Config(
                "omega_range and phase_range must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

fn validate_common(n: usize, dt: f64, subsample: usize, n_out: usize) -> Result<()> {
    if n == 0 || dt <= 0.0 || subsample == 0 || n_out == 0 {
        return Err(Error::Config(format!(
            "need n_objects >= 1, dt > 0, subsample >= 1, n_steps_out >= 1 (got {n}, {dt}, {subsample}, {n_out})"
        )));
    }
    Ok(())
}

fn sample_type<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Symmetric graph: one draw per unordered pair.
fn sample_symmetric_graph<R: Rng>(
    rng: &mut R,
    n: usize,
    mut draw: impl FnMut(&mut R) -> usize,
) -> InteractionGraph {
    let mut upper = vec![0usize; n * n];
    for i in 0..n {
        for j in i + 1..n {
            upper[i * n + j] = draw(rng);
        }
    }
    InteractionGraph::from_fn(n, |i, j| upper[i.min(j) * n + i.max(j)])
}

fn initial_particles<R: Rng>(rng: &mut R, n: usize, pos_std: f64, vel_norm: f64) -> ParticleState {
    let normal = Normal::new(0.0, pos_std).expect("finite std");
    let pos = (0..n)
        .map(|_| [normal.sample(rng), normal.sample(rng)])
        .collect();
    let vel = (0..n)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            [vel_norm * angle.cos(), vel_norm * angle.sin()]
        })
        .collect();
    ParticleState { pos, vel }
}

/// Runs `frames` emitted frames (the first is the initial condition), with
/// `subsample` raw steps between consecutive frames. Features per frame are
/// `(x, y, vx, vy)`.
fn run_particles<F>(
    mut state: ParticleState,
    force_fn: F,
    dt: f64,
    walls: f64,
    subsample: usize,
    frames: usize,
) -> Result<(Array, SimStats)>
where
    F: FnMut(&[Vec2], &mut [Vec2]),
{
    let n = state.pos.len();
    let mut out = Array::zeros(&[n, frames, 4]);
    let mut lf = Leapfrog::new(&state, force_fn, dt, Some(walls))?;
    for t in 0..frames {
        if t > 0 {
            for _ in 0..subsample {
                lf.step(&mut state)?;
            }
        }
        for i in 0..n {
            let base = (i * frames + t) * 4;
            out.data_mut()[base..base + 4].copy_from_slice(&[
                state.pos[i][0],
                state.pos[i][1],
                state.vel[i][0],
                state.vel[i][1],
            ]);
        }
    }
    Ok((
        out,
        SimStats {
            wall_hits: lf.wall_hits,
            raw_steps: lf.steps,
        },
    ))
}

/// Hooke forces `F_i = -sum_j k_ij (r_i - r_j)` for a dense `[N, N]` coupling matrix.
pub fn spring_forces(k: &[f64], pos: &[Vec2], out: &mut [Vec2]) {
    let n = pos.len();
    for i in 0..n {
        let mut f = [0.0; 2];
        for j in 0..n {
            let kij = k[i * n + j];
            if i != j && kij != 0.0 {
                f[0] -= kij * (pos[i][0] - pos[j][0]);
                f[1] -= kij * (pos[i][1] - pos[j][1]);
            }
        }
        out[i] = f;
    }
}

pub fn simulate_springs(spec: &SpringsSpec, seed: u64) -> Result<Trajectory> {
    simulate_springs_with_stats(spec, seed).map(|(t, _)| t)
}

pub fn simulate_springs_with_stats(
    spec: &SpringsSpec,
    seed: u64,
) -> Result<(Trajectory, SimStats)> {
    spec.validate()?;
    let stream = Stream::new(seed);
    let mut rng = stream.split("graph").rng();
    let probs: Vec<f64> = spec.edge_types.iter().map(|(_, p)| *p).collect();
    let n = spec.n_objects;
    let graph = sample_symmetric_graph(&mut rng, n, |r| sample_type(r, probs.iter().copied()));
    let mut init_rng = stream.split("init").rng();
    let state = initial_particles(&mut init_rng, n, spec.init_pos_std, spec.init_vel_norm);
    simulate_springs_from(spec, &graph, state)
}

/// Integrates a given graph and initial condition.
pub fn simulate_springs_from(
    spec: &SpringsSpec,
    graph: &InteractionGraph,
    state: ParticleState,
) -> Result<(Trajectory, SimStats)> {
    let n = spec.n_objects;
    let mut k = vec![0.0; n * n];
    for (i, j) in edge_pairs(n) {
        k[i * n + j] = spec.edge_types[graph.edge_type(i, j)].0;
    }
    let (states, stats) = run_particles(
        state,
        |p: &[Vec2], f: &mut [Vec2]| spring_forces(&k, p, f),
        spec.integrator_dt,
        spec.box_half_width,
        spec.subsample,
        spec.n_steps_out,
    )?;
    Ok((
        Trajectory {
            states,
            graph: graph.clone(),
        },
        stats,
    ))
}

/// Coulomb-like force on `i` from `j` with its norm clipped to `clip`.
/// Coincident particles exert no force.
pub fn charged_pair_force(ri: Vec2, rj: Vec2, same_sign: bool, c: f64, clip: f64) -> Vec2 {
    let d = [ri[0] - rj[0], ri[1] - rj[1]];
    let r2 = d[0] * d[0] + d[1] * d[1];
    if r2 == 0.0 {
        return [0.0, 0.0];
    }
    let r = r2.sqrt();
    let sign = if same_sign { 1.0 } else { -1.0 };
    let mag = (c / r2).min(clip);
    let mut f = [sign * mag * d[0] / r, sign * mag * d[1] / r];
    // Rounding in the direction can push the norm an ulp past the clip.
    while f[0].hypot(f[1]) > clip {
        f = [f[0] * (1.0 - f64::EPSILON), f[1] * (1.0 - f64::EPSILON)];
    }
    f
}

/// Sums clipped pair forces; returns the largest pair-force norm seen.
pub fn charged_forces(charges: &[f64], c: f64, clip: f64, pos: &[Vec2], out: &mut [Vec2]) -> f64 {
    let n = pos.len();
    let mut max_pair: f64 = 0.0;
    out.fill([0.0; 2]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let f = charged_pair_force(pos[i], pos[j], charges[i] * charges[j] > 0.0, c, clip);
            max_pair = max_pair.max(f[0].hypot(f[1]));
            out[i][0] += f[0];
            out[i][1] += f[1];
        }
    }
    max_pair
}

pub fn simulate_charged(spec: &ChargedSpec, seed: u64) -> Result<Trajectory> {
    simulate_charged_with_stats(spec, seed).map(|(t, _)| t)
}

pub fn simulate_charged_with_stats(
    spec: &ChargedSpec,
    seed: u64,
) -> Result<(Trajectory, SimStats)> {
    spec.validate()?;
    let stream = Stream::new(seed);
    let mut rng = stream.split("charges").rng();
    let n = spec.n_objects;
    let charges: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<bool>() {
                spec.charge_magnitude
            } else {
                -spec.charge_magnitude
            }
        })
        .collect();
    let mut init_rng = stream.split("init").rng();
    let state = initial_particles(&mut init_rng, n, spec.init_pos_std, spec.init_vel_norm);
    simulate_charged_from(spec, &charges, state)
}

/// Integrates given charges and initial condition. Edge type 1 marks
/// same-sign (repelling) pairs, 0 opposite-sign (attracting) pairs.
pub fn simulate_charged_from(
    spec: &ChargedSpec,
    charges: &[f64],
    state: ParticleState,
) -> Result<(Trajectory, SimStats)> {
    let n = spec.n_objects;
    let graph = InteractionGraph::from_fn(n, |i, j| usize::from(charges[i] * charges[j] > 0.0));
    let (c, clip) = (spec.coulomb_constant, spec.force_clip);
    let (states, stats) = run_particles(
        state,
        |p: &[Vec2], f: &mut [Vec2]| {
            charged_forces(charges, c, clip, p, f);
        },
        spec.integrator_dt,
        spec.box_half_width,
        spec.subsample,
        spec.n_steps_out,
    )?;
    Ok((Trajectory { states, graph }, stats))
}

/// Phase velocities `omega_i + sum_j k_ij sin(phi_i - phi_j)` (sign flipped
/// when `standard_sign`).
pub fn kuramoto_deriv(omega: &[f64], k: &[f64], standard_sign: bool, phi: &[f64], out: &mut [f64]) {
    let n = phi.len();
    let sign = if standard_sign { -1.0 } else { 1.0 };
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let kij = k[i * n + j];
            if j != i && kij != 0.0 {
                acc += kij * (phi[i] - phi[j]).sin();
            }
        }
        out[i] = omega[i] + sign * acc;
    }
}

pub fn simulate_kuramoto(spec: &KuramotoSpec, seed: u64) -> Result<Trajectory> {
    spec.validate()?;
    let stream = Stream::new(seed);
    let n = spec.n_objects;
    let mut rng = stream.split("graph").rng();
    let p = spec.edge_probability;
    let graph = sample_symmetric_graph(&mut rng, n, |r| usize::from(r.gen::<f64>() < p));
    let mut init_rng = stream.split("init").rng();
    let omega: Vec<f64> = (0..n)
        .map(|_| init_rng.gen_range(spec.omega_range.0..spec.omega_range.1))
        .collect();
    let phi0: Vec<f64> = (0..n)
        .map(|_| init_rng.gen_range(spec.phase_range.0..spec.phase_range.1))
        .collect();
    simulate_kuramoto_from(spec, &graph, &omega, &phi0)
}

/// Integrates a given coupling graph and initial condition. Features per
/// frame are `(dphi/dt, sin phi, omega)`.
pub fn simulate_kuramoto_from(
    spec: &KuramotoSpec,
    graph: &InteractionGraph,
    omega: &[f64],
    phi0: &[f64],
) -> Result<Trajectory> {
    let n = spec.n_objects;
    let mut k = vec![0.0; n * n];
    for (i, j) in edge_pairs(n) {
        if graph.edge_type(i, j) == 1 {
            k[i * n + j] = spec.coupling_k;
        }
    }
    let frames = spec.n_steps_out;
    let mut out = Array::zeros(&[n, frames, 3]);
    let mut phi = phi0.to_vec();
    let mut dphi = vec![0.0; n];
    for t in 0..frames {
        if t > 0 {
            for _ in 0..spec.subsample {
                phi = rk4_step(
                    &phi,
                    |y, d| kuramoto_deriv(omega, &k, spec.standard_sign, y, d),
                    spec.integrator_dt,
                );
            }
        }
        kuramoto_deriv(omega, &k, spec.standard_sign, &phi, &mut dphi);
        for i in 0..n {
            let base = (i * frames + t) * 3;
            out.data_mut()[base..base + 3].copy_from_slice(&[dphi[i], phi[i].sin(), omega[i]]);
        }
    }
    if !out.all_finite() {
        return Err(Error::Numerical("non-finite Kuramoto state".into()));
    }
    Ok(Trajectory {
        states: out,
        graph: graph.clone(),
    })
}
