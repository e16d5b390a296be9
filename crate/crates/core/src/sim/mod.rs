//! Trajectory generators for springs, charged particles and phase-coupled
//! oscillators, plus dataset assembly.

mod dataset;
mod integrators;
mod systems;

pub use dataset::{
    generate_dataset, generate_split, graphs_file, read_dataset, read_split, states_file,
    write_dataset, Dataset, Split, SystemKind, SystemSpec, SPLITS, TEST_EXTENSION,
};
pub use integrators::{leapfrog_step, reflect_walls, rk4_step, Leapfrog, ParticleState, Vec2};
pub use systems::{
    charged_forces, charged_pair_force, kuramoto_deriv, simulate_charged, simulate_charged_from,
    simulate_charged_with_stats, simulate_kuramoto, simulate_kuramoto_from, simulate_springs,
    simulate_springs_from, simulate_springs_with_stats, spring_forces, ChargedSpec, KuramotoSpec,
    SimStats, SpringsSpec, Trajectory,
};
