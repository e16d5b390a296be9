use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::systems::{
    simulate_charged, simulate_kuramoto, simulate_springs, ChargedSpec, KuramotoSpec, SpringsSpec,
    Trajectory,
};
use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::graphops::InteractionGraph;
use crate::noise::Stream;
use crate::tensorfile::{self, Tensor};

/// Extra frames appended to test trajectories for multi-step evaluation.
pub const TEST_EXTENSION: usize = 20;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    Springs,
    Charged,
    Kuramoto,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Springs => "springs",
            SystemKind::Charged => "charged",
            SystemKind::Kuramoto => "kuramoto",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "springs" => Ok(SystemKind::Springs),
            "charged" => Ok(SystemKind::Charged),
            "kuramoto" => Ok(SystemKind::Kuramoto),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemSpec {
    Springs(SpringsSpec),
    Charged(ChargedSpec),
    Kuramoto(KuramotoSpec),
}

impl SystemSpec {
    pub fn kind(&self) -> SystemKind {
        match self {
            SystemSpec::Springs(_) => SystemKind::Springs,
            SystemSpec::Charged(_) => SystemKind::Charged,
            SystemSpec::Kuramoto(_) => SystemKind::Kuramoto,
        }
    }

    pub fn n_objects(&self) -> usize {
        match self {
            SystemSpec::Springs(s) => s.n_objects,
            SystemSpec::Charged(s) => s.n_objects,
            SystemSpec::Kuramoto(s) => s.n_objects,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            SystemSpec::Kuramoto(_) => 3,
            _ => 4,
        }
    }

    /// Number of ground-truth edge types.
    pub fn k_types(&self) -> usize {
        match self {
            SystemSpec::Springs(s) => s.edge_types.len().max(2),
            _ => 2,
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            SystemSpec::Springs(s) => s.n_steps_out,
            SystemSpec::Charged(s) => s.n_steps_out,
            SystemSpec::Kuramoto(s) => s.n_steps_out,
        }
    }

    /// Same system with a different number of emitted frames.
    pub fn with_frames(&self, frames: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            SystemSpec::Springs(s) => s.n_steps_out = frames,
            SystemSpec::Charged(s) => s.n_steps_out = frames,
            SystemSpec::Kuramoto(s) => s.n_steps_out = frames,
        }
        out
    }

    pub fn simulate(&self, seed: u64) -> Result<Trajectory> {
        match self {
            SystemSpec::Springs(s) => simulate_springs(s, seed),
            SystemSpec::Charged(s) => simulate_charged(s, seed),
            SystemSpec::Kuramoto(s) => simulate_kuramoto(s, seed),
        }
    }
}

/// One split: `states` is `[S, N, T, F]`, one graph per trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub states: Array,
    pub graphs: Vec<InteractionGraph>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn n_objects(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn n_features(&self) -> usize {
        self.states.shape()[3]
    }

    /// Trajectory `i` as `[N, T, F]`.
    pub fn trajectory(&self, i: usize) -> &[f64] {
        let per = self.states.len() / self.len().max(1);
        &self.states.data()[i * per..(i + 1) * per]
    }

    /// Gathers the given samples into a `[B, N, T, F]` batch.
    pub fn batch(&self, indices: &[usize]) -> Array {
        let s = self.states.shape();
        let mut data = Vec::with_capacity(indices.len() * s[1] * s[2] * s[3]);
        for &i in indices {
            data.extend_from_slice(self.trajectory(i));
        }
        Array::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("consistent batch")
    }

    /// Keeps only the first `frames` time steps.
    pub fn truncate_frames(&self, frames: usize) -> Split {
        let s = self.states.shape();
        let (b, n, t, f) = (s[0], s[1], s[2], s[3]);
        let frames = frames.min(t);
        let mut data = Vec::with_capacity(b * n * frames * f);
        for row in self.states.data().chunks(t * f) {
            data.extend_from_slice(&row[..frames * f]);
        }
        Split {
            states: Array::new(vec![b, n, frames, f], data).unwrap(),
            graphs: self.graphs.clone(),
        }
    }

    pub fn from_trajectories(trajs: Vec<Trajectory>) -> Result<Split> {
        let first = trajs
            .first()
            .ok_or_else(|| Error::contract("empty split"))?;
        let shape = first.states.shape().to_vec();
        let mut data = Vec::with_capacity(trajs.len() * first.states.len());
        let mut graphs = Vec::with_capacity(trajs.len());
        for t in trajs {
            if t.states.shape() != shape.as_slice() {
                return Err(Error::Data("trajectories of different shapes".into()));
            }
            data.extend_from_slice(t.states.data());
            graphs.push(t.graph);
        }
        let states = Array::new(vec![graphs.len(), shape[0], shape[1], shape[2]], data)?;
        Ok(Split { states, graphs })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Simulates `count` trajectories; trajectory `i` is seeded from
/// `stream.index(i)`, so output order never depends on scheduling.
pub fn generate_split(
    system: &SystemSpec,
    count: usize,
    frames: usize,
    stream: Stream,
) -> Result<Split> {
    let spec = system.with_frames(frames);
    let trajs = (0..count)
        .into_par_iter()
        .map(|i| spec.simulate(stream.index(i as u64).key()))
        .collect::<Result<Vec<_>>>()?;
    Split::from_trajectories(trajs)
}

/// Train/valid trajectories have the spec's frame count; test trajectories
/// run [`TEST_EXTENSION`] frames longer. Each split draws from its own stream.
pub fn generate_dataset(
    system: &SystemSpec,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    if counts.0 == 0 || counts.1 == 0 || counts.2 == 0 {
        return Err(Error::Config(format!(
            "split counts must be positive, got {counts:?}"
        )));
    }
    let root = Stream::new(seed);
    let frames = system.frames();
    Ok(Dataset {
        train: generate_split(system, counts.0, frames, root.split("train"))?,
        valid: generate_split(system, counts.1, frames, root.split("valid"))?,
        test: generate_split(
            system,
            counts.2,
            frames + TEST_EXTENSION,
            root.split("test"),
        )?,
    })
}

pub fn states_file(split: &str) -> String {
    format!("{split}_states.nrit")
}

pub fn graphs_file(split: &str) -> String {
    format!("{split}_graphs.nrit")
}

fn graphs_tensor(split: &Split) -> Result<Tensor> {
    let n = split.n_objects();
    let mut data = Vec::with_capacity(split.len() * n * n);
    for g in &split.graphs {
        data.extend(g.to_matrix());
    }
    Tensor::i32(vec![split.len(), n, n], data)
}

/// Writes the six split files. Either all of them appear or none do.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let mut staged = Vec::new();
    let result = (|| -> Result<()> {
        for name in SPLITS {
            let split = data.split(name).unwrap();
            for (file, tensor) in [
                (states_file(name), Tensor::from_array(&split.states)),
                (graphs_file(name), graphs_tensor(split)?),
            ] {
                let path = dir.join(file);
                let tmp = path.with_extension("partial");
                let mut buf = Vec::new();
                tensor.write_to(&mut buf)?;
                staged.push((tmp.clone(), path));
                fs::write(&tmp, buf)?;
            }
        }
        for (tmp, path) in &staged {
            fs::rename(tmp, path)?;
        }
        Ok(())
    })();
    if result.is_err() {
        for (tmp, path) in &staged {
            let _ = fs::remove_file(tmp);
            let _ = fs::remove_file(path);
        }
    }
    result
}

pub fn read_split(dir: &Path, name: &str) -> Result<Split> {
    let states = tensorfile::load(&dir.join(states_file(name)))?.to_array()?;
    let graphs = tensorfile::load(&dir.join(graphs_file(name)))?;
    if states.rank() != 4 || graphs.shape.len() != 3 {
        return Err(Error::Data(format!("{name}: unexpected tensor ranks")));
    }
    let (s, n) = (states.shape()[0], states.shape()[1]);
    if graphs.shape != [s, n, n] {
        return Err(Error::Data(format!(
            "{name}: graphs {:?} do not match states {:?}",
            graphs.shape,
            states.shape()
        )));
    }
    let raw = graphs.as_i32()?;
    let graphs = raw
        .chunks(n * n)
        .map(|m| InteractionGraph::from_matrix(n, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Split { states, graphs })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_split(dir, "train")?,
        valid: read_split(dir, "valid")?,
        test: read_split(dir, "test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_counts_and_frames() {
        let sys = SystemSpec::Springs(SpringsSpec::default());
        let d = generate_dataset(&sys, (10, 2, 2), 1).unwrap();
        assert_eq!(d.train.states.shape(), &[10, 5, 49, 4]);
        assert_eq!(d.valid.states.shape(), &[2, 5, 49, 4]);
        assert_eq!(d.test.states.shape(), &[2, 5, 69, 4]);
        assert_ne!(d.train.trajectory(0), d.valid.trajectory(0));
        assert_ne!(d.train.trajectory(0), d.test.trajectory(0));
    }

    #[test]
    fn zero_count_rejected() {
        let sys = SystemSpec::Kuramoto(KuramotoSpec::default());
        assert!(generate_dataset(&sys, (0, 1, 1), 1).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sys = SystemSpec::Charged(ChargedSpec {
            n_objects: 3,
            ..ChargedSpec::default()
        });
        let d = generate_dataset(&sys, (3, 1, 1), 7).unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
        let leftovers = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "partial")
            })
            .count();
        assert_eq!(leftovers, 0);
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let sys = SystemSpec::Springs(SpringsSpec {
            n_objects: 2,
            n_steps_out: 3,
            ..SpringsSpec::default()
        });
        let d = generate_dataset(&sys, (2, 1, 1), 7).unwrap();
        // A directory where a file should go makes the final rename fail.
        fs::create_dir(dir.path().join(graphs_file("test"))).unwrap();
        fs::write(dir.path().join(graphs_file("test")).join("x"), b"x").unwrap();
        assert!(write_dataset(dir.path(), &d).is_err());
        for name in SPLITS {
            assert!(!dir.path().join(states_file(name)).exists());
        }
    }

    #[test]
    fn truncation_keeps_prefix() {
        let sys = SystemSpec::Kuramoto(KuramotoSpec {
            n_objects: 3,
            ..KuramotoSpec::default()
        });
        let d = generate_dataset(&sys, (1, 1, 2), 3).unwrap();
        let cut = d.test.truncate_frames(49);
        assert_eq!(cut.states.shape(), &[2, 3, 49, 3]);
        assert_eq!(
            cut.states.get(&[1, 2, 48, 1]),
            d.test.states.get(&[1, 2, 48, 1])
        );
    }
}
