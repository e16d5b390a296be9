//! Vectorized message passing over the fully connected directed graph
//! without self-loops.
//!
//! Edges are enumerated lexicographically by `(sender, receiver)`:
//! `(0,1), (0,2), .., (0,n-1), (1,0), (1,2), ..`. Node-to-edge rows are
//! laid out receiver first, `[h_receiver, h_sender]`. Encoder and decoder
//! both go through this module, so they always agree on the layout.

use crate::diffcore::{Array, Tape, Var};
use crate::error::{Error, Result};

/// Receiver and sender incidence matrices, both `[E, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceMatrices {
    pub m_in: Array,
    pub m_out: Array,
    pub n: usize,
    pub e: usize,
    senders: Vec<usize>,
    receivers: Vec<usize>,
}

/// Number of ordered pairs among `n` objects.
pub fn edge_count(n: usize) -> usize {
    n * n.saturating_sub(1)
}

/// Position of the ordered pair `(sender, receiver)` in the edge enumeration.
pub fn edge_index(n: usize, sender: usize, receiver: usize) -> usize {
    debug_assert!(sender != receiver && sender < n && receiver < n);
    sender * (n - 1)
        + if receiver < sender {
            receiver
        } else {
            receiver - 1
        }
}

/// `(sender, receiver)` pairs in enumeration order.
pub fn edge_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
}

pub fn build_incidence(n: usize) -> Result<IncidenceMatrices> {
    if n < 2 {
        return Err(Error::contract(format!(
            "message passing needs at least 2 objects, got {n}"
        )));
    }
    let e = edge_count(n);
    let mut m_in = Array::zeros(&[e, n]);
    let mut m_out = Array::zeros(&[e, n]);
    let mut senders = Vec::with_capacity(e);
    let mut receivers = Vec::with_capacity(e);
    for (k, (i, j)) in edge_pairs(n).enumerate() {
        m_out.set(&[k, i], 1.0);
        m_in.set(&[k, j], 1.0);
        senders.push(i);
        receivers.push(j);
    }
    Ok(IncidenceMatrices {
        m_in,
        m_out,
        n,
        e,
        senders,
        receivers,
    })
}

impl IncidenceMatrices {
    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    /// Edge-to-node aggregation matrix `[N, E]`, the transpose of `m_in`.
    pub fn aggregation(&self) -> Array {
        self.m_in.t()
    }

    fn node_axis(&self, op: &'static str, shape: &[usize], want: usize) -> Result<()> {
        let ok = matches!(shape.len(), 2 | 3) && shape[shape.len() - 2] == want;
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!("expected [.., {want}, F], got {shape:?}"),
            ))
        }
    }

    /// `[.., N, F] -> [.., E, 2F]`, each row `[h_receiver, h_sender]`.
    pub fn node2edge(&self, tape: &mut Tape, h_v: Var) -> Result<Var> {
        self.node_axis("node2edge", tape.value(h_v).shape(), self.n)?;
        let m_in = tape.leaf(self.m_in.clone());
        let m_out = tape.leaf(self.m_out.clone());
        let recv = tape.matmul(m_in, h_v)?;
        let send = tape.matmul(m_out, h_v)?;
        let axis = tape.value(recv).rank() - 1;
        tape.concat(&[recv, send], axis)
    }

    /// `[.., E, F] -> [.., N, F]`, summing over incoming edges.
    pub fn edge2node(&self, tape: &mut Tape, h_e: Var) -> Result<Var> {
        self.node_axis("edge2node", tape.value(h_e).shape(), self.e)?;
        let agg = tape.leaf(self.aggregation());
        tape.matmul(agg, h_e)
    }
}

/// Edge type for every ordered pair, in enumeration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionGraph {
    pub n: usize,
    pub edge_types: Vec<usize>,
}

impl InteractionGraph {
    pub fn empty(n: usize) -> Self {
        InteractionGraph {
            n,
            edge_types: vec![0; edge_count(n)],
        }
    }

    /// Builds a graph from a per-pair type function.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> usize) -> Self {
        InteractionGraph {
            n,
            edge_types: edge_pairs(n).map(|(i, j)| f(i, j)).collect(),
        }
    }

    pub fn edge_type(&self, sender: usize, receiver: usize) -> usize {
        self.edge_types[edge_index(self.n, sender, receiver)]
    }

    pub fn is_symmetric(&self) -> bool {
        edge_pairs(self.n).all(|(i, j)| self.edge_type(i, j) == self.edge_type(j, i))
    }

    /// Row-major `[N, N]` matrix with `-1` on the diagonal.
    pub fn to_matrix(&self) -> Vec<i32> {
        let n = self.n;
        let mut m = vec![-1; n * n];
        for (k, (i, j)) in edge_pairs(n).enumerate() {
            m[i * n + j] = self.edge_types[k] as i32;
        }
        m
    }

    pub fn from_matrix(n: usize, m: &[i32]) -> Result<Self> {
        if m.len() != n * n {
            return Err(Error::Data(format!(
                "graph matrix of {} entries for {n} objects",
                m.len()
            )));
        }
        let mut types = Vec::with_capacity(edge_count(n));
        for (i, j) in edge_pairs(n) {
            let v = m[i * n + j];
            if v < 0 {
                return Err(Error::Data(format!("negative edge type at ({i},{j})")));
            }
            types.push(v as usize);
        }
        Ok(InteractionGraph {
            n,
            edge_types: types,
        })
    }

    /// `[E, K]` one-hot encoding.
    pub fn one_hot(&self, k_types: usize) -> Result<Array> {
        let e = self.edge_types.len();
        let mut out = Array::zeros(&[e, k_types]);
        for (idx, &t) in self.edge_types.iter().enumerate() {
            if t >= k_types {
                return Err(Error::Data(format!("edge type {t} outside 0..{k_types}")));
            }
            out.set(&[idx, t], 1.0);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_enumeration() {
        let inc = build_incidence(2).unwrap();
        assert_eq!(inc.e, 2);
        assert_eq!(edge_pairs(2).collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
        assert_eq!(inc.senders(), &[0, 1]);
        assert_eq!(inc.receivers(), &[1, 0]);
    }

    #[test]
    fn five_nodes_have_twenty_edges() {
        assert_eq!(build_incidence(5).unwrap().e, 20);
    }

    #[test]
    fn fewer_than_two_nodes_rejected() {
        assert!(matches!(build_incidence(1), Err(Error::Contract(_))));
    }

    #[test]
    fn incidence_rows_are_one_hot_without_self_loops() {
        let inc = build_incidence(6).unwrap();
        for r in 0..inc.e {
            let row_in: Vec<f64> = (0..6).map(|c| inc.m_in.get(&[r, c])).collect();
            let row_out: Vec<f64> = (0..6).map(|c| inc.m_out.get(&[r, c])).collect();
            assert_eq!(row_in.iter().sum::<f64>(), 1.0);
            assert_eq!(row_out.iter().sum::<f64>(), 1.0);
            assert_ne!(row_in, row_out);
        }
        for (k, (i, j)) in edge_pairs(6).enumerate() {
            assert_eq!(edge_index(6, i, j), k);
        }
    }

    #[test]
    fn aggregation_is_transpose_of_receiver_incidence() {
        let inc = build_incidence(4).unwrap();
        let agg = inc.aggregation();
        for r in 0..inc.e {
            for c in 0..4 {
                assert_eq!(agg.get(&[c, r]), inc.m_in.get(&[r, c]));
            }
        }
    }

    #[test]
    fn node2edge_two_nodes() {
        let inc = build_incidence(2).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(Array::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let e = inc.node2edge(&mut t, h).unwrap();
        assert_eq!(t.value(e).shape(), &[2, 2]);
        assert_eq!(t.value(e).data(), &[2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn edge2node_counts_incoming() {
        let inc = build_incidence(5).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(Array::full(&[20, 3], 1.0));
        let v = inc.edge2node(&mut t, h).unwrap();
        assert!(t.value(v).data().iter().all(|&x| x == 4.0));
        let z = t.leaf(Array::zeros(&[20, 3]));
        let v = inc.edge2node(&mut t, z).unwrap();
        assert_eq!(t.value(v).max_abs(), 0.0);
    }

    #[test]
    fn identical_nodes_give_identical_edges() {
        let inc = build_incidence(4).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(Array::from_fn(&[4, 3], |i| (i % 3) as f64 + 0.5));
        let e = inc.node2edge(&mut t, h).unwrap();
        let v = t.value(e);
        let first = &v.data()[..6];
        assert!(v.data().chunks(6).all(|row| row == first));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let inc = build_incidence(3).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(Array::zeros(&[4, 2]));
        assert!(matches!(
            inc.node2edge(&mut t, h),
            Err(Error::Dimension {
                op: "node2edge",
                ..
            })
        ));
        assert!(matches!(
            inc.edge2node(&mut t, h),
            Err(Error::Dimension {
                op: "edge2node",
                ..
            })
        ));
    }

    #[test]
    fn graph_matrix_round_trip() {
        let g = InteractionGraph::from_fn(4, |i, j| (i + j) % 2);
        assert!(g.is_symmetric());
        let m = g.to_matrix();
        assert_eq!(m[0], -1);
        assert_eq!(InteractionGraph::from_matrix(4, &m).unwrap(), g);
    }
}
