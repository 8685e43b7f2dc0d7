//! Directed particle graphs with type one-hots and relative-displacement
//! edge features.

use std::rc::Rc;

use crate::error::Result;
use crate::systems::SystemSpec;
use crate::tensor::Array;

/// Graph snapshot: node type one-hots plus `w_ij = X_i - X_j` per directed
/// edge. Node features never contain absolute positions.
#[derive(Clone, Debug)]
pub struct ParticleGraph {
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    /// One-hot particle types, `[n_nodes, n_types]`.
    pub node_types: Array,
    /// Relative displacement of each edge's endpoints, `[n_edges, 3]`.
    pub edge_features: Array,
    pub(crate) src_ids: Rc<Vec<usize>>,
    pub(crate) dst_ids: Rc<Vec<usize>>,
}

impl ParticleGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Static topology shared across graph snapshots: the spec's springs plus
/// their reverse directions, optionally tiled into a disjoint union for
/// batching.
#[derive(Clone, Debug)]
pub struct GraphTopology {
    pub n_nodes: usize,
    pub n_types: usize,
    edges: Vec<(usize, usize)>,
    node_types: Array,
    src_ids: Rc<Vec<usize>>,
    dst_ids: Rc<Vec<usize>>,
}

impl GraphTopology {
    /// Topology of one system: each spring contributes its directed edge and
    /// the reverse direction (deduplicated, first-seen order).
    pub fn of(spec: &SystemSpec) -> Self {
        Self::batched(spec, 1)
    }

    /// Disjoint union of `batch` copies, nodes of copy `b` offset by `b * n`.
    pub fn batched(spec: &SystemSpec, batch: usize) -> Self {
        let n = spec.n_particles;
        let mut single: Vec<(usize, usize)> = Vec::with_capacity(spec.topology.len() * 2);
        for &(i, j) in &spec.topology {
            if !single.contains(&(i, j)) {
                single.push((i, j));
            }
        }
        for &(i, j) in &spec.topology {
            if !single.contains(&(j, i)) {
                single.push((j, i));
            }
        }
        let mut edges = Vec::with_capacity(single.len() * batch);
        for b in 0..batch {
            let offset = b * n;
            edges.extend(single.iter().map(|&(i, j)| (i + offset, j + offset)));
        }
        let n_types = spec.n_types();
        let mut onehot = Array::zeros(vec![n * batch, n_types]);
        for b in 0..batch {
            for (i, &tau) in spec.particle_types.iter().enumerate() {
                onehot.set2(b * n + i, tau, 1.0);
            }
        }
        let src_ids = Rc::new(edges.iter().map(|&(i, _)| i).collect::<Vec<_>>());
        let dst_ids = Rc::new(edges.iter().map(|&(_, j)| j).collect::<Vec<_>>());
        GraphTopology {
            n_nodes: n * batch,
            n_types,
            edges,
            node_types: onehot,
            src_ids,
            dst_ids,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Snapshot with edge features computed from `positions` (`[n_nodes, 3]`).
    pub fn with_positions(&self, positions: &Array) -> ParticleGraph {
        debug_assert_eq!(positions.shape(), &[self.n_nodes, 3]);
        let x = positions.data();
        let mut w = Vec::with_capacity(self.edges.len() * 3);
        for &(i, j) in &self.edges {
            for c in 0..3 {
                w.push(x[i * 3 + c] - x[j * 3 + c]);
            }
        }
        ParticleGraph {
            n_nodes: self.n_nodes,
            edges: self.edges.clone(),
            node_types: self.node_types.clone(),
            edge_features: Array::from_vec(vec![self.edges.len(), 3], w).expect("edge features"),
            src_ids: Rc::clone(&self.src_ids),
            dst_ids: Rc::clone(&self.dst_ids),
        }
    }
}

/// Graph snapshot of one configuration of a system.
pub fn build_graph(spec: &SystemSpec, positions: &Array) -> Result<ParticleGraph> {
    debug_assert!(positions.all_finite());
    Ok(GraphTopology::of(spec).with_positions(positions))
}
