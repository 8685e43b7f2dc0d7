//! Tape-level forward passes for all five model families.
//!
//! Each builder takes staged parameter ids (in the canonical block order
//! produced by `init_params`) plus constant inputs already on the tape, and
//! returns output variable ids so training can compose a loss on the same
//! tape.

use std::rc::Rc;

use crate::error::Result;
use crate::models::graph::ParticleGraph;
use crate::models::{Arch, ModelFamily, ModelParams};
use crate::tensor::mlp::{mlp_forward, FinalActivation, MlpVars};
use crate::tensor::{Tape, VarId};

/// Parameter ids staged on a tape, consumed in block order.
pub struct ParamCursor<'a> {
    ids: &'a [VarId],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(ids: &'a [VarId]) -> Self {
        ParamCursor { ids, pos: 0 }
    }

    /// Takes the next `layers` weight/bias pairs.
    fn next_mlp(&mut self, layers: usize) -> MlpVars {
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for _ in 0..layers {
            weights.push(self.ids[self.pos]);
            biases.push(self.ids[self.pos + 1]);
            self.pos += 2;
        }
        MlpVars { weights, biases }
    }

    pub fn finished(&self) -> bool {
        self.pos == self.ids.len()
    }
}

/// Registers every parameter array as a tape leaf, in storage order.
pub fn stage_params(tape: &mut Tape, params: &ModelParams) -> Vec<VarId> {
    params
        .values()
        .iter()
        .map(|a| tape.leaf(a.clone()))
        .collect()
}

/// Forces and gamma head of BroGNet / BDGNN on the tape.
///
/// Returns `(forces [n,3], gamma [n,1])`. The two families share embeddings
/// and message passing; they differ only in where the force head reads:
/// BroGNet predicts per-edge forces and aggregates incoming minus outgoing,
/// BDGNN reads forces off the final node embeddings directly.
pub fn graph_model_on_tape(
    tape: &mut Tape,
    cursor: &mut ParamCursor,
    family: ModelFamily,
    arch: &Arch,
    graph: &ParticleGraph,
    onehot: VarId,
    edge_feat: VarId,
) -> Result<(VarId, VarId)> {
    let layers = arch.hidden_layers + 1;
    let node_embed = cursor.next_mlp(layers);
    let edge_embed = cursor.next_mlp(layers);
    let mut h_v = mlp_forward(tape, &node_embed, onehot, FinalActivation::Squareplus)?;
    let mut h_e = mlp_forward(tape, &edge_embed, edge_feat, FinalActivation::Squareplus)?;

    let src = Rc::clone(&graph.src_ids);
    let dst = Rc::clone(&graph.dst_ids);
    let n = graph.n_nodes;
    for _ in 0..arch.msg_layers {
        let msg_node = cursor.next_mlp(1);
        let msg_edge = cursor.next_mlp(1);
        // Eq-style node update: [h_i || sum_in h_ji || sum_out h_ij].
        let in_sum = tape.segment_sum(h_e, Rc::clone(&dst), n)?;
        let out_sum = tape.segment_sum(h_e, Rc::clone(&src), n)?;
        let node_cat = tape.concat_cols(&[h_v, in_sum, out_sum])?;
        let next_v = mlp_forward(tape, &msg_node, node_cat, FinalActivation::Squareplus)?;
        // Edge update from the pre-update node embeddings: [h_ij || h_i || h_j].
        let h_src = tape.gather(h_v, Rc::clone(&src))?;
        let h_dst = tape.gather(h_v, Rc::clone(&dst))?;
        let edge_cat = tape.concat_cols(&[h_e, h_src, h_dst])?;
        let next_e = mlp_forward(tape, &msg_edge, edge_cat, FinalActivation::Squareplus)?;
        h_v = next_v;
        h_e = next_e;
    }

    let force_head = cursor.next_mlp(layers);
    let head_act = if arch.force_head_linear {
        FinalActivation::Linear
    } else {
        FinalActivation::Squareplus
    };
    let forces = match family {
        ModelFamily::BroGnet => {
            // Per-edge force, then incoming minus outgoing per node; the
            // reactive term makes the per-node sums cancel globally.
            let f_edge = mlp_forward(tape, &force_head, h_e, head_act)?;
            let incoming = tape.segment_sum(f_edge, Rc::clone(&dst), n)?;
            let outgoing = tape.segment_sum(f_edge, Rc::clone(&src), n)?;
            tape.sub(incoming, outgoing)?
        }
        ModelFamily::BdGnn => mlp_forward(tape, &force_head, h_v, head_act)?,
        _ => unreachable!("graph_model_on_tape only handles BroGNet/BDGNN"),
    };
    let gamma_head = cursor.next_mlp(layers);
    let gamma = mlp_forward(tape, &gamma_head, onehot, FinalActivation::Squareplus)?;
    Ok((forces, gamma))
}

/// Full graph-network baseline on the tape: encode, one process block over
/// incoming edges, decode `(force, gamma)` per node. Node inputs include
/// absolute positions and velocities, so the model is not translation
/// invariant.
pub fn bfgn_on_tape(
    tape: &mut Tape,
    cursor: &mut ParamCursor,
    arch: &Arch,
    graph: &ParticleGraph,
    node_inputs: VarId,
    edge_feat: VarId,
) -> Result<(VarId, VarId)> {
    let layers = arch.hidden_layers + 1;
    let enc_node = cursor.next_mlp(layers);
    let enc_edge = cursor.next_mlp(layers);
    let mut h_v = mlp_forward(tape, &enc_node, node_inputs, FinalActivation::Squareplus)?;
    let mut h_e = mlp_forward(tape, &enc_edge, edge_feat, FinalActivation::Squareplus)?;

    let src = Rc::clone(&graph.src_ids);
    let dst = Rc::clone(&graph.dst_ids);
    let n = graph.n_nodes;
    for _ in 0..arch.msg_layers {
        let proc_edge = cursor.next_mlp(layers);
        let proc_node = cursor.next_mlp(layers);
        let h_src = tape.gather(h_v, Rc::clone(&src))?;
        let h_dst = tape.gather(h_v, Rc::clone(&dst))?;
        let edge_cat = tape.concat_cols(&[h_e, h_src, h_dst])?;
        h_e = mlp_forward(tape, &proc_edge, edge_cat, FinalActivation::Squareplus)?;
        let agg = tape.segment_sum(h_e, Rc::clone(&dst), n)?;
        let node_cat = tape.concat_cols(&[h_v, agg])?;
        h_v = mlp_forward(tape, &proc_node, node_cat, FinalActivation::Squareplus)?;
    }

    let dec = cursor.next_mlp(layers);
    let out = mlp_forward(tape, &dec, h_v, FinalActivation::Linear)?;
    let forces = tape.slice_cols(out, 0, 3)?;
    let gamma_raw = tape.slice_cols(out, 3, 1)?;
    let gamma = tape.squareplus(gamma_raw);
    Ok((forces, gamma))
}

/// Feed-forward Brownian baseline: flat positions to `(forces, gamma)`.
///
/// `x_flat` is `[batch, 3n]`; returns `(forces [batch*n, 3], gamma [batch*n, 1])`.
pub fn bnn_on_tape(
    tape: &mut Tape,
    cursor: &mut ParamCursor,
    arch: &Arch,
    n: usize,
    x_flat: VarId,
) -> Result<(VarId, VarId)> {
    let layers = arch.hidden_layers + 1;
    let mlp = cursor.next_mlp(layers);
    let out = mlp_forward(tape, &mlp, x_flat, FinalActivation::Linear)?;
    let batch = tape.shape(x_flat)[0];
    let f_flat = tape.slice_cols(out, 0, 3 * n)?;
    let forces = tape.reshape(f_flat, vec![batch * n, 3])?;
    let g_flat = tape.slice_cols(out, 3 * n, n)?;
    let g_col = tape.reshape(g_flat, vec![batch * n, 1])?;
    let gamma = tape.squareplus(g_col);
    Ok((forces, gamma))
}

/// Direct next-position baseline: `[batch, 3n] -> [batch, 3n]`, linear output.
pub fn nn_on_tape(
    tape: &mut Tape,
    cursor: &mut ParamCursor,
    arch: &Arch,
    x_flat: VarId,
) -> Result<VarId> {
    let layers = arch.hidden_layers + 1;
    let mlp = cursor.next_mlp(layers);
    mlp_forward(tape, &mlp, x_flat, FinalActivation::Linear)
}
