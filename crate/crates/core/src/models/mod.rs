//! The five model families and their prediction interfaces.
//!
//! BroGNet and BDGNN are message-passing graph networks over particle-type
//! one-hots and relative displacements; BFGN is a full graph-network baseline
//! consuming absolute positions and velocities; BNN and NN are fixed-size
//! feed-forward baselines. All Brownian families predict per-particle forces
//! and a strictly positive friction estimate.

mod forward;
mod graph;

pub use forward::{
    bfgn_on_tape, bnn_on_tape, graph_model_on_tape, nn_on_tape, stage_params, ParamCursor,
};
pub use graph::{build_graph, GraphTopology, ParticleGraph};

use crate::error::{Error, Result};
use crate::integrator::BrownianDynamics;
use crate::rng::rng_for;
use crate::systems::SystemSpec;
use crate::tensor::mlp::{init_mlp, mlp_param_count};
use crate::tensor::{Array, Tape};

/// Lower clamp on predicted gamma before it divides anything.
pub const GAMMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    BroGnet,
    BdGnn,
    BFgn,
    Bnn,
    Nn,
}

impl ModelFamily {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelFamily::BroGnet => "brognet",
            ModelFamily::BdGnn => "bdgnn",
            ModelFamily::BFgn => "bfgn",
            ModelFamily::Bnn => "bnn",
            ModelFamily::Nn => "nn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "brognet" => Ok(ModelFamily::BroGnet),
            "bdgnn" => Ok(ModelFamily::BdGnn),
            "bfgn" => Ok(ModelFamily::BFgn),
            "bnn" => Ok(ModelFamily::Bnn),
            "nn" => Ok(ModelFamily::Nn),
            other => Err(Error::Parameter(format!("unknown model family `{other}`"))),
        }
    }

    /// Graph families generalize across system sizes; NN and BNN bake the
    /// particle count into their parameter shapes.
    pub fn is_inductive(&self) -> bool {
        matches!(
            self,
            ModelFamily::BroGnet | ModelFamily::BdGnn | ModelFamily::BFgn
        )
    }
}

/// Architecture metadata; enough to rebuild every parameter shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub n_types: usize,
    /// Node and edge embedding width.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub msg_layers: usize,
    /// Particle count baked into NN/BNN shapes.
    pub fixed_n: Option<usize>,
    /// Ablation toggle: linear force head instead of squareplus.
    pub force_head_linear: bool,
}

impl Arch {
    /// Benchmark defaults per family.
    pub fn defaults(family: ModelFamily, spec: &SystemSpec) -> Arch {
        match family {
            ModelFamily::BroGnet | ModelFamily::BdGnn => Arch {
                n_types: spec.n_types(),
                embed_dim: 5,
                hidden_dim: 5,
                hidden_layers: 2,
                msg_layers: 1,
                fixed_n: None,
                force_head_linear: false,
            },
            ModelFamily::BFgn => Arch {
                n_types: spec.n_types(),
                embed_dim: 8,
                hidden_dim: 16,
                hidden_layers: 2,
                msg_layers: 1,
                fixed_n: None,
                force_head_linear: false,
            },
            ModelFamily::Bnn | ModelFamily::Nn => Arch {
                n_types: spec.n_types(),
                embed_dim: 0,
                hidden_dim: 16,
                hidden_layers: 2,
                msg_layers: 0,
                fixed_n: Some(spec.n_particles),
                force_head_linear: false,
            },
        }
    }

    fn mlp_widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers + 2);
        w.push(input);
        w.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        w.push(output);
        w
    }
}

/// Named MLP blocks of a family in canonical order, with layer widths.
pub fn param_blocks(family: ModelFamily, arch: &Arch) -> Vec<(String, Vec<usize>)> {
    let mut blocks = Vec::new();
    match family {
        ModelFamily::BroGnet | ModelFamily::BdGnn => {
            let e = arch.embed_dim;
            blocks.push(("node_embed".into(), arch.mlp_widths(arch.n_types, e)));
            blocks.push(("edge_embed".into(), arch.mlp_widths(3, e)));
            for l in 0..arch.msg_layers {
                blocks.push((format!("msg_node_{l}"), vec![3 * e, e]));
                blocks.push((format!("msg_edge_{l}"), vec![3 * e, e]));
            }
            blocks.push(("force_head".into(), arch.mlp_widths(e, 3)));
            blocks.push(("gamma_head".into(), arch.mlp_widths(arch.n_types, 1)));
        }
        ModelFamily::BFgn => {
            let e = arch.embed_dim;
            blocks.push(("enc_node".into(), arch.mlp_widths(arch.n_types + 6, e)));
            blocks.push(("enc_edge".into(), arch.mlp_widths(3, e)));
            for l in 0..arch.msg_layers {
                blocks.push((format!("proc_edge_{l}"), arch.mlp_widths(3 * e, e)));
                blocks.push((format!("proc_node_{l}"), arch.mlp_widths(2 * e, e)));
            }
            blocks.push(("dec_node".into(), arch.mlp_widths(e, 4)));
        }
        ModelFamily::Bnn => {
            let n = arch.fixed_n.expect("bnn needs fixed_n");
            blocks.push(("mlp".into(), arch.mlp_widths(3 * n, 4 * n)));
        }
        ModelFamily::Nn => {
            let n = arch.fixed_n.expect("nn needs fixed_n");
            blocks.push(("mlp".into(), arch.mlp_widths(3 * n, 3 * n)));
        }
    }
    blocks
}

/// Serializable parameter tree of one model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub family: ModelFamily,
    pub arch: Arch,
    names: Vec<String>,
    values: Vec<Array>,
}

impl ModelParams {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Rebuilds a tree from named arrays, validating against the canonical
    /// layout for `(family, arch)`.
    pub fn from_parts(
        family: ModelFamily,
        arch: Arch,
        names: Vec<String>,
        values: Vec<Array>,
    ) -> Result<Self> {
        let expected = expected_leaves(family, &arch);
        if names.len() != expected.len() || values.len() != expected.len() {
            return Err(Error::TreeMismatch(format!(
                "expected {} parameter arrays, got {}",
                expected.len(),
                names.len()
            )));
        }
        for ((name, value), (exp_name, exp_shape)) in
            names.iter().zip(&values).zip(&expected)
        {
            if name != exp_name || value.shape() != exp_shape.as_slice() {
                return Err(Error::TreeMismatch(format!(
                    "leaf `{name}` {:?} does not match expected `{exp_name}` {exp_shape:?}",
                    value.shape()
                )));
            }
        }
        Ok(ModelParams {
            family,
            arch,
            names,
            values,
        })
    }
}

fn expected_leaves(family: ModelFamily, arch: &Arch) -> Vec<(String, Vec<usize>)> {
    let mut leaves = Vec::new();
    for (block, widths) in param_blocks(family, arch) {
        for (l, w) in widths.windows(2).enumerate() {
            leaves.push((format!("{block}.w{l}"), vec![w[0], w[1]]));
            leaves.push((format!("{block}.b{l}"), vec![w[1]]));
        }
    }
    leaves
}

/// Seeded parameter initialization: fan-in-scaled uniform weights, zero
/// biases, benchmark widths per family.
pub fn init_params(family: ModelFamily, spec: &SystemSpec, seed: u64) -> ModelParams {
    init_params_with_arch(family, Arch::defaults(family, spec), seed)
}

pub fn init_params_with_arch(family: ModelFamily, arch: Arch, seed: u64) -> ModelParams {
    let mut rng = rng_for(seed, "model-init");
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (block, widths) in param_blocks(family, &arch) {
        let (weights, biases) = init_mlp(&widths, &mut rng);
        for (l, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            names.push(format!("{block}.w{l}"));
            values.push(w);
            names.push(format!("{block}.b{l}"));
            values.push(b);
        }
    }
    ModelParams {
        family,
        arch,
        names,
        values,
    }
}

/// Total scalar parameter count for a family/arch, by the closed form
/// `sum(fan_in * fan_out + fan_out)` over every block.
pub fn expected_param_count(family: ModelFamily, arch: &Arch) -> usize {
    param_blocks(family, arch)
        .iter()
        .map(|(_, widths)| mlp_param_count(widths))
        .sum()
}

/// Per-particle force and friction prediction.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[n, 3]`
    pub forces: Array,
    /// `[n]`, strictly positive.
    pub gamma: Array,
}

impl Prediction {
    /// Per-step positional std used in the loss: `sqrt(2 kBT dt / gamma)`.
    pub fn sigma_step(&self, spec: &SystemSpec) -> Array {
        self.gamma
            .map(|g| (2.0 * spec.kbt * spec.dt / g.max(GAMMA_FLOOR)).sqrt())
    }

    /// Process-level std used for reporting: `sqrt(2 gamma kBT)`.
    pub fn sigma_process(&self, spec: &SystemSpec) -> Array {
        self.gamma.map(|g| (2.0 * g * spec.kbt).sqrt())
    }

    /// Net predicted force per coordinate.
    pub fn total_force(&self) -> [f64; 3] {
        let mut total = [0.0; 3];
        for row in 0..self.forces.rows() {
            for (c, t) in total.iter_mut().enumerate() {
                *t += self.forces.get2(row, c);
            }
        }
        total
    }
}

fn flatten_gamma(gamma: Array) -> Array {
    let n = gamma.rows();
    gamma.reshape(vec![n]).expect("gamma column")
}

/// BroGNet prediction for one graph snapshot.
pub fn brognet_forward(params: &ModelParams, graph: &ParticleGraph) -> Result<Prediction> {
    graph_family_forward(params, graph, ModelFamily::BroGnet)
}

/// BDGNN prediction for one graph snapshot.
pub fn bdgnn_forward(params: &ModelParams, graph: &ParticleGraph) -> Result<Prediction> {
    graph_family_forward(params, graph, ModelFamily::BdGnn)
}

fn graph_family_forward(
    params: &ModelParams,
    graph: &ParticleGraph,
    family: ModelFamily,
) -> Result<Prediction> {
    if params.family != family {
        return Err(Error::Capability {
            family: params.family.tag(),
            reason: format!("expected {} parameters", family.tag()),
        });
    }
    let mut tape = Tape::inference();
    let ids = stage_params(&mut tape, params);
    let onehot = tape.leaf(graph.node_types.clone());
    let edge_feat = tape.leaf(graph.edge_features.clone());
    let mut cursor = ParamCursor::new(&ids);
    let (forces, gamma) = graph_model_on_tape(
        &mut tape,
        &mut cursor,
        family,
        &params.arch,
        graph,
        onehot,
        edge_feat,
    )?;
    Ok(Prediction {
        forces: tape.value(forces).clone(),
        gamma: flatten_gamma(tape.value(gamma).clone()),
    })
}

/// BFGN prediction from positions, velocities and the graph snapshot.
pub fn bfgn_forward(
    params: &ModelParams,
    positions: &Array,
    velocities: &Array,
    graph: &ParticleGraph,
) -> Result<Prediction> {
    if params.family != ModelFamily::BFgn {
        return Err(Error::Capability {
            family: params.family.tag(),
            reason: "expected bfgn parameters".to_string(),
        });
    }
    let mut tape = Tape::inference();
    let ids = stage_params(&mut tape, params);
    let node_in = tape.leaf(bfgn_node_inputs(graph, positions, velocities)?);
    let edge_feat = tape.leaf(graph.edge_features.clone());
    let mut cursor = ParamCursor::new(&ids);
    let (forces, gamma) =
        bfgn_on_tape(&mut tape, &mut cursor, &params.arch, graph, node_in, edge_feat)?;
    Ok(Prediction {
        forces: tape.value(forces).clone(),
        gamma: flatten_gamma(tape.value(gamma).clone()),
    })
}

/// Concatenated `[one-hot || X || Xdot]` node inputs for BFGN.
pub fn bfgn_node_inputs(
    graph: &ParticleGraph,
    positions: &Array,
    velocities: &Array,
) -> Result<Array> {
    let n = graph.n_nodes;
    if positions.shape() != [n, 3] || velocities.shape() != [n, 3] {
        return Err(Error::ShapeMismatch {
            op: "bfgn_node_inputs",
            left: positions.shape().to_vec(),
            right: velocities.shape().to_vec(),
        });
    }
    let t = graph.node_types.cols();
    let mut data = Vec::with_capacity(n * (t + 6));
    for i in 0..n {
        data.extend_from_slice(graph.node_types.row(i));
        data.extend_from_slice(positions.row(i));
        data.extend_from_slice(velocities.row(i));
    }
    Array::from_vec(vec![n, t + 6], data)
}

/// BNN prediction from flat positions `[3n]`.
pub fn bnn_forward(params: &ModelParams, x_flat: &Array) -> Result<Prediction> {
    if params.family != ModelFamily::Bnn {
        return Err(Error::Capability {
            family: params.family.tag(),
            reason: "expected bnn parameters".to_string(),
        });
    }
    let n = check_fixed_n(params, x_flat)?;
    let mut tape = Tape::inference();
    let ids = stage_params(&mut tape, params);
    let x = tape.leaf(x_flat.clone().reshape(vec![1, 3 * n])?);
    let mut cursor = ParamCursor::new(&ids);
    let (forces, gamma) = bnn_on_tape(&mut tape, &mut cursor, &params.arch, n, x)?;
    Ok(Prediction {
        forces: tape.value(forces).clone(),
        gamma: flatten_gamma(tape.value(gamma).clone()),
    })
}

/// NN baseline: direct next positions `[3n] -> [3n]`, bypassing the
/// integrator entirely.
pub fn nn_forward(params: &ModelParams, x_flat: &Array) -> Result<Array> {
    if params.family != ModelFamily::Nn {
        return Err(Error::Capability {
            family: params.family.tag(),
            reason: "expected nn parameters".to_string(),
        });
    }
    let n = check_fixed_n(params, x_flat)?;
    let mut tape = Tape::inference();
    let ids = stage_params(&mut tape, params);
    let x = tape.leaf(x_flat.clone().reshape(vec![1, 3 * n])?);
    let mut cursor = ParamCursor::new(&ids);
    let out = nn_on_tape(&mut tape, &mut cursor, &params.arch, x)?;
    tape.value(out).clone().reshape(vec![3 * n])
}

fn check_fixed_n(params: &ModelParams, x_flat: &Array) -> Result<usize> {
    let n = params.arch.fixed_n.unwrap_or(0);
    if x_flat.len() != 3 * n {
        return Err(Error::ShapeMismatch {
            op: "fixed-size forward",
            left: x_flat.shape().to_vec(),
            right: vec![3 * n],
        });
    }
    Ok(n)
}

/// Force/gamma provider backed by a trained model, for roll-outs.
///
/// The graph topology is built once; BFGN consumes finite-difference
/// velocities from the previous step when one exists.
pub struct LearnedDynamics<'a> {
    params: &'a ModelParams,
    topology: GraphTopology,
}

impl<'a> LearnedDynamics<'a> {
    pub fn new(params: &'a ModelParams, spec: &SystemSpec) -> Result<Self> {
        if params.family == ModelFamily::Nn {
            return Err(Error::Capability {
                family: "nn",
                reason: "predicts next positions directly; it has no force field".to_string(),
            });
        }
        if let Some(fixed) = params.arch.fixed_n {
            if fixed != spec.n_particles {
                return Err(Error::Capability {
                    family: params.family.tag(),
                    reason: format!(
                        "trained for n={fixed}, asked to run n={} (not inductive)",
                        spec.n_particles
                    ),
                });
            }
        }
        if params.arch.n_types != spec.n_types() {
            return Err(Error::Capability {
                family: params.family.tag(),
                reason: format!(
                    "trained for {} particle types, spec has {}",
                    params.arch.n_types,
                    spec.n_types()
                ),
            });
        }
        Ok(LearnedDynamics {
            params,
            topology: GraphTopology::of(spec),
        })
    }

    pub fn predict(
        &self,
        spec: &SystemSpec,
        positions: &Array,
        previous: Option<&Array>,
    ) -> Result<Prediction> {
        match self.params.family {
            ModelFamily::BroGnet | ModelFamily::BdGnn => {
                let graph = self.topology.with_positions(positions);
                graph_family_forward(self.params, &graph, self.params.family)
            }
            ModelFamily::BFgn => {
                let graph = self.topology.with_positions(positions);
                let velocities = match previous {
                    Some(prev) => positions.sub(prev)?.scale(1.0 / spec.dt),
                    None => Array::zeros(vec![spec.n_particles, 3]),
                };
                bfgn_forward(self.params, positions, &velocities, &graph)
            }
            ModelFamily::Bnn => {
                let flat = positions.clone().reshape(vec![3 * spec.n_particles])?;
                bnn_forward(self.params, &flat)
            }
            ModelFamily::Nn => unreachable!("rejected in constructor"),
        }
    }
}

impl BrownianDynamics for LearnedDynamics<'_> {
    fn forces_and_gammas(
        &self,
        spec: &SystemSpec,
        positions: &Array,
        previous: Option<&Array>,
    ) -> Result<(Array, Array)> {
        let pred = self.predict(spec, positions, previous)?;
        Ok((pred.forces, pred.gamma.map(|g| g.max(GAMMA_FLOOR))))
    }
}
