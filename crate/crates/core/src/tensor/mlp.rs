//! Affine + squareplus multilayer perceptrons over the tape.

use crate::error::Result;
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::Array;
use rand::Rng;

/// Output-layer policy for [`mlp_forward`]. Hidden layers always apply
/// squareplus; the final activation depends on what the head feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalActivation {
    Linear,
    Squareplus,
}

/// Weight/bias variable ids for one MLP, in layer order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub weights: Vec<VarId>,
    pub biases: Vec<VarId>,
}

/// Chained affine layers with squareplus between them.
///
/// `input` is `[batch, widths[0]]`; each layer maps `widths[i] -> widths[i+1]`.
pub fn mlp_forward(
    tape: &mut Tape,
    vars: &MlpVars,
    input: VarId,
    final_act: FinalActivation,
) -> Result<VarId> {
    let n_layers = vars.weights.len();
    let mut h = input;
    for l in 0..n_layers {
        let z = tape.matmul(h, vars.weights[l])?;
        let z = tape.add_bias(z, vars.biases[l])?;
        h = if l + 1 < n_layers || final_act == FinalActivation::Squareplus {
            tape.squareplus(z)
        } else {
            z
        };
    }
    Ok(h)
}

/// Fan-in-scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero
/// biases. Returns `(weights, biases)` as plain arrays, one pair per layer.
pub fn init_mlp(widths: &[usize], rng: &mut impl Rng) -> (Vec<Array>, Vec<Array>) {
    let mut weights = Vec::with_capacity(widths.len() - 1);
    let mut biases = Vec::with_capacity(widths.len() - 1);
    for w in widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        weights.push(Array::from_vec(vec![fan_in, fan_out], data).expect("init shape"));
        biases.push(Array::zeros(vec![fan_out]));
    }
    (weights, biases)
}

/// Number of scalar parameters of an MLP with the given widths:
/// `sum(fan_in * fan_out + fan_out)`.
pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}
