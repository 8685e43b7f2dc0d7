//! Dense arrays with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and single-threaded by value: arrays and tapes may
//! move between threads but are never shared mutably. Parallelism happens one
//! level up (per trajectory), never inside an op.

mod adam;
mod array;
pub mod mlp;
mod tape;

pub use adam::{adam_step, AdamState};
pub use array::Array;
pub use tape::{squareplus, squareplus_prime, Gradients, Tape, VarId, SQUAREPLUS_B};

#[cfg(test)]
mod tests {
    use super::mlp::{init_mlp, mlp_forward, mlp_param_count, FinalActivation, MlpVars};
    use super::*;
    use proptest::prelude::*;
    use std::rc::Rc;

    /// Central finite differences of `f` at `x0`, perturbing one entry at a
    /// time. Independent of the tape.
    fn finite_difference_grad(
        f: &mut dyn FnMut(&[Array]) -> f64,
        x0: &[Array],
        h: f64,
    ) -> Vec<Array> {
        let mut grads = Vec::with_capacity(x0.len());
        for i in 0..x0.len() {
            let mut g = Array::zeros(x0[i].shape().to_vec());
            for k in 0..x0[i].len() {
                let mut plus = x0.to_vec();
                plus[i].data_mut()[k] += h;
                let mut minus = x0.to_vec();
                minus[i].data_mut()[k] -= h;
                g.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            grads.push(g);
        }
        grads
    }

    fn assert_close(actual: &Array, expected: &Array, rel: f64) {
        for (a, e) in actual.data().iter().zip(expected.data()) {
            let scale = e.abs().max(1e-3);
            assert!(
                (a - e).abs() / scale < rel,
                "gradient mismatch: got {a}, expected {e}"
            );
        }
    }

    fn seeded(vals: usize, seed: u64) -> Array {
        // Deterministic pseudo-random values in [-1, 1].
        let data: Vec<f64> = (0..vals)
            .map(|i| {
                let x = ((i as f64 + 1.3) * (seed as f64 + 7.7)).sin();
                x.fract()
            })
            .collect();
        Array::from_vec(vec![vals], data).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = seeded(6, 1).reshape(vec![2, 3]).unwrap();
        let b0 = seeded(12, 2).reshape(vec![3, 4]).unwrap();
        let mut f = |inputs: &[Array]| {
            inputs[0].matmul(&inputs[1]).unwrap().sum()
        };
        let fd = finite_difference_grad(&mut f, &[a0.clone(), b0.clone()], 1e-6);

        let mut tape = Tape::new();
        let a = tape.leaf(a0);
        let b = tape.leaf(b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_close(&grads.get(a, &tape), &fd[0], 1e-5);
        assert_close(&grads.get(b, &tape), &fd[1], 1e-5);

        // grad of sum(A·B) wrt A is ones·B^T
        let ones = Array::ones(vec![2, 4]);
        let mut expected = Array::zeros(vec![2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += ones.get2(i, k) * b0.get2(j, k);
                }
                expected.set2(i, j, s);
            }
        }
        assert_close(&grads.get(a, &tape), &expected, 1e-12);
    }

    #[test]
    fn segment_sum_examples() {
        let mut tape = Tape::new();
        let v = tape.leaf(Array::from_vec(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let out = tape
            .segment_sum(v, Rc::new(vec![0, 0, 1]), 2)
            .unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0]);

        // empty edge set
        let mut tape = Tape::new();
        let v = tape.leaf(Array::zeros(vec![0, 1]));
        let out = tape.segment_sum(v, Rc::new(vec![]), 3).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0]);

        // one row per segment: identity
        let mut tape = Tape::new();
        let v = tape.leaf(Array::eye(3));
        let out = tape.segment_sum(v, Rc::new(vec![0, 1, 2]), 3).unwrap();
        assert_eq!(tape.value(out), &Array::eye(3));
    }

    #[test]
    fn segment_sum_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let v = tape.leaf(Array::zeros(vec![2, 1]));
        assert!(tape.segment_sum(v, Rc::new(vec![0, 2]), 2).is_err());
    }

    #[test]
    fn segment_sum_gradient_matches_finite_differences() {
        let x0 = seeded(8, 3).reshape(vec![4, 2]).unwrap();
        let ids = vec![1, 0, 1, 2];
        let mut f = |inputs: &[Array]| {
            let mut tape = Tape::inference();
            let v = tape.leaf(inputs[0].clone());
            let s = tape.segment_sum(v, Rc::new(ids.clone()), 3).unwrap();
            let w = tape.mul(s, s).unwrap();
            { let s = tape.sum(w); tape.value(s).item() }
        };
        let fd = finite_difference_grad(&mut f, std::slice::from_ref(&x0), 1e-6);

        let mut tape = Tape::new();
        let v = tape.leaf(x0);
        let s = tape.segment_sum(v, Rc::new(ids.clone()), 3).unwrap();
        let w = tape.mul(s, s).unwrap();
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_close(&grads.get(v, &tape), &fd[0], 1e-5);
    }

    proptest! {
        #[test]
        fn segment_sum_is_linear(
            a in proptest::collection::vec(-1.0f64..1.0, 6),
            b in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let ids = Rc::new(vec![0usize, 2, 1, 2, 0, 1]);
            let run = |vals: Vec<f64>| {
                let mut tape = Tape::inference();
                let v = tape.leaf(Array::from_vec(vec![6, 1], vals).unwrap());
                let s = tape.segment_sum(v, ids.clone(), 3).unwrap();
                tape.value(s).clone()
            };
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = run(sum);
            let rhs = run(a).add(&run(b)).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn squareplus_dominates_relu_and_increases(x in -50.0f64..50.0, dx in 1e-6f64..1.0) {
            prop_assert!(squareplus(x) > x.max(0.0));
            prop_assert!(squareplus(x + dx) > squareplus(x));
        }
    }

    #[test]
    fn squareplus_fixed_values() {
        assert!((squareplus(0.0) - 1.0).abs() < 1e-15);
        assert!((squareplus_prime(0.0) - 0.5).abs() < 1e-15);
        let x = 1000.0;
        assert!((squareplus(x) - x).abs() < 1e-2);
        assert!((squareplus(100.0) - 100.0).abs() < 1e-2);
    }

    #[test]
    fn squareplus_gradient_matches_finite_differences() {
        let x0 = seeded(5, 4);
        let mut f = |inputs: &[Array]| inputs[0].map(squareplus).sum();
        let fd = finite_difference_grad(&mut f, std::slice::from_ref(&x0), 1e-6);

        let mut tape = Tape::new();
        let v = tape.leaf(x0);
        let s = tape.squareplus(v);
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_close(&grads.get(v, &tape), &fd[0], 1e-5);
    }

    #[test]
    fn elementwise_ops_gradients_match_finite_differences() {
        let x0 = seeded(4, 5).map(|v| v.abs() + 0.5);
        let y0 = seeded(4, 6).map(|v| v.abs() + 0.5);
        let mut f = |inputs: &[Array]| {
            let mut tape = Tape::inference();
            let x = tape.leaf(inputs[0].clone());
            let y = tape.leaf(inputs[1].clone());
            let a = tape.div(x, y).unwrap();
            let b = tape.log(a);
            let c = tape.sqrt(y);
            let d = tape.mul(b, c).unwrap();
            let e = tape.recip(d);
            let g = tape.max_scalar(e, 0.9);
            { let s = tape.sum(g); tape.value(s).item() }
        };
        let fd = finite_difference_grad(&mut f, &[x0.clone(), y0.clone()], 1e-6);

        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let y = tape.leaf(y0);
        let a = tape.div(x, y).unwrap();
        let b = tape.log(a);
        let c = tape.sqrt(y);
        let d = tape.mul(b, c).unwrap();
        let e = tape.recip(d);
        let g = tape.max_scalar(e, 0.9);
        let loss = tape.sum(g);
        let grads = tape.backward(loss).unwrap();
        assert_close(&grads.get(x, &tape), &fd[0], 1e-4);
        assert_close(&grads.get(y, &tape), &fd[1], 1e-4);
    }

    #[test]
    fn gather_concat_slice_gradients_match_finite_differences() {
        let x0 = seeded(6, 7).reshape(vec![3, 2]).unwrap();
        let ids = vec![2, 0, 1, 0];
        let mut f = |inputs: &[Array]| {
            let mut tape = Tape::inference();
            let v = tape.leaf(inputs[0].clone());
            let g = tape.gather(v, Rc::new(ids.clone())).unwrap();
            let c = tape.concat_cols(&[g, g]).unwrap();
            let s = tape.slice_cols(c, 1, 2).unwrap();
            let m = tape.mul(s, s).unwrap();
            { let s = tape.sum(m); tape.value(s).item() }
        };
        let fd = finite_difference_grad(&mut f, std::slice::from_ref(&x0), 1e-6);

        let mut tape = Tape::new();
        let v = tape.leaf(x0);
        let g = tape.gather(v, Rc::new(ids)).unwrap();
        let c = tape.concat_cols(&[g, g]).unwrap();
        let s = tape.slice_cols(c, 1, 2).unwrap();
        let m = tape.mul(s, s).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        assert_close(&grads.get(v, &tape), &fd[0], 1e-5);
    }

    #[test]
    fn broadcast_and_bias_gradients_match_finite_differences() {
        let x0 = seeded(3, 9).reshape(vec![3, 1]).unwrap();
        let b0 = seeded(4, 10);
        let mut f = |inputs: &[Array]| {
            let mut tape = Tape::inference();
            let x = tape.leaf(inputs[0].clone());
            let b = tape.leaf(inputs[1].clone());
            let w = tape.broadcast_cols(x, 4).unwrap();
            let y = tape.add_bias(w, b).unwrap();
            let z = tape.mul(y, y).unwrap();
            { let s = tape.sum(z); tape.value(s).item() }
        };
        let fd = finite_difference_grad(&mut f, &[x0.clone(), b0.clone()], 1e-6);

        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let b = tape.leaf(b0);
        let w = tape.broadcast_cols(x, 4).unwrap();
        let y = tape.add_bias(w, b).unwrap();
        let z = tape.mul(y, y).unwrap();
        let loss = tape.sum(z);
        let grads = tape.backward(loss).unwrap();
        assert_close(&grads.get(x, &tape), &fd[0], 1e-5);
        assert_close(&grads.get(b, &tape), &fd[1], 1e-5);
    }

    #[test]
    fn non_participating_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(2.0));
        let unused = tape.leaf(Array::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused, &tape).data(), &[0.0, 0.0]);
        assert!((grads.get(x, &tape).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(seeded(10, 11));
            let y = tape.squareplus(x);
            let z = tape.mul(y, y).unwrap();
            { let s = tape.sum(z); tape.value(s).item() }
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn mlp_zero_weights_produce_squareplus_of_zero() {
        // Two affine layers, all-zero weights and biases: hidden is
        // squareplus(0) = 1 everywhere, output is squareplus(0) = 1.
        let mut tape = Tape::new();
        let w0 = tape.leaf(Array::zeros(vec![3, 4]));
        let b0 = tape.leaf(Array::zeros(vec![4]));
        let w1 = tape.leaf(Array::zeros(vec![4, 2]));
        let b1 = tape.leaf(Array::zeros(vec![2]));
        let vars = MlpVars {
            weights: vec![w0, w1],
            biases: vec![b0, b1],
        };
        let input = tape.leaf(seeded(6, 12).reshape(vec![2, 3]).unwrap());
        let out = mlp_forward(&mut tape, &vars, input, FinalActivation::Squareplus).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mlp_identity_linear_layer_passes_input_through() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::eye(3));
        let b = tape.leaf(Array::zeros(vec![3]));
        let vars = MlpVars {
            weights: vec![w],
            biases: vec![b],
        };
        let x0 = seeded(6, 13).reshape(vec![2, 3]).unwrap();
        let input = tape.leaf(x0.clone());
        let out = mlp_forward(&mut tape, &vars, input, FinalActivation::Linear).unwrap();
        assert_eq!(tape.value(out), &x0);
    }

    #[test]
    fn mlp_width_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::zeros(vec![5, 2]));
        let b = tape.leaf(Array::zeros(vec![2]));
        let vars = MlpVars {
            weights: vec![w],
            biases: vec![b],
        };
        let input = tape.leaf(Array::zeros(vec![2, 3]));
        assert!(mlp_forward(&mut tape, &vars, input, FinalActivation::Linear).is_err());
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_for(17, "mlp-test");
        let (weights, biases) = init_mlp(&[3, 4, 2], &mut rng);
        let input = seeded(6, 14).reshape(vec![2, 3]).unwrap();

        let flat: Vec<Array> = weights.iter().chain(&biases).cloned().collect();
        let mut f = |inputs: &[Array]| {
            let mut tape = Tape::inference();
            let vars = MlpVars {
                weights: vec![tape.leaf(inputs[0].clone()), tape.leaf(inputs[1].clone())],
                biases: vec![tape.leaf(inputs[2].clone()), tape.leaf(inputs[3].clone())],
            };
            let x = tape.leaf(input.clone());
            let y = mlp_forward(&mut tape, &vars, x, FinalActivation::Squareplus).unwrap();
            { let s = tape.sum(y); tape.value(s).item() }
        };
        let fd = finite_difference_grad(&mut f, &flat, 1e-6);

        let mut tape = Tape::new();
        let vars = MlpVars {
            weights: vec![tape.leaf(flat[0].clone()), tape.leaf(flat[1].clone())],
            biases: vec![tape.leaf(flat[2].clone()), tape.leaf(flat[3].clone())],
        };
        let x = tape.leaf(input.clone());
        let y = mlp_forward(&mut tape, &vars, x, FinalActivation::Squareplus).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let ids = [
            vars.weights[0],
            vars.weights[1],
            vars.biases[0],
            vars.biases[1],
        ];
        for (id, expected) in ids.iter().zip(&fd) {
            assert_close(&grads.get(*id, &tape), expected, 1e-5);
        }
    }

    #[test]
    fn mlp_param_count_closed_form() {
        assert_eq!(mlp_param_count(&[1, 5, 5, 5]), 5 + 5 + 30 + 30);
        assert_eq!(mlp_param_count(&[3, 5, 5, 5]), 20 + 30 + 30);
    }
}
