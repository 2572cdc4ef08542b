//! Finite-difference verification for every differentiable kernel op on
//! random small tensors.

use promptdial::error::Result;
use promptdial::model::{Group, ParamId, ParamStore};
use promptdial::numerics::{grad_check, Rng, Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

/// Reduce an op output to a scalar with a fixed random linear functional
/// so every output coordinate influences the loss.
fn scalarize(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let numel: usize = tape.shape(out).iter().product();
    let flat = tape.reshape(out, vec![1, numel])?;
    let w = tape.input(&[numel, 1], weights);
    let s = tape.matmul(flat, w)?;
    tape.reshape(s, vec![1])
}

/// FD-check `build` over `inputs` (all trainable leaves).
fn check_op<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            t.requires_grad = true;
            store.push(format!("{name}.in{i}"), Group::Mop, false, t)
        })
        .collect();
    let mut wrng = Rng::from_seed(0xC0FFEE ^ name.len() as u64);
    let probe_weights = {
        // Enough weights for any output in these tests.
        let ws: Vec<f64> = (0..4096).map(|_| wrng.normal()).collect();
        ws
    };

    let forward = |store: &mut ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| store.leaf(&mut tape, id)).collect();
        let out = build(&mut tape, &vars)?;
        let numel: usize = tape.shape(out).iter().product();
        let loss = scalarize(&mut tape, out, &probe_weights[..numel])?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic gradients.
    store.clear_grads();
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| store.leaf(&mut tape, id)).collect();
        let out = build(&mut tape, &vars).expect("forward");
        let numel: usize = tape.shape(out).iter().product();
        let loss = scalarize(&mut tape, out, &probe_weights[..numel]).expect("scalarize");
        tape.backward(loss).expect("backward");
        store.write_back_grads(&tape);
    }

    let report = grad_check(&mut store, &ids, forward, H, TOL).expect(name);
    assert!(report.passed(), "{name}: {report}");
}

fn randn(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Random tensor with every entry pushed away from zero (for kinked ops).
fn randn_away_from_zero(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.values_mut() {
        if v.abs() < 0.05 {
            *v = 0.05 * v.signum() + *v;
        }
    }
    t
}

#[test]
fn matmul_gradients() {
    let mut rng = Rng::from_seed(1);
    let a = randn(vec![3, 4], &mut rng);
    let b = randn(vec![4, 5], &mut rng);
    check_op("matmul", &[a, b], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn transpose_gradients() {
    let mut rng = Rng::from_seed(2);
    let a = randn(vec![3, 5], &mut rng);
    check_op("transpose", &[a], |t, v| t.transpose(v[0]));
}

#[test]
fn add_and_add_row_gradients() {
    let mut rng = Rng::from_seed(3);
    let a = randn(vec![4, 3], &mut rng);
    let b = randn(vec![4, 3], &mut rng);
    check_op("add", &[a.clone(), b], |t, v| t.add(v[0], v[1]));
    let bias = randn(vec![3], &mut rng);
    check_op("add_row", &[a, bias], |t, v| t.add_row(v[0], v[1]));
}

#[test]
fn scale_gradients() {
    let mut rng = Rng::from_seed(4);
    let a = randn(vec![2, 6], &mut rng);
    check_op("scale", &[a], |t, v| Ok(t.scale(v[0], -1.7)));
}

#[test]
fn relu_gradients_away_from_kink() {
    let mut rng = Rng::from_seed(5);
    let a = randn_away_from_zero(vec![4, 4], &mut rng);
    check_op("relu", &[a], |t, v| Ok(t.relu(v[0])));
}

#[test]
fn relu_gradient_mask_is_positive_indicator() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[5], &[-2.0, -0.5, 0.0, 0.5, 2.0], true, Some(0));
    let y = tape.relu(x);
    let flat = tape.reshape(y, vec![1, 5]).unwrap();
    let ones = tape.input(&[5, 1], &[1.0; 5]);
    let s = tape.matmul(flat, ones).unwrap();
    let loss = tape.reshape(s, vec![1]).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn gelu_gradients() {
    let mut rng = Rng::from_seed(6);
    let a = randn(vec![3, 5], &mut rng);
    check_op("gelu", &[a], |t, v| Ok(t.gelu(v[0])));
}

#[test]
fn softmax_rows_gradients() {
    let mut rng = Rng::from_seed(7);
    let a = randn(vec![4, 6], &mut rng);
    check_op("softmax_rows", &[a], |t, v| t.softmax_rows(v[0]));
}

#[test]
fn layer_norm_gradients() {
    let mut rng = Rng::from_seed(8);
    let a = randn(vec![4, 6], &mut rng);
    let gamma = randn(vec![6], &mut rng);
    let beta = randn(vec![6], &mut rng);
    check_op("layer_norm", &[a, gamma, beta], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn mean_pool_segments_gradients() {
    let mut rng = Rng::from_seed(9);
    let a = randn(vec![7, 3], &mut rng);
    check_op("mean_pool", &[a], |t, v| t.mean_pool_segments(v[0], 3));
}

#[test]
fn concat_and_slice_gradients() {
    let mut rng = Rng::from_seed(10);
    let a = randn(vec![2, 3], &mut rng);
    let b = randn(vec![4, 3], &mut rng);
    check_op("concat_rows", &[a.clone(), b.clone()], |t, v| {
        t.concat_rows(&[v[0], v[1]])
    });
    check_op("slice_rows", &[b.clone()], |t, v| t.slice_rows(v[0], 1, 2));
    let c = randn(vec![4, 2], &mut rng);
    check_op("concat_cols", &[b.clone(), c], |t, v| {
        t.concat_cols(&[v[0], v[1]])
    });
    check_op("slice_cols", &[b], |t, v| t.slice_cols(v[0], 1, 2));
}

#[test]
fn gather_rows_gradients_with_repeats() {
    let mut rng = Rng::from_seed(11);
    let a = randn(vec![4, 3], &mut rng);
    check_op("gather_rows", &[a], |t, v| {
        t.gather_rows(v[0], &[0, 2, 2, 3, 0])
    });
}

#[test]
fn reshape_gradients() {
    let mut rng = Rng::from_seed(12);
    let a = randn(vec![3, 4], &mut rng);
    check_op("reshape", &[a], |t, v| t.reshape(v[0], vec![2, 6]));
}

#[test]
fn ce_mean_rows_gradients() {
    let mut rng = Rng::from_seed(13);
    let scores = randn(vec![4, 5], &mut rng);
    check_op("ce_mean_rows", &[scores], |t, v| {
        t.ce_mean_rows(v[0], &[0, 3, 2, 4])
    });
}

#[test]
fn attention_block_composite_gradients() {
    // A softmax(QK^T)V block exercises the composition the encoder uses.
    let mut rng = Rng::from_seed(14);
    let q = randn(vec![3, 4], &mut rng);
    let k = randn(vec![3, 4], &mut rng);
    let v = randn(vec![3, 4], &mut rng);
    check_op("attention", &[q, k, v], |t, vars| {
        let kt = t.transpose(vars[1])?;
        let scores = t.matmul(vars[0], kt)?;
        let scaled = t.scale(scores, 0.5);
        let w = t.softmax_rows(scaled)?;
        t.matmul(w, vars[2])
    });
}
