//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance run. Each group returns `(case, max relative error)` pairs.

use super::{away_from_zero, rng, uniform};
use kinedec::model::{Decoder, ModelConfig, ParamVars};
use kinedec::tensor::{check_gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Errors = Vec<(&'static str, f64)>;

/// Reduces `out` to a scalar through a fixed random weighting so that every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> kinedec::tensor::Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(&mut r, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn dims(r: &mut ChaCha8Rng, n: usize, max_total: usize) -> Vec<usize> {
    loop {
        let d: Vec<usize> = (0..n).map(|_| r.gen_range(1..5)).collect();
        if d.iter().product::<usize>() <= max_total {
            return d;
        }
    }
}

fn check<F>(errors: &mut Errors, name: &'static str, inputs: Vec<Tensor>, seed: u64, op: F)
where
    F: Fn(&mut Tape, &[Var]) -> kinedec::tensor::Result<Var>,
{
    let report = check_gradients(&inputs, H, |tape, v| {
        let out = op(tape, v)?;
        if tape.shape(out).iter().product::<usize>() == 1 && tape.shape(out).len() <= 1 {
            Ok(out)
        } else {
            weighted_sum(tape, out, seed)
        }
    })
    .unwrap();
    assert!(report.checked > 0, "{name}: nothing checked");
    errors.push((name, report.max_rel_error));
}

pub fn elementwise_binary_ops(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed);
    let shape = dims(&mut r, 3, 64);
    let suffix = shape[1..].to_vec();
    let a = uniform(&mut r, &shape, -2.0, 2.0);
    let b = uniform(&mut r, &shape, -2.0, 2.0);
    let s = uniform(&mut r, &suffix, -2.0, 2.0);
    let p = uniform(&mut r, &shape[..1], -2.0, 2.0);
    check(&mut e, "add", vec![a.clone(), b.clone()], seed, |t, v| t.add(v[0], v[1]));
    check(&mut e, "add broadcast", vec![a.clone(), s.clone()], seed, |t, v| t.add(v[0], v[1]));
    check(&mut e, "sub", vec![a.clone(), b.clone()], seed, |t, v| t.sub(v[0], v[1]));
    check(&mut e, "sub broadcast", vec![a.clone(), s], seed, |t, v| t.sub(v[0], v[1]));
    check(&mut e, "mul", vec![a.clone(), b], seed, |t, v| t.mul(v[0], v[1]));
    check(&mut e, "mul_prefix", vec![a, p], seed, |t, v| t.mul_prefix(v[0], v[1]));
    e
}

pub fn elementwise_unary_ops(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed + 100);
    let shape = dims(&mut r, 2, 64);
    let a = uniform(&mut r, &shape, -3.0, 3.0);
    let kinked = away_from_zero(&mut r, &shape);
    check(&mut e, "scale", vec![a.clone()], seed, |t, v| Ok(t.scale(v[0], -1.7)));
    check(&mut e, "square", vec![a.clone()], seed, |t, v| Ok(t.square(v[0])));
    check(&mut e, "sigmoid", vec![a.clone()], seed, |t, v| Ok(t.sigmoid(v[0])));
    check(&mut e, "elu", vec![a], seed, |t, v| Ok(t.elu(v[0], 1.0)));
    check(&mut e, "relu", vec![kinked], seed, |t, v| Ok(t.relu(v[0])));
    e
}

pub fn reductions(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed + 200);
    let shape = dims(&mut r, 3, 64);
    let a = uniform(&mut r, &shape, -2.0, 2.0);
    check(&mut e, "sum", vec![a.clone()], seed, |t, v| {
        let s = t.sum(v[0]);
        Ok(t.square(s))
    });
    check(&mut e, "mean", vec![a.clone()], seed, |t, v| {
        let s = t.mean(v[0]);
        Ok(t.square(s))
    });
    for axis in 0..3 {
        check(&mut e, "mean_axis", vec![a.clone()], seed, move |t, v| t.mean_axis(v[0], axis));
    }
    e
}

pub fn matmul_and_dense(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed + 300);
    let (b, m, k, n) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
    let a = uniform(&mut r, &[b, m, k], -1.0, 1.0);
    let batched = uniform(&mut r, &[b, k, n], -1.0, 1.0);
    let shared = uniform(&mut r, &[k, n], -1.0, 1.0);
    let bias = uniform(&mut r, &[n], -1.0, 1.0);
    check(&mut e, "matmul batched", vec![a.clone(), batched], seed, |t, v| t.matmul(v[0], v[1]));
    check(&mut e, "matmul shared", vec![a.clone(), shared.clone()], seed, |t, v| t.matmul(v[0], v[1]));
    check(&mut e, "dense", vec![a, shared, bias], seed, |t, v| t.dense(v[0], v[1], v[2]));
    e
}

pub fn shape_ops(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed + 400);
    let shape = dims(&mut r, 3, 64);
    let a = uniform(&mut r, &shape, -1.0, 1.0);
    let mut other = shape.clone();
    other[1] = r.gen_range(1..4);
    let b = uniform(&mut r, &other, -1.0, 1.0);
    check(&mut e, "permute", vec![a.clone()], seed, |t, v| t.permute(v[0], &[2, 0, 1]));
    check(&mut e, "transpose", vec![a.clone()], seed, |t, v| t.transpose(v[0]));
    let flat = [shape.iter().product::<usize>()];
    check(&mut e, "reshape", vec![a.clone()], seed, move |t, v| t.reshape(v[0], &flat));
    check(&mut e, "concat", vec![a, b], seed, |t, v| t.concat(&[v[0], v[1]], 1));
    e
}

pub fn normalizations(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed + 500);
    let shape = dims(&mut r, 3, 64);
    let d = shape[2].max(2);
    let shape = [shape[0], shape[1], d];
    let a = uniform(&mut r, &shape, -2.0, 2.0);
    let gain = uniform(&mut r, &[d], 0.5, 1.5);
    let bias = uniform(&mut r, &[d], -0.5, 0.5);
    for axis in 0..3 {
        check(&mut e, "softmax", vec![a.clone()], seed, move |t, v| t.softmax(v[0], axis));
    }
    check(&mut e, "layer_norm", vec![a, gain, bias], seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    e
}

pub fn convolution_and_pooling(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed + 600);
    let (b, cin, cout) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
    let t = r.gen_range(5..9);
    let k = r.gen_range(1..4);
    let stride = r.gen_range(1..3);
    let padding = r.gen_range(0..2);
    let x = uniform(&mut r, &[b, cin, t], -1.0, 1.0);
    let w = uniform(&mut r, &[cout, cin, k], -1.0, 1.0);
    check(&mut e, "conv1d", vec![x.clone(), w], seed, move |tp, v| tp.conv1d(v[0], v[1], stride, padding));
    let pk = r.gen_range(1..4);
    let ps = r.gen_range(1..3);
    check(&mut e, "avg_pool1d", vec![x], seed, move |tp, v| tp.avg_pool1d(v[0], pk, ps));
    e
}

pub fn softmax_cross_entropy(seed: u64) -> Errors {
    let mut e = Errors::new();
    let mut r = rng(seed + 700);
    let (b, k) = (r.gen_range(1..5), r.gen_range(2..6));
    let logits = uniform(&mut r, &[b, k], -2.0, 2.0);
    let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
    check(&mut e, "softmax_cross_entropy", vec![logits], seed, move |t, v| t.softmax_cross_entropy(v[0], &labels));
    e
}

pub fn tiny_config(emg: usize, out_dim: usize) -> ModelConfig {
    ModelConfig {
        in_channels_eeg: 4,
        in_channels_emg: emg,
        window_samples: 32,
        large_kernel: 9,
        large_features: 2,
        branch_kernels: vec![3, 5],
        branch_features: 2,
        pool_k: 4,
        pool_s: 4,
        se_reduction: 2,
        embed_dim: 16,
        heads: 2,
        head_dim: 8,
        out_dim,
        dropout: 0.0,
    }
}

/// Every model parameter, through the full forward pass and an MSE loss.
/// Returns the maximum relative error and the number of checked elements.
pub fn full_model(emg_channels: usize) -> (f64, usize, usize) {
    let cfg = tiny_config(emg_channels, 6);
    let model = Decoder::new(cfg, 3).unwrap();
    let mut r = rng(11);
    let eeg = uniform(&mut r, &[2, 4, 32], -1.0, 1.0);
    let emg = (emg_channels > 0).then(|| uniform(&mut r, &[2, emg_channels, 32], -1.0, 1.0));
    let target = uniform(&mut r, &[2, 6], 0.0, 1.0);
    let names: Vec<String> = model.params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = model.params.tensors.values().cloned().collect();
    let report = check_gradients(&inputs, H, |tape, vars| {
        let p = ParamVars {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        };
        let trace = model
            .forward(tape, &p, &eeg, emg.as_ref(), None)
            .map_err(|e| kinedec::tensor::TensorError::InvalidArgument {
                op: "forward",
                reason: e.to_string(),
            })?;
        let y = tape.constant(target.clone());
        let d = tape.sub(trace.output, y)?;
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    })
    .unwrap();
    (report.max_rel_error, report.checked, model.params.count())
}

pub const GROUPS: [(&str, fn(u64) -> Errors); 8] = [
    ("elementwise_binary_ops", elementwise_binary_ops),
    ("elementwise_unary_ops", elementwise_unary_ops),
    ("reductions", reductions),
    ("matmul_and_dense", matmul_and_dense),
    ("shape_ops", shape_ops),
    ("normalizations", normalizations),
    ("convolution_and_pooling", convolution_and_pooling),
    ("softmax_cross_entropy", softmax_cross_entropy),
];
