//! Loop-based reference evaluations of the SE and attention blocks.

use super::{max_abs_diff, rng, uniform};
use kinedec::model::{se_block, self_attention_block, ParamVars, LN_EPS};
use kinedec::tensor::{Tape, Tensor};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 { x } else { x.exp_m1() }
}

pub fn vars(tape: &mut Tape, named: &[(&str, Tensor)]) -> ParamVars {
    ParamVars {
        vars: named.iter().map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), false))).collect(),
    }
}

/// Direct evaluation of the squeeze, excitation and rescaling equations.
pub fn se_oracle(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let &[b, c, f, t] = x.shape() else { unreachable!() };
    let hid = b1.len();
    let mut out = vec![0.0; x.len()];
    let mut scales = vec![0.0; b * c];
    for bi in 0..b {
        let z: Vec<f64> = (0..c)
            .map(|ci| {
                let mut acc = 0.0;
                for i in 0..f {
                    for j in 0..t {
                        acc += x.at(&[bi, ci, i, j]);
                    }
                }
                acc / (f * t) as f64
            })
            .collect();
        let h: Vec<f64> = (0..hid)
            .map(|k| elu((0..c).map(|ci| z[ci] * w1.at(&[ci, k])).sum::<f64>() + b1.data()[k]))
            .collect();
        for ci in 0..c {
            let s = sigmoid((0..hid).map(|k| h[k] * w2.at(&[k, ci])).sum::<f64>() + b2.data()[ci]);
            scales[bi * c + ci] = s;
            for i in 0..f {
                for j in 0..t {
                    out[((bi * c + ci) * f + i) * t + j] = s * x.at(&[bi, ci, i, j]);
                }
            }
        }
    }
    (out, scales)
}

pub fn attention_params(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<(&'static str, Tensor)> {
    vec![
        ("attn.wq", uniform(r, &[d, d], -0.4, 0.4)),
        ("attn.wk", uniform(r, &[d, d], -0.4, 0.4)),
        ("attn.wv", uniform(r, &[d, d], -0.4, 0.4)),
        ("attn.wo", uniform(r, &[d, d], -0.4, 0.4)),
        ("attn.ln.gain", uniform(r, &[d], 0.5, 1.5)),
        ("attn.ln.bias", uniform(r, &[d], -0.5, 0.5)),
    ]
}

pub fn project(z: &[f64], t: usize, d: usize, w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| z[i * d + k] * w.at(&[k, j])).sum();
        }
    }
    out
}

/// Per-head scaled dot-product attention, head concatenation, output
/// projection, residual and layer norm, evaluated with plain loops.
pub fn attention_oracle(z: &Tensor, params: &[(&str, Tensor)], heads: usize) -> (Vec<f64>, Vec<f64>) {
    let get = |n: &str| &params.iter().find(|(k, _)| *k == n).unwrap().1;
    let &[b, t, d] = z.shape() else { unreachable!() };
    let dk = d / heads;
    let mut out = Vec::with_capacity(z.len());
    let mut weights = Vec::new();
    for bi in 0..b {
        let zb = &z.data()[bi * t * d..(bi + 1) * t * d];
        let (q, k, v) = (project(zb, t, d, get("attn.wq")), project(zb, t, d, get("attn.wk")), project(zb, t, d, get("attn.wv")));
        let mut concat = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dk).map(|e| q[i * d + h * dk + e] * k[j * d + h * dk + e]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                let a: Vec<f64> = exps.iter().map(|e| e / total).collect();
                for e in 0..dk {
                    concat[i * d + h * dk + e] = (0..t).map(|j| a[j] * v[j * d + h * dk + e]).sum();
                }
                weights.extend(a);
            }
        }
        let o = project(&concat, t, d, get("attn.wo"));
        for i in 0..t {
            let row: Vec<f64> = (0..d).map(|j| zb[i * d + j] + o[i * d + j]).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                out.push((row[j] - mean) / (var + LN_EPS).sqrt() * get("attn.ln.gain").data()[j] + get("attn.ln.bias").data()[j]);
            }
        }
    }
    (out, weights)
}

/// Deviation between `se_block` and the oracle on one random case: output
/// and scale errors, plus whether every scale lies strictly in (0, 1).
pub fn se_case(seed: u64) -> (f64, f64, bool) {
    let mut r = rng(seed);
    let (c, hid) = (32, 4);
    let x = uniform(&mut r, &[2, c, 3, 5], -2.0, 2.0);
    let w1 = uniform(&mut r, &[c, hid], -0.5, 0.5);
    let b1 = uniform(&mut r, &[hid], -0.5, 0.5);
    let w2 = uniform(&mut r, &[hid, c], -0.5, 0.5);
    let b2 = uniform(&mut r, &[c], -0.5, 0.5);
    let mut tape = Tape::new();
    let p = vars(
        &mut tape,
        &[("se.w1", w1.clone()), ("se.b1", b1.clone()), ("se.w2", w2.clone()), ("se.b2", b2.clone())],
    );
    let xv = tape.constant(x.clone());
    let se = se_block(&mut tape, &p, xv).unwrap();
    let (want, scales) = se_oracle(&x, &w1, &b1, &w2, &b2);
    let got = tape.value(se.scale).data();
    (
        max_abs_diff(tape.value(se.out).data(), &want),
        max_abs_diff(got, &scales),
        got.iter().all(|&s| s > 0.0 && s < 1.0),
    )
}

/// Output and attention-weight deviations on one random case, plus the
/// largest departure of a weight row sum from 1.
pub fn attention_case(seed: u64) -> (f64, f64, f64) {
    let mut r = rng(100 + seed);
    let (b, t, d, h) = (2, 5, 16, 4);
    let z = uniform(&mut r, &[b, t, d], -1.0, 1.0);
    let params = attention_params(&mut r, d);
    let mut tape = Tape::new();
    let p = vars(&mut tape, &params);
    let zv = tape.constant(z.clone());
    let att = self_attention_block(&mut tape, &p, zv, h).unwrap();
    let (want, weights) = attention_oracle(&z, &params, h);
    let rows = tape
        .value(att.weights)
        .data()
        .chunks(t)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    (
        max_abs_diff(tape.value(att.out).data(), &want),
        max_abs_diff(tape.value(att.weights).data(), &weights),
        rows,
    )
}
