use super::{strides, validate_shape, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `b` broadcasts over the leading axes of `a`.
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `s` broadcasts over the trailing axes of `x`.
    MulPrefix { x: Var, s: Var },
    Scale { a: Var, c: f64 },
    Square { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    MeanAxis { a: Var, axis: usize },
    MatMul { a: Var, b: Var },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { a: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Elu { a: Var, alpha: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    AvgPool1d { x: Var, k: usize, s: usize },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a differentiable computation for one forward/backward pass.
///
/// A tape is single use: once [`Tape::backward`] has run, a second call is an
/// error. Record a fresh forward pass on a new tape instead.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into `v` by the last backward pass.
    ///
    /// Nodes that take part in the loss but received no signal report zeros;
    /// nodes that do not require gradients report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.len()]);
        Some(Tensor {
            shape: node.value.shape.clone(),
            data,
        })
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ----------------------------------------------------------------- ops

    /// Elementwise sum; `b` may have the shape of a suffix of `a`'s shape and
    /// is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            check_suffix("add", va.shape(), vb.shape())?;
            let n = vb.len();
            let data = va
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vb.data[i % n])
                .collect();
            Tensor {
                shape: va.shape.clone(),
                data,
            }
        };
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise difference with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            check_suffix("sub", va.shape(), vb.shape())?;
            let n = vb.len();
            let data = va
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| x - vb.data[i % n])
                .collect();
            Tensor {
                shape: va.shape.clone(),
                data,
            }
        };
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            if va.shape != vb.shape {
                return Err(mismatch("mul", va, vb));
            }
            Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
            }
        };
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Multiplies `x` by `s`, where `s`'s shape is a prefix of `x`'s shape and
    /// is broadcast over the remaining trailing axes.
    pub fn mul_prefix(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let (vx, vs) = (self.value(x), self.value(s));
            if vs.ndim() > vx.ndim() || vx.shape[..vs.ndim()] != vs.shape[..] {
                return Err(mismatch("mul_prefix", vx, vs));
            }
            let inner = vx.len() / vs.len();
            let data = vx
                .data
                .iter()
                .enumerate()
                .map(|(i, &v)| v * vs.data[i / inner])
                .collect();
            Tensor {
                shape: vx.shape.clone(),
                data,
            }
        };
        Ok(self.push(out, Op::MulPrefix { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll { a }, &[a])
    }

    /// Mean over one axis, which is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if axis >= v.ndim() {
                return Err(bad_axis("mean_axis", axis, v));
            }
            let (outer, len, inner) = split_axis(&v.shape, axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for (d, x) in dst.iter_mut().zip(&v.data[base..base + inner]) {
                        *d += x;
                    }
                }
            }
            let inv = 1.0 / len as f64;
            data.iter_mut().for_each(|d| *d *= inv);
            let mut shape = v.shape.clone();
            shape.remove(axis);
            Tensor { shape, data }
        };
        Ok(self.push(out, Op::MeanAxis { a, axis }, &[a]))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[.., M, K]`; `b` is either a shared `[K, N]` matrix or has the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let g = MatMulGeom::new(va.shape(), vb.shape())?;
            let mut data = vec![0.0; g.batch * g.m * g.n];
            for bi in 0..g.batch {
                let ab = &va.data[bi * g.m * g.k..(bi + 1) * g.m * g.k];
                let bb = if g.shared {
                    &vb.data[..]
                } else {
                    &vb.data[bi * g.k * g.n..(bi + 1) * g.k * g.n]
                };
                let cb = &mut data[bi * g.m * g.n..(bi + 1) * g.m * g.n];
                gemm_nn(ab, bb, cb, g.m, g.k, g.n);
            }
            let mut shape = va.shape[..va.ndim() - 1].to_vec();
            shape.push(g.n);
            Tensor { shape, data }
        };
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            let mut seen = vec![false; v.ndim()];
            if axes.len() != v.ndim()
                || axes
                    .iter()
                    .any(|&ax| ax >= v.ndim() || std::mem::replace(&mut seen[ax], true))
            {
                return Err(TensorError::InvalidArgument {
                    op: "permute",
                    reason: format!("{axes:?} is not a permutation of {} axes", v.ndim()),
                });
            }
            permute_data(v, axes)
        };
        Ok(self.push(
            out,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: "needs at least two axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let v = self.value(a);
            validate_shape(shape)?;
            if shape.iter().product::<usize>() != v.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: v.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor {
                shape: shape.to_vec(),
                data: v.data.clone(),
            }
        };
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let first = parts
                .first()
                .map(|&p| self.value(p))
                .ok_or_else(|| TensorError::InvalidArgument {
                    op: "concat",
                    reason: "nothing to concatenate".into(),
                })?;
            if axis >= first.ndim() {
                return Err(bad_axis("concat", axis, first));
            }
            let mut total = 0;
            for &p in parts {
                let v = self.value(p);
                let same_rest = v.ndim() == first.ndim()
                    && (0..v.ndim()).all(|i| i == axis || v.shape[i] == first.shape[i]);
                if !same_rest {
                    return Err(mismatch("concat", first, v));
                }
                total += v.shape[axis];
            }
            let (outer, _, inner) = split_axis(&first.shape, axis);
            let mut shape = first.shape.clone();
            shape[axis] = total;
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &p in parts {
                    let v = self.value(p);
                    let chunk = v.shape[axis] * inner;
                    data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor { shape, data }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let v = self.value(a);
            if axis >= v.ndim() {
                return Err(bad_axis("softmax", axis, v));
            }
            let (outer, len, inner) = split_axis(&v.shape, axis);
            let mut data = vec![0.0; v.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len)
                        .map(|l| v.data[idx(l)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (v.data[idx(l)] - max).exp();
                        data[idx(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        data[idx(l)] /= z;
                    }
                }
            }
            Tensor {
                shape: v.shape.clone(),
                data,
            }
        };
        Ok(self.push(out, Op::Softmax { a, axis }, &[a]))
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) = {
            let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
            let d = *vx.shape.last().ok_or_else(|| TensorError::InvalidArgument {
                op: "layer_norm",
                reason: "input must have at least one axis".into(),
            })?;
            if vg.shape != [d] || vb.shape != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vx.shape.clone(),
                    rhs: vg.shape.clone(),
                });
            }
            let rows = vx.len() / d;
            let mut xhat = vec![0.0; vx.len()];
            let mut rstd = vec![0.0; rows];
            let mut data = vec![0.0; vx.len()];
            for r in 0..rows {
                let row = &vx.data[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    data[r * d + j] = h * vg.data[j] + vb.data[j];
                }
            }
            (
                Tensor {
                    shape: vx.shape.clone(),
                    data,
                },
                xhat,
                rstd,
            )
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let out = self
            .value(a)
            .map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() });
        self.push(out, Op::Elu { a, alpha }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid { a }, &[a])
    }

    /// Affine map over the last axis: `x · w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        {
            let (vw, vb) = (self.value(w), self.value(b));
            if vw.ndim() != 2 || vb.shape != [vw.shape[1]] {
                return Err(mismatch("dense", vw, vb));
            }
        }
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// 1-D cross-correlation: `y[b,o,t] = Σ_c Σ_k w[o,c,k] · x[b,c,t·stride + k − padding]`
    /// with zeros outside the input.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = {
            let (vx, vw) = (self.value(x), self.value(w));
            let g = ConvGeom::new(vx.shape(), vw.shape(), stride, padding)?;
            let mut data = vec![0.0; g.batch * g.cout * g.tout];
            for b in 0..g.batch {
                for o in 0..g.cout {
                    let dst = &mut data[(b * g.cout + o) * g.tout..(b * g.cout + o + 1) * g.tout];
                    for c in 0..g.cin {
                        let src = &vx.data[(b * g.cin + c) * g.tin..(b * g.cin + c + 1) * g.tin];
                        for k in 0..g.k {
                            let wv = vw.data[(o * g.cin + c) * g.k + k];
                            let (t0, t1) = g.valid_range(k);
                            if stride == 1 {
                                let off = k as isize - padding as isize;
                                let s = &src[(t0 as isize + off) as usize..(t1 as isize + off) as usize];
                                for (d, &xv) in dst[t0..t1].iter_mut().zip(s) {
                                    *d += wv * xv;
                                }
                            } else {
                                for t in t0..t1 {
                                    dst[t] += wv * src[t * stride + k - padding];
                                }
                            }
                        }
                    }
                }
            }
            Tensor {
                shape: vec![g.batch, g.cout, g.tout],
                data,
            }
        };
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            },
            &[x, w],
        ))
    }

    /// Average pooling over the last axis: `y_i = (1/k) Σ_j x_{i·s+j}`.
    pub fn avg_pool1d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let out = {
            let v = self.value(x);
            let t = *v.shape.last().ok_or_else(|| TensorError::InvalidArgument {
                op: "avg_pool1d",
                reason: "input must have at least one axis".into(),
            })?;
            if k == 0 || s == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "avg_pool1d",
                    reason: "kernel and stride must be positive".into(),
                });
            }
            if k > t {
                return Err(TensorError::KernelTooLarge {
                    op: "avg_pool1d",
                    kernel: k,
                    len: t,
                });
            }
            let tout = (t - k) / s + 1;
            let rows = v.len() / t;
            let inv = 1.0 / k as f64;
            let mut data = Vec::with_capacity(rows * tout);
            for r in 0..rows {
                let row = &v.data[r * t..(r + 1) * t];
                for i in 0..tout {
                    data.push(row[i * s..i * s + k].iter().sum::<f64>() * inv);
                }
            }
            let mut shape = v.shape.clone();
            *shape.last_mut().unwrap() = tout;
            Tensor { shape, data }
        };
        Ok(self.push(out, Op::AvgPool1d { x, k, s }, &[x]))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let v = self.value(logits);
            if v.ndim() != 2 || v.shape[0] != labels.len() {
                return Err(TensorError::InvalidArgument {
                    op: "softmax_cross_entropy",
                    reason: format!(
                        "logits {:?} do not match {} labels",
                        v.shape,
                        labels.len()
                    ),
                });
            }
            let (b, k) = (v.shape[0], v.shape[1]);
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(TensorError::InvalidArgument {
                    op: "softmax_cross_entropy",
                    reason: format!("label {bad} out of range for {k} classes"),
                });
            }
            let mut probs = vec![0.0; b * k];
            let mut loss = 0.0;
            for r in 0..b {
                let row = &v.data[r * k..(r + 1) * k];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for j in 0..k {
                    probs[r * k + j] = (row[j] - lse).exp();
                }
                loss += lse - row[labels[r]];
            }
            (loss / b as f64, probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ------------------------------------------------------------ backward

    /// Populates gradients of the scalar `loss` with respect to every node that
    /// requires them. Gradients accumulate additively at fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let v = &self.nodes[loss.0].value;
        if v.len() != 1 {
            return Err(TensorError::NotScalar(v.shape.clone()));
        }
        self.spent = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
            for (target, delta) in contributions {
                self.accumulate(target, delta);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            None => node.grad = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its inputs, given its output gradient.
    fn propagate(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % n] += sign * gv;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    res.push((*a, g.iter().zip(&vb.data).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    res.push((*b, g.iter().zip(&va.data).map(|(g, x)| g * x).collect()));
                }
            }
            Op::MulPrefix { x, s } => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let inner = vx.len() / vs.len();
                if self.wants(*x) {
                    res.push((
                        *x,
                        g.iter()
                            .enumerate()
                            .map(|(j, gv)| gv * vs.data[j / inner])
                            .collect(),
                    ));
                }
                if self.wants(*s) {
                    let mut gs = vec![0.0; vs.len()];
                    for (j, (gv, xv)) in g.iter().zip(&vx.data).enumerate() {
                        gs[j / inner] += gv * xv;
                    }
                    res.push((*s, gs));
                }
            }
            Op::Scale { a, c } => res.push((*a, g.iter().map(|v| v * c).collect())),
            Op::Square { a } => {
                let va = self.value(*a);
                res.push((*a, g.iter().zip(&va.data).map(|(g, x)| 2.0 * g * x).collect()));
            }
            Op::SumAll { a } => res.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::MeanAll { a } => {
                let n = self.value(*a).len();
                res.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::MeanAxis { a, axis } => {
                let va = self.value(*a);
                let (outer, len, inner) = split_axis(&va.shape, *axis);
                let inv = 1.0 / len as f64;
                let mut ga = vec![0.0; va.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for j in 0..inner {
                            ga[base + j] = g[o * inner + j] * inv;
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let geom = MatMulGeom::new(va.shape(), vb.shape()).expect("validated in forward");
                let (m, k, n) = (geom.m, geom.k, geom.n);
                if self.wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for bi in 0..geom.batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = if geom.shared {
                            &vb.data[..]
                        } else {
                            &vb.data[bi * k * n..(bi + 1) * k * n]
                        };
                        gemm_nt(gb, bb, &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                    }
                    res.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gbm = vec![0.0; vb.len()];
                    for bi in 0..geom.batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &va.data[bi * m * k..(bi + 1) * m * k];
                        let dst = if geom.shared {
                            &mut gbm[..]
                        } else {
                            &mut gbm[bi * k * n..(bi + 1) * k * n]
                        };
                        gemm_tn(ab, gb, dst, m, k, n);
                    }
                    res.push((*b, gbm));
                }
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor {
                    shape: out.shape.clone(),
                    data: g.to_vec(),
                };
                res.push((*a, permute_data(&gt, &inverse).data));
            }
            Op::Reshape { a } => res.push((*a, g.to_vec())),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape[*axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        res.push((p, gp));
                    }
                    offset += len;
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(&out.shape, *axis);
                let y = &out.data;
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            ga[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gain);
                let d = vg.len();
                let rows = xhat.len() / d;
                if self.wants(*gain) {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    res.push((*gain, gg));
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    res.push((*bias, gb));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    let nd = d as f64;
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = g[row.clone()]
                            .iter()
                            .zip(&vg.data)
                            .map(|(g, w)| g * w)
                            .collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] =
                                rstd[r] / nd * (nd * dxhat[j] - sum_d - xhat[r * d + j] * sum_dx);
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::Elu { a, alpha } => {
                let va = self.value(*a);
                res.push((
                    *a,
                    g.iter()
                        .zip(&va.data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * alpha * x.exp() })
                        .collect(),
                ));
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                res.push((
                    *a,
                    g.iter()
                        .zip(&va.data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sigmoid { a } => {
                res.push((
                    *a,
                    g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect(),
                ));
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
            } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let geo = ConvGeom::new(vx.shape(), vw.shape(), *stride, *padding)
                    .expect("validated in forward");
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = if want_x { vec![0.0; vx.len()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; vw.len()] } else { Vec::new() };
                for b in 0..geo.batch {
                    for o in 0..geo.cout {
                        let go = &g[(b * geo.cout + o) * geo.tout..(b * geo.cout + o + 1) * geo.tout];
                        for c in 0..geo.cin {
                            let xoff = (b * geo.cin + c) * geo.tin;
                            for k in 0..geo.k {
                                let widx = (o * geo.cin + c) * geo.k + k;
                                let (t0, t1) = geo.valid_range(k);
                                if want_w {
                                    let mut acc = 0.0;
                                    for t in t0..t1 {
                                        acc += go[t] * vx.data[xoff + t * stride + k - padding];
                                    }
                                    gw[widx] += acc;
                                }
                                if want_x {
                                    let wv = vw.data[widx];
                                    for t in t0..t1 {
                                        gx[xoff + t * stride + k - padding] += wv * go[t];
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    res.push((*x, gx));
                }
                if want_w {
                    res.push((*w, gw));
                }
            }
            Op::AvgPool1d { x, k, s } => {
                let vx = self.value(*x);
                let t = *vx.shape.last().unwrap();
                let tout = *out.shape.last().unwrap();
                let rows = vx.len() / t;
                let inv = 1.0 / *k as f64;
                let mut gx = vec![0.0; vx.len()];
                for r in 0..rows {
                    for i in 0..tout {
                        let gv = g[r * tout + i] * inv;
                        for j in 0..*k {
                            gx[r * t + i * s + j] += gv;
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] -= scale;
                }
                res.push((*logits, gl));
            }
        }
        res
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn bad_axis(op: &'static str, axis: usize, v: &Tensor) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: format!("axis {axis} out of range for shape {:?}", v.shape),
    }
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// (product of axes before, axis length, product of axes after)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(v: &Tensor, axes: &[usize]) -> Tensor {
    let in_strides = strides(&v.shape);
    let shape: Vec<usize> = axes.iter().map(|&a| v.shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = shape.len();
    let mut data = Vec::with_capacity(v.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..v.len() {
        data.push(v.data[src]);
        // odometer increment over the output index
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            src -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    Tensor { shape, data }
}

struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared: bool,
}

impl MatMulGeom {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let shared = b.len() == 2;
        if !shared && a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(err());
        }
        Ok(Self {
            batch: a[..a.len() - 2].iter().product(),
            m,
            k,
            n,
            shared,
        })
    }
}

/// c[m,n] += a[m,k] · b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += g[m,n] · b[k,n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, gv) in c[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    tin: usize,
    tout: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 3 || x[1] != w[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                reason: "stride must be at least 1".into(),
            });
        }
        let (tin, k) = (x[2], w[2]);
        if k > tin + 2 * padding {
            return Err(TensorError::KernelTooLarge {
                op: "conv1d",
                kernel: k,
                len: tin + 2 * padding,
            });
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            tin,
            tout: (tin + 2 * padding - k) / stride + 1,
            k,
            stride,
            padding,
        })
    }

    /// Output positions `t` for which tap `k` reads inside the unpadded input.
    fn valid_range(&self, k: usize) -> (usize, usize) {
        // need 0 <= t*stride + k - padding < tin
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride)
        };
        let hi = if self.tin + self.padding > k {
            ((self.tin + self.padding - k - 1) / self.stride + 1).min(self.tout)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}
