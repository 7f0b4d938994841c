//! CNN–attention decoder: per-channel multi-scale temporal convolution,
//! squeeze-and-excitation over electrodes, token embedding (with optional EMG
//! fusion), one multi-head self-attention block and a two-layer head.
//!
//! The same architecture serves as kinematics regressor (`out_dim = 6`) and as
//! motion-state classifier (`out_dim = 5`).

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer-norm variance floor used throughout the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels_eeg: usize,
    /// 0 for EEG-only models; otherwise EMG channels fused at the embedding.
    pub in_channels_emg: usize,
    pub window_samples: usize,
    pub large_kernel: usize,
    /// Feature maps produced by the large temporal kernel.
    pub large_features: usize,
    pub branch_kernels: Vec<usize>,
    /// Feature maps per branch.
    pub branch_features: usize,
    pub pool_k: usize,
    pub pool_s: usize,
    pub se_reduction: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub out_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels_eeg: 32,
            in_channels_emg: 0,
            window_samples: 250,
            large_kernel: 65,
            large_features: 8,
            branch_kernels: vec![7, 15, 31],
            branch_features: 8,
            pool_k: 4,
            pool_s: 4,
            se_reduction: 8,
            embed_dim: 128,
            heads: 4,
            head_dim: 32,
            out_dim: 6,
            dropout: 0.25,
        }
    }
}

impl ModelConfig {
    /// Concatenated branch features F.
    pub fn features(&self) -> usize {
        self.branch_kernels.len() * self.branch_features
    }

    /// Token count T' after pooling.
    pub fn tokens(&self) -> usize {
        (self.window_samples - self.pool_k) / self.pool_s + 1
    }

    pub fn se_hidden(&self) -> usize {
        self.in_channels_eeg / self.se_reduction
    }

    pub fn fused(&self) -> bool {
        self.in_channels_emg > 0
    }

    /// Width of the embedding projection input.
    pub fn embed_in(&self) -> usize {
        (self.in_channels_eeg + self.in_channels_emg) * self.features()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.in_channels_eeg == 0 {
            return err("in_channels_eeg must be positive".into());
        }
        if self.window_samples < self.large_kernel {
            return err(format!(
                "window of {} samples is shorter than the large kernel {}",
                self.window_samples, self.large_kernel
            ));
        }
        if self.large_kernel % 2 == 0 || self.large_features == 0 {
            return err(format!(
                "large kernel must be odd with at least one feature, got {} × {}",
                self.large_kernel, self.large_features
            ));
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|k| k % 2 == 0) {
            return err(format!("branch kernels must be non-empty and odd, got {:?}", self.branch_kernels));
        }
        if self.branch_features == 0 {
            return err("branch_features must be positive".into());
        }
        if self.pool_k == 0 || self.pool_s == 0 || self.pool_k > self.window_samples {
            return err(format!(
                "pooling ({}, {}) does not fit a window of {}",
                self.pool_k, self.pool_s, self.window_samples
            ));
        }
        if self.se_reduction == 0 || self.in_channels_eeg % self.se_reduction != 0 {
            return err(format!(
                "{} EEG channels are not divisible by SE reduction {}",
                self.in_channels_eeg, self.se_reduction
            ));
        }
        if self.heads == 0 || self.head_dim == 0 || self.embed_dim != self.heads * self.head_dim {
            return err(format!(
                "embed_dim {} must equal heads {} × head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            ));
        }
        if self.embed_dim < 2 {
            return err("embed_dim must be at least 2".into());
        }
        if self.out_dim != 6 && self.out_dim != 5 {
            return err(format!("out_dim must be 6 (regression) or 5 (states), got {}", self.out_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Name and shape of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (f0, fb, d) = (self.large_features, self.branch_features, self.embed_dim);
        let mut out = vec![("conv.large.w".to_string(), vec![f0, 1, self.large_kernel])];
        for (i, &k) in self.branch_kernels.iter().enumerate() {
            out.push((format!("conv.branch{i}.w"), vec![fb, f0, k]));
        }
        let (c, hid) = (self.in_channels_eeg, self.se_hidden());
        out.extend([
            ("se.w1".into(), vec![c, hid]),
            ("se.b1".into(), vec![hid]),
            ("se.w2".into(), vec![hid, c]),
            ("se.b2".into(), vec![c]),
            ("embed.w".into(), vec![self.embed_in(), d]),
            ("embed.b".into(), vec![d]),
            ("embed.pos".into(), vec![self.tokens(), d]),
            ("attn.wq".into(), vec![d, d]),
            ("attn.wk".into(), vec![d, d]),
            ("attn.wv".into(), vec![d, d]),
            ("attn.wo".into(), vec![d, d]),
            ("attn.ln.gain".into(), vec![d]),
            ("attn.ln.bias".into(), vec![d]),
            ("head.ln.gain".into(), vec![d]),
            ("head.ln.bias".into(), vec![d]),
            ("head.fc1.w".into(), vec![d, d / 2]),
            ("head.fc1.b".into(), vec![d / 2]),
            ("head.fc2.w".into(), vec![d / 2, self.out_dim]),
            ("head.fc2.b".into(), vec![self.out_dim]),
        ]);
        out
    }
}

/// Named weight tensors of one model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains and a small
    /// uniform positional table.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".b") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(shape)
            } else if name == "embed.pos" {
                Tensor::from_fn(shape, |_| rng.gen_range(-0.02..0.02))
            } else {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [o, i, k] => (i * k, o * k),
                    [i, o] => (*i, *o),
                    _ => unreachable!("weights are 2-D or 3-D"),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let shapes = config.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in shapes {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("missing parameter {name}"))),
            }
        }
        if self.tensors.values().any(|t| !t.is_finite()) {
            return Err(ModelError::Config("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Parameters registered on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }
}

/// Inverted dropout applied to one node. `None` means evaluation mode.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
    let m = tape.constant(mask);
    Ok(tape.mul(x, m)?)
}

/// Per-channel temporal convolution: `[B, C, T]` → `[B, F, C, T']`.
///
/// Every channel passes through the same large "same"-padded kernel, then the
/// parallel branches, whose outputs are concatenated on the feature axis and
/// average-pooled.
pub fn multi_conv_block(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let &[b, c, t] = tape.shape(x) else {
        return Err(ModelError::Input(format!("expected [B, C, T], got {:?}", tape.shape(x))));
    };
    let rows = tape.reshape(x, &[b * c, 1, t])?;
    let large = tape.conv1d(rows, p.get("conv.large.w")?, 1, cfg.large_kernel / 2)?;
    let large = tape.elu(large, 1.0);
    let mut branches = Vec::with_capacity(cfg.branch_kernels.len());
    for (i, &k) in cfg.branch_kernels.iter().enumerate() {
        branches.push(tape.conv1d(large, p.get(&format!("conv.branch{i}.w"))?, 1, k / 2)?);
    }
    let cat = tape.concat(&branches, 1)?;
    let act = tape.elu(cat, 1.0);
    let pooled = tape.avg_pool1d(act, cfg.pool_k, cfg.pool_s)?;
    let pooled = dropout(tape, pooled, cfg.dropout, rng)?;
    let tp = tape.shape(pooled)[2];
    let split = tape.reshape(pooled, &[b, c, cfg.features(), tp])?;
    Ok(tape.permute(split, &[0, 2, 1, 3])?)
}

pub struct SeOutput {
    /// Rescaled maps, `[B, C, F, T]`.
    pub out: Var,
    /// Per-channel excitation `[B, C]`.
    pub scale: Var,
}

/// Squeeze-and-excitation over the channel axis of `[B, C, F, T]` maps:
/// `z = mean over (F, T)`, `s = σ(W₂ · elu(W₁ · z + b₁) + b₂)`, `out = s ⊙ X`.
pub fn se_block(tape: &mut Tape, p: &ParamVars, x: Var) -> Result<SeOutput> {
    let &[b, c, f, t] = tape.shape(x) else {
        return Err(ModelError::Input(format!("expected [B, C, F, T], got {:?}", tape.shape(x))));
    };
    let flat = tape.reshape(x, &[b, c, f * t])?;
    let z = tape.mean_axis(flat, 2)?;
    let h = tape.dense(z, p.get("se.w1")?, p.get("se.b1")?)?;
    let h = tape.elu(h, 1.0);
    let s = tape.dense(h, p.get("se.w2")?, p.get("se.b2")?)?;
    let scale = tape.sigmoid(s);
    let out = tape.mul_prefix(x, scale)?;
    Ok(SeOutput { out, scale })
}

/// `[B, C, F, T']` maps (plus optional EMG `[B, C', F, T']`) → `[B, T', D]`
/// tokens: per time step the channel × feature slice is flattened, the EMG
/// slice appended, projected to D and offset by a learned positional table.
pub fn embed(tape: &mut Tape, p: &ParamVars, eeg: Var, emg: Option<Var>) -> Result<Var> {
    let tokens_of = |tape: &mut Tape, x: Var| -> Result<Var> {
        let &[b, c, f, t] = tape.shape(x) else {
            return Err(ModelError::Input(format!("expected [B, C, F, T], got {:?}", tape.shape(x))));
        };
        let perm = tape.permute(x, &[0, 3, 1, 2])?;
        Ok(tape.reshape(perm, &[b, t, c * f])?)
    };
    let mut flat = tokens_of(tape, eeg)?;
    if let Some(emg) = emg {
        let (se, sm) = (tape.shape(eeg).to_vec(), tape.shape(emg).to_vec());
        if se[0] != sm[0] || se[3] != sm[3] {
            return Err(ModelError::Input(format!(
                "EEG maps {se:?} and EMG maps {sm:?} differ in batch or temporal length"
            )));
        }
        let e = tokens_of(tape, emg)?;
        flat = tape.concat(&[flat, e], 2)?;
    }
    let z = tape.dense(flat, p.get("embed.w")?, p.get("embed.b")?)?;
    Ok(tape.add(z, p.get("embed.pos")?)?)
}

pub struct AttentionOutput {
    /// `[B, T, D]`
    pub out: Var,
    /// Attention weights `[B, h, T, T]`; rows sum to one.
    pub weights: Var,
}

/// One multi-head self-attention block with residual connection and layer
/// norm: `LN(Z + concat_h(softmax(Q_h K_hᵀ / √d_k) V_h) Wᴼ)`.
pub fn self_attention_block(tape: &mut Tape, p: &ParamVars, z: Var, heads: usize) -> Result<AttentionOutput> {
    let &[b, t, d] = tape.shape(z) else {
        return Err(ModelError::Input(format!("expected [B, T, D], got {:?}", tape.shape(z))));
    };
    if heads == 0 || d % heads != 0 {
        return Err(ModelError::Config(format!("{d} is not divisible into {heads} heads")));
    }
    let dk = d / heads;
    let mut split = |name: &str, axes: &[usize]| -> Result<Var> {
        let proj = tape.matmul(z, p.get(name)?)?;
        let r = tape.reshape(proj, &[b, t, heads, dk])?;
        Ok(tape.permute(r, axes)?)
    };
    let q = split("attn.wq", &[0, 2, 1, 3])?;
    let kt = split("attn.wk", &[0, 2, 3, 1])?;
    let v = split("attn.wv", &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    let o = tape.matmul(ctx, p.get("attn.wo")?)?;
    let res = tape.add(z, o)?;
    let out = tape.layer_norm(res, p.get("attn.ln.gain")?, p.get("attn.ln.bias")?, LN_EPS)?;
    Ok(AttentionOutput { out, weights })
}

pub struct HeadOutput {
    /// `[B, out_dim]` regression values or state logits.
    pub output: Var,
    /// Token average `[B, D]`.
    pub latent: Var,
}

/// Global average over tokens, layer norm, `D → D/2` (ELU, dropout) → out_dim.
pub fn fc_head(
    tape: &mut Tape,
    p: &ParamVars,
    z: Var,
    dropout_p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<HeadOutput> {
    let latent = tape.mean_axis(z, 1)?;
    let n = tape.layer_norm(latent, p.get("head.ln.gain")?, p.get("head.ln.bias")?, LN_EPS)?;
    let h = tape.dense(n, p.get("head.fc1.w")?, p.get("head.fc1.b")?)?;
    let h = tape.elu(h, 1.0);
    let h = dropout(tape, h, dropout_p, rng)?;
    let output = tape.dense(h, p.get("head.fc2.w")?, p.get("head.fc2.b")?)?;
    Ok(HeadOutput { output, latent })
}

/// Intermediate nodes of one forward pass.
pub struct Trace {
    pub conv: Var,
    pub se_scale: Var,
    pub tokens: Var,
    pub attention: Var,
    pub latent: Var,
    pub output: Var,
}

/// Result of inference on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    /// `[B, out_dim]`
    pub output: Tensor,
    /// `[B, D]`
    pub latent: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Decoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    fn check_input(&self, eeg: &Tensor, emg: Option<&Tensor>) -> Result<()> {
        let cfg = &self.config;
        let want = |c: usize| vec![eeg.shape().first().copied().unwrap_or(0), c, cfg.window_samples];
        if eeg.ndim() != 3 || eeg.shape() != want(cfg.in_channels_eeg).as_slice() || eeg.shape()[0] == 0 {
            return Err(ModelError::Input(format!(
                "EEG batch {:?} does not match [B, {}, {}]",
                eeg.shape(),
                cfg.in_channels_eeg,
                cfg.window_samples
            )));
        }
        match (cfg.fused(), emg) {
            (false, None) => Ok(()),
            (true, Some(m)) if m.shape() == want(cfg.in_channels_emg).as_slice() => Ok(()),
            (true, Some(m)) => Err(ModelError::Input(format!(
                "EMG batch {:?} does not match [B, {}, {}]",
                m.shape(),
                cfg.in_channels_emg,
                cfg.window_samples
            ))),
            (true, None) => Err(ModelError::Input("fusion model needs an EMG batch".into())),
            (false, Some(_)) => Err(ModelError::Input("EEG-only model given an EMG batch".into())),
        }
    }

    /// Records a forward pass on `tape`. Passing `rng` enables dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        eeg: &Tensor,
        emg: Option<&Tensor>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Trace> {
        self.check_input(eeg, emg)?;
        let cfg = &self.config;
        let x = tape.constant(eeg.clone());
        let conv = multi_conv_block(tape, p, cfg, x, rng.as_deref_mut())?;
        let maps = tape.permute(conv, &[0, 2, 1, 3])?;
        let se = se_block(tape, p, maps)?;
        // EMG maps share the temporal kernels and skip the electrode SE gate
        let emg_maps = match emg {
            Some(m) => {
                let xm = tape.constant(m.clone());
                let cm = multi_conv_block(tape, p, cfg, xm, rng.as_deref_mut())?;
                Some(tape.permute(cm, &[0, 2, 1, 3])?)
            }
            None => None,
        };
        let tokens = embed(tape, p, se.out, emg_maps)?;
        let att = self_attention_block(tape, p, tokens, cfg.heads)?;
        let head = fc_head(tape, p, att.out, cfg.dropout, rng)?;
        Ok(Trace {
            conv,
            se_scale: se.scale,
            tokens,
            attention: att.weights,
            latent: head.latent,
            output: head.output,
        })
    }

    /// Evaluation-mode inference.
    pub fn predict(&self, eeg: &Tensor, emg: Option<&Tensor>) -> Result<DecoderOutput> {
        let mut tape = Tape::new();
        let p = ParamVars::register(&mut tape, &self.params, false);
        let trace = self.forward(&mut tape, &p, eeg, emg, None)?;
        Ok(DecoderOutput {
            output: tape.value(trace.output).clone(),
            latent: tape.value(trace.latent).clone(),
        })
    }
}
