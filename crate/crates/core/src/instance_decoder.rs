//! Dual transformer instance decoder.
//!
//! Learnable object queries are refined by a global stage that attends to the
//! deepest backbone features and a local stage that attends to pooled mask
//! features. Three linear heads then read class logits, mask kernels and
//! IoU-aware objectness off the final queries. Masks are the inner product of
//! each kernel with the mask features at every pixel.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::nn::{to_tokens, Attention, Ctx, FeedForward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Sine position embedding `[d, h, w]`.
///
/// The first `d/2` channels encode the row and the rest the column. Within
/// each half, channels `2i` and `2i+1` hold `sin` and `cos` of
/// `2π·pos/len / 10000^(2i/(d/2))`.
pub fn sine_position_embedding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::arg(format!("position embedding width {d} must be even and positive")));
    }
    let half = d / 2;
    let mut out = Tensor::zeros(&[d, h, w]);
    let data = out.data_mut();
    for c in 0..d {
        let (axis_c, use_x) = if c < half { (c, false) } else { (c - half, true) };
        let freq = 10000f64.powf((2 * (axis_c / 2)) as f64 / half as f64);
        for y in 0..h {
            for x in 0..w {
                let coord = if use_x {
                    x as f64 / w as f64
                } else {
                    y as f64 / h as f64
                } * 2.0
                    * PI;
                let arg = coord / freq;
                data[(c * h + y) * w + x] = if axis_c % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

impl FromStr for PoolKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(PoolKind::Max),
            "avg" => Ok(PoolKind::Avg),
            _ => Err(format!("unknown pool kind `{s}` (expected max|avg)")),
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
        })
    }
}

/// `X_L = pool(X_mask)` with a `k×k` window.
pub fn extract_local_features<'t>(x_mask: Var<'t>, pool: PoolKind, k: usize) -> Result<Var<'t>> {
    match pool {
        PoolKind::Max => x_mask.max_pool2d(k),
        PoolKind::Avg => x_mask.avg_pool2d(k),
    }
}

/// Which feature map a decoder stage attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSource {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    GlobalLocal,
    LocalLocal,
    GlobalOnly,
    LocalOnly,
    GlobalGlobal,
}

impl DecoderMode {
    pub fn stages(self) -> &'static [StageSource] {
        use StageSource::*;
        match self {
            DecoderMode::GlobalLocal => &[Global, Local],
            DecoderMode::LocalLocal => &[Local, Local],
            DecoderMode::GlobalOnly => &[Global],
            DecoderMode::LocalOnly => &[Local],
            DecoderMode::GlobalGlobal => &[Global, Global],
        }
    }
}

impl FromStr for DecoderMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "global-local" => DecoderMode::GlobalLocal,
            "local-local" => DecoderMode::LocalLocal,
            "global" => DecoderMode::GlobalOnly,
            "local" => DecoderMode::LocalOnly,
            "global-global" => DecoderMode::GlobalGlobal,
            _ => {
                return Err(format!(
                    "unknown decoder mode `{s}` (expected global-local|local-local|global|local|global-global)"
                ))
            }
        })
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderMode::GlobalLocal => "global-local",
            DecoderMode::LocalLocal => "local-local",
            DecoderMode::GlobalOnly => "global",
            DecoderMode::LocalOnly => "local",
            DecoderMode::GlobalGlobal => "global-global",
        })
    }
}

/// One decoder block: query self-attention, cross-attention to the
/// flattened features, feed-forward. Pre-norm residual around each.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub source: StageSource,
    pub input_proj: Linear,
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub dim: usize,
}

impl DecoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        source: StageSource,
        feat_channels: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderStage {
            source,
            input_proj: Linear::new(store, &format!("{name}.input_proj"), feat_channels, dim, rng),
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng),
            dim,
        })
    }

    /// Refines queries `[N, D]` against features `[C, h, w]`. Also returns the
    /// cross-attention weights `[heads, N, h·w]`.
    pub fn forward_with_attention<'t>(
        &self,
        cx: &Ctx<'t>,
        q: Var<'t>,
        feats: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let fs = feats.shape();
        if fs.len() != 3 || fs[0] != self.input_proj.d_in {
            return Err(Error::shape(format!(
                "decoder stage expects [{}, h, w] features, got {fs:?}",
                self.input_proj.d_in
            )));
        }
        if q.shape().len() != 2 || q.shape()[1] != self.dim {
            return Err(Error::shape(format!("decoder stage of width {} got queries {:?}", self.dim, q.shape())));
        }
        let tokens = self.input_proj.forward(cx, to_tokens(feats)?)?;
        let pos = cx.constant(sine_position_embedding(fs[1], fs[2], self.dim)?);
        let keys = tokens.add(to_tokens(pos)?)?;

        let h = self.norm_self.forward(cx, q)?;
        let q = q.add(self.self_attn.forward(cx, h, h, h)?)?;
        let h = self.norm_cross.forward(cx, q)?;
        let (attended, weights) = self.cross_attn.forward_with_weights(cx, h, keys, tokens)?;
        let q = q.add(attended)?;
        let h = self.norm_ffn.forward(cx, q)?;
        let q = q.add(self.ffn.forward(cx, h)?)?;
        Ok((q, weights))
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, q: Var<'t>, feats: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_attention(cx, q, feats)?.0)
    }
}

/// Queries after the first stage (passed between frames during temporal
/// training) and after the last.
pub struct DualOutput<'t> {
    pub q_first: Var<'t>,
    pub q_final: Var<'t>,
}

/// The configured stage stack.
#[derive(Debug, Clone)]
pub struct InstanceDecoder {
    pub mode: DecoderMode,
    pub stages: Vec<DecoderStage>,
}

impl InstanceDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        mode: DecoderMode,
        global_channels: usize,
        local_channels: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let stages = mode
            .stages()
            .iter()
            .enumerate()
            .map(|(i, &src)| {
                let (kind, ch) = match src {
                    StageSource::Global => ("global", global_channels),
                    StageSource::Local => ("local", local_channels),
                };
                DecoderStage::new(store, &format!("decoder.{i}_{kind}"), src, ch, dim, heads, ffn_dim, rng)
            })
            .collect::<Result<_>>()?;
        Ok(InstanceDecoder { mode, stages })
    }

    /// Runs stages `from..` starting at queries `q`.
    pub fn run_from<'t>(
        &self,
        cx: &Ctx<'t>,
        from: usize,
        mut q: Var<'t>,
        x_g: Var<'t>,
        x_l: Var<'t>,
    ) -> Result<Var<'t>> {
        for stage in &self.stages[from..] {
            let feats = match stage.source {
                StageSource::Global => x_g,
                StageSource::Local => x_l,
            };
            q = stage.forward(cx, q, feats)?;
        }
        Ok(q)
    }

    /// Runs every stage; `q_first` is the output of the first.
    pub fn dual_decode<'t>(
        &self,
        cx: &Ctx<'t>,
        q0: Var<'t>,
        x_g: Var<'t>,
        x_l: Var<'t>,
    ) -> Result<DualOutput<'t>> {
        let stage = &self.stages[0];
        let feats = match stage.source {
            StageSource::Global => x_g,
            StageSource::Local => x_l,
        };
        let q_first = stage.forward(cx, q0, feats)?;
        let q_final = self.run_from(cx, 1, q_first, x_g, x_l)?;
        Ok(DualOutput { q_first, q_final })
    }
}

/// Per-query outputs of the prediction heads.
pub struct InstancePrediction<'t> {
    pub class_logits: Var<'t>,
    pub kernels: Var<'t>,
    pub objectness: Var<'t>,
}

impl InstancePrediction<'_> {
    /// `sqrt(σ(max class logit) · σ(objectness))` per query.
    pub fn scores(&self) -> Vec<f64> {
        fused_scores(&self.class_logits.value(), &self.objectness.value())
    }

    /// Arg-max class per query.
    pub fn categories(&self) -> Vec<usize> {
        let logits = self.class_logits.value();
        let c = logits.shape()[1];
        logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

pub fn fused_scores(class_logits: &Tensor, objectness: &Tensor) -> Vec<f64> {
    let c = class_logits.shape()[1];
    class_logits
        .data()
        .chunks(c)
        .zip(objectness.data())
        .map(|(row, &o)| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (sigmoid(best) * sigmoid(o)).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PredictionHeads {
    pub norm: LayerNorm,
    pub class: Linear,
    pub kernel: Linear,
    pub objectness: Linear,
}

/// Initial class bias so that every class starts at probability 0.01.
pub const CLASS_PRIOR: f64 = 0.01;

impl PredictionHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        num_classes: usize,
        kernel_dim: usize,
        rng: &mut R,
    ) -> Self {
        let heads = PredictionHeads {
            norm: LayerNorm::new(store, "heads.norm", dim),
            class: Linear::new(store, "heads.class", dim, num_classes, rng),
            // Mask logits start near zero rather than saturated.
            kernel: Linear::with_gain(store, "heads.kernel", dim, kernel_dim, 1.0 / (kernel_dim as f64).sqrt(), rng),
            objectness: Linear::new(store, "heads.objectness", dim, 1, rng),
        };
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        store.get_mut(heads.class.bias).data_mut().fill(prior);
        heads
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, q: Var<'t>) -> Result<InstancePrediction<'t>> {
        let h = self.norm.forward(cx, q)?;
        Ok(InstancePrediction {
            class_logits: self.class.forward(cx, h)?,
            kernels: self.kernel.forward(cx, h)?,
            objectness: self.objectness.forward(cx, h)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.norm.gain,
            self.norm.bias,
            self.class.weight,
            self.class.bias,
            self.kernel.weight,
            self.kernel.bias,
            self.objectness.weight,
            self.objectness.bias,
        ]
    }
}

/// Mask logits `[N, h, w]` from kernels `[N, D_k]` and features `[D_k, h, w]`.
pub fn segment<'t>(kernels: Var<'t>, x_mask: Var<'t>) -> Result<Var<'t>> {
    let (ks, xs) = (kernels.shape(), x_mask.shape());
    if ks.len() != 2 || xs.len() != 3 || ks[1] != xs[0] {
        return Err(Error::shape(format!("segment with kernels {ks:?} and mask features {xs:?}")));
    }
    let flat = x_mask.reshape(&[xs[0], xs[1] * xs[2]])?;
    kernels.matmul(flat)?.reshape(&[ks[0], xs[1], xs[2]])
}
