//! Convolutional feature pyramid with a transformer stage at the coarsest
//! level.

use std::f64::consts::SQRT_2;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::instance_decoder::sine_position_embedding;
use crate::nn::{from_tokens, to_tokens, Attention, Conv, Ctx, FeedForward, LayerNorm};
use crate::params::ParamStore;

/// Every level must divide the input evenly.
pub const INPUT_MULTIPLE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Width of the two stride-2 stem convolutions.
    pub stem: usize,
    /// Channels of X3, X4, X5, X6 (strides 8, 16, 32, 64).
    pub channels: [usize; 4],
    /// Extra stride-1 residual convolutions per level.
    pub depth: usize,
    pub transformer_blocks: usize,
    pub heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem: 16,
            channels: [32, 48, 64, 96],
            depth: 1,
            transformer_blocks: 1,
            heads: 4,
        }
    }
}

pub struct FeaturePyramid<'t> {
    pub x3: Var<'t>,
    pub x4: Var<'t>,
    pub x5: Var<'t>,
    pub x6: Var<'t>,
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl TransformerBlock {
    fn forward<'t>(&self, cx: &Ctx<'t>, tokens: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm1.forward(cx, tokens)?;
        let qk = h.add(pos)?;
        let t = tokens.add(self.attn.forward(cx, qk, qk, h)?)?;
        let h = self.norm2.forward(cx, t)?;
        t.add(self.ffn.forward(cx, h)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    down: Conv,
    refine: Vec<Conv>,
}

impl Level {
    fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut x = self.down.forward(cx, x)?.gelu();
        for conv in &self.refine {
            x = x.add(conv.forward(cx, x)?.gelu())?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: [Conv; 2],
    levels: [Level; 4],
    blocks: Vec<TransformerBlock>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let c = config.channels;
        if config.heads == 0 || !c[3].is_multiple_of(config.heads) || !c[3].is_multiple_of(2) {
            return Err(Error::arg(format!(
                "X6 width {} must be even and divisible by {} heads",
                c[3], config.heads
            )));
        }
        let stem = [
            Conv::with_gain(store, "backbone.stem0", 3, config.stem, 3, 2, SQRT_2, rng),
            Conv::with_gain(store, "backbone.stem1", config.stem, config.stem, 3, 2, SQRT_2, rng),
        ];
        let ins = [config.stem, c[0], c[1], c[2]];
        let levels = std::array::from_fn(|i| Level {
            down: Conv::with_gain(store, &format!("backbone.x{}.down", i + 3), ins[i], c[i], 3, 2, SQRT_2, rng),
            refine: (0..config.depth)
                .map(|j| Conv::with_gain(store, &format!("backbone.x{}.refine{j}", i + 3), c[i], c[i], 3, 1, SQRT_2, rng))
                .collect(),
        });
        let blocks = (0..config.transformer_blocks)
            .map(|b| {
                let name = format!("backbone.x6.block{b}");
                Ok(TransformerBlock {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), c[3]),
                    attn: Attention::new(store, &format!("{name}.attn"), c[3], config.heads, rng)?,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), c[3]),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), c[3], 2 * c[3], rng),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Backbone { config: config.clone(), stem, levels, blocks })
    }

    /// Image `[3, H, W]` to the four-level pyramid.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, image: Var<'t>) -> Result<FeaturePyramid<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("backbone expects a [3, H, W] image, got {s:?}")));
        }
        if s[1] == 0 || s[2] == 0 || !s[1].is_multiple_of(INPUT_MULTIPLE) || !s[2].is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::shape(format!(
                "image size {}x{} is not a positive multiple of {INPUT_MULTIPLE}",
                s[1], s[2]
            )));
        }
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(cx, x)?.gelu();
        }
        let x3 = self.levels[0].forward(cx, x)?;
        let x4 = self.levels[1].forward(cx, x3)?;
        let x5 = self.levels[2].forward(cx, x4)?;
        let mut x6 = self.levels[3].forward(cx, x5)?;
        if !self.blocks.is_empty() {
            let (h, w) = (x6.shape()[1], x6.shape()[2]);
            let pos = to_tokens(cx.constant(sine_position_embedding(h, w, self.config.channels[3])?))?;
            let mut tokens = to_tokens(x6)?;
            for block in &self.blocks {
                tokens = block.forward(cx, tokens, pos)?;
            }
            x6 = from_tokens(tokens, h, w)?;
        }
        Ok(FeaturePyramid { x3, x4, x5, x6 })
    }
}

/// Convenience wrapper over [`Backbone::forward`].
pub fn backbone_forward<'t>(cx: &Ctx<'t>, backbone: &Backbone, image: Var<'t>) -> Result<FeaturePyramid<'t>> {
    backbone.forward(cx, image)
}
