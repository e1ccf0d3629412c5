//! Mask feature decoder.
//!
//! Lateral projections of X3..X5 are optionally modulated by the global X6
//! features, then fused top-down and bottom-up into a single stride-8 map.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Var;
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Top-down then bottom-up aggregation with a multi-scale output sum.
    Iterative,
    /// Plain top-down sum with a single output convolution.
    Fpn,
}

impl FromStr for FusionKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iterative" => Ok(FusionKind::Iterative),
            "fpn" => Ok(FusionKind::Fpn),
            _ => Err(format!("unknown fusion kind `{s}` (expected iterative|fpn)")),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Iterative => "iterative",
            FusionKind::Fpn => "fpn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskDecoderConfig {
    pub width: usize,
    pub fusion: FusionKind,
    pub enhancer: bool,
}

impl Default for MaskDecoderConfig {
    fn default() -> Self {
        MaskDecoderConfig { width: 128, fusion: FusionKind::Iterative, enhancer: true }
    }
}

/// `x ⊙ σ(proj_g(up(x6))) + proj_a(up(x6))` with 1×1 projections.
#[derive(Debug, Clone)]
pub struct SemanticEnhancer {
    pub gate: Conv,
    pub shift: Conv,
}

impl SemanticEnhancer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c6: usize, width: usize, rng: &mut R) -> Self {
        SemanticEnhancer {
            gate: Conv::new(store, &format!("{name}.gate"), c6, width, 1, 1, rng),
            shift: Conv::new(store, &format!("{name}.shift"), c6, width, 1, 1, rng),
        }
    }

    /// The projections run at X6 resolution and are upsampled afterwards;
    /// a 1×1 map commutes with bilinear interpolation.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, x6: Var<'t>) -> Result<Var<'t>> {
        let factor = upsample_factor(&x6.shape(), &x.shape())?;
        let gate = self.gate.forward(cx, x6)?.upsample(factor)?.sigmoid();
        let shift = self.shift.forward(cx, x6)?.upsample(factor)?;
        x.mul(gate)?.add(shift)
    }
}

/// Functional form of [`SemanticEnhancer::forward`].
pub fn semantic_enhance<'t>(cx: &Ctx<'t>, enhancer: &SemanticEnhancer, x: Var<'t>, x6: Var<'t>) -> Result<Var<'t>> {
    enhancer.forward(cx, x, x6)
}

fn upsample_factor(from: &[usize], to: &[usize]) -> Result<usize> {
    let ok = from.len() == 3 && to.len() == 3 && from[1] > 0 && from[2] > 0;
    if ok && to[1].is_multiple_of(from[1]) && to[2].is_multiple_of(from[2]) && to[1] / from[1] == to[2] / from[2] {
        Ok(to[1] / from[1])
    } else {
        Err(Error::shape(format!("cannot upsample {from:?} onto {to:?} by an integer factor")))
    }
}

#[derive(Debug, Clone)]
struct IterativeFusion {
    td4: Conv,
    td3: Conv,
    down3: Conv,
    down4: Conv,
    bu4: Conv,
    bu5: Conv,
    out: Conv,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub config: MaskDecoderConfig,
    lateral: [Conv; 3],
    enhancers: Option<[SemanticEnhancer; 3]>,
    iterative: Option<IterativeFusion>,
    out: Conv,
}

impl MaskDecoder {
    /// `channels` are the backbone widths of X3..X6.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &MaskDecoderConfig,
        channels: [usize; 4],
        rng: &mut R,
    ) -> Self {
        let d = config.width;
        let lateral = std::array::from_fn(|i| Conv::new(store, &format!("mask.lateral{}", i + 3), channels[i], d, 1, 1, rng));
        let enhancers = config.enhancer.then(|| {
            std::array::from_fn(|i| SemanticEnhancer::new(store, &format!("mask.enhance{}", i + 3), channels[3], d, rng))
        });
        let iterative = (config.fusion == FusionKind::Iterative).then(|| IterativeFusion {
            td4: Conv::with_gain(store, "mask.td4", d, d, 3, 1, SQRT_2, rng),
            td3: Conv::with_gain(store, "mask.td3", d, d, 3, 1, SQRT_2, rng),
            down3: Conv::new(store, "mask.down3", d, d, 3, 2, rng),
            down4: Conv::new(store, "mask.down4", d, d, 3, 2, rng),
            bu4: Conv::with_gain(store, "mask.bu4", d, d, 3, 1, SQRT_2, rng),
            bu5: Conv::with_gain(store, "mask.bu5", d, d, 3, 1, SQRT_2, rng),
            out: Conv::new(store, "mask.out", d, d, 3, 1, rng),
        });
        let out = match &iterative {
            Some(it) => it.out.clone(),
            None => Conv::new(store, "mask.out", d, d, 3, 1, rng),
        };
        MaskDecoder { config: config.clone(), lateral, enhancers, iterative, out }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, p: &FeaturePyramid<'t>) -> Result<Var<'t>> {
        let mut l = [p.x3, p.x4, p.x5];
        for (i, x) in l.iter_mut().enumerate() {
            *x = self.lateral[i].forward(cx, *x)?;
            if let Some(enh) = &self.enhancers {
                *x = enh[i].forward(cx, *x, p.x6)?;
            }
        }
        let [l3, l4, l5] = l;
        match &self.iterative {
            Some(f) => {
                let p5 = l5;
                let p4 = f.td4.forward(cx, l4.add(p5.upsample(2)?)?)?.gelu();
                let p3 = f.td3.forward(cx, l3.add(p4.upsample(2)?)?)?.gelu();
                let n3 = p3;
                let n4 = f.bu4.forward(cx, p4.add(f.down3.forward(cx, n3)?)?)?.gelu();
                let n5 = f.bu5.forward(cx, p5.add(f.down4.forward(cx, n4)?)?)?.gelu();
                let sum = n3.add(n4.upsample(2)?)?.add(n5.upsample(4)?)?;
                f.out.forward(cx, sum)
            }
            None => {
                let p4 = l4.add(l5.upsample(2)?)?;
                let p3 = l3.add(p4.upsample(2)?)?;
                self.out.forward(cx, p3)
            }
        }
    }

    /// Convolution FLOPs for an `h×w` input image, split into
    /// `(enhancer, total)`.
    pub fn conv_flops(&self, h: usize, w: usize) -> (usize, usize) {
        let sizes = [(h / 8, w / 8), (h / 16, w / 16), (h / 32, w / 32)];
        let (h6, w6) = (h / 64, w / 64);
        let mut total = 0;
        for (i, &(hh, ww)) in sizes.iter().enumerate() {
            total += self.lateral[i].flops(hh, ww);
        }
        let mut enh = 0;
        if let Some(e) = &self.enhancers {
            for se in e {
                enh += se.gate.flops(h6, w6) + se.shift.flops(h6, w6);
            }
        }
        let (s3, s4, s5) = (sizes[0], sizes[1], sizes[2]);
        total += match &self.iterative {
            Some(f) => {
                f.td4.flops(s4.0, s4.1)
                    + f.td3.flops(s3.0, s3.1)
                    + f.down3.flops(s3.0, s3.1)
                    + f.down4.flops(s4.0, s4.1)
                    + f.bu4.flops(s4.0, s4.1)
                    + f.bu5.flops(s5.0, s5.1)
                    + f.out.flops(s3.0, s3.1)
            }
            None => self.out.flops(s3.0, s3.1),
        };
        (enh, total + enh)
    }
}

/// Iterative fusion of the pyramid into `X_mask` `[D_k, H/8, W/8]`.
pub fn fuse_pyramid<'t>(cx: &Ctx<'t>, decoder: &MaskDecoder, p: &FeaturePyramid<'t>) -> Result<Var<'t>> {
    if decoder.config.fusion != FusionKind::Iterative {
        return Err(Error::arg("decoder was built for FPN fusion".to_string()));
    }
    decoder.forward(cx, p)
}

/// Top-down-only baseline fusion.
pub fn fuse_pyramid_fpn_baseline<'t>(cx: &Ctx<'t>, decoder: &MaskDecoder, p: &FeaturePyramid<'t>) -> Result<Var<'t>> {
    if decoder.config.fusion != FusionKind::Fpn {
        return Err(Error::arg("decoder was built for iterative fusion".to_string()));
    }
    decoder.forward(cx, p)
}
