//! The full per-frame network: backbone, mask decoder, instance decoder and
//! prediction heads.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::instance_decoder::{
    extract_local_features, segment, DecoderMode, DualOutput, InstanceDecoder, InstancePrediction, PoolKind,
    PredictionHeads,
};
use crate::mask_decoder::{MaskDecoder, MaskDecoderConfig};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mask: MaskDecoderConfig,
    pub dim: usize,
    pub queries: usize,
    pub classes: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub decoder_mode: DecoderMode,
    pub pool: PoolKind,
    pub pool_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            mask: MaskDecoderConfig::default(),
            dim: 128,
            queries: 25,
            classes: 3,
            heads: 4,
            ffn_dim: 256,
            decoder_mode: DecoderMode::GlobalLocal,
            pool: PoolKind::Max,
            pool_size: 8,
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter model for tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneConfig { stem: 4, channels: [6, 8, 10, 12], depth: 1, transformer_blocks: 1, heads: 2 },
            mask: MaskDecoderConfig { width: 8, ..MaskDecoderConfig::default() },
            dim: 8,
            queries: 8,
            classes: 3,
            heads: 2,
            ffn_dim: 16,
            decoder_mode: DecoderMode::GlobalLocal,
            pool: PoolKind::Max,
            pool_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.queries == 0 || self.classes == 0 {
            return bad("queries and classes must be positive".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("decoder width {} must be even and divisible by {} heads", self.dim, self.heads));
        }
        if !matches!(self.pool_size, 1 | 2 | 4 | 8) {
            return bad(format!("pool size {} must be 1, 2, 4 or 8", self.pool_size));
        }
        if self.mask.width == 0 || self.ffn_dim == 0 {
            return bad("mask width and feed-forward width must be positive".into());
        }
        Ok(())
    }
}

/// Everything computed from a single frame before the instance decoder.
pub struct FrameFeatures<'t> {
    pub pyramid: FeaturePyramid<'t>,
    pub x_mask: Var<'t>,
    pub x_local: Var<'t>,
}

pub struct FrameOutput<'t> {
    pub features: FrameFeatures<'t>,
    pub decoded: DualOutput<'t>,
    pub pred: InstancePrediction<'t>,
    /// Mask logits `[N, H/8, W/8]`.
    pub masks: Var<'t>,
}

#[derive(Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub mask_decoder: MaskDecoder,
    pub decoder: InstanceDecoder,
    pub heads: PredictionHeads,
    pub queries: ParamId,
    decode_calls: AtomicU64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            mask_decoder: self.mask_decoder.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
            queries: self.queries,
            decode_calls: AtomicU64::new(0),
        }
    }
}

impl Network {
    /// Builds the layer graph and a freshly initialized parameter store.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Network, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, &mut rng)?;
        let mask_decoder = MaskDecoder::new(&mut store, &config.mask, config.backbone.channels, &mut rng);
        let decoder = InstanceDecoder::new(
            &mut store,
            config.decoder_mode,
            config.backbone.channels[3],
            config.mask.width,
            config.dim,
            config.heads,
            config.ffn_dim,
            &mut rng,
        )?;
        let heads = PredictionHeads::new(&mut store, config.dim, config.classes, config.mask.width, &mut rng);
        let queries = store.add(
            "queries",
            Tensor::randn(&[config.queries, config.dim], 1.0, &mut rng),
        );
        let net = Network {
            config: config.clone(),
            backbone,
            mask_decoder,
            decoder,
            heads,
            queries,
            decode_calls: AtomicU64::new(0),
        };
        Ok((net, store))
    }

    /// Number of instance-decoder runs since construction.
    pub fn decode_calls(&self) -> u64 {
        self.decode_calls.load(Ordering::Relaxed)
    }

    /// Backbone, mask features and pooled local features.
    pub fn features<'t>(&self, cx: &Ctx<'t>, image: &Tensor) -> Result<FrameFeatures<'t>> {
        let pyramid = self.backbone.forward(cx, cx.constant(normalize_image(image)))?;
        let x_mask = self.mask_decoder.forward(cx, &pyramid)?;
        let x_local = extract_local_features(x_mask, self.config.pool, self.config.pool_size)?;
        Ok(FrameFeatures { pyramid, x_mask, x_local })
    }

    pub fn decode<'t>(&self, cx: &Ctx<'t>, f: &FrameFeatures<'t>) -> Result<DualOutput<'t>> {
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        self.decoder.dual_decode(cx, cx.p(self.queries), f.pyramid.x6, f.x_local)
    }

    /// Runs the stages after the first on externally supplied queries.
    pub fn decode_rest<'t>(&self, cx: &Ctx<'t>, q: Var<'t>, f: &FrameFeatures<'t>) -> Result<Var<'t>> {
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        self.decoder.run_from(cx, 1, q, f.pyramid.x6, f.x_local)
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, image: &Tensor) -> Result<FrameOutput<'t>> {
        let features = self.features(cx, image)?;
        let decoded = self.decode(cx, &features)?;
        let pred = self.heads.forward(cx, decoded.q_final)?;
        let masks = segment(pred.kernels, features.x_mask)?;
        Ok(FrameOutput { features, decoded, pred, masks })
    }
}

/// Maps `[0, 1]` pixel values to a zero-centred range.
pub fn normalize_image(image: &Tensor) -> Tensor {
    image.map(|v| (v - 0.5) * 2.0)
}
