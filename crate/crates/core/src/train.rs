//! Two-phase training on synthetic clips: single frames first, then frame
//! pairs with temporal query passing.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::losses::{temporal_query_passing_loss, total_loss, LossWeights};
use crate::model::Network;
use crate::nn::Ctx;
use crate::params::{AdamW, ParamStore};
use crate::synth::{clip_seed, generate_clip, SynthClip, SynthConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_seed: u64,
    /// Size of the training clip pool.
    pub train_clips: usize,
    pub image_iters: usize,
    pub video_iters: usize,
    /// Frames (or frame pairs) per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub min_lr_ratio: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Largest frame gap `δ` sampled for query passing.
    pub max_delta: usize,
    /// Weight of the passing mask loss.
    pub passing_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data_seed: 1,
            train_clips: 4000,
            image_iters: 3500,
            video_iters: 1500,
            batch: 1,
            lr: 5e-4,
            min_lr_ratio: 0.05,
            warmup: 100,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            max_delta: 5,
            passing_weight: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> usize {
        self.image_iters + self.video_iters
    }

    /// Linear warmup then cosine decay to `min_lr_ratio · lr`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let total = self.total_iters().max(1);
        if iter < self.warmup {
            return self.lr * (iter + 1) as f64 / self.warmup as f64;
        }
        let span = (total - self.warmup.min(total)).max(1) as f64;
        let progress = ((iter - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterLog {
    pub iter: usize,
    pub loss: f64,
    pub cls: f64,
    pub mask: f64,
    pub obj: f64,
}

impl IterLog {
    /// `iter loss l_cls l_mask l_obj`.
    pub fn line(&self) -> String {
        format!("{} {} {} {} {}", self.iter, self.loss, self.cls, self.mask, self.obj)
    }
}

/// Parses a metrics log written by [`train`].
pub fn parse_metrics(text: &str) -> Vec<IterLog> {
    text.lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 5 {
                return None;
            }
            Some(IterLog {
                iter: f[0].parse().ok()?,
                loss: f[1].parse().ok()?,
                cls: f[2].parse().ok()?,
                mask: f[3].parse().ok()?,
                obj: f[4].parse().ok()?,
            })
        })
        .collect()
}

pub struct TrainReport {
    pub log: Vec<IterLog>,
    pub seconds: f64,
}

/// Loss of one sample, accumulated into the store's gradients.
fn image_step(
    net: &Network,
    store: &mut ParamStore,
    clip: &SynthClip,
    t: usize,
    weights: &LossWeights,
    scale: f64,
) -> Result<IterLog> {
    let tape = Tape::new();
    let (log, grads) = {
        let cx = Ctx::new(&tape, store);
        let out = net.forward(&cx, &clip.frames[t])?;
        let lb = total_loss(&out.pred, out.masks, &clip.gt[t], weights)?;
        let log = IterLog { iter: 0, loss: lb.total.item(), cls: lb.cls, mask: lb.mask, obj: lb.obj };
        (log, tape.backward(lb.total.scale(scale))?)
    };
    store.accumulate(&grads);
    Ok(log)
}

fn video_step(
    net: &Network,
    store: &mut ParamStore,
    clip: &SynthClip,
    t: usize,
    delta: usize,
    cfg: &TrainConfig,
    weights: &LossWeights,
    scale: f64,
) -> Result<IterLog> {
    let tape = Tape::new();
    let (log, grads) = {
        let cx = Ctx::new(&tape, store);
        let n = t + delta;
        let out_t = net.forward(&cx, &clip.frames[t])?;
        let lb_t = total_loss(&out_t.pred, out_t.masks, &clip.gt[t], weights)?;
        let out_n = net.forward(&cx, &clip.frames[n])?;
        let lb_n = total_loss(&out_n.pred, out_n.masks, &clip.gt[n], weights)?;
        let pass = temporal_query_passing_loss(&cx, net, &out_t, &lb_t.assignment, &clip.gt[t], &out_n.features, &clip.gt[n])?;
        let total = lb_t.total.add(lb_n.total)?.add(pass.scale(cfg.passing_weight))?;
        let log = IterLog {
            iter: 0,
            loss: total.item(),
            cls: 0.5 * (lb_t.cls + lb_n.cls),
            mask: 0.5 * (lb_t.mask + lb_n.mask),
            obj: 0.5 * (lb_t.obj + lb_n.obj),
        };
        (log, tape.backward(total.scale(scale))?)
    };
    store.accumulate(&grads);
    Ok(log)
}

/// Runs both phases, writing one metrics line per iteration to `metrics`.
pub fn train(
    net: &Network,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    synth: &SynthConfig,
    weights: &LossWeights,
    metrics: &mut dyn Write,
) -> Result<TrainReport> {
    synth.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    opt.clip_norm = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
    let batch = cfg.batch.max(1);
    let pool = cfg.train_clips.max(1) as u64;
    let mut log = Vec::with_capacity(cfg.total_iters());
    for iter in 0..cfg.total_iters() {
        let video = iter >= cfg.image_iters;
        let mut entry = IterLog { iter, loss: 0.0, cls: 0.0, mask: 0.0, obj: 0.0 };
        for _ in 0..batch {
            let clip = generate_clip(synth, clip_seed(cfg.data_seed, rng.random_range(0..pool)))?;
            let frames = clip.frames.len();
            let s = if video && frames > 1 {
                let delta = rng.random_range(1..=cfg.max_delta.clamp(1, frames - 1));
                let t = rng.random_range(0..frames - delta);
                video_step(net, store, &clip, t, delta, cfg, weights, 1.0 / batch as f64)?
            } else {
                let t = rng.random_range(0..frames);
                image_step(net, store, &clip, t, weights, 1.0 / batch as f64)?
            };
            let k = 1.0 / batch as f64;
            entry.loss += k * s.loss;
            entry.cls += k * s.cls;
            entry.mask += k * s.mask;
            entry.obj += k * s.obj;
        }
        opt.lr = cfg.lr_at(iter);
        opt.step(store);
        writeln!(metrics, "{}", entry.line())?;
        log.push(entry);
    }
    Ok(TrainReport { log, seconds: start.elapsed().as_secs_f64() })
}
