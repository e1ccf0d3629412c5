//! Run configuration: `key = value` lines under `[section]` headers.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown sections and keys are rejected with their line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub clips: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 7919, clips: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value `{value}`: {e}"))
}

fn parse_channels(value: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(p.trim())).collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected four comma-separated widths, got `{value}`"))
}

/// Splits a config text into `(line, section, key, value)` entries.
pub(crate) fn entries(text: &str) -> Result<Vec<(usize, String, String, String)>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') || l.starts_with(';') {
            continue;
        }
        if let Some(rest) = l.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config { line, msg: format!("malformed section header `{l}`") })?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got `{l}`") })?;
        let sec = section
            .clone()
            .ok_or_else(|| Error::Config { line, msg: "key outside of any section".to_string() })?;
        out.push((line, sec, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (line, sec, key, value) in entries(text)? {
            if !seen.insert((sec.clone(), key.clone())) {
                return Err(Error::Config { line, msg: format!("duplicate key `{key}` in [{sec}]") });
            }
            cfg.set(&sec, &key, &value).map_err(|msg| Error::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |e: Error| Error::InvalidConfig(e.to_string());
        self.model.validate().map_err(inv)?;
        self.data.validate().map_err(inv)?;
        if self.tracker.reuse_interval == 0 {
            return Err(Error::InvalidConfig("reuse_interval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tracker.score_threshold) {
            return Err(Error::InvalidConfig("score_threshold must lie in [0, 1]".into()));
        }
        let l = &self.loss;
        if [l.cls, l.mask, l.obj, l.focal_alpha, l.focal_gamma, self.train.passing_weight].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        if self.model.classes < self.data.categories {
            return Err(Error::InvalidConfig(format!(
                "{} classes cannot represent {} data categories",
                self.model.classes, self.data.categories
            )));
        }
        if !(self.train.lr > 0.0) || self.train.batch == 0 || self.train.train_clips == 0 {
            return Err(Error::InvalidConfig("lr, batch and train_clips must be positive".into()));
        }
        Ok(())
    }

    /// Assigns one field from its textual value.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let b = &mut m.backbone;
        let t = &mut self.tracker;
        let l = &mut self.loss;
        let tr = &mut self.train;
        let d = &mut self.data;
        let e = &mut self.eval;
        match (section, key) {
            ("model", "dim") => m.dim = parse(v)?,
            ("model", "queries") => m.queries = parse(v)?,
            ("model", "classes") => m.classes = parse(v)?,
            ("model", "heads") => m.heads = parse(v)?,
            ("model", "ffn_dim") => m.ffn_dim = parse(v)?,
            ("model", "decoder") => m.decoder_mode = parse(v)?,
            ("model", "pool") => m.pool = parse(v)?,
            ("model", "pool_size") => m.pool_size = parse(v)?,
            ("model", "mask_width") => m.mask.width = parse(v)?,
            ("model", "fusion") => m.mask.fusion = parse(v)?,
            ("model", "enhancer") => m.mask.enhancer = parse(v)?,
            ("backbone", "stem") => b.stem = parse(v)?,
            ("backbone", "channels") => b.channels = parse_channels(v)?,
            ("backbone", "depth") => b.depth = parse(v)?,
            ("backbone", "transformer_blocks") => b.transformer_blocks = parse(v)?,
            ("backbone", "heads") => b.heads = parse(v)?,
            ("tracker", "reuse_interval") => t.reuse_interval = parse(v)?,
            ("tracker", "score_threshold") => t.score_threshold = parse(v)?,
            ("tracker", "strict_new_tracks") => t.strict_new_tracks = parse(v)?,
            ("tracker", "new_track_similarity") => t.new_track_similarity = parse(v)?,
            ("loss", "cls") => l.cls = parse(v)?,
            ("loss", "mask") => l.mask = parse(v)?,
            ("loss", "obj") => l.obj = parse(v)?,
            ("loss", "focal_alpha") => l.focal_alpha = parse(v)?,
            ("loss", "focal_gamma") => l.focal_gamma = parse(v)?,
            ("loss", "passing") => tr.passing_weight = parse(v)?,
            ("train", "seed") => tr.seed = parse(v)?,
            ("train", "data_seed") => tr.data_seed = parse(v)?,
            ("train", "train_clips") => tr.train_clips = parse(v)?,
            ("train", "image_iters") => tr.image_iters = parse(v)?,
            ("train", "video_iters") => tr.video_iters = parse(v)?,
            ("train", "batch") => tr.batch = parse(v)?,
            ("train", "lr") => tr.lr = parse(v)?,
            ("train", "min_lr_ratio") => tr.min_lr_ratio = parse(v)?,
            ("train", "warmup") => tr.warmup = parse(v)?,
            ("train", "weight_decay") => tr.weight_decay = parse(v)?,
            ("train", "clip_norm") => tr.clip_norm = parse(v)?,
            ("train", "max_delta") => tr.max_delta = parse(v)?,
            ("data", "size") => d.size = parse(v)?,
            ("data", "frames") => d.frames = parse(v)?,
            ("data", "min_instances") => d.min_instances = parse(v)?,
            ("data", "max_instances") => d.max_instances = parse(v)?,
            ("data", "categories") => d.categories = parse(v)?,
            ("data", "min_radius") => d.min_radius = parse(v)?,
            ("data", "max_radius") => d.max_radius = parse(v)?,
            ("data", "max_speed") => d.max_speed = parse(v)?,
            ("data", "noise") => d.noise = parse(v)?,
            ("eval", "seed") => e.seed = parse(v)?,
            ("eval", "clips") => e.clips = parse(v)?,
            ("model" | "backbone" | "tracker" | "loss" | "train" | "data" | "eval", _) => {
                return Err(format!("unknown key `{key}` in [{section}]"))
            }
            _ => return Err(format!("unknown section [{section}]")),
        }
        Ok(())
    }

    /// Serializes every field; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let c = b.channels;
        let t = &self.tracker;
        let l = &self.loss;
        let tr = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let _ = write!(
            s,
            "[model]\ndim = {}\nqueries = {}\nclasses = {}\nheads = {}\nffn_dim = {}\ndecoder = {}\npool = {}\npool_size = {}\nmask_width = {}\nfusion = {}\nenhancer = {}\n\n",
            m.dim, m.queries, m.classes, m.heads, m.ffn_dim, m.decoder_mode, m.pool, m.pool_size, m.mask.width, m.mask.fusion, m.mask.enhancer
        );
        let _ = write!(
            s,
            "[backbone]\nstem = {}\nchannels = {},{},{},{}\ndepth = {}\ntransformer_blocks = {}\nheads = {}\n\n",
            b.stem, c[0], c[1], c[2], c[3], b.depth, b.transformer_blocks, b.heads
        );
        let _ = write!(
            s,
            "[tracker]\nreuse_interval = {}\nscore_threshold = {}\nstrict_new_tracks = {}\nnew_track_similarity = {}\n\n",
            t.reuse_interval, t.score_threshold, t.strict_new_tracks, t.new_track_similarity
        );
        let _ = write!(
            s,
            "[loss]\ncls = {}\nmask = {}\nobj = {}\nfocal_alpha = {}\nfocal_gamma = {}\npassing = {}\n\n",
            l.cls, l.mask, l.obj, l.focal_alpha, l.focal_gamma, tr.passing_weight
        );
        let _ = write!(
            s,
            "[train]\nseed = {}\ndata_seed = {}\ntrain_clips = {}\nimage_iters = {}\nvideo_iters = {}\nbatch = {}\nlr = {}\nmin_lr_ratio = {}\nwarmup = {}\nweight_decay = {}\nclip_norm = {}\nmax_delta = {}\n\n",
            tr.seed, tr.data_seed, tr.train_clips, tr.image_iters, tr.video_iters, tr.batch, tr.lr, tr.min_lr_ratio, tr.warmup, tr.weight_decay, tr.clip_norm, tr.max_delta
        );
        let _ = write!(
            s,
            "[data]\nsize = {}\nframes = {}\nmin_instances = {}\nmax_instances = {}\ncategories = {}\nmin_radius = {}\nmax_radius = {}\nmax_speed = {}\nnoise = {}\n\n",
            d.size, d.frames, d.min_instances, d.max_instances, d.categories, d.min_radius, d.max_radius, d.max_speed, d.noise
        );
        let _ = write!(s, "[eval]\nseed = {}\nclips = {}\n", self.eval.seed, self.eval.clips);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.model.decoder_mode = crate::instance_decoder::DecoderMode::LocalLocal;
        cfg.train.lr = 3.25e-4;
        cfg.model.backbone.channels = [8, 16, 24, 32];
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("[model]\ndim = 64\nwidth = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = RunConfig::parse("[model]\n\n[nope]\nx = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 4, .. }), "{err}");
        let err = RunConfig::parse("dim = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err}");
        let err = RunConfig::parse("[train]\nlr = fast\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
    }

    #[test]
    fn semantic_errors_are_reported() {
        assert!(matches!(RunConfig::parse("[model]\ndim = 130\n"), Err(Error::InvalidConfig(_))));
    }
}
