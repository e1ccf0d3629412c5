//! Library entry points behind the command-line tool.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{entries, RunConfig};
use crate::error::{Error, Result};
use crate::instance_decoder::{DecoderMode, PoolKind};
use crate::io::{load_params, save_params};
use crate::metrics::{EvalReport, FramePrediction};
use crate::model::Network;
use crate::params::ParamStore;
use crate::pipeline::evaluate_model;
use crate::rle::{format_results, parse_results, read_ground_truth};
use crate::synth::{generate_clip, load_frames};
use crate::tensor::{DType, Tensor};
use crate::tracker::{process_frame, run_sequence, TrackState, TrackedFrameResult, TrackerConfig};
use crate::train::{train, TrainReport};

pub const CONFIG_FILE: &str = "config.ini";
pub const METRICS_FILE: &str = "metrics.txt";
pub const RESULTS_FILE: &str = "results.txt";

/// Trains from `config` and writes the checkpoint, its config and the
/// metrics log into `out`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<TrainReport> {
    std::fs::create_dir_all(out)?;
    let (net, mut store) = Network::build(&config.model, config.train.seed)?;
    let mut metrics = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let report = train(&net, &mut store, &config.train, &config.data, &config.loss, &mut metrics)?;
    metrics.flush()?;
    save_params(out, &store, DType::F32)?;
    std::fs::write(out.join(CONFIG_FILE), config.to_text())?;
    Ok(report)
}

/// Rebuilds the network for `config` and fills it from `checkpoint`.
pub fn load_model(config: &RunConfig, checkpoint: &Path) -> Result<(Network, ParamStore)> {
    let (net, mut store) = Network::build(&config.model, config.train.seed)?;
    load_params(checkpoint, &mut store)?;
    Ok((net, store))
}

/// The config stored next to a checkpoint, or `explicit` when given.
pub fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    match explicit {
        Some(p) => RunConfig::load(p),
        None => {
            let p = checkpoint.join(CONFIG_FILE);
            if !p.exists() {
                return Err(Error::Checkpoint(format!("{} has no {CONFIG_FILE}", checkpoint.display())));
            }
            RunConfig::load(&p)
        }
    }
}

pub struct InferOptions {
    pub threshold: Option<f64>,
    pub reuse_interval: Option<usize>,
    pub render_masks: bool,
}

/// Tracks the frames in `input` and writes the result manifest (and optional
/// mask images) into `out`.
pub fn cmd_infer(
    config: &RunConfig,
    net: &Network,
    store: &ParamStore,
    input: &Path,
    out: &Path,
    opts: &InferOptions,
) -> Result<Vec<TrackedFrameResult>> {
    let mut tracker = config.tracker;
    if let Some(t) = opts.threshold {
        tracker.score_threshold = t;
    }
    if let Some(t) = opts.reuse_interval {
        tracker.reuse_interval = t;
    }
    let frames = load_frames(input)?;
    let results = run_sequence(net, store, &frames, &tracker)?.frames;
    std::fs::create_dir_all(out)?;
    let records: Vec<_> = results.iter().flat_map(|r| r.records()).collect();
    std::fs::write(out.join(RESULTS_FILE), format_results(&records))?;
    if opts.render_masks {
        let dir = out.join("masks");
        std::fs::create_dir_all(&dir)?;
        for r in &records {
            write_pgm(&dir.join(format!("frame{:04}_track{}.pgm", r.frame, r.track_id)), &r.mask)?;
        }
    }
    Ok(results)
}

fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.data().iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Scores a result manifest against a ground-truth manifest.
pub fn cmd_eval(results: &Path, gt: &Path) -> Result<EvalReport> {
    let gt = read_ground_truth(gt)?;
    let records = parse_results(&std::fs::read_to_string(results)?)?;
    let preds = FramePrediction::from_records(&records, gt.len())?;
    crate::metrics::evaluate_clip(&preds, &gt)
}

pub fn format_report(r: &EvalReport) -> String {
    format!(
        "mean_iou={}\ntrack_consistency={}\nap_lite={}\nmatched={}\nmisses={}\nfalse_positives={}\ngt_instances={}\npredictions={}\n",
        r.mean_iou, r.track_consistency, r.ap_lite, r.matched, r.misses, r.false_positives, r.gt_instances, r.predictions
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchFrame {
    pub frame: usize,
    pub keyframe: bool,
    pub flops: u64,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub reuse_interval: usize,
    pub frames: Vec<BenchFrame>,
    pub decoder_invocations: u64,
}

impl BenchReport {
    pub fn total_flops(&self) -> u64 {
        self.frames.iter().map(|f| f.flops).sum()
    }

    fn mean(&self, key: bool, f: impl Fn(&BenchFrame) -> f64) -> Option<f64> {
        let sel: Vec<f64> = self.frames.iter().filter(|b| b.keyframe == key).map(f).collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }

    pub fn mean_keyframe_flops(&self) -> Option<f64> {
        self.mean(true, |b| b.flops as f64)
    }

    pub fn mean_reuse_flops(&self) -> Option<f64> {
        self.mean(false, |b| b.flops as f64)
    }

    pub fn format(&self) -> String {
        let mut s = String::from("frame keyframe flops ms\n");
        for f in &self.frames {
            let _ = writeln!(s, "{} {} {} {:.3}", f.frame, f.keyframe as u8, f.flops, f.millis);
        }
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.0}"));
        let _ = writeln!(
            s,
            "reuse_interval={} decoder_invocations={} total_flops={} keyframe_flops={} reuse_flops={} keyframe_ms={} reuse_ms={}",
            self.reuse_interval,
            self.decoder_invocations,
            self.total_flops(),
            opt(self.mean_keyframe_flops()),
            opt(self.mean_reuse_flops()),
            self.mean(true, |b| b.millis).map_or("-".into(), |x| format!("{x:.3}")),
            self.mean(false, |b| b.millis).map_or("-".into(), |x| format!("{x:.3}")),
        );
        s
    }
}

/// Per-frame cost of tracking `frames` with keyframe interval `reuse_interval`.
pub fn cmd_bench(net: &Network, store: &ParamStore, frames: &[Tensor], reuse_interval: usize) -> Result<BenchReport> {
    let tracker = TrackerConfig { reuse_interval, ..TrackerConfig::default() };
    let before = net.decode_calls();
    let mut state = TrackState::new();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let start = Instant::now();
        let (r, s) = process_frame(net, store, f, state, &tracker)?;
        out.push(BenchFrame { frame: r.frame, keyframe: r.keyframe, flops: r.flops, millis: start.elapsed().as_secs_f64() * 1e3 });
        state = s;
    }
    Ok(BenchReport { reuse_interval, frames: out, decoder_invocations: net.decode_calls() - before })
}

/// A synthetic benchmark clip of the given size and length.
pub fn bench_frames(config: &RunConfig, size: usize, frames: usize) -> Result<Vec<Tensor>> {
    let synth = crate::synth::SynthConfig { size, frames, ..config.data.clone() };
    Ok(generate_clip(&synth, config.eval.seed)?.frames)
}

/// Variant axes of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub base: RunConfig,
    pub decoders: Vec<DecoderMode>,
    pub pools: Vec<(PoolKind, usize)>,
    pub enhancers: Vec<bool>,
    pub reuse_intervals: Vec<usize>,
}

fn list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    let items: Vec<T> = v.split(',').map(|p| f(p.trim())).collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".to_string());
    }
    Ok(items)
}

fn parse_pool(v: &str) -> std::result::Result<(PoolKind, usize), String> {
    let split = v.find(|c: char| c.is_ascii_digit()).ok_or_else(|| format!("pool `{v}` lacks a size (e.g. max8)"))?;
    let kind = v[..split].parse()?;
    let k = v[split..].parse().map_err(|_| format!("bad pool size in `{v}`"))?;
    Ok((kind, k))
}

impl AblationGrid {
    /// A run config plus a `[grid]` section with comma-separated `decoder`,
    /// `pool` (e.g. `max8, avg8, max4`), `enhancer` and `reuse_interval`
    /// lists. Missing axes keep the base value.
    pub fn parse(text: &str) -> Result<Self> {
        // Grid lines are blanked so base-config errors keep their line numbers.
        let mut base_text = String::new();
        let mut in_grid = false;
        for line in text.lines() {
            let t = line.trim();
            if t.starts_with('[') {
                in_grid = t == "[grid]";
            }
            if !in_grid {
                base_text.push_str(line);
            }
            base_text.push('\n');
        }
        let base = RunConfig::parse(&base_text)?;
        let mut grid = AblationGrid {
            decoders: vec![base.model.decoder_mode],
            pools: vec![(base.model.pool, base.model.pool_size)],
            enhancers: vec![base.model.mask.enhancer],
            reuse_intervals: vec![base.tracker.reuse_interval],
            base,
        };
        for (line, _, key, value) in entries(text)?.into_iter().filter(|e| e.1 == "grid") {
            let r = match key.as_str() {
                "decoder" => list(&value, |v| v.parse()).map(|v| grid.decoders = v),
                "pool" => list(&value, parse_pool).map(|v| grid.pools = v),
                "enhancer" => list(&value, |v| v.parse::<bool>().map_err(|e| e.to_string())).map(|v| grid.enhancers = v),
                "reuse_interval" => list(&value, |v| v.parse::<usize>().map_err(|e| e.to_string())).map(|v| grid.reuse_intervals = v),
                _ => Err(format!("unknown key `{key}` in [grid]")),
            };
            r.map_err(|msg| Error::Config { line, msg })?;
        }
        for (line, cfg) in grid.variants() {
            cfg.validate().map_err(|e| Error::InvalidConfig(format!("grid variant {line}: {e}")))?;
        }
        if grid.reuse_intervals.contains(&0) {
            return Err(Error::InvalidConfig("reuse_interval must be at least 1".into()));
        }
        Ok(grid)
    }

    /// Every model variant as `(label, config)`.
    pub fn variants(&self) -> Vec<(String, RunConfig)> {
        let mut out = Vec::new();
        for &d in &self.decoders {
            for &(p, k) in &self.pools {
                for &e in &self.enhancers {
                    let mut c = self.base.clone();
                    c.model.decoder_mode = d;
                    c.model.pool = p;
                    c.model.pool_size = k;
                    c.model.mask.enhancer = e;
                    out.push((format!("{d} {p}{k} enhancer={e}"), c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub decoder: DecoderMode,
    pub pool: PoolKind,
    pub pool_size: usize,
    pub enhancer: bool,
    pub reuse_interval: usize,
    pub report: EvalReport,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("decoder pool enhancer T mean_iou track_consistency ap_lite misses false_positives\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{} {}{} {} {} {:.4} {:.4} {:.4} {} {}",
            r.decoder,
            r.pool,
            r.pool_size,
            r.enhancer,
            r.reuse_interval,
            r.report.mean_iou,
            r.report.track_consistency,
            r.report.ap_lite,
            r.report.misses,
            r.report.false_positives
        );
    }
    s
}

/// Trains every model variant, then evaluates it at each reuse interval.
/// Checkpoints go to `out/<index>` when `out` is given.
pub fn cmd_ablate(grid: &AblationGrid, out: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (i, (label, cfg)) in grid.variants().into_iter().enumerate() {
        progress(&format!("training variant {i}: {label}"));
        let (net, store) = match out {
            Some(dir) => {
                let d: PathBuf = dir.join(format!("variant{i:02}"));
                cmd_train(&cfg, &d)?;
                load_model(&cfg, &d)?
            }
            None => {
                let (net, mut store) = Network::build(&cfg.model, cfg.train.seed)?;
                train(&net, &mut store, &cfg.train, &cfg.data, &cfg.loss, &mut std::io::sink())?;
                (net, store)
            }
        };
        for &t in &grid.reuse_intervals {
            let tracker = TrackerConfig { reuse_interval: t, ..cfg.tracker };
            let report = evaluate_model(&net, &store, &cfg.data, &tracker, cfg.eval.seed, cfg.eval.clips)?;
            rows.push(AblationRow {
                decoder: cfg.model.decoder_mode,
                pool: cfg.model.pool,
                pool_size: cfg.model.pool_size,
                enhancer: cfg.model.mask.enhancer,
                reuse_interval: t,
                report,
            });
        }
    }
    Ok(rows)
}

/// Evaluates a trained model on the config's held-out clips.
pub fn evaluate_checkpoint(config: &RunConfig, net: &Network, store: &ParamStore) -> Result<EvalReport> {
    evaluate_model(net, store, &config.data, &config.tracker, config.eval.seed, config.eval.clips)
}

/// Writes held-out clips as directories `clip_XXXX` under `out`.
pub fn cmd_generate(config: &RunConfig, out: &Path, clips: usize, base_seed: u64) -> Result<()> {
    for i in 0..clips {
        let clip = generate_clip(&config.data, crate::synth::clip_seed(base_seed, i as u64))?;
        crate::synth::export_clip(&clip, &out.join(format!("clip_{i:04}")))?;
    }
    Ok(())
}
