//! Model-level evaluation over held-out synthetic clips.

use rayon::prelude::*;

use crate::error::Result;
use crate::losses::GroundTruth;
use crate::metrics::{EvalReport, Evaluator, FramePrediction};
use crate::model::Network;
use crate::params::ParamStore;
use crate::synth::{clip_seed, generate_clip, SynthConfig};
use crate::tracker::{run_sequence, TrackedFrameResult, TrackerConfig};

pub fn to_predictions(frames: &[TrackedFrameResult]) -> Vec<FramePrediction> {
    frames
        .iter()
        .map(|f| FramePrediction {
            track_ids: f.instances.iter().map(|i| i.track_id).collect(),
            categories: f.instances.iter().map(|i| i.category).collect(),
            scores: f.instances.iter().map(|i| i.score).collect(),
            masks: f.instances.iter().map(|i| i.mask.clone()).collect(),
        })
        .collect()
}

/// Per-clip tracker output paired with ground truth, in clip order.
pub struct ClipRun {
    pub seed: u64,
    pub frames: Vec<TrackedFrameResult>,
    pub gt: Vec<GroundTruth>,
}

/// Tracks `clips` held-out clips derived from `base_seed`, in parallel
/// across clips.
pub fn run_clips(
    net: &Network,
    store: &ParamStore,
    synth: &SynthConfig,
    tracker: &TrackerConfig,
    base_seed: u64,
    clips: usize,
) -> Result<Vec<ClipRun>> {
    (0..clips as u64)
        .into_par_iter()
        .map(|i| {
            let seed = clip_seed(base_seed, i);
            let clip = generate_clip(synth, seed)?;
            let out = run_sequence(net, store, &clip.frames, tracker)?;
            Ok(ClipRun { seed, frames: out.frames, gt: clip.gt })
        })
        .collect()
}

pub fn evaluate_runs(runs: &[ClipRun]) -> Result<EvalReport> {
    let mut e = Evaluator::new();
    for r in runs {
        e.add_clip(&to_predictions(&r.frames), &r.gt)?;
    }
    Ok(e.report())
}

pub fn evaluate_model(
    net: &Network,
    store: &ParamStore,
    synth: &SynthConfig,
    tracker: &TrackerConfig,
    base_seed: u64,
    clips: usize,
) -> Result<EvalReport> {
    evaluate_runs(&run_clips(net, store, synth, tracker, base_seed, clips)?)
}
