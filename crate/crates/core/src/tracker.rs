//! Online video inference with kernel reuse.
//!
//! Every `T`-th frame is a keyframe that runs the whole network. Between
//! keyframes only the backbone and mask decoder run, and the cached kernels
//! are applied to the fresh mask features. Keyframe kernels are linked to the
//! previous keyframe's by Hungarian matching on cosine similarity, which
//! carries track identities forward.

use crate::autodiff::{sigmoid, Tape};
use crate::error::{Error, Result};
use crate::instance_decoder::segment;
use crate::matching::hungarian_match;
use crate::model::Network;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::rle::ResultRecord;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    /// Keyframe interval `T`; 1 recomputes every frame.
    pub reuse_interval: usize,
    pub score_threshold: f64,
    /// Mint a new identity when the matched similarity falls below
    /// `new_track_similarity` instead of always inheriting one.
    pub strict_new_tracks: bool,
    pub new_track_similarity: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { reuse_interval: 3, score_threshold: 0.4, strict_new_tracks: false, new_track_similarity: 0.1 }
    }
}

/// Cached outputs of the last keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    /// `[N, D_k]`.
    pub kernels: Tensor,
    pub scores: Vec<f64>,
    pub categories: Vec<usize>,
    pub track_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    /// Index of the next frame to process.
    pub frame_index: usize,
    /// Position of the next frame within the current keyframe window.
    pub frames_since_keyframe: usize,
    pub keyframe: Option<Keyframe>,
    pub next_track_id: u64,
}

impl Default for TrackState {
    fn default() -> Self {
        TrackState { frame_index: 0, frames_since_keyframe: 0, keyframe: None, next_track_id: 1 }
    }
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedInstance {
    pub track_id: u64,
    pub category: usize,
    pub score: f64,
    /// Mask logits `[h, w]` at stride 8.
    pub logits: Tensor,
    /// Binary mask `[h, w]`, foreground where `σ(logit) > 0.5`.
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedFrameResult {
    pub frame: usize,
    pub keyframe: bool,
    pub flops: u64,
    pub instances: Vec<TrackedInstance>,
}

impl TrackedFrameResult {
    pub fn records(&self) -> Vec<ResultRecord> {
        self.instances
            .iter()
            .map(|i| ResultRecord {
                frame: self.frame,
                track_id: i.track_id,
                category: i.category,
                score: i.score,
                mask: i.mask.clone(),
            })
            .collect()
    }
}

/// Cosine similarity `S[i][j]` between rows of `prev` and `curr`.
pub fn cosine_similarity(prev: &Tensor, curr: &Tensor) -> Result<Tensor> {
    let (ps, cs) = (prev.shape(), curr.shape());
    if ps.len() != 2 || cs.len() != 2 || ps[1] != cs[1] {
        return Err(Error::shape(format!("kernel sets {ps:?} and {cs:?} are not comparable")));
    }
    let d = ps[1];
    let unit = |t: &Tensor| -> Vec<Vec<f64>> {
        t.data()
            .chunks(d)
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                r.iter().map(|v| v / n).collect()
            })
            .collect()
    };
    let (a, b) = (unit(prev), unit(curr));
    let mut s = Tensor::zeros(&[ps[0], cs[0]]);
    for (i, ra) in a.iter().enumerate() {
        for (j, rb) in b.iter().enumerate() {
            s.data_mut()[i * cs[0] + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
    }
    Ok(s)
}

/// For each current kernel, the matched previous kernel and its similarity.
pub fn associate_kernels(prev: &Tensor, curr: &Tensor) -> Result<Vec<Option<(usize, f64)>>> {
    let sim = cosine_similarity(prev, curr)?;
    let neg = sim.map(|v| -v);
    let a = hungarian_match(&neg)?;
    let nc = curr.shape()[0];
    let mut out = vec![None; nc];
    for &(i, j) in &a.pairs {
        out[j] = Some((i, sim.data()[i * nc + j]));
    }
    Ok(out)
}

/// Keeps instances scoring strictly above `threshold`.
pub fn filter_predictions(instances: Vec<TrackedInstance>, threshold: f64) -> Vec<TrackedInstance> {
    instances.into_iter().filter(|i| i.score > threshold).collect()
}

/// Processes one frame and returns the updated state.
pub fn process_frame(
    net: &Network,
    store: &ParamStore,
    frame: &Tensor,
    state: TrackState,
    config: &TrackerConfig,
) -> Result<(TrackedFrameResult, TrackState)> {
    if config.reuse_interval == 0 {
        return Err(Error::arg("reuse interval must be at least 1".to_string()));
    }
    if state.frames_since_keyframe >= config.reuse_interval {
        return Err(Error::State(format!(
            "{} frames since the keyframe with reuse interval {}",
            state.frames_since_keyframe, config.reuse_interval
        )));
    }
    let is_key = state.frames_since_keyframe == 0;
    if !is_key && state.keyframe.is_none() {
        return Err(Error::State(format!("frame {} has no keyframe to reuse", state.frame_index)));
    }
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, store);
    let features = net.features(&cx, frame)?;

    let mut next = state;
    let kernels = if is_key {
        let decoded = net.decode(&cx, &features)?;
        let pred = net.heads.forward(&cx, decoded.q_final)?;
        let kernels = pred.kernels.value().as_ref().clone();
        let scores = pred.scores();
        let categories = pred.categories();
        let n = scores.len();
        let track_ids = match &next.keyframe {
            None => {
                let ids = (0..n as u64).map(|k| next.next_track_id + k).collect();
                next.next_track_id += n as u64;
                ids
            }
            Some(prev) => {
                let links = associate_kernels(&prev.kernels, &kernels)?;
                links
                    .into_iter()
                    .map(|link| match link {
                        Some((i, s)) if !(config.strict_new_tracks && s < config.new_track_similarity) => {
                            prev.track_ids[i]
                        }
                        _ => {
                            next.next_track_id += 1;
                            next.next_track_id - 1
                        }
                    })
                    .collect()
            }
        };
        next.keyframe = Some(Keyframe { kernels, scores, categories, track_ids });
        pred.kernels
    } else {
        let key = next.keyframe.as_ref().expect("checked above");
        cx.constant(key.kernels.clone())
    };
    let masks = segment(kernels, features.x_mask)?.value();
    let key = next.keyframe.as_ref().expect("set on keyframes");
    let (h, w) = (masks.shape()[1], masks.shape()[2]);
    let instances = (0..key.scores.len())
        .map(|i| {
            let logits = Tensor::from_vec(&[h, w], masks.data()[i * h * w..(i + 1) * h * w].to_vec())?;
            let mask = logits.map(|x| if sigmoid(x) > 0.5 { 1.0 } else { 0.0 });
            Ok(TrackedInstance {
                track_id: key.track_ids[i],
                category: key.categories[i],
                score: key.scores[i],
                logits,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let result = TrackedFrameResult {
        frame: next.frame_index,
        keyframe: is_key,
        flops: tape.flops(),
        instances: filter_predictions(instances, config.score_threshold),
    };
    next.frame_index += 1;
    next.frames_since_keyframe = (next.frames_since_keyframe + 1) % config.reuse_interval;
    Ok((result, next))
}

pub struct SequenceOutput {
    pub frames: Vec<TrackedFrameResult>,
    pub state: TrackState,
}

pub fn run_sequence(
    net: &Network,
    store: &ParamStore,
    frames: &[Tensor],
    config: &TrackerConfig,
) -> Result<SequenceOutput> {
    let Some(first) = frames.first() else {
        return Err(Error::arg("empty frame sequence".to_string()));
    };
    if let Some(f) = frames.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::shape(format!("frame of shape {:?} in a sequence of {:?}", f.shape(), first.shape())));
    }
    let mut state = TrackState::new();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let (r, s) = process_frame(net, store, f, state, config)?;
        out.push(r);
        state = s;
    }
    Ok(SequenceOutput { frames: out, state })
}
