//! Clip-level evaluation: matched mask IoU, track consistency and an
//! 11-point class-aware average precision.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::matching::{hungarian_match, mask_iou};
use crate::rle::ResultRecord;
use crate::tensor::Tensor;

pub const IOU_MATCH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalReport {
    /// Mean IoU over ground-truth/prediction pairs matched at IoU ≥ 0.5.
    pub mean_iou: f64,
    /// Fraction of ground-truth tracks whose matches all carry one predicted
    /// identity. Tracks never matched count as inconsistent.
    pub track_consistency: f64,
    pub ap_lite: f64,
    pub matched: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub gt_instances: usize,
    pub predictions: usize,
}

/// Predictions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub track_ids: Vec<u64>,
    pub categories: Vec<usize>,
    pub scores: Vec<f64>,
    pub masks: Vec<Tensor>,
}

impl FramePrediction {
    pub fn empty() -> Self {
        FramePrediction { track_ids: vec![], categories: vec![], scores: vec![], masks: vec![] }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Groups result records into `frames` frames.
    pub fn from_records(records: &[ResultRecord], frames: usize) -> Result<Vec<FramePrediction>> {
        let mut out = vec![FramePrediction::empty(); frames];
        for r in records {
            let f = out
                .get_mut(r.frame)
                .ok_or_else(|| Error::Format(format!("result for frame {} beyond clip length {frames}", r.frame)))?;
            f.track_ids.push(r.track_id);
            f.categories.push(r.category);
            f.scores.push(r.score);
            f.masks.push(r.mask.clone());
        }
        Ok(out)
    }
}

/// Accumulates evaluation over any number of clips.
#[derive(Debug, Clone, Default)]
pub struct Evaluator {
    iou_sum: f64,
    matched: usize,
    misses: usize,
    false_positives: usize,
    gt_instances: usize,
    predictions: usize,
    tracks_total: usize,
    tracks_consistent: usize,
    /// Per category: `(score, is_true_positive)` and ground-truth count.
    detections: BTreeMap<usize, Vec<(f64, bool)>>,
    gt_per_class: BTreeMap<usize, usize>,
}

fn iou_matrix(pred: &FramePrediction, gt: &GroundTruth) -> Result<Vec<Vec<f64>>> {
    gt.masks
        .iter()
        .map(|g| {
            pred.masks
                .iter()
                .map(|p| {
                    if p.shape() != g.shape() {
                        return Err(Error::shape(format!("predicted mask {:?} vs ground truth {:?}", p.shape(), g.shape())));
                    }
                    Ok(mask_iou(p.data(), g.data()))
                })
                .collect()
        })
        .collect()
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_clip(&mut self, preds: &[FramePrediction], gts: &[GroundTruth]) -> Result<()> {
        if preds.len() != gts.len() {
            return Err(Error::arg(format!("{} predicted frames for {} ground-truth frames", preds.len(), gts.len())));
        }
        let mut track_ids: HashMap<u64, Option<Vec<u64>>> = HashMap::new();
        for (pred, gt) in preds.iter().zip(gts) {
            let ious = iou_matrix(pred, gt)?;
            self.gt_instances += gt.len();
            self.predictions += pred.len();
            for &id in &gt.track_ids {
                track_ids.entry(id).or_insert(None);
            }

            let mut frame_matched = 0;
            if !gt.is_empty() && !pred.is_empty() {
                let cost = Tensor::from_vec(&[gt.len(), pred.len()], ious.iter().flatten().map(|v| -v).collect())?;
                for (g, p) in hungarian_match(&cost)?.pairs {
                    if ious[g][p] >= IOU_MATCH {
                        frame_matched += 1;
                        self.iou_sum += ious[g][p];
                        track_ids
                            .get_mut(&gt.track_ids[g])
                            .expect("inserted above")
                            .get_or_insert_with(Vec::new)
                            .push(pred.track_ids[p]);
                    }
                }
            }
            self.matched += frame_matched;
            self.misses += gt.len() - frame_matched;
            self.false_positives += pred.len() - frame_matched;
            self.add_detections(pred, gt, &ious);
        }
        self.tracks_total += track_ids.len();
        self.tracks_consistent += track_ids
            .values()
            .filter(|ids| ids.as_ref().is_some_and(|v| v.iter().all(|&x| x == v[0])))
            .count();
        Ok(())
    }

    /// Greedy class-aware matching in descending score order.
    fn add_detections(&mut self, pred: &FramePrediction, gt: &GroundTruth, ious: &[Vec<f64>]) {
        for &c in &gt.categories {
            *self.gt_per_class.entry(c).or_default() += 1;
        }
        let mut order: Vec<usize> = (0..pred.len()).collect();
        order.sort_by(|&a, &b| pred.scores[b].total_cmp(&pred.scores[a]));
        let mut taken = vec![false; gt.len()];
        for p in order {
            let c = pred.categories[p];
            let best = (0..gt.len())
                .filter(|&g| !taken[g] && gt.categories[g] == c && ious[g][p] >= IOU_MATCH)
                .max_by(|&a, &b| ious[a][p].total_cmp(&ious[b][p]));
            if let Some(g) = best {
                taken[g] = true;
            }
            self.detections.entry(c).or_default().push((pred.scores[p], best.is_some()));
        }
    }

    pub fn report(&self) -> EvalReport {
        let mut aps = Vec::new();
        for (&c, &n_gt) in &self.gt_per_class {
            if n_gt == 0 {
                continue;
            }
            let mut dets = self.detections.get(&c).cloned().unwrap_or_default();
            dets.sort_by(|a, b| b.0.total_cmp(&a.0));
            aps.push(eleven_point_ap(&dets, n_gt));
        }
        EvalReport {
            mean_iou: if self.matched == 0 { 0.0 } else { self.iou_sum / self.matched as f64 },
            track_consistency: if self.tracks_total == 0 {
                1.0
            } else {
                self.tracks_consistent as f64 / self.tracks_total as f64
            },
            ap_lite: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
            matched: self.matched,
            misses: self.misses,
            false_positives: self.false_positives,
            gt_instances: self.gt_instances,
            predictions: self.predictions,
        }
    }
}

/// Interpolated precision averaged at recall 0, 0.1, …, 1.
pub fn eleven_point_ap(sorted: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut curve = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in sorted.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, prec)| prec)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

pub fn evaluate_clip(preds: &[FramePrediction], gts: &[GroundTruth]) -> Result<EvalReport> {
    let mut e = Evaluator::new();
    e.add_clip(preds, gts)?;
    Ok(e.report())
}
