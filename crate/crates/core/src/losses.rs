//! Training objectives: focal classification, Dice plus BCE masks and
//! IoU-aware objectness, combined after bipartite matching.

use crate::autodiff::{sigmoid, Var};
use crate::error::{Error, Result};
use crate::instance_decoder::{segment, InstancePrediction};
use crate::matching::{hungarian_match, mask_iou, matching_cost, Assignment, DICE_EPS};
use crate::model::{FrameFeatures, FrameOutput, Network};
use crate::nn::Ctx;
use crate::tensor::Tensor;

/// Ground truth for one frame at mask resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Binary `[h, w]` masks.
    pub masks: Vec<Tensor>,
    pub categories: Vec<usize>,
    /// Clip-scoped identity of each instance.
    pub track_ids: Vec<u64>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn validate(&self, hw: &[usize], classes: usize) -> Result<()> {
        if self.categories.len() != self.masks.len() || self.track_ids.len() != self.masks.len() {
            return Err(Error::arg("ground-truth fields differ in length".to_string()));
        }
        for (m, &c) in self.masks.iter().zip(&self.categories) {
            if m.shape() != hw {
                return Err(Error::shape(format!("ground-truth mask {:?} vs predictions {hw:?}", m.shape())));
            }
            if c >= classes {
                return Err(Error::arg(format!("category {c} out of range for {classes} classes")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub obj: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 2.0, mask: 2.0, obj: 1.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub cls: f64,
    pub mask: f64,
    pub obj: f64,
    pub assignment: Assignment,
}

fn norm(assignment: &Assignment) -> f64 {
    1.0 / assignment.len().max(1) as f64
}

/// Sigmoid focal loss over all `[N, C]` logits, normalized by the match count.
/// Matched queries target their ground-truth class, everything else targets 0.
pub fn focal_loss<'t>(
    logits: Var<'t>,
    assignment: &Assignment,
    gt_categories: &[usize],
    alpha: f64,
    gamma: f64,
) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("class logits must be [N, C], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let mut target = Tensor::zeros(&[n, c]);
    for &(q, g) in &assignment.pairs {
        let cat = *gt_categories.get(g).ok_or_else(|| Error::arg(format!("ground-truth index {g} out of range")))?;
        if cat >= c || q >= n {
            return Err(Error::arg(format!("pair ({q}, {g}) with category {cat} out of range")));
        }
        target.data_mut()[q * c + cat] = 1.0;
    }
    let tape = logits.tape();
    let flip = tape.constant(target.map(|y| 1.0 - 2.0 * y));
    let alpha_t = tape.constant(target.map(|y| if y > 0.5 { alpha } else { 1.0 - alpha }));
    let y = tape.constant(target);
    // 1 − p_t = p + y − 2py
    let one_minus_pt = logits.sigmoid().mul(flip)?.add(y)?;
    let ce = logits.softplus().sub(logits.mul(y)?)?;
    let focal = alpha_t.mul(one_minus_pt.powf(gamma))?.mul(ce)?;
    Ok(focal.sum().scale(norm(assignment)))
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` for probabilities `pred`.
pub fn dice_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    check_same(&pred, gt)?;
    let g = pred.tape().constant(gt.clone());
    let inter = pred.mul(g)?.sum().scale(2.0).add_scalar(DICE_EPS);
    let denom = pred.sum().add_scalar(gt.data().iter().sum::<f64>() + DICE_EPS);
    Ok(inter.div(denom)?.rsub_scalar(1.0))
}

/// Mean binary cross-entropy of `σ(logits)` against `gt`, evaluated in
/// log-sum-exp form.
pub fn bce_mask_loss<'t>(logits: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    check_same(&logits, gt)?;
    let g = logits.tape().constant(gt.clone());
    Ok(logits.softplus().sub(logits.mul(g)?)?.mean())
}

fn check_same(v: &Var<'_>, gt: &Tensor) -> Result<()> {
    if v.shape() != gt.shape() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", v.shape(), gt.shape())));
    }
    Ok(())
}

/// `Σ_pairs Dice + BCE` over matched masks, normalized by the match count.
pub fn mask_loss<'t>(mask_logits: Var<'t>, assignment: &Assignment, gt: &GroundTruth) -> Result<Var<'t>> {
    let s = mask_logits.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("mask logits must be [N, h, w], got {s:?}")));
    }
    let tape = mask_logits.tape();
    if assignment.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let hw = s[1] * s[2];
    let m = assignment.len();
    let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let mut target = Vec::with_capacity(m * hw);
    for &(_, g) in &assignment.pairs {
        let mask = gt.masks.get(g).ok_or_else(|| Error::arg(format!("ground-truth index {g} out of range")))?;
        if mask.shape() != &s[1..] {
            return Err(Error::shape(format!("ground-truth mask {:?} vs predictions {:?}", mask.shape(), &s[1..])));
        }
        target.extend_from_slice(mask.data());
    }
    let gsum: Vec<f64> = target.chunks(hw).map(|r| r.iter().sum()).collect();
    let g = tape.constant(Tensor::from_vec(&[m, hw], target)?);
    let gsum = tape.constant(Tensor::from_vec(&[m], gsum)?);

    let x = mask_logits.index_rows(&rows)?.reshape(&[m, hw])?;
    let p = x.sigmoid();
    let inter = p.mul(g)?.sum_last().scale(2.0).add_scalar(DICE_EPS);
    let denom = p.sum_last().add(gsum)?.add_scalar(DICE_EPS);
    let dice = inter.div(denom)?.rsub_scalar(1.0);
    let bce = x.softplus().sub(x.mul(g)?)?.sum_last().scale(1.0 / hw as f64);
    Ok(dice.add(bce)?.sum().scale(norm(assignment)))
}

/// Objectness targets: IoU of each matched query's binarized mask with its
/// ground truth, 0 for unmatched queries.
pub fn objectness_targets(mask_logits: &Tensor, assignment: &Assignment, gt: &GroundTruth) -> Vec<f64> {
    let n = mask_logits.shape()[0];
    let hw = mask_logits.numel() / n.max(1);
    let mut t = vec![0.0; n];
    for &(q, g) in &assignment.pairs {
        let bin: Vec<f64> = mask_logits.data()[q * hw..(q + 1) * hw]
            .iter()
            .map(|&x| if sigmoid(x) > 0.5 { 1.0 } else { 0.0 })
            .collect();
        t[q] = mask_iou(&bin, gt.masks[g].data());
    }
    t
}

/// BCE of `σ(objectness)` against the IoU targets, normalized by the match
/// count.
pub fn objectness_loss<'t>(
    obj_logits: Var<'t>,
    mask_logits: &Tensor,
    assignment: &Assignment,
    gt: &GroundTruth,
) -> Result<Var<'t>> {
    let n = mask_logits.shape()[0];
    if obj_logits.numel() != n {
        return Err(Error::shape(format!("{} objectness logits for {n} masks", obj_logits.numel())));
    }
    let t = obj_logits.tape().constant(Tensor::from_vec(&obj_logits.shape(), objectness_targets(mask_logits, assignment, gt))?);
    Ok(obj_logits.softplus().sub(obj_logits.mul(t)?)?.sum().scale(norm(assignment)))
}

/// Matches predictions to ground truth by the class-and-Dice cost.
pub fn assign(pred: &InstancePrediction<'_>, mask_logits: &Tensor, gt: &GroundTruth) -> Result<Assignment> {
    let probs = pred.class_logits.value().map(sigmoid);
    let mask_probs = mask_logits.map(sigmoid);
    hungarian_match(&matching_cost(&probs, &mask_probs, &gt.masks, &gt.categories)?)
}

/// Weighted loss under a given assignment.
pub fn loss_with_assignment<'t>(
    pred: &InstancePrediction<'t>,
    masks: Var<'t>,
    assignment: Assignment,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<LossBreakdown<'t>> {
    let cls = focal_loss(pred.class_logits, &assignment, &gt.categories, w.focal_alpha, w.focal_gamma)?;
    let mask = mask_loss(masks, &assignment, gt)?;
    let obj = objectness_loss(pred.objectness, &masks.value(), &assignment, gt)?;
    let total = cls.scale(w.cls).add(mask.scale(w.mask))?.add(obj.scale(w.obj))?;
    Ok(LossBreakdown { total, cls: cls.item(), mask: mask.item(), obj: obj.item(), assignment })
}

/// `λ_cls·L_cls + λ_mask·L_mask + λ_obj·L_obj` for one frame.
pub fn total_loss<'t>(
    pred: &InstancePrediction<'t>,
    masks: Var<'t>,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<LossBreakdown<'t>> {
    let s = masks.shape();
    gt.validate(&s[1..], pred.class_logits.shape()[1])?;
    let assignment = assign(pred, &masks.value(), gt)?;
    loss_with_assignment(pred, masks, assignment, gt, w)
}

/// Carries frame `t`'s query-to-instance assignment to frame `t+δ` through
/// track identities. Instances absent at `t+δ` drop out.
pub fn transport_assignment(assignment: &Assignment, gt_t: &GroundTruth, gt_next: &GroundTruth) -> Result<Assignment> {
    let mut pairs = Vec::new();
    for &(q, g) in &assignment.pairs {
        let id = gt_t.track_ids.get(g).ok_or_else(|| Error::arg(format!("ground-truth index {g} has no track id")))?;
        let mut hits = gt_next.track_ids.iter().enumerate().filter(|(_, t)| *t == id);
        if let Some((j, _)) = hits.next() {
            if hits.next().is_some() {
                return Err(Error::arg(format!("track id {id} appears twice in one frame")));
            }
            pairs.push((q, j));
        }
    }
    let n = assignment.pairs.len() + assignment.unmatched.len();
    let unmatched = (0..n).filter(|q| !pairs.iter().any(|p| p.0 == *q)).collect();
    Ok(Assignment { pairs, unmatched })
}

/// Mask loss of frame `t+δ` predicted from frame `t`'s first-stage queries
/// refined by the remaining stages on frame `t+δ`, under the transported
/// assignment.
pub fn temporal_query_passing_loss<'t>(
    cx: &Ctx<'t>,
    net: &Network,
    out_t: &FrameOutput<'t>,
    assignment_t: &Assignment,
    gt_t: &GroundTruth,
    next: &FrameFeatures<'t>,
    gt_next: &GroundTruth,
) -> Result<Var<'t>> {
    let q = net.decode_rest(cx, out_t.decoded.q_first, next)?;
    let pred = net.heads.forward(cx, q)?;
    let masks = segment(pred.kernels, next.x_mask)?;
    gt_next.validate(&masks.shape()[1..], net.config.classes)?;
    let transported = transport_assignment(assignment_t, gt_t, gt_next)?;
    mask_loss(masks, &transported, gt_next)
}
