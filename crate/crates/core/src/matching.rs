//! Bipartite assignment between predictions and ground truth.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Matched `(row, column)` pairs sorted by row, plus the rows left over.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Column assigned to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sum of `cost[row][col]` over the pairs, accumulated in row order.
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        let cols = cost.shape()[1];
        self.pairs.iter().map(|&(r, c)| cost.data()[r * cols + c]).sum()
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs for a `[rows, cols]`
/// cost matrix.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    if cost.rank() != 2 {
        return Err(Error::shape(format!("cost matrix must be 2-D, got {:?}", cost.shape())));
    }
    if !cost.all_finite() {
        return Err(Error::arg("cost matrix contains non-finite entries".to_string()));
    }
    let (rows, cols) = (cost.shape()[0], cost.shape()[1]);
    if rows == 0 || cols == 0 {
        return Ok(Assignment { pairs: vec![], unmatched: (0..rows).collect() });
    }
    let at = |r: usize, c: usize| cost.data()[r * cols + c];
    let mut pairs = if rows <= cols {
        solve(rows, cols, at)
    } else {
        solve(cols, rows, |r, c| at(c, r)).into_iter().map(|(c, r)| (r, c)).collect()
    };
    pairs.sort_unstable();
    let mut matched = vec![false; rows];
    for &(r, _) in &pairs {
        matched[r] = true;
    }
    let unmatched = (0..rows).filter(|&r| !matched[r]).collect();
    Ok(Assignment { pairs, unmatched })
}

/// Shortest-augmenting-path assignment with potentials for `n ≤ m`.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based with column 0 as the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

pub const MATCH_EXPONENT: f64 = 0.8;
pub const DICE_EPS: f64 = 1e-6;

/// Soft Dice coefficient `(2Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_coefficient(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS)
}

/// `C[i][j] = −p_i(c_j)^0.8 · Dice(m_i, g_j)^0.8`.
///
/// `class_probs` is `[N, C]`, `mask_probs` is `[N, h, w]`, each ground-truth
/// mask is `[h, w]`.
pub fn matching_cost(
    class_probs: &Tensor,
    mask_probs: &Tensor,
    gt_masks: &[Tensor],
    gt_categories: &[usize],
) -> Result<Tensor> {
    let (n, c) = match class_probs.shape() {
        &[n, c] => (n, c),
        s => return Err(Error::shape(format!("class probabilities must be [N, C], got {s:?}"))),
    };
    let ms = mask_probs.shape();
    if ms.len() != 3 || ms[0] != n {
        return Err(Error::shape(format!("mask probabilities {ms:?} do not match {n} queries")));
    }
    if gt_masks.len() != gt_categories.len() {
        return Err(Error::arg("ground-truth masks and categories differ in length".to_string()));
    }
    let hw = ms[1] * ms[2];
    let g = gt_masks.len();
    let mut cost = Tensor::zeros(&[n, g]);
    for (j, (mask, &cat)) in gt_masks.iter().zip(gt_categories).enumerate() {
        if mask.shape() != &ms[1..] {
            return Err(Error::shape(format!("ground-truth mask {:?} vs predictions {:?}", mask.shape(), &ms[1..])));
        }
        if cat >= c {
            return Err(Error::arg(format!("category {cat} out of range for {c} classes")));
        }
        for i in 0..n {
            let p = class_probs.data()[i * c + cat];
            let d = dice_coefficient(&mask_probs.data()[i * hw..(i + 1) * hw], mask.data());
            cost.data_mut()[i * g + j] = -(p.powf(MATCH_EXPONENT) * d.powf(MATCH_EXPONENT));
        }
    }
    Ok(cost)
}

/// Intersection over union of two binary masks; two empty masks give 0.
pub fn mask_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_and_tall_agree() {
        let c = Tensor::from_vec(&[2, 3], vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0]).unwrap();
        let a = hungarian_match(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        let mut t = Tensor::zeros(&[3, 2]);
        for r in 0..2 {
            for k in 0..3 {
                t.set(&[k, r], c.at(&[r, k]));
            }
        }
        let b = hungarian_match(&t).unwrap();
        assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(b.unmatched, vec![2]);
    }

    #[test]
    fn empty_sides() {
        let a = hungarian_match(&Tensor::zeros(&[3, 0])).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched, vec![0, 1, 2]);
    }

    #[test]
    fn iou_basics() {
        assert_eq!(mask_iou(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]), 0.5);
        assert_eq!(mask_iou(&[0.0; 3], &[0.0; 3]), 0.0);
    }
}
