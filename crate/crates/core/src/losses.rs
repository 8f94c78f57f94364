//! Training losses and their analytic gradients.
//!
//! - classification: sigmoid focal loss, summed over classes and averaged over queries
//! - box: L1 and `1 − GIoU`, averaged over matched pairs
//! - position: mean center distance of the predictions that stray more than `eta`
//!   from their anchor center
//!
//! Gradients are taken with the assignment (and the position-loss violator set)
//! held fixed.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, giou_with_grad, BBox, GiouBranch};
use crate::matching::{GtObject, MatchResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one logit against a binary target, with `d loss / d logit`.
pub fn sigmoid_focal(logit: f64, target: bool, f: &FocalParams) -> (f64, f64) {
    let p = sigmoid(logit);
    if target {
        let log_p = -softplus(-logit);
        let q = 1.0 - p;
        let mod_ = q.powf(f.gamma);
        let loss = -f.alpha * mod_ * log_p;
        let grad = f.alpha * mod_ * (f.gamma * p * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(logit);
        let mod_ = p.powf(f.gamma);
        let loss = -(1.0 - f.alpha) * mod_ * log_q;
        let grad = (1.0 - f.alpha) * mod_ * (p - f.gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationLoss {
    pub value: f64,
    /// Gradient with respect to the `N × C` logits.
    pub grad: Array2<f64>,
}

/// Matched queries target their object's class; every other entry targets 0.
pub fn classification_loss(
    logits: &Array2<f64>,
    m: &MatchResult,
    gts: &[GtObject],
    focal: &FocalParams,
) -> ClassificationLoss {
    let (n, c) = logits.dim();
    let mut grad = Array2::zeros((n, c));
    if n == 0 {
        return ClassificationLoss { value: 0.0, grad };
    }
    let mut target_class = vec![None; n];
    for &(q, o) in &m.pairs {
        target_class[q] = Some(gts[o].class_id);
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for q in 0..n {
        for k in 0..c {
            let (l, g) = sigmoid_focal(logits[[q, k]], target_class[q] == Some(k), focal);
            value += l;
            grad[[q, k]] = g * scale;
        }
    }
    ClassificationLoss {
        value: value * scale,
        grad,
    }
}

#[derive(Debug, Clone)]
pub struct BoxLosses {
    pub l1: f64,
    /// Mean of `1 − GIoU`.
    pub giou: f64,
    /// Per-query gradients of `l1` with respect to `(cx, cy, w, h)`.
    pub grad_l1: Vec<[f64; 4]>,
    pub grad_giou: Vec<[f64; 4]>,
    /// Smooth-piece identifier per matched pair (L1 signs, GIoU branch).
    pub pieces: Vec<([bool; 4], GiouBranch)>,
}

pub fn box_losses(preds: &[BBox], m: &MatchResult, gts: &[GtObject]) -> BoxLosses {
    let n = preds.len();
    let mut out = BoxLosses {
        l1: 0.0,
        giou: 0.0,
        grad_l1: vec![[0.0; 4]; n],
        grad_giou: vec![[0.0; 4]; n],
        pieces: Vec::with_capacity(m.pairs.len()),
    };
    if m.pairs.is_empty() {
        return out;
    }
    let scale = 1.0 / m.pairs.len() as f64;
    for &(q, o) in &m.pairs {
        let p = preds[q].to_array();
        let t = gts[o].bbox.to_array();
        let mut signs = [false; 4];
        for k in 0..4 {
            let d = p[k] - t[k];
            out.l1 += d.abs();
            signs[k] = d > 0.0;
            out.grad_l1[q][k] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        let (g, grad_p, _, branch) = giou_with_grad(&p, &t);
        out.giou += 1.0 - g;
        for k in 0..4 {
            out.grad_giou[q][k] = -grad_p[k] * scale;
        }
        out.pieces.push((signs, branch));
    }
    out.l1 *= scale;
    out.giou *= scale;
    out
}

#[derive(Debug, Clone)]
pub struct PositionLoss {
    pub value: f64,
    /// Queries whose center distance exceeds `eta`, ascending.
    pub violators: Vec<usize>,
    /// Gradient with respect to each prediction's `(cx, cy)`.
    pub grad_pred: Vec<[f64; 2]>,
    /// Gradient with respect to each anchor's `(cx, cy)`.
    pub grad_anchor: Vec<[f64; 2]>,
}

/// Zero when no prediction strays more than `eta` from its anchor center.
pub fn position_loss(anchors: &[BBox], preds: &[BBox], eta: f64) -> PositionLoss {
    debug_assert_eq!(anchors.len(), preds.len());
    let n = preds.len();
    let dist: Vec<f64> = anchors
        .iter()
        .zip(preds)
        .map(|(a, p)| center_distance(p, a))
        .collect();
    let violators: Vec<usize> = (0..n).filter(|&i| dist[i] > eta).collect();
    let mut out = PositionLoss {
        value: 0.0,
        violators,
        grad_pred: vec![[0.0; 2]; n],
        grad_anchor: vec![[0.0; 2]; n],
    };
    let sigma = out.violators.len();
    if sigma == 0 {
        return out;
    }
    let inv = 1.0 / sigma as f64;
    for &i in &out.violators {
        out.value += dist[i];
        if dist[i] > 0.0 {
            let dx = (preds[i].cx() - anchors[i].cx()) / dist[i] * inv;
            let dy = (preds[i].cy() - anchors[i].cy()) / dist[i] * inv;
            out.grad_pred[i] = [dx, dy];
            out.grad_anchor[i] = [-dx, -dy];
        }
    }
    out.value *= inv;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub pos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            pos: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("cls", self.cls), ("l1", self.l1), ("giou", self.giou), ("pos", self.pos)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidWeights(format!("lambda_{name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub pos: f64,
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.pos += o.pos;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub pos: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let LossParts { cls, l1, giou, pos } = parts;
    if ![cls, l1, giou, pos].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidWeights(format!("non-finite loss parts {parts:?}")));
    }
    Ok(LossBreakdown {
        cls,
        l1,
        giou,
        pos,
        total: w.cls * cls + w.l1 * l1 + w.giou * giou + w.pos * pos,
        weights: *w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn matched(pairs: Vec<(usize, usize)>) -> MatchResult {
        MatchResult {
            pair_costs: vec![0.0; pairs.len()],
            pairs,
            unmatched_objects: vec![],
            total_cost: 0.0,
        }
    }

    #[test]
    fn focal_scalar_oracle() {
        // p = 0.5 on the target class: -alpha (1-p)^gamma log p
        let (l, _) = sigmoid_focal(0.0, true, &FocalParams::default());
        let oracle = 0.25 * 0.5f64.powi(2) * 2f64.ln();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 0.0433).abs() < 1e-4);

        let logits = Array2::zeros((1, 1));
        let gts = vec![GtObject { bbox: bb(0.5, 0.5, 0.1, 0.1), class_id: 0 }];
        let c = classification_loss(&logits, &matched(vec![(0, 0)]), &gts, &FocalParams::default());
        assert!((c.value - oracle).abs() < 1e-15);
    }

    #[test]
    fn focal_perfect_predictions_vanish() {
        let gts = vec![GtObject { bbox: bb(0.5, 0.5, 0.1, 0.1), class_id: 1 }];
        let mut logits = Array2::from_elem((2, 3), -800.0);
        logits[[0, 1]] = 800.0;
        let c = classification_loss(&logits, &matched(vec![(0, 0)]), &gts, &FocalParams::default());
        assert_eq!(c.value, 0.0);
        assert!(c.grad.iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let f = FocalParams::default();
        let h = 1e-5;
        for &z in &[-6.0, -1.3, -0.2, 0.0, 0.7, 2.5, 9.0] {
            for &t in &[true, false] {
                let (_, g) = sigmoid_focal(z, t, &f);
                let fd = (sigmoid_focal(z + h, t, &f).0 - sigmoid_focal(z - h, t, &f).0) / (2.0 * h);
                assert!((g - fd).abs() <= 1e-4 * g.abs().max(1e-6), "z={z} t={t}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn perfect_boxes_zero_loss() {
        let b = bb(0.3, 0.3, 0.2, 0.1);
        let gts = vec![GtObject { bbox: b, class_id: 0 }];
        let out = box_losses(&[b, bb(0.9, 0.9, 0.1, 0.1)], &matched(vec![(0, 0)]), &gts);
        assert_eq!(out.l1, 0.0);
        assert_eq!(out.giou, 0.0);
    }

    #[test]
    fn disjoint_pair_giou_loss() {
        let gts = vec![GtObject { bbox: bb(0.75, 0.75, 0.1, 0.1), class_id: 0 }];
        let out = box_losses(&[bb(0.25, 0.25, 0.1, 0.1)], &matched(vec![(0, 0)]), &gts);
        assert!((out.giou - (1.0 + 0.34 / 0.36)).abs() < 1e-12);
        assert!((out.giou - 1.9444).abs() < 1e-4);
    }

    #[test]
    fn no_pairs_no_box_loss() {
        let out = box_losses(&[bb(0.2, 0.2, 0.1, 0.1)], &matched(vec![]), &[]);
        assert_eq!((out.l1, out.giou), (0.0, 0.0));
    }

    #[test]
    fn position_loss_cases() {
        let a = bb(0.5, 0.5, 0.2, 0.2);
        let out = position_loss(&[a], &[bb(0.6, 0.55, 0.1, 0.1)], 0.25);
        assert_eq!(out.value, 0.0);
        assert!(out.violators.is_empty());

        let out = position_loss(&[a], &[bb(0.9, 0.5, 0.1, 0.1)], 0.25);
        assert_eq!(out.violators, vec![0]);
        assert!((out.value - 0.4).abs() < 1e-12);

        let out = position_loss(
            &[a, a],
            &[bb(0.8, 0.5, 0.1, 0.1), bb(0.5, 0.7, 0.1, 0.1)],
            0.25,
        );
        assert_eq!(out.violators, vec![0]);
        assert!((out.value - 0.3).abs() < 1e-12);
        assert_eq!(out.grad_pred[1], [0.0, 0.0]);
    }

    #[test]
    fn position_loss_increases_with_violator_distance() {
        let a = bb(0.5, 0.5, 0.2, 0.2);
        let mut prev = 0.0;
        for k in 1..10 {
            let x = 0.5 + 0.26 + 0.02 * k as f64;
            let v = position_loss(&[a, a], &[bb(x, 0.5, 0.1, 0.1), bb(0.5, 0.5, 0.1, 0.1)], 0.25).value;
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights { cls: 2.0, l1: 5.0, giou: 2.0, pos: 5.0 };
        let b = total_loss(LossParts::default(), &w).unwrap();
        assert_eq!(b.total, 0.0);
        let b = total_loss(LossParts { cls: 1.0, l1: 1.0, giou: 1.0, pos: 1.0 }, &w).unwrap();
        assert_eq!(b.total, 14.0);
        assert!(total_loss(LossParts::default(), &LossWeights { pos: -1.0, ..w }).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let parts = LossParts { cls: rng.random(), l1: rng.random(), giou: rng.random(), pos: rng.random() };
            let w = LossWeights { cls: rng.random(), l1: rng.random(), giou: rng.random(), pos: rng.random() };
            let b = total_loss(parts, &w).unwrap();
            let dot: f64 = [parts.cls, parts.l1, parts.giou, parts.pos]
                .iter()
                .zip([w.cls, w.l1, w.giou, w.pos])
                .map(|(p, l)| p * l)
                .sum();
            assert!((b.total - dot).abs() <= 1e-12);
        }
    }
}
