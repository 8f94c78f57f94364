//! Synthetic AP at IoU 0.5 and the per-query matching statistics.

use serde::{Deserialize, Serialize};

use crate::decoder::{decode, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, relative_scale, BBox};
use crate::harness::scene::PreparedScene;
use crate::mask::AttentionMask;
use crate::matching::{team_match_with_groups, CostWeights, GtObject, Prediction};
use crate::partition::{QueryTeam, ScalePartition};

pub const AP_IOU_THRESHOLD: f64 = 0.5;
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// One detection per query: the arg-max class scored by its probability.
pub fn detections_from_predictions(scene: usize, preds: &[Prediction]) -> Vec<Detection> {
    preds
        .iter()
        .map(|p| {
            let (score, class_id) = p.confidence();
            Detection {
                scene,
                bbox: p.bbox,
                class_id,
                score,
            }
        })
        .collect()
}

/// Restricts AP to one scale bucket. Objects of other buckets become ignore
/// regions: a detection landing on one, or an unmatched detection whose own
/// scale lies outside the bucket, counts neither way.
#[derive(Debug, Clone, Copy)]
pub struct BucketScope<'a> {
    pub partition: &'a ScalePartition,
    pub bucket: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Greedy confidence-ordered matching of one class; returns the outcome of
/// each detection in the given order.
fn greedy_outcomes(order: &[&Detection], gts: &[Vec<GtObject>], class: usize, scope: Option<BucketScope>) -> Vec<Outcome> {
    let ignored = |g: &GtObject| scope.is_some_and(|s| s.partition.group_for_scale(relative_scale(&g.bbox)) != s.bucket);
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .iter()
        .map(|d| {
            let mut best: Option<(bool, f64, usize)> = None;
            for (j, g) in gts[d.scene].iter().enumerate() {
                if g.class_id != class || used[d.scene][j] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v < AP_IOU_THRESHOLD {
                    continue;
                }
                // regular objects first, then higher IoU
                let key = (!ignored(g), v, j);
                if best.is_none_or(|b| (key.0, key.1) > (b.0, b.1)) {
                    best = Some(key);
                }
            }
            match best {
                Some((regular, _, j)) => {
                    used[d.scene][j] = true;
                    if regular {
                        Outcome::TruePositive
                    } else {
                        Outcome::Ignored
                    }
                }
                None => match scope {
                    Some(s) if s.partition.group_for_scale(relative_scale(&d.bbox)) != s.bucket => Outcome::Ignored,
                    _ => Outcome::FalsePositive,
                },
            }
        })
        .collect()
}

fn interpolate(points: &[(f64, f64)]) -> f64 {
    (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / RECALL_POINTS as f64
}

fn positives(gts: &[Vec<GtObject>], class: usize, scope: Option<BucketScope>) -> usize {
    gts.iter()
        .flatten()
        .filter(|g| g.class_id == class)
        .filter(|g| scope.is_none_or(|s| s.partition.group_for_scale(relative_scale(&g.bbox)) == s.bucket))
        .count()
}

/// 101-point interpolated AP at IoU 0.5 averaged over classes that have at
/// least one counted object; `None` when no class does. Detections with
/// score 0 are dropped. Precision/recall points are taken only after each
/// run of tied scores.
pub fn average_precision(dets: &[Detection], gts: &[Vec<GtObject>], n_classes: usize, scope: Option<BucketScope>) -> Option<f64> {
    let mut per_class = Vec::new();
    for c in 0..n_classes {
        let npos = positives(gts, c, scope);
        if npos == 0 {
            continue;
        }
        let mut order: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c && d.score > 0.0).collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score));
        let outcomes = greedy_outcomes(&order, gts, c, scope);
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut points = Vec::new();
        for (i, o) in outcomes.iter().enumerate() {
            match o {
                Outcome::TruePositive => tp += 1,
                Outcome::FalsePositive => fp += 1,
                Outcome::Ignored => {}
            }
            let run_ends = order.get(i + 1).is_none_or(|n| n.score != order[i].score);
            if run_ends && tp + fp > 0 {
                points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
            }
        }
        per_class.push(interpolate(&points));
    }
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    /// AP per scale bucket; `None` for buckets without objects.
    pub ap_buckets: Vec<Option<f64>>,
    /// Mean over queries with at least two matches of the standard deviation
    /// of their matched objects' relative scales.
    pub scale_std_mean: f64,
    /// Share of matched final predictions whose center lies within `eta` of
    /// the query's anchor.
    pub center_within_eta_frac: f64,
    pub matched_pairs: usize,
}

/// Statistics over the final-layer matches of a prediction set.
pub fn matching_statistics(
    preds: &[Vec<Prediction>],
    scenes: &[PreparedScene],
    team: &QueryTeam,
    cost: &CostWeights,
    eta: f64,
) -> Result<(f64, f64, usize)> {
    let mut scales: Vec<Vec<f64>> = vec![Vec::new(); team.len()];
    let (mut pairs, mut near) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(scenes) {
        let m = team_match_with_groups(team, p, &s.objects, &s.groups, cost)?;
        for &(q, o) in &m.pairs {
            scales[q].push(relative_scale(&s.objects[o].bbox));
            pairs += 1;
            if center_distance(&p[q].bbox, &team.anchors()[q]) <= eta {
                near += 1;
            }
        }
    }
    let stds: Vec<f64> = scales
        .iter()
        .filter(|v| v.len() >= 2)
        .map(|v| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let std_mean = if stds.is_empty() { 0.0 } else { stds.iter().sum::<f64>() / stds.len() as f64 };
    let frac = if pairs == 0 { 0.0 } else { near as f64 / pairs as f64 };
    Ok((std_mean, frac, pairs))
}

pub fn metrics_from_predictions(
    preds: &[Vec<Prediction>],
    scenes: &[PreparedScene],
    team: &QueryTeam,
    buckets: &ScalePartition,
    n_classes: usize,
    cost: &CostWeights,
    eta: f64,
) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dets: Vec<Detection> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, p)| detections_from_predictions(i, p))
        .collect();
    let gts: Vec<Vec<GtObject>> = scenes.iter().map(|s| s.objects.clone()).collect();
    let ap = average_precision(&dets, &gts, n_classes, None).unwrap_or(0.0);
    let ap_buckets = (0..buckets.len())
        .map(|bucket| average_precision(&dets, &gts, n_classes, Some(BucketScope { partition: buckets, bucket })))
        .collect();
    let (scale_std_mean, center_within_eta_frac, matched_pairs) = matching_statistics(preds, scenes, team, cost, eta)?;
    Ok(Metrics {
        ap,
        ap_buckets,
        scale_std_mean,
        center_within_eta_frac,
        matched_pairs,
    })
}

/// Final-layer predictions for every scene, in scene order.
pub fn predict(params: &ModelParams, scenes: &[PreparedScene], team: &QueryTeam, mask: &AttentionMask) -> Result<Vec<Vec<Prediction>>> {
    use rayon::prelude::*;
    scenes
        .par_iter()
        .map(|s| {
            let out = decode(&s.features, team, params, mask)?;
            Ok(out.last().map(|l| l.predictions()).unwrap_or_default())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    scenes: &[PreparedScene],
    team: &QueryTeam,
    mask: &AttentionMask,
    buckets: &ScalePartition,
    cost: &CostWeights,
    eta: f64,
) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(params, scenes, team, mask)?;
    metrics_from_predictions(&preds, scenes, team, buckets, params.config.n_classes, cost, eta)
}
