//! Finite-difference oracles shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use team_detr::decoder::{loss_and_gradients, LossConfig, ModelConfig, ModelParams, SceneFeatures};
use team_detr::geometry::giou_with_grad;
use team_detr::losses::{box_losses, classification_loss, position_loss, sigmoid_focal, FocalParams};
use team_detr::{build_attention_mask, build_partition, init_team, BBox, GtObject, MatchResult, QueryTeam};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences at step 1e-5
/// carry round-off near `eps * |loss| / step`, about 1e-9 for the losses
/// here, so gradients below the floor are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub points: usize,
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

impl FdReport {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.worst = self.worst.max(rel_err(analytic, numeric));
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.worst <= REL_TOL
    }

    pub fn merge(&mut self, o: FdReport) {
        self.points += o.points;
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.worst = self.worst.max(o.worst);
    }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.05..0.8);
    let h = rng.random_range(0.05..0.8);
    BBox::new(
        rng.random_range(w / 2.0..1.0 - w / 2.0),
        rng.random_range(h / 2.0..1.0 - h / 2.0),
        w,
        h,
    )
    .unwrap()
}

fn random_match(rng: &mut ChaCha8Rng, n_queries: usize, n_objects: usize) -> MatchResult {
    let mut queries: Vec<usize> = (0..n_queries).collect();
    for i in (1..queries.len()).rev() {
        queries.swap(i, rng.random_range(0..=i));
    }
    let k = n_queries.min(n_objects);
    let mut pairs: Vec<(usize, usize)> = (0..k).map(|o| (queries[o], o)).collect();
    pairs.sort_unstable();
    MatchResult {
        pair_costs: vec![0.0; pairs.len()],
        pairs,
        unmatched_objects: (k..n_objects).collect(),
        total_cost: 0.0,
    }
}

/// Focal classification loss against its logits.
pub fn check_classification(points: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = FocalParams::default();
    let mut rep = FdReport { points, ..Default::default() };
    for _ in 0..points {
        let (n, c, m) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(0..4));
        let logits = Array2::from_shape_simple_fn((n, c), || rng.random_range(-4.0..4.0));
        let gts: Vec<GtObject> = (0..m).map(|_| GtObject { bbox: random_box(&mut rng), class_id: rng.random_range(0..c) }).collect();
        let mt = random_match(&mut rng, n, m);
        let base = classification_loss(&logits, &mt, &gts, &f);
        for i in 0..n {
            for k in 0..c {
                let eval = |d: f64| {
                    let mut l = logits.clone();
                    l[[i, k]] += d;
                    classification_loss(&l, &mt, &gts, &f).value
                };
                let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                rep.add(base.grad[[i, k]], fd);
            }
        }
        // the scalar form as well
        let z = rng.random_range(-6.0..6.0);
        for t in [false, true] {
            let (_, g) = sigmoid_focal(z, t, &f);
            let fd = (sigmoid_focal(z + FD_STEP, t, &f).0 - sigmoid_focal(z - FD_STEP, t, &f).0) / (2.0 * FD_STEP);
            rep.add(g, fd);
        }
    }
    rep
}

fn perturbed(b: &BBox, k: usize, d: f64) -> Option<BBox> {
    let mut a = b.to_array();
    a[k] += d;
    BBox::new(a[0], a[1], a[2], a[3]).ok()
}

/// L1 and GIoU box losses against the predicted box coordinates, skipping
/// coordinates whose ±step neighbourhood crosses an L1 sign change or a GIoU
/// branch switch.
pub fn check_box_losses(points: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = FdReport { points, ..Default::default() };
    for _ in 0..points {
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..5));
        let preds: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let gts: Vec<GtObject> = (0..m).map(|_| GtObject { bbox: random_box(&mut rng), class_id: 0 }).collect();
        let mt = random_match(&mut rng, n, m);
        let base = box_losses(&preds, &mt, &gts);
        for i in 0..n {
            for k in 0..4 {
                let (Some(p), Some(q)) = (perturbed(&preds[i], k, FD_STEP), perturbed(&preds[i], k, -FD_STEP)) else {
                    rep.skipped += 1;
                    continue;
                };
                let (mut pp, mut pm) = (preds.clone(), preds.clone());
                pp[i] = p;
                pm[i] = q;
                let (lp, lm) = (box_losses(&pp, &mt, &gts), box_losses(&pm, &mt, &gts));
                if lp.pieces != base.pieces || lm.pieces != base.pieces {
                    rep.skipped += 1;
                    continue;
                }
                rep.add(base.grad_l1[i][k], (lp.l1 - lm.l1) / (2.0 * FD_STEP));
                rep.add(base.grad_giou[i][k], (lp.giou - lm.giou) / (2.0 * FD_STEP));
            }
        }
        // GIoU itself, both arguments
        let (a, b) = (random_box(&mut rng).to_array(), random_box(&mut rng).to_array());
        let (_, ga, gb, branch) = giou_with_grad(&a, &b);
        for k in 0..4 {
            for (which, g) in [(0, ga[k]), (1, gb[k])] {
                let eval = |d: f64| {
                    let (mut x, mut y) = (a, b);
                    if which == 0 { x[k] += d } else { y[k] += d }
                    giou_with_grad(&x, &y)
                };
                let (p, m) = (eval(FD_STEP), eval(-FD_STEP));
                if p.3 != branch || m.3 != branch {
                    rep.skipped += 1;
                    continue;
                }
                rep.add(g, (p.0 - m.0) / (2.0 * FD_STEP));
            }
        }
    }
    rep
}

/// Position loss against predicted and anchor centers, skipping coordinates
/// whose ±step neighbourhood changes the violator set.
pub fn check_position_loss(points: usize, seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = FdReport { points, ..Default::default() };
    for _ in 0..points {
        let n = rng.random_range(1..8);
        let eta = rng.random_range(0.05..0.4);
        let anchors: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let preds: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let base = position_loss(&anchors, &preds, eta);
        for i in 0..n {
            for k in 0..2 {
                for side in 0..2 {
                    let shift = |d: f64| {
                        let (mut a, mut p) = (anchors.clone(), preds.clone());
                        let target = if side == 0 { &mut p[i] } else { &mut a[i] };
                        *target = perturbed(target, k, d)?;
                        Some(position_loss(&a, &p, eta))
                    };
                    let (Some(lp), Some(lm)) = (shift(FD_STEP), shift(-FD_STEP)) else {
                        rep.skipped += 1;
                        continue;
                    };
                    if lp.violators != base.violators || lm.violators != base.violators {
                        rep.skipped += 1;
                        continue;
                    }
                    let g = if side == 0 { base.grad_pred[i][k] } else { base.grad_anchor[i][k] };
                    rep.add(g, (lp.value - lm.value) / (2.0 * FD_STEP));
                }
            }
        }
    }
    rep
}

/// A small random decoder problem.
pub struct DecoderPoint {
    pub features: SceneFeatures,
    pub gts: Vec<GtObject>,
    pub team: QueryTeam,
    pub params: ModelParams,
    pub partition: team_detr::ScalePartition,
    pub cfg: LossConfig,
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_classes: 2,
        feature_dim: 6,
        ffn_dim: 8,
        pe_temperature: 20.0,
        class_prior: 0.01,
    }
}

pub fn decoder_point(seed: u64) -> DecoderPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mc = tiny_model_config();
    let mut params = ModelParams::init(mc, seed).unwrap();
    params.visit_mut(|_, t| t.iter_mut().for_each(|v| *v += rng.random_range(-0.4..0.4)));
    let partition = build_partition(&[0.3]).unwrap();
    let team = init_team(&partition, &[0.5, 0.5], 6, seed).unwrap();
    let t = rng.random_range(2..6);
    let features = SceneFeatures::new(Array2::from_shape_simple_fn((t, mc.feature_dim), || rng.random_range(-1.0..1.0))).unwrap();
    // at most three objects, so neither group can be oversubscribed
    let gts = (0..rng.random_range(1..4))
        .map(|_| GtObject { bbox: random_box(&mut rng), class_id: rng.random_range(0..mc.n_classes) })
        .collect();
    let cfg = LossConfig { eta: rng.random_range(0.05..0.3), ..Default::default() };
    DecoderPoint { features, gts, team, params, partition, cfg }
}

/// Full decoder backward against central differences over every parameter.
/// Coordinates whose ±step evaluation lands on a different piece (matching,
/// L1 signs, GIoU branches, position-loss violators) are skipped.
pub fn check_decoder(points: usize, seed: u64) -> FdReport {
    let mut rep = FdReport { points, ..Default::default() };
    for p in 0..points {
        let pt = decoder_point(seed.wrapping_mul(1_000_003).wrapping_add(p as u64));
        let mask = build_attention_mask(pt.team.group_sizes()).unwrap();
        let run = |params: &ModelParams| loss_and_gradients(&pt.features, &pt.gts, &pt.team, params, &pt.partition, &mask, &pt.cfg).unwrap();
        let base = run(&pt.params);
        let analytic = base.grads.to_flat();
        let flat = pt.params.to_flat();
        let mut probe = pt.params.clone();
        let mut v = flat.clone();
        for i in 0..flat.len() {
            let mut eval = |d: f64| {
                v[i] = flat[i] + d;
                probe.set_flat(&v).unwrap();
                let r = run(&probe);
                v[i] = flat[i];
                r
            };
            let (lp, lm) = (eval(FD_STEP), eval(-FD_STEP));
            if lp.signature != base.signature || lm.signature != base.signature {
                rep.skipped += 1;
                continue;
            }
            rep.add(analytic[i], (lp.breakdown.total - lm.breakdown.total) / (2.0 * FD_STEP));
        }
    }
    rep
}
