//! Minibatch training with momentum, per-epoch validation and preference extraction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{batch_loss_and_gradients, save_checkpoint, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{center_distance, relative_scale, BBox};
use crate::harness::config::{Grouping, OptimizerKind, RunConfig};
use crate::harness::metrics::{metrics_from_predictions, predict, Metrics};
use crate::harness::scene::{generate_dataset, prepare_scenes, scene_seeds, PreparedScene, Scene};
use crate::losses::{total_loss, LossBreakdown, LossParts};
use crate::mask::build_attention_mask;
use crate::partition::{build_partition, init_team, QueryTeam, ScalePartition};
use crate::preference::{extract_preferences, PreferenceStore};

pub const TRAIN_SPLIT: u64 = 0;
pub const VAL_SPLIT: u64 = 1;
const INIT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 1 << 32;

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "ap",
    "ap_bucket0",
    "ap_bucket1",
    "ap_bucket2",
    "scale_std_mean",
    "center_within_eta_frac",
    "loss_total",
    "loss_cls",
    "loss_l1",
    "loss_giou",
    "loss_pos",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Training loss averaged over scenes.
    pub loss: LossBreakdown,
    pub metrics: Metrics,
}

/// Anchors around one preference extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSnapshot {
    pub epoch: usize,
    pub before: Vec<BBox>,
    pub after: Vec<BBox>,
    pub mean_center_shift: f64,
    /// Share of queries whose anchor scale left their group's range.
    pub out_of_range_frac: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub anchor_updates: Vec<AnchorSnapshot>,
    pub final_metrics: Metrics,
    #[serde(skip)]
    pub params: Option<ModelParams>,
    #[serde(skip)]
    pub team: Option<QueryTeam>,
}

/// Seeds for model initialization and team placement.
fn init_seeds(seed: u64) -> (u64, u64) {
    let s = scene_seeds(seed, INIT_STREAM, 2);
    (s[0], s[1])
}

/// Scale partition the team is laid out on: a single range without grouping.
pub fn team_partition(cfg: &RunConfig) -> Result<(ScalePartition, Vec<f64>)> {
    match cfg.grouping {
        Grouping::None => Ok((build_partition(&[])?, vec![1.0])),
        _ => Ok((build_partition(&cfg.partition_bounds)?, cfg.proportions.clone())),
    }
}

pub fn build_team(cfg: &RunConfig) -> Result<QueryTeam> {
    let (p, props) = team_partition(cfg)?;
    init_team(&p, &props, cfg.num_queries, init_seeds(cfg.seed).1)
}

pub fn init_params(cfg: &RunConfig) -> Result<ModelParams> {
    ModelParams::init(cfg.model, init_seeds(cfg.seed).0)
}

pub fn generate_run_data(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    Ok((
        generate_dataset(&cfg.scene, cfg.seed, TRAIN_SPLIT, cfg.train_scenes)?,
        generate_dataset(&cfg.scene, cfg.seed, VAL_SPLIT, cfg.val_scenes)?,
    ))
}

pub fn prepare_for(cfg: &RunConfig, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    let relative = build_partition(&cfg.partition_bounds)?;
    let absolute = build_partition(&cfg.absolute_bounds)?;
    prepare_scenes(scenes, cfg.grouping, &relative, &absolute)
}

pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    let (tr, va) = generate_run_data(cfg)?;
    train_on(cfg, &tr, &va, out)
}

fn mean_breakdown(parts: LossParts, n: usize, cfg: &RunConfig) -> Result<LossBreakdown> {
    let s = 1.0 / n.max(1) as f64;
    total_loss(
        LossParts {
            cls: parts.cls * s,
            l1: parts.l1 * s,
            giou: parts.giou * s,
            pos: parts.pos * s,
        },
        &cfg.lambda,
    )
}

fn finite_parts(p: &LossParts) -> bool {
    [p.cls, p.l1, p.giou, p.pos].iter().all(|v| v.is_finite())
}

fn preference_update(
    team: &QueryTeam,
    preds: &[Vec<crate::matching::Prediction>],
    tau: usize,
    partition: &ScalePartition,
    epoch: usize,
) -> Result<(QueryTeam, AnchorSnapshot)> {
    let mut store = PreferenceStore::new(team.len(), tau);
    for scene in preds {
        for p in scene {
            store.record(p.query_index, p.bbox, p.confidence().0)?;
        }
    }
    let after = extract_preferences(&store, team)?;
    let before = team.anchors().to_vec();
    let shift = before.iter().zip(&after).map(|(a, b)| center_distance(a, b)).sum::<f64>() / before.len() as f64;
    let outside = after
        .iter()
        .enumerate()
        .filter(|(q, b)| !partition.ranges()[team.group_of(*q)].contains(relative_scale(b)))
        .count();
    let snap = AnchorSnapshot {
        epoch,
        mean_center_shift: shift,
        out_of_range_frac: outside as f64 / after.len() as f64,
        before,
        after: after.clone(),
    };
    Ok((team.with_anchors(after)?, snap))
}

pub fn train_on(cfg: &RunConfig, train_scenes: &[Scene], val_scenes: &[Scene], out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if val_scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_set = prepare_for(cfg, train_scenes)?;
    let val_set = prepare_for(cfg, val_scenes)?;
    let buckets = build_partition(&cfg.partition_bounds)?;
    let (team_part, _) = team_partition(cfg)?;
    let mut team = build_team(cfg)?;
    let mask = build_attention_mask(team.group_sizes())?;
    let mut params = init_params(cfg)?;
    let mut velocity = params.zeros_like();
    let mut second = params.zeros_like();
    let mut step = 0i32;
    let loss_cfg = cfg.loss_config();
    let opt = &cfg.optimizer;

    let mut epochs = Vec::with_capacity(opt.epochs);
    let mut anchor_updates = Vec::new();
    let mut final_metrics = None;
    for epoch in 0..opt.epochs {
        let lr = opt.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM + epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_parts = LossParts::default();
        for batch in order.chunks(opt.batch_size) {
            let scenes: Vec<_> = batch
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    (&s.features, s.objects.as_slice(), s.groups.as_slice())
                })
                .collect();
            let (parts, mut grads) = match batch_loss_and_gradients(&scenes, &team, &params, &mask, &loss_cfg) {
                Err(Error::NonFinite { layer, what }) => {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        detail: format!("decoder layer {layer}: non-finite {what}"),
                    })
                }
                r => r?,
            };
            if !finite_parts(&parts) || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    detail: format!("non-finite loss or gradient on batch starting at scene {}", batch[0]),
                });
            }
            epoch_parts += parts;
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.sum_squares().sqrt();
            if opt.clip_norm > 0.0 && norm > opt.clip_norm {
                grads.scale(opt.clip_norm / norm);
            }
            step += 1;
            match opt.kind {
                OptimizerKind::Sgd => {
                    velocity.scale(opt.momentum);
                    velocity.add_assign(&grads);
                    params.add_scaled(&velocity, -lr);
                }
                OptimizerKind::Adam => adam_step(&mut params, &mut velocity, &mut second, &grads, lr, opt.momentum, step),
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                detail: "parameters became non-finite".into(),
            });
        }
        let loss = mean_breakdown(epoch_parts, train_set.len(), cfg)?;
        let preds = predict(&params, &val_set, &team, &mask)?;
        let metrics = metrics_from_predictions(&preds, &val_set, &team, &buckets, cfg.model.n_classes, &cfg.cost, cfg.eta)?;
        log::info!(
            "epoch {}: loss {:.4} ap {:.4} scale_std {:.4} center_frac {:.3}",
            epoch + 1,
            loss.total,
            metrics.ap,
            metrics.scale_std_mean,
            metrics.center_within_eta_frac
        );
        // no boundary follows the last epoch
        if cfg.preference && epoch + 1 < opt.epochs {
            let (t, snap) = preference_update(&team, &preds, cfg.tau, &team_part, epoch + 1)?;
            team = t;
            anchor_updates.push(snap);
        }
        final_metrics = Some(metrics.clone());
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            loss,
            metrics,
        });
    }
    let final_metrics = match final_metrics {
        Some(m) => m,
        None => {
            let preds = predict(&params, &val_set, &team, &mask)?;
            metrics_from_predictions(&preds, &val_set, &team, &buckets, cfg.model.n_classes, &cfg.cost, cfg.eta)?
        }
    };
    let report = TrainReport {
        config_hash: cfg.hash(),
        epochs,
        anchor_updates,
        final_metrics,
        params: Some(params),
        team: Some(team),
    };
    if let Some(dir) = out {
        write_run_outputs(dir, cfg, &report)?;
    }
    Ok(report)
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_step(params: &mut ModelParams, m: &mut ModelParams, v: &mut ModelParams, g: &ModelParams, lr: f64, beta1: f64, t: i32) {
    let gs: Vec<Vec<f64>> = g.tensors().into_iter().map(|x| x.2.to_vec()).collect();
    m.visit_mut(|i, t| t.iter_mut().zip(&gs[i]).for_each(|(a, b)| *a = beta1 * *a + (1.0 - beta1) * b));
    v.visit_mut(|i, t| t.iter_mut().zip(&gs[i]).for_each(|(a, b)| *a = ADAM_BETA2 * *a + (1.0 - ADAM_BETA2) * b * b));
    let ms: Vec<Vec<f64>> = m.tensors().into_iter().map(|x| x.2.to_vec()).collect();
    let vs: Vec<Vec<f64>> = v.tensors().into_iter().map(|x| x.2.to_vec()).collect();
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    params.visit_mut(|i, t| {
        for ((p, a), b) in t.iter_mut().zip(&ms[i]).zip(&vs[i]) {
            *p -= lr * (a / c1) / ((b / c2).sqrt() + ADAM_EPS);
        }
    });
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for e in epochs {
        let m = &e.metrics;
        let bucket = |k: usize| fmt_opt(m.ap_buckets.get(k).copied().flatten());
        w.write_record([
            e.epoch.to_string(),
            m.ap.to_string(),
            bucket(0),
            bucket(1),
            bucket(2),
            m.scale_std_mean.to_string(),
            m.center_within_eta_frac.to_string(),
            e.loss.total.to_string(),
            e.loss.cls.to_string(),
            e.loss.l1.to_string(),
            e.loss.giou.to_string(),
            e.loss.pos.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `metrics.csv`, `report.json`, `anchors.json`, `config.json` and the
/// `checkpoint.{bin,json}` pair.
pub fn write_run_outputs(dir: &Path, cfg: &RunConfig, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &report.epochs)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("anchors.json"), serde_json::to_string(&report.anchor_updates)?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    if let (Some(p), Some(t)) = (&report.params, &report.team) {
        save_checkpoint(&dir.join("checkpoint"), p, t)?;
    }
    Ok(())
}
