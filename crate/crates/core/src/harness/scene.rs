//! Synthetic scenes: ground-truth boxes plus one feature token per object and
//! a few background tokens.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoder::{positional_encode, SceneFeatures};
use crate::error::{Error, Result};
use crate::geometry::{relative_scale, BBox};
use crate::harness::config::{Grouping, SceneConfig};
use crate::matching::GtObject;
use crate::partition::{build_partition, ScalePartition};

const BOX_CODE_TEMPERATURE: f64 = 10_000.0;

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<GtObject>,
    pub features: Vec<Vec<f64>>,
    pub seed: u64,
    /// Synthetic image-size multiplier; absent in files means 1.
    #[serde(default = "unit_size_factor")]
    pub size_factor: f64,
}

fn unit_size_factor() -> f64 {
    1.0
}

impl Scene {
    pub fn scene_features(&self) -> Result<SceneFeatures> {
        let t = self.features.len();
        let width = self.features.first().map_or(0, Vec::len);
        if self.features.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("feature rows differ in width".into()));
        }
        let flat: Vec<f64> = self.features.iter().flatten().copied().collect();
        let tokens = Array2::from_shape_vec((t, width), flat).map_err(|e| Error::Shape(e.to_string()))?;
        SceneFeatures::new(tokens)
    }

    /// Relative scale of each object times the size factor.
    pub fn absolute_scales(&self) -> Vec<f64> {
        self.objects.iter().map(|o| relative_scale(&o.bbox) * self.size_factor).collect()
    }
}

/// A scene ready for the decoder, with objects labelled by query group.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub features: SceneFeatures,
    pub objects: Vec<GtObject>,
    pub groups: Vec<usize>,
}

/// Group label of every object under `grouping`. Absolute scales above 1
/// fall in the last group.
pub fn object_groups(scene: &Scene, grouping: Grouping, relative: &ScalePartition, absolute: &ScalePartition) -> Vec<usize> {
    match grouping {
        Grouping::None => vec![0; scene.objects.len()],
        Grouping::Relative => scene.objects.iter().map(|o| relative.group_for_scale(relative_scale(&o.bbox))).collect(),
        Grouping::Absolute => scene.absolute_scales().into_iter().map(|s| absolute.group_for_scale(s.min(1.0))).collect(),
    }
}

pub fn prepare_scenes(
    scenes: &[Scene],
    grouping: Grouping,
    relative: &ScalePartition,
    absolute: &ScalePartition,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| {
            Ok(PreparedScene {
                features: s.scene_features()?,
                objects: s.objects.clone(),
                groups: object_groups(s, grouping, relative, absolute),
            })
        })
        .collect()
}

/// Writes the token for `bbox` into `row`: raw box, sinusoidal box code,
/// class one-hot (all zero for background) and the background flag.
fn encode_token(row: &mut [f64], bbox: &BBox, class: Option<usize>, cfg: &SceneConfig) {
    let coords = bbox.to_array();
    row[..4].copy_from_slice(&coords);
    let code = positional_encode(&coords, cfg.box_code_dim, BOX_CODE_TEMPERATURE).expect("validated width");
    row[4..4 + cfg.box_code_dim].copy_from_slice(&code);
    let class_at = 4 + cfg.box_code_dim;
    match class {
        Some(k) => row[class_at + k] = 1.0,
        None => row[class_at + cfg.n_classes] = 1.0,
    }
}

fn sample_box(rng: &mut ChaCha8Rng, s: f64, max_aspect: f64) -> BBox {
    let half_log = max_aspect.ln();
    let a = if half_log > 0.0 { rng.random_range(-half_log..=half_log).exp() } else { 1.0 };
    let (mut w, mut h) = (s * a.sqrt(), s / a.sqrt());
    if w > 1.0 {
        w = 1.0;
        h = s * s;
    }
    if h > 1.0 {
        h = 1.0;
        w = s * s;
    }
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BBox::clamped([cx, cy, w, h], f64::MIN_POSITIVE)
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let buckets = build_partition(&cfg.scale_bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = cfg.mixture.len() - 1;
        for (i, w) in cfg.mixture.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let r = buckets.ranges()[k];
        let lo = if k == 0 { cfg.min_scale } else { r.min };
        // (lo, max]
        let s = r.max - rng.random::<f64>() * (r.max - lo);
        let bbox = sample_box(&mut rng, s, cfg.max_aspect);
        objects.push(GtObject {
            bbox,
            class_id: rng.random_range(0..cfg.n_classes),
        });
    }
    let n_bg = rng.random_range(0..=cfg.max_distractors);
    let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(n_obj + n_bg);
    for o in &objects {
        let mut row = vec![0.0; cfg.feature_dim];
        encode_token(&mut row, &o.bbox, Some(o.class_id), cfg);
        tokens.push(row);
    }
    for _ in 0..n_bg {
        let s = rng.random_range(cfg.min_scale..=1.0);
        let bbox = sample_box(&mut rng, s, cfg.max_aspect);
        let mut row = vec![0.0; cfg.feature_dim];
        encode_token(&mut row, &bbox, None, cfg);
        tokens.push(row);
    }
    tokens.shuffle(&mut rng);
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in tokens.iter_mut().flatten() {
            *v += normal.sample(&mut rng);
        }
    }
    let [lo, hi] = cfg.size_factor_range;
    let size_factor = if hi > lo { rng.random_range(lo.ln()..=hi.ln()).exp() } else { lo };
    Ok(Scene {
        objects,
        features: tokens,
        seed,
        size_factor,
    })
}

/// Per-scene seeds for a split: stream `split` of a ChaCha8 generator keyed by `seed`.
pub fn scene_seeds(seed: u64, split: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn generate_dataset(cfg: &SceneConfig, seed: u64, split: u64, n: usize) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    scene_seeds(seed, split, n)
        .into_par_iter()
        .map(|s| generate_scene(cfg, s))
        .collect()
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
