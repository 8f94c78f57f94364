//! Decoder parameters, their flat views, and checkpoint files.
//!
//! A checkpoint is a pair of files sharing a stem:
//!
//! - `<stem>.bin`: every tensor's elements as little-endian IEEE-754 `f64`,
//!   row-major, tensors concatenated in manifest order, no header or padding.
//! - `<stem>.json`: the manifest. `tensors[i].offset` is the element (not byte)
//!   offset of tensor `i` in the `.bin` file; `tensors[i].shape` its shape.
//!   The team anchors are stored as the final tensor `team.anchors` with shape
//!   `[N, 4]`, and `group_sizes` records the query blocks.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::partition::QueryTeam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width `D`; must be a positive multiple of 8.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub ffn_dim: usize,
    pub pe_temperature: f64,
    /// Prior probability used to initialize the class-head bias.
    pub class_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_classes: 8,
            feature_dim: 64,
            ffn_dim: 64,
            pe_temperature: 10_000.0,
            class_prior: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(8) {
            return Err(Error::Config(format!("d_model {} is not a positive multiple of 8", self.d_model)));
        }
        if self.n_layers == 0 || self.n_classes == 0 || self.feature_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer, class, feature and ffn sizes must be positive".into()));
        }
        if !(self.pe_temperature > 1.0) {
            return Err(Error::Config(format!("pe_temperature {} must exceed 1", self.pe_temperature)));
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return Err(Error::Config(format!("class_prior {} outside (0, 1)", self.class_prior)));
        }
        Ok(())
    }
}

/// Affine map `y = x·w + b` with `w` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    fn xavier(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((input, output), || rng.random_range(-a..a)),
            b: Array1::zeros(output),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub sa_q: Linear,
    pub sa_k: Linear,
    pub sa_v: Linear,
    pub ca_q: Linear,
    pub ca_k: Linear,
    pub ca_v: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    /// Emits `(Δcx, Δcy, Δw, Δh)` in logit space.
    pub box_head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Two-layer MLP applied to the sinusoidal anchor encoding.
    pub embed1: Linear,
    pub embed2: Linear,
    pub layers: Vec<LayerParams>,
    /// Shared across layers.
    pub class_head: Linear,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, h) = (config.d_model, config.feature_dim, config.ffn_dim);
        let embed1 = Linear::xavier(d, d, &mut rng);
        let embed2 = Linear::xavier(d, d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                sa_q: Linear::xavier(d, d, &mut rng),
                sa_k: Linear::xavier(d, d, &mut rng),
                sa_v: Linear::xavier(d, d, &mut rng),
                ca_q: Linear::xavier(d, d, &mut rng),
                ca_k: Linear::xavier(f, d, &mut rng),
                ca_v: Linear::xavier(f, d, &mut rng),
                ffn1: Linear::xavier(d, h, &mut rng),
                ffn2: Linear::xavier(h, d, &mut rng),
                box_head: Linear::zeros(d, 4),
            })
            .collect();
        let mut class_head = Linear::xavier(d, config.n_classes, &mut rng);
        let prior = config.class_prior;
        class_head.b.fill(-((1.0 - prior) / prior).ln());
        Ok(Self {
            config,
            embed1,
            embed2,
            layers,
            class_head,
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, t| t.fill(0.0));
        z
    }

    fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out = vec![("embed1".to_string(), &self.embed1), ("embed2".to_string(), &self.embed2)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, lin) in [
                ("sa_q", &l.sa_q),
                ("sa_k", &l.sa_k),
                ("sa_v", &l.sa_v),
                ("ca_q", &l.ca_q),
                ("ca_k", &l.ca_k),
                ("ca_v", &l.ca_v),
                ("ffn1", &l.ffn1),
                ("ffn2", &l.ffn2),
                ("box_head", &l.box_head),
            ] {
                out.push((format!("layers.{i}.{name}"), lin));
            }
        }
        out.push(("class_head".to_string(), &self.class_head));
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = vec![&mut self.embed1, &mut self.embed2];
        for l in &mut self.layers {
            out.extend([
                &mut l.sa_q,
                &mut l.sa_k,
                &mut l.sa_v,
                &mut l.ca_q,
                &mut l.ca_k,
                &mut l.ca_v,
                &mut l.ffn1,
                &mut l.ffn2,
                &mut l.box_head,
            ]);
        }
        out.push(&mut self.class_head);
        out
    }

    /// Named tensors in canonical order with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, l) in self.linears() {
            out.push((format!("{name}.w"), l.w.shape().to_vec(), l.w.as_slice().expect("standard layout")));
            out.push((format!("{name}.b"), l.b.shape().to_vec(), l.b.as_slice().expect("standard layout")));
        }
        out
    }

    /// Visits every tensor mutably in canonical order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut idx = 0;
        for l in self.linears_mut() {
            f(idx, l.w.as_slice_mut().expect("standard layout"));
            f(idx + 1, l.b.as_slice_mut().expect("standard layout"));
            idx += 2;
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.2.to_vec()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        self.visit_mut(|_, t| {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        });
        Ok(())
    }

    /// `self += other`, tensor by tensor in canonical order.
    pub fn add_assign(&mut self, other: &Self) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        self.visit_mut(|i, t| {
            for (a, b) in t.iter_mut().zip(&src[i]) {
                *a += b;
            }
        });
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        self.visit_mut(|i, t| {
            for (a, b) in t.iter_mut().zip(&src[i]) {
                *a += s * b;
            }
        });
    }

    pub fn scale(&mut self, s: f64) {
        self.visit_mut(|_, t| t.iter_mut().for_each(|v| *v *= s));
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.2.iter()).map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    group_sizes: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "team-detr-checkpoint";
const ANCHORS: &str = "team.anchors";

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(stem: &Path, params: &ModelParams, team: &QueryTeam) -> Result<()> {
    let mut tensors = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    let anchors: Vec<f64> = team.anchors().iter().flat_map(|a| a.to_array()).collect();
    let mut all = params.tensors();
    all.push((ANCHORS.to_string(), vec![team.len(), 4], anchors.as_slice()));
    for (name, shape, data) in all {
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += data.len();
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: "f64-le".into(),
        config: params.config,
        group_sizes: team.group_sizes().to_vec(),
        tensors,
    };
    fs::write(with_ext(stem, "bin"), bytes)?;
    fs::write(with_ext(stem, "json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(ModelParams, QueryTeam)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(with_ext(stem, "json"))?)?;
    if manifest.format != FORMAT || manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    let bytes = fs::read(with_ext(stem, "bin"))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut params = ModelParams::init(manifest.config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .chain(std::iter::once((ANCHORS.to_string(), vec![manifest.group_sizes.iter().sum(), 4])))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, manifest lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut slices = Vec::new();
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} runs past the payload")))?;
        slices.push(data);
    }
    params.visit_mut(|i, t| t.copy_from_slice(slices[i]));
    let anchors = slices
        .last()
        .expect("anchors tensor")
        .chunks_exact(4)
        .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
        .collect::<Result<Vec<_>>>()?;
    let team = QueryTeam::from_parts(anchors, manifest.group_sizes)?;
    Ok((params, team))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_partition, init_team};

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            d_model: 16,
            feature_dim: 12,
            ffn_dim: 8,
            n_classes: 3,
            ..Default::default()
        };
        let params = ModelParams::init(cfg, 3).unwrap();
        let team = init_team(&build_partition(&[0.3]).unwrap(), &[0.5, 0.5], 6, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        save_checkpoint(&stem, &params, &team).unwrap();
        let bytes = fs::read(dir.path().join("model.bin")).unwrap();
        assert_eq!(bytes.len(), 8 * (params.num_params() + 24));
        assert_eq!(&bytes[..8], &params.embed1.w[[0, 0]].to_le_bytes());
        let (p2, t2) = load_checkpoint(&stem).unwrap();
        assert_eq!(p2, params);
        assert_eq!(t2, team);
    }

    #[test]
    fn flat_round_trip_and_arithmetic() {
        let cfg = ModelConfig { d_model: 8, feature_dim: 4, ffn_dim: 4, n_classes: 2, ..Default::default() };
        let mut p = ModelParams::init(cfg, 1).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.num_params());
        let mut q = p.zeros_like();
        assert_eq!(q.sum_squares(), 0.0);
        q.set_flat(&flat).unwrap();
        assert_eq!(q, p);
        p.add_assign(&q);
        p.scale(0.5);
        assert_eq!(p.to_flat(), flat);
        assert!(q.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn rejects_bad_width() {
        let cfg = ModelConfig { d_model: 12, ..Default::default() };
        assert!(ModelParams::init(cfg, 0).is_err());
    }
}
