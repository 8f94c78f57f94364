//! Run configuration and its JSON form.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{FocalParams, LossWeights};
use crate::matching::CostWeights;
use crate::partition::{build_partition, group_sizes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Cut points of the buckets the mixture weights refer to.
    pub scale_bounds: Vec<f64>,
    /// Probability of drawing an object from each bucket.
    pub mixture: Vec<f64>,
    /// Lower edge of the first bucket; scales below it are never drawn.
    pub min_scale: f64,
    /// Aspect ratios are log-uniform in `[1/max_aspect, max_aspect]`.
    pub max_aspect: f64,
    pub n_classes: usize,
    /// Standard deviation of the Gaussian noise added to every feature entry.
    pub noise: f64,
    /// Upper bound on background tokens per scene (uniform in `0..=max`).
    pub max_distractors: usize,
    pub feature_dim: usize,
    /// Width of the sinusoidal box code inside each token.
    pub box_code_dim: usize,
    /// Image-size factors are log-uniform in this range.
    pub size_factor_range: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 6,
            scale_bounds: vec![0.2, 0.4],
            mixture: vec![0.65, 0.2, 0.15],
            min_scale: 0.04,
            max_aspect: 2.0,
            n_classes: 8,
            noise: 0.05,
            max_distractors: 4,
            feature_dim: 64,
            box_code_dim: 32,
            size_factor_range: [0.5, 2.0],
        }
    }
}

impl SceneConfig {
    /// Token layout: raw box, box code, class one-hot, background flag.
    pub fn token_width(&self) -> usize {
        4 + self.box_code_dim + self.n_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        let p = build_partition(&self.scale_bounds)?;
        if self.mixture.len() != p.len() {
            return Err(Error::Config(format!(
                "{} mixture weights for {} scale buckets",
                self.mixture.len(),
                p.len()
            )));
        }
        if self.mixture.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (self.mixture.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("mixture weights must be non-negative and sum to 1".into()));
        }
        if !(self.min_scale > 0.0 && self.min_scale < p.ranges()[0].max) {
            return Err(Error::Config(format!("min_scale {} outside the first bucket", self.min_scale)));
        }
        if !(self.max_aspect >= 1.0 && self.max_aspect.is_finite()) {
            return Err(Error::Config("max_aspect must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if self.box_code_dim == 0 || !self.box_code_dim.is_multiple_of(8) {
            return Err(Error::Config("box_code_dim must be a positive multiple of 8".into()));
        }
        if self.token_width() > self.feature_dim {
            return Err(Error::Config(format!(
                "token layout needs {} entries but feature_dim is {}",
                self.token_width(),
                self.feature_dim
            )));
        }
        let [lo, hi] = self.size_factor_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config("size_factor_range must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }
}

/// How objects are assigned to query groups during matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One group holding every query.
    None,
    /// Relative scale times the scene's size factor, cut at `absolute_bounds`.
    Absolute,
    /// Relative scale cut at `partition_bounds`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum.
    Sgd,
    /// Adam with bias correction; `momentum` is beta1.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// The learning rate is multiplied by `decay_factor` from epoch
    /// `floor(decay_at * epochs)` on.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            epochs: 20,
            batch_size: 8,
            decay_at: 0.8,
            decay_factor: 0.1,
            clip_norm: 10.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_at) || !(self.decay_factor >= 0.0) {
            return Err(Error::Config("bad learning-rate decay".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let step = (self.decay_at * self.epochs as f64).floor() as usize;
        if epoch >= step {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub partition_bounds: Vec<f64>,
    pub proportions: Vec<f64>,
    pub num_queries: usize,
    pub grouping: Grouping,
    pub absolute_bounds: Vec<f64>,
    pub lambda: LossWeights,
    pub cost: CostWeights,
    pub focal: FocalParams,
    pub eta: f64,
    pub tau: usize,
    pub preference: bool,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            partition_bounds: vec![0.2, 0.4],
            proportions: vec![0.65, 0.2, 0.15],
            num_queries: 60,
            grouping: Grouping::Relative,
            absolute_bounds: vec![0.2, 0.4],
            lambda: LossWeights::default(),
            cost: CostWeights::default(),
            focal: FocalParams::default(),
            eta: 0.25,
            tau: 300,
            preference: true,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            scene: SceneConfig::default(),
            train_scenes: 2000,
            val_scenes: 500,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = build_partition(&self.partition_bounds)?;
        if self.proportions.len() != p.len() {
            return Err(Error::Config(format!(
                "{} proportions for {} scale ranges",
                self.proportions.len(),
                p.len()
            )));
        }
        group_sizes(&self.proportions, self.num_queries)?;
        if self.grouping == Grouping::Absolute {
            let a = build_partition(&self.absolute_bounds)?;
            if a.len() != p.len() {
                return Err(Error::Config("absolute_bounds must define as many groups as partition_bounds".into()));
            }
        }
        self.lambda.validate()?;
        self.cost.validate()?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.preference && self.tau == 0 {
            return Err(Error::Config("tau must be positive when preference extraction is on".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.scene.validate()?;
        if self.scene.n_classes != self.model.n_classes {
            return Err(Error::Config("scene and model disagree on the class count".into()));
        }
        if self.scene.feature_dim != self.model.feature_dim {
            return Err(Error::Config("scene and model disagree on the feature width".into()));
        }
        if self.val_scenes == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.lambda,
            cost: self.cost,
            focal: self.focal,
            eta: self.eta,
        }
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
