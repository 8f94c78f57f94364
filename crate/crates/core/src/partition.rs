//! Scale-range partitions, object-to-group assignment and query-team initialization.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_scale, BBox};

const PROPORTION_TOLERANCE: f64 = 1e-9;

/// Half-open scale interval `(min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub min: f64,
    pub max: f64,
}

impl ScaleRange {
    pub fn contains(&self, s: f64) -> bool {
        s > self.min && s <= self.max
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// Ordered ranges that tile `(0, 1]` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePartition {
    ranges: Vec<ScaleRange>,
}

impl ScalePartition {
    /// Interior cut points, strictly increasing inside `(0, 1)`. An empty list
    /// yields the single range `(0, 1]`.
    pub fn new(bounds: &[f64]) -> Result<Self> {
        for (i, &b) in bounds.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidPartition(format!(
                    "bound {b} at position {i} is outside (0, 1)"
                )));
            }
            if i > 0 && b <= bounds[i - 1] {
                return Err(Error::InvalidPartition(format!(
                    "bound {b} at position {i} does not exceed {}",
                    bounds[i - 1]
                )));
            }
        }
        let mut edges = Vec::with_capacity(bounds.len() + 2);
        edges.push(0.0);
        edges.extend_from_slice(bounds);
        edges.push(1.0);
        let ranges = edges
            .windows(2)
            .map(|w| ScaleRange { min: w[0], max: w[1] })
            .collect();
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[ScaleRange] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Interior bounds (inverse of [`ScalePartition::new`]).
    pub fn bounds(&self) -> Vec<f64> {
        self.ranges[1..].iter().map(|r| r.min).collect()
    }

    /// Group index for a scale in `(0, 1]`. Boundaries go to the lower range.
    pub fn group_for_scale(&self, s: f64) -> usize {
        let k = self.ranges[1..].partition_point(|r| r.min < s);
        k.min(self.ranges.len() - 1)
    }
}

pub fn build_partition(bounds: &[f64]) -> Result<ScalePartition> {
    ScalePartition::new(bounds)
}

pub fn assign_object_group(p: &ScalePartition, b: &BBox) -> usize {
    p.group_for_scale(relative_scale(b))
}

/// `N` anchors split into contiguous per-group index blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTeam {
    anchors: Vec<BBox>,
    group_sizes: Vec<usize>,
    group_of: Vec<usize>,
}

impl QueryTeam {
    pub fn from_parts(anchors: Vec<BBox>, group_sizes: Vec<usize>) -> Result<Self> {
        let total: usize = group_sizes.iter().sum();
        if total != anchors.len() {
            return Err(Error::Shape(format!(
                "group sizes sum to {total} but {} anchors given",
                anchors.len()
            )));
        }
        if group_sizes.is_empty() || group_sizes.contains(&0) {
            return Err(Error::InvalidProportions(format!(
                "every group needs at least one query, got sizes {group_sizes:?}"
            )));
        }
        let group_of = group_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
            .collect();
        Ok(Self {
            anchors,
            group_sizes,
            group_of,
        })
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn group_of(&self, query: usize) -> usize {
        self.group_of[query]
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Index block of group `k`.
    pub fn group_range(&self, k: usize) -> Range<usize> {
        let start: usize = self.group_sizes[..k].iter().sum();
        start..start + self.group_sizes[k]
    }

    /// Replaces all anchors; group membership is unchanged.
    pub fn with_anchors(&self, anchors: Vec<BBox>) -> Result<Self> {
        if anchors.len() != self.anchors.len() {
            return Err(Error::Shape(format!(
                "expected {} anchors, got {}",
                self.anchors.len(),
                anchors.len()
            )));
        }
        Ok(Self {
            anchors,
            ..self.clone()
        })
    }
}

/// Largest-remainder split of `n_total` by `proportions`; ties go to the lower index.
pub fn group_sizes(proportions: &[f64], n_total: usize) -> Result<Vec<usize>> {
    if proportions.is_empty() {
        return Err(Error::InvalidProportions("no proportions given".into()));
    }
    if let Some(p) = proportions.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidProportions(format!("negative or non-finite proportion {p}")));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > PROPORTION_TOLERANCE {
        return Err(Error::InvalidProportions(format!("proportions sum to {sum}, not 1")));
    }
    if n_total < proportions.len() {
        return Err(Error::TooFewQueries {
            queries: n_total,
            groups: proportions.len(),
        });
    }
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n_total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    let frac = |k: usize| (quotas[k] - sizes[k] as f64).max(0.0);
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &k in order.iter().take(n_total.saturating_sub(assigned)) {
        sizes[k] += 1;
    }
    if let Some(k) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::InvalidProportions(format!(
            "group {k} receives no queries out of {n_total}"
        )));
    }
    Ok(sizes)
}

/// Creates the grouped team: centers uniform on the unit square, group-`k`
/// anchors sized to the midpoint of `S_k`.
pub fn init_team(
    p: &ScalePartition,
    proportions: &[f64],
    n_total: usize,
    seed: u64,
) -> Result<QueryTeam> {
    if proportions.len() != p.len() {
        return Err(Error::InvalidProportions(format!(
            "{} proportions for {} scale ranges",
            proportions.len(),
            p.len()
        )));
    }
    let sizes = group_sizes(proportions, n_total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchors = Vec::with_capacity(n_total);
    for (range, &n) in p.ranges().iter().zip(&sizes) {
        let side = range.midpoint();
        for _ in 0..n {
            let cx = rng.random::<f64>();
            let cy = rng.random::<f64>();
            anchors.push(BBox::new(cx, cy, side, side)?);
        }
    }
    QueryTeam::from_parts(anchors, sizes)
}
