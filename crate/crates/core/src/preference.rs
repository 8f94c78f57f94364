//! Per-query preference extraction from high-confidence predictions.
//!
//! During a validation pass every query's predictions are offered to a bounded
//! store that keeps the `tau` most confident ones. At the epoch boundary each
//! query's anchor is replaced by the coordinate-wise mean of what it kept.
//! Only predictions enter the store; ground truth never does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::partition::QueryTeam;

/// Smallest anchor side after extraction.
pub const MIN_ANCHOR_SIDE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceStore {
    capacity: usize,
    /// Per query, sorted by confidence descending; equal confidences keep arrival order.
    entries: Vec<Vec<ScoredBox>>,
}

impl PreferenceStore {
    pub fn new(n_queries: usize, tau: usize) -> Self {
        Self {
            capacity: tau,
            entries: vec![Vec::new(); n_queries],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_queries(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self, query: usize) -> &[ScoredBox] {
        &self.entries[query]
    }

    pub fn record(&mut self, query: usize, bbox: BBox, confidence: f64) -> Result<()> {
        let len = self.entries.len();
        let slot = self
            .entries
            .get_mut(query)
            .ok_or(Error::UnknownQuery { index: query, len })?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Config(format!("confidence {confidence} outside [0, 1]")));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if slot.len() == self.capacity && slot.last().is_some_and(|w| w.confidence >= confidence) {
            return Ok(());
        }
        let at = slot.partition_point(|e| e.confidence >= confidence);
        slot.insert(at, ScoredBox { bbox, confidence });
        slot.truncate(self.capacity);
        Ok(())
    }

    /// Un-clamped mean of each query's retained boxes.
    pub fn means(&self) -> Vec<Option<[f64; 4]>> {
        self.entries
            .iter()
            .map(|e| {
                if e.is_empty() {
                    return None;
                }
                let mut acc = [0.0; 4];
                for s in e {
                    for (a, v) in acc.iter_mut().zip(s.bbox.to_array()) {
                        *a += v;
                    }
                }
                let n = e.len() as f64;
                Some(acc.map(|a| a / n))
            })
            .collect()
    }
}

/// New anchors: the mean retained box per query, or the old anchor for queries
/// that kept nothing. Group membership is untouched.
pub fn extract_preferences(store: &PreferenceStore, team: &QueryTeam) -> Result<Vec<BBox>> {
    if store.num_queries() != team.len() {
        return Err(Error::Shape(format!(
            "store tracks {} queries, team has {}",
            store.num_queries(),
            team.len()
        )));
    }
    Ok(store
        .means()
        .into_iter()
        .zip(team.anchors())
        .map(|(mean, old)| match mean {
            Some(m) => BBox::clamped(m, MIN_ANCHOR_SIDE),
            None => *old,
        })
        .collect())
}
