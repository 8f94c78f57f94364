//! Detection cost matrices, exact rectangular assignment, and group-wise matching.
//!
//! [`team_match`] buckets ground-truth objects by scale group and solves one
//! assignment per group over that group's queries only. Because the buckets
//! are disjoint the joined result is the optimum of a single global problem in
//! which every cross-group pair is forbidden.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, l1_box_distance, BBox};
use crate::partition::{assign_object_group, QueryTeam, ScalePartition};

/// Largest `min(rows, cols)` accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX_SIDE: usize = 8;
const BRUTE_FORCE_MAX_LEAVES: u128 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Independent per-class probabilities.
    pub class_probs: Vec<f64>,
}

impl Prediction {
    /// Maximum class probability and its class.
    pub fn confidence(&self) -> (f64, usize) {
        self.class_probs
            .iter()
            .copied()
            .enumerate()
            .fold((f64::NEG_INFINITY, 0), |(bp, bc), (c, p)| if p > bp { (p, c) } else { (bp, bc) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("class", self.class), ("l1", self.l1), ("giou", self.giou)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidWeights(format!("cost weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Dense cost matrix whose rows and columns carry query / object identities.
/// [`CostMatrix::FORBIDDEN`] marks pairs that may never be assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
    row_ids: Vec<usize>,
    col_ids: Vec<usize>,
}

impl CostMatrix {
    pub const FORBIDDEN: f64 = f64::INFINITY;

    /// Row and column identities default to `0..rows` / `0..cols`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        let costs: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(r, c, costs, (0..r).collect(), (0..c).collect())
    }

    pub fn new(
        rows: usize,
        cols: usize,
        costs: Vec<f64>,
        row_ids: Vec<usize>,
        col_ids: Vec<usize>,
    ) -> Result<Self> {
        if costs.len() != rows * cols || row_ids.len() != rows || col_ids.len() != cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix with {} entries, {} row ids, {} col ids",
                costs.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if let Some(v) = costs.iter().find(|v| v.is_nan() || **v == f64::NEG_INFINITY) {
            return Err(Error::Shape(format!("invalid cost entry {v}")));
        }
        Ok(Self {
            rows,
            cols,
            costs,
            row_ids,
            col_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.cols + j]
    }

    pub fn is_forbidden(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == Self::FORBIDDEN
    }

    pub fn forbid(&mut self, i: usize, j: usize) {
        self.costs[i * self.cols + j] = Self::FORBIDDEN;
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[usize] {
        &self.col_ids
    }

    fn transposed(&self) -> Self {
        let mut costs = vec![0.0; self.costs.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                costs[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            costs,
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query_index, object_index)`, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Cost of each pair, parallel to `pairs`.
    pub pair_costs: Vec<f64>,
    pub unmatched_objects: Vec<usize>,
    /// Sum of `pair_costs` taken in pair order.
    pub total_cost: f64,
}

impl MatchResult {
    fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            pair_costs: Vec::new(),
            unmatched_objects: Vec::new(),
            total_cost: 0.0,
        }
    }

    /// Sorts `(pair, cost)` entries and sums the costs in that order, so the
    /// total does not depend on how the pairs were found.
    fn from_costed(mut costed: Vec<((usize, usize), f64)>, mut unmatched_objects: Vec<usize>) -> Self {
        costed.sort_unstable_by_key(|e| e.0);
        unmatched_objects.sort_unstable();
        let total_cost = costed.iter().map(|e| e.1).sum();
        Self {
            pairs: costed.iter().map(|e| e.0).collect(),
            pair_costs: costed.iter().map(|e| e.1).collect(),
            unmatched_objects,
            total_cost,
        }
    }

    /// Object matched to each query, if any.
    pub fn object_for_queries(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for &(q, o) in &self.pairs {
            out[q] = Some(o);
        }
        out
    }

    fn from_row_assignment(c: &CostMatrix, row_to_col: &[Option<usize>]) -> Self {
        let mut costed = Vec::new();
        let mut col_used = vec![false; c.cols];
        for (i, j) in row_to_col.iter().enumerate() {
            if let Some(j) = *j {
                costed.push(((c.row_ids[i], c.col_ids[j]), c.get(i, j)));
                col_used[j] = true;
            }
        }
        let unmatched = (0..c.cols).filter(|&j| !col_used[j]).map(|j| c.col_ids[j]).collect();
        Self::from_costed(costed, unmatched)
    }

    /// Same as [`MatchResult::from_row_assignment`] but for a transposed problem
    /// whose rows are objects.
    fn from_col_assignment(t: &CostMatrix, obj_to_query: &[Option<usize>]) -> Self {
        let mut costed = Vec::new();
        let mut unmatched = Vec::new();
        for (i, q) in obj_to_query.iter().enumerate() {
            match q {
                Some(q) => costed.push(((t.col_ids[*q], t.row_ids[i]), t.get(i, *q))),
                None => unmatched.push(t.row_ids[i]),
            }
        }
        Self::from_costed(costed, unmatched)
    }
}

/// DETR-style matching cost: `w_cls·(1 − p[class]) + w_l1·L1 + w_giou·(1 − GIoU)`.
pub fn cost_matrix(preds: &[Prediction], gts: &[GtObject], weights: &CostWeights) -> Result<CostMatrix> {
    let rows: Vec<usize> = (0..preds.len()).collect();
    let cols: Vec<usize> = (0..gts.len()).collect();
    cost_submatrix(preds, gts, &rows, &cols, weights)
}

/// Cost matrix restricted to the given prediction positions and object indices.
pub fn cost_submatrix(
    preds: &[Prediction],
    gts: &[GtObject],
    rows: &[usize],
    cols: &[usize],
    weights: &CostWeights,
) -> Result<CostMatrix> {
    weights.validate()?;
    let mut costs = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        let p = &preds[r];
        for &c in cols {
            let g = &gts[c];
            let prob = *p.class_probs.get(g.class_id).ok_or_else(|| {
                Error::Shape(format!(
                    "class {} outside {} predicted classes",
                    g.class_id,
                    p.class_probs.len()
                ))
            })?;
            costs.push(
                weights.class * (1.0 - prob)
                    + weights.l1 * l1_box_distance(&p.bbox, &g.bbox)
                    + weights.giou * (1.0 - giou(&p.bbox, &g.bbox)),
            );
        }
    }
    let row_ids = rows.iter().map(|&r| preds[r].query_index).collect();
    CostMatrix::new(rows.len(), cols.len(), costs, row_ids, cols.to_vec())
}

/// Minimum-cost assignment of `min(rows, cols)` pairs avoiding forbidden entries.
pub fn hungarian(c: &CostMatrix) -> Result<MatchResult> {
    if c.rows == 0 || c.cols == 0 {
        let mut m = MatchResult::empty();
        m.unmatched_objects = c.col_ids.clone();
        m.unmatched_objects.sort_unstable();
        return Ok(m);
    }
    if c.rows <= c.cols {
        let assign = shortest_augmenting_path(c)?;
        Ok(MatchResult::from_row_assignment(c, &assign))
    } else {
        let t = c.transposed();
        let assign = shortest_augmenting_path(&t)?;
        Ok(MatchResult::from_col_assignment(&t, &assign))
    }
}

/// Shortest augmenting path with dual potentials; requires `rows <= cols`.
/// Surplus columns behave as zero-cost dummy rows would.
fn shortest_augmenting_path(c: &CostMatrix) -> Result<Vec<Option<usize>>> {
    let (n, m) = (c.rows, c.cols);
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j]: row (1-based) assigned to column j; p[0] holds the row being inserted
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = usize::MAX;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cost = c.get(i0 - 1, j - 1);
                if cost != CostMatrix::FORBIDDEN {
                    let cur = cost - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == usize::MAX {
                return Err(Error::Infeasible(format!(
                    "row {} cannot be assigned without a forbidden pair",
                    c.row_ids[i - 1]
                )));
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

    let mut assign = vec![None; n];
    for j in 1..=m {
        if p[j] > 0 {
            assign[p[j] - 1] = Some(j - 1);
        }
    }
    Ok(assign)
}

/// Exhaustive search over all injective assignments of the smaller side.
pub fn brute_force_match(c: &CostMatrix) -> Result<MatchResult> {
    let small = c.rows.min(c.cols);
    if small > BRUTE_FORCE_MAX_SIDE {
        return Err(Error::EnumerationTooLarge(format!(
            "min side {small} exceeds {BRUTE_FORCE_MAX_SIDE}"
        )));
    }
    let large = c.rows.max(c.cols) as u128;
    let leaves: u128 = (0..small as u128).map(|k| large - k).product();
    if leaves > BRUTE_FORCE_MAX_LEAVES {
        return Err(Error::EnumerationTooLarge(format!("{leaves} assignments to enumerate")));
    }
    if small == 0 {
        return hungarian(c);
    }
    let t;
    let (m, transposed) = if c.rows <= c.cols {
        (c, false)
    } else {
        t = c.transposed();
        (&t, true)
    };

    struct Search<'a> {
        m: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self, row: usize, acc: f64) {
            if row == self.m.rows {
                if self.best.as_ref().is_none_or(|(b, _)| acc < *b) {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            }
            for j in 0..self.m.cols {
                if self.used[j] || self.m.is_forbidden(row, j) {
                    continue;
                }
                self.used[j] = true;
                self.current.push(j);
                self.go(row + 1, acc + self.m.get(row, j));
                self.current.pop();
                self.used[j] = false;
            }
        }
    }
    let mut s = Search {
        m,
        used: vec![false; m.cols],
        current: Vec::with_capacity(m.rows),
        best: None,
    };
    s.go(0, 0.0);
    let (_, best) = s
        .best
        .ok_or_else(|| Error::Infeasible("every assignment uses a forbidden pair".into()))?;
    let assign: Vec<Option<usize>> = best.into_iter().map(Some).collect();
    Ok(if transposed {
        MatchResult::from_col_assignment(m, &assign)
    } else {
        MatchResult::from_row_assignment(m, &assign)
    })
}

/// Group-wise matching with objects bucketed by relative scale.
pub fn team_match(
    team: &QueryTeam,
    preds: &[Prediction],
    gts: &[GtObject],
    p: &ScalePartition,
    weights: &CostWeights,
) -> Result<MatchResult> {
    if p.len() != team.num_groups() {
        return Err(Error::Shape(format!(
            "partition has {} ranges but team has {} groups",
            p.len(),
            team.num_groups()
        )));
    }
    let groups: Vec<usize> = gts.iter().map(|g| assign_object_group(p, &g.bbox)).collect();
    team_match_with_groups(team, preds, gts, &groups, weights)
}

/// Group-wise matching for an arbitrary object-to-group labelling.
pub fn team_match_with_groups(
    team: &QueryTeam,
    preds: &[Prediction],
    gts: &[GtObject],
    object_groups: &[usize],
    weights: &CostWeights,
) -> Result<MatchResult> {
    if preds.len() != team.len() {
        return Err(Error::Shape(format!(
            "{} predictions for a team of {}",
            preds.len(),
            team.len()
        )));
    }
    if object_groups.len() != gts.len() {
        return Err(Error::Shape("one group label per object required".into()));
    }
    if let Some(g) = object_groups.iter().find(|&&g| g >= team.num_groups()) {
        return Err(Error::Shape(format!("object group {g} outside team")));
    }
    let mut costed = Vec::new();
    let mut unmatched = Vec::new();
    for k in 0..team.num_groups() {
        let cols: Vec<usize> = (0..gts.len()).filter(|&j| object_groups[j] == k).collect();
        if cols.is_empty() {
            continue;
        }
        let rows: Vec<usize> = team.group_range(k).collect();
        if cols.len() > rows.len() {
            log::warn!(
                "group {k}: {} objects exceed {} queries; surplus left unmatched",
                cols.len(),
                rows.len()
            );
        }
        let sub = cost_submatrix(preds, gts, &rows, &cols, weights)?;
        let m = hungarian(&sub)?;
        costed.extend(m.pairs.into_iter().zip(m.pair_costs));
        unmatched.extend(m.unmatched_objects);
    }
    Ok(MatchResult::from_costed(costed, unmatched))
}

/// The single global problem that [`team_match_with_groups`] decomposes:
/// full cost matrix with every cross-group pair forbidden.
pub fn masked_global_match(
    team: &QueryTeam,
    preds: &[Prediction],
    gts: &[GtObject],
    object_groups: &[usize],
    weights: &CostWeights,
) -> Result<MatchResult> {
    let mut c = cost_matrix(preds, gts, weights)?;
    for i in 0..c.rows() {
        for (j, &g) in object_groups.iter().enumerate() {
            if team.group_of(i) != g {
                c.forbid(i, j);
            }
        }
    }
    hungarian(&c)
}
