//! Normalized center-format boxes and the overlap/distance measures built on them.
//!
//! Every box lives in the unit square: `cx, cy ∈ [0, 1]`, `w, h ∈ (0, 1]`.
//! Corner format only appears transiently inside the overlap computations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values outside the unit interval by at most this much are clamped rather than rejected.
pub const CLAMP_SLACK: f64 = 1e-9;

/// A box in normalized image coordinates, stored as `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

fn clamp_unit(name: &str, v: f64, lo: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::InvalidBox(format!("{name} = {v} is not finite")));
    }
    if v < lo - CLAMP_SLACK || v > 1.0 + CLAMP_SLACK {
        return Err(Error::InvalidBox(format!("{name} = {v} outside [{lo}, 1]")));
    }
    Ok(v.clamp(lo, 1.0))
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let cx = clamp_unit("cx", cx, 0.0)?;
        let cy = clamp_unit("cy", cy, 0.0)?;
        let w = clamp_unit("w", w, 0.0)?;
        let h = clamp_unit("h", h, 0.0)?;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("degenerate size w = {w}, h = {h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Builds a box from arbitrary coordinates by clamping into the valid range.
    /// Sizes are floored at `min_size`.
    pub fn clamped(coords: [f64; 4], min_size: f64) -> Self {
        let fix = |v: f64, lo: f64| if v.is_finite() { v.clamp(lo, 1.0) } else { lo };
        Self {
            cx: fix(coords[0], 0.0),
            cy: fix(coords[1], 0.0),
            w: fix(coords[2], min_size),
            h: fix(coords[3], min_size),
        }
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner format `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Geometric-mean side length `√(w·h)`, in `(0, 1]` for valid boxes.
pub fn relative_scale(b: &BBox) -> f64 {
    (b.w * b.h).sqrt()
}

pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// Sum of absolute coordinate differences over `(cx, cy, w, h)`.
pub fn l1_box_distance(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    overlap_terms(&a.to_array(), &b.to_array()).iou()
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    overlap_terms(&a.to_array(), &b.to_array()).giou()
}

struct OverlapTerms {
    inter: f64,
    union: f64,
    enclosing: f64,
}

impl OverlapTerms {
    fn iou(&self) -> f64 {
        self.inter / self.union
    }

    fn giou(&self) -> f64 {
        self.iou() - (self.enclosing - self.union) / self.enclosing
    }
}

fn to_corners(b: &[f64; 4]) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

fn overlap_terms(a: &[f64; 4], b: &[f64; 4]) -> OverlapTerms {
    let (ca, cb) = (to_corners(a), to_corners(b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let ew = ca[2].max(cb[2]) - ca[0].min(cb[0]);
    let eh = ca[3].max(cb[3]) - ca[1].min(cb[1]);
    OverlapTerms {
        inter,
        union,
        enclosing: ew * eh,
    }
}

/// Which side of each min/max is active. Two coordinate vectors with equal
/// branches lie in the same smooth piece of the GIoU surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GiouBranch {
    pub a_right_inner: bool,
    pub a_left_inner: bool,
    pub a_bottom_inner: bool,
    pub a_top_inner: bool,
    pub overlap_x: bool,
    pub overlap_y: bool,
}

/// GIoU on raw `(cx, cy, w, h)` coordinates with its gradient with respect to
/// both arguments.
pub fn giou_with_grad(a: &[f64; 4], b: &[f64; 4]) -> (f64, [f64; 4], [f64; 4], GiouBranch) {
    let (ca, cb) = (to_corners(a), to_corners(b));

    // Intersection edges: which box supplies each inner edge.
    let a_right = ca[2] < cb[2];
    let a_left = ca[0] > cb[0];
    let a_bottom = ca[3] < cb[3];
    let a_top = ca[1] > cb[1];
    let iw_raw = ca[2].min(cb[2]) - ca[0].max(cb[0]);
    let ih_raw = ca[3].min(cb[3]) - ca[1].max(cb[1]);
    let (ox, oy) = (iw_raw > 0.0, ih_raw > 0.0);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    let ew = ca[2].max(cb[2]) - ca[0].min(cb[0]);
    let eh = ca[3].max(cb[3]) - ca[1].min(cb[1]);
    let encl = ew * eh;
    let value = inter / union - 1.0 + union / encl;

    let d_union = -inter / (union * union) + 1.0 / encl;
    let d_inter = 1.0 / union - d_union;
    let d_encl = -union / (encl * encl);

    // Gradients with respect to corners [x1, y1, x2, y2] of each box.
    let mut ga = [0.0; 4];
    let mut gb = [0.0; 4];

    let d_iw = if ox && oy { d_inter * ih } else { 0.0 };
    let d_ih = if ox && oy { d_inter * iw } else { 0.0 };
    // iw = min(x2) - max(x1)
    if a_right { ga[2] += d_iw } else { gb[2] += d_iw }
    if a_left { ga[0] -= d_iw } else { gb[0] -= d_iw }
    if a_bottom { ga[3] += d_ih } else { gb[3] += d_ih }
    if a_top { ga[1] -= d_ih } else { gb[1] -= d_ih }

    // ew = max(x2) - min(x1): the outer edges are the complements of the inner ones.
    let d_ew = d_encl * eh;
    let d_eh = d_encl * ew;
    if a_right { gb[2] += d_ew } else { ga[2] += d_ew }
    if a_left { gb[0] -= d_ew } else { ga[0] -= d_ew }
    if a_bottom { gb[3] += d_eh } else { ga[3] += d_eh }
    if a_top { gb[1] -= d_eh } else { ga[1] -= d_eh }

    let to_center = |g: [f64; 4], bx: &[f64; 4]| -> [f64; 4] {
        // area term: union contains w*h of this box
        [
            g[0] + g[2],
            g[1] + g[3],
            0.5 * (g[2] - g[0]) + d_union * bx[3],
            0.5 * (g[3] - g[1]) + d_union * bx[2],
        ]
    };
    let branch = GiouBranch {
        a_right_inner: a_right,
        a_left_inner: a_left,
        a_bottom_inner: a_bottom,
        a_top_inner: a_top,
        overlap_x: ox,
        overlap_y: oy,
    };
    (value, to_center(ga, a), to_center(gb, b), branch)
}
