//! A small set-prediction decoder over grouped anchor queries.
//!
//! Each layer runs, in order: masked query self-attention, cross-attention to
//! the scene tokens, a feed-forward update, a box head whose offsets are added
//! to the current anchor in logit space, and a class head. The refined boxes
//! become the next layer's anchors and are re-encoded through the same
//! sinusoidal encoding and MLP as the initial anchors.
//!
//! The backward pass is written by hand. Matching results are held constant.

mod ops;
pub mod params;

use std::f64::consts::PI;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GiouBranch};
use crate::losses::{
    box_losses, classification_loss, position_loss, total_loss, FocalParams, LossBreakdown, LossParts,
    LossWeights,
};
use crate::mask::AttentionMask;
use crate::matching::{team_match_with_groups, CostWeights, GtObject, MatchResult, Prediction};
use crate::partition::{assign_object_group, QueryTeam, ScalePartition};

pub use params::{load_checkpoint, save_checkpoint, Linear, LayerParams, ModelConfig, ModelParams};

use ops::{attention, attention_backward, linear, linear_backward, linear_backward_params, sigmoid, silu, silu_backward};

/// Anchors are pulled this far inside `(0, 1)` before taking logits.
const LOGIT_EPS: f64 = 1e-6;
const MIN_PRED_SIDE: f64 = 1e-12;

/// Encoder output for one scene: one feature vector per token.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub tokens: Array2<f64>,
}

impl SceneFeatures {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("scene features contain non-finite values".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Sinusoidal encoding of `(cx, cy, w, h)` into `d` values. Each coordinate gets
/// `d / 4` entries laid out as interleaved `(sin, cos)` pairs at frequencies
/// `2π / temperature^(2j / (d/4))`.
pub fn positional_encode(coords: &[f64; 4], d: usize, temperature: f64) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(8) {
        return Err(Error::Config(format!("encoding width {d} is not a positive multiple of 8")));
    }
    let mut out = vec![0.0; d];
    encode_into(coords, temperature, &mut out);
    Ok(out)
}

fn frequencies(d: usize, temperature: f64) -> Vec<f64> {
    let per = d / 4;
    (0..per / 2)
        .map(|j| 2.0 * PI / temperature.powf(2.0 * j as f64 / per as f64))
        .collect()
}

fn encode_into(coords: &[f64; 4], temperature: f64, out: &mut [f64]) {
    let per = out.len() / 4;
    let freqs = frequencies(out.len(), temperature);
    for (c, &x) in coords.iter().enumerate() {
        for (j, &w) in freqs.iter().enumerate() {
            let (s, co) = (w * x).sin_cos();
            out[c * per + 2 * j] = s;
            out[c * per + 2 * j + 1] = co;
        }
    }
}

fn encode_rows(anchors: &Array2<f64>, d: usize, temperature: f64) -> Array2<f64> {
    let mut pe = Array2::zeros((anchors.nrows(), d));
    for (a, mut row) in anchors.rows().into_iter().zip(pe.rows_mut()) {
        let coords = [a[0], a[1], a[2], a[3]];
        encode_into(&coords, temperature, row.as_slice_mut().expect("standard layout"));
    }
    pe
}

/// Gradient of a row-wise encoding with respect to the encoded coordinates.
fn encode_rows_backward(pe: &Array2<f64>, dpe: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let d = pe.ncols();
    let per = d / 4;
    let freqs = frequencies(d, temperature);
    let mut out = Array2::zeros((pe.nrows(), 4));
    for i in 0..pe.nrows() {
        for c in 0..4 {
            let mut acc = 0.0;
            for (j, &w) in freqs.iter().enumerate() {
                let (si, ci) = (c * per + 2 * j, c * per + 2 * j + 1);
                acc += dpe[[i, si]] * w * pe[[i, ci]] - dpe[[i, ci]] * w * pe[[i, si]];
            }
            out[[i, c]] = acc;
        }
    }
    out
}

fn anchor_matrix(anchors: &[BBox]) -> Array2<f64> {
    let mut m = Array2::zeros((anchors.len(), 4));
    for (a, mut row) in anchors.iter().zip(m.rows_mut()) {
        for (k, v) in a.to_array().into_iter().enumerate() {
            row[k] = v;
        }
    }
    m
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

/// `MLP(PE(A_i))` for every anchor of the team: an `N × D` matrix.
pub fn embed_queries(team: &QueryTeam, params: &ModelParams) -> Array2<f64> {
    let cfg = &params.config;
    let pe = encode_rows(&anchor_matrix(team.anchors()), cfg.d_model, cfg.pe_temperature);
    let h = linear(&params.embed1, &pe);
    linear(&params.embed2, &silu(&h))
}

/// Masked self-attention over `z` with queries, keys and values projected by the
/// given layer. Returns the attended output and the dense `N × N` weights
/// (exact zeros at blocked pairs).
pub fn masked_self_attention(z: &Array2<f64>, layer: &LayerParams, mask: &AttentionMask) -> (Array2<f64>, Array2<f64>) {
    let q = linear(&layer.sa_q, z);
    let k = linear(&layer.sa_k, z);
    let v = linear(&layer.sa_v, z);
    let n = z.nrows();
    let mut out = Array2::zeros(v.dim());
    let mut dense = Array2::zeros((n, n));
    for b in mask.blocks() {
        let r = b.clone();
        let (o, w) = attention(q.slice(s![r.clone(), ..]), k.slice(s![r.clone(), ..]), v.slice(s![r.clone(), ..]));
        out.slice_mut(s![r.clone(), ..]).assign(&o);
        dense.slice_mut(s![r.clone(), r]).assign(&w);
    }
    (out, dense)
}

#[derive(Debug, Clone)]
struct LayerTrace {
    box_in: Array2<f64>,
    pe: Array2<f64>,
    embed_h: Array2<f64>,
    embed_a: Array2<f64>,
    z: Array2<f64>,
    sa_q: Array2<f64>,
    sa_k: Array2<f64>,
    sa_v: Array2<f64>,
    sa_w: Vec<Array2<f64>>,
    z2: Array2<f64>,
    ca_q: Array2<f64>,
    ca_k: Array2<f64>,
    ca_v: Array2<f64>,
    ca_w: Array2<f64>,
    x2: Array2<f64>,
    ffn_h: Array2<f64>,
    ffn_a: Array2<f64>,
    x3: Array2<f64>,
    box_out: Array2<f64>,
    logits: Array2<f64>,
}

/// Outputs of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// Anchors this layer started from (`N × 4`).
    pub anchors: Array2<f64>,
    /// Refined boxes (`N × 4`), the next layer's anchors.
    pub boxes: Array2<f64>,
    pub logits: Array2<f64>,
    /// Self-attention weights of this layer (`N × N`).
    pub self_attention: Array2<f64>,
    /// Cross-attention weights (`N × T`).
    pub cross_attention: Array2<f64>,
}

impl LayerOutput {
    pub fn predictions(&self) -> Vec<Prediction> {
        rows_to_predictions(&self.boxes, &self.logits)
    }

    pub fn box_list(&self) -> Vec<BBox> {
        rows_to_boxes(&self.boxes)
    }

    pub fn anchor_list(&self) -> Vec<BBox> {
        rows_to_boxes(&self.anchors)
    }
}

fn rows_to_boxes(m: &Array2<f64>) -> Vec<BBox> {
    m.rows()
        .into_iter()
        .map(|r| BBox::clamped([r[0], r[1], r[2], r[3]], MIN_PRED_SIDE))
        .collect()
}

fn rows_to_predictions(boxes: &Array2<f64>, logits: &Array2<f64>) -> Vec<Prediction> {
    rows_to_boxes(boxes)
        .into_iter()
        .zip(logits.rows())
        .enumerate()
        .map(|(i, (b, l))| Prediction {
            query_index: i,
            bbox: b,
            class_probs: l.iter().map(|&z| sigmoid(z)).collect(),
        })
        .collect()
}

/// Full forward pass with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    layers: Vec<LayerTrace>,
    blocks: Vec<std::ops::Range<usize>>,
}

impl DecodeTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> LayerOutput {
        let t = &self.layers[l];
        let n = t.x3.nrows();
        let mut dense = Array2::zeros((n, n));
        for (b, w) in self.blocks.iter().zip(&t.sa_w) {
            dense.slice_mut(s![b.clone(), b.clone()]).assign(w);
        }
        LayerOutput {
            anchors: t.box_in.clone(),
            boxes: t.box_out.clone(),
            logits: t.logits.clone(),
            self_attention: dense,
            cross_attention: t.ca_w.clone(),
        }
    }

    pub fn final_predictions(&self) -> Vec<Prediction> {
        let t = self.layers.last().expect("at least one layer");
        rows_to_predictions(&t.box_out, &t.logits)
    }
}

fn check_finite(layer: usize, what: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer,
            what: what.to_string(),
        })
    }
}

pub fn decode_trace(
    features: &SceneFeatures,
    team: &QueryTeam,
    params: &ModelParams,
    mask: &AttentionMask,
) -> Result<DecodeTrace> {
    let cfg = &params.config;
    let n = team.len();
    if mask.len() != n {
        return Err(Error::Shape(format!("mask is {}x{0} for {n} queries", mask.len())));
    }
    if features.width() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "features have width {}, model expects {}",
            features.width(),
            cfg.feature_dim
        )));
    }
    if features.is_empty() {
        return Err(Error::Shape("scene has no feature tokens".into()));
    }
    let d = cfg.d_model;
    let mut u = anchor_matrix(team.anchors()).mapv(logit);
    let mut x = Array2::<f64>::zeros((n, d));
    let mut layers = Vec::with_capacity(params.layers.len());
    for (li, lp) in params.layers.iter().enumerate() {
        let box_in = u.mapv(sigmoid);
        // The first layer encodes the stored anchors exactly.
        let enc_src = if li == 0 { anchor_matrix(team.anchors()) } else { box_in.clone() };
        let pe = encode_rows(&enc_src, d, cfg.pe_temperature);
        let embed_h = linear(&params.embed1, &pe);
        let embed_a = silu(&embed_h);
        let pos = linear(&params.embed2, &embed_a);

        let z = &x + &pos;
        let sa_q = linear(&lp.sa_q, &z);
        let sa_k = linear(&lp.sa_k, &z);
        let sa_v = linear(&lp.sa_v, &z);
        let mut sa_out = Array2::zeros((n, d));
        let mut sa_w = Vec::with_capacity(mask.blocks().len());
        for b in mask.blocks() {
            let r = b.clone();
            let (o, w) = attention(
                sa_q.slice(s![r.clone(), ..]),
                sa_k.slice(s![r.clone(), ..]),
                sa_v.slice(s![r.clone(), ..]),
            );
            sa_out.slice_mut(s![r, ..]).assign(&o);
            sa_w.push(w);
        }
        let x1 = &x + &sa_out;

        let z2 = &x1 + &pos;
        let ca_q = linear(&lp.ca_q, &z2);
        let ca_k = linear(&lp.ca_k, &features.tokens);
        let ca_v = linear(&lp.ca_v, &features.tokens);
        let (ca_out, ca_w) = attention(ca_q.view(), ca_k.view(), ca_v.view());
        let x2 = &x1 + &ca_out;

        let ffn_h = linear(&lp.ffn1, &x2);
        let ffn_a = silu(&ffn_h);
        let x3 = &x2 + &linear(&lp.ffn2, &ffn_a);

        let delta = linear(&lp.box_head, &x3);
        let u_out = &u + &delta;
        let box_out = u_out.mapv(sigmoid);
        let logits = linear(&params.class_head, &x3);
        check_finite(li, "hidden state", &x3)?;
        check_finite(li, "boxes", &box_out)?;
        check_finite(li, "class logits", &logits)?;

        x = x3.clone();
        layers.push(LayerTrace {
            box_in: if li == 0 { enc_src } else { box_in },
            pe,
            embed_h,
            embed_a,
            z,
            sa_q,
            sa_k,
            sa_v,
            sa_w,
            z2,
            ca_q,
            ca_k,
            ca_v,
            ca_w,
            x2,
            ffn_h,
            ffn_a,
            x3,
            box_out,
            logits,
        });
        u = u_out;
    }
    Ok(DecodeTrace {
        layers,
        blocks: mask.blocks().to_vec(),
    })
}

/// Per-layer outputs; the last entry holds the final predictions.
pub fn decode(
    features: &SceneFeatures,
    team: &QueryTeam,
    params: &ModelParams,
    mask: &AttentionMask,
) -> Result<Vec<LayerOutput>> {
    let t = decode_trace(features, team, params, mask)?;
    Ok((0..t.num_layers()).map(|l| t.layer(l)).collect())
}

/// Loss-side gradients fed into [`backward`].
#[derive(Debug, Clone)]
pub struct OutputGrads {
    /// Per layer, gradient with respect to the class logits.
    pub logits: Vec<Array2<f64>>,
    /// Gradient with respect to box `j` for `j = 0..=L`, where box 0 is the
    /// team anchors (ignored) and box `l + 1` is layer `l`'s output.
    pub boxes: Vec<Array2<f64>>,
}

impl OutputGrads {
    pub fn zeros(n_layers: usize, n: usize, n_classes: usize) -> Self {
        Self {
            logits: vec![Array2::zeros((n, n_classes)); n_layers],
            boxes: vec![Array2::zeros((n, 4)); n_layers + 1],
        }
    }
}

/// Reverse-mode pass through the whole decoder.
pub fn backward(trace: &DecodeTrace, features: &SceneFeatures, params: &ModelParams, g_out: &OutputGrads) -> ModelParams {
    let cfg = &params.config;
    let mut grads = params.zeros_like();
    let n_layers = trace.layers.len();
    let (n, d) = trace.layers[0].x3.dim();
    let mut du_carry = Array2::<f64>::zeros((n, 4));
    let mut dx_carry = Array2::<f64>::zeros((n, d));
    for li in (0..n_layers).rev() {
        let t = &trace.layers[li];
        let lp = &params.layers[li];
        let gl = &mut grads.layers[li];

        let sig_out = t.box_out.mapv(|b| b * (1.0 - b));
        let du = &du_carry + &(&g_out.boxes[li + 1] * &sig_out);

        // u_out = u_in + box_head(x3); logits = class_head(x3)
        let mut dx3 = dx_carry.clone();
        dx3 += &linear_backward(&lp.box_head, &t.x3, &du, &mut gl.box_head);
        dx3 += &linear_backward(&params.class_head, &t.x3, &g_out.logits[li], &mut grads.class_head);

        // x3 = x2 + ffn2(silu(ffn1(x2)))
        let da = linear_backward(&lp.ffn2, &t.ffn_a, &dx3, &mut gl.ffn2);
        let dh = silu_backward(&t.ffn_h, &da);
        let dx2 = &dx3 + &linear_backward(&lp.ffn1, &t.x2, &dh, &mut gl.ffn1);

        // x2 = x1 + attn(ca_q(z2), ca_k(F), ca_v(F)); z2 = x1 + pos
        let ag = attention_backward(t.ca_q.view(), t.ca_k.view(), t.ca_v.view(), &t.ca_w, dx2.view());
        linear_backward_params(&features.tokens, &ag.dk, &mut gl.ca_k);
        linear_backward_params(&features.tokens, &ag.dv, &mut gl.ca_v);
        let dz2 = linear_backward(&lp.ca_q, &t.z2, &ag.dq, &mut gl.ca_q);
        let dx1 = &dx2 + &dz2;
        let mut dpos = dz2;

        // x1 = x + blockwise attn(sa_q(z), sa_k(z), sa_v(z)); z = x + pos
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for (b, w) in trace.blocks.iter().zip(&t.sa_w) {
            let r = b.clone();
            let g = attention_backward(
                t.sa_q.slice(s![r.clone(), ..]),
                t.sa_k.slice(s![r.clone(), ..]),
                t.sa_v.slice(s![r.clone(), ..]),
                w,
                dx1.slice(s![r.clone(), ..]),
            );
            dq.slice_mut(s![r.clone(), ..]).assign(&g.dq);
            dk.slice_mut(s![r.clone(), ..]).assign(&g.dk);
            dv.slice_mut(s![r, ..]).assign(&g.dv);
        }
        let mut dz = linear_backward(&lp.sa_q, &t.z, &dq, &mut gl.sa_q);
        dz += &linear_backward(&lp.sa_k, &t.z, &dk, &mut gl.sa_k);
        dz += &linear_backward(&lp.sa_v, &t.z, &dv, &mut gl.sa_v);
        dx_carry = &dx1 + &dz;
        dpos += &dz;

        // pos = embed2(silu(embed1(PE(box_in))))
        let dea = linear_backward(&params.embed2, &t.embed_a, &dpos, &mut grads.embed2);
        let deh = silu_backward(&t.embed_h, &dea);
        let dpe = linear_backward(&params.embed1, &t.pe, &deh, &mut grads.embed1);

        du_carry = du;
        if li > 0 {
            let dbox = encode_rows_backward(&t.pe, &dpe, cfg.pe_temperature);
            let sig_in = t.box_in.mapv(|b| b * (1.0 - b));
            du_carry += &(&dbox * &sig_in);
        }
    }
    grads
}

/// Loss configuration shared by training and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub cost: CostWeights,
    pub focal: FocalParams,
    /// Position-constraint radius.
    pub eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            cost: CostWeights::default(),
            focal: FocalParams::default(),
            eta: 0.25,
        }
    }
}

/// Identifies the smooth piece of the loss surface a forward pass landed on:
/// assignments, L1 signs, GIoU branches and position-loss violators per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceSignature {
    pub pairs: Vec<Vec<(usize, usize)>>,
    pub box_pieces: Vec<Vec<([bool; 4], GiouBranch)>>,
    pub violators: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SceneLoss {
    pub breakdown: LossBreakdown,
    pub grads: ModelParams,
    pub matches: Vec<MatchResult>,
    pub signature: PieceSignature,
}

/// Loss over all layers for one scene, with the objects bucketed by relative scale.
pub fn loss_and_gradients(
    features: &SceneFeatures,
    gts: &[GtObject],
    team: &QueryTeam,
    params: &ModelParams,
    partition: &ScalePartition,
    mask: &AttentionMask,
    cfg: &LossConfig,
) -> Result<SceneLoss> {
    let groups: Vec<usize> = gts.iter().map(|g| assign_object_group(partition, &g.bbox)).collect();
    loss_and_gradients_grouped(features, gts, &groups, team, params, mask, cfg)
}

/// Same as [`loss_and_gradients`] for an explicit object-to-group labelling.
pub fn loss_and_gradients_grouped(
    features: &SceneFeatures,
    gts: &[GtObject],
    object_groups: &[usize],
    team: &QueryTeam,
    params: &ModelParams,
    mask: &AttentionMask,
    cfg: &LossConfig,
) -> Result<SceneLoss> {
    cfg.weights.validate()?;
    let trace = decode_trace(features, team, params, mask)?;
    let n_layers = trace.num_layers();
    let n = team.len();
    let w = &cfg.weights;
    let mut g_out = OutputGrads::zeros(n_layers, n, params.config.n_classes);
    let mut parts = LossParts::default();
    let mut matches = Vec::with_capacity(n_layers);
    let mut sig = PieceSignature {
        pairs: Vec::new(),
        box_pieces: Vec::new(),
        violators: Vec::new(),
    };
    for l in 0..n_layers {
        let t = &trace.layers[l];
        let preds = rows_to_predictions(&t.box_out, &t.logits);
        let m = team_match_with_groups(team, &preds, gts, object_groups, &cfg.cost)?;
        let cls = classification_loss(&t.logits, &m, gts, &cfg.focal);
        let boxes: Vec<BBox> = preds.iter().map(|p| p.bbox).collect();
        let bl = box_losses(&boxes, &m, gts);
        // every layer is held to the team anchors, which training never moves
        let pl = position_loss(team.anchors(), &boxes, cfg.eta);
        parts += LossParts {
            cls: cls.value,
            l1: bl.l1,
            giou: bl.giou,
            pos: pl.value,
        };
        g_out.logits[l] = cls.grad * w.cls;
        for i in 0..n {
            for k in 0..4 {
                g_out.boxes[l + 1][[i, k]] += w.l1 * bl.grad_l1[i][k] + w.giou * bl.grad_giou[i][k];
            }
            for k in 0..2 {
                g_out.boxes[l + 1][[i, k]] += w.pos * pl.grad_pred[i][k];
            }
        }
        sig.pairs.push(m.pairs.clone());
        sig.box_pieces.push(bl.pieces);
        sig.violators.push(pl.violators);
        matches.push(m);
    }
    let breakdown = total_loss(parts, w)?;
    let grads = backward(&trace, features, params, &g_out);
    Ok(SceneLoss {
        breakdown,
        grads,
        matches,
        signature: sig,
    })
}

/// Summed loss and gradients over a batch, reduced in index order.
pub fn batch_loss_and_gradients(
    scenes: &[(&SceneFeatures, &[GtObject], &[usize])],
    team: &QueryTeam,
    params: &ModelParams,
    mask: &AttentionMask,
    cfg: &LossConfig,
) -> Result<(LossParts, ModelParams)> {
    use rayon::prelude::*;
    let per_scene: Vec<Result<SceneLoss>> = scenes
        .par_iter()
        .map(|(f, g, groups)| loss_and_gradients_grouped(f, g, groups, team, params, mask, cfg))
        .collect();
    let mut grads = params.zeros_like();
    let mut parts = LossParts::default();
    for r in per_scene {
        let s = r?;
        grads.add_assign(&s.grads);
        parts += LossParts {
            cls: s.breakdown.cls,
            l1: s.breakdown.l1,
            giou: s.breakdown.giou,
            pos: s.breakdown.pos,
        };
    }
    Ok((parts, grads))
}
