//! Dense building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::Linear;

pub(crate) fn linear(l: &Linear, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&l.w) + &l.b
}

/// Accumulates parameter gradients into `g` and returns the input gradient.
pub(crate) fn linear_backward(l: &Linear, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
    g.w += &x.t().dot(dy);
    g.b += &dy.sum_axis(Axis(0));
    dy.dot(&l.w.t())
}

/// Like [`linear_backward`] for a constant input: no input gradient.
pub(crate) fn linear_backward_params(x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) {
    g.w += &x.t().dot(dy);
    g.b += &dy.sum_axis(Axis(0));
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    crate::losses::sigmoid(x)
}

pub(crate) fn silu(h: &Array2<f64>) -> Array2<f64> {
    h.mapv(|x| x * sigmoid(x))
}

pub(crate) fn silu_backward(h: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(h, |d, &x| {
        let s = sigmoid(x);
        *d *= s * (1.0 + x * (1.0 - s));
    });
    out
}

/// Single-head scaled dot-product attention. Returns the output and the
/// row-stochastic weight matrix.
pub(crate) fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut w = q.dot(&k.t()) * scale;
    for mut row in w.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    let out = w.dot(&v);
    (out, w)
}

pub(crate) struct AttentionGrads {
    pub dq: Array2<f64>,
    pub dk: Array2<f64>,
    pub dv: Array2<f64>,
}

pub(crate) fn attention_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    w: &Array2<f64>,
    dout: ArrayView2<f64>,
) -> AttentionGrads {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dw = dout.dot(&v.t());
    let dv = w.t().dot(&dout);
    let mut ds = w * &dw;
    let row_dot: Array1<f64> = ds.sum_axis(Axis(1));
    for (mut row, (wr, rd)) in ds.rows_mut().into_iter().zip(w.rows().into_iter().zip(row_dot.iter())) {
        row.zip_mut_with(&wr, |d, &a| *d -= a * rd);
    }
    ds *= scale;
    AttentionGrads {
        dq: ds.dot(&k),
        dk: ds.t().dot(&q),
        dv,
    }
}
