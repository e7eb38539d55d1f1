use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Real;

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations that saw a zero-norm argument since process
/// start.
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

/// Sequential dot product. Every similarity in the crate goes through this,
/// so equal inputs give bit-equal scores regardless of call site.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine similarity. A zero-norm argument yields 0 and bumps
/// [`zero_norm_events`].
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let na = norm(a);
    let nb = norm(b);
    cosine_with_norms(a, b, na, nb)
}

pub(crate) fn cosine_with_norms<T: Real>(a: &[T], b: &[T], na: T, nb: T) -> T {
    if na == T::zero() || nb == T::zero() {
        ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

/// Accumulates `upstream * d cos(a, b) / d a` into `grad_a`.
pub fn cosine_backward<T: Real>(a: &[T], b: &[T], upstream: T, grad_a: &mut [T]) {
    let na = norm(a);
    let nb = norm(b);
    cosine_backward_with_norms(a, b, na, nb, upstream, grad_a);
}

pub(crate) fn cosine_backward_with_norms<T: Real>(
    a: &[T],
    b: &[T],
    na: T,
    nb: T,
    upstream: T,
    grad_a: &mut [T],
) {
    if na == T::zero() || nb == T::zero() || upstream == T::zero() {
        return;
    }
    let cos = dot(a, b) / (na * nb);
    let cb = upstream / (na * nb);
    let ca = upstream * cos / (na * na);
    for ((g, &ai), &bi) in grad_a.iter_mut().zip(a).zip(b) {
        *g += cb * bi - ca * ai;
    }
}

/// Numerically stable softmax of a logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let mut out: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Gradient of the logits given the softmax output and its upstream gradient.
pub fn softmax_backward<T: Real>(probs: &[T], upstream: &[T]) -> Vec<T> {
    let inner = dot(probs, upstream);
    probs
        .iter()
        .zip(upstream)
        .map(|(&p, &g)| p * (g - inner))
        .collect()
}

pub(crate) fn softmax_rows_inplace<T: Real>(m: &mut Array2<T>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row
            .iter()
            .copied()
            .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
        let mut sum = T::zero();
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|x| x / sum);
    }
}

pub(crate) fn softmax_rows_backward<T: Real>(probs: &Array2<T>, upstream: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros(probs.dim());
    for ((p, g), mut o) in probs
        .axis_iter(Axis(0))
        .zip(upstream.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
    {
        let inner = p.dot(&g);
        for ((oi, &pi), &gi) in o.iter_mut().zip(p).zip(g) {
            *oi = pi * (gi - inner);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AttentionPoolCache<T> {
    pub weights: Vec<T>,
}

/// Softmax-weighted sum of the rows of `seq` with logits `seq . w`.
pub fn attention_pool<T: Real>(
    seq: ArrayView2<T>,
    w: ArrayView1<T>,
) -> (Array1<T>, AttentionPoolCache<T>) {
    let logits: Vec<T> = seq.dot(&w).to_vec();
    let weights = softmax(&logits);
    let pooled = ArrayView1::from(&weights[..]).dot(&seq);
    (pooled, AttentionPoolCache { weights })
}

/// Returns `(d seq, d w)`.
pub fn attention_pool_backward<T: Real>(
    seq: ArrayView2<T>,
    w: ArrayView1<T>,
    cache: &AttentionPoolCache<T>,
    upstream: ArrayView1<T>,
) -> (Array2<T>, Array1<T>) {
    let d_weights: Vec<T> = seq.dot(&upstream).to_vec();
    let d_logits = softmax_backward(&cache.weights, &d_weights);
    let d_logits = ArrayView1::from(&d_logits[..]);
    let weights = ArrayView1::from(&cache.weights[..]);
    let mut d_seq = outer(weights, upstream);
    d_seq += &outer(d_logits, w);
    let d_w = d_logits.dot(&seq);
    (d_seq, d_w)
}

pub(crate) fn outer<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (mut row, &ai) in out.axis_iter_mut(Axis(0)).zip(a) {
        row.zip_mut_with(&b, |o, &bi| *o = ai * bi);
    }
    out
}
