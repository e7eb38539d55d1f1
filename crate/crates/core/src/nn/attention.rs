use ndarray::{s, Array2, ArrayView2};

use super::ops::{softmax_rows_backward, softmax_rows_inplace};
use super::params::join;
use super::{Linear, ParamInit, Params, Real};

/// Multi-head self-attention with scaled dot-product logits.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T> {
    pub heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttentionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Row-stochastic `n x n` attention matrix per head.
    pub probs: Vec<Array2<T>>,
    merged: Array2<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn new(init: &mut ParamInit, d: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "hidden size must divide into heads"
        );
        Self {
            heads,
            query: Linear::new(init, d, d),
            key: Linear::new(init, d, d),
            value: Linear::new(init, d, d),
            output: Linear::new(init, d, d),
        }
    }

    fn head_dim(&self) -> usize {
        self.query.d_out() / self.heads
    }

    fn scale(&self) -> T {
        T::one() / T::from_usize(self.head_dim()).unwrap().sqrt()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, MultiHeadAttentionCache<T>) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let hd = self.head_dim();
        let scale = self.scale();
        let mut merged = Array2::zeros(q.dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut logits = q.slice(cols).dot(&k.slice(cols).t());
            logits.mapv_inplace(|l| l * scale);
            softmax_rows_inplace(&mut logits);
            merged.slice_mut(cols).assign(&logits.dot(&v.slice(cols)));
            probs.push(logits);
        }
        let y = self.output.forward(merged.view());
        (
            y,
            MultiHeadAttentionCache {
                x: x.to_owned(),
                q,
                k,
                v,
                probs,
                merged,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &MultiHeadAttentionCache<T>,
        dy: ArrayView2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let d_merged = self
            .output
            .backward(cache.merged.view(), dy, &mut grad.output);
        let hd = self.head_dim();
        let scale = self.scale();
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for (h, probs) in cache.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let d_out = d_merged.slice(cols);
            let d_probs = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&d_out));
            let mut d_logits = softmax_rows_backward(probs, &d_probs);
            d_logits.mapv_inplace(|g| g * scale);
            dq.slice_mut(cols)
                .assign(&d_logits.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols)
                .assign(&d_logits.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.x.view();
        let mut dx = self.query.backward(x, dq.view(), &mut grad.query);
        dx += &self.key.backward(x, dk.view(), &mut grad.key);
        dx += &self.value.backward(x, dv.view(), &mut grad.value);
        dx
    }
}

impl<T: Real> Params<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
