use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::join;
use super::{
    FcRelu, FcReluCache, LayerNorm, LayerNormCache, Linear, MultiHeadAttention,
    MultiHeadAttentionCache, ParamInit, Params, Real,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayerConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
}

impl Default for TransformerLayerConfig {
    fn default() -> Self {
        Self {
            hidden: 384,
            heads: 4,
            ff_width: 4 * 384,
            dropout: 0.0,
        }
    }
}

impl TransformerLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ff_width == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward<T> {
    pub inner: FcRelu<T>,
    pub outer: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache<T> {
    x: Array2<T>,
    inner: FcReluCache<T>,
    hidden: Array2<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn new(init: &mut ParamInit, d: usize, width: usize) -> Self {
        Self {
            inner: FcRelu::new(init, d, width),
            outer: Linear::new(init, width, d),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, FeedForwardCache<T>) {
        let (hidden, inner) = self.inner.forward(x).expect("width checked by caller");
        let y = self.outer.forward(hidden.view());
        (
            y,
            FeedForwardCache {
                x: x.to_owned(),
                inner,
                hidden,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &FeedForwardCache<T>,
        dy: ArrayView2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let d_hidden = self
            .outer
            .backward(cache.hidden.view(), dy, &mut grad.outer);
        self.inner.backward(
            cache.x.view(),
            &cache.inner,
            d_hidden.view(),
            &mut grad.inner,
        )
    }
}

impl<T: Real> Params<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.inner.visit(&join(prefix, "inner"), f);
        self.outer.visit(&join(prefix, "outer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.inner.visit_mut(&join(prefix, "inner"), f);
        self.outer.visit_mut(&join(prefix, "outer"), f);
    }
}

/// Post-norm encoder layer: `h = LN(x + MHA(x))`, `y = LN(h + FFN(h))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer<T> {
    pub dropout: f64,
    pub attention: MultiHeadAttention<T>,
    pub attention_norm: LayerNorm<T>,
    pub feed_forward: FeedForward<T>,
    pub output_norm: LayerNorm<T>,
}

#[derive(Debug, Clone)]
pub struct TransformerLayerCache<T> {
    pub attention: MultiHeadAttentionCache<T>,
    attention_mask: Option<Array2<T>>,
    attention_norm: LayerNormCache<T>,
    feed_forward: FeedForwardCache<T>,
    feed_forward_mask: Option<Array2<T>>,
    output_norm: LayerNormCache<T>,
}

fn dropout_mask<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

impl<T: Real> TransformerLayer<T> {
    pub fn new(init: &mut ParamInit, cfg: &TransformerLayerConfig) -> Self {
        Self {
            dropout: cfg.dropout,
            attention: MultiHeadAttention::new(init, cfg.hidden, cfg.heads),
            attention_norm: LayerNorm::new(init, cfg.hidden),
            feed_forward: FeedForward::new(init, cfg.hidden, cfg.ff_width),
            output_norm: LayerNorm::new(init, cfg.hidden),
        }
    }

    /// `rng` enables dropout (training mode); `None` is deterministic
    /// inference.
    pub fn forward(
        &self,
        x: ArrayView2<T>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<T>, TransformerLayerCache<T>)> {
        if x.nrows() == 0 {
            return Err(Error::Empty("transformer layer input has no rows".into()));
        }
        let hidden = self.attention.query.d_in();
        if x.ncols() != hidden {
            return Err(Error::Shape(format!(
                "transformer layer expects width {hidden}, got {}",
                x.ncols()
            )));
        }
        let active = self.dropout > 0.0 && rng.is_some();

        let (mut attended, attention) = self.attention.forward(x);
        let attention_mask = if active {
            let m = dropout_mask(rng.as_deref_mut().unwrap(), attended.dim(), self.dropout);
            attended *= &m;
            Some(m)
        } else {
            None
        };
        attended += &x;
        let (h, attention_norm) = self.attention_norm.forward(attended.view());

        let (mut ff, feed_forward) = self.feed_forward.forward(h.view());
        let feed_forward_mask = if active {
            let m = dropout_mask(rng.unwrap(), ff.dim(), self.dropout);
            ff *= &m;
            Some(m)
        } else {
            None
        };
        ff += &h;
        let (y, output_norm) = self.output_norm.forward(ff.view());
        Ok((
            y,
            TransformerLayerCache {
                attention,
                attention_mask,
                attention_norm,
                feed_forward,
                feed_forward_mask,
                output_norm,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &TransformerLayerCache<T>,
        dy: ArrayView2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let d_sum2 = self
            .output_norm
            .backward(&cache.output_norm, dy, &mut grad.output_norm);
        let mut d_ff = d_sum2.clone();
        if let Some(m) = &cache.feed_forward_mask {
            d_ff *= m;
        }
        let mut d_h =
            self.feed_forward
                .backward(&cache.feed_forward, d_ff.view(), &mut grad.feed_forward);
        d_h += &d_sum2;

        let d_sum1 = self.attention_norm.backward(
            &cache.attention_norm,
            d_h.view(),
            &mut grad.attention_norm,
        );
        let mut d_att = d_sum1.clone();
        if let Some(m) = &cache.attention_mask {
            d_att *= m;
        }
        let mut dx = self
            .attention
            .backward(&cache.attention, d_att.view(), &mut grad.attention);
        dx += &d_sum1;
        dx
    }
}

impl<T: Real> Params<T> for TransformerLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.attention_norm
            .visit(&join(prefix, "attention_norm"), f);
        self.feed_forward.visit(&join(prefix, "feed_forward"), f);
        self.output_norm.visit(&join(prefix, "output_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.attention_norm
            .visit_mut(&join(prefix, "attention_norm"), f);
        self.feed_forward
            .visit_mut(&join(prefix, "feed_forward"), f);
        self.output_norm.visit_mut(&join(prefix, "output_norm"), f);
    }
}

/// `Transformer(FC_ReLU(x) + PE)`: the sequence encoder shared in structure
/// (never in parameters) by the text, clip and frame branches.
#[derive(Debug, Clone)]
pub struct SeqEncoder<T> {
    pub fc: FcRelu<T>,
    /// One learned row per position.
    pub positions: Array2<T>,
    pub layer: TransformerLayer<T>,
}

#[derive(Debug, Clone)]
pub struct SeqEncoderCache<T> {
    input: Array2<T>,
    fc: FcReluCache<T>,
    pub layer: TransformerLayerCache<T>,
}

impl<T: Real> SeqEncoder<T> {
    pub fn new(
        init: &mut ParamInit,
        d_in: usize,
        max_positions: usize,
        cfg: &TransformerLayerConfig,
    ) -> Self {
        Self {
            fc: FcRelu::new(init, d_in, cfg.hidden),
            positions: init.normal(max_positions, cfg.hidden, 0.02),
            layer: TransformerLayer::new(init, cfg),
        }
    }

    pub fn d_in(&self) -> usize {
        self.fc.linear.d_in()
    }

    pub fn max_positions(&self) -> usize {
        self.positions.nrows()
    }

    pub fn forward(
        &self,
        x: ArrayView2<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<T>, SeqEncoderCache<T>)> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("sequence encoder input has no rows".into()));
        }
        if n > self.max_positions() {
            return Err(Error::Shape(format!(
                "sequence of {n} rows exceeds {} positional embeddings",
                self.max_positions()
            )));
        }
        let (mut h, fc) = self.fc.forward(x)?;
        h += &self.positions.slice(s![..n, ..]);
        let (y, layer) = self.layer.forward(h.view(), rng)?;
        Ok((
            y,
            SeqEncoderCache {
                input: x.to_owned(),
                fc,
                layer,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &SeqEncoderCache<T>,
        dy: ArrayView2<T>,
        grad: &mut Self,
    ) -> Array2<T> {
        let dh = self.layer.backward(&cache.layer, dy, &mut grad.layer);
        let n = dh.nrows();
        let mut pos = grad.positions.slice_mut(s![..n, ..]);
        pos += &dh;
        self.fc
            .backward(cache.input.view(), &cache.fc, dh.view(), &mut grad.fc)
    }
}

impl<T: Real> Params<T> for SeqEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.fc.visit(&join(prefix, "fc"), f);
        f(join(prefix, "positions"), &self.positions);
        self.layer.visit(&join(prefix, "layer"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.fc.visit_mut(&join(prefix, "fc"), f);
        f(join(prefix, "positions"), &mut self.positions);
        self.layer.visit_mut(&join(prefix, "layer"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, grad_check_params, zeros_like};
    use ndarray::Axis;
    use rand::SeedableRng;

    fn small_cfg() -> TransformerLayerConfig {
        TransformerLayerConfig {
            hidden: 8,
            heads: 2,
            ff_width: 16,
            dropout: 0.0,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_is_preserved() {
        let cfg = TransformerLayerConfig {
            hidden: 16,
            heads: 4,
            ff_width: 64,
            dropout: 0.0,
        };
        let layer = TransformerLayer::<f32>::new(&mut ParamInit::new(1), &cfg);
        for n in [1, 30, 128] {
            let x = random(n, 16, n as u64).mapv(|v| v as f32);
            let (y, _) = layer.forward(x.view(), None).unwrap();
            assert_eq!(y.dim(), (n, 16));
        }
    }

    #[test]
    fn outputs_are_layer_normalized() {
        let layer = TransformerLayer::<f64>::new(&mut ParamInit::new(2), &small_cfg());
        let (y, _) = layer.forward(random(7, 8, 3).view(), None).unwrap();
        for row in y.axis_iter(Axis(0)) {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let layer = TransformerLayer::<f64>::new(&mut ParamInit::new(2), &small_cfg());
        let x = Array2::<f64>::zeros((0, 8));
        assert!(matches!(
            layer.forward(x.view(), None),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn dropout_without_rng_is_deterministic() {
        let mut cfg = small_cfg();
        cfg.dropout = 0.3;
        let layer = TransformerLayer::<f64>::new(&mut ParamInit::new(4), &cfg);
        let x = random(5, 8, 9);
        let (a, _) = layer.forward(x.view(), None).unwrap();
        let (b, _) = layer.forward(x.view(), None).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, _) = layer.forward(x.view(), Some(&mut rng)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let layer = TransformerLayer::<f64>::new(&mut ParamInit::new(6), &small_cfg());
        let x = random(5, 8, 7);
        let r = random(5, 8, 8);
        let (_, cache) = layer.forward(x.view(), None).unwrap();
        let mut grad = zeros_like(&layer);
        let dx = layer.backward(&cache, r.view(), &mut grad);
        let f = |flat: &[f64]| {
            let xs = Array2::from_shape_vec((5, 8), flat.to_vec()).unwrap();
            (layer.forward(xs.view(), None).unwrap().0 * &r).sum()
        };
        let err = grad_check(f, x.as_slice().unwrap(), dx.as_slice().unwrap(), 1e-6).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn dropout_gradient_matches_with_fixed_mask() {
        let mut cfg = small_cfg();
        cfg.dropout = 0.25;
        let layer = TransformerLayer::<f64>::new(&mut ParamInit::new(16), &cfg);
        let x = random(4, 8, 17);
        let r = random(4, 8, 18);
        let run = |xs: &Array2<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            layer.forward(xs.view(), Some(&mut rng)).unwrap()
        };
        let (_, cache) = run(&x);
        let mut grad = zeros_like(&layer);
        let dx = layer.backward(&cache, r.view(), &mut grad);
        let f = |flat: &[f64]| {
            let xs = Array2::from_shape_vec((4, 8), flat.to_vec()).unwrap();
            (run(&xs).0 * &r).sum()
        };
        let err = grad_check(f, x.as_slice().unwrap(), dx.as_slice().unwrap(), 1e-6).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn encoder_parameter_gradients_match_finite_differences() {
        let enc = SeqEncoder::<f64>::new(&mut ParamInit::new(12), 5, 6, &small_cfg());
        let x = random(4, 5, 13);
        let r = random(4, 8, 14);
        let (_, cache) = enc.forward(x.view(), None).unwrap();
        let mut grad = zeros_like(&enc);
        enc.backward(&cache, r.view(), &mut grad);
        let (err, at) = grad_check_params(
            &enc,
            &grad,
            |m| (m.forward(x.view(), None).unwrap().0 * &r).sum(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err} at {at}");
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let enc = SeqEncoder::<f64>::new(&mut ParamInit::new(12), 5, 3, &small_cfg());
        let x = random(4, 5, 13);
        assert!(matches!(enc.forward(x.view(), None), Err(Error::Shape(_))));
    }
}
