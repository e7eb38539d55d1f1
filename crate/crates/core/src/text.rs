//! Sentence representation: contextual word vectors plus an attention-pooled
//! sentence vector.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{
    attention_pool, attention_pool_backward, AttentionPoolCache, ParamInit, Params, Real,
    SeqEncoder, SeqEncoderCache, TransformerLayerConfig,
};

/// Word-feature sequence of a query, `n_q x d_w`, at most `cap` rows.
#[derive(Debug, Clone, Copy)]
pub struct QueryFeatureSequence<'a, T> {
    words: ArrayView2<'a, T>,
}

impl<'a, T: Real> QueryFeatureSequence<'a, T> {
    /// Keeps the first `cap` words; the rest are discarded.
    pub fn new(words: ArrayView2<'a, T>, cap: usize) -> Result<Self> {
        if words.nrows() == 0 {
            return Err(Error::Empty("query has no words".into()));
        }
        let n = words.nrows().min(cap);
        Ok(Self {
            words: words.slice_move(s![..n, ..]),
        })
    }

    pub fn words(&self) -> ArrayView2<'a, T> {
        self.words
    }

    pub fn len(&self) -> usize {
        self.words.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.words.nrows() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SentenceEmbedding<T> {
    /// Contextual word vectors, `n_q x d`.
    pub words: Array2<T>,
    /// Pooled sentence vector.
    pub pooled: Array1<T>,
    /// Attention weight of each word in `pooled`.
    pub weights: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct TextEncoderCache<T> {
    encoder: SeqEncoderCache<T>,
    words: Array2<T>,
    pool: AttentionPoolCache<T>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder<T> {
    pub encoder: SeqEncoder<T>,
    /// Pooling vector, `1 x d`.
    pub pool: Array2<T>,
}

impl<T: Real> TextEncoder<T> {
    /// `max_words` sizes the positional table and is the truncation cap.
    pub fn new(
        init: &mut ParamInit,
        text_dim: usize,
        max_words: usize,
        cfg: &TransformerLayerConfig,
    ) -> Self {
        Self {
            encoder: SeqEncoder::new(init, text_dim, max_words, cfg),
            pool: init.normal(1, cfg.hidden, 0.02),
        }
    }

    pub fn max_words(&self) -> usize {
        self.encoder.max_positions()
    }

    pub fn forward(
        &self,
        words: ArrayView2<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(SentenceEmbedding<T>, TextEncoderCache<T>)> {
        if words.ncols() != self.encoder.d_in() {
            return Err(Error::Shape(format!(
                "query features have width {}, encoder expects {}",
                words.ncols(),
                self.encoder.d_in()
            )));
        }
        let seq = QueryFeatureSequence::new(words, self.max_words())?;
        let (contextual, encoder) = self.encoder.forward(seq.words(), rng)?;
        let (pooled, pool) = attention_pool(contextual.view(), self.pool.row(0));
        Ok((
            SentenceEmbedding {
                words: contextual.clone(),
                pooled,
                weights: pool.weights.clone(),
            },
            TextEncoderCache {
                encoder,
                words: contextual,
                pool,
            },
        ))
    }

    pub fn encode(&self, words: ArrayView2<T>) -> Result<SentenceEmbedding<T>> {
        Ok(self.forward(words, None)?.0)
    }

    /// Backpropagates a gradient on the pooled vector.
    pub fn backward(&self, cache: &TextEncoderCache<T>, d_pooled: &Array1<T>, grad: &mut Self) {
        let (d_words, d_pool) = attention_pool_backward(
            cache.words.view(),
            self.pool.row(0),
            &cache.pool,
            d_pooled.view(),
        );
        grad.pool += &d_pool.insert_axis(Axis(0));
        self.encoder
            .backward(&cache.encoder, d_words.view(), &mut grad.encoder);
    }
}

impl<T: Real> Params<T> for TextEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        f(join(prefix, "pool"), &self.pool);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        f(join(prefix, "pool"), &mut self.pool);
    }
}
