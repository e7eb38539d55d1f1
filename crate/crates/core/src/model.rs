//! The full two-branch model: text encoder, clip-scale and frame-scale video
//! encoders, frame aggregation, and the batched training pass.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_feature_matrix, write_feature_matrix, FeatureMatrix};
use crate::error::{Error, Result};
use crate::nn::ops::{
    cosine_backward_with_norms, cosine_with_norms, softmax_rows_backward, softmax_rows_inplace,
};
use crate::nn::params::join;
use crate::nn::{
    attention_pool, attention_pool_backward, named_params, norm, zeros_like, AttentionPoolCache,
    ParamInit, Params, Real, SeqEncoder, SeqEncoderCache, TransformerLayerConfig,
};
use crate::objectives::{total_loss, BatchSimilarities, LossBreakdown, LossConfig};
use crate::similarity::{score_pair, FrameAggregate, KcgaParams, SimilarityReport, VideoEncoding};
use crate::text::{SentenceEmbedding, TextEncoder, TextEncoderCache};
use crate::video::{
    build_clips, clip_backward, encode_clip_scale, encode_frame_scale, ClipScaleView, MAX_FRAMES,
    NUM_UNITS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    Both,
    ClipOnly,
    FrameOnly,
}

impl Branches {
    pub fn has_clip(self) -> bool {
        matches!(self, Branches::Both | Branches::ClipOnly)
    }

    pub fn has_frame(self) -> bool {
        matches!(self, Branches::Both | Branches::FrameOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameAggregation {
    /// Attention over frames with the key clip as the query.
    KeyClipGuided,
    /// Learned-vector attention pooling, no guidance.
    SimpleAttention,
    /// Whole-video baseline: frames are averaged before encoding, so the
    /// video is a single vector.
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub num_units: usize,
    pub max_frames: usize,
    pub max_words: usize,
    pub branches: Branches,
    pub frame_aggregation: FrameAggregation,
    /// Scale key clip guided attention logits by `1/sqrt(d)`.
    pub kcga_scaled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_dim: 3072,
            text_dim: 768,
            hidden: 384,
            heads: 4,
            ff_width: 4 * 384,
            dropout: 0.0,
            num_units: NUM_UNITS,
            max_frames: MAX_FRAMES,
            max_words: 30,
            branches: Branches::Both,
            frame_aggregation: FrameAggregation::KeyClipGuided,
            kcga_scaled: false,
        }
    }
}

impl ModelConfig {
    pub fn layer(&self) -> TransformerLayerConfig {
        TransformerLayerConfig {
            hidden: self.hidden,
            heads: self.heads,
            ff_width: self.ff_width,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer().validate()?;
        if self.video_dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("feature dimensions must be >= 1".into()));
        }
        if self.num_units == 0 || self.max_frames == 0 || self.max_words == 0 {
            return Err(Error::Config(
                "n_u, frame cap and word cap must be >= 1".into(),
            ));
        }
        if self.branches == Branches::FrameOnly
            && self.frame_aggregation == FrameAggregation::KeyClipGuided
        {
            return Err(Error::Config(
                "key clip guided attention needs the clip branch".into(),
            ));
        }
        Ok(())
    }

    fn kcga_scale<T: Real>(&self) -> T {
        if self.kcga_scaled {
            T::one() / T::from_usize(self.hidden).unwrap().sqrt()
        } else {
            T::one()
        }
    }
}

#[derive(Debug, Clone)]
pub enum Aggregator<T> {
    KeyClipGuided(KcgaParams<T>),
    SimpleAttention { pool: Array2<T> },
    MeanPool,
    None,
}

#[derive(Debug, Clone)]
pub struct MsSl<T> {
    pub config: ModelConfig,
    pub text: TextEncoder<T>,
    pub clip: Option<SeqEncoder<T>>,
    pub frame: Option<SeqEncoder<T>>,
    pub aggregator: Aggregator<T>,
}

impl<T: Real> Params<T> for MsSl<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.text.visit(&join(prefix, "text"), f);
        if let Some(c) = &self.clip {
            c.visit(&join(prefix, "clip"), f);
        }
        if let Some(fr) = &self.frame {
            fr.visit(&join(prefix, "frame"), f);
        }
        match &self.aggregator {
            Aggregator::KeyClipGuided(k) => k.visit(&join(prefix, "kcga"), f),
            Aggregator::SimpleAttention { pool } => f(join(prefix, "frame_pool"), pool),
            Aggregator::MeanPool | Aggregator::None => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.text.visit_mut(&join(prefix, "text"), f);
        if let Some(c) = &mut self.clip {
            c.visit_mut(&join(prefix, "clip"), f);
        }
        if let Some(fr) = &mut self.frame {
            fr.visit_mut(&join(prefix, "frame"), f);
        }
        match &mut self.aggregator {
            Aggregator::KeyClipGuided(k) => k.visit_mut(&join(prefix, "kcga"), f),
            Aggregator::SimpleAttention { pool } => f(join(prefix, "frame_pool"), pool),
            Aggregator::MeanPool | Aggregator::None => {}
        }
    }
}

/// Per-item dropout stream.
fn item_rng(seed: Option<u64>, item: usize, stream: u64) -> Option<ChaCha8Rng> {
    seed.map(|s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        r.set_stream(stream);
        r.set_word_pos(item as u128 * 4096);
        r
    })
}

struct VideoForward<T> {
    clip: Option<(SeqEncoderCache<T>, ClipScaleView<T>, Vec<T>)>,
    frame: Option<(SeqEncoderCache<T>, Array2<T>)>,
    aggregate: AggregateForward<T>,
}

enum AggregateForward<T> {
    KeyClipGuided {
        keys: Array2<T>,
        values: Array2<T>,
    },
    Simple {
        cache: AttentionPoolCache<T>,
        vector: Array1<T>,
    },
    Mean {
        vector: Array1<T>,
    },
    None,
}

/// Per-video forward state of the frame scale within a batch.
struct FrameBatch<T> {
    /// Attention weights of each query's key clip over the frames.
    weights: Array2<T>,
    /// Aggregated frame vector for each query.
    aggregated: Array2<T>,
}

pub struct BatchOutput<T> {
    pub loss: LossBreakdown,
    pub grads: MsSl<T>,
    pub clip_scores: Option<Array2<T>>,
    pub frame_scores: Option<Array2<T>>,
}

impl<T: Real> MsSl<T> {
    /// Each component draws from its own seed-derived stream, so ablations
    /// that drop a component leave the others' initial values unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layer = config.layer();
        let mut seeds = ParamInit::new(seed);
        let text_seed = seeds.next_seed();
        let clip_seed = seeds.next_seed();
        let frame_seed = seeds.next_seed();
        let agg_seed = seeds.next_seed();
        let text = TextEncoder::new(
            &mut ParamInit::new(text_seed),
            config.text_dim,
            config.max_words,
            &layer,
        );
        let clip = config.branches.has_clip().then(|| {
            SeqEncoder::new(
                &mut ParamInit::new(clip_seed),
                config.video_dim,
                config.num_units,
                &layer,
            )
        });
        let frame = config.branches.has_frame().then(|| {
            SeqEncoder::new(
                &mut ParamInit::new(frame_seed),
                config.video_dim,
                config.max_frames,
                &layer,
            )
        });
        let mut agg_init = ParamInit::new(agg_seed);
        let aggregator = if !config.branches.has_frame() {
            Aggregator::None
        } else {
            match config.frame_aggregation {
                FrameAggregation::KeyClipGuided => {
                    Aggregator::KeyClipGuided(KcgaParams::new(&mut agg_init, config.hidden))
                }
                FrameAggregation::SimpleAttention => Aggregator::SimpleAttention {
                    pool: agg_init.normal(1, config.hidden, 0.02),
                },
                FrameAggregation::MeanPool => Aggregator::MeanPool,
            }
        };
        Ok(Self {
            config,
            text,
            clip,
            frame,
            aggregator,
        })
    }

    pub fn encode_query(&self, words: ArrayView2<T>) -> Result<SentenceEmbedding<T>> {
        self.text.encode(words)
    }

    fn video_forward(
        &self,
        frames: ArrayView2<T>,
        dropout_seed: Option<u64>,
        item: usize,
    ) -> Result<VideoForward<T>> {
        if frames.nrows() == 0 {
            return Err(Error::Empty("video has no frames".into()));
        }
        let clip = match &self.clip {
            Some(enc) => {
                let mut rng = item_rng(dropout_seed, item, 1);
                let (units, cache) = encode_clip_scale(frames, enc, rng.as_mut())?;
                let view = build_clips(units)?;
                let norms = view
                    .clips
                    .axis_iter(Axis(0))
                    .map(|c| norm(c.as_slice().unwrap()))
                    .collect();
                Some((cache, view, norms))
            }
            None => None,
        };
        let frame = match &self.frame {
            Some(enc) => {
                let mut rng = item_rng(dropout_seed, item, 2);
                let (f, cache) = if matches!(self.aggregator, Aggregator::MeanPool) {
                    // Whole-video baseline: one averaged frame, no temporal
                    // structure reaches the encoder.
                    let mean = frames.mean_axis(Axis(0)).expect("at least one frame");
                    encode_frame_scale(mean.insert_axis(Axis(0)).view(), enc, rng.as_mut())?
                } else {
                    encode_frame_scale(frames, enc, rng.as_mut())?
                };
                Some((cache, f))
            }
            None => None,
        };
        let aggregate = match (&self.aggregator, &frame) {
            (Aggregator::KeyClipGuided(p), Some((_, f))) => {
                let (keys, values) = p.project(f.view());
                AggregateForward::KeyClipGuided { keys, values }
            }
            (Aggregator::SimpleAttention { pool }, Some((_, f))) => {
                let (vector, cache) = attention_pool(f.view(), pool.row(0));
                AggregateForward::Simple { cache, vector }
            }
            (Aggregator::MeanPool, Some((_, f))) => AggregateForward::Mean {
                vector: f.mean_axis(Axis(0)).expect("at least one frame"),
            },
            _ => AggregateForward::None,
        };
        Ok(VideoForward {
            clip,
            frame,
            aggregate,
        })
    }

    /// Query-independent encoding used for scoring and indexing.
    pub fn encode_video(&self, frames: ArrayView2<T>) -> Result<VideoEncoding<T>> {
        let fwd = self.video_forward(frames, None, 0)?;
        let aggregate = match fwd.aggregate {
            AggregateForward::KeyClipGuided { keys, values } => {
                Some(FrameAggregate::KeyClipGuided {
                    keys,
                    values,
                    scale: self.config.kcga_scale(),
                })
            }
            AggregateForward::Simple { vector, .. } | AggregateForward::Mean { vector } => {
                Some(FrameAggregate::Pooled { vector })
            }
            AggregateForward::None => None,
        };
        Ok(VideoEncoding::new(
            fwd.clip.map(|c| c.1),
            fwd.frame.map(|f| f.1),
            aggregate,
        ))
    }

    pub fn score(
        &self,
        video: &VideoEncoding<T>,
        query: &SentenceEmbedding<T>,
        alpha: f64,
    ) -> Result<SimilarityReport<T>> {
        score_pair(video, query.pooled.view(), alpha)
    }

    /// Encodes and scores one pair from raw features.
    pub fn score_raw(
        &self,
        frames: ArrayView2<T>,
        words: ArrayView2<T>,
        alpha: f64,
    ) -> Result<SimilarityReport<T>> {
        let v = self.encode_video(frames)?;
        let q = self.encode_query(words)?;
        self.score(&v, &q, alpha)
    }

    /// Loss and parameter gradients for a batch of positive pairs.
    ///
    /// `queries[i]` describes `videos[i]`; `video_of[i]` identifies that
    /// video so pairs sharing a video are masked as positives.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss_and_grad<R: Rng + ?Sized>(
        &self,
        queries: &[ArrayView2<T>],
        videos: &[ArrayView2<T>],
        video_of: &[usize],
        loss: &LossConfig,
        epoch: usize,
        rng: &mut R,
        dropout_seed: Option<u64>,
    ) -> Result<BatchOutput<T>> {
        let n = queries.len();
        if videos.len() != n || video_of.len() != n {
            return Err(Error::Shape("batch components differ in length".into()));
        }
        if n < 2 {
            return Err(Error::Data("a batch needs at least two pairs".into()));
        }
        let d = self.config.hidden;

        let text_fwd: Vec<(SentenceEmbedding<T>, TextEncoderCache<T>)> = queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut rng = item_rng(dropout_seed, i, 0);
                self.text.forward(*q, rng.as_mut())
            })
            .collect::<Result<_>>()?;
        let video_fwd: Vec<VideoForward<T>> = videos
            .par_iter()
            .enumerate()
            .map(|(j, v)| self.video_forward(*v, dropout_seed, j))
            .collect::<Result<_>>()?;

        let mut q_mat = Array2::zeros((n, d));
        for (mut row, (e, _)) in q_mat.axis_iter_mut(Axis(0)).zip(&text_fwd) {
            row.assign(&e.pooled);
        }
        let q_norms: Vec<T> = q_mat
            .axis_iter(Axis(0))
            .map(|r| norm(r.as_slice().unwrap()))
            .collect();

        // Clip scale: best clip of every video for every query.
        let clip_fwd: Option<Vec<(Vec<usize>, Vec<T>)>> = self.clip.as_ref().map(|_| {
            video_fwd
                .par_iter()
                .map(|vf| {
                    let (_, view, norms) = vf.clip.as_ref().unwrap();
                    let dots = view.clips.dot(&q_mat.t());
                    let mut keys = vec![0; n];
                    let mut sims = vec![T::neg_infinity(); n];
                    for (c, row) in dots.axis_iter(Axis(0)).enumerate() {
                        for i in 0..n {
                            let denom = norms[c] * q_norms[i];
                            let s = if denom == T::zero() {
                                T::zero()
                            } else {
                                row[i] / denom
                            };
                            if s > sims[i] {
                                sims[i] = s;
                                keys[i] = c;
                            }
                        }
                    }
                    (keys, sims)
                })
                .collect()
        });
        let clip_scores = clip_fwd
            .as_ref()
            .map(|cf| Array2::from_shape_fn((n, n), |(i, j)| cf[j].1[i]));

        // Frame scale.
        let scale = self.config.kcga_scale::<T>();
        let frame_fwd: Option<Vec<FrameBatch<T>>> = match &self.aggregator {
            Aggregator::KeyClipGuided(_) => {
                let cf = clip_fwd
                    .as_ref()
                    .expect("validated: kcga has a clip branch");
                Some(
                    video_fwd
                        .par_iter()
                        .zip(cf.par_iter())
                        .map(|(vf, (keys, _))| {
                            let AggregateForward::KeyClipGuided { keys: k, values } = &vf.aggregate
                            else {
                                unreachable!()
                            };
                            let clips = &vf.clip.as_ref().unwrap().1.clips;
                            let key_clips = clips.select(Axis(0), keys);
                            let mut weights = key_clips.dot(&k.t());
                            if scale != T::one() {
                                weights.mapv_inplace(|l| l * scale);
                            }
                            softmax_rows_inplace(&mut weights);
                            let aggregated = weights.dot(values);
                            FrameBatch {
                                weights,
                                aggregated,
                            }
                        })
                        .collect(),
                )
            }
            _ => None,
        };
        let frame_scores = match &self.aggregator {
            Aggregator::KeyClipGuided(_) => {
                let ff = frame_fwd.as_ref().unwrap();
                Some(Array2::from_shape_fn((n, n), |(i, j)| {
                    let r = ff[j].aggregated.row(i);
                    let r = r.as_slice().unwrap();
                    cosine_with_norms(r, q_mat.row(i).as_slice().unwrap(), norm(r), q_norms[i])
                }))
            }
            Aggregator::SimpleAttention { .. } | Aggregator::MeanPool => {
                let pooled: Vec<(&Array1<T>, T)> = video_fwd
                    .iter()
                    .map(|vf| match &vf.aggregate {
                        AggregateForward::Simple { vector, .. }
                        | AggregateForward::Mean { vector } => {
                            (vector, norm(vector.as_slice().unwrap()))
                        }
                        _ => unreachable!(),
                    })
                    .collect();
                Some(Array2::from_shape_fn((n, n), |(i, j)| {
                    cosine_with_norms(
                        pooled[j].0.as_slice().unwrap(),
                        q_mat.row(i).as_slice().unwrap(),
                        pooled[j].1,
                        q_norms[i],
                    )
                }))
            }
            Aggregator::None => None,
        };

        let clip_batch = clip_scores
            .clone()
            .map(|s| BatchSimilarities::new(s, video_of))
            .transpose()?;
        let frame_batch = frame_scores
            .clone()
            .map(|s| BatchSimilarities::new(s, video_of))
            .transpose()?;
        let total = total_loss(clip_batch.as_ref(), frame_batch.as_ref(), loss, epoch, rng)?;

        // Backward.
        let mut grads = zeros_like(self);
        let mut d_q = Array2::<T>::zeros((n, d));
        for (j, vf) in video_fwd.iter().enumerate() {
            let mut d_units = vf
                .clip
                .as_ref()
                .map(|(_, view, _)| Array2::<T>::zeros(view.units.dim()));

            if let (Some(dc), Some(cf)) = (&total.d_clip, &clip_fwd) {
                let (_, view, norms) = vf.clip.as_ref().unwrap();
                let d_units = d_units.as_mut().unwrap();
                let mut d_clip = vec![T::zero(); d];
                for i in 0..n {
                    let g = dc[[i, j]];
                    if g == T::zero() {
                        continue;
                    }
                    let key = cf[j].0[i];
                    let c = view.clips.row(key);
                    let c = c.as_slice().unwrap();
                    let q = q_mat.row(i);
                    let q = q.as_slice().unwrap();
                    let mut dq_row = d_q.row_mut(i);
                    cosine_backward_with_norms(
                        q,
                        c,
                        q_norms[i],
                        norms[key],
                        g,
                        dq_row.as_slice_mut().unwrap(),
                    );
                    d_clip.iter_mut().for_each(|v| *v = T::zero());
                    cosine_backward_with_norms(c, q, norms[key], q_norms[i], g, &mut d_clip);
                    clip_backward(view.spans[key], &d_clip, d_units);
                }
            }

            if let (Some(df), Some((fcache, f))) = (&total.d_frame, &vf.frame) {
                let mut d_frames: Option<Array2<T>> = None;
                match (&self.aggregator, &vf.aggregate) {
                    (
                        Aggregator::KeyClipGuided(p),
                        AggregateForward::KeyClipGuided { keys, values },
                    ) => {
                        let fb = &frame_fwd.as_ref().unwrap()[j];
                        let (_, view, _) = vf.clip.as_ref().unwrap();
                        let key_idx = &clip_fwd.as_ref().unwrap()[j].0;
                        let mut d_agg = Array2::<T>::zeros((n, d));
                        for i in 0..n {
                            let g = df[[i, j]];
                            if g == T::zero() {
                                continue;
                            }
                            let r = fb.aggregated.row(i);
                            let r = r.as_slice().unwrap();
                            let q = q_mat.row(i);
                            let q = q.as_slice().unwrap();
                            let nr = norm(r);
                            cosine_backward_with_norms(
                                r,
                                q,
                                nr,
                                q_norms[i],
                                g,
                                d_agg.row_mut(i).as_slice_mut().unwrap(),
                            );
                            cosine_backward_with_norms(
                                q,
                                r,
                                q_norms[i],
                                nr,
                                g,
                                d_q.row_mut(i).as_slice_mut().unwrap(),
                            );
                        }
                        let d_weights = d_agg.dot(&values.t());
                        let mut d_logits = softmax_rows_backward(&fb.weights, &d_weights);
                        if scale != T::one() {
                            d_logits.mapv_inplace(|g| g * scale);
                        }
                        let key_clips = view.clips.select(Axis(0), key_idx);
                        let d_key_clips = d_logits.dot(keys);
                        let d_units = d_units.as_mut().unwrap();
                        for (&k, d) in key_idx.iter().zip(d_key_clips.outer_iter()) {
                            clip_backward(view.spans[k], d.as_slice().unwrap(), d_units);
                        }
                        let d_keys = d_logits.t().dot(&key_clips);
                        let d_values = fb.weights.t().dot(&d_agg);
                        let Aggregator::KeyClipGuided(gp) = &mut grads.aggregator else {
                            unreachable!()
                        };
                        gp.key += &d_keys.t().dot(f);
                        gp.value += &d_values.t().dot(f);
                        let mut dfr = d_keys.dot(&p.key);
                        dfr += &d_values.dot(&p.value);
                        d_frames = Some(dfr);
                    }
                    (_, AggregateForward::Simple { vector, .. })
                    | (_, AggregateForward::Mean { vector }) => {
                        let v = vector.as_slice().unwrap();
                        let nv = norm(v);
                        let mut d_vec = vec![T::zero(); d];
                        for i in 0..n {
                            let g = df[[i, j]];
                            if g == T::zero() {
                                continue;
                            }
                            let q = q_mat.row(i);
                            let q = q.as_slice().unwrap();
                            cosine_backward_with_norms(v, q, nv, q_norms[i], g, &mut d_vec);
                            cosine_backward_with_norms(
                                q,
                                v,
                                q_norms[i],
                                nv,
                                g,
                                d_q.row_mut(i).as_slice_mut().unwrap(),
                            );
                        }
                        let d_vec = Array1::from(d_vec);
                        match (&self.aggregator, &vf.aggregate) {
                            (
                                Aggregator::SimpleAttention { pool },
                                AggregateForward::Simple { cache, .. },
                            ) => {
                                let (dfr, dw) = attention_pool_backward(
                                    f.view(),
                                    pool.row(0),
                                    cache,
                                    d_vec.view(),
                                );
                                let Aggregator::SimpleAttention { pool: gpool } =
                                    &mut grads.aggregator
                                else {
                                    unreachable!()
                                };
                                *gpool += &dw.insert_axis(Axis(0));
                                d_frames = Some(dfr);
                            }
                            _ => {
                                let inv = T::one() / T::from_usize(f.nrows()).unwrap();
                                let row = d_vec.mapv(|g| g * inv);
                                let dfr = Array2::from_shape_fn(f.dim(), |(_, c)| row[c]);
                                d_frames = Some(dfr);
                            }
                        }
                    }
                    _ => {}
                }
                if let (Some(dfr), Some(enc)) = (d_frames, &self.frame) {
                    enc.backward(fcache, dfr.view(), grads.frame.as_mut().unwrap());
                }
            }

            if let (Some(du), Some(enc), Some((ccache, _, _))) = (d_units, &self.clip, &vf.clip) {
                enc.backward(ccache, du.view(), grads.clip.as_mut().unwrap());
            }
        }
        for (i, (_, cache)) in text_fwd.iter().enumerate() {
            let dq = d_q.row(i).to_owned();
            self.text.backward(cache, &dq, &mut grads.text);
        }

        Ok(BatchOutput {
            loss: total.breakdown,
            grads,
            clip_scores,
            frame_scores,
        })
    }
}

/// Checkpoint header, stored as `header.json` beside one `MSL1` file per
/// parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub params: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

pub const CHECKPOINT_FORMAT: &str = "mssl-checkpoint-v1";

/// Writes named tensors as `MSL1` files into `dir` and returns their entries.
pub fn save_tensors<T: Real>(
    dir: &Path,
    tensors: &[(String, &Array2<T>)],
) -> Result<Vec<TensorEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tensors
        .iter()
        .map(|(name, t)| {
            let file = format!("{name}.msl");
            write_feature_matrix(dir.join(&file), &FeatureMatrix::from_array(t))?;
            Ok(TensorEntry {
                name: name.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
                file,
            })
        })
        .collect()
}

/// Overwrites every tensor of `target` from `entries`, checking names and
/// shapes against the target's layout.
pub fn load_tensors<T: Real, M: Params<T>>(
    dir: &Path,
    entries: &[TensorEntry],
    target: &mut M,
) -> Result<()> {
    let expected: Vec<(String, (usize, usize))> = named_params(target)
        .into_iter()
        .map(|(n, t)| (n, t.dim()))
        .collect();
    if expected.len() != entries.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(entries.len());
    for ((name, dim), e) in expected.iter().zip(entries) {
        if &e.name != name || (e.rows, e.cols) != *dim {
            return Err(Error::Shape(format!(
                "checkpoint tensor {} {}x{} does not match model tensor {name} {:?}",
                e.name, e.rows, e.cols, dim
            )));
        }
        let m = read_feature_matrix(dir.join(&e.file))?;
        if (m.rows, m.cols) != *dim {
            return Err(Error::Shape(format!(
                "tensor file {} has wrong shape",
                e.file
            )));
        }
        loaded.push(m.to_array::<T>());
    }
    let mut i = 0;
    target.visit_mut("", &mut |_, t| {
        t.assign(&loaded[i]);
        i += 1;
    });
    Ok(())
}

impl<T: Real> MsSl<T> {
    pub fn save(&self, dir: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        let params = save_tensors(dir, &named_params(self))?;
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config,
            params,
            meta,
        };
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| Error::json("checkpoint header", e))?;
        let path = dir.join("header.json");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointHeader)> {
        let dir = dir.as_ref();
        let path = dir.join("header.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!(
                "unsupported checkpoint format '{}'",
                header.format
            )));
        }
        let mut model = Self::new(header.config, 0)?;
        load_tensors(dir, &header.params, &mut model)?;
        Ok((model, header))
    }
}

/// Rows `start..end` of the first `n` columns, as a convenience for callers
/// slicing batches.
pub fn rows<T: Real>(m: &Array2<T>, start: usize, end: usize) -> ArrayView2<'_, T> {
    m.slice(s![start..end, ..])
}

/// Reads one tensor entry back as an `f32` matrix.
pub fn load_tensors_raw(dir: &Path, entry: &TensorEntry) -> Result<Array2<f32>> {
    let m = read_feature_matrix(dir.join(&entry.file))?;
    if (m.rows, m.cols) != (entry.rows, entry.cols) {
        return Err(Error::Shape(format!(
            "tensor file {} has wrong shape",
            entry.file
        )));
    }
    Ok(m.to_array())
}
