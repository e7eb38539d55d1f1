//! Coarse-to-fine query-video similarity.
//!
//! The clip scale max-pools cosine similarity over all clips and remembers
//! the winning (key) clip. The frame scale lets the key clip attend over the
//! encoded frames (key clip guided attention) and compares the aggregate
//! with the query. Inference fuses the two with a convex weight.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::cosine_with_norms;
use crate::nn::params::join;
use crate::nn::{cosine, dot, norm, softmax, softmax_backward, ParamInit, Params, Real};
use crate::video::{ClipScaleView, ClipSpan};

/// Key and value projections of key clip guided attention, each `d x d`.
#[derive(Debug, Clone)]
pub struct KcgaParams<T> {
    pub key: Array2<T>,
    pub value: Array2<T>,
}

impl<T: Real> KcgaParams<T> {
    pub fn new(init: &mut ParamInit, d: usize) -> Self {
        Self {
            key: init.xavier(d, d),
            value: init.xavier(d, d),
        }
    }

    /// `(K, Z)` with one projected frame per row.
    pub fn project(&self, frames: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        (frames.dot(&self.key.t()), frames.dot(&self.value.t()))
    }
}

impl<T: Real> Params<T> for KcgaParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f(join(prefix, "key"), &self.key);
        f(join(prefix, "value"), &self.value);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f(join(prefix, "key"), &mut self.key);
        f(join(prefix, "value"), &mut self.value);
    }
}

/// `(max_i cos(c_i, q), argmax)`; ties go to the smallest clip index.
pub fn clip_similarity<T: Real>(clips: ArrayView2<T>, q: &[T]) -> Result<(T, usize)> {
    let norms: Vec<T> = clips
        .axis_iter(Axis(0))
        .map(|c| norm(c.as_slice().expect("clip rows are contiguous")))
        .collect();
    clip_similarity_cached(clips, &norms, q, norm(q))
}

pub(crate) fn clip_similarity_cached<T: Real>(
    clips: ArrayView2<T>,
    clip_norms: &[T],
    q: &[T],
    q_norm: T,
) -> Result<(T, usize)> {
    if clips.nrows() == 0 {
        return Err(Error::Empty("clip set is empty".into()));
    }
    let mut best = (T::neg_infinity(), 0);
    for (i, (c, &n)) in clips.axis_iter(Axis(0)).zip(clip_norms).enumerate() {
        let s = cosine_with_norms(
            c.as_slice().expect("clip rows are contiguous"),
            q,
            n,
            q_norm,
        );
        if s > best.0 {
            best = (s, i);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct KcgaOutput<T> {
    pub aggregated: Array1<T>,
    pub weights: Vec<T>,
}

/// Attention of the key clip over frames: `r = softmax(scale * c K^T) Z`.
/// `scale` is 1 for the unscaled form.
pub fn kcga_cached<T: Real>(
    keys: ArrayView2<T>,
    values: ArrayView2<T>,
    key_clip: &[T],
    scale: T,
) -> KcgaOutput<T> {
    let logits: Vec<T> = keys
        .axis_iter(Axis(0))
        .map(|k| dot(k.as_slice().expect("key rows are contiguous"), key_clip) * scale)
        .collect();
    let weights = softmax(&logits);
    let mut aggregated = Array1::zeros(values.ncols());
    for (z, &w) in values.axis_iter(Axis(0)).zip(&weights) {
        aggregated.scaled_add(w, &z);
    }
    KcgaOutput {
        aggregated,
        weights,
    }
}

/// Key clip guided attention from raw frame embeddings.
pub fn kcga<T: Real>(
    frames: ArrayView2<T>,
    key_clip: &[T],
    params: &KcgaParams<T>,
    scale: T,
) -> Result<KcgaOutput<T>> {
    if frames.nrows() == 0 {
        return Err(Error::Empty("kcga needs at least one frame".into()));
    }
    let (keys, values) = params.project(frames);
    Ok(kcga_cached(keys.view(), values.view(), key_clip, scale))
}

/// Gradients of [`kcga`] given `d_r`, the gradient on the aggregate.
/// Returns `(d_frames, d_key_clip)` and accumulates into `grad`.
pub fn kcga_backward<T: Real>(
    frames: ArrayView2<T>,
    key_clip: &[T],
    params: &KcgaParams<T>,
    scale: T,
    out: &KcgaOutput<T>,
    d_r: &[T],
    grad: &mut KcgaParams<T>,
) -> (Array2<T>, Array1<T>) {
    let (keys, values) = params.project(frames);
    let d_r = ArrayView1::from(d_r);
    // d weights_i = z_i . d_r, then through the softmax and the scale.
    let d_weights: Vec<T> = values.axis_iter(Axis(0)).map(|z| z.dot(&d_r)).collect();
    let d_logits: Vec<T> = softmax_backward(&out.weights, &d_weights)
        .into_iter()
        .map(|g| g * scale)
        .collect();
    let c = ArrayView1::from(key_clip);
    let mut d_keys = Array2::zeros(keys.dim());
    let mut d_values = Array2::zeros(values.dim());
    let mut d_clip = Array1::zeros(key_clip.len());
    for (i, (&dl, &w)) in d_logits.iter().zip(&out.weights).enumerate() {
        d_keys.row_mut(i).scaled_add(dl, &c);
        d_values.row_mut(i).scaled_add(w, &d_r);
        d_clip.scaled_add(dl, &keys.row(i));
    }
    grad.key += &d_keys.t().dot(&frames);
    grad.value += &d_values.t().dot(&frames);
    let d_frames = d_keys.dot(&params.key) + d_values.dot(&params.value);
    (d_frames, d_clip)
}

pub fn frame_similarity<T: Real>(aggregated: &[T], q: &[T]) -> T {
    cosine(aggregated, q)
}

/// `alpha * s_c + (1 - alpha) * s_f`
pub fn fused_similarity<T: Real>(s_c: T, s_f: T, alpha: f64) -> Result<T> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    // Endpoints return the branch score itself, so that even signed zeros
    // match branch-only evaluation.
    if alpha == 1.0 {
        return Ok(s_c);
    }
    if alpha == 0.0 {
        return Ok(s_f);
    }
    let a = T::from_f64_lossy(alpha);
    Ok(a * s_c + (T::one() - a) * s_f)
}

/// Query-independent frame-scale quantities of one video.
#[derive(Debug, Clone)]
pub enum FrameAggregate<T> {
    /// Projected keys and values for key clip guided attention.
    KeyClipGuided {
        keys: Array2<T>,
        values: Array2<T>,
        scale: T,
    },
    /// A fixed pooled frame vector (simple attention or mean pooling).
    Pooled { vector: Array1<T> },
}

/// Everything needed to score a video against any query.
#[derive(Debug, Clone)]
pub struct VideoEncoding<T> {
    pub clips: Option<ClipScaleView<T>>,
    pub clip_norms: Vec<T>,
    /// Encoded frames, `n_v x d`.
    pub frames: Option<Array2<T>>,
    pub aggregate: Option<FrameAggregate<T>>,
}

impl<T: Real> VideoEncoding<T> {
    pub fn new(
        clips: Option<ClipScaleView<T>>,
        frames: Option<Array2<T>>,
        aggregate: Option<FrameAggregate<T>>,
    ) -> Self {
        let clip_norms = clips
            .as_ref()
            .map(|c| {
                c.clips
                    .axis_iter(Axis(0))
                    .map(|r| norm(r.as_slice().expect("clip rows are contiguous")))
                    .collect()
            })
            .unwrap_or_default();
        Self {
            clips,
            clip_norms,
            frames,
            aggregate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport<T> {
    pub clip: Option<T>,
    pub frame: Option<T>,
    pub fused: T,
    pub key_index: Option<usize>,
    pub key_span: Option<ClipSpan>,
}

/// Clip similarity, then frame similarity guided by the key clip, then the
/// fused score. With one branch missing the fused score is the surviving
/// branch's similarity.
pub fn score_pair<T: Real>(
    video: &VideoEncoding<T>,
    q: ArrayView1<T>,
    alpha: f64,
) -> Result<SimilarityReport<T>> {
    let q = q.as_slice().expect("query vector is contiguous");
    let q_norm = norm(q);
    let clip = match &video.clips {
        Some(c) => Some(clip_similarity_cached(
            c.clips.view(),
            &video.clip_norms,
            q,
            q_norm,
        )?),
        None => None,
    };
    let frame = match &video.aggregate {
        Some(FrameAggregate::KeyClipGuided {
            keys,
            values,
            scale,
        }) => {
            let (clips, (_, key)) =
                video.clips.as_ref().zip(clip).ok_or_else(|| {
                    Error::Config("key clip guidance needs the clip branch".into())
                })?;
            let key_clip = clips.clips.row(key);
            let out = kcga_cached(
                keys.view(),
                values.view(),
                key_clip.as_slice().unwrap(),
                *scale,
            );
            let agg = out.aggregated.as_slice().unwrap();
            Some(cosine_with_norms(agg, q, norm(agg), q_norm))
        }
        Some(FrameAggregate::Pooled { vector }) => {
            let v = vector.as_slice().unwrap();
            Some(cosine_with_norms(v, q, norm(v), q_norm))
        }
        None => None,
    };
    let fused = match (clip, frame) {
        (Some((c, _)), Some(f)) => fused_similarity(c, f, alpha)?,
        (Some((c, _)), None) => c,
        (None, Some(f)) => f,
        (None, None) => return Err(Error::Config("both branches disabled".into())),
    };
    Ok(SimilarityReport {
        clip: clip.map(|c| c.0),
        frame,
        fused,
        key_index: clip.map(|c| c.1),
        key_span: video.clips.as_ref().zip(clip).map(|(c, (_, k))| c.spans[k]),
    })
}
