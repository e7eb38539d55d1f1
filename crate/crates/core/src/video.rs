//! Video representation at two temporal scales.
//!
//! The clip branch mean-pools the frames down to `n_u` units, encodes them,
//! and enumerates every contiguous window of units as a clip. The frame
//! branch encodes the (capped) frame sequence directly. The two branches
//! share structure but never parameters.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Real, SeqEncoder, SeqEncoderCache};

/// Default number of downsampled units.
pub const NUM_UNITS: usize = 32;
/// Default frame cap for the frame branch.
pub const MAX_FRAMES: usize = 128;

/// Mean-pools `x` (`n x d`) to `m` rows. Row `j` averages input rows
/// `floor(j n / m) .. floor((j + 1) n / m)`. When `n < m` that range can be
/// empty, in which case row `floor(j n / m)` is repeated.
pub fn downsample_mean<T: Real>(x: ArrayView2<T>, m: usize) -> Result<Array2<T>> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("cannot downsample an empty sequence".into()));
    }
    if m == 0 {
        return Err(Error::Config("downsample target must be >= 1".into()));
    }
    let mut out = Array2::zeros((m, x.ncols()));
    for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let start = j * n / m;
        let end = ((j + 1) * n / m).max(start + 1);
        let count = T::from_usize(end - start).unwrap();
        for src in x.slice(s![start..end, ..]).axis_iter(Axis(0)) {
            row += &src;
        }
        row.mapv_inplace(|v| v / count);
    }
    Ok(out)
}

/// Downsamples to `max_frames` only when the sequence is longer.
pub fn cap_frames<T: Real>(x: ArrayView2<T>, max_frames: usize) -> Result<Array2<T>> {
    if x.nrows() == 0 {
        return Err(Error::Empty("video has no frames".into()));
    }
    if x.nrows() > max_frames {
        downsample_mean(x, max_frames)
    } else {
        Ok(x.to_owned())
    }
}

/// Number of multi-scale clips over `n_u` units.
pub fn clip_count(num_units: usize) -> usize {
    num_units * (num_units + 1) / 2
}

/// A clip's window over the unit sequence: units `start .. end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClipSpan {
    pub start: usize,
    pub end: usize,
}

impl ClipSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Spans in canonical order: window size ascending, then start ascending.
pub fn clip_spans(num_units: usize) -> Vec<ClipSpan> {
    let mut spans = Vec::with_capacity(clip_count(num_units));
    for k in 1..=num_units {
        for start in 0..=num_units - k {
            spans.push(ClipSpan {
                start,
                end: start + k,
            });
        }
    }
    spans
}

#[derive(Debug, Clone)]
pub struct ClipScaleView<T> {
    /// Encoded units, `n_u x d`.
    pub units: Array2<T>,
    /// One clip per row, `n_c x d`.
    pub clips: Array2<T>,
    pub spans: Vec<ClipSpan>,
}

/// Mean of every sliding window of every size over the encoded units.
pub fn build_clips<T: Real>(units: Array2<T>) -> Result<ClipScaleView<T>> {
    let n_u = units.nrows();
    if n_u == 0 {
        return Err(Error::Empty("no units to build clips from".into()));
    }
    let spans = clip_spans(n_u);
    let mut clips = Array2::zeros((spans.len(), units.ncols()));
    for (mut clip, span) in clips.axis_iter_mut(Axis(0)).zip(&spans) {
        for u in units.slice(s![span.start..span.end, ..]).axis_iter(Axis(0)) {
            clip += &u;
        }
        let k = T::from_usize(span.len()).unwrap();
        clip.mapv_inplace(|v| v / k);
    }
    Ok(ClipScaleView {
        units,
        clips,
        spans,
    })
}

/// Routes a gradient on one clip back onto its units.
pub fn clip_backward<T: Real>(span: ClipSpan, d_clip: &[T], d_units: &mut Array2<T>) {
    let inv = T::one() / T::from_usize(span.len()).unwrap();
    for mut row in d_units
        .slice_mut(s![span.start..span.end, ..])
        .axis_iter_mut(Axis(0))
    {
        for (g, &d) in row.iter_mut().zip(d_clip) {
            *g += d * inv;
        }
    }
}

fn check_width<T: Real>(v: ArrayView2<T>, enc: &SeqEncoder<T>) -> Result<()> {
    if v.ncols() != enc.d_in() {
        return Err(Error::Shape(format!(
            "video features have width {}, encoder expects {}",
            v.ncols(),
            enc.d_in()
        )));
    }
    Ok(())
}

/// `U' = Transformer(FC_ReLU(downsample(V, n_u)) + PE)`; `n_u` is the
/// encoder's positional table size.
pub fn encode_clip_scale<T: Real>(
    frames: ArrayView2<T>,
    enc: &SeqEncoder<T>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<T>, SeqEncoderCache<T>)> {
    check_width(frames, enc)?;
    let units = downsample_mean(frames, enc.max_positions())?;
    enc.forward(units.view(), rng)
}

/// `F = Transformer(FC_ReLU(cap(V)) + PE)`; the cap is the encoder's
/// positional table size.
pub fn encode_frame_scale<T: Real>(
    frames: ArrayView2<T>,
    enc: &SeqEncoder<T>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<T>, SeqEncoderCache<T>)> {
    check_width(frames, enc)?;
    let capped = cap_frames(frames, enc.max_positions())?;
    enc.forward(capped.view(), rng)
}
