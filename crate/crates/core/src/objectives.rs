//! Ranking objectives over an in-batch similarity matrix.
//!
//! `S[i][j]` is the similarity of query `i` with the video of pair `j`. A
//! pair `(i, j)` is positive whenever query `i` describes the video of pair
//! `j`; positives never serve as negatives in either loss.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone)]
pub struct BatchSimilarities<T> {
    pub scores: Array2<T>,
    pub positive: Array2<bool>,
}

impl<T: Real> BatchSimilarities<T> {
    /// `video_of[i]` identifies the video of pair `i`.
    pub fn new(scores: Array2<T>, video_of: &[usize]) -> Result<Self> {
        let n = video_of.len();
        if scores.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "similarity matrix {:?} for a batch of {n}",
                scores.dim()
            )));
        }
        let positive = Array2::from_shape_fn((n, n), |(i, j)| video_of[i] == video_of[j]);
        Ok(Self { scores, positive })
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    Random,
    Hardest,
}

/// Negatives chosen for each anchor pair `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    /// Row index of the negative query for video `i`.
    pub query: Vec<usize>,
    /// Column index of the negative video for query `i`.
    pub video: Vec<usize>,
}

fn pick<T: Real, R: Rng + ?Sized>(
    candidates: impl Iterator<Item = (usize, T)>,
    mode: NegativeMode,
    rng: &mut R,
) -> Option<usize> {
    match mode {
        NegativeMode::Hardest => {
            let mut best: Option<(usize, T)> = None;
            for (j, s) in candidates {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.map(|b| b.0)
        }
        NegativeMode::Random => {
            let all: Vec<usize> = candidates.map(|c| c.0).collect();
            if all.is_empty() {
                None
            } else {
                Some(all[rng.random_range(0..all.len())])
            }
        }
    }
}

/// Random mode draws, per anchor, the query negative then the video
/// negative. Hardest mode consumes no randomness.
pub fn select_negatives<T: Real, R: Rng + ?Sized>(
    s: &BatchSimilarities<T>,
    mode: NegativeMode,
    rng: &mut R,
) -> Result<Negatives> {
    let n = s.len();
    let mut query = Vec::with_capacity(n);
    let mut video = Vec::with_capacity(n);
    for i in 0..n {
        let q = pick(
            (0..n)
                .filter(|&j| !s.positive[[j, i]])
                .map(|j| (j, s.scores[[j, i]])),
            mode,
            rng,
        );
        let v = pick(
            (0..n)
                .filter(|&j| !s.positive[[i, j]])
                .map(|j| (j, s.scores[[i, j]])),
            mode,
            rng,
        );
        match (q, v) {
            (Some(q), Some(v)) => {
                query.push(q);
                video.push(v);
            }
            _ => {
                return Err(Error::Data(format!(
                    "anchor {i} has no eligible negative in the batch"
                )))
            }
        }
    }
    Ok(Negatives { query, video })
}

/// Mean over anchors of both hinge terms. Returns the loss and `dL/dS`.
pub fn triplet_loss_with<T: Real>(
    s: &BatchSimilarities<T>,
    margin: f64,
    negatives: &Negatives,
) -> (T, Array2<T>) {
    let n = s.len();
    let m = T::from_f64_lossy(margin);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = Array2::zeros((n, n));
    let mut loss = T::zero();
    for i in 0..n {
        let pos = s.scores[[i, i]];
        let qn = negatives.query[i];
        let vn = negatives.video[i];
        let h1 = m + s.scores[[qn, i]] - pos;
        if h1 > T::zero() {
            loss += h1;
            grad[[qn, i]] += inv_n;
            grad[[i, i]] -= inv_n;
        }
        let h2 = m + s.scores[[i, vn]] - pos;
        if h2 > T::zero() {
            loss += h2;
            grad[[i, vn]] += inv_n;
            grad[[i, i]] -= inv_n;
        }
    }
    (loss * inv_n, grad)
}

pub fn triplet_loss<T: Real, R: Rng + ?Sized>(
    s: &BatchSimilarities<T>,
    margin: f64,
    mode: NegativeMode,
    rng: &mut R,
) -> Result<(T, Array2<T>)> {
    if s.len() < 2 {
        return Err(Error::Data(
            "triplet loss needs a batch of at least 2".into(),
        ));
    }
    let negatives = select_negatives(s, mode, rng)?;
    Ok(triplet_loss_with(s, margin, &negatives))
}

/// Map applied to similarities before they enter the InfoNCE ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Positivity {
    /// `exp(s / temperature)`
    Exp { temperature: f64 },
    /// Raw similarities; every involved score must be strictly positive.
    Identity,
}

impl Default for Positivity {
    fn default() -> Self {
        Positivity::Exp { temperature: 1.0 }
    }
}

/// One log-ratio term `-log(g(pos) / (g(pos) + sum g(neg)))` and its
/// gradient with respect to the positive and each negative.
fn nce_term<T: Real>(pos: T, negs: &[T], g: Positivity) -> Result<(T, T, Vec<T>)> {
    match g {
        Positivity::Exp { temperature } => {
            let inv_t = T::from_f64_lossy(1.0 / temperature);
            let mut max = pos * inv_t;
            for &v in negs {
                max = max.max(v * inv_t);
            }
            let e_pos = (pos * inv_t - max).exp();
            let e_negs: Vec<T> = negs.iter().map(|&v| (v * inv_t - max).exp()).collect();
            let z = e_pos + e_negs.iter().copied().sum::<T>();
            let loss = z.ln() - (pos * inv_t - max);
            let d_pos = (e_pos / z - T::one()) * inv_t;
            let d_negs = e_negs.iter().map(|&e| e / z * inv_t).collect();
            Ok((loss, d_pos, d_negs))
        }
        Positivity::Identity => {
            if pos <= T::zero() || negs.iter().any(|&v| v <= T::zero()) {
                return Err(Error::Numeric(
                    "identity InfoNCE needs strictly positive similarities".into(),
                ));
            }
            let z = pos + negs.iter().copied().sum::<T>();
            let loss = z.ln() - pos.ln();
            let d_pos = T::one() / z - T::one() / pos;
            let d_negs = negs.iter().map(|_| T::one() / z).collect();
            Ok((loss, d_pos, d_negs))
        }
    }
}

/// Symmetric InfoNCE over in-batch negatives. Returns the loss and `dL/dS`.
pub fn info_nce<T: Real>(s: &BatchSimilarities<T>, g: Positivity) -> Result<(T, Array2<T>)> {
    let n = s.len();
    if n < 2 {
        return Err(Error::Data("InfoNCE needs a batch of at least 2".into()));
    }
    if let Some(i) = s.scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "info_nce similarities".into(),
            index: i,
        });
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = Array2::zeros((n, n));
    let mut loss = T::zero();
    for i in 0..n {
        let pos = s.scores[[i, i]];
        // Negative queries of video i (column i), then negative videos of
        // query i (row i).
        let cols: Vec<usize> = (0..n).filter(|&j| !s.positive[[j, i]]).collect();
        let negs: Vec<T> = cols.iter().map(|&j| s.scores[[j, i]]).collect();
        let (l, dp, dn) = nce_term(pos, &negs, g)?;
        loss += l;
        grad[[i, i]] += dp * inv_n;
        for (&j, d) in cols.iter().zip(dn) {
            grad[[j, i]] += d * inv_n;
        }

        let rows: Vec<usize> = (0..n).filter(|&j| !s.positive[[i, j]]).collect();
        let negs: Vec<T> = rows.iter().map(|&j| s.scores[[i, j]]).collect();
        let (l, dp, dn) = nce_term(pos, &negs, g)?;
        loss += l;
        grad[[i, i]] += dp * inv_n;
        for (&j, d) in rows.iter().zip(dn) {
            grad[[i, j]] += d * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    /// Weight of the clip-scale InfoNCE term.
    pub lambda_clip: f64,
    /// Weight of the frame-scale InfoNCE term.
    pub lambda_frame: f64,
    /// First epoch (0-based) that mines hardest negatives.
    pub hard_negative_epoch: usize,
    pub positivity: Positivity,
    pub use_triplet: bool,
    pub use_nce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            lambda_clip: 0.02,
            lambda_frame: 0.04,
            hard_negative_epoch: 20,
            positivity: Positivity::default(),
            use_triplet: true,
            use_nce: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.lambda_clip >= 0.0) || !(self.lambda_frame >= 0.0) {
            return Err(Error::Config(
                "margin and InfoNCE weights must be >= 0".into(),
            ));
        }
        if let Positivity::Exp { temperature } = self.positivity {
            if !(temperature > 0.0) {
                return Err(Error::Config("InfoNCE temperature must be > 0".into()));
            }
        }
        if !self.use_triplet && !self.use_nce {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        Ok(())
    }

    pub fn mode_for_epoch(&self, epoch: usize) -> NegativeMode {
        if epoch >= self.hard_negative_epoch {
            NegativeMode::Hardest
        } else {
            NegativeMode::Random
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet_clip: f64,
    pub triplet_frame: f64,
    pub nce_clip: f64,
    pub nce_frame: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.triplet_clip += w * other.triplet_clip;
        self.triplet_frame += w * other.triplet_frame;
        self.nce_clip += w * other.nce_clip;
        self.nce_frame += w * other.nce_frame;
        self.total += w * other.total;
    }
}

pub struct TotalLoss<T> {
    pub breakdown: LossBreakdown,
    pub d_clip: Option<Array2<T>>,
    pub d_frame: Option<Array2<T>>,
}

/// `trip_c + trip_f + lambda_clip * nce_c + lambda_frame * nce_f`, each term
/// on its own scale's matrix. A missing scale contributes nothing.
pub fn total_loss<T: Real, R: Rng + ?Sized>(
    clip: Option<&BatchSimilarities<T>>,
    frame: Option<&BatchSimilarities<T>>,
    cfg: &LossConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<TotalLoss<T>> {
    let mode = cfg.mode_for_epoch(epoch);
    let mut breakdown = LossBreakdown::default();
    let scale = |s: Option<&BatchSimilarities<T>>,
                 lambda: f64,
                 rng: &mut R|
     -> Result<Option<(f64, f64, Array2<T>)>> {
        let Some(s) = s else { return Ok(None) };
        let n = s.len();
        let mut grad = Array2::zeros((n, n));
        let mut trip = 0.0;
        let mut nce = 0.0;
        if cfg.use_triplet {
            let (l, g) = triplet_loss(s, cfg.margin, mode, rng)?;
            trip = l.to_f64_lossy();
            grad += &g;
        }
        if cfg.use_nce && lambda > 0.0 {
            let (l, g) = info_nce(s, cfg.positivity)?;
            nce = l.to_f64_lossy();
            grad.scaled_add(T::from_f64_lossy(lambda), &g);
        }
        Ok(Some((trip, nce, grad)))
    };
    let d_clip = scale(clip, cfg.lambda_clip, rng)?.map(|(t, n, g)| {
        breakdown.triplet_clip = t;
        breakdown.nce_clip = n;
        g
    });
    let d_frame = scale(frame, cfg.lambda_frame, rng)?.map(|(t, n, g)| {
        breakdown.triplet_frame = t;
        breakdown.nce_frame = n;
        g
    });
    breakdown.total = breakdown.triplet_clip
        + breakdown.triplet_frame
        + cfg.lambda_clip * breakdown.nce_clip
        + cfg.lambda_frame * breakdown.nce_frame;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
    }
    Ok(TotalLoss {
        breakdown,
        d_clip,
        d_frame,
    })
}
