//! Planted-moment synthetic datasets.
//!
//! Every query owns a latent unit topic `t`. Its video contains one
//! contiguous moment whose frames are `t A + noise`; every other frame comes
//! from a background topic (or another query's moment). Background topics are
//! by default drawn fresh for every run from the same distribution as query
//! topics, so nothing but the query tells moment frames from background. The query's
//! words are `t B + noise`. `A` and `B` have orthonormal rows, so topics are
//! recoverable from either modality by the transposed map.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    save_manifest, write_feature_matrix, DatasetManifest, FeatureMatrix, Moment, QueryEntry, Split,
    VideoEntry,
};
use crate::error::{Error, Result};

/// Background topics are resampled until their |cosine| with every query
/// topic of the same video stays below this.
const MAX_DISTRACTOR_COSINE: f64 = 0.5;
const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Training videos.
    pub num_videos: usize,
    pub num_val_videos: usize,
    pub num_test_videos: usize,
    pub queries_per_video: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    /// Inclusive frame-count range; one frame per second.
    pub frames_range: (usize, usize),
    pub mv_ratio_range: (f64, f64),
    /// Inclusive word-count range.
    pub words_range: (usize, usize),
    pub topic_dim: usize,
    /// Size of a fixed, shared background topic pool; 0 draws a fresh topic
    /// for every background run.
    pub background_topics: usize,
    /// Inclusive range of background run lengths, in frames.
    pub background_run: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 300,
            num_val_videos: 50,
            num_test_videos: 100,
            queries_per_video: 1,
            video_dim: 32,
            text_dim: 32,
            frames_range: (40, 80),
            mv_ratio_range: (0.1, 0.5),
            words_range: (8, 16),
            topic_dim: 16,
            background_topics: 0,
            background_run: (4, 12),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_videos,
            Split::Val => self.num_val_videos,
            Split::Test => self.num_test_videos,
        }
    }

    fn moment_bounds(&self, frames: usize) -> (usize, usize) {
        let (lo, hi) = self.mv_ratio_range;
        let min = ((lo * frames as f64).ceil() as usize).max(1);
        let max = (hi * frames as f64).floor() as usize;
        (min, max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_videos == 0 || self.num_val_videos == 0 || self.num_test_videos == 0 {
            return bad("every split needs at least one video".into());
        }
        if self.queries_per_video == 0
            || self.video_dim == 0
            || self.text_dim == 0
            || self.topic_dim == 0
        {
            return bad("counts and dimensions must be >= 1".into());
        }
        if self.topic_dim > self.video_dim || self.topic_dim > self.text_dim {
            return bad(format!(
                "topic_dim {} must not exceed video_dim {} or text_dim {}",
                self.topic_dim, self.video_dim, self.text_dim
            ));
        }
        let (fmin, fmax) = self.frames_range;
        if fmin == 0 || fmin > fmax {
            return bad(format!("invalid frames_range {:?}", self.frames_range));
        }
        let (wmin, wmax) = self.words_range;
        if wmin == 0 || wmin > wmax {
            return bad(format!("invalid words_range {:?}", self.words_range));
        }
        let (rmin, rmax) = self.background_run;
        if rmin == 0 || rmin > rmax {
            return bad(format!("invalid background_run {:?}", self.background_run));
        }
        let (lo, hi) = self.mv_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "mv_ratio_range {:?} must satisfy 0 < min <= max <= 1",
                self.mv_ratio_range
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        for frames in fmin..=fmax {
            let (min, max) = self.moment_bounds(frames);
            if min > max || min * self.queries_per_video > frames {
                return bad(format!(
                    "frames_range {:?} too small to fit mv_ratio_range {:?} with {} queries per video (fails at {frames} frames)",
                    self.frames_range, self.mv_ratio_range, self.queries_per_video
                ));
            }
        }
        Ok(())
    }
}

/// Generated dataset held in memory; see [`write_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// `topic_dim x video_dim`, orthonormal rows.
    pub video_map: Array2<f64>,
    /// `topic_dim x text_dim`, orthonormal rows.
    pub text_map: Array2<f64>,
    pub splits: Vec<SyntheticSplit>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub manifest: DatasetManifest,
    /// `(relative path, matrix)` for every video then every query.
    pub features: Vec<(String, FeatureMatrix)>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &SyntheticSplit {
        self.splits
            .iter()
            .find(|s| s.manifest.split == split)
            .expect("all splits generated")
    }
}

fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        loop {
            let mut v: Array1<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
            for prev in 0..r {
                let p = m.row(prev);
                let proj = v.dot(&p);
                v.scaled_add(-proj, &p);
            }
            let n = v.dot(&v).sqrt();
            if n > 1e-6 {
                m.row_mut(r).assign(&(v / n));
                break;
            }
        }
    }
    m
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
}

enum PoolOrFresh {
    Pool(usize),
    Fresh(Array1<f64>),
}

fn far_from(candidate: &Array1<f64>, others: &[Array1<f64>]) -> bool {
    others
        .iter()
        .all(|o| candidate.dot(o).abs() < MAX_DISTRACTOR_COSINE)
}

fn emit(
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    sigma: f64,
    topic: &Array1<f64>,
    map: &Array2<f64>,
    out: &mut Vec<f32>,
) {
    let clean = topic.dot(map);
    for &c in &clean {
        let e = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        out.push((c + e) as f32);
    }
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let video_map = orthonormal_rows(&mut rng, spec.topic_dim, spec.video_dim);
    let text_map = orthonormal_rows(&mut rng, spec.topic_dim, spec.text_dim);
    let pool: Vec<Array1<f64>> = (0..spec.background_topics)
        .map(|_| unit_vector(&mut rng, spec.topic_dim))
        .collect();

    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let name = split.name();
        let mut videos = Vec::new();
        let mut queries = Vec::new();
        let mut features = Vec::new();
        let mut query_features = Vec::new();
        for v in 0..spec.count(split) {
            let video_id = format!("{name}_v{v:05}");
            let frames = rng.random_range(spec.frames_range.0..=spec.frames_range.1);
            let k = spec.queries_per_video;

            let mut topics: Vec<Array1<f64>> = Vec::with_capacity(k);
            while topics.len() < k {
                let t = unit_vector(&mut rng, spec.topic_dim);
                if far_from(&t, &topics) {
                    topics.push(t);
                }
            }

            // Disjoint moment lengths, each within the M/V bounds.
            let (min_len, max_len) = spec.moment_bounds(frames);
            let mut lengths = Vec::with_capacity(k);
            let mut used = 0;
            for i in 0..k {
                let reserve = min_len * (k - i - 1);
                let cap = max_len.min(frames - used - reserve);
                let len = rng.random_range(min_len..=cap);
                used += len;
                lengths.push(len);
            }
            let free = frames - used;
            let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
            cuts.sort_unstable();
            let mut owner: Vec<Option<usize>> = vec![None; frames];
            let mut starts = Vec::with_capacity(k);
            let mut cursor = 0;
            let mut prev_cut = 0;
            for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
                cursor += cut - prev_cut;
                prev_cut = cut;
                starts.push(cursor);
                for slot in &mut owner[cursor..cursor + len] {
                    *slot = Some(i);
                }
                cursor += len;
            }

            let mut data = Vec::with_capacity(frames * spec.video_dim);
            let mut background: Option<(PoolOrFresh, usize)> = None;
            for slot in &owner {
                match slot {
                    Some(q) => {
                        background = None;
                        emit(
                            &mut rng,
                            &noise,
                            spec.noise_sigma,
                            &topics[*q],
                            &video_map,
                            &mut data,
                        );
                    }
                    None => {
                        let (topic, left) = match background.take() {
                            Some((t, left)) if left > 0 => (t, left),
                            _ => {
                                let pick = if pool.is_empty() {
                                    let mut tries = 0;
                                    loop {
                                        let t = unit_vector(&mut rng, spec.topic_dim);
                                        if far_from(&t, &topics) {
                                            break PoolOrFresh::Fresh(t);
                                        }
                                        tries += 1;
                                        if tries > MAX_RESAMPLES {
                                            return Err(Error::Config(
                                                "no background topic far enough from the query topics".into(),
                                            ));
                                        }
                                    }
                                } else {
                                    let mut pick = rng.random_range(0..pool.len());
                                    let mut tries = 0;
                                    while !far_from(&pool[pick], &topics) {
                                        tries += 1;
                                        if tries > MAX_RESAMPLES {
                                            return Err(Error::Config(
                                                "background pool has no topic far enough from the query topics".into(),
                                            ));
                                        }
                                        pick = rng.random_range(0..pool.len());
                                    }
                                    PoolOrFresh::Pool(pick)
                                };
                                let run =
                                    rng.random_range(spec.background_run.0..=spec.background_run.1);
                                (pick, run)
                            }
                        };
                        let vector = match &topic {
                            PoolOrFresh::Pool(i) => pool[*i].clone(),
                            PoolOrFresh::Fresh(t) => t.clone(),
                        };
                        emit(
                            &mut rng,
                            &noise,
                            spec.noise_sigma,
                            &vector,
                            &video_map,
                            &mut data,
                        );
                        background = Some((topic, left - 1));
                    }
                }
            }
            let video_path = format!("{name}/videos/{video_id}.msl");
            features.push((
                video_path.clone(),
                FeatureMatrix::new(frames, spec.video_dim, data)?,
            ));
            videos.push(VideoEntry {
                id: video_id.clone(),
                feature_path: video_path,
                duration: frames as f64,
            });

            for (i, topic) in topics.iter().enumerate() {
                let query_id = format!("{name}_q{:05}", queries.len());
                let words = rng.random_range(spec.words_range.0..=spec.words_range.1);
                let mut data = Vec::with_capacity(words * spec.text_dim);
                for _ in 0..words {
                    emit(
                        &mut rng,
                        &noise,
                        spec.noise_sigma,
                        topic,
                        &text_map,
                        &mut data,
                    );
                }
                let query_path = format!("{name}/queries/{query_id}.msl");
                query_features.push((
                    query_path.clone(),
                    FeatureMatrix::new(words, spec.text_dim, data)?,
                ));
                queries.push(QueryEntry {
                    id: query_id,
                    video_id: video_id.clone(),
                    feature_path: query_path,
                    moment: Some(Moment {
                        start: starts[i] as f64,
                        end: (starts[i] + lengths[i]) as f64,
                    }),
                });
            }
        }
        features.extend(query_features);
        let manifest = DatasetManifest::new(split, videos, queries);
        manifest.validate()?;
        splits.push(SyntheticSplit { manifest, features });
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        video_map,
        text_map,
        splits,
    })
}

/// Writes `<split>.json` manifests and their feature files under `out_dir`.
/// Returns the manifest paths in train, val, test order.
pub fn write_synthetic(ds: &SyntheticDataset, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let mut paths = Vec::new();
    for split in &ds.splits {
        for (rel, m) in &split.features {
            write_feature_matrix(out_dir.join(rel), m)?;
        }
        let path = out_dir.join(format!("{}.json", split.manifest.split.name()));
        save_manifest(&path, &split.manifest)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Topic coordinates of each row of a feature matrix under an orthonormal map.
pub fn recover_topics(m: &FeatureMatrix, map: &Array2<f64>) -> Array2<f64> {
    m.to_array::<f64>().dot(&map.t())
}
