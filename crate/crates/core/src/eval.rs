//! Retrieval index, ranked retrieval, recall metrics and M/V-grouped
//! reports.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSplit, MvGroup};
use crate::error::{Error, Result};
use crate::model::{load_tensors_raw, save_tensors, ModelConfig, MsSl, TensorEntry};
use crate::similarity::{
    fused_similarity, score_pair, FrameAggregate, SimilarityReport, VideoEncoding,
};
use crate::video::{build_clips, ClipScaleView};

/// The recall cut-offs reported everywhere.
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 100];

/// Query-independent encodings of a video gallery.
#[derive(Debug, Clone)]
pub struct VideoIndex {
    pub config: ModelConfig,
    pub video_ids: Vec<String>,
    pub videos: Vec<VideoEncoding<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    config: ModelConfig,
    videos: Vec<IndexedVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexedVideo {
    id: String,
    tensors: Vec<TensorEntry>,
    kcga_scale: Option<f32>,
}

const INDEX_FORMAT: &str = "mssl-index-v1";

impl VideoIndex {
    pub fn build(model: &MsSl<f32>, video_ids: &[String], videos: &[Array2<f32>]) -> Result<Self> {
        if video_ids.len() != videos.len() {
            return Err(Error::Shape(
                "video ids and features differ in length".into(),
            ));
        }
        for (id, v) in video_ids.iter().zip(videos) {
            if v.ncols() != model.config.video_dim {
                return Err(Error::Shape(format!(
                    "video '{id}' has feature width {}, checkpoint expects {}",
                    v.ncols(),
                    model.config.video_dim
                )));
            }
        }
        let encoded = videos
            .par_iter()
            .map(|v| model.encode_video(v.view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: model.config,
            video_ids: video_ids.to_vec(),
            videos: encoded,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Clip and frame similarity of one query embedding against every video.
    pub fn score_query(&self, query: &Array1<f32>) -> Result<Vec<SimilarityReport<f32>>> {
        if self.is_empty() {
            return Err(Error::Empty("empty index".into()));
        }
        self.videos
            .iter()
            .map(|v| score_pair(v, query.view(), 0.5))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut videos = Vec::with_capacity(self.len());
        for (i, (id, v)) in self.video_ids.iter().zip(&self.videos).enumerate() {
            let mut named: Vec<(String, &Array2<f32>)> = Vec::new();
            if let Some(c) = &v.clips {
                named.push((format!("v{i:06}.units"), &c.units));
                named.push((format!("v{i:06}.clips"), &c.clips));
            }
            if let Some(f) = &v.frames {
                named.push((format!("v{i:06}.frames"), f));
            }
            let pooled;
            let mut kcga_scale = None;
            match &v.aggregate {
                Some(FrameAggregate::KeyClipGuided {
                    keys,
                    values,
                    scale,
                }) => {
                    named.push((format!("v{i:06}.keys"), keys));
                    named.push((format!("v{i:06}.values"), values));
                    kcga_scale = Some(*scale);
                }
                Some(FrameAggregate::Pooled { vector }) => {
                    pooled = vector.clone().insert_axis(ndarray::Axis(0));
                    named.push((format!("v{i:06}.pooled"), &pooled));
                }
                None => {}
            }
            videos.push(IndexedVideo {
                id: id.clone(),
                tensors: save_tensors(dir, &named)?,
                kcga_scale,
            });
        }
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            config: self.config,
            videos,
        };
        let text =
            serde_json::to_string_pretty(&header).map_err(|e| Error::json("index header", e))?;
        let path = dir.join("index.json");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: IndexHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if header.format != INDEX_FORMAT {
            return Err(Error::Data(format!(
                "unsupported index format '{}'",
                header.format
            )));
        }
        let mut video_ids = Vec::with_capacity(header.videos.len());
        let mut videos = Vec::with_capacity(header.videos.len());
        for entry in header.videos {
            let mut tensors: HashMap<String, Array2<f32>> = HashMap::new();
            for t in &entry.tensors {
                let m = load_tensors_raw(dir, t)?;
                let kind = t.name.rsplit('.').next().unwrap_or_default().to_string();
                tensors.insert(kind, m);
            }
            let clips = match (tensors.remove("units"), tensors.remove("clips")) {
                (Some(units), Some(clips)) => {
                    let spans = build_clips(units.clone())?.spans;
                    if spans.len() != clips.nrows() {
                        return Err(Error::Shape(format!(
                            "index video '{}' has {} clips for {} units",
                            entry.id,
                            clips.nrows(),
                            units.nrows()
                        )));
                    }
                    Some(ClipScaleView {
                        units,
                        clips,
                        spans,
                    })
                }
                (None, None) => None,
                _ => {
                    return Err(Error::Data(format!(
                        "index video '{}' is missing clip tensors",
                        entry.id
                    )))
                }
            };
            let frames = tensors.remove("frames");
            let aggregate = match (
                tensors.remove("keys"),
                tensors.remove("values"),
                tensors.remove("pooled"),
            ) {
                (Some(keys), Some(values), None) => Some(FrameAggregate::KeyClipGuided {
                    keys,
                    values,
                    scale: entry.kcga_scale.unwrap_or(1.0),
                }),
                (None, None, Some(p)) => Some(FrameAggregate::Pooled {
                    vector: p.row(0).to_owned(),
                }),
                (None, None, None) => None,
                _ => {
                    return Err(Error::Data(format!(
                        "index video '{}' has inconsistent frame tensors",
                        entry.id
                    )))
                }
            };
            video_ids.push(entry.id);
            videos.push(VideoEncoding::new(clips, frames, aggregate));
        }
        Ok(Self {
            config: header.config,
            video_ids,
            videos,
        })
    }
}

/// Per-branch similarities of every query (rows) against every video
/// (columns). Fusion happens afterwards so one table serves any α.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub query_ids: Vec<String>,
    pub video_ids: Vec<String>,
    pub clip: Option<Array2<f32>>,
    pub frame: Option<Array2<f32>>,
}

impl ScoreTable {
    /// Fused scores `α S_c + (1 - α) S_f`; with one branch the surviving
    /// branch's scores are returned unchanged.
    pub fn fused(&self, alpha: f64) -> Result<Array2<f32>> {
        match (&self.clip, &self.frame) {
            (Some(c), Some(f)) => {
                let mut out = Array2::zeros(c.dim());
                for ((o, &sc), &sf) in out.iter_mut().zip(c).zip(f) {
                    *o = fused_similarity(sc, sf, alpha)?;
                }
                Ok(out)
            }
            (Some(c), None) => Ok(c.clone()),
            (None, Some(f)) => Ok(f.clone()),
            (None, None) => Err(Error::Config("no similarity branch present".into())),
        }
    }
}

/// Encodes every query of `split` and scores it against the index.
pub fn score_split(
    model: &MsSl<f32>,
    index: &VideoIndex,
    split: &FeatureSplit,
) -> Result<ScoreTable> {
    if index.is_empty() {
        return Err(Error::Empty("empty index".into()));
    }
    if split.queries.is_empty() {
        return Err(Error::Empty("split has no queries".into()));
    }
    let rows = split
        .queries
        .par_iter()
        .map(|q| {
            let e = model.encode_query(q.view())?;
            index.score_query(&e.pooled)
        })
        .collect::<Result<Vec<_>>>()?;
    let (nq, nv) = (rows.len(), index.len());
    let has_clip = rows[0][0].clip.is_some();
    let has_frame = rows[0][0].frame.is_some();
    let table = |pick: fn(&SimilarityReport<f32>) -> Option<f32>| {
        Array2::from_shape_fn((nq, nv), |(i, j)| pick(&rows[i][j]).unwrap())
    };
    Ok(ScoreTable {
        query_ids: split.query_ids.clone(),
        video_ids: index.video_ids.clone(),
        clip: has_clip.then(|| table(|r| r.clip)),
        frame: has_frame.then(|| table(|r| r.frame)),
    })
}

/// Ranking order: descending score, then ascending video id.
fn rank_order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    /// Top videos with their fused scores, best first.
    pub videos: Vec<(String, f32)>,
    /// 1-based rank of the ground-truth video in the full gallery.
    pub gt_rank: Option<usize>,
}

/// Ranks a gallery by `scores`, keeping the top `k`.
pub fn rank_gallery(
    query_id: &str,
    scores: &[f32],
    video_ids: &[String],
    gt: Option<usize>,
    k: usize,
) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if scores.is_empty() {
        return Err(Error::Empty("empty index".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("score of query '{query_id}'"),
            index: i,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_order((scores[a], &video_ids[a]), (scores[b], &video_ids[b])));
    let gt_rank = gt.map(|g| order.iter().position(|&j| j == g).unwrap() + 1);
    order.truncate(k);
    Ok(RankedList {
        query_id: query_id.to_string(),
        videos: order
            .into_iter()
            .map(|j| (video_ids[j].clone(), scores[j]))
            .collect(),
        gt_rank,
    })
}

/// 1-based rank of `gt` without sorting the gallery.
pub fn gt_rank(scores: &[f32], video_ids: &[String], gt: usize) -> usize {
    let key = (scores[gt], video_ids[gt].as_str());
    1 + (0..scores.len())
        .filter(|&j| rank_order((scores[j], &video_ids[j]), key) == Ordering::Less)
        .count()
}

/// Top-`k` videos for one query's raw word features.
pub fn retrieve(
    model: &MsSl<f32>,
    index: &VideoIndex,
    words: ArrayView2<f32>,
    alpha: f64,
    k: usize,
) -> Result<RankedList> {
    let e = model.encode_query(words)?;
    let reports = index.score_query(&e.pooled)?;
    let scores = reports
        .iter()
        .map(|r| match (r.clip, r.frame) {
            (Some(c), Some(f)) => fused_similarity(c, f, alpha),
            _ => Ok(r.fused),
        })
        .collect::<Result<Vec<_>>>()?;
    rank_gallery("", &scores, &index.video_ids, None, k)
}

/// Ground-truth ranks of every query under the fused score at `alpha`.
pub fn ranks_at(table: &ScoreTable, split: &FeatureSplit, alpha: f64) -> Result<Vec<usize>> {
    let fused = table.fused(alpha)?;
    fused
        .outer_iter()
        .zip(&split.query_video)
        .enumerate()
        .map(|(i, (row, &gt))| {
            let row = row.to_vec();
            if let Some(j) = row.iter().position(|s| !s.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("score of query '{}'", table.query_ids[i]),
                    index: j,
                });
            }
            Ok(gt_rank(&row, &table.video_ids, gt))
        })
        .collect()
}

/// Percentage of queries whose ground truth is within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("no queries to evaluate".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub num_queries: usize,
    /// R@1, R@5, R@10, R@100 in percent.
    pub recalls: [f64; 4],
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        let mut recalls = [0.0; 4];
        for (r, &k) in recalls.iter_mut().zip(&RECALL_KS) {
            *r = recall_at_k(ranks, k)?;
        }
        Ok(Self {
            num_queries: ranks.len(),
            recalls,
        })
    }

    pub fn from_recalls(recalls: [f64; 4]) -> Self {
        Self {
            num_queries: 0,
            recalls,
        }
    }

    pub fn sum_recall(&self) -> f64 {
        sum_recall(&self.recalls)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let round = |v: f64| (v * 10.0).round() / 10.0;
        serde_json::json!({
            "num_queries": self.num_queries,
            "R@1": round(self.recalls[0]),
            "R@5": round(self.recalls[1]),
            "R@10": round(self.recalls[2]),
            "R@100": round(self.recalls[3]),
            "SumR": round(self.sum_recall()),
            "full_precision": {
                "R@1": self.recalls[0],
                "R@5": self.recalls[1],
                "R@10": self.recalls[2],
                "R@100": self.recalls[3],
                "SumR": self.sum_recall(),
            }
        })
    }
}

pub fn sum_recall(recalls: &[f64; 4]) -> f64 {
    recalls.iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinReport {
    pub label: String,
    pub lower: f64,
    pub upper: f64,
    /// `None` when no evaluated query falls in the bin.
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedReport {
    pub pooled: EvalReport,
    pub bins: Vec<BinReport>,
}

impl GroupedReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "pooled": self.pooled.to_json(),
            "bins": self.bins.iter().map(|b| serde_json::json!({
                "label": b.label,
                "lower": b.lower,
                "upper": b.upper,
                "report": b.report.map(|r| r.to_json()),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Per-bin reports for queries ranked in `query_ids` order. The bins must
/// cover exactly the ranked queries.
pub fn grouped_eval(
    query_ids: &[String],
    ranks: &[usize],
    group: &MvGroup,
) -> Result<GroupedReport> {
    if query_ids.len() != ranks.len() {
        return Err(Error::Shape("query ids and ranks differ in length".into()));
    }
    let position: HashMap<&str, usize> = query_ids
        .iter()
        .enumerate()
        .map(|(i, q)| (q.as_str(), i))
        .collect();
    let mut seen = vec![false; ranks.len()];
    let mut bins = Vec::with_capacity(group.bins.len());
    for (b, members) in group.bins.iter().enumerate() {
        let mut bin_ranks = Vec::with_capacity(members.len());
        for q in members {
            let &i = position.get(q.as_str()).ok_or_else(|| {
                Error::Data(format!("bin/query mismatch: '{q}' was not evaluated"))
            })?;
            if seen[i] {
                return Err(Error::Data(format!(
                    "bin/query mismatch: '{q}' is in two bins"
                )));
            }
            seen[i] = true;
            bin_ranks.push(ranks[i]);
        }
        bins.push(BinReport {
            label: group.label(b),
            lower: group.edges[b],
            upper: group.edges[b + 1],
            report: if bin_ranks.is_empty() {
                None
            } else {
                Some(EvalReport::from_ranks(&bin_ranks)?)
            },
        });
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!(
            "bin/query mismatch: '{}' is in no bin",
            query_ids[i]
        )));
    }
    Ok(GroupedReport {
        pooled: EvalReport::from_ranks(ranks)?,
        bins,
    })
}

/// Builds the gallery index for `split` and scores all of its queries.
pub fn score_features(model: &MsSl<f32>, split: &FeatureSplit) -> Result<ScoreTable> {
    let index = VideoIndex::build(model, &split.video_ids, &split.videos)?;
    score_split(model, &index, split)
}

/// Pooled report over a split at one α.
pub fn evaluate_split(model: &MsSl<f32>, split: &FeatureSplit, alpha: f64) -> Result<EvalReport> {
    let table = score_features(model, split)?;
    EvalReport::from_ranks(&ranks_at(&table, split, alpha)?)
}
