//! Moment-to-video ratio (M/V): how much of a video its query describes.

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Moment};
use crate::error::{Error, Result};

/// `(end - start) / duration`, in `(0, 1]` for a valid moment.
pub fn moment_to_video_ratio(moment: Option<&Moment>, duration: f64) -> Result<f64> {
    let m = moment.ok_or_else(|| Error::Data("no moment annotation".into()))?;
    if !(duration > 0.0) {
        return Err(Error::Data(format!("duration must be > 0, got {duration}")));
    }
    if !(m.start < m.end) || m.start < 0.0 || m.end > duration {
        return Err(Error::Data(format!(
            "moment ({}, {}) invalid for duration {duration}",
            m.start, m.end
        )));
    }
    Ok(m.length() / duration)
}

/// Queries partitioned into M/V bins `(edges[i], edges[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvGroup {
    pub edges: Vec<f64>,
    pub bins: Vec<Vec<String>>,
}

impl MvGroup {
    pub fn label(&self, bin: usize) -> String {
        format!("({:.3}, {:.3}]", self.edges[bin], self.edges[bin + 1])
    }
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Config("M/V bins need at least two edges".into()));
    }
    if edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(Error::Config(format!(
            "M/V edges must start at 0 and end at 1, got {edges:?}"
        )));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "M/V edges must be strictly increasing, got {edges:?}"
        )));
    }
    Ok(())
}

fn bin_of(edges: &[f64], ratio: f64) -> usize {
    // First bin whose upper edge reaches the ratio.
    edges[1..]
        .iter()
        .position(|&upper| ratio <= upper)
        .unwrap_or(edges.len() - 2)
}

pub fn group_queries_by_mv(manifest: &DatasetManifest, edges: &[f64]) -> Result<MvGroup> {
    validate_edges(edges)?;
    let missing: Vec<&str> = manifest
        .queries
        .iter()
        .filter(|q| q.moment.is_none())
        .map(|q| q.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no moment annotation for queries: {}",
            missing.join(", ")
        )));
    }
    let mut bins = vec![Vec::new(); edges.len() - 1];
    for q in &manifest.queries {
        let video = manifest
            .video(&q.video_id)
            .ok_or_else(|| Error::Data(format!("dangling video_id '{}'", q.video_id)))?;
        let ratio = moment_to_video_ratio(q.moment.as_ref(), video.duration)?;
        bins[bin_of(edges, ratio)].push(q.id.clone());
    }
    Ok(MvGroup {
        edges: edges.to_vec(),
        bins,
    })
}

/// Edges splitting `ratios` into `k` groups of (nearly) equal size. Tied
/// ratios never straddle an edge, so fewer than `k` bins may result.
pub fn equal_count_edges(ratios: &[f64], k: usize) -> Result<Vec<f64>> {
    if ratios.is_empty() || k == 0 {
        return Err(Error::Empty(
            "equal_count_edges needs ratios and k >= 1".into(),
        ));
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges = vec![0.0];
    for i in 1..k {
        let cut = (i * n) / k;
        if cut == 0 {
            continue;
        }
        let e = sorted[cut - 1];
        if e > *edges.last().unwrap() && e < 1.0 {
            edges.push(e);
        }
    }
    edges.push(1.0);
    Ok(edges)
}
