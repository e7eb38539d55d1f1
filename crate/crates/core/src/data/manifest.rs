use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::feature::{read_feature_header, read_feature_matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A contiguous span in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub start: f64,
    pub end: f64,
}

impl Moment {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub feature_path: String,
    /// Seconds.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: String,
    pub video_id: String,
    pub feature_path: String,
    /// Evaluation-only annotation; never part of a [`FeatureSplit`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment: Option<Moment>,
}

/// One split of a dataset. Feature paths are relative to the directory
/// holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub videos: Vec<VideoEntry>,
    pub queries: Vec<QueryEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Features of a split, loaded into memory. Carries no moment annotations,
/// so nothing downstream of it can train on them.
#[derive(Debug, Clone)]
pub struct FeatureSplit {
    pub video_ids: Vec<String>,
    pub query_ids: Vec<String>,
    /// `n_v x d_v` per video.
    pub videos: Vec<Array2<f32>>,
    /// `n_q x d_w` per query.
    pub queries: Vec<Array2<f32>>,
    /// Index into `videos` of each query's relevant video.
    pub query_video: Vec<usize>,
}

impl FeatureSplit {
    pub fn video_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.ncols())
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.queries.first().map(|q| q.ncols())
    }
}

impl DatasetManifest {
    pub fn new(split: Split, videos: Vec<VideoEntry>, queries: Vec<QueryEntry>) -> Self {
        Self {
            split,
            videos,
            queries,
            root: PathBuf::new(),
        }
    }

    fn fail(&self, message: String) -> Error {
        Error::Manifest {
            path: self.root.clone(),
            message,
        }
    }

    pub fn resolve(&self, feature_path: &str) -> PathBuf {
        self.root.join(feature_path)
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Checks ids, references and moment bounds. Does not touch the disk.
    pub fn validate(&self) -> Result<()> {
        let mut durations = HashMap::new();
        for v in &self.videos {
            if durations.insert(v.id.as_str(), v.duration).is_some() {
                return Err(self.fail(format!("duplicate video id '{}'", v.id)));
            }
            if !(v.duration > 0.0) {
                return Err(self.fail(format!(
                    "video '{}': duration must be > 0, got {}",
                    v.id, v.duration
                )));
            }
        }
        let mut seen = HashSet::new();
        for q in &self.queries {
            if !seen.insert(q.id.as_str()) {
                return Err(self.fail(format!("duplicate query id '{}'", q.id)));
            }
            let Some(&duration) = durations.get(q.video_id.as_str()) else {
                return Err(self.fail(format!(
                    "dangling video_id '{}' in query '{}'",
                    q.video_id, q.id
                )));
            };
            if let Some(m) = q.moment {
                if !(m.start < m.end) {
                    return Err(self.fail(format!(
                        "query '{}': moment ({}, {}): start < end violated",
                        q.id, m.start, m.end
                    )));
                }
                if m.start < 0.0 || m.end > duration {
                    return Err(self.fail(format!(
                        "query '{}': moment ({}, {}) outside [0, {duration}]",
                        q.id, m.start, m.end
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        let entries = self
            .videos
            .iter()
            .map(|v| (&v.id, &v.feature_path))
            .chain(self.queries.iter().map(|q| (&q.id, &q.feature_path)));
        for (id, rel) in entries {
            let path = self.resolve(rel);
            if !path.is_file() {
                return Err(self.fail(format!(
                    "entry '{id}': missing feature file {}",
                    path.display()
                )));
            }
            let (rows, cols) = read_feature_header(&path)?;
            if rows == 0 || cols == 0 {
                return Err(self.fail(format!("entry '{id}': empty feature matrix {rows}x{cols}")));
            }
        }
        Ok(())
    }

    /// Loads every feature matrix, dropping moment annotations.
    pub fn load_features(&self) -> Result<FeatureSplit> {
        let index: HashMap<&str, usize> = self
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.as_str(), i))
            .collect();
        let videos = self
            .videos
            .iter()
            .map(|v| Ok(read_feature_matrix(self.resolve(&v.feature_path))?.to_array()))
            .collect::<Result<Vec<_>>>()?;
        let queries = self
            .queries
            .iter()
            .map(|q| Ok(read_feature_matrix(self.resolve(&q.feature_path))?.to_array()))
            .collect::<Result<Vec<_>>>()?;
        let query_video = self
            .queries
            .iter()
            .map(|q| {
                index
                    .get(q.video_id.as_str())
                    .copied()
                    .ok_or_else(|| self.fail(format!("dangling video_id '{}'", q.video_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureSplit {
            video_ids: self.videos.iter().map(|v| v.id.clone()).collect(),
            query_ids: self.queries.iter().map(|q| q.id.clone()).collect(),
            videos,
            queries,
            query_video,
        })
    }
}

/// Parses and validates a manifest, including presence of every feature file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate().map_err(|e| match e {
        Error::Manifest { message, .. } => Error::Manifest {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })?;
    m.check_files()?;
    Ok(m)
}

pub fn save_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::json("manifest", e))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
