//! Command implementations behind the `mssl` binary: configuration
//! resolution, dataset synthesis, training, evaluation, α sweeps and
//! ablations. Every command writes a `resolved_config.json` snapshot next to
//! its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    equal_count_edges, generate_synthetic, group_queries_by_mv, load_manifest,
    moment_to_video_ratio, write_synthetic, DatasetManifest, FeatureSplit, MvGroup, Split,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{grouped_eval, ranks_at, score_features, EvalReport, GroupedReport, ScoreTable};
use crate::model::{Branches, FrameAggregation, ModelConfig, MsSl};
use crate::objectives::LossConfig;
use crate::train::{train, TrainConfig, TrainIo, TrainLog, TrainerState};

/// Environment variable naming the default data directory.
pub const DATA_ROOT_ENV: &str = "MSSL_DATA_ROOT";
pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_clip_branch: bool,
    pub disable_frame_branch: bool,
    /// Replace key clip guided attention by learned-vector attention.
    pub simple_attention: bool,
    /// Whole-video mean-pooling baseline (frame branch only).
    pub mean_pool_baseline: bool,
    pub no_triplet: bool,
    pub no_nce: bool,
}

/// Where M/V bin edges come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvBins {
    /// Equal-count bins over the evaluated queries.
    EqualCount(usize),
    Edges(Vec<f64>),
}

impl Default for MvBins {
    fn default() -> Self {
        MvBins::EqualCount(3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
    /// Fusion weight of the clip-scale similarity.
    pub alpha: f64,
    pub mv_bins: MvBins,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            ablation: Ablation::default(),
            alpha: 0.5,
            mv_bins: MvBins::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads a config file. A snapshot written by any command is accepted
    /// too, in which case its embedded configuration is used.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: serde_json::Error| Error::Config(format!("{}: {e}", path.display()));
        let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
        let value = match value.get("config") {
            Some(c) if value.get("command").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(bad)
    }

    /// Applies the ablation switches and the seed, and checks consistency.
    /// Resolution is idempotent.
    pub fn resolve(mut self) -> Result<Self> {
        let a = self.ablation;
        let exclusive = [
            a.disable_clip_branch,
            a.disable_frame_branch,
            a.mean_pool_baseline,
        ]
        .iter()
        .filter(|&&x| x)
        .count();
        if exclusive > 1 {
            return Err(Error::Config(
                "at most one of disable_clip_branch, disable_frame_branch, mean_pool_baseline"
                    .into(),
            ));
        }
        if a.simple_attention && (a.disable_frame_branch || a.mean_pool_baseline) {
            return Err(Error::Config(
                "simple_attention needs the frame branch with attention".into(),
            ));
        }
        if a.disable_clip_branch {
            self.model.branches = Branches::FrameOnly;
            if self.model.frame_aggregation == FrameAggregation::KeyClipGuided {
                self.model.frame_aggregation = FrameAggregation::SimpleAttention;
            }
        }
        if a.disable_frame_branch {
            self.model.branches = Branches::ClipOnly;
        }
        if a.mean_pool_baseline {
            self.model.branches = Branches::FrameOnly;
            self.model.frame_aggregation = FrameAggregation::MeanPool;
        }
        if a.simple_attention {
            self.model.frame_aggregation = FrameAggregation::SimpleAttention;
        }
        if a.no_nce {
            self.loss.use_nce = false;
            self.loss.lambda_clip = 0.0;
            self.loss.lambda_frame = 0.0;
        }
        if a.no_triplet {
            self.loss.use_triplet = false;
        }
        match self.model.branches {
            Branches::FrameOnly => self.alpha = 0.0,
            Branches::ClipOnly => self.alpha = 1.0,
            Branches::Both => {}
        }
        self.train.seed = self.seed;
        self.train.alpha = self.alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        match &self.mv_bins {
            MvBins::EqualCount(0) => return Err(Error::Config("need at least one M/V bin".into())),
            MvBins::Edges(e)
                if (e.len() < 2
                    || e[0] != 0.0
                    || e[e.len() - 1] != 1.0
                    || e.windows(2).any(|w| !(w[0] < w[1]))) =>
            {
                return Err(Error::Config(format!(
                    "M/V edges must rise strictly from 0 to 1, got {e:?}"
                )));
            }
            _ => {}
        }
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }
}

/// Provenance record written beside every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: serde_json::Value,
    pub version: String,
}

pub fn write_snapshot(
    dir: &Path,
    command: &str,
    config: &impl Serialize,
    inputs: serde_json::Value,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let snapshot = Snapshot {
        command: command.into(),
        config: serde_json::to_value(config).map_err(|e| Error::json("snapshot", e))?,
        inputs,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let path = dir.join(SNAPSHOT_FILE);
    write_json(&path, &snapshot)?;
    Ok(path)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The directory holding `train.json`, `val.json` and `test.json`.
pub fn data_root(explicit: Option<&Path>) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.to_path_buf()),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no data directory given and {DATA_ROOT_ENV} is unset"
                ))
            }),
    }
}

pub fn manifest_path(data: &Path, split: Split) -> PathBuf {
    data.join(format!("{}.json", split.name()))
}

pub fn load_split(data: &Path, split: Split) -> Result<(DatasetManifest, FeatureSplit)> {
    let manifest = load_manifest(manifest_path(data, split))?;
    if manifest.split != split {
        return Err(Error::Data(format!(
            "{} declares split '{}'",
            manifest_path(data, split).display(),
            manifest.split.name()
        )));
    }
    let features = manifest.load_features()?;
    Ok((manifest, features))
}

/// Reads a synthetic dataset spec; a `synth` snapshot is accepted too.
pub fn read_synth_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: serde_json::Error| Error::Config(format!("{}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    let value = match value.get("config") {
        Some(c) if value.get("command").is_some() => c.clone(),
        _ => value,
    };
    serde_json::from_value(value).map_err(bad)
}

/// Parses `k` (equal-count bins) or a comma-separated edge list.
pub fn parse_bins(s: &str) -> Result<MvBins> {
    if let Ok(k) = s.trim().parse::<usize>() {
        return Ok(MvBins::EqualCount(k));
    }
    let edges = s
        .split(',')
        .map(|e| e.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| {
            Error::Config(format!(
                "bins must be a count or comma-separated edges, got '{s}'"
            ))
        })?;
    Ok(MvBins::Edges(edges))
}

/// Parses `start:end:step` or a comma-separated list of α values.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = || {
        Error::Config(format!(
            "α grid must be start:end:step or a list, got '{s}'"
        ))
    };
    if s.contains(':') {
        let p: Vec<f64> = s
            .split(':')
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if p.len() != 3 {
            return Err(bad());
        }
        return alpha_grid(p[0], p[1], p[2]);
    }
    let grid: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Config(format!(
            "α values must be in [0, 1], got '{s}'"
        )));
    }
    Ok(grid)
}

pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let ds = generate_synthetic(spec)?;
    let paths = write_synthetic(&ds, out)?;
    write_snapshot(out, "synth", spec, serde_json::json!({}))?;
    Ok(paths)
}

pub struct TrainResult {
    pub config: RunConfig,
    pub log: TrainLog,
    pub best: MsSl<f32>,
    pub best_epoch: Option<usize>,
    pub best_sumr: f64,
}

/// Trains on `data`'s train split with validation on its val split. With
/// `resume`, continues the run stored in `out`.
pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainResult> {
    let (_, train_split) = load_split(data, Split::Train)?;
    let (_, val_split) = load_split(data, Split::Val)?;
    let mut config = config.clone();
    config.model.video_dim = train_split
        .video_dim()
        .ok_or_else(|| Error::Empty("training split has no videos".into()))?;
    config.model.text_dim = train_split
        .text_dim()
        .ok_or_else(|| Error::Empty("training split has no queries".into()))?;
    let config = config.resolve()?;

    let state = if resume {
        let state = TrainerState::load(out)?;
        if state.model.config != config.model {
            return Err(Error::Config(
                "resumed checkpoint was trained with a different model configuration".into(),
            ));
        }
        state
    } else {
        TrainerState::fresh(MsSl::new(config.model, config.seed)?, &config.train)
    };
    write_snapshot(
        out,
        "train",
        &config,
        serde_json::json!({ "data": data, "resume": resume }),
    )?;
    let io = TrainIo {
        out_dir: Some(out.to_path_buf()),
        meta: serde_json::json!({ "run_config": config }),
    };
    let outcome = train(
        state,
        &train_split,
        &val_split,
        &config.train,
        &config.loss,
        &io,
    )?;
    let s = outcome.state;
    Ok(TrainResult {
        config,
        log: s.log,
        best: s.best,
        best_epoch: s.progress.best_epoch,
        best_sumr: s.progress.best_sumr,
    })
}

/// A checkpoint with the run configuration recorded at training time.
pub fn load_checkpoint(dir: &Path) -> Result<(MsSl<f32>, Option<RunConfig>)> {
    let (model, header) = MsSl::<f32>::load(dir)?;
    let config = header
        .meta
        .get("run_config")
        .map(|v| {
            serde_json::from_value(v.clone()).map_err(|e| Error::json("checkpoint run_config", e))
        })
        .transpose()?;
    Ok((model, config))
}

/// Bin edges for `manifest` under `bins`.
pub fn resolve_edges(manifest: &DatasetManifest, bins: &MvBins) -> Result<Vec<f64>> {
    match bins {
        MvBins::Edges(e) => Ok(e.clone()),
        MvBins::EqualCount(k) => {
            let ratios = manifest
                .queries
                .iter()
                .map(|q| {
                    let v = manifest.video(&q.video_id).ok_or_else(|| {
                        Error::Data(format!("dangling video_id '{}'", q.video_id))
                    })?;
                    moment_to_video_ratio(q.moment.as_ref(), v.duration)
                })
                .collect::<Result<Vec<_>>>()?;
            equal_count_edges(&ratios, *k)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub split: Split,
    pub alpha: f64,
    /// `None` skips the M/V breakdown (for data without moment labels).
    pub mv_bins: Option<MvBins>,
}

pub struct EvalResult {
    pub report: GroupedReport,
    pub group: Option<MvGroup>,
    pub table: ScoreTable,
}

/// Evaluates a loaded model on one split.
pub fn evaluate_model(
    model: &MsSl<f32>,
    data: &Path,
    settings: &EvalSettings,
) -> Result<EvalResult> {
    let (manifest, split) = load_split(data, settings.split)?;
    let table = score_features(model, &split)?;
    let ranks = ranks_at(&table, &split, settings.alpha)?;
    let (report, group) = match &settings.mv_bins {
        Some(bins) => {
            let edges = resolve_edges(&manifest, bins)?;
            let group = group_queries_by_mv(&manifest, &edges)?;
            (grouped_eval(&split.query_ids, &ranks, &group)?, Some(group))
        }
        None => (
            GroupedReport {
                pooled: EvalReport::from_ranks(&ranks)?,
                bins: Vec::new(),
            },
            None,
        ),
    };
    Ok(EvalResult {
        report,
        group,
        table,
    })
}

fn bins_csv(report: &GroupedReport) -> String {
    let mut s = String::from("bin,lower,upper,num_queries,R@1,R@5,R@10,R@100,SumR\n");
    let mut row = |label: &str, lo: f64, hi: f64, r: Option<&EvalReport>| match r {
        Some(r) => s.push_str(&format!(
            "\"{label}\",{lo},{hi},{},{:.1},{:.1},{:.1},{:.1},{:.1}\n",
            r.num_queries,
            r.recalls[0],
            r.recalls[1],
            r.recalls[2],
            r.recalls[3],
            r.sum_recall()
        )),
        None => s.push_str(&format!("\"{label}\",{lo},{hi},0,,,,,\n")),
    };
    for b in &report.bins {
        row(&b.label, b.lower, b.upper, b.report.as_ref());
    }
    row("all", 0.0, 1.0, Some(&report.pooled));
    s
}

/// Evaluates a checkpoint. With `out`, writes `eval.json`, `eval_bins.csv`
/// and the snapshot there.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    settings: &EvalSettings,
    out: Option<&Path>,
) -> Result<GroupedReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let result = evaluate_model(&model, data, settings)?;
    if let Some(out) = out {
        let json = serde_json::json!({
            "split": settings.split,
            "alpha": settings.alpha,
            "report": result.report.to_json(),
        });
        write_json(&out.join("eval.json"), &json)?;
        write_text(&out.join("eval_bins.csv"), &bins_csv(&result.report))?;
        write_snapshot(
            out,
            "eval",
            settings,
            serde_json::json!({ "checkpoint": checkpoint, "data": data }),
        )?;
    }
    Ok(result.report)
}

/// `start, start + step, ...` up to `end` inclusive, rounded to 1e-9.
pub fn alpha_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end
    {
        return Err(Error::Config(format!(
            "invalid α grid {start}:{step}:{end}"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// Reports at every α of `grid` from one score table.
pub fn sweep_alpha(
    table: &ScoreTable,
    split: &FeatureSplit,
    grid: &[f64],
) -> Result<Vec<(f64, EvalReport)>> {
    grid.iter()
        .map(|&a| Ok((a, EvalReport::from_ranks(&ranks_at(table, split, a)?)?)))
        .collect()
}

fn sweep_csv(rows: &[(f64, EvalReport)]) -> String {
    let mut s = String::from("alpha,R@1,R@5,R@10,R@100,SumR\n");
    for (a, r) in rows {
        s.push_str(&format!(
            "{a},{:.1},{:.1},{:.1},{:.1},{:.1}\n",
            r.recalls[0],
            r.recalls[1],
            r.recalls[2],
            r.recalls[3],
            r.sum_recall()
        ));
    }
    s
}

pub fn cmd_sweep_alpha(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    grid: &[f64],
    out: Option<&Path>,
) -> Result<Vec<(f64, EvalReport)>> {
    if grid.is_empty() {
        return Err(Error::Config("empty α grid".into()));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let (_, features) = load_split(data, split)?;
    let table = score_features(&model, &features)?;
    let rows = sweep_alpha(&table, &features, grid)?;
    if let Some(out) = out {
        write_text(&out.join("alpha_sweep.csv"), &sweep_csv(&rows))?;
        let json: Vec<_> = rows
            .iter()
            .map(|(a, r)| serde_json::json!({ "alpha": a, "report": r.to_json() }))
            .collect();
        write_json(&out.join("alpha_sweep.json"), &json)?;
        write_snapshot(
            out,
            "sweep-alpha",
            &serde_json::json!({ "split": split, "grid": grid }),
            serde_json::json!({ "checkpoint": checkpoint, "data": data }),
        )?;
    }
    Ok(rows)
}

/// One named configuration of an ablation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub ablation: Ablation,
}

impl Variant {
    pub fn named(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "no_clip" => a.disable_clip_branch = true,
            "no_frame" => a.disable_frame_branch = true,
            "simple_attention" => a.simple_attention = true,
            "mean_pool" => a.mean_pool_baseline = true,
            "no_nce" => a.no_nce = true,
            "no_triplet" => a.no_triplet = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant '{other}' (expected full, no_clip, no_frame, simple_attention, mean_pool, no_nce or no_triplet)"
                )))
            }
        }
        Ok(Self {
            name: name.into(),
            ablation: a,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub split: Split,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            variants: ["full", "no_frame", "no_clip"]
                .iter()
                .map(|n| Variant::named(n).expect("known variant"))
                .collect(),
            seeds: vec![0],
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub alpha: f64,
    pub best_epoch: Option<usize>,
    pub report: GroupedReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn mean_sumr(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.report.pooled.sum_recall())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean SumR of one M/V bin across seeds; empty bins are skipped.
    pub fn mean_bin_sumr(&self, variant: &str, bin: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.report.bins.get(bin).and_then(|b| b.report))
            .map(|r| r.sum_recall())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let nbins = self
            .rows
            .iter()
            .map(|r| r.report.bins.len())
            .max()
            .unwrap_or(0);
        let mut s = String::from("variant,seed,alpha,best_epoch,R@1,R@5,R@10,R@100,SumR");
        for b in 0..nbins {
            s.push_str(&format!(",SumR_bin{b}"));
        }
        s.push('\n');
        for r in &self.rows {
            let p = &r.report.pooled;
            s.push_str(&format!(
                "{},{},{},{},{:.1},{:.1},{:.1},{:.1},{:.1}",
                r.variant,
                r.seed,
                r.alpha,
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                p.recalls[0],
                p.recalls[1],
                p.recalls[2],
                p.recalls[3],
                p.sum_recall()
            ));
            for b in 0..nbins {
                match r.report.bins.get(b).and_then(|b| b.report) {
                    Some(br) => s.push_str(&format!(",{:.1}", br.sum_recall())),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!(self
            .rows
            .iter()
            .map(|r| serde_json::json!({
                "variant": r.variant,
                "seed": r.seed,
                "alpha": r.alpha,
                "best_epoch": r.best_epoch,
                "report": r.report.to_json(),
            }))
            .collect::<Vec<_>>())
    }
}

/// Trains and evaluates every (variant, seed) of `plan` under `out`, one
/// subdirectory per run, then writes `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(
    base: &RunConfig,
    plan: &AblationPlan,
    data: &Path,
    out: &Path,
) -> Result<AblationSummary> {
    if plan.variants.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    write_snapshot(
        out,
        "ablate",
        &serde_json::json!({ "base": base, "plan": plan }),
        serde_json::json!({ "data": data }),
    )?;
    let mut rows = Vec::new();
    for v in &plan.variants {
        for &seed in &plan.seeds {
            let mut cfg = base.clone();
            cfg.ablation = v.ablation;
            cfg.seed = seed;
            let run_dir = out.join(format!("{}_seed{seed}", v.name));
            let trained = cmd_train(&cfg, data, &run_dir, false)?;
            let settings = EvalSettings {
                split: plan.split,
                alpha: trained.config.alpha,
                mv_bins: Some(trained.config.mv_bins.clone()),
            };
            let result = evaluate_model(&trained.best, data, &settings)?;
            log::info!(
                "{} seed {seed}: SumR {:.1}",
                v.name,
                result.report.pooled.sum_recall()
            );
            rows.push(AblationRow {
                variant: v.name.clone(),
                seed,
                alpha: settings.alpha,
                best_epoch: trained.best_epoch,
                report: result.report,
            });
        }
    }
    let summary = AblationSummary { rows };
    write_text(&out.join("ablation.csv"), &summary.to_csv())?;
    write_json(&out.join("ablation.json"), &summary.to_json())?;
    Ok(summary)
}
