//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5 to 7 share one synthetic experiment (four variants, three
//! seeds), which dominates the runtime.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use mssl_core::commands::{
    cmd_ablate, cmd_eval, cmd_sweep_alpha, cmd_synth, cmd_train, load_checkpoint, load_split,
    AblationPlan, AblationSummary, EvalSettings, RunConfig, Variant, SNAPSHOT_FILE,
};
use mssl_core::data::{Split, SyntheticSpec};
use mssl_core::eval::{
    rank_gallery, ranks_at, recall_at_k, score_features, EvalReport, ScoreTable, VideoIndex,
    RECALL_KS,
};
use mssl_core::model::{Branches, FrameAggregation, MsSl};
use mssl_core::nn::{attention_pool, softmax, ParamInit};
use mssl_core::similarity::{kcga, KcgaParams};
use mssl_core::train::TrainLog;
use mssl_core::video::{build_clips, clip_count, clip_spans};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn check(failures: &mut Vec<String>, id: &str, what: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let o = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    };
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!(
        "{tag} [{id}] {what}: {} ({:.1}s)",
        o.detail,
        start.elapsed().as_secs_f64()
    );
    if !o.passed {
        failures.push(id.to_string());
    }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_primitive = 0.0f64;
    let mut bad = Vec::new();
    for r in primitive_suite() {
        worst_primitive = worst_primitive.max(r.max_rel_error);
        if !r.passed() {
            bad.push(format!("{} {:.2e}", r.name, r.max_rel_error));
        }
    }
    let mut worst_total = 0.0f64;
    for (branches, agg, scaled, epoch) in [
        (Branches::Both, FrameAggregation::KeyClipGuided, false, 0),
        (Branches::Both, FrameAggregation::KeyClipGuided, true, 25),
        (
            Branches::FrameOnly,
            FrameAggregation::SimpleAttention,
            false,
            0,
        ),
        (Branches::FrameOnly, FrameAggregation::MeanPool, false, 0),
        (
            Branches::ClipOnly,
            FrameAggregation::KeyClipGuided,
            false,
            0,
        ),
    ] {
        let (err, at) = total_loss_oracle(tiny_config(branches, agg, scaled), active_loss(), epoch);
        worst_total = worst_total.max(err);
        if err >= END_TO_END_BOUND {
            bad.push(format!("total_loss {branches:?}/{agg:?} {err:.2e} at {at}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 300.0 {
        bad.push(format!("runtime {secs:.0}s"));
    }
    outcome(
        bad.is_empty(),
        format!(
            "primitives max rel err {worst_primitive:.2e} (< {PRIMITIVE_BOUND:e}), total loss {worst_total:.2e} (< {END_TO_END_BOUND:e}), {secs:.1}s{}",
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn structural() -> Outcome {
    let mut problems = Vec::new();

    for (n_u, expected) in [(1, 1), (2, 3), (3, 6), (8, 36), (32, 528)] {
        if clip_count(n_u) != expected || clip_spans(n_u).len() != expected {
            problems.push(format!("clip count at n_u={n_u}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let units = random(32, 16, &mut rng);
    let view = build_clips(units.clone()).unwrap();
    let mut clip_mean_err = 0.0f64;
    for (c, span) in view.spans.iter().enumerate() {
        for j in 0..units.ncols() {
            let mean: f64 =
                (span.start..span.end).map(|u| units[[u, j]]).sum::<f64>() / span.len() as f64;
            clip_mean_err = clip_mean_err.max((view.clips[[c, j]] - mean).abs());
        }
    }
    if clip_mean_err > 1e-6 {
        problems.push(format!("clip mean error {clip_mean_err:e}"));
    }

    let mut weight_err = 0.0f64;
    for n in [1, 2, 7, 64] {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        weight_err = weight_err.max((softmax(&logits).iter().sum::<f64>() - 1.0).abs());
        let seq = random(n, 8, &mut rng);
        let w = Array1::from_iter((0..8).map(|_| rng.random_range(-2.0..2.0)));
        let (_, cache) = attention_pool(seq.view(), w.view());
        weight_err = weight_err.max((cache.weights.iter().sum::<f64>() - 1.0).abs());
        let params = KcgaParams::<f64>::new(&mut ParamInit::new(n as u64), 8);
        let key: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        for scaled in [1.0, 1.0 / 8f64.sqrt()] {
            let out = kcga(seq.view(), &key, &params, scaled).unwrap();
            weight_err = weight_err.max((out.weights.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if weight_err > 1e-6 {
        problems.push(format!("weight normalization error {weight_err:e}"));
    }

    for _ in 0..50 {
        let ranks: Vec<usize> = (0..37).map(|_| rng.random_range(1..=150)).collect();
        let r: Vec<f64> = RECALL_KS
            .iter()
            .map(|&k| recall_at_k(&ranks, k).unwrap())
            .collect();
        if r.windows(2).any(|w| w[0] > w[1]) {
            problems.push("R@K not monotone".into());
            break;
        }
    }

    match index_equivalence() {
        Ok(()) => {}
        Err(e) => problems.push(e),
    }

    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("clip counts, clip means (max err {clip_mean_err:.1e}), weight sums (max err {weight_err:.1e}), R@K monotone, saved index bit-equal to direct scoring")
        } else {
            problems.join("; ")
        },
    )
}

/// A saved and reloaded index scores every (query, video) pair bit-for-bit
/// like end-to-end scoring of the raw features.
fn index_equivalence() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = tiny_config(Branches::Both, FrameAggregation::KeyClipGuided, true);
    cfg.num_units = 8;
    let model = MsSl::<f32>::new(cfg, 17).unwrap();
    let ids: Vec<String> = (0..4).map(|i| format!("v{i}")).collect();
    let videos: Vec<Array2<f32>> = [5, 9, 14, 30]
        .iter()
        .map(|&n| random(n, cfg.video_dim, &mut rng).mapv(|x| x as f32))
        .collect();
    let queries: Vec<Array2<f32>> = [3, 6]
        .iter()
        .map(|&n| random(n, cfg.text_dim, &mut rng).mapv(|x| x as f32))
        .collect();
    let index = VideoIndex::build(&model, &ids, &videos).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    index.save(dir.path()).map_err(|e| e.to_string())?;
    let loaded = VideoIndex::load(dir.path()).map_err(|e| e.to_string())?;
    for q in &queries {
        let e = model.encode_query(q.view()).unwrap();
        let got = loaded.score_query(&e.pooled).map_err(|e| e.to_string())?;
        for (v, g) in videos.iter().zip(&got) {
            let want = model.score_raw(v.view(), q.view(), 0.5).unwrap();
            let bits = |x: Option<f32>| x.map(f32::to_bits);
            if bits(g.clip) != bits(want.clip)
                || bits(g.frame) != bits(want.frame)
                || g.fused.to_bits() != want.fused.to_bits()
                || g.key_index != want.key_index
            {
                return Err(format!("index score {g:?} differs from direct {want:?}"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- 3

/// Prescribed fixture: 10 videos, 20 queries, scores on a coarse grid so
/// that ties occur and exercise the id tie-break. Ground-truth scores cycle
/// from top to bottom so ranks spread over the whole gallery.
fn metric_fixture() -> (Vec<String>, Vec<Vec<f32>>, Vec<usize>) {
    let ids: Vec<String> = (0..10).map(|j| format!("vid{j:02}")).collect();
    let mut scores = Vec::new();
    let mut gt = Vec::new();
    let gt_scores = [1.0, 0.9, 0.6, 0.3, 0.0];
    for q in 0..20usize {
        let mut row: Vec<f32> = (0..10usize)
            .map(|j| ((q * 7 + j * 13 + q * j) % 11) as f32 / 10.0)
            .collect();
        let g = (q * 3) % 10;
        row[g] = gt_scores[q % 5];
        scores.push(row);
        gt.push(g);
    }
    (ids, scores, gt)
}

/// 1-based position of `gt` found by testing every candidate position:
/// the rank is `p` exactly when `p - 1` videos precede it.
fn brute_force_rank(scores: &[f32], ids: &[String], gt: usize) -> usize {
    let precedes = |j: usize| {
        j != gt && (scores[j] > scores[gt] || (scores[j] == scores[gt] && ids[j] < ids[gt]))
    };
    (1..=scores.len())
        .find(|&p| (0..scores.len()).filter(|&j| precedes(j)).count() == p - 1)
        .unwrap()
}

fn metric_oracle() -> Outcome {
    let (ids, scores, gt) = metric_fixture();
    let mut oracle_ranks = Vec::new();
    let mut ranks = Vec::new();
    for (q, row) in scores.iter().enumerate() {
        oracle_ranks.push(brute_force_rank(row, &ids, gt[q]));
        ranks.push(
            rank_gallery(&format!("q{q}"), row, &ids, Some(gt[q]), 10)
                .unwrap()
                .gt_rank
                .unwrap(),
        );
    }
    let report = EvalReport::from_ranks(&ranks).unwrap();
    let oracle: Vec<f64> = RECALL_KS
        .iter()
        .map(|&k| {
            let hits = oracle_ranks.iter().filter(|&&r| r <= k).count();
            100.0 * hits as f64 / 20.0
        })
        .collect();
    let sumr_oracle: f64 = oracle.iter().sum();
    let fixture_ok = report.recalls.to_vec() == oracle && report.sum_recall() == sumr_oracle;

    let table2 = EvalReport::from_recalls([13.5, 32.1, 43.4, 83.4]).to_json();
    let table2_ok = table2["SumR"].as_f64() == Some(172.4);
    outcome(
        fixture_ok && table2_ok,
        format!(
            "fixture recalls {:?} SumR {} vs brute force {oracle:?} SumR {sumr_oracle}; 13.5+32.1+43.4+83.4 -> {}",
            report.recalls,
            report.sum_recall(),
            table2["SumR"]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn readme_documents_conversion() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let Ok(text) = fs::read_to_string(&path) else {
        return outcome(false, format!("{} missing", path.display()));
    };
    let needed = [
        "MSL1",
        "manifest",
        "train.json",
        "val.json",
        "test.json",
        "mssl train",
    ];
    let missing: Vec<_> = needed.iter().filter(|n| !text.contains(*n)).collect();
    outcome(
        missing.is_empty(),
        if missing.is_empty() {
            "README documents the manifest + MSL1 conversion path; no gate depends on real-dataset numbers".to_string()
        } else {
            format!("README lacks {missing:?}")
        },
    )
}

// ---------------------------------------------------------------- 5-7

const SEEDS: [u64; 3] = [0, 1, 2];
const VARIANTS: [&str; 4] = ["full", "no_clip", "no_frame", "mean_pool"];

/// 300/50/100 videos, 32-D features, 40-80 frames, M/V in 0.1-0.5, noise
/// σ 0.1; two annotated moments per video.
fn experiment_spec() -> SyntheticSpec {
    SyntheticSpec {
        queries_per_video: 2,
        ..SyntheticSpec::default()
    }
}

fn experiment_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.hidden = 64;
    c.model.heads = 2;
    c.model.ff_width = 256;
    c.model.kcga_scaled = true;
    c.train.lr = 1e-3;
    c.train.max_epochs = 40;
    c.loss.hard_negative_epoch = 20;
    c
}

struct Experiment {
    data: PathBuf,
    out: PathBuf,
    summary: AblationSummary,
}

fn run_experiment(root: &Path) -> Result<Experiment, String> {
    let data = root.join("data");
    let out = root.join("ablation");
    cmd_synth(&experiment_spec(), &data).map_err(|e| e.to_string())?;
    let plan = AblationPlan {
        variants: VARIANTS
            .iter()
            .map(|n| Variant::named(n).unwrap())
            .collect(),
        seeds: SEEDS.to_vec(),
        split: Split::Test,
    };
    let summary =
        cmd_ablate(&experiment_config(), &plan, &data, &out).map_err(|e| e.to_string())?;
    Ok(Experiment { data, out, summary })
}

fn ablation_ordering(x: &Experiment) -> Outcome {
    let m: BTreeMap<&str, f64> = VARIANTS
        .iter()
        .map(|v| (*v, x.summary.mean_sumr(v).unwrap()))
        .collect();
    let full = m["full"];
    let ok = ["mean_pool", "no_clip", "no_frame"]
        .iter()
        .all(|v| full > m[v]);
    outcome(
        ok,
        format!(
            "mean SumR over seeds {SEEDS:?}: full {full:.1}, mean_pool {:.1}, no_clip {:.1}, no_frame {:.1}",
            m["mean_pool"], m["no_clip"], m["no_frame"]
        ),
    )
}

fn mv_gap(x: &Experiment) -> Outcome {
    let s = &x.summary;
    let nbins = s.rows[0].report.bins.len();
    if nbins != 3 {
        return outcome(false, format!("expected 3 M/V bins, got {nbins}"));
    }
    let gap =
        |b: usize| s.mean_bin_sumr("full", b).unwrap() - s.mean_bin_sumr("mean_pool", b).unwrap();
    let (low, high) = (gap(0), gap(2));
    outcome(
        low > 0.0 && low >= high,
        format!("SumR gap full - mean_pool: lowest-M/V bin {low:+.1}, middle {:+.1}, highest {high:+.1}", gap(1)),
    )
}

fn alpha_sweep(x: &Experiment) -> Outcome {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let (_, test) = load_split(&x.data, Split::Test).unwrap();
    let mut mean = vec![0.0; grid.len()];
    let mut problems = Vec::new();
    for seed in SEEDS {
        let ckpt = x.out.join(format!("full_seed{seed}")).join("best");
        let (model, _) = load_checkpoint(&ckpt).unwrap();
        let table = score_features(&model, &test).unwrap();
        // Endpoints against branch-only tables.
        for (alpha, branch) in [(1.0, table.clip.clone()), (0.0, table.frame.clone())] {
            let branch = branch.unwrap();
            let fused = table.fused(alpha).unwrap();
            let same = fused
                .iter()
                .zip(&branch)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            let only = ScoreTable {
                clip: (alpha == 1.0).then(|| branch.clone()),
                frame: (alpha == 0.0).then(|| branch.clone()),
                ..table.clone()
            };
            let ranks_same =
                ranks_at(&table, &test, alpha).unwrap() == ranks_at(&only, &test, 0.5).unwrap();
            if !same || !ranks_same {
                problems.push(format!(
                    "seed {seed}: α={alpha} differs from branch-only evaluation"
                ));
            }
        }
        let sweep_dir = x.out.join(format!("full_seed{seed}")).join("sweep");
        let rows = cmd_sweep_alpha(&ckpt, &x.data, Split::Test, &grid, Some(&sweep_dir)).unwrap();
        if !sweep_dir.join("alpha_sweep.csv").is_file() {
            problems.push(format!("seed {seed}: sweep table not written"));
        }
        for (i, (_, r)) in rows.iter().enumerate() {
            mean[i] += r.sum_recall() / SEEDS.len() as f64;
        }
    }
    let endpoints = mean[0].max(mean[grid.len() - 1]);
    let (best_i, best) =
        mean[1..grid.len() - 1]
            .iter()
            .enumerate()
            .fold(
                (0, f64::MIN),
                |acc, (i, &v)| if v > acc.1 { (i + 1, v) } else { acc },
            );
    if best < endpoints - 1.0 {
        problems.push("no interior α within 1.0 of the best endpoint".into());
    }
    let curve: Vec<String> = grid
        .iter()
        .zip(&mean)
        .map(|(a, s)| format!("{a}:{s:.1}"))
        .collect();
    outcome(
        problems.is_empty(),
        format!(
            "endpoints bit-equal to branch-only tables; mean SumR α=0 {:.1}, α=1 {:.1}, best interior α={} {best:.1} [{}]{}",
            mean[0],
            mean[grid.len() - 1],
            grid[best_i],
            curve.join(" "),
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 8

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            );
        }
    }
    out
}

fn determinism(experiment_out: Option<&Path>) -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let spec = SyntheticSpec {
        num_videos: 40,
        num_val_videos: 10,
        num_test_videos: 10,
        seed: 3,
        ..SyntheticSpec::default()
    };
    cmd_synth(&spec, &data).unwrap();
    let mut cfg = experiment_config();
    cfg.train.max_epochs = 4;
    cfg.train.batch_size = 16;
    cfg.loss.hard_negative_epoch = 2;
    cfg.model.dropout = 0.1;
    cfg.seed = 11;

    let a = root.path().join("a");
    let b = root.path().join("b");
    let first = cmd_train(&cfg, &data, &a, false).unwrap();
    // The second run is configured only from the first run's snapshot.
    let from_snapshot = RunConfig::from_file(a.join(SNAPSHOT_FILE)).unwrap();
    let second = cmd_train(&from_snapshot, &data, &b, false).unwrap();

    let mut problems = Vec::new();
    if first.log.without_timing() != second.log.without_timing() {
        problems.push("in-memory logs differ".to_string());
    }
    let read_log = |d: &Path| {
        TrainLog::read_jsonl(d.join("train_log.jsonl"))
            .unwrap()
            .without_timing()
    };
    if read_log(&a) != read_log(&b) {
        problems.push("train_log.jsonl files differ".into());
    }
    for sub in ["best", "last"] {
        if dir_bytes(&a.join(sub)) != dir_bytes(&b.join(sub)) {
            problems.push(format!("{sub} checkpoint bytes differ"));
        }
    }

    // Every command output carries a snapshot that parses back.
    let mut dirs = vec![data.clone(), a.clone()];
    let ev = root.path().join("eval");
    cmd_eval(
        &a.join("best"),
        &data,
        &EvalSettings {
            split: Split::Test,
            alpha: 0.5,
            mv_bins: Some(Default::default()),
        },
        Some(&ev),
    )
    .unwrap();
    dirs.push(ev);
    let sw = root.path().join("sweep");
    cmd_sweep_alpha(
        &a.join("best"),
        &data,
        Split::Test,
        &[0.0, 0.5, 1.0],
        Some(&sw),
    )
    .unwrap();
    dirs.push(sw);
    if let Some(out) = experiment_out {
        dirs.push(out.to_path_buf());
    }
    for d in &dirs {
        let p = d.join(SNAPSHOT_FILE);
        let parsed = fs::read_to_string(&p)
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok());
        match parsed {
            Some(v) if v.get("config").is_some() && v.get("version").is_some() => {}
            _ => problems.push(format!("{} missing or malformed", p.display())),
        }
    }
    let synth_back: SyntheticSpec = serde_json::from_value(
        serde_json::from_str::<serde_json::Value>(
            &fs::read_to_string(data.join(SNAPSHOT_FILE)).unwrap(),
        )
        .unwrap()["config"]
            .clone(),
    )
    .unwrap();
    if synth_back != spec {
        problems.push("synth snapshot does not re-create the spec".into());
    }

    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} epochs twice: identical logs (timing excluded) and checkpoint bytes; second run configured from the first run's snapshot; {} snapshots checked",
                first.log.epochs().count(),
                dirs.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let mut failures = Vec::new();
    check(&mut failures, "1", "gradient oracle suite", gradient_suite);
    check(&mut failures, "2", "structural invariants", structural);
    check(&mut failures, "3", "metric oracle", metric_oracle);
    check(
        &mut failures,
        "4",
        "real-dataset conversion path documented",
        readme_documents_conversion,
    );

    let root = match std::env::var_os("MSSL_ACCEPTANCE_DIR") {
        Some(d) => {
            let d = PathBuf::from(d);
            fs::create_dir_all(&d).unwrap();
            (None, d)
        }
        None => {
            let t = tempfile::tempdir().unwrap();
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    let start = Instant::now();
    let experiment = run_experiment(&root.1);
    let secs = start.elapsed().as_secs_f64();
    match &experiment {
        Ok(x) => {
            println!("     synthetic experiment: 4 variants x 3 seeds in {secs:.0}s");
            check(&mut failures, "5", "synthetic ablation ordering", || {
                ablation_ordering(x)
            });
            check(&mut failures, "6", "M/V sensitivity", || mv_gap(x));
            check(&mut failures, "7", "α sweep", || alpha_sweep(x));
        }
        Err(e) => {
            for id in ["5", "6", "7"] {
                println!("FAIL [{id}] synthetic experiment did not run: {e}");
                failures.push(id.to_string());
            }
        }
    }
    let out = experiment.as_ref().ok().map(|x| x.out.clone());
    check(&mut failures, "8", "determinism and snapshots", || {
        determinism(out.as_deref())
    });

    if failures.is_empty() {
        println!("acceptance: all 8 criteria passed");
    } else {
        println!("acceptance: failing criteria {}", failures.join(", "));
        std::process::exit(1);
    }
}
