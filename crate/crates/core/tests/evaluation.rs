//! Evaluation over a hand-written dataset in the manifest + `MSL1` layout
//! that real feature extractions are converted to.

use std::path::Path;

use mssl_core::commands::{cmd_eval, load_split, EvalSettings, MvBins};
use mssl_core::data::{
    save_manifest, write_feature_matrix, DatasetManifest, FeatureMatrix, Moment, QueryEntry, Split,
    VideoEntry,
};
use mssl_core::eval::{gt_rank, rank_gallery, score_features, RECALL_KS};
use mssl_core::model::{ModelConfig, MsSl};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D_V: usize = 12;
const D_W: usize = 10;

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    FeatureMatrix::new(rows, cols, data).unwrap()
}

/// Six videos, one query each, M/V ratios spread over (0, 1].
fn write_dataset(root: &Path, with_moments: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut videos = Vec::new();
    let mut queries = Vec::new();
    for (i, (frames, moment_len)) in [
        (20, 2.0),
        (30, 6.0),
        (10, 4.0),
        (40, 20.0),
        (25, 20.0),
        (16, 16.0),
    ]
    .into_iter()
    .enumerate()
    {
        let vpath = format!("feats/video{i}.msl");
        write_feature_matrix(root.join(&vpath), &matrix(&mut rng, frames, D_V)).unwrap();
        videos.push(VideoEntry {
            id: format!("video{i}"),
            feature_path: vpath,
            duration: frames as f64,
        });
        let qpath = format!("feats/query{i}.msl");
        write_feature_matrix(root.join(&qpath), &matrix(&mut rng, 5 + i, D_W)).unwrap();
        queries.push(QueryEntry {
            id: format!("query{i}"),
            video_id: format!("video{i}"),
            feature_path: qpath,
            moment: with_moments.then_some(Moment {
                start: 0.0,
                end: moment_len,
            }),
        });
    }
    save_manifest(
        root.join("test.json"),
        &DatasetManifest::new(Split::Test, videos, queries),
    )
    .unwrap();
}

fn model() -> (MsSl<f32>, std::path::PathBuf, tempfile::TempDir) {
    let cfg = ModelConfig {
        video_dim: D_V,
        text_dim: D_W,
        hidden: 8,
        heads: 2,
        ff_width: 16,
        num_units: 4,
        ..ModelConfig::default()
    };
    let m = MsSl::<f32>::new(cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    m.save(&ckpt, serde_json::json!({})).unwrap();
    (m, ckpt, dir)
}

#[test]
fn converted_dataset_is_evaluated_per_mv_bin() {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), true);
    let (_, ckpt, _guard) = model();
    let out = data.path().join("eval");
    let settings = EvalSettings {
        split: Split::Test,
        alpha: 0.5,
        mv_bins: Some(MvBins::Edges(vec![0.0, 0.2, 0.6, 1.0])),
    };
    let report = cmd_eval(&ckpt, data.path(), &settings, Some(&out)).unwrap();
    // Ratios 0.1, 0.2 | 0.4, 0.5 | 0.8, 1.0.
    let counts: Vec<usize> = report
        .bins
        .iter()
        .map(|b| b.report.unwrap().num_queries)
        .collect();
    assert_eq!(counts, vec![2, 2, 2]);
    assert_eq!(report.pooled.num_queries, 6);
    // Six videos: everything is within the top 10.
    assert_eq!(report.pooled.recalls[2], 100.0);
    for f in ["eval.json", "eval_bins.csv", "resolved_config.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn unlabeled_data_evaluates_without_bins_only() {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), false);
    let (_, ckpt, _guard) = model();
    let mut settings = EvalSettings {
        split: Split::Test,
        alpha: 0.5,
        mv_bins: None,
    };
    let report = cmd_eval(&ckpt, data.path(), &settings, None).unwrap();
    assert!(report.bins.is_empty());
    settings.mv_bins = Some(MvBins::EqualCount(3));
    let err = cmd_eval(&ckpt, data.path(), &settings, None).unwrap_err();
    assert_eq!(err.kind().exit_code(), 3);
}

#[test]
fn rankings_follow_the_fused_scores() {
    let data = tempfile::tempdir().unwrap();
    write_dataset(data.path(), true);
    let (m, _, _guard) = model();
    let (_, split) = load_split(data.path(), Split::Test).unwrap();
    let table = score_features(&m, &split).unwrap();
    let fused: Array2<f32> = table.fused(0.3).unwrap();
    for (q, row) in fused.outer_iter().enumerate() {
        let row = row.to_vec();
        let gt = split.query_video[q];
        let list = rank_gallery("q", &row, &split.video_ids, Some(gt), 3).unwrap();
        assert_eq!(list.videos.len(), 3);
        assert!(list.videos.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(list.gt_rank, Some(gt_rank(&row, &split.video_ids, gt)));
        // Direct scoring agrees with the table.
        let direct = m
            .score_raw(split.videos[0].view(), split.queries[q].view(), 0.3)
            .unwrap();
        assert_eq!(direct.fused.to_bits(), row[0].to_bits());
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:03}")).collect()
}

proptest! {
    #[test]
    fn sorted_and_counted_ranks_agree(
        scores in prop::collection::vec(prop::sample::select(vec![-1.0f32, -0.5, 0.0, 0.25, 0.5, 1.0]), 1..40),
        pick in 0usize..1000,
    ) {
        let ids = ids(scores.len());
        let gt = pick % scores.len();
        let sorted = rank_gallery("q", &scores, &ids, Some(gt), scores.len()).unwrap();
        prop_assert_eq!(sorted.gt_rank, Some(gt_rank(&scores, &ids, gt)));
        prop_assert_eq!(&sorted.videos[sorted.gt_rank.unwrap() - 1].0, &ids[gt]);
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(1usize..300, 1..60)) {
        let r: Vec<f64> = RECALL_KS
            .iter()
            .map(|&k| mssl_core::eval::recall_at_k(&ranks, k).unwrap())
            .collect();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }
}
