//! Finite-difference gradient oracles shared by the integration tests.
#![allow(dead_code)]

use mssl_core::model::{Branches, FrameAggregation, ModelConfig, MsSl};
use mssl_core::nn::{
    attention_pool, attention_pool_backward, grad_check, grad_check_params, zeros_like, FcRelu,
    ParamInit, TransformerLayer, TransformerLayerConfig,
};
use mssl_core::objectives::{
    info_nce, select_negatives, triplet_loss_with, BatchSimilarities, LossConfig, NegativeMode,
    Positivity,
};
use mssl_core::similarity::{kcga, kcga_backward, KcgaParams};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const EPS: f64 = 1e-5;
pub const PRIMITIVE_BOUND: f64 = 1e-5;
pub const END_TO_END_BOUND: f64 = 1e-4;

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn shaped(x: &[f64], like: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec(like.dim(), x.to_vec()).unwrap()
}

/// `sum(R * y)` for a fixed random `R`: a generic scalar probe of an output.
fn probe(y: &Array2<f64>, r: &Array2<f64>) -> f64 {
    (y * r).sum()
}

pub struct OracleResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub bound: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.bound
    }
}

pub fn fc_relu() -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layer = FcRelu::<f64>::new(&mut ParamInit::new(2), 6, 5);
    let x = random(4, 6, &mut rng);
    let r = random(4, 5, &mut rng);
    let (_, cache) = layer.forward(x.view()).unwrap();
    // Keep every pre-activation clear of the ReLU kink.
    assert!(cache.pre_activation.iter().all(|p| p.abs() > 1e-3));
    let mut grad = zeros_like(&layer);
    let dx = layer.backward(x.view(), &cache, r.view(), &mut grad);
    let ex = grad_check(
        |v| probe(&layer.forward(shaped(v, &x).view()).unwrap().0, &r),
        &flat(&x),
        &flat(&dx),
        EPS,
    )
    .unwrap();
    let (ep, _) = grad_check_params(
        &layer,
        &grad,
        |m| probe(&m.forward(x.view()).unwrap().0, &r),
        EPS,
    )
    .unwrap();
    OracleResult {
        name: "fc_relu",
        max_rel_error: ex.max(ep),
        bound: PRIMITIVE_BOUND,
    }
}

pub fn transformer_layer() -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = TransformerLayerConfig {
        hidden: 8,
        heads: 2,
        ff_width: 16,
        dropout: 0.0,
    };
    let layer = TransformerLayer::<f64>::new(&mut ParamInit::new(4), &cfg);
    let x = random(5, 8, &mut rng);
    let r = random(5, 8, &mut rng);
    let (_, cache) = layer.forward(x.view(), None).unwrap();
    let mut grad = zeros_like(&layer);
    let dx = layer.backward(&cache, r.view(), &mut grad);
    let ex = grad_check(
        |v| probe(&layer.forward(shaped(v, &x).view(), None).unwrap().0, &r),
        &flat(&x),
        &flat(&dx),
        EPS,
    )
    .unwrap();
    let (ep, _) = grad_check_params(
        &layer,
        &grad,
        |m| probe(&m.forward(x.view(), None).unwrap().0, &r),
        EPS,
    )
    .unwrap();
    OracleResult {
        name: "transformer_layer",
        max_rel_error: ex.max(ep),
        bound: PRIMITIVE_BOUND,
    }
}

pub fn attention_pool_oracle() -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = random(6, 4, &mut rng);
    let w = random(1, 4, &mut rng);
    let r = random(1, 4, &mut rng);
    let f = |s: &Array2<f64>, w: &Array2<f64>| {
        let (p, _) = attention_pool(s.view(), w.row(0));
        p.dot(&r.row(0))
    };
    let (_, cache) = attention_pool(seq.view(), w.row(0));
    let (ds, dw) = attention_pool_backward(seq.view(), w.row(0), &cache, r.row(0));
    let es = grad_check(|v| f(&shaped(v, &seq), &w), &flat(&seq), &flat(&ds), EPS).unwrap();
    let ew = grad_check(|v| f(&seq, &shaped(v, &w)), &flat(&w), &dw.to_vec(), EPS).unwrap();
    OracleResult {
        name: "attention_pool",
        max_rel_error: es.max(ew),
        bound: PRIMITIVE_BOUND,
    }
}

pub fn kcga_oracle(scaled: bool) -> OracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 6;
    let params = KcgaParams::<f64>::new(&mut ParamInit::new(8), d);
    let frames = random(5, d, &mut rng);
    let clip = random(1, d, &mut rng);
    let r: Array1<f64> = random(1, d, &mut rng).row(0).to_owned();
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let f = |fr: &Array2<f64>, c: &Array2<f64>, p: &KcgaParams<f64>| {
        kcga(fr.view(), c.as_slice().unwrap(), p, scale)
            .unwrap()
            .aggregated
            .dot(&r)
    };
    let out = kcga(frames.view(), clip.as_slice().unwrap(), &params, scale).unwrap();
    let mut grad = zeros_like(&params);
    let (df, dc) = kcga_backward(
        frames.view(),
        clip.as_slice().unwrap(),
        &params,
        scale,
        &out,
        r.as_slice().unwrap(),
        &mut grad,
    );
    let ef = grad_check(
        |v| f(&shaped(v, &frames), &clip, &params),
        &flat(&frames),
        &flat(&df),
        EPS,
    )
    .unwrap();
    let ec = grad_check(
        |v| f(&frames, &shaped(v, &clip), &params),
        &flat(&clip),
        &dc.to_vec(),
        EPS,
    )
    .unwrap();
    let (ep, _) = grad_check_params(&params, &grad, |p| f(&frames, &clip, p), EPS).unwrap();
    OracleResult {
        name: if scaled { "kcga (scaled)" } else { "kcga" },
        max_rel_error: ef.max(ec).max(ep),
        bound: PRIMITIVE_BOUND,
    }
}

/// A 5x5 similarity matrix where pairs 0 and 4 share a video.
fn similarity_fixture() -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random(5, 5, &mut rng).mapv(|v| (0.4 * v).tanh());
    (s, vec![0, 1, 2, 3, 0])
}

pub fn triplet_oracle(mode: NegativeMode) -> OracleResult {
    let (s, video_of) = similarity_fixture();
    let margin = 0.6;
    let bs = BatchSimilarities::new(s.clone(), &video_of).unwrap();
    let negs = select_negatives(&bs, mode, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // Every hinge must be clear of its kink.
    for i in 0..5 {
        for h in [
            margin + s[[negs.query[i], i]] - s[[i, i]],
            margin + s[[i, negs.video[i]]] - s[[i, i]],
        ] {
            assert!(h.abs() > 1e-3, "hinge too close to its kink");
        }
    }
    let (_, ds) = triplet_loss_with(&bs, margin, &negs);
    let f = |v: &[f64]| {
        let b = BatchSimilarities::new(shaped(v, &s), &video_of).unwrap();
        triplet_loss_with(&b, margin, &negs).0
    };
    OracleResult {
        name: match mode {
            NegativeMode::Random => "triplet_loss (random negatives)",
            NegativeMode::Hardest => "triplet_loss (hardest negatives)",
        },
        max_rel_error: grad_check(f, &flat(&s), &flat(&ds), EPS).unwrap(),
        bound: PRIMITIVE_BOUND,
    }
}

pub fn info_nce_oracle(g: Positivity) -> OracleResult {
    let (s, video_of) = similarity_fixture();
    let s = match g {
        Positivity::Identity => s.mapv(|v| v + 1.5),
        _ => s,
    };
    let bs = BatchSimilarities::new(s.clone(), &video_of).unwrap();
    let (_, ds) = info_nce(&bs, g).unwrap();
    let f = |v: &[f64]| {
        let b = BatchSimilarities::new(shaped(v, &s), &video_of).unwrap();
        info_nce(&b, g).unwrap().0
    };
    OracleResult {
        name: match g {
            Positivity::Identity => "info_nce (identity)",
            _ => "info_nce (exp)",
        },
        max_rel_error: grad_check(f, &flat(&s), &flat(&ds), EPS).unwrap(),
        bound: PRIMITIVE_BOUND,
    }
}

pub fn tiny_config(branches: Branches, agg: FrameAggregation, scaled: bool) -> ModelConfig {
    ModelConfig {
        video_dim: 5,
        text_dim: 4,
        hidden: 8,
        heads: 2,
        ff_width: 16,
        dropout: 0.0,
        num_units: 4,
        max_frames: 12,
        max_words: 6,
        branches,
        frame_aggregation: agg,
        kcga_scaled: scaled,
    }
}

pub struct PairBatch {
    pub queries: Vec<Array2<f64>>,
    pub videos: Vec<Array2<f64>>,
    pub video_of: Vec<usize>,
}

/// Four pairs over three videos; pairs 0 and 3 share video 0.
pub fn four_pair_batch(cfg: &ModelConfig) -> PairBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vids: Vec<Array2<f64>> = [7, 9, 6]
        .iter()
        .map(|&n| random(n, cfg.video_dim, &mut rng))
        .collect();
    let video_of = vec![0, 1, 2, 0];
    PairBatch {
        queries: (0..4)
            .map(|i| random(3 + i, cfg.text_dim, &mut rng))
            .collect(),
        videos: video_of.iter().map(|&v| vids[v].clone()).collect(),
        video_of,
    }
}

/// Hinge-active loss weights for the end-to-end check.
pub fn active_loss() -> LossConfig {
    LossConfig {
        margin: 1.0,
        lambda_clip: 0.3,
        lambda_frame: 0.5,
        ..LossConfig::default()
    }
}

/// Every parameter of the model against the total loss of a 4-pair batch,
/// with negatives fixed by a reseeded RNG.
pub fn total_loss_oracle(cfg: ModelConfig, loss: LossConfig, epoch: usize) -> (f64, String) {
    let model = MsSl::<f64>::new(cfg, 5).unwrap();
    let b = four_pair_batch(&cfg);
    let qs: Vec<_> = b.queries.iter().map(|q| q.view()).collect();
    let vs: Vec<_> = b.videos.iter().map(|v| v.view()).collect();
    let run = |m: &MsSl<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        m.batch_loss_and_grad(&qs, &vs, &b.video_of, &loss, epoch, &mut rng, None)
            .unwrap()
    };
    let out = run(&model);
    assert!(
        out.loss.total > 0.0,
        "configuration must keep hinges active"
    );
    grad_check_params(&model, &out.grads, |m| run(m).loss.total, EPS).unwrap()
}

pub fn primitive_suite() -> Vec<OracleResult> {
    vec![
        fc_relu(),
        transformer_layer(),
        attention_pool_oracle(),
        kcga_oracle(false),
        kcga_oracle(true),
        triplet_oracle(NegativeMode::Random),
        triplet_oracle(NegativeMode::Hardest),
        info_nce_oracle(Positivity::default()),
        info_nce_oracle(Positivity::Identity),
    ]
}
