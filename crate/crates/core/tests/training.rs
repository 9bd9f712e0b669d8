use holoslide::attention::{AttentionConfig, BackboneConfig};
use holoslide::foreground::SamplerConfig;
use holoslide::model::{
    train, train_with_log, ModelConfig, SamplerKind, SegModel, TokenizerKind, TrainConfig, TrainingSlide,
};
use holoslide::raster::RgbImage;
use holoslide::rng;
use holoslide::synth::{generate_synth, SynthSlideSpec};
use holoslide::vq::Patch;
use holoslide::Error;
use rand::Rng;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn small_model(tokenizer: TokenizerKind, max_grid: usize) -> ModelConfig {
    ModelConfig {
        patch: 8,
        codebook_size: 32,
        code_dim: 8,
        tokenizer,
        backbone: BackboneConfig {
            attention: AttentionConfig {
                d_model: 16,
                heads: 2,
                scales: vec![1, 2],
                epsilon: 1e-6,
                ..Default::default()
            },
            stage1_blocks: 1,
            stage2_blocks: 1,
            max_grid,
        },
        classes: 1,
        beta: 0.25,
        seed: 7,
    }
}

fn slides(dir: &TempDir, n: u64) -> Vec<TrainingSlide> {
    (0..n)
        .map(|i| {
            let spec = SynthSlideSpec {
                width: 1024,
                height: 1024,
                disk_count: 10,
                disk_radius: (20.0, 40.0),
                seed: 40 + i,
                ..Default::default()
            };
            let (p, gt) = generate_synth(&spec, 256, dir.path().join(format!("s{i}.hhpy"))).unwrap();
            TrainingSlide::new(p, vec![gt], 0).unwrap()
        })
        .collect()
}

fn sampler() -> SamplerConfig {
    SamplerConfig {
        roi_width: 128,
        roi_height: 128,
        min_foreground_fraction: 0.5,
        seed: 3,
    }
}

fn fixed_input(w: usize, h: usize) -> RgbImage {
    let mut r = rng::stream(99, 0);
    let mut img = RgbImage::new(w, h);
    r.fill(img.as_bytes_mut());
    img
}

#[test]
fn output_matches_input_size_for_4k_and_square_rois() {
    let m = SegModel::new(small_model(TokenizerKind::Vq, 512)).unwrap();
    for (w, h) in [(512, 512), (3840, 2160)] {
        let p = m.forward(&fixed_input(w, h)).unwrap();
        assert_eq!((p.width, p.height, p.classes), (w, h, 1));
        assert!(p.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Digest of the untrained model's output on a fixed input, with
/// probabilities rounded to 1e-6 so the digest survives last-bit
/// differences between matrix kernels.
#[test]
fn untrained_output_matches_golden_digest() {
    let m = SegModel::new(small_model(TokenizerKind::Vq, 16)).unwrap();
    let p = m.forward(&fixed_input(64, 48)).unwrap();
    let mut h = Sha256::new();
    for v in &p.data {
        h.update(((v * 1e6).round() as u32).to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, GOLDEN);
}

const GOLDEN: &str = "4b90f03d9508741c96db1aea2a93fd114bd2ea387a54775024032f585334055e";

#[test]
fn zero_steps_returns_the_initialization() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 1);
    let init = SegModel::new(small_model(TokenizerKind::Vq, 16)).unwrap();
    let cfg = TrainConfig {
        steps: 0,
        ..Default::default()
    };
    let out = train(init.clone(), &data, &cfg, &sampler()).unwrap();
    assert_eq!(out, init);
    assert_eq!(out.step_count(), 0);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 2);
    for (kind, sampler_kind, freeze) in [
        (TokenizerKind::Vq, SamplerKind::Rand, false),
        (TokenizerKind::Linear, SamplerKind::Tile, false),
        (TokenizerKind::Vq, SamplerKind::Tile, true),
    ] {
        let cfg = TrainConfig {
            steps: 8,
            lr: 1e-3,
            seed: 5,
            sampler: sampler_kind,
            freeze_tokenizer: freeze,
            ..Default::default()
        };
        let run = || {
            let m = train(SegModel::new(small_model(kind, 16)).unwrap(), &data, &cfg, &sampler()).unwrap();
            m.to_bytes().unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b, "{kind:?} {sampler_kind:?}");
        let m = SegModel::from_bytes(&a).unwrap();
        assert_eq!(m.step_count(), 8);
    }
}

#[test]
fn frozen_tokenizer_is_untouched() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 1);
    let init = SegModel::new(small_model(TokenizerKind::Vq, 16)).unwrap();
    let cfg = TrainConfig {
        steps: 5,
        lr: 1e-3,
        freeze_tokenizer: true,
        ..Default::default()
    };
    let out = train(init.clone(), &data, &cfg, &sampler()).unwrap();
    assert_eq!(out.params.tokenizer, init.params.tokenizer);
    assert_ne!(out.params.head, init.params.head);
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
}

#[test]
fn loss_falls_during_training() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 2);
    let cfg = TrainConfig {
        steps: 200,
        lr: 2e-3,
        seed: 1,
        freeze_tokenizer: true,
        ..Default::default()
    };
    let mut losses = Vec::new();
    train_with_log(SegModel::new(small_model(TokenizerKind::Vq, 16)).unwrap(), &data, &cfg, &sampler(), &mut |r| {
        assert!(r.loss.is_finite());
        assert!(r.reconstruction_mse.is_none());
        losses.push(r.loss)
    })
    .unwrap();
    let (early, late) = (median(&losses[..100]), median(&losses[100..]));
    assert!(late < early, "median loss {early} then {late}");
}

#[test]
fn joint_training_logs_reconstruction() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 1);
    let cfg = TrainConfig {
        steps: 3,
        ..Default::default()
    };
    let mut seen = 0;
    train_with_log(SegModel::new(small_model(TokenizerKind::Vq, 16)).unwrap(), &data, &cfg, &sampler(), &mut |r| {
        assert!(r.reconstruction_mse.is_some_and(|m| m.is_finite() && m >= 0.0));
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 3);
}

#[test]
fn runaway_learning_rate_reports_divergence_with_a_finite_model() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 1);
    let cfg = TrainConfig {
        steps: 50,
        lr: 1e300,
        ..Default::default()
    };
    match train(SegModel::new(small_model(TokenizerKind::Linear, 16)).unwrap(), &data, &cfg, &sampler()) {
        Err(Error::TrainingDiverged { step, last_good }) => {
            assert!(step < 50);
            assert!(last_good.params.is_finite());
            assert_eq!(last_good.step_count(), step);
        }
        other => panic!("expected divergence, got {:?}", other.map(|m| m.step_count())),
    }
}

#[test]
fn saved_checkpoint_reloads_bit_identically() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 1);
    let cfg = TrainConfig {
        steps: 4,
        lr: 1e-3,
        ..Default::default()
    };
    let m = train(SegModel::new(small_model(TokenizerKind::Vq, 16)).unwrap(), &data, &cfg, &sampler()).unwrap();
    let path = dir.path().join("m.hhck");
    m.save(&path).unwrap();
    let back = SegModel::load(&path).unwrap();
    assert_eq!(back, m);
    let x = Patch::from_rgb(&fixed_input(40, 24));
    assert_eq!(back.forward_patch(&x).unwrap(), m.forward_patch(&x).unwrap());
}

#[test]
fn mismatched_truth_count_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = slides(&dir, 1);
    let mut cfg = small_model(TokenizerKind::Vq, 16);
    cfg.classes = 2;
    let err = train(SegModel::new(cfg).unwrap(), &data, &TrainConfig::default(), &sampler()).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}
