use std::path::Path;

use adst_core::audio::{ApcConfig, ApcModel};
use adst_core::config::RunConfig;
use adst_core::dataharness::{canonical_face, style_by_name, synth_generate, video_frame_count};
use adst_core::nn;
use adst_core::pipeline::{self, RunLayout};
use adst_core::training::{
    frame_features, train_motion, MotionExample, MotionGenerator, MotionGeneratorConfig, MotionTrainConfig,
};
use adst_core::Error;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smoke_config() -> RunConfig {
    RunConfig::from_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")).unwrap()
}

fn f64_generator(feature_dim: usize, seed: u64) -> MotionGenerator {
    let mut cfg = MotionGeneratorConfig::scaled(feature_dim, 8, seed);
    cfg.mouth_eye.dtype = DType::F64;
    cfg.head_pose.dtype = DType::F64;
    MotionGenerator::new(&cfg).unwrap()
}

fn random_example(seed: u64, dim: usize) -> MotionExample {
    let s = synth_generate(&style_by_name("ballad", &[]).unwrap(), 1.0, seed, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..s.n_frames()).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    MotionExample::new(features, s.deltas.clone(), s.pose_rows()).unwrap()
}

#[test]
fn motion_loss_is_the_sum_of_its_terms() {
    let gen = f64_generator(8, 1);
    let ex = random_example(2, 8);
    let frames = [0, 5, 17, 40];
    let (me, ht) = gen.loss_terms(&ex, &frames).unwrap();
    let mg = nn::scalar(&gen.loss_mg_tensor(&ex, &frames).unwrap()).unwrap();
    let sum = nn::scalar(&me).unwrap() + nn::scalar(&ht).unwrap();
    assert!((mg - sum).abs() <= 1e-9 * sum.abs().max(1.0));
}

#[test]
fn motion_loss_parameter_gradient_matches_finite_differences() {
    let gen = f64_generator(8, 3);
    let ex = random_example(4, 8);
    let frames = [2, 9, 30];
    let loss = || gen.loss_mg_tensor(&ex, &frames).unwrap();
    let vars = gen.vars();
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut checked = 0;
    for k in [0, vars.len() / 3, vars.len() / 2, vars.len() - 1] {
        let var = &vars[k];
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let analytic = nn::to_f64_vec(g).unwrap();
        let base = nn::to_f64_vec(var.as_tensor()).unwrap();
        let shape = var.dims().to_vec();
        let idx = rng.random_range(0..base.len());
        let eval = |delta: f64| {
            let mut w = base.clone();
            w[idx] += delta;
            var.set(&Tensor::from_vec(w, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            nn::scalar(&loss()).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        eval(0.0);
        let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-8);
        assert!(rel < 1e-4, "var {k} index {idx}: {} vs {fd}", analytic[idx]);
        checked += 1;
    }
    assert!(checked >= 3);
}

#[test]
fn features_align_with_video_frames() {
    let apc = ApcModel::new(ApcConfig { hidden: 16, layers: 3, seed: 1, dtype: DType::F32 }).unwrap();
    let s = synth_generate(&style_by_name("neutral", &[]).unwrap(), 2.0, 7, 64).unwrap();
    let n = video_frame_count(s.audio.samples().len(), s.audio.sample_rate());
    assert_eq!(n, s.n_frames());
    let rows = frame_features(&apc, &s.audio, n).unwrap();
    assert_eq!(rows.len(), n);
    assert!(rows.iter().all(|r| r.len() == 16));
    assert!(matches!(frame_features(&apc, &s.audio, n + 30), Err(Error::InvalidArgument(_))));
}

#[test]
fn motion_training_lowers_the_loss_and_checkpoints_round_trip() {
    let gen = MotionGenerator::new(&MotionGeneratorConfig::scaled(8, 16, 9)).unwrap();
    let examples: Vec<_> = (0..3).map(|i| random_example(10 + i, 8)).collect();
    let before = gen.mean_loss_mg(&examples).unwrap();
    let losses =
        train_motion(&gen, &examples, &MotionTrainConfig { steps: 60, lr: 1e-3, pose_frames: 8, seed: 1 }).unwrap();
    assert_eq!(losses.len(), 60);
    let after = gen.mean_loss_mg(&examples).unwrap();
    assert!(after < before, "{before} -> {after}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("motion.ckpt");
    gen.save(&path).unwrap();
    let other = MotionGenerator::new(&MotionGeneratorConfig::scaled(8, 16, 1234)).unwrap();
    other.load(&path).unwrap();
    let neutral = canonical_face();
    let a = gen.generate_landmarks(&neutral, &examples[0].features, &[[0.0; 6]]).unwrap();
    let b = other.generate_landmarks(&neutral, &examples[0].features, &[[0.0; 6]]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_text_round_trips_and_rejects_bad_input() {
    let cfg = smoke_config();
    assert_eq!(cfg.image_size, 64);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Validation(_))));
    assert!(matches!(RunConfig::parse("apc_lr = -1"), Err(Error::Validation(_))));
    assert!(matches!(RunConfig::parse("seed = many"), Err(Error::Validation(_))));
    assert!(matches!(RunConfig::parse("just words"), Err(Error::Validation(_))));
    let defaults = RunConfig::default();
    assert_eq!((defaults.apc_lr, defaults.motion_lr, defaults.stylemap_lr, defaults.generator_lr), (1e-4, 1e-4, 1e-4, 1e-5));
    assert_eq!((defaults.generator_batch, defaults.apc_batch, defaults.motion_batch), (8, 64, 64));
    let missing = RunConfig::from_file(Path::new("/definitely/not/here.conf")).unwrap_err();
    assert!(missing.is_io());
}

#[test]
fn feature_cache_reproduces_uncached_training() {
    let cfg = smoke_config();
    let run = |cache: Option<&Path>| {
        let dir = tempfile::tempdir().unwrap();
        let mut layout = RunLayout::new(dir.path());
        if let Some(c) = cache {
            layout = layout.with_feature_cache(c);
        }
        pipeline::stage_synth_data(&cfg, &layout).unwrap();
        pipeline::stage_train_apc(&cfg, &layout).unwrap();
        pipeline::stage_train_motion(&cfg, &layout).unwrap()
    };
    let cache = tempfile::tempdir().unwrap();
    let plain = run(None);
    let cold = run(Some(cache.path()));
    let warm = run(Some(cache.path()));
    assert_eq!(plain, cold);
    assert_eq!(plain, warm);
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), cfg.train_samples);
}

#[test]
fn stages_report_missing_prerequisites_by_path() {
    let cfg = smoke_config();
    let dir = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(dir.path());
    let err = pipeline::stage_train_apc(&cfg, &layout).unwrap_err();
    assert!(err.is_io());
    assert!(err.to_string().contains("manifest.json"), "{err}");
    match pipeline::stage_transfer(&cfg, &layout).unwrap_err() {
        Error::Precondition(msg) => assert!(msg.contains("apc.ckpt")),
        other => panic!("expected a precondition error, got {other}"),
    }
}
