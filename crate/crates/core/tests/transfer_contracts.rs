use adst_core::audio::{ApcConfig, ApcModel};
use adst_core::dataharness::{canonical_face, style_by_name, synth_generate};
use adst_core::nn::{self, HasParams};
use adst_core::training::{MotionExample, MotionGenerator, MotionGeneratorConfig};
use adst_core::transfer::{
    gradient_penalty, interpolate, loss_constraint, loss_constraint_tensor, loss_regularizer,
    loss_regularizer_tensor, loss_transfer, loss_transfer_tensor, pretrain_style_net, require_pretrained,
    run_transfer, style_features, GammaMode, StyleTransferConfig, StyleTransferNet, TransferConfig,
    TransferManifest, TransferModels, INPUT_CENTER, INPUT_SCALE, LANDMARK_DIM, FULL_TRANSFER_WIDTHS,
};
use adst_core::Error;
use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net(seed: u64, dtype: DType) -> StyleTransferNet {
    StyleTransferNet::new(&StyleTransferConfig { widths: [24, 16, 8], seed, dtype }).unwrap()
}

fn random_phi(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..LANDMARK_DIM).map(|_| rng.random_range(150.0..360.0)).collect()
}

/// Straight-line forward pass over the stored weights.
fn oracle_forward(f: &StyleTransferNet, phi: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = phi.iter().map(|v| (v - INPUT_CENTER) / INPUT_SCALE).collect();
    for (k, layer) in f.layers().iter().enumerate() {
        let w = nn::rows_from_tensor(layer.weight.as_tensor()).unwrap();
        let b = nn::to_f64_vec(layer.bias.as_ref().unwrap().as_tensor()).unwrap();
        let z: Vec<f64> = w.iter().zip(&b).map(|(row, bi)| row.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>() + bi).collect();
        a = if k < 2 { z.iter().map(|v| v.tanh()).collect() } else { z };
    }
    a
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

#[test]
fn full_network_widths_and_input_contract() {
    let f = StyleTransferNet::new(&StyleTransferConfig::default()).unwrap();
    assert_eq!(f.layer_widths(), FULL_TRANSFER_WIDTHS);
    assert_eq!(f.layers()[0].in_dim(), 204);
    assert_eq!(f.output_dim(), 256);
    let x = Tensor::zeros((3, 204), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(f.forward(&x).unwrap().dims(), &[3, 256]);
    let bad = Tensor::zeros((3, 136), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(f.forward(&bad), Err(Error::InvalidArgument(_))));
    assert!(style_features(&[1.0; 10], &f).is_err());
    assert!(StyleTransferNet::new(&StyleTransferConfig { widths: [4, 0, 4], ..Default::default() }).is_err());
}

#[test]
fn forward_matches_oracle_and_is_deterministic() {
    let f = small_net(5, DType::F64);
    let g = small_net(5, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let phi = random_phi(&mut rng);
        let got = style_features(&phi, &f).unwrap();
        assert_eq!(got, style_features(&phi, &g).unwrap());
        for (a, b) in got.iter().zip(oracle_forward(&f, &phi)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn constraint_loss_zero_symmetric_and_matches_oracle() {
    let f = small_net(6, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random_phi(&mut rng), random_phi(&mut rng));
    assert_eq!(loss_constraint(&a, &a, &f).unwrap(), 0.0);
    let ab = loss_constraint(&a, &b, &f).unwrap();
    assert!((ab - loss_constraint(&b, &a, &f).unwrap()).abs() < 1e-12);
    let oracle: f64 = oracle_forward(&f, &a).iter().zip(oracle_forward(&f, &b)).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(rel_err(ab, oracle) < 1e-12);

    let batch_a = nn::tensor_from_rows(&[a.clone(), b.clone()], DType::F64).unwrap();
    let batch_b = nn::tensor_from_rows(&[b.clone(), b.clone()], DType::F64).unwrap();
    let batched = nn::scalar(&loss_constraint_tensor(&batch_a, &batch_b, &f).unwrap()).unwrap();
    assert!(rel_err(batched, ab / 2.0) < 1e-12, "batch mean of per-row squared distances");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn interpolation_endpoints_are_exact(
        s in prop::collection::vec(-1e3f64..1e3, LANDMARK_DIM),
        m in prop::collection::vec(-1e3f64..1e3, LANDMARK_DIM),
        gamma in 0.0f64..=1.0,
    ) {
        prop_assert_eq!(interpolate(&s, &m, 0.0).unwrap(), m.clone());
        prop_assert_eq!(interpolate(&s, &m, 1.0).unwrap(), s.clone());
        let mid = interpolate(&s, &m, gamma).unwrap();
        for ((x, a), b) in mid.iter().zip(&s).zip(&m) {
            prop_assert!((x - (gamma * a + (1.0 - gamma) * b)).abs() < 1e-9);
            prop_assert!(*x >= a.min(*b) - 1e-9 && *x <= a.max(*b) + 1e-9);
        }
    }

    #[test]
    fn transfer_loss_is_the_plain_sum(a in 0.0f64..1e4, b in 0.0f64..1e4, c in 0.0f64..1e4) {
        prop_assert_eq!(loss_transfer(a, b, c), a + b + c);
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let s = nn::scalar(&loss_transfer_tensor(&t(a), &t(b), &t(c)).unwrap()).unwrap();
        prop_assert!((s - (a + b + c)).abs() < 1e-9);
    }
}

#[test]
fn interpolation_rejects_gamma_outside_unit_interval() {
    for g in [-0.1, 1.0001, f64::NAN] {
        assert!(interpolate(&[0.0; 3], &[1.0; 3], g).is_err(), "γ = {g}");
    }
    let cfg = TransferConfig { gamma: 2.0, ..TransferConfig::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn gradient_penalty_reference_cases() {
    let dev = Device::Cpu;
    let unit = Tensor::from_vec(vec![0.6, 0.8, 0.0, 1.0], (2, 2), &dev).unwrap();
    assert!(nn::scalar(&gradient_penalty(&unit).unwrap()).unwrap().abs() < 1e-12);
    let double = Tensor::from_vec(vec![2.0, 0.0, 0.0, 0.0], (2, 2), &dev).unwrap();
    assert!((nn::scalar(&gradient_penalty(&double).unwrap()).unwrap() - 1.0).abs() < 1e-12);

    // A zero output layer makes f constant, so ∇ = 0 and the penalty is exactly 1.
    let f = small_net(8, DType::F64);
    let w = &f.layers()[2].weight;
    w.set(&w.zeros_like().unwrap()).unwrap();
    let phi = random_phi(&mut ChaCha8Rng::seed_from_u64(4));
    assert!((loss_regularizer(&phi, &f).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn analytic_input_gradient_matches_finite_differences() {
    let f = small_net(9, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phi = random_phi(&mut rng);
    let x = nn::tensor_from_rows(&[phi.clone()], DType::F64).unwrap();
    let g = nn::to_f64_vec(&f.input_gradient_of_mean(&x).unwrap()).unwrap();
    let mean = |p: &[f64]| {
        let v = style_features(p, &f).unwrap();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let h = 1e-4;
    for _ in 0..10 {
        let i = rng.random_range(0..LANDMARK_DIM);
        let (mut p, mut m) = (phi.clone(), phi.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (mean(&p) - mean(&m)) / (2.0 * h);
        assert!(rel_err(g[i], fd) < 1e-6 || (g[i] - fd).abs() < 1e-12, "coordinate {i}: {} vs {fd}", g[i]);
    }
}

/// Central differences of `loss(f)` in one weight against autograd.
fn check_parameter_gradient(f: &StyleTransferNet, loss: &dyn Fn() -> Tensor, picks: &[(usize, usize)]) {
    let grads = loss().backward().unwrap();
    for &(layer, idx) in picks {
        let var: &Var = &f.layers()[layer].weight;
        let analytic = nn::to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap()[idx];
        let base = nn::to_f64_vec(var.as_tensor()).unwrap();
        let shape = var.dims().to_vec();
        let h = 1e-6;
        let eval = |delta: f64| {
            let mut w = base.clone();
            w[idx] += delta;
            var.set(&Tensor::from_vec(w, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            nn::scalar(&loss()).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        eval(0.0);
        assert!(rel_err(analytic, fd) < 1e-4, "layer {layer} index {idx}: {analytic} vs {fd}");
    }
}

#[test]
fn constraint_loss_parameter_gradient() {
    let f = small_net(10, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = nn::tensor_from_rows(&[random_phi(&mut rng), random_phi(&mut rng)], DType::F64).unwrap();
    let b = nn::tensor_from_rows(&[random_phi(&mut rng), random_phi(&mut rng)], DType::F64).unwrap();
    check_parameter_gradient(&f, &|| loss_constraint_tensor(&a, &b, &f).unwrap(), &[(0, 7), (1, 50), (2, 3)]);
}

#[test]
fn regularizer_parameter_gradient() {
    let f = small_net(11, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = nn::tensor_from_rows(&[random_phi(&mut rng), random_phi(&mut rng), random_phi(&mut rng)], DType::F64).unwrap();
    check_parameter_gradient(&f, &|| loss_regularizer_tensor(&x, &f).unwrap(), &[(0, 11), (0, 2000), (1, 77), (2, 100)]);
}

#[test]
fn total_transfer_loss_parameter_gradient() {
    let f = small_net(12, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = nn::tensor_from_rows(&[random_phi(&mut rng), random_phi(&mut rng)], DType::F64).unwrap();
    let b = nn::tensor_from_rows(&[random_phi(&mut rng), random_phi(&mut rng)], DType::F64).unwrap();
    let mg = Tensor::new(3.5f64, &Device::Cpu).unwrap();
    let total = || {
        let sc = loss_constraint_tensor(&a, &b, &f).unwrap();
        let r = loss_regularizer_tensor(&a, &f).unwrap();
        loss_transfer_tensor(&mg, &sc, &r).unwrap()
    };
    check_parameter_gradient(&f, &total, &[(0, 123), (1, 9), (2, 64)]);
}

#[test]
fn pretraining_pulls_gradient_norms_toward_one() {
    let f = small_net(13, DType::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let style = style_by_name("ballad", &[]).unwrap();
    let frames = synth_generate(&style, 1.0, 3, 64).unwrap().landmarks;
    let probe = nn::tensor_from_rows(&(0..8).map(|_| random_phi(&mut rng)).collect::<Vec<_>>(), DType::F32).unwrap();
    let before = nn::scalar(&loss_regularizer_tensor(&probe, &f).unwrap()).unwrap();
    let losses = pretrain_style_net(&f, &[frames], 150, 16, 1e-2, 1).unwrap();
    let after = nn::scalar(&loss_regularizer_tensor(&probe, &f).unwrap()).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(after < before, "penalty {before} -> {after}");
}

struct Rig {
    apc: ApcModel,
    motion: MotionGenerator,
    f: StyleTransferNet,
    anchor: Vec<MotionExample>,
    reference: Vec<adst_core::geometry::Landmarks68>,
    audio: adst_core::audio::AudioClip,
}

fn rig() -> Rig {
    let apc = ApcModel::new(ApcConfig { hidden: 16, layers: 3, seed: 1, dtype: DType::F32 }).unwrap();
    let motion = MotionGenerator::new(&MotionGeneratorConfig::scaled(16, 16, 2)).unwrap();
    let f = small_net(3, DType::F32);
    let neutral = synth_generate(&style_by_name("neutral", &[]).unwrap(), 1.0, 4, 64).unwrap();
    let anchor = vec![MotionExample::from_sample(&apc, &neutral).unwrap()];
    let clip = synth_generate(&style_by_name("rap", &[]).unwrap(), 1.0, 5, 64).unwrap();
    Rig { apc, motion, f, anchor, reference: clip.landmarks, audio: clip.audio }
}

fn weights(store: &[Var]) -> Vec<Vec<f64>> {
    store.iter().map(|v| nn::to_f64_vec(v.as_tensor()).unwrap()).collect()
}

fn transfer(r: &Rig, cfg: &TransferConfig) -> adst_core::transfer::TransferReport {
    let neutral = canonical_face();
    let models = TransferModels { apc: &r.apc, motion: &r.motion, style_net: &r.f, neutral: &neutral, anchor: &r.anchor };
    run_transfer(&r.reference, &r.audio, &models, cfg).unwrap()
}

#[test]
fn phase_one_leaves_the_motion_generator_untouched() {
    let r = rig();
    let (motion0, f0) = (weights(&r.motion.vars()), weights(&r.f.params().vars()));
    let cfg = TransferConfig { frozen_epochs: 2, finetune_epochs: 0, window: 30, anchor_pose_frames: 4, ..Default::default() };
    let report = transfer(&r, &cfg);
    assert!(report.steps.iter().all(|s| s.phase == 1));
    assert_eq!(weights(&r.motion.vars()), motion0, "motion weights must be bit-identical");
    assert_ne!(weights(&r.f.params().vars()), f0, "f must train in phase 1");
}

#[test]
fn phase_two_trains_motion_and_anneals_to_the_floor() {
    let r = rig();
    let motion0 = weights(&r.motion.vars());
    let cfg = TransferConfig {
        frozen_epochs: 1,
        finetune_epochs: 2,
        lr_phase2: 1e-3,
        lr_floor: 1e-6,
        window: 30,
        anchor_pose_frames: 4,
        ..Default::default()
    };
    let report = transfer(&r, &cfg);
    assert_ne!(weights(&r.motion.vars()), motion0);
    assert!((report.final_lr_phase1 - cfg.lr_floor).abs() < 1e-12);
    assert!((report.final_lr_phase2 - cfg.lr_floor).abs() < 1e-12);
    for phase in [1u8, 2] {
        let lrs: Vec<f64> = report.steps.iter().filter(|s| s.phase == phase).map(|s| s.lr).collect();
        let lr_max = if phase == 1 { cfg.lr_phase1 } else { cfg.lr_phase2 };
        assert_eq!(lrs[0], lr_max);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "phase {phase} schedule must not increase");
    }
    for s in &report.steps {
        assert!((s.total - loss_transfer(s.l_mg, s.l_sc, s.l_r)).abs() <= 1e-6 * s.total.abs().max(1.0));
    }
}

#[test]
fn transfer_is_reproducible() {
    let cfg = TransferConfig { frozen_epochs: 1, finetune_epochs: 1, window: 30, anchor_pose_frames: 4, ..Default::default() };
    let (a, b) = (rig(), rig());
    assert_eq!(transfer(&a, &cfg), transfer(&b, &cfg));
    assert_eq!(weights(&a.motion.vars()), weights(&b.motion.vars()));
}

#[test]
fn fixed_gamma_mode_is_accepted() {
    let r = rig();
    let cfg = TransferConfig {
        gamma_mode: GammaMode::Fixed,
        gamma: 1.0,
        frozen_epochs: 1,
        finetune_epochs: 0,
        window: 30,
        anchor_pose_frames: 4,
        ..Default::default()
    };
    assert!(transfer(&r, &cfg).steps.iter().all(|s| s.l_r.is_finite()));
}

#[test]
fn missing_pretrained_weights_are_a_precondition_error() {
    let dir = tempfile::tempdir().unwrap();
    let present = dir.path().join("apc.ckpt");
    std::fs::write(&present, b"x").unwrap();
    let absent = dir.path().join("motion.ckpt");
    assert!(require_pretrained(&[&present]).is_ok());
    match require_pretrained(&[&present, &absent]) {
        Err(Error::Precondition(msg)) => assert!(msg.contains("motion.ckpt")),
        other => panic!("expected a precondition error, got {other:?}"),
    }

    let r = rig();
    let neutral = canonical_face();
    let models = TransferModels { apc: &r.apc, motion: &r.motion, style_net: &r.f, neutral: &neutral, anchor: &[] };
    let err = run_transfer(&r.reference, &r.audio, &models, &TransferConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = TransferManifest {
        style_name: "rap".into(),
        reference_landmark_file: "style/landmarks.jsonl".into(),
        audio_file: "style/audio.wav".into(),
        epochs: 6,
        gamma_mode: GammaMode::UniformRandom,
        seed: 42,
    };
    let path = m.write(dir.path()).unwrap();
    assert_eq!(TransferManifest::read(&path).unwrap(), m);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("uniform-random"));
}
