use adst_core::dataharness::{style_by_name, synth_generate};
use adst_core::geometry::Landmarks68;
use adst_core::nn::{self, HasParams};
use adst_core::renderer::{
    combine_generator_loss, loss_discriminator, loss_generator, loss_generator_terms, loss_style_photometric,
    retrieve_matched_index, train_step_gan, training_example, DiscriminatorNet, GanBatch, GanTrainer, GeneratorNet,
    LossWeights, PerceptualPyramid, RendererConfig, FULL_ENCODER_CHANNELS,
};
use adst_core::stylemap::IspSet;
use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn tiny() -> RendererConfig {
    RendererConfig { image_size: 16, channels: vec![4, 6, 6], disc_width: 3, seed: 3, dtype: DType::F64 }
}

pub fn desk_config(seed: u64) -> RendererConfig {
    RendererConfig { image_size: 64, channels: vec![16, 32, 64, 64, 64, 64], disc_width: 8, seed, dtype: DType::F32 }
}

fn one_sample_batch(size: usize) -> GanBatch {
    let s = synth_generate(&style_by_name("neutral", &[]).unwrap(), 1.0, 5, size).unwrap();
    let frames: Vec<_> = [0, 3, 6, 9, 15, 12].iter().map(|&t| s.frame(t).unwrap()).collect();
    let isp = IspSet { images: frames[1..5].to_vec() };
    let refs: Vec<Landmarks68> = [3, 6, 9, 15].iter().map(|&t| s.landmarks[t].clone()).collect();
    let m = retrieve_matched_index(&s.landmarks[12], &refs).unwrap();
    training_example(&frames[0], &frames[5], &s.landmarks[12], &isp, &isp.images[m], DType::F32).unwrap()
}

#[test]
fn full_sized_networks_have_the_listed_shapes() {
    let g = GeneratorNet::new(RendererConfig::default()).unwrap();
    let x = Tensor::zeros((1, 18, 512, 512), DType::F32, &Device::Cpu).unwrap();
    let enc = g.encode(&x).unwrap();
    let got: Vec<(usize, usize)> = enc.iter().map(|t| (t.dims()[1], t.dims()[2])).collect();
    let want: Vec<(usize, usize)> = FULL_ENCODER_CHANNELS.iter().enumerate().map(|(i, &c)| (c, 256 >> i)).collect();
    assert_eq!(got, want);
    assert!(enc.iter().all(|t| t.dims()[2] == t.dims()[3]));
    let y = g.forward(&x).unwrap();
    assert_eq!(y.dims(), &[1, 3, 512, 512]);
    let v = nn::to_f64_vec(&y).unwrap();
    assert!(v.iter().all(|p| (-1.0..=1.0).contains(p)));

    let d = DiscriminatorNet::new(&RendererConfig::default()).unwrap();
    let img = Tensor::zeros((1, 3, 512, 512), DType::F32, &Device::Cpu).unwrap();
    let s = d.forward(&img, &img).unwrap();
    assert!(s.dims()[2] >= 4 && s.dims()[3] >= 4, "{:?}", s.dims());
    assert!(GeneratorNet::new(RendererConfig::default()).unwrap().encode(&img).is_err());
}

#[test]
fn lsgan_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let r = random_tensor(&mut rng, &[2, 1, 5, 5], -2.0, 2.0);
        let f = random_tensor(&mut rng, &[2, 1, 5, 5], -2.0, 2.0);
        let rv = nn::to_f64_vec(&r).unwrap();
        let fv = nn::to_f64_vec(&f).unwrap();
        let want = rv.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>() / 50.0 + fv.iter().map(|x| x * x).sum::<f64>() / 50.0;
        let got = nn::scalar(&loss_discriminator(&r, &f).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn generator_loss_terms_and_weights() {
    assert_eq!(combine_generator_loss(1.0, 0.01, 0.1, 1.0, &LossWeights { pw: 100.0, p: 10.0, f: 1.0 }), 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_tensor(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
    let feats = vec![random_tensor(&mut rng, &[1, 4, 8, 8], -1.0, 1.0)];
    let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let pyramid = PerceptualPyramid::new(DType::F64).unwrap();
    let l = loss_generator(&ones, &img, &img, &feats, &feats, &pyramid, &LossWeights::default()).unwrap();
    assert_eq!(nn::scalar(&l).unwrap(), 0.0);

    let other = random_tensor(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
    let scores = random_tensor(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
    let t = loss_generator_terms(&scores, &other, &img, &feats, &feats, &pyramid).unwrap();
    let pixel = nn::to_f64_vec(&other).unwrap().iter().zip(nn::to_f64_vec(&img).unwrap()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 768.0;
    assert!((nn::scalar(&t.pixel).unwrap() - pixel).abs() < 1e-12);
    let total = nn::scalar(&t.total(&LossWeights::default()).unwrap()).unwrap();
    let parts = [&t.adversarial, &t.pixel, &t.perceptual, &t.feature].map(|x| nn::scalar(x).unwrap());
    assert!((total - combine_generator_loss(parts[0], parts[1], parts[2], parts[3], &LossWeights::default())).abs() < 1e-12);
    assert!(parts.iter().all(|&p| p >= 0.0));
}

#[test]
fn photometric_loss_toy_case() {
    let dev = Device::Cpu;
    let w = Tensor::from_vec(vec![5.0f64, 0.0, 0.0, 1.0], (1, 1, 2, 2), &dev).unwrap();
    let zero = Tensor::zeros((1, 1, 2, 2), DType::F64, &dev).unwrap();
    let diff = Tensor::from_vec(vec![0.2f64, 0.9, 0.9, 0.1], (1, 1, 2, 2), &dev).unwrap();
    let l = nn::scalar(&loss_style_photometric(&diff, &zero, &w).unwrap()).unwrap();
    assert!((l - 0.275).abs() < 1e-12);
    let rgb = diff.repeat((1, 3, 1, 1)).unwrap();
    let l3 = nn::scalar(&loss_style_photometric(&rgb, &zero.repeat((1, 3, 1, 1)).unwrap(), &w).unwrap()).unwrap();
    assert!((l3 - 3.0 * 0.275).abs() < 1e-12);
    assert_eq!(nn::scalar(&loss_style_photometric(&rgb, &rgb, &w).unwrap()).unwrap(), 0.0);
    assert_eq!(nn::scalar(&loss_style_photometric(&rgb, &zero.repeat((1, 3, 1, 1)).unwrap(), &zero).unwrap()).unwrap(), 0.0);
    assert!(loss_style_photometric(&rgb, &zero, &w).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn photometric_loss_scales_linearly_with_mask(seed in 0u64..1000, alpha in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[2, 1, 6, 6], 0.0, 5.0);
        let base = nn::scalar(&loss_style_photometric(&a, &b, &w).unwrap()).unwrap();
        let scaled = nn::scalar(&loss_style_photometric(&a, &b, &(&w * alpha).unwrap()).unwrap()).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((scaled - alpha * base).abs() <= 1e-12 * scaled.abs().max(1.0));
    }
}

#[test]
fn matched_style_retrieval() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rand_lm = |rng: &mut ChaCha8Rng| {
        Landmarks68::from_slice(&(0..68).map(|_| [rng.random_range(0.0..512.0), rng.random_range(0.0..512.0), 0.0]).collect::<Vec<_>>()).unwrap()
    };
    let refs: Vec<Landmarks68> = (0..4).map(|_| rand_lm(&mut rng)).collect();
    assert_eq!(retrieve_matched_index(&refs[2], &refs).unwrap(), 2);
    let same = vec![refs[1].clone(); 4];
    assert_eq!(retrieve_matched_index(&refs[0], &same).unwrap(), 0);
    assert!(retrieve_matched_index(&refs[0], &[]).is_err());
    for _ in 0..30 {
        let q = rand_lm(&mut rng);
        let d: Vec<f64> = refs
            .iter()
            .map(|r| q.points().iter().zip(r.points()).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()).sum())
            .collect();
        let best = (0..4).fold(0, |b, i| if d[i] < d[b] { i } else { b });
        assert_eq!(retrieve_matched_index(&q, &refs).unwrap(), best);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn generator_output_gradient_matches_finite_differences() {
    let g = GeneratorNet::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random_tensor(&mut rng, &[1, 18, 16, 16], -1.0, 1.0);
    let xv = Var::from_tensor(&x0).unwrap();
    let pixel = (1usize, 7usize, 9usize);
    let pick = |y: &Tensor| y.get(0).unwrap().get(pixel.0).unwrap().get(pixel.1).unwrap().get(pixel.2).unwrap();
    let out = pick(&g.forward(xv.as_tensor()).unwrap());
    let grads = out.backward().unwrap();
    let gx = nn::to_f64_vec(grads.get(xv.as_tensor()).unwrap()).unwrap();
    let base = nn::to_f64_vec(&x0).unwrap();
    let h = 1e-5;
    for _ in 0..3 {
        let c = rng.random_range(0..18);
        let i = rng.random_range(4..12);
        let j = rng.random_range(4..12);
        let idx = c * 256 + i * 16 + j;
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[idx] += delta;
            nn::scalar(&pick(&g.forward(&Tensor::from_vec(v, (1, 18, 16, 16), &Device::Cpu).unwrap()).unwrap())).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(rel_err(gx[idx], fd) < 1e-3 || (gx[idx] - fd).abs() < 1e-9, "{} vs {fd}", gx[idx]);
    }
}

#[test]
fn generator_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = tiny();
    let d = DiscriminatorNet::new(&cfg).unwrap();
    let pyramid = PerceptualPyramid::new(DType::F64).unwrap();
    let cond = random_tensor(&mut rng, &[1, 3, 32, 32], -1.0, 1.0);
    let real = random_tensor(&mut rng, &[1, 3, 32, 32], -1.0, 1.0);
    let matched = random_tensor(&mut rng, &[1, 3, 32, 32], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[1, 1, 32, 32], 0.0, 5.0);
    let fake0 = random_tensor(&mut rng, &[1, 3, 32, 32], -1.0, 1.0);
    let total = |fake: &Tensor| {
        let (s, ff) = d.forward_features(&cond, fake).unwrap();
        let fr = d.forward_features(&cond, &real).unwrap().1;
        let lg = loss_generator(&s, fake, &real, &ff, &fr, &pyramid, &LossWeights::default()).unwrap();
        (lg + loss_style_photometric(fake, &matched, &w).unwrap()).unwrap()
    };
    let v = Var::from_tensor(&fake0).unwrap();
    let grads = total(v.as_tensor()).backward().unwrap();
    let g = nn::to_f64_vec(grads.get(v.as_tensor()).unwrap()).unwrap();
    let base = nn::to_f64_vec(&fake0).unwrap();
    let h = 1e-6;
    for _ in 0..6 {
        let idx = rng.random_range(0..base.len());
        let eval = |delta: f64| {
            let mut b = base.clone();
            b[idx] += delta;
            nn::scalar(&total(&Tensor::from_vec(b, (1, 3, 32, 32), &Device::Cpu).unwrap())).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(rel_err(g[idx], fd) < 1e-3, "{} vs {fd}", g[idx]);
    }
}

#[test]
fn training_is_deterministic_and_finite() {
    let batch = one_sample_batch(32);
    let run = || {
        let cfg = RendererConfig { image_size: 32, channels: vec![8, 16, 16, 16], disc_width: 4, seed: 8, dtype: DType::F32 };
        let g = GeneratorNet::new(cfg.clone()).unwrap();
        let d = DiscriminatorNet::new(&cfg).unwrap();
        let mut t = GanTrainer::new(&g, &d, 2e-4, 2e-4).unwrap();
        (0..10).map(|_| train_step_gan(&batch, &g, &d, &mut t).unwrap()).collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.generator_total.is_finite() && x.discriminator.is_finite());
        assert!(rel_err(x.generator_total, y.generator_total) < 1e-5);
        assert!(rel_err(x.discriminator, y.discriminator) < 1e-5);
    }
}

#[test]
fn generator_overfits_one_sample() {
    let batch = one_sample_batch(64);
    let cfg = desk_config(1);
    let g = GeneratorNet::new(cfg.clone()).unwrap();
    let d = DiscriminatorNet::new(&cfg).unwrap();
    let mut t = GanTrainer::new(&g, &d, 2e-4, 2e-4).unwrap();
    let losses: Vec<f64> = (0..300).map(|_| train_step_gan(&batch, &g, &d, &mut t).unwrap().pixel).collect();
    let last = losses[losses.len() - 1];
    assert!(last < 0.25 * losses[0], "L_pw {} -> {last}", losses[0]);
    assert!(g.params().num_parameters() > 0);
}
