//! Style-aware image generator, PatchGAN discriminator and their losses.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::facialmap::{build_weight_mask_with, rasterize_facial_map, Camera, FacialMap, WeightMask};
use crate::geometry::{Landmarks68, CANVAS_SIZE};
use crate::nn::{self, Adam, Conv2d, ConvTranspose2d, HasParams, ParamStore};
use crate::stylemap::{IspSet, StyleReferenceSet};

/// Source image (3) + facial map (3) + four ISP images (12).
pub const GENERATOR_INPUT_CHANNELS: usize = 18;
pub const FULL_ENCODER_CHANNELS: [usize; 8] = [64, 128, 256, 512, 512, 512, 512, 512];
/// Seed of the frozen perceptual pyramid.
pub const PERCEPTUAL_SEED: u64 = 20_230_117;
pub const GAN_CLIP_NORM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pw: f64,
    pub p: f64,
    pub f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pw: 100.0, p: 10.0, f: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RendererConfig {
    pub image_size: usize,
    /// One entry per encoder layer; `image_size` must be divisible by `2^layers`.
    pub channels: Vec<usize>,
    /// Discriminator base width.
    pub disc_width: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            channels: FULL_ENCODER_CHANNELS.to_vec(),
            disc_width: 64,
            seed: 0,
            dtype: DType::F32,
        }
    }
}

impl RendererConfig {
    fn validate(&self) -> Result<()> {
        let layers = self.channels.len();
        if layers == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("the generator needs at least one non-empty layer"));
        }
        if self.image_size == 0 || self.image_size % (1 << layers) != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by 2^{layers}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// `x + conv(lrelu(conv(x)))` with 3×3 kernels.
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(ps, &format!("{name}.a"), ch, ch, 3, 1, 1)?,
            b: Conv2d::new(ps, &format!("{name}.b"), ch, ch, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = nn::leaky_relu(&self.a.forward(x)?, 0.2)?;
        Ok((x + self.b.forward(&h)?)?)
    }
}

/// Encoder-decoder with skip connections over 18-channel conditioning.
pub struct GeneratorNet {
    params: ParamStore,
    down: Vec<Conv2d>,
    down_res: Vec<Option<ResBlock>>,
    up: Vec<ConvTranspose2d>,
    up_res: Vec<Option<ResBlock>>,
    config: RendererConfig,
}

impl HasParams for GeneratorNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl GeneratorNet {
    pub fn new(config: RendererConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.seed, config.dtype);
        let ch = &config.channels;
        let n = ch.len();
        let mut down = Vec::with_capacity(n);
        let mut down_res = Vec::with_capacity(n);
        for i in 0..n {
            let input = if i == 0 { GENERATOR_INPUT_CHANNELS } else { ch[i - 1] };
            down.push(Conv2d::new(&mut ps, &format!("g.down{i}"), input, ch[i], 4, 2, 1)?);
            down_res.push(if i == 0 { None } else { Some(ResBlock::new(&mut ps, &format!("g.down{i}.res"), ch[i])?) });
        }
        // Decoder level k rebuilds the resolution of encoder level k − 1 and is concatenated with it.
        let mut up = Vec::with_capacity(n);
        let mut up_res = Vec::with_capacity(n);
        for k in (0..n).rev() {
            let input = if k == n - 1 { ch[k] } else { 2 * ch[k] };
            let output = if k == 0 { 3 } else { ch[k - 1] };
            up.push(ConvTranspose2d::new(&mut ps, &format!("g.up{k}"), input, output, 4, 2, 1)?);
            up_res.push(if k == 0 { None } else { Some(ResBlock::new(&mut ps, &format!("g.up{k}.res"), output)?) });
        }
        Ok(Self { params: ps, down, down_res, up, up_res, config })
    }

    pub fn config(&self) -> &RendererConfig {
        &self.config
    }

    /// Outputs of the encoder layers, shallowest first.
    pub fn encode(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = input.dims4()?;
        let s = self.config.image_size;
        if (c, h, w) != (GENERATOR_INPUT_CHANNELS, s, s) {
            return Err(Error::invalid(format!(
                "generator input must be [N, {GENERATOR_INPUT_CHANNELS}, {s}, {s}], got [{c}, {h}, {w}]"
            )));
        }
        let mut x = input.to_dtype(self.config.dtype)?;
        let mut out = Vec::with_capacity(self.down.len());
        for (conv, res) in self.down.iter().zip(&self.down_res) {
            x = nn::leaky_relu(&conv.forward(&x)?, 0.2)?;
            if let Some(r) = res {
                x = r.forward(&x)?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    /// `[N, 18, S, S] -> [N, 3, S, S]` in `[-1, 1]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let skips = self.encode(input)?;
        let n = skips.len();
        let mut y = skips[n - 1].clone();
        for (j, (conv, res)) in self.up.iter().zip(&self.up_res).enumerate() {
            let k = n - 1 - j;
            y = conv.forward(&y)?;
            if k == 0 {
                return Ok(y.tanh()?);
            }
            y = nn::leaky_relu(&y, 0.2)?;
            if let Some(r) = res {
                y = r.forward(&y)?;
            }
            y = Tensor::cat(&[&y, &skips[k - 1]], 1)?;
        }
        unreachable!("the last decoder level returns")
    }
}

/// Conditional PatchGAN over `(facial map, image)`.
pub struct DiscriminatorNet {
    params: ParamStore,
    layers: Vec<Conv2d>,
}

impl HasParams for DiscriminatorNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl DiscriminatorNet {
    pub fn new(config: &RendererConfig) -> Result<Self> {
        let mut ps = ParamStore::new(config.seed.wrapping_add(7), config.dtype);
        let w = config.disc_width;
        let spec = [(6, w, 2), (w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 8 * w, 1), (8 * w, 1, 1)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| Conv2d::new(&mut ps, &format!("d.conv{i}"), a, b, 4, s, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params: ps, layers })
    }

    /// Score grid `[N, 1, h, w]` plus the four intermediate activations.
    pub fn forward_features(&self, facial_map: &Tensor, image: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let dtype = self.params.dtype();
        let mut x = Tensor::cat(&[&facial_map.to_dtype(dtype)?, &image.to_dtype(dtype)?], 1)?;
        let mut feats = Vec::with_capacity(self.layers.len() - 1);
        for (i, conv) in self.layers.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = nn::leaky_relu(&x, 0.2)?;
                feats.push(x.clone());
            }
        }
        Ok((x, feats))
    }

    pub fn forward(&self, facial_map: &Tensor, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_features(facial_map, image)?.0)
    }
}

/// Fixed random 3-scale convolutional pyramid; its weights are constants, not variables.
pub struct PerceptualPyramid {
    convs: Vec<(Tensor, Tensor)>,
}

impl PerceptualPyramid {
    pub fn new(dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(PERCEPTUAL_SEED, dtype);
        let convs = [(3, 16), (16, 32), (32, 64)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let c = Conv2d::new(&mut ps, &format!("p.conv{i}"), a, b, 3, 1, 1)?;
                Ok((c.weight.as_tensor().detach(), c.bias.as_tensor().detach()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    /// Features at full, half and quarter resolution.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let dtype = self.convs[0].0.dtype();
        let mut x = image.to_dtype(dtype)?;
        let mut out = Vec::with_capacity(3);
        for (i, (w, b)) in self.convs.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            x = x.conv2d(w, 1, 1, 1, 1)?.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?;
            x = nn::leaky_relu(&x, 0.2)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

fn mean_abs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

fn mean_of(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len() as f64;
    let sum = terms.into_iter().reduce(|a, b| (a + b).expect("same shape")).ok_or_else(|| Error::invalid("no terms"))?;
    Ok((sum / n)?)
}

/// `mean((D(real) − 1)²) + mean(D(fake)²)`.
pub fn loss_discriminator(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    Ok(((real_scores - 1.0)?.sqr()?.mean_all()? + fake_scores.sqr()?.mean_all()?)?)
}

/// Per-term values of the generator objective, before weighting.
#[derive(Debug, Clone)]
pub struct GeneratorLossTerms {
    pub adversarial: Tensor,
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub feature: Tensor,
}

impl GeneratorLossTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        Ok((((&self.adversarial + (&self.pixel * w.pw)?)? + (&self.perceptual * w.p)?)? + (&self.feature * w.f)?)?)
    }
}

/// `L_A + λ_pw L_pw + λ_P L_P + λ_F L_F` on scalar values.
pub fn combine_generator_loss(adversarial: f64, pixel: f64, perceptual: f64, feature: f64, w: &LossWeights) -> f64 {
    adversarial + w.pw * pixel + w.p * perceptual + w.f * feature
}

pub fn loss_generator_terms(
    fake_scores: &Tensor,
    fake_img: &Tensor,
    real_img: &Tensor,
    d_features_fake: &[Tensor],
    d_features_real: &[Tensor],
    perceptual: &PerceptualPyramid,
) -> Result<GeneratorLossTerms> {
    if fake_img.dims() != real_img.dims() {
        return Err(Error::invalid("generated and real images differ in shape"));
    }
    if d_features_fake.len() != d_features_real.len() {
        return Err(Error::invalid("discriminator feature lists differ in length"));
    }
    let adversarial = (fake_scores - 1.0)?.sqr()?.mean_all()?;
    let pixel = mean_abs(fake_img, real_img)?;
    let pf = perceptual.features(fake_img)?;
    let pr = perceptual.features(real_img)?;
    let perceptual = mean_of(pf.iter().zip(&pr).map(|(a, b)| mean_abs(a, b)).collect::<Result<_>>()?)?;
    let feature = mean_of(
        d_features_fake
            .iter()
            .zip(d_features_real)
            .map(|(a, b)| mean_abs(a, b))
            .collect::<Result<_>>()?,
    )?;
    Ok(GeneratorLossTerms { adversarial, pixel, perceptual, feature })
}

pub fn loss_generator(
    fake_scores: &Tensor,
    fake_img: &Tensor,
    real_img: &Tensor,
    d_features_fake: &[Tensor],
    d_features_real: &[Tensor],
    perceptual: &PerceptualPyramid,
    weights: &LossWeights,
) -> Result<Tensor> {
    loss_generator_terms(fake_scores, fake_img, real_img, d_features_fake, d_features_real, perceptual)?.total(weights)
}

/// `Σ |W ⊙ (I' − I_m)|` over pixels and channels, divided by the pixel count (`N·H·W`).
/// `weights` is `[N, 1, H, W]` and broadcasts over channels.
pub fn loss_style_photometric(gen_img: &Tensor, matched: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = gen_img.dims4()?;
    if gen_img.dims() != matched.dims() {
        return Err(Error::invalid("generated and matched images differ in shape"));
    }
    if weights.dims() != [n, 1, h, w] {
        return Err(Error::invalid(format!("weight mask must be [{n}, 1, {h}, {w}], got {:?}", weights.dims())));
    }
    let weighted = (gen_img - matched)?.abs()?.broadcast_mul(&weights.to_dtype(gen_img.dtype())?)?;
    Ok((weighted.sum_all()? / (n * h * w) as f64)?)
}

/// `[1, 1, S, S]` tensor of mask weights.
pub fn weight_mask_tensor(mask: &WeightMask, dtype: DType) -> Result<Tensor> {
    let s = mask.size();
    Ok(Tensor::from_slice(mask.weights(), (1, 1, s, s), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `[1, 3, S, S]`: lit pixels 1, others −1, replicated over channels.
pub fn facial_map_tensor(map: &FacialMap, dtype: DType) -> Result<Tensor> {
    let s = map.size();
    let data: Vec<f32> = map.pixels().iter().map(|&v| if v > 0 { 1.0 } else { -1.0 }).collect();
    let one = Tensor::from_vec(data, (1, 1, s, s), &Device::Cpu)?;
    Ok(one.repeat((1, 3, 1, 1))?.to_dtype(dtype)?)
}

pub struct GeneratorInput<'a> {
    pub source: &'a RgbImage,
    pub facial_map: &'a FacialMap,
    pub isp: &'a IspSet,
}

impl GeneratorInput<'_> {
    /// `[1, 18, S, S]`; every component must be `S × S`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let s = self.facial_map.size();
        let square = |img: &RgbImage| img.width() as usize == s && img.height() as usize == s;
        if !square(self.source) || self.isp.images.len() != 4 || !self.isp.images.iter().all(square) {
            return Err(Error::invalid(format!("source, facial map and the four ISP images must all be {s}x{s}")));
        }
        let mut parts = vec![nn::rgb_to_tensor(self.source, dtype)?, facial_map_tensor(self.facial_map, dtype)?];
        for img in &self.isp.images {
            parts.push(nn::rgb_to_tensor(img, dtype)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

pub fn generate(input: &GeneratorInput, g: &GeneratorNet) -> Result<RgbImage> {
    nn::tensor_to_rgb(&g.forward(&input.to_tensor(g.config.dtype)?)?)
}

/// Index of the reference whose landmarks are nearest (mean 3-D point distance); ties go to the lowest index.
pub fn retrieve_matched_index(generated: &Landmarks68, references: &[Landmarks68]) -> Result<usize> {
    if references.is_empty() {
        return Err(Error::invalid("reference set is empty"));
    }
    let dist = |r: &Landmarks68| -> f64 {
        generated
            .points()
            .iter()
            .zip(r.points())
            .map(|(p, q)| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>().sqrt())
            .sum()
    };
    let mut best = (f64::INFINITY, 0);
    for (i, r) in references.iter().enumerate() {
        let d = dist(r);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

pub fn retrieve_matched_style<'a>(generated: &Landmarks68, set: &'a StyleReferenceSet) -> Result<&'a RgbImage> {
    Ok(&set.frames[retrieve_matched_index(generated, &set.landmarks)?])
}

/// One training batch; every tensor shares `N` and the spatial size.
#[derive(Debug, Clone)]
pub struct GanBatch {
    /// `[N, 18, S, S]`; channels 3..6 are the facial map.
    pub input: Tensor,
    pub target: Tensor,
    /// `[N, 1, S, S]`.
    pub weights: Tensor,
    pub matched: Tensor,
}

impl GanBatch {
    pub fn facial_map(&self) -> Result<Tensor> {
        Ok(self.input.narrow(1, 3, 3)?)
    }
}

/// Orthographic camera mapping the 512 canvas onto a `size × size` image.
pub fn canvas_camera(size: usize) -> Camera {
    Camera::orthographic(size as f64 / CANVAS_SIZE as f64, [0.0, 0.0])
}

/// Single-sample batch: the facial map and weight mask come from `target_landmarks`.
pub fn training_example(
    source: &RgbImage,
    target: &RgbImage,
    target_landmarks: &Landmarks68,
    isp: &IspSet,
    matched: &RgbImage,
    dtype: DType,
) -> Result<GanBatch> {
    let size = target.width() as usize;
    let cam = canvas_camera(size);
    let map = rasterize_facial_map(target_landmarks, &cam, size)?;
    let mask = build_weight_mask_with(target_landmarks, &cam, size)?;
    let input = GeneratorInput { source, facial_map: &map, isp }.to_tensor(dtype)?;
    Ok(GanBatch {
        input,
        target: nn::rgb_to_tensor(target, dtype)?,
        weights: weight_mask_tensor(&mask, dtype)?,
        matched: nn::rgb_to_tensor(matched, dtype)?,
    })
}

impl GanBatch {
    pub fn stack(items: &[GanBatch]) -> Result<GanBatch> {
        if items.is_empty() {
            return Err(Error::invalid("cannot stack an empty batch"));
        }
        let cat = |f: fn(&GanBatch) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&items.iter().map(f).collect::<Vec<_>>(), 0)?)
        };
        Ok(GanBatch {
            input: cat(|b| &b.input)?,
            target: cat(|b| &b.target)?,
            weights: cat(|b| &b.weights)?,
            matched: cat(|b| &b.matched)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanStepLosses {
    /// `L_G + L_sp`.
    pub generator_total: f64,
    pub discriminator: f64,
    pub adversarial: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub feature: f64,
    pub style: f64,
}

pub struct GanTrainer {
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub weights: LossWeights,
    pub perceptual: PerceptualPyramid,
}

impl GanTrainer {
    pub fn new(g: &GeneratorNet, d: &DiscriminatorNet, lr_g: f64, lr_d: f64) -> Result<Self> {
        Ok(Self {
            opt_g: Adam::new(g.params().vars(), lr_g)?.with_clip_norm(GAN_CLIP_NORM),
            opt_d: Adam::new(d.params().vars(), lr_d)?.with_clip_norm(GAN_CLIP_NORM),
            weights: LossWeights::default(),
            perceptual: PerceptualPyramid::new(g.config.dtype)?,
        })
    }
}

/// One discriminator update on `L_D`, then one generator update on `L_G + L_sp`.
pub fn train_step_gan(
    batch: &GanBatch,
    g: &GeneratorNet,
    d: &DiscriminatorNet,
    trainer: &mut GanTrainer,
) -> Result<GanStepLosses> {
    let cond = batch.facial_map()?;
    let real = batch.target.to_dtype(g.config.dtype)?;

    let fake = g.forward(&batch.input)?;
    let ld = loss_discriminator(&d.forward(&cond, &real)?, &d.forward(&cond, &fake.detach())?)?;
    let discriminator = nn::scalar(&ld)?;
    trainer.opt_d.backward_step(&ld)?;

    let (fake_scores, fake_feats) = d.forward_features(&cond, &fake)?;
    let real_feats: Vec<Tensor> = d.forward_features(&cond, &real)?.1.iter().map(Tensor::detach).collect();
    let terms = loss_generator_terms(&fake_scores, &fake, &real, &fake_feats, &real_feats, &trainer.perceptual)?;
    let lsp = loss_style_photometric(&fake, &batch.matched.to_dtype(g.config.dtype)?, &batch.weights)?;
    let total = (terms.total(&trainer.weights)? + &lsp)?;
    let out = GanStepLosses {
        generator_total: nn::scalar(&total)?,
        discriminator,
        adversarial: nn::scalar(&terms.adversarial)?,
        pixel: nn::scalar(&terms.pixel)?,
        perceptual: nn::scalar(&terms.perceptual)?,
        feature: nn::scalar(&terms.feature)?,
        style: nn::scalar(&lsp)?,
    };
    trainer.opt_g.backward_step(&total)?;
    Ok(out)
}

/// Deterministic shuffled mini-batch indices for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
    idx
}
