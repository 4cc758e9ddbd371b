//! Style transfer fine-tuning: the feature network `f`, its constraint and
//! gradient-penalty losses, and the two-phase schedule that re-weights the
//! motion generator toward a reference style.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{ApcModel, AudioClip};
use crate::error::{Error, Result};
use crate::geometry::{Landmarks68, NUM_LANDMARKS};
use crate::motion::POSE_DIM;
use crate::nn::{self, Adam, HasParams, Linear, ParamStore};
use crate::training::{frame_features, MotionExample, MotionGenerator};

pub const LANDMARK_DIM: usize = 3 * NUM_LANDMARKS;
pub const FULL_TRANSFER_WIDTHS: [usize; 3] = [1024, 512, 256];
/// Fixed input normalization `(x − CENTER) / SCALE`, applied to every coordinate.
pub const INPUT_CENTER: f64 = 256.0;
pub const INPUT_SCALE: f64 = 64.0;
pub const MANIFEST_FILE: &str = "transfer_manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct StyleTransferConfig {
    pub widths: [usize; 3],
    pub seed: u64,
    pub dtype: DType,
}

impl Default for StyleTransferConfig {
    fn default() -> Self {
        Self { widths: FULL_TRANSFER_WIDTHS, seed: 0, dtype: DType::F32 }
    }
}

/// `204 → w0 (tanh) → w1 (tanh) → w2`.
pub struct StyleTransferNet {
    params: ParamStore,
    layers: [Linear; 3],
}

impl HasParams for StyleTransferNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl StyleTransferNet {
    pub fn new(config: &StyleTransferConfig) -> Result<Self> {
        let w = config.widths;
        if w.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut ps = ParamStore::new(config.seed, config.dtype);
        let layers = [
            Linear::new(&mut ps, "f.l0", LANDMARK_DIM, w[0], true)?,
            Linear::new(&mut ps, "f.l1", w[0], w[1], true)?,
            Linear::new(&mut ps, "f.l2", w[1], w[2], true)?,
        ];
        Ok(Self { params: ps, layers })
    }

    pub fn layer_widths(&self) -> [usize; 3] {
        [self.layers[0].out_dim(), self.layers[1].out_dim(), self.layers[2].out_dim()]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].out_dim()
    }

    pub fn layers(&self) -> &[Linear; 3] {
        &self.layers
    }

    fn check(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != LANDMARK_DIM {
            return Err(Error::invalid(format!("style features need {LANDMARK_DIM}-d inputs, got {d}")));
        }
        Ok(x.to_dtype(self.params.dtype())?)
    }

    /// `[B, 204] -> [B, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = ((self.check(x)? - INPUT_CENTER)? / INPUT_SCALE)?;
        let a1 = self.layers[0].forward(&x)?.tanh()?;
        let a2 = self.layers[1].forward(&a1)?.tanh()?;
        self.layers[2].forward(&a2)
    }

    /// `∇_x mean(f(x))` per row, `[B, 204]`, built from differentiable ops so that
    /// penalties on it backpropagate into the weights.
    pub fn input_gradient_of_mean(&self, x: &Tensor) -> Result<Tensor> {
        let x = ((self.check(x)? - INPUT_CENTER)? / INPUT_SCALE)?;
        let a1 = self.layers[0].forward(&x)?.tanh()?;
        let a2 = self.layers[1].forward(&a1)?.tanh()?;
        let w = |i: usize| self.layers[i].weight.as_tensor();
        let out = self.output_dim() as f64;
        // d mean / d a2 = 1ᵀ W2 / out, identical for every row.
        let g_a2 = (w(2).sum_keepdim(0)? / out)?;
        let g_z2 = (1.0 - a2.sqr()?)?.broadcast_mul(&g_a2)?;
        let g_z1 = (1.0 - a1.sqr()?)?.mul(&g_z2.matmul(w(1))?)?;
        Ok((g_z1.matmul(w(0))? / INPUT_SCALE)?)
    }
}

fn landmark_rows(frames: &[Landmarks68], dtype: DType) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = frames.iter().map(|l| l.points().iter().flatten().copied().collect()).collect();
    nn::tensor_from_rows(&rows, dtype)
}

/// `f(φ)` for one 204-vector.
pub fn style_features(phi: &[f64], f: &StyleTransferNet) -> Result<Vec<f64>> {
    if phi.len() != LANDMARK_DIM || phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("φ must be a finite {LANDMARK_DIM}-vector")));
    }
    nn::to_f64_vec(&f.forward(&nn::tensor_from_rows(&[phi.to_vec()], f.params.dtype())?)?)
}

/// `mean_b ‖f(φ_mg,b) − f(φ_s,b)‖²` over `[B, 204]` batches.
pub fn loss_constraint_tensor(phi_mg: &Tensor, phi_s: &Tensor, f: &StyleTransferNet) -> Result<Tensor> {
    if phi_mg.dims() != phi_s.dims() {
        return Err(Error::invalid("φ_mg and φ_s batches differ in shape"));
    }
    let diff = (f.forward(phi_mg)? - f.forward(phi_s)?)?;
    Ok(diff.sqr()?.sum(D::Minus1)?.mean_all()?)
}

pub fn loss_constraint(phi_mg: &[f64], phi_s: &[f64], f: &StyleTransferNet) -> Result<f64> {
    let a = style_features(phi_mg, f)?;
    let b = style_features(phi_s, f)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum())
}

/// `γ φ_s + (1 − γ) φ_mg`.
pub fn interpolate(phi_s: &[f64], phi_mg: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("γ = {gamma} lies outside [0, 1]")));
    }
    if phi_s.len() != phi_mg.len() {
        return Err(Error::invalid("φ_s and φ_mg differ in length"));
    }
    // Endpoints are returned verbatim so that γ ∈ {0, 1} is exact.
    if gamma == 0.0 {
        return Ok(phi_mg.to_vec());
    }
    if gamma == 1.0 {
        return Ok(phi_s.to_vec());
    }
    Ok(phi_s.iter().zip(phi_mg).map(|(s, m)| gamma * s + (1.0 - gamma) * m).collect())
}

/// Row-wise interpolation with one γ per row: `gammas: [B]`.
pub fn interpolate_tensor(phi_s: &Tensor, phi_mg: &Tensor, gammas: &Tensor) -> Result<Tensor> {
    let g = gammas.to_dtype(phi_s.dtype())?.unsqueeze(1)?;
    Ok((phi_s.broadcast_mul(&g)? + phi_mg.broadcast_mul(&(1.0 - &g)?)?)?)
}

/// `mean_b (‖g_b‖₂ − 1)²` for a batch of gradients `[B, D]`.
pub fn gradient_penalty(grad: &Tensor) -> Result<Tensor> {
    let norm = (grad.sqr()?.sum(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok((norm - 1.0)?.sqr()?.mean_all()?)
}

pub fn loss_regularizer_tensor(phi_hat: &Tensor, f: &StyleTransferNet) -> Result<Tensor> {
    gradient_penalty(&f.input_gradient_of_mean(phi_hat)?)
}

pub fn loss_regularizer(phi_hat: &[f64], f: &StyleTransferNet) -> Result<f64> {
    if phi_hat.len() != LANDMARK_DIM {
        return Err(Error::invalid(format!("φ̂ must be a {LANDMARK_DIM}-vector")));
    }
    nn::scalar(&loss_regularizer_tensor(&nn::tensor_from_rows(&[phi_hat.to_vec()], f.params.dtype())?, f)?)
}

/// `L_mg + L_sc + L_r`.
pub fn loss_transfer(l_mg: f64, l_sc: f64, l_r: f64) -> f64 {
    l_mg + l_sc + l_r
}

pub fn loss_transfer_tensor(l_mg: &Tensor, l_sc: &Tensor, l_r: &Tensor) -> Result<Tensor> {
    Ok(((l_mg + l_sc)? + l_r)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMode {
    Fixed,
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub gamma_mode: GammaMode,
    pub gamma: f64,
    /// Phase 1: only `f` trains.
    pub frozen_epochs: usize,
    /// Phase 2: `f` and the motion generator train.
    pub finetune_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Cosine floor reached at the end of each phase.
    pub lr_floor: f64,
    /// Frames per optimization step; an epoch covers the clip once.
    pub window: usize,
    /// Frames per step in the anchor head-pose term.
    pub anchor_pose_frames: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            gamma_mode: GammaMode::UniformRandom,
            gamma: 0.5,
            frozen_epochs: 1,
            finetune_epochs: 5,
            lr_phase1: 1e-3,
            lr_phase2: 1e-7,
            lr_floor: 0.0,
            window: 60,
            anchor_pose_frames: 16,
            seed: 0,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("γ = {} lies outside [0, 1]", self.gamma)));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0 && self.lr_floor >= 0.0) {
            return Err(Error::invalid("learning rates must be positive and the floor non-negative"));
        }
        if self.window == 0 {
            return Err(Error::invalid("transfer window must be positive"));
        }
        Ok(())
    }
}

/// Models consumed by [`run_transfer`]; the motion generator is updated in place.
pub struct TransferModels<'a> {
    pub apc: &'a ApcModel,
    pub motion: &'a MotionGenerator,
    pub style_net: &'a StyleTransferNet,
    /// Identity whose neutral landmarks carry the generated motion.
    pub neutral: &'a Landmarks68,
    /// Supervised data anchoring `L_mg` during fine-tuning.
    pub anchor: &'a [MotionExample],
}

/// Checkpoint paths that must exist before transfer may start.
pub fn require_pretrained(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::Precondition(format!("pretrained weights not found at {}", p.display())));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferStep {
    pub phase: u8,
    pub epoch: usize,
    pub lr: f64,
    pub l_mg: f64,
    pub l_sc: f64,
    pub l_r: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub steps: Vec<TransferStep>,
    /// Learning rate after the last scheduler update of each phase.
    pub final_lr_phase1: f64,
    pub final_lr_phase2: f64,
}

/// Window starts covering `[0, n)` in steps of `window`; the last window is clamped to end at `n`.
fn epoch_windows(n: usize, window: usize) -> Vec<usize> {
    let w = window.min(n);
    let mut starts: Vec<usize> = (0..n).step_by(w).map(|s| s.min(n - w)).collect();
    starts.dedup();
    starts
}

fn sample_gammas(cfg: &TransferConfig, n: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
    let g: Vec<f64> = (0..n)
        .map(|_| match cfg.gamma_mode {
            GammaMode::Fixed => cfg.gamma,
            GammaMode::UniformRandom => rng.random_range(0.0..=1.0),
        })
        .collect();
    Ok(Tensor::from_vec(g, n, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Fine-tunes on one style clip: phase 1 trains only `f`, phase 2 trains `f` and the motion
/// generator. Each phase follows its own cosine schedule down to `lr_floor`.
pub fn run_transfer(
    reference: &[Landmarks68],
    audio: &AudioClip,
    models: &TransferModels,
    cfg: &TransferConfig,
) -> Result<TransferReport> {
    cfg.validate()?;
    if models.anchor.is_empty() {
        return Err(Error::Precondition("transfer needs anchor motion data for L_mg".into()));
    }
    let delay = models.motion.mouth_eye.config().delay;
    let window = cfg.window.min(reference.len());
    if window <= delay {
        return Err(Error::invalid(format!(
            "transfer windows of {window} frames must exceed the {delay}-frame motion delay"
        )));
    }
    let features = frame_features(models.apc, audio, reference.len())?;
    let dtype = models.motion.dtype();
    let phi_s_all = landmark_rows(reference, dtype)?;
    let starts = epoch_windows(reference.len(), window);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let f_vars = models.style_net.params().vars();
    let mut all_vars = f_vars.clone();
    all_vars.extend(models.motion.vars());

    let mut steps = Vec::new();
    let mut finals = [cfg.lr_floor; 2];
    for (phase, epochs, lr_max) in [(1u8, cfg.frozen_epochs, cfg.lr_phase1), (2, cfg.finetune_epochs, cfg.lr_phase2)] {
        let vars = if phase == 1 { f_vars.clone() } else { all_vars.clone() };
        let mut opt = Adam::new(vars, lr_max)?.with_clip_norm(10.0);
        let total = epochs * starts.len();
        let mut k = 0;
        for epoch in 0..epochs {
            let rollout: Vec<[f64; POSE_DIM]> = models
                .motion
                .generate(&features, &[[0.0; POSE_DIM]])?
                .poses
                .iter()
                .map(|p| p.to_array())
                .collect();
            for &s in &starts {
                let lr = nn::cosine_annealing(lr_max, cfg.lr_floor, k, total);
                opt.set_learning_rate(lr);
                let initial: Vec<[f64; POSE_DIM]> =
                    if s == 0 { vec![[0.0; POSE_DIM]] } else { rollout[..s].to_vec() };
                let mut phi_mg = models
                    .motion
                    .landmarks_tensor(models.neutral, &features[s..s + window], &initial)?
                    .reshape((window, LANDMARK_DIM))?;
                let anchor = &models.anchor[rng.random_range(0..models.anchor.len())];
                let frames: Vec<usize> =
                    (0..cfg.anchor_pose_frames.min(anchor.len())).map(|_| rng.random_range(0..anchor.len())).collect();
                let mut l_mg = models.motion.loss_mg_tensor(anchor, &frames)?;
                if phase == 1 {
                    phi_mg = phi_mg.detach();
                    l_mg = l_mg.detach();
                }
                let phi_s = phi_s_all.narrow(0, s, window)?;
                let l_sc = loss_constraint_tensor(&phi_mg, &phi_s, models.style_net)?;
                let gammas = sample_gammas(cfg, window, &mut rng, dtype)?;
                let phi_hat = interpolate_tensor(&phi_s, &phi_mg.detach(), &gammas)?;
                let l_r = loss_regularizer_tensor(&phi_hat, models.style_net)?;
                let loss = loss_transfer_tensor(&l_mg, &l_sc, &l_r)?;
                let step = TransferStep {
                    phase,
                    epoch,
                    lr,
                    l_mg: nn::scalar(&l_mg)?,
                    l_sc: nn::scalar(&l_sc)?,
                    l_r: nn::scalar(&l_r)?,
                    total: nn::scalar(&loss)?,
                };
                log::debug!("transfer {step:?}");
                steps.push(step);
                opt.backward_step(&loss)?;
                k += 1;
            }
        }
        finals[phase as usize - 1] = nn::cosine_annealing(lr_max, cfg.lr_floor, k, total);
    }
    Ok(TransferReport { steps, final_lr_phase1: finals[0], final_lr_phase2: finals[1] })
}

/// Pre-trains `f` on same-style landmark pairs with `L_sc + L_r`. `groups[i]` holds frames of style `i`.
pub fn pretrain_style_net(
    f: &StyleTransferNet,
    groups: &[Vec<Landmarks68>],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) || batch == 0 {
        return Err(Error::invalid("pre-training needs non-empty style groups and a positive batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(f.params().vars(), lr)?.with_clip_norm(10.0);
    let dtype = f.params().dtype();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut a = Vec::with_capacity(batch);
        let mut b = Vec::with_capacity(batch);
        for _ in 0..batch {
            let g = &groups[rng.random_range(0..groups.len())];
            a.push(g[rng.random_range(0..g.len())].clone());
            b.push(g[rng.random_range(0..g.len())].clone());
        }
        let (ta, tb) = (landmark_rows(&a, dtype)?, landmark_rows(&b, dtype)?);
        let gammas = Tensor::from_vec(
            (0..batch).map(|_| rng.random_range(0.0..=1.0)).collect::<Vec<f64>>(),
            batch,
            &candle_core::Device::Cpu,
        )?;
        let l = (loss_constraint_tensor(&ta, &tb, f)? + loss_regularizer_tensor(&interpolate_tensor(&ta, &tb, &gammas)?, f)?)?;
        losses.push(nn::scalar(&l)?);
        opt.backward_step(&l)?;
    }
    Ok(losses)
}

/// Reproducibility record written beside the fine-tuned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferManifest {
    pub style_name: String,
    pub reference_landmark_file: PathBuf,
    pub audio_file: PathBuf,
    pub epochs: usize,
    pub gamma_mode: GammaMode,
    pub seed: u64,
}

impl TransferManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
