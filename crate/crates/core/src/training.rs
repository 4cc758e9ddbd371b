//! Audio-to-motion orchestration: per-frame stream features, the combined
//! motion generator, and its training loop.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{align_audio_to_video, apc_train_step, compute_log_mel, mel_batch, ApcModel, AudioClip, MelSpectrogram, AUDIO_FPS, VIDEO_FPS};
use crate::container;
use crate::dataharness::SyntheticSample;
use crate::error::{Error, Result};
use crate::geometry::{HeadPose, Landmarks68};
use crate::motion::{
    compose_landmarks, compose_landmarks_tensor, loss_ht_tensor, loss_me, loss_me_tensor, scatter_matrix,
    teacher_forced_histories, DisplacementSequence, HeadPoseConfig, HeadPoseModel, MouthEyeConfig, MouthEyeModel,
    POSE_DIM,
};
use crate::nn::{self, Adam, HasParams};

/// Largest tolerated shortfall of audio frames against video frames; the tail is padded by repetition.
pub const MAX_FEATURE_SHORTFALL: usize = 2;

/// One stream feature per video frame, aligned to `n_frames`.
pub fn frame_features(apc: &ApcModel, clip: &AudioClip, n_frames: usize) -> Result<Vec<Vec<f64>>> {
    let mel = compute_log_mel(clip)?;
    let mut rows = align_audio_to_video(&apc.encode(&mel)?, AUDIO_FPS, VIDEO_FPS)?;
    if rows.len() + MAX_FEATURE_SHORTFALL < n_frames || rows.is_empty() {
        return Err(Error::invalid(format!(
            "audio yields {} frames of features but {n_frames} video frames are required",
            rows.len()
        )));
    }
    rows.truncate(n_frames);
    while rows.len() < n_frames {
        rows.push(rows[rows.len() - 1].clone());
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApcTrainConfig {
    pub steps: usize,
    /// Mel frames per crop.
    pub crop: usize,
    /// Crops per step, each from a uniformly drawn clip.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains the APC encoder on random equal-length crops of the clips' log-Mel spectrograms.
pub fn train_apc(apc: &ApcModel, clips: &[&AudioClip], cfg: &ApcTrainConfig) -> Result<Vec<f64>> {
    let (steps, crop) = (cfg.steps, cfg.crop);
    let mels: Vec<MelSpectrogram> = clips.iter().map(|c| compute_log_mel(c)).collect::<Result<_>>()?;
    if mels.is_empty() || mels.iter().any(|m| m.n_frames() < crop) || crop < 2 || cfg.batch == 0 {
        return Err(Error::invalid(format!("every clip needs at least {crop} (≥ 2) mel frames and the batch must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(apc.params().vars(), cfg.lr)?.with_clip_norm(10.0);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let crops: Vec<MelSpectrogram> = (0..cfg.batch)
            .map(|_| {
                let m = &mels[rng.random_range(0..mels.len())];
                let start = rng.random_range(0..=m.n_frames() - crop);
                MelSpectrogram::new(m.frames()[start..start + crop].to_vec())
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&MelSpectrogram> = crops.iter().collect();
        losses.push(apc_train_step(apc, &mut opt, &mel_batch(&refs, apc.config().dtype)?, 1)?);
    }
    Ok(losses)
}

/// Supervised motion data for one clip.
#[derive(Debug, Clone)]
pub struct MotionExample {
    pub features: Vec<Vec<f64>>,
    pub deltas: DisplacementSequence,
    pub poses: Vec<[f64; POSE_DIM]>,
}

impl MotionExample {
    pub fn new(features: Vec<Vec<f64>>, deltas: DisplacementSequence, poses: Vec<[f64; POSE_DIM]>) -> Result<Self> {
        if features.len() != deltas.len() || features.len() != poses.len() || features.is_empty() {
            return Err(Error::invalid(format!(
                "features ({}), displacements ({}) and poses ({}) must share a non-zero length",
                features.len(),
                deltas.len(),
                poses.len()
            )));
        }
        Ok(Self { features, deltas, poses })
    }

    pub fn from_sample(apc: &ApcModel, sample: &SyntheticSample) -> Result<Self> {
        let features = frame_features(apc, &sample.audio, sample.n_frames())?;
        Self::new(features, sample.deltas.clone(), sample.pose_rows())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionGeneratorConfig {
    pub mouth_eye: MouthEyeConfig,
    pub head_pose: HeadPoseConfig,
}

impl MotionGeneratorConfig {
    /// Full-size layer widths over `feature_dim`-d stream features.
    pub fn full_size(feature_dim: usize, seed: u64) -> Self {
        Self {
            mouth_eye: MouthEyeConfig { feature_dim, seed, ..MouthEyeConfig::default() },
            head_pose: HeadPoseConfig { feature_dim, seed: seed.wrapping_add(1), ..HeadPoseConfig::default() },
        }
    }

    /// Recurrent width `hidden` (256 at full size) with MLP widths `hidden, 2·hidden`;
    /// output scales match the pixel and radian ranges of the synthetic harness.
    pub fn scaled(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        Self {
            mouth_eye: MouthEyeConfig {
                feature_dim,
                hidden,
                mlp: [hidden, 2 * hidden],
                output_scale: 4.0,
                seed,
                ..MouthEyeConfig::default()
            },
            head_pose: HeadPoseConfig {
                feature_dim,
                hidden: hidden / 2,
                mlp_hidden: hidden,
                pose_scale: [0.1, 0.1, 0.1, 4.0, 4.0, 4.0],
                seed: seed.wrapping_add(1),
                ..HeadPoseConfig::default()
            },
        }
    }
}

/// Mouth/eye displacement model plus probabilistic head-pose model.
pub struct MotionGenerator {
    pub mouth_eye: MouthEyeModel,
    pub head_pose: HeadPoseModel,
}

/// Generated motion of one clip.
#[derive(Debug, Clone)]
pub struct GeneratedMotion {
    pub deltas: DisplacementSequence,
    pub poses: Vec<HeadPose>,
}

impl MotionGenerator {
    pub fn new(config: &MotionGeneratorConfig) -> Result<Self> {
        if config.mouth_eye.feature_dim != config.head_pose.feature_dim {
            return Err(Error::invalid("both motion models must consume the same feature dimension"));
        }
        Ok(Self {
            mouth_eye: MouthEyeModel::new(config.mouth_eye.clone())?,
            head_pose: HeadPoseModel::new(config.head_pose.clone())?,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mouth_eye.params().vars();
        v.extend(self.head_pose.params().vars());
        v
    }

    pub fn dtype(&self) -> DType {
        self.mouth_eye.config().dtype
    }

    /// Both models in one checkpoint; their block names are disjoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blocks = self.mouth_eye.params().to_blocks()?;
        blocks.extend(self.head_pose.params().to_blocks()?);
        container::write_checkpoint(path, &blocks)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let blocks = container::read_checkpoint(path)?;
        self.mouth_eye.params().load_blocks(&blocks)?;
        self.head_pose.params().load_blocks(&blocks)
    }

    pub fn copy_from(&self, other: &MotionGenerator) -> Result<()> {
        self.mouth_eye.params().copy_from(other.mouth_eye.params())?;
        self.head_pose.params().copy_from(other.head_pose.params())
    }

    /// Deterministic motion: predicted displacements and the mean head-pose rollout.
    pub fn generate(&self, features: &[Vec<f64>], initial_poses: &[[f64; POSE_DIM]]) -> Result<GeneratedMotion> {
        let deltas = self.mouth_eye.forward(features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let poses = self.head_pose.rollout(initial_poses, features, false, &mut rng)?;
        Ok(GeneratedMotion { deltas, poses })
    }

    pub fn generate_landmarks(
        &self,
        neutral: &Landmarks68,
        features: &[Vec<f64>],
        initial_poses: &[[f64; POSE_DIM]],
    ) -> Result<Vec<Landmarks68>> {
        let motion = self.generate(features, initial_poses)?;
        let vertices = self.mouth_eye.vertices();
        motion
            .deltas
            .frames()
            .iter()
            .zip(&motion.poses)
            .map(|(d, p)| compose_landmarks(neutral, vertices, d, p))
            .collect()
    }

    /// Differentiable landmarks `[T, 68, 3]`; head poses are the model's means under
    /// histories built from its own (detached) mean rollout.
    pub fn landmarks_tensor(
        &self,
        neutral: &Landmarks68,
        features: &[Vec<f64>],
        initial_poses: &[[f64; POSE_DIM]],
    ) -> Result<Tensor> {
        let dtype = self.dtype();
        let feats = nn::tensor_from_rows(features, dtype)?;
        let deltas = self.mouth_eye.forward_tensor(&feats.unsqueeze(0)?)?.squeeze(0)?;
        let initial: Vec<[f64; POSE_DIM]> =
            if initial_poses.is_empty() { vec![[0.0; POSE_DIM]] } else { initial_poses.to_vec() };
        let rollout = self.generate(features, &initial)?.poses;
        let offset = initial.len();
        let mut history_source = initial;
        history_source.extend(rollout.iter().map(HeadPose::to_array));
        let histories = teacher_forced_histories(&history_source, dtype)?.narrow(0, offset, features.len())?;
        let (mean, _) = self.head_pose.predict_tensor(&histories, &feats)?;
        let neutral_t = nn::tensor_from_rows(&neutral.points().iter().map(|p| p.to_vec()).collect::<Vec<_>>(), dtype)?;
        compose_landmarks_tensor(&neutral_t, &scatter_matrix(self.mouth_eye.vertices(), dtype)?, &deltas, &mean)
    }

    /// `(L_me, L_ht)` on one example; `pose_frames` restricts the pose term to those frames (all when empty).
    pub fn loss_terms(&self, example: &MotionExample, pose_frames: &[usize]) -> Result<(Tensor, Tensor)> {
        let dtype = self.dtype();
        let feats = nn::tensor_from_rows(&example.features, dtype)?;
        let pred = self.mouth_eye.forward_tensor(&feats.unsqueeze(0)?)?;
        let truth = nn::tensor_from_rows(&example.deltas.flat_rows(), dtype)?.unsqueeze(0)?;
        let me = loss_me_tensor(&truth, &pred)?;
        let all: Vec<usize> = (0..example.len()).collect();
        let frames = if pose_frames.is_empty() { &all[..] } else { pose_frames };
        if frames.iter().any(|&t| t >= example.len()) {
            return Err(Error::invalid("pose frame index out of range"));
        }
        let idx = Tensor::from_vec(frames.iter().map(|&t| t as u32).collect::<Vec<_>>(), frames.len(), &Device::Cpu)?;
        let histories = teacher_forced_histories(&example.poses, dtype)?.index_select(&idx, 0)?;
        let h = feats.index_select(&idx, 0)?;
        let targets = nn::tensor_from_rows(&example.poses.iter().map(|p| p.to_vec()).collect::<Vec<_>>(), dtype)?
            .index_select(&idx, 0)?;
        let (mean, std) = self.head_pose.predict_tensor(&histories, &h)?;
        let ht = loss_ht_tensor(&targets, &mean, &std)?;
        Ok((me, ht))
    }

    /// `L_mg = L_me + L_ht` as a differentiable scalar.
    pub fn loss_mg_tensor(&self, example: &MotionExample, pose_frames: &[usize]) -> Result<Tensor> {
        let (me, ht) = self.loss_terms(example, pose_frames)?;
        Ok((me + ht)?)
    }

    /// Mean `L_me` over examples, evaluated through the inference path.
    pub fn mean_loss_me(&self, examples: &[MotionExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("no examples to evaluate"));
        }
        let mut total = 0.0;
        for ex in examples {
            total += loss_me(&ex.deltas, &self.mouth_eye.forward(&ex.features)?)?;
        }
        Ok(total / examples.len() as f64)
    }

    /// Mean full `L_mg` over examples with every frame in the pose term.
    pub fn mean_loss_mg(&self, examples: &[MotionExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("no examples to evaluate"));
        }
        let mut total = 0.0;
        for ex in examples {
            total += nn::scalar(&self.loss_mg_tensor(ex, &[])?)?;
        }
        Ok(total / examples.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Frames per step in the head-pose term.
    pub pose_frames: usize,
    pub seed: u64,
}

/// One example and a random frame subset per step; returns `L_mg` before each update.
pub fn train_motion(gen: &MotionGenerator, examples: &[MotionExample], cfg: &MotionTrainConfig) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("motion training needs at least one example"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(gen.vars(), cfg.lr)?.with_clip_norm(10.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let ex = &examples[rng.random_range(0..examples.len())];
        let frames: Vec<usize> = (0..cfg.pose_frames.min(ex.len())).map(|_| rng.random_range(0..ex.len())).collect();
        let loss = gen.loss_mg_tensor(ex, &frames)?;
        losses.push(nn::scalar(&loss)?);
        opt.backward_step(&loss)?;
    }
    Ok(losses)
}
