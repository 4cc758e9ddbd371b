//! Audio-driven landmark motion: mouth/eye displacements and probabilistic head pose.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::FrameMatrix;
use crate::error::{Error, Result};
use crate::geometry::{rotvec_to_matrix, HeadPose, Landmarks68, NUM_LANDMARKS};
use crate::nn::{self, Adam, GruCell, HasParams, Linear, LstmCell, ParamStore};

/// Look-ahead in video frames between audio input and mouth/eye output.
pub const DELAY: usize = 18;
/// Length of the head-pose conditioning window.
pub const HISTORY: usize = 256;
pub const POSE_DIM: usize = 6;
pub const STD_FLOOR: f64 = 1e-4;

/// Landmark indices driven by the mouth/eye network.
///
/// 25: upper eyelids (37, 38, 43, 44), chin (8) and the 20 mouth points.
/// 41: lower jaw 4..=12, both eyes and the 20 mouth points.
pub fn mouth_eye_vertices(k_me: usize) -> Result<Vec<usize>> {
    match k_me {
        25 => Ok([37, 38, 43, 44, 8].into_iter().chain(48..68).collect()),
        41 => Ok((4..=12).chain(36..48).chain(48..68).collect()),
        other => Err(Error::invalid(format!("unsupported mouth/eye vertex count {other} (use 25 or 41)"))),
    }
}

/// `T × K_me × 3` displacements relative to the neutral face.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSequence {
    deltas: Vec<Vec<[f64; 3]>>,
}

impl DisplacementSequence {
    pub fn new(deltas: Vec<Vec<[f64; 3]>>) -> Result<Self> {
        let k = deltas.first().map_or(0, Vec::len);
        if deltas.iter().any(|f| f.len() != k) {
            return Err(Error::invalid("every frame needs the same vertex count"));
        }
        if deltas.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("displacements must be finite"));
        }
        Ok(Self { deltas })
    }

    pub fn zeros(t: usize, k_me: usize) -> Self {
        Self { deltas: vec![vec![[0.0; 3]; k_me]; t] }
    }

    pub fn frames(&self) -> &[Vec<[f64; 3]>] {
        &self.deltas
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn k_me(&self) -> usize {
        self.deltas.first().map_or(0, Vec::len)
    }

    pub fn flat_rows(&self) -> Vec<Vec<f64>> {
        self.deltas.iter().map(|f| f.iter().flatten().copied().collect()).collect()
    }

    pub fn from_flat_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() % 3 != 0) {
            return Err(Error::invalid("displacement rows must hold whole 3-vectors"));
        }
        Self::new(rows.iter().map(|r| r.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).collect())
    }

    pub fn to_matrix(&self) -> Result<FrameMatrix> {
        FrameMatrix::from_rows(&self.flat_rows())
    }

    pub fn from_matrix(m: &FrameMatrix) -> Result<Self> {
        Self::from_flat_rows(&m.to_rows())
    }

    /// `[1, T, 3K]`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(nn::tensor_from_rows(&self.flat_rows(), dtype)?.unsqueeze(0)?)
    }
}

/// `Σ_t ‖Δv_t − Δv̂_t‖²_F`.
pub fn loss_me(truth: &DisplacementSequence, pred: &DisplacementSequence) -> Result<f64> {
    if truth.len() != pred.len() || truth.k_me() != pred.k_me() {
        return Err(Error::invalid(format!(
            "displacement shapes differ: {}x{} vs {}x{}",
            truth.len(),
            truth.k_me(),
            pred.len(),
            pred.k_me()
        )));
    }
    Ok(truth
        .frames()
        .iter()
        .zip(pred.frames())
        .flat_map(|(a, b)| a.iter().zip(b))
        .flat_map(|(p, q)| (0..3).map(move |i| (p[i] - q[i]).powi(2)))
        .sum())
}

/// Tensor form of [`loss_me`]: squared error summed over every axis but the batch, averaged over the batch.
pub fn loss_me_tensor(truth: &Tensor, pred: &Tensor) -> Result<Tensor> {
    let batch = truth.dim(0)? as f64;
    Ok(((truth - pred)?.sqr()?.sum_all()? / batch)?)
}

/// Most recent `HISTORY` poses, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHistory {
    poses: Vec<[f64; POSE_DIM]>,
}

impl PoseHistory {
    pub fn new(poses: Vec<[f64; POSE_DIM]>) -> Result<Self> {
        if poses.len() != HISTORY {
            return Err(Error::invalid(format!("pose history needs {HISTORY} entries, got {}", poses.len())));
        }
        if poses.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose history contains non-finite values"));
        }
        Ok(Self { poses })
    }

    /// Left-pads by repeating the oldest available pose (zero pose if none).
    pub fn from_recent(recent: &[[f64; POSE_DIM]]) -> Result<Self> {
        let tail = &recent[recent.len().saturating_sub(HISTORY)..];
        let fill = tail.first().copied().unwrap_or([0.0; POSE_DIM]);
        let mut poses = vec![fill; HISTORY - tail.len()];
        poses.extend_from_slice(tail);
        Self::new(poses)
    }

    pub fn poses(&self) -> &[[f64; POSE_DIM]] {
        &self.poses
    }

    /// Drops the oldest entry and appends `pose`.
    pub fn push(&mut self, pose: [f64; POSE_DIM]) {
        self.poses.remove(0);
        self.poses.push(pose);
    }
}

/// History window for predicting frame `t` of `poses`.
pub fn history_at(poses: &[[f64; POSE_DIM]], t: usize) -> Result<PoseHistory> {
    if poses.is_empty() {
        return PoseHistory::from_recent(&[]);
    }
    if t == 0 {
        return PoseHistory::from_recent(&poses[..1]);
    }
    PoseHistory::from_recent(&poses[..t])
}

/// Diagonal Gaussian over the 6-D pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrediction {
    pub mean: [f64; POSE_DIM],
    pub std: [f64; POSE_DIM],
}

/// `Σ_i ½ ln(2π ε_i²) + (x_i − μ_i)² / (2 ε_i²)`.
pub fn loss_ht(x: &[f64; POSE_DIM], pred: &GaussianPrediction) -> Result<f64> {
    if pred.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("standard deviations must be positive"));
    }
    Ok((0..POSE_DIM)
        .map(|i| {
            let var = pred.std[i] * pred.std[i];
            0.5 * (2.0 * std::f64::consts::PI * var).ln() + (x[i] - pred.mean[i]).powi(2) / (2.0 * var)
        })
        .sum())
}

/// Tensor form of [`loss_ht`] over `[B, 6]`, summed over dimensions and averaged over the batch.
pub fn loss_ht_tensor(x: &Tensor, mean: &Tensor, std: &Tensor) -> Result<Tensor> {
    let batch = x.dim(0)? as f64;
    let var = std.sqr()?;
    let log_term = ((&var * (2.0 * std::f64::consts::PI))?.log()? * 0.5)?;
    let quad = ((x - mean)?.sqr()? / (var * 2.0)?)?;
    Ok(((log_term + quad)?.sum_all()? / batch)?)
}

pub fn loss_mg(me: f64, ht: f64) -> f64 {
    me + ht
}

/// Draws `x ~ N(μ, diag(ε²))`; the rotation part is wrapped into the canonical range.
pub fn head_pose_sample<R: Rng + ?Sized>(pred: &GaussianPrediction, rng: &mut R) -> Result<HeadPose> {
    let mut x = [0.0; POSE_DIM];
    for i in 0..POSE_DIM {
        let z: f64 = StandardNormal.sample(rng);
        x[i] = pred.mean[i] + pred.std[i] * z;
    }
    HeadPose::new(canonical_rotvec([x[0], x[1], x[2]]), [x[3], x[4], x[5]])
}

/// Equivalent rotation vector with angle in `[0, π]`.
pub fn canonical_rotvec(v: [f64; 3]) -> [f64; 3] {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if theta <= std::f64::consts::PI {
        return v;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut wrapped = theta % two_pi;
    if wrapped > std::f64::consts::PI {
        wrapped -= two_pi;
    }
    v.map(|c| c / theta * wrapped)
}

/// `std = softplus(raw) · scale + 1e-4`.
pub fn std_from_raw(raw: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok((nn::softplus(raw)?.broadcast_mul(scale)? + STD_FLOOR)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MouthEyeConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub mlp: [usize; 2],
    pub k_me: usize,
    pub delay: usize,
    /// Multiplies the final layer so that untrained outputs already live on the pixel scale.
    pub output_scale: f64,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for MouthEyeConfig {
    fn default() -> Self {
        Self {
            feature_dim: 512,
            hidden: 256,
            lstm_layers: 3,
            mlp: [256, 512],
            k_me: 25,
            delay: DELAY,
            output_scale: 1.0,
            seed: 0,
            dtype: DType::F32,
        }
    }
}

pub struct MouthEyeModel {
    params: ParamStore,
    lstms: Vec<LstmCell>,
    mlp: Vec<Linear>,
    config: MouthEyeConfig,
    vertices: Vec<usize>,
}

impl HasParams for MouthEyeModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl MouthEyeModel {
    pub fn new(config: MouthEyeConfig) -> Result<Self> {
        let vertices = mouth_eye_vertices(config.k_me)?;
        let mut ps = ParamStore::new(config.seed, config.dtype);
        let lstms = (0..config.lstm_layers)
            .map(|l| {
                let input = if l == 0 { config.feature_dim } else { config.hidden };
                LstmCell::new(&mut ps, &format!("me.lstm{l}"), input, config.hidden)
            })
            .collect::<Result<Vec<_>>>()?;
        let widths = [config.hidden, config.mlp[0], config.mlp[1], 3 * config.k_me];
        let mlp = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut ps, &format!("me.mlp{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params: ps, lstms, mlp, config, vertices })
    }

    pub fn config(&self) -> &MouthEyeConfig {
        &self.config
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn output_dim(&self) -> usize {
        3 * self.config.k_me
    }

    /// `features: [B, T, F] -> [B, T, 3K]`. Output `t` consumes features up to `t + delay`.
    pub fn forward_tensor(&self, features: &Tensor) -> Result<Tensor> {
        let (_, t, f) = features.dims3()?;
        if f != self.config.feature_dim {
            return Err(Error::invalid(format!("expected {}-d features, got {f}", self.config.feature_dim)));
        }
        if t <= self.config.delay {
            return Err(Error::invalid(format!(
                "sequence of {t} frames must be longer than the {}-frame delay",
                self.config.delay
            )));
        }
        let features = features.to_dtype(self.config.dtype)?;
        let last = features.narrow(1, t - 1, 1)?;
        let pad = last.repeat((1, self.config.delay, 1))?;
        let padded = Tensor::cat(&[&features, &pad], 1)?;
        let states = nn::run_lstm_stack(&self.lstms, &padded)?.narrow(1, self.config.delay, t)?;
        let mut x = states;
        for (i, layer) in self.mlp.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.mlp.len() {
                x = x.relu()?;
            }
        }
        Ok((x * self.config.output_scale)?)
    }

    pub fn forward(&self, features: &[Vec<f64>]) -> Result<DisplacementSequence> {
        if features.len() <= self.config.delay {
            return Err(Error::invalid(format!(
                "sequence of {} frames must be longer than the {}-frame delay",
                features.len(),
                self.config.delay
            )));
        }
        let x = nn::tensor_from_rows(features, self.config.dtype)?.unsqueeze(0)?;
        let out = self.forward_tensor(&x)?.squeeze(0)?;
        DisplacementSequence::from_flat_rows(&nn::rows_from_tensor(&out)?)
    }
}

pub fn train_mouth_eye_step(model: &MouthEyeModel, opt: &mut Adam, features: &Tensor, truth: &Tensor) -> Result<f64> {
    let pred = model.forward_tensor(features)?;
    let loss = loss_me_tensor(&truth.to_dtype(pred.dtype())?, &pred)?;
    let value = nn::scalar(&loss)?;
    opt.backward_step(&loss)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadPoseConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// Per-dimension output scale for rotation (rad) and translation (px).
    pub pose_scale: [f64; POSE_DIM],
    pub seed: u64,
    pub dtype: DType,
}

impl Default for HeadPoseConfig {
    fn default() -> Self {
        Self {
            feature_dim: 512,
            hidden: 256,
            mlp_hidden: 256,
            pose_scale: [1.0; POSE_DIM],
            seed: 0,
            dtype: DType::F32,
        }
    }
}

pub struct HeadPoseModel {
    params: ParamStore,
    gru: GruCell,
    mean_head: [Linear; 2],
    std_head: [Linear; 2],
    config: HeadPoseConfig,
}

impl HasParams for HeadPoseModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl HeadPoseModel {
    pub fn new(config: HeadPoseConfig) -> Result<Self> {
        let mut ps = ParamStore::new(config.seed, config.dtype);
        let gru = GruCell::new(&mut ps, "hp.gru", POSE_DIM, config.hidden)?;
        let joint = config.hidden + config.feature_dim;
        let mean_head = [
            Linear::new(&mut ps, "hp.mean0", joint, config.mlp_hidden, true)?,
            Linear::new(&mut ps, "hp.mean1", config.mlp_hidden, POSE_DIM, true)?,
        ];
        let std_head = [
            Linear::new(&mut ps, "hp.std0", joint, config.mlp_hidden, true)?,
            Linear::new(&mut ps, "hp.std1", config.mlp_hidden, POSE_DIM, true)?,
        ];
        Ok(Self { params: ps, gru, mean_head, std_head, config })
    }

    pub fn config(&self) -> &HeadPoseConfig {
        &self.config
    }

    fn scale(&self) -> Result<Tensor> {
        Ok(Tensor::new(&self.config.pose_scale, &Device::Cpu)?.to_dtype(self.config.dtype)?)
    }

    /// `history: [B, HISTORY, 6]`, `h: [B, F]` -> `(mean, std)` each `[B, 6]`.
    pub fn predict_tensor(&self, history: &Tensor, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, len, dim) = history.dims3()?;
        if len != HISTORY || dim != POSE_DIM {
            return Err(Error::invalid(format!("history must be [B, {HISTORY}, {POSE_DIM}]")));
        }
        let dtype = self.config.dtype;
        let scale = self.scale()?;
        // Poses enter the recurrent encoder in units of the output scale.
        let history = history.to_dtype(dtype)?.broadcast_div(&scale)?;
        let mut state = Tensor::zeros((b, self.config.hidden), dtype, &Device::Cpu)?;
        for i in 0..HISTORY {
            state = self.gru.step(&history.narrow(1, i, 1)?.squeeze(1)?, &state)?;
        }
        let joint = Tensor::cat(&[&state, &h.to_dtype(dtype)?], D::Minus1)?;
        let mean = self.mean_head[1]
            .forward(&self.mean_head[0].forward(&joint)?.tanh()?)?
            .broadcast_mul(&scale)?;
        let raw = self.std_head[1].forward(&self.std_head[0].forward(&joint)?.tanh()?)?;
        Ok((mean, std_from_raw(&raw, &scale)?))
    }

    pub fn predict(&self, history: &PoseHistory, h_t: &[f64]) -> Result<GaussianPrediction> {
        if h_t.len() != self.config.feature_dim || h_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("h_t must be a finite {}-vector", self.config.feature_dim)));
        }
        let hist: Vec<f64> = history.poses().iter().flatten().copied().collect();
        let hist = Tensor::from_vec(hist, (1, HISTORY, POSE_DIM), &Device::Cpu)?;
        let h = Tensor::from_vec(h_t.to_vec(), (1, h_t.len()), &Device::Cpu)?;
        let (mean, std) = self.predict_tensor(&hist, &h)?;
        let (mean, std) = (nn::to_f64_vec(&mean)?, nn::to_f64_vec(&std)?);
        Ok(GaussianPrediction {
            mean: mean.try_into().expect("six means"),
            std: std.try_into().expect("six stds"),
        })
    }

    /// Autoregressive generation of one pose per feature row. With `sample = false` the mean is used.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        initial: &[[f64; POSE_DIM]],
        features: &[Vec<f64>],
        sample: bool,
        rng: &mut R,
    ) -> Result<Vec<HeadPose>> {
        let mut history = PoseHistory::from_recent(initial)?;
        let mut out = Vec::with_capacity(features.len());
        for h_t in features {
            let pred = self.predict(&history, h_t)?;
            let pose = if sample {
                head_pose_sample(&pred, rng)?
            } else {
                HeadPose::new(canonical_rotvec([pred.mean[0], pred.mean[1], pred.mean[2]]), [
                    pred.mean[3],
                    pred.mean[4],
                    pred.mean[5],
                ])?
            };
            history.push(pose.to_array());
            out.push(pose);
        }
        Ok(out)
    }
}

/// Teacher-forced histories `[T, HISTORY, 6]` for every frame of a pose sequence.
pub fn teacher_forced_histories(poses: &[[f64; POSE_DIM]], dtype: DType) -> Result<Tensor> {
    let mut flat: Vec<f64> = Vec::with_capacity(poses.len() * HISTORY * POSE_DIM);
    for t in 0..poses.len() {
        flat.extend(history_at(poses, t)?.poses().iter().flatten());
    }
    Ok(Tensor::from_vec(flat, (poses.len(), HISTORY, POSE_DIM), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn train_head_pose_step(
    model: &HeadPoseModel,
    opt: &mut Adam,
    histories: &Tensor,
    h: &Tensor,
    targets: &Tensor,
) -> Result<f64> {
    let (mean, std) = model.predict_tensor(histories, h)?;
    let loss = loss_ht_tensor(&targets.to_dtype(mean.dtype())?, &mean, &std)?;
    let value = nn::scalar(&loss)?;
    opt.backward_step(&loss)?;
    Ok(value)
}

/// Rotation pivot of a face: the centroid of its neutral landmarks.
pub fn face_pivot(neutral: &Landmarks68) -> [f64; 3] {
    neutral.centroid()
}

/// `p = pivot + (neutral + Δ − pivot)·R + trans` for every landmark; Δ is zero off `vertices`.
pub fn compose_landmarks(
    neutral: &Landmarks68,
    vertices: &[usize],
    deltas: &[[f64; 3]],
    pose: &HeadPose,
) -> Result<Landmarks68> {
    if vertices.len() != deltas.len() {
        return Err(Error::invalid("one displacement per driven vertex is required"));
    }
    let r = rotvec_to_matrix(pose.rotvec)?;
    let pivot = face_pivot(neutral);
    let mut local = *neutral.points();
    for (&v, d) in vertices.iter().zip(deltas) {
        for i in 0..3 {
            local[v][i] += d[i];
        }
    }
    let points: Vec<[f64; 3]> = local
        .iter()
        .map(|p| {
            let q = [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]];
            std::array::from_fn(|j| {
                pivot[j] + (0..3).map(|i| q[i] * r[(i, j)]).sum::<f64>() + pose.trans[j]
            })
        })
        .collect();
    Landmarks68::from_slice(&points)
}

/// One-hot `[68, K]` scatter matrix placing per-vertex displacements on the full face.
pub fn scatter_matrix(vertices: &[usize], dtype: DType) -> Result<Tensor> {
    let k = vertices.len();
    let mut m = vec![0.0; NUM_LANDMARKS * k];
    for (j, &v) in vertices.iter().enumerate() {
        m[v * k + j] = 1.0;
    }
    Ok(Tensor::from_vec(m, (NUM_LANDMARKS, k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Row-convention rotation matrices `[T, 3, 3]` from rotation vectors `[T, 3]`, differentiable everywhere.
pub fn rotvec_to_matrix_tensor(rotvec: &Tensor) -> Result<Tensor> {
    let t = rotvec.dim(0)?;
    let theta = (rotvec.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    let k = rotvec.broadcast_div(&theta)?;
    let (c, s) = (theta.cos()?, theta.sin()?);
    let one_minus_c = c.affine(-1.0, 1.0)?;
    let kx = k.narrow(1, 0, 1)?;
    let ky = k.narrow(1, 1, 1)?;
    let kz = k.narrow(1, 2, 1)?;
    let zero = kx.zeros_like()?;
    // Row convention is the transpose of the usual Rodrigues matrix: cI − s[k]× + (1 − c)kkᵀ.
    let cross_t = Tensor::cat(&[&zero, &kz, &ky.neg()?, &kz.neg()?, &zero, &kx, &ky, &kx.neg()?, &zero], 1)?;
    let outer = k.unsqueeze(2)?.broadcast_mul(&k.unsqueeze(1)?)?.reshape((t, 9))?;
    let eye = Tensor::eye(3, rotvec.dtype(), rotvec.device())?.reshape((1, 9))?;
    let r = (eye.broadcast_mul(&c)? + cross_t.broadcast_mul(&s)?)?;
    let r = (r + outer.broadcast_mul(&one_minus_c)?)?;
    Ok(r.reshape((t, 3, 3))?)
}

/// Differentiable [`compose_landmarks`] over a sequence.
///
/// `neutral: [68, 3]`, `deltas: [T, 3K]`, `poses: [T, 6]` -> `[T, 68, 3]`.
pub fn compose_landmarks_tensor(neutral: &Tensor, scatter: &Tensor, deltas: &Tensor, poses: &Tensor) -> Result<Tensor> {
    let t = deltas.dim(0)?;
    let k = scatter.dim(1)?;
    let pivot = neutral.mean_keepdim(0)?;
    let full = scatter.broadcast_matmul(&deltas.reshape((t, k, 3))?)?;
    let local = full.broadcast_add(&neutral.broadcast_sub(&pivot)?)?;
    let r = rotvec_to_matrix_tensor(&poses.narrow(1, 0, 3)?)?;
    let rotated = local.matmul(&r)?;
    let trans = poses.narrow(1, 3, 3)?.unsqueeze(1)?;
    Ok(rotated.broadcast_add(&trans)?.broadcast_add(&pivot.unsqueeze(0)?)?)
}
