//! Style reference retrieval, keypoint/pose disentanglement, thin-plate-spline
//! feature warping and intermediate style pattern synthesis.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataharness::{canonical_face, driven_deltas, render_face};
use crate::error::{Error, Result};
use crate::geometry::{recompose_keypoints, rotvec_to_matrix, HeadPose, KeypointSet, Landmarks68, PoseParams};
use crate::motion::{compose_landmarks, face_pivot, mouth_eye_vertices};
use crate::nn::{self, Adam, Conv2d, ConvTranspose2d, HasParams, Linear, ParamStore};

/// Landmark indices used as the K = 15 warp keypoints.
pub const STYLE_KEYPOINTS: [usize; 15] = [0, 8, 16, 19, 24, 30, 36, 38, 43, 45, 48, 51, 54, 57, 62];
pub const TEMPLATE_NAMES: [&str; 4] = ["neutral", "mouth-open", "head-turn", "eyes-closed"];
/// Disentangling networks see the image average-pooled to this side length.
pub const POOLED_SIZE: usize = 64;

const TAU_CENTER: [f64; 3] = [256.0, 256.0, 0.0];
const TAU_SCALE: f64 = 64.0;
const EPS_SCALE: f64 = 8.0;
const KEYPOINT_SCALE: f64 = 128.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionTemplate {
    pub name: String,
    pub landmarks: Landmarks68,
}

#[derive(Serialize, Deserialize)]
struct TemplateRecord {
    name: String,
    landmarks: Vec<[f64; 3]>,
}

/// Neutral face, widest mouth opening, strongest head yaw, closed eyes.
pub fn default_templates() -> [MotionTemplate; 4] {
    let neutral = canonical_face();
    let vertices = mouth_eye_vertices(25).expect("25 is supported");
    let still = HeadPose::zero();
    let shaped = |o: f64, e: f64, pose: &HeadPose| {
        compose_landmarks(&neutral, &vertices, &driven_deltas(o, e), pose).expect("template is finite")
    };
    let turned = HeadPose::new([0.0, 20f64.to_radians(), 0.0], [0.0; 3]).expect("finite pose");
    let patterns = [
        neutral.clone(),
        shaped(40.0, 1.0, &still),
        shaped(0.0, 1.0, &turned),
        shaped(0.0, 0.05, &still),
    ];
    let mut it = patterns.into_iter();
    TEMPLATE_NAMES.map(|name| MotionTemplate { name: name.to_string(), landmarks: it.next().unwrap() })
}

fn validate_templates(templates: &[MotionTemplate]) -> Result<()> {
    if templates.len() != 4 {
        return Err(Error::Validation(format!("expected 4 motion templates, got {}", templates.len())));
    }
    for i in 0..4 {
        for j in i + 1..4 {
            if templates[i].landmarks == templates[j].landmarks {
                return Err(Error::Validation(format!(
                    "templates {} and {} are identical",
                    templates[i].name, templates[j].name
                )));
            }
        }
    }
    Ok(())
}

pub fn save_templates(path: &Path, templates: &[MotionTemplate]) -> Result<()> {
    validate_templates(templates)?;
    let records: Vec<TemplateRecord> = templates
        .iter()
        .map(|t| TemplateRecord { name: t.name.clone(), landmarks: t.landmarks.points().to_vec() })
        .collect();
    let text = serde_json::to_string_pretty(&records).expect("templates serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_templates(path: &Path) -> Result<Vec<MotionTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<TemplateRecord> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let templates = records
        .into_iter()
        .map(|r| {
            Ok(MotionTemplate {
                name: r.name,
                landmarks: Landmarks68::from_slice(&r.landmarks).map_err(|e| Error::format(path, e.to_string()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    validate_templates(&templates)?;
    Ok(templates)
}

/// Mean 3-D point distance after aligning centroids.
pub fn template_distance(a: &Landmarks68, b: &Landmarks68) -> f64 {
    let (ca, cb) = (a.centroid(), b.centroid());
    a.points()
        .iter()
        .zip(b.points())
        .map(|(p, q)| (0..3).map(|i| ((p[i] - ca[i]) - (q[i] - cb[i])).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.points().len() as f64
}

/// Nearest frame per template; ties go to the lowest frame index.
pub fn select_style_references(video: &[Landmarks68], templates: &[MotionTemplate]) -> Result<[usize; 4]> {
    if video.len() < 4 {
        return Err(Error::invalid(format!("need at least 4 frames, got {}", video.len())));
    }
    validate_templates(templates)?;
    let mut out = [0usize; 4];
    for (slot, template) in templates.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (i, frame) in video.iter().enumerate() {
            let d = template_distance(frame, &template.landmarks);
            if d < best.0 {
                best = (d, i);
            }
        }
        out[slot] = best.1;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StyleReferenceSet {
    pub frames: Vec<RgbImage>,
    pub source_indices: [usize; 4],
    pub landmarks: Vec<Landmarks68>,
}

impl StyleReferenceSet {
    /// Retrieves the four reference frames; `frame(t)` supplies the image for frame `t`.
    pub fn retrieve(
        video: &[Landmarks68],
        templates: &[MotionTemplate],
        mut frame: impl FnMut(usize) -> Result<RgbImage>,
    ) -> Result<Self> {
        let source_indices = select_style_references(video, templates)?;
        let frames = source_indices.iter().map(|&i| frame(i)).collect::<Result<Vec<_>>>()?;
        let landmarks = source_indices.iter().map(|&i| video[i].clone()).collect();
        Ok(Self { frames, source_indices, landmarks })
    }

    /// Applies `order` to every slot, e.g. `[1, 0, 2, 3]` swaps the first two.
    pub fn permuted(&self, order: [usize; 4]) -> Self {
        Self {
            frames: order.iter().map(|&i| self.frames[i].clone()).collect(),
            source_indices: order.map(|i| self.source_indices[i]),
            landmarks: order.iter().map(|&i| self.landmarks[i].clone()).collect(),
        }
    }
}

/// 2-D thin-plate spline interpolating `values` at `ctrl`.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    ctrl: Vec<[f64; 2]>,
    weights: Vec<[f64; 2]>,
    /// Rows: constant, x, y.
    affine: [[f64; 2]; 3],
    center: [f64; 2],
    scale: f64,
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

fn check_configuration(points: &[[f64; 2]], what: &str) -> Result<()> {
    let n = points.len() as f64;
    let mean = points.iter().fold([0.0, 0.0], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n]);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let trace = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    if !(trace > 0.0) || det <= 1e-12 * trace * trace {
        return Err(Error::SingularWarp(format!("{what} keypoints are collinear")));
    }
    let tol = 1e-9 * trace.sqrt();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]) <= tol {
                return Err(Error::SingularWarp(format!("{what} keypoints {i} and {j} coincide")));
            }
        }
    }
    Ok(())
}

impl ThinPlateSpline {
    pub fn fit(ctrl: &[[f64; 2]], values: &[[f64; 2]]) -> Result<Self> {
        if ctrl.len() != values.len() {
            return Err(Error::invalid("control points and values differ in count"));
        }
        if ctrl.len() < 4 {
            return Err(Error::invalid("a thin-plate spline needs at least 4 correspondences"));
        }
        if ctrl.iter().chain(values).flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("keypoints must be finite"));
        }
        check_configuration(ctrl, "target")?;
        check_configuration(values, "source")?;
        let n = ctrl.len();
        // Work in centred, unit-scale coordinates for conditioning.
        let center = ctrl.iter().fold([0.0, 0.0], |m, p| [m[0] + p[0] / n as f64, m[1] + p[1] / n as f64]);
        let scale = (ctrl.iter().map(|p| (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sum::<f64>()
            / n as f64)
            .sqrt();
        let norm: Vec<[f64; 2]> = ctrl.iter().map(|p| [(p[0] - center[0]) / scale, (p[1] - center[1]) / scale]).collect();
        let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
        let mut b = DMatrix::<f64>::zeros(n + 3, 2);
        for i in 0..n {
            for j in 0..n {
                let r2 = (norm[i][0] - norm[j][0]).powi(2) + (norm[i][1] - norm[j][1]).powi(2);
                a[(i, j)] = tps_kernel(r2);
            }
            let row = [1.0, norm[i][0], norm[i][1]];
            for (k, v) in row.into_iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
            b[(i, 0)] = values[i][0];
            b[(i, 1)] = values[i][1];
        }
        let sol = a
            .lu()
            .solve(&b)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::SingularWarp("thin-plate system is singular".into()))?;
        let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
        let affine = [0, 1, 2].map(|k| [sol[(n + k, 0)], sol[(n + k, 1)]]);
        Ok(Self { ctrl: norm, weights, affine, center, scale })
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let q = [(p[0] - self.center[0]) / self.scale, (p[1] - self.center[1]) / self.scale];
        let mut out = [0.0; 2];
        for (d, o) in out.iter_mut().enumerate() {
            *o = self.affine[0][d] + self.affine[1][d] * q[0] + self.affine[2][d] * q[1];
        }
        for (c, w) in self.ctrl.iter().zip(&self.weights) {
            let u = tps_kernel((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }
}

/// Bilinear gather of an `H × W` map at arbitrary source positions, clamped to the border.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    height: usize,
    width: usize,
    index: [Vec<u32>; 4],
    weight: [Vec<f64>; 4],
}

impl SamplingGrid {
    /// `source(x, y)` gives the input position read by output pixel `(x, y)`.
    pub fn from_fn(height: usize, width: usize, source: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut index: [Vec<u32>; 4] = Default::default();
        let mut weight: [Vec<f64>; 4] = Default::default();
        let axis = |v: f64, n: usize| -> (usize, usize, f64) {
            let v = v.clamp(0.0, (n - 1) as f64);
            if n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (v.floor() as usize).min(n - 2);
            (i0, i0 + 1, v - i0 as f64)
        };
        for y in 0..height {
            for x in 0..width {
                let [sx, sy] = source(x as f64, y as f64);
                let (sx, sy) = (if sx.is_finite() { sx } else { x as f64 }, if sy.is_finite() { sy } else { y as f64 });
                let (x0, x1, fx) = axis(sx, width);
                let (y0, y1, fy) = axis(sy, height);
                let taps = [
                    (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * width + x1, fx * (1.0 - fy)),
                    (y1 * width + x0, (1.0 - fx) * fy),
                    (y1 * width + x1, fx * fy),
                ];
                for (k, (i, w)) in taps.into_iter().enumerate() {
                    index[k].push(i as u32);
                    weight[k].push(w);
                }
            }
        }
        Self { height, width, index, weight }
    }

    /// Backward warp through a spline fitted from output positions to input positions.
    pub fn from_spline(height: usize, width: usize, spline: &ThinPlateSpline) -> Self {
        Self::from_fn(height, width, |x, y| spline.apply([x, y]))
    }

    /// `x: [N, C, H, W]`; gradients flow to `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::invalid(format!(
                "grid is {}x{}, feature map is {h}x{w}",
                self.height, self.width
            )));
        }
        let flat = x.reshape((n * c, h * w))?;
        let mut acc: Option<Tensor> = None;
        for k in 0..4 {
            let idx = Tensor::from_slice(&self.index[k], h * w, x.device())?;
            let wts = Tensor::from_slice(&self.weight[k], (1, h * w), x.device())?.to_dtype(x.dtype())?;
            let term = flat.index_select(&idx, 1)?.broadcast_mul(&wts)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        Ok(acc.expect("four taps").reshape((n, c, h, w))?)
    }
}

/// Warps `feature: [N, C, H, W]` so that content at `src` moves to `dst` (keypoints in feature pixels).
pub fn warp_features(feature: &Tensor, src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Tensor> {
    if src.len() != dst.len() {
        return Err(Error::invalid("source and target keypoint counts differ"));
    }
    let (_, _, h, w) = feature.dims4()?;
    let spline = ThinPlateSpline::fit(dst, src)?;
    SamplingGrid::from_spline(h, w, &spline).apply(feature)
}

fn project_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (mut u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    if (u * v_t).determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    u * v_t
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisentangleConfig {
    /// Side of the square input images.
    pub image_size: usize,
    /// Base channel width of the convolutional trunk.
    pub width: usize,
    pub keypoints: Vec<usize>,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        Self { image_size: 512, width: 16, keypoints: STYLE_KEYPOINTS.to_vec(), seed: 0, dtype: DType::F32 }
    }
}

impl DisentangleConfig {
    fn validate(&self) -> Result<()> {
        if self.image_size < POOLED_SIZE || self.image_size % POOLED_SIZE != 0 {
            return Err(Error::invalid(format!("image size must be a positive multiple of {POOLED_SIZE}")));
        }
        if self.keypoints.len() < 4 || self.keypoints.iter().any(|&k| k >= 68) {
            return Err(Error::invalid("keypoints must be at least 4 landmark indices below 68"));
        }
        Ok(())
    }
}

/// Four stride-2 convolutions on the pooled image, then a 256-wide hidden layer.
struct Trunk {
    convs: Vec<Conv2d>,
    hidden: Linear,
}

impl Trunk {
    fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let chans = [3, width, 2 * width, 4 * width, 8 * width];
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| Conv2d::new(ps, &format!("{name}.conv{i}"), c[0], c[1], 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let side = POOLED_SIZE / 16;
        let hidden = Linear::new(ps, &format!("{name}.hidden"), 8 * width * side * side, 256, true)?;
        Ok(Self { convs, hidden })
    }

    fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut x = pooled.clone();
        for conv in &self.convs {
            x = nn::leaky_relu(&conv.forward(&x)?, 0.2)?;
        }
        let x = x.flatten_from(1)?;
        nn::leaky_relu(&self.hidden.forward(&x)?, 0.2)
    }
}

fn pool_input(img: &RgbImage, image_size: usize, dtype: DType) -> Result<Tensor> {
    if img.width() as usize != image_size || img.height() as usize != image_size {
        return Err(Error::invalid(format!(
            "expected a {image_size}x{image_size} image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let t = nn::rgb_to_tensor(img, dtype)?;
    let k = image_size / POOLED_SIZE;
    Ok(if k == 1 { t } else { t.avg_pool2d(k)? })
}

/// Canonical keypoints `c_k` from one image.
pub struct KeypointExtractor {
    params: ParamStore,
    trunk: Trunk,
    head: Linear,
    config: DisentangleConfig,
}

impl HasParams for KeypointExtractor {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl KeypointExtractor {
    pub fn new(config: DisentangleConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.seed, config.dtype);
        let trunk = Trunk::new(&mut ps, "kp", config.width)?;
        let head = Linear::new(&mut ps, "kp.head", 256, 3 * config.keypoints.len(), true)?;
        Ok(Self { params: ps, trunk, head, config })
    }

    pub fn config(&self) -> &DisentangleConfig {
        &self.config
    }

    pub fn input(&self, img: &RgbImage) -> Result<Tensor> {
        pool_input(img, self.config.image_size, self.config.dtype)
    }

    /// `[N, 3, 64, 64] -> [N, 3K]`, keypoints divided by their nominal scale.
    pub fn forward_raw(&self, pooled: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.trunk.forward(pooled)?)
    }

    pub fn extract(&self, img: &RgbImage) -> Result<KeypointSet> {
        let raw = nn::to_f64_vec(&self.forward_raw(&self.input(img)?)?)?;
        KeypointSet::new(raw.chunks(3).map(|c| [c[0], c[1], c[2]].map(|v| v * KEYPOINT_SCALE)).collect())
    }
}

/// Rotation, translation and per-keypoint expression offsets from one image.
pub struct PoseExpressionNet {
    params: ParamStore,
    trunk: Trunk,
    head: Linear,
    config: DisentangleConfig,
}

impl HasParams for PoseExpressionNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl PoseExpressionNet {
    pub fn new(config: DisentangleConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.seed.wrapping_add(1), config.dtype);
        let trunk = Trunk::new(&mut ps, "pose", config.width)?;
        let head = Linear::new(&mut ps, "pose.head", 256, 12 + 3 * config.keypoints.len(), true)?;
        Ok(Self { params: ps, trunk, head, config })
    }

    pub fn config(&self) -> &DisentangleConfig {
        &self.config
    }

    pub fn input(&self, img: &RgbImage) -> Result<Tensor> {
        pool_input(img, self.config.image_size, self.config.dtype)
    }

    /// `[N, 3, 64, 64] -> [N, 12 + 3K]` in the layout of [`encode_pose`].
    pub fn forward_raw(&self, pooled: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.trunk.forward(pooled)?)
    }

    pub fn estimate(&self, img: &RgbImage) -> Result<PoseParams> {
        let raw = nn::to_f64_vec(&self.forward_raw(&self.input(img)?)?)?;
        decode_pose(&raw)
    }
}

/// Normalized pose vector: `R − I` (9, row-major), `(τ − centre) / 64` (3), `ε / 8` (3K).
pub fn encode_pose(pose: &PoseParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(12 + 3 * pose.expression.len());
    for i in 0..3 {
        for j in 0..3 {
            out.push(pose.rotation[(i, j)] - if i == j { 1.0 } else { 0.0 });
        }
    }
    out.extend((0..3).map(|i| (pose.translation[i] - TAU_CENTER[i]) / TAU_SCALE));
    out.extend(pose.expression.iter().flatten().map(|v| v / EPS_SCALE));
    out
}

/// Inverse of [`encode_pose`]; the rotation block is projected onto SO(3).
pub fn decode_pose(raw: &[f64]) -> Result<PoseParams> {
    if raw.len() < 12 || (raw.len() - 12) % 3 != 0 {
        return Err(Error::invalid("pose vector must hold 12 + 3K values"));
    }
    let m = Matrix3::from_fn(|i, j| raw[3 * i + j] + if i == j { 1.0 } else { 0.0 });
    let rotation = project_rotation(&m);
    let translation = Vector3::from_fn(|i, _| raw[9 + i] * TAU_SCALE + TAU_CENTER[i]);
    let expression = raw[12..].chunks(3).map(|c| [c[0], c[1], c[2]].map(|v| v * EPS_SCALE)).collect();
    PoseParams::new(rotation, translation, expression)
}

pub fn disentangle(
    img: &RgbImage,
    extractor: &KeypointExtractor,
    pose_net: &PoseExpressionNet,
) -> Result<(KeypointSet, PoseParams)> {
    let c = extractor.extract(img)?;
    let pose = pose_net.estimate(img)?;
    if pose.expression.len() != c.len() {
        return Err(Error::invalid("extractor and pose network disagree on K"));
    }
    Ok((c, pose))
}

/// Exact decomposition of a synthetic frame: `c_k = v_k − pivot`, `R` from the head pose,
/// `τ = pivot + t`, `ε_k = Δ_k R`, so that `c_k R + τ + ε_k` reproduces the frame's keypoints.
pub fn ground_truth_disentangle(
    neutral: &Landmarks68,
    keypoints: &[usize],
    vertices: &[usize],
    deltas: &[[f64; 3]],
    pose: &HeadPose,
) -> Result<(KeypointSet, PoseParams)> {
    let pivot = face_pivot(neutral);
    let r = rotvec_to_matrix(pose.rotvec)?;
    let c = KeypointSet::new(
        keypoints.iter().map(|&k| {
            let p = neutral.point(k);
            [p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]]
        })
        .collect(),
    )?;
    let expression = keypoints
        .iter()
        .map(|k| {
            let d = vertices.iter().position(|v| v == k).map_or([0.0; 3], |i| deltas[i]);
            let mut out = [0.0; 3];
            for (j, o) in out.iter_mut().enumerate() {
                *o = d[0] * r[(0, j)] + d[1] * r[(1, j)] + d[2] * r[(2, j)];
            }
            out
        })
        .collect();
    let translation = Vector3::new(pivot[0] + pose.trans[0], pivot[1] + pose.trans[1], pivot[2] + pose.trans[2]);
    Ok((c, PoseParams::new(r, translation, expression)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub width: usize,
    pub num_keypoints: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { image_size: 512, width: 16, num_keypoints: STYLE_KEYPOINTS.len(), seed: 0, dtype: DType::F32 }
    }
}

/// Four stride-2 encoder levels whose features are warped from `C_k` to `C̄_k`,
/// a bottleneck that receives the reference pose vector broadcast spatially,
/// and four upsampling levels with warped skips.
pub struct IntermediateGenerator {
    params: ParamStore,
    enc: Vec<Conv2d>,
    bottleneck: Conv2d,
    up: Vec<ConvTranspose2d>,
    fuse: Vec<Conv2d>,
    config: GeneratorConfig,
}

impl HasParams for IntermediateGenerator {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

/// Output keypoint pair per sample: `(C_k, C̄_k)` in 512-canvas pixels.
pub type WarpPair = (Vec<[f64; 2]>, Vec<[f64; 2]>);

impl IntermediateGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.image_size < 16 || config.image_size % 16 != 0 {
            return Err(Error::invalid("generator image size must be a positive multiple of 16"));
        }
        let mut ps = ParamStore::new(config.seed, config.dtype);
        let w = config.width;
        let chans = [3, w, 2 * w, 4 * w, 8 * w];
        let enc = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| Conv2d::new(&mut ps, &format!("ig.enc{i}"), c[0], c[1], 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let style = 12 + 3 * config.num_keypoints;
        let bottleneck = Conv2d::new(&mut ps, "ig.bottleneck", 8 * w + style, 8 * w, 3, 1, 1)?;
        let up = [(8 * w, 4 * w), (4 * w, 2 * w), (2 * w, w), (w, 3)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| ConvTranspose2d::new(&mut ps, &format!("ig.up{i}"), a, b, 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let fuse = [(8 * w, 4 * w), (4 * w, 2 * w), (2 * w, w)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Conv2d::new(&mut ps, &format!("ig.fuse{i}"), a, b, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params: ps, enc, bottleneck, up, fuse, config })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Canvas keypoints mapped into the pixel grid of a level with `stride` image pixels per cell.
    fn level_points(&self, pts: &[[f64; 2]], stride: usize) -> Vec<[f64; 2]> {
        let to_img = self.config.image_size as f64 / crate::geometry::CANVAS_SIZE as f64;
        let s = stride as f64;
        pts.iter().map(|p| p.map(|v| (v * to_img - (s - 1.0) / 2.0) / s)).collect()
    }

    /// `neutral: [N, 3, S, S]`, `style: [N, 12 + 3K]`, one keypoint pair per sample → `[N, 3, S, S]` in `[-1, 1]`.
    pub fn forward(&self, neutral: &Tensor, pairs: &[WarpPair], style: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = neutral.dims4()?;
        let s = self.config.image_size;
        if (h, w) != (s, s) || pairs.len() != n {
            return Err(Error::invalid(format!("expected {n} keypoint pairs and {s}x{s} inputs")));
        }
        let mut feats = Vec::with_capacity(4);
        let mut x = neutral.to_dtype(self.config.dtype)?;
        for conv in &self.enc {
            x = nn::leaky_relu(&conv.forward(&x)?, 0.2)?;
            feats.push(x.clone());
        }
        // Warp every level with a spline fitted once per sample in level coordinates.
        let mut warped = Vec::with_capacity(4);
        for (level, f) in feats.iter().enumerate() {
            let stride = 1 << (level + 1);
            let mut per_sample = Vec::with_capacity(n);
            for (b, (src, dst)) in pairs.iter().enumerate() {
                let fb = f.narrow(0, b, 1)?;
                per_sample.push(warp_features(&fb, &self.level_points(src, stride), &self.level_points(dst, stride))?);
            }
            warped.push(Tensor::cat(&per_sample, 0)?);
        }
        let (_, _, bh, bw) = warped[3].dims4()?;
        let style = style.to_dtype(self.config.dtype)?;
        let k = style.dim(1)?;
        let style_map = style.reshape((n, k, 1, 1))?.broadcast_as((n, k, bh, bw))?.contiguous()?;
        let mut y = nn::leaky_relu(&self.bottleneck.forward(&Tensor::cat(&[&warped[3], &style_map], 1)?)?, 0.2)?;
        for i in 0..3 {
            y = nn::leaky_relu(&self.up[i].forward(&y)?, 0.2)?;
            y = Tensor::cat(&[&y, &warped[2 - i]], 1)?;
            y = nn::leaky_relu(&self.fuse[i].forward(&y)?, 0.2)?;
        }
        Ok(self.up[3].forward(&y)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
pub struct IspSet {
    pub images: Vec<RgbImage>,
}

impl IspSet {
    pub fn save_pngs(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let path = dir.join(format!("isp_{i}.png"));
                img.save(&path).map_err(|e| crate::facialmap::image_error(&path, e))?;
                Ok(path)
            })
            .collect()
    }
}

fn xy(points: &[[f64; 3]]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [p[0], p[1]]).collect()
}

/// One ISP image per reference. Only the reference's pose and expression are
/// read; keypoints always come from the neutral image.
pub fn build_isp(
    neutral_image: &RgbImage,
    neutral: &(KeypointSet, PoseParams),
    references: &StyleReferenceSet,
    pose_net: &PoseExpressionNet,
    generator: &IntermediateGenerator,
) -> Result<IspSet> {
    if references.frames.len() != 4 {
        return Err(Error::invalid("a style reference set holds exactly 4 frames"));
    }
    let (c, source_pose) = neutral;
    let source_kp = xy(recompose_keypoints(c, source_pose)?.points());
    let input = nn::rgb_to_tensor(neutral_image, generator.config.dtype)?;
    let images = references
        .frames
        .iter()
        .map(|frame| {
            let pose = pose_net.estimate(frame)?;
            let driven = xy(recompose_keypoints(c, &pose)?.points());
            let style = Tensor::from_vec(encode_pose(&pose), (1, 12 + 3 * c.len()), &Device::Cpu)?;
            let out = generator.forward(&input, &[(source_kp.clone(), driven)], &style)?;
            nn::tensor_to_rgb(&out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IspSet { images })
}

/// A rendered synthetic frame with its exact disentanglement.
#[derive(Debug, Clone)]
pub struct HarnessView {
    pub image: RgbImage,
    pub landmarks: Landmarks68,
    pub keypoints: KeypointSet,
    pub pose: PoseParams,
}

impl HarnessView {
    pub fn driven_keypoints(&self) -> Result<Vec<[f64; 2]>> {
        Ok(xy(recompose_keypoints(&self.keypoints, &self.pose)?.points()))
    }
}

fn make_view(opening: f64, openness: f64, pose: &HeadPose, image_size: usize) -> Result<HarnessView> {
    let neutral = canonical_face();
    let vertices = mouth_eye_vertices(25)?;
    let deltas = driven_deltas(opening, openness);
    let landmarks = compose_landmarks(&neutral, &vertices, &deltas, pose)?;
    let (keypoints, pose) = ground_truth_disentangle(&neutral, &STYLE_KEYPOINTS, &vertices, &deltas, pose)?;
    Ok(HarnessView { image: render_face(&landmarks, image_size)?, landmarks, keypoints, pose })
}

/// The canonical identity at rest.
pub fn neutral_view(image_size: usize) -> Result<HarnessView> {
    make_view(0.0, 1.0, &HeadPose::zero(), image_size)
}

/// Random head poses (yaw ±20°, pitch ±10°, roll ±8°, ±25 px shift), mouth openings and eye states.
pub fn harness_views(n: usize, image_size: usize, seed: u64) -> Result<Vec<HarnessView>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rot = [rng.random_range(-10.0..10.0f64), rng.random_range(-20.0..20.0f64), rng.random_range(-8.0..8.0f64)]
                .map(f64::to_radians);
            let trans = [rng.random_range(-25.0..25.0), rng.random_range(-25.0..25.0), 0.0];
            let pose = HeadPose::new(rot, trans)?;
            make_view(rng.random_range(0.0..35.0), rng.random_range(0.05..1.2), &pose, image_size)
        })
        .collect()
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch.min(n)).map(|_| rng.random_range(0..n)).collect()
}

/// Regresses both networks onto the exact decomposition with a cosine-annealed
/// learning rate (`lr` down to `lr / 20`); returns per-step `(keypoint, pose)` losses.
pub fn train_disentanglers(
    extractor: &KeypointExtractor,
    pose_net: &PoseExpressionNet,
    views: &[HarnessView],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if views.is_empty() {
        return Err(Error::invalid("no training views"));
    }
    let dtype = extractor.config.dtype;
    let pooled = views.iter().map(|v| extractor.input(&v.image)).collect::<Result<Vec<_>>>()?;
    let kp_targets: Vec<Vec<f64>> = views
        .iter()
        .map(|v| v.keypoints.points().iter().flatten().map(|x| x / KEYPOINT_SCALE).collect())
        .collect();
    let pose_targets: Vec<Vec<f64>> = views.iter().map(|v| encode_pose(&v.pose)).collect();
    // Sum of per-group means: rotation, translation (weighted 4x), expression.
    let width = pose_targets[0].len();
    let group_weights: Vec<f64> = (0..width)
        .map(|i| match i {
            0..9 => width as f64 / 9.0,
            9..12 => 4.0 * width as f64 / 3.0,
            _ => width as f64 / (width - 12) as f64,
        })
        .collect();
    let group_weights = Tensor::from_vec(group_weights, (1, width), &Device::Cpu)?.to_dtype(dtype)?;
    let mut opt_k = Adam::new(extractor.params.vars(), lr)?;
    let mut opt_p = Adam::new(pose_net.params.vars(), lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let rate = nn::cosine_annealing(lr, lr / 20.0, step, steps);
        opt_k.set_learning_rate(rate);
        opt_p.set_learning_rate(rate);
        let idx = batch_indices(&mut rng, views.len(), batch);
        let x = Tensor::cat(&idx.iter().map(|&i| &pooled[i]).collect::<Vec<_>>(), 0)?;
        let kt = nn::tensor_from_rows(&idx.iter().map(|&i| kp_targets[i].clone()).collect::<Vec<_>>(), dtype)?;
        let pt = nn::tensor_from_rows(&idx.iter().map(|&i| pose_targets[i].clone()).collect::<Vec<_>>(), dtype)?;
        let lk = (extractor.forward_raw(&x)? - kt)?.sqr()?.mean_all()?;
        let lp = (pose_net.forward_raw(&x)? - pt)?.sqr()?.broadcast_mul(&group_weights)?.mean_all()?;
        let (vk, vp) = (nn::scalar(&lk)?, nn::scalar(&lp)?);
        opt_k.backward_step(&lk)?;
        opt_p.backward_step(&lp)?;
        history.push((vk, vp));
    }
    Ok(history)
}

/// Mean absolute error between two `[-1, 1]` tensors, expressed on the `[0, 1]` intensity scale.
pub fn intensity_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(((a - b)?.abs()?.mean_all()? * 0.5)?)
}

/// Trains the generator to map the neutral view onto each target view using exact keypoints;
/// every fourth step uses the neutral view as its own target. Returns per-step losses.
pub fn train_intermediate_generator(
    generator: &IntermediateGenerator,
    neutral: &HarnessView,
    targets: &[HarnessView],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::invalid("no training targets"));
    }
    let dtype = generator.config.dtype;
    let input = nn::rgb_to_tensor(&neutral.image, dtype)?;
    let src = neutral.driven_keypoints()?;
    let prepared: Vec<(Tensor, Vec<[f64; 2]>, Vec<f64>)> = std::iter::once(neutral)
        .chain(targets)
        .map(|v| Ok((nn::rgb_to_tensor(&v.image, dtype)?, v.driven_keypoints()?, encode_pose(&v.pose))))
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(generator.params.vars(), lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut idx: Vec<usize> = batch_indices(&mut rng, targets.len(), batch).iter().map(|i| i + 1).collect();
        if step % 4 == 0 {
            idx[0] = 0;
        }
        let n = idx.len();
        let x = input.repeat((n, 1, 1, 1))?;
        let pairs: Vec<WarpPair> = idx.iter().map(|&i| (src.clone(), prepared[i].1.clone())).collect();
        let style = nn::tensor_from_rows(&idx.iter().map(|&i| prepared[i].2.clone()).collect::<Vec<_>>(), dtype)?;
        let target = Tensor::cat(&idx.iter().map(|&i| &prepared[i].0).collect::<Vec<_>>(), 0)?;
        let loss = intensity_l1(&generator.forward(&x, &pairs, &style)?, &target)?;
        history.push(nn::scalar(&loss)?);
        opt.backward_step(&loss)?;
    }
    Ok(history)
}
