//! Landmark and keypoint types plus the rigid recomposition used by style mapping.
//!
//! Points are row vectors. A rotation `R` acts on the right: `p' = p R`. Every
//! rotation matrix in this crate follows that convention, so
//! `rotvec_to_matrix` returns the transpose of the textbook (column-vector)
//! Rodrigues matrix.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;
pub const LANDMARK_DIM: usize = NUM_LANDMARKS * 3;
pub const DEFAULT_NUM_KEYPOINTS: usize = 15;
pub const CANVAS_SIZE: usize = 512;

/// A named run of landmark indices in the standard 68-point layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkGroup {
    pub name: &'static str,
    pub range: Range<usize>,
    /// Whether the last point connects back to the first.
    pub closed: bool,
}

// `Range` is not `Copy`, so groups are built on demand.
pub fn landmark_groups() -> [LandmarkGroup; 9] {
    [
        LandmarkGroup { name: "jaw", range: 0..17, closed: false },
        LandmarkGroup { name: "right_brow", range: 17..22, closed: false },
        LandmarkGroup { name: "left_brow", range: 22..27, closed: false },
        LandmarkGroup { name: "nose_bridge", range: 27..31, closed: false },
        LandmarkGroup { name: "nose_base", range: 31..36, closed: false },
        LandmarkGroup { name: "right_eye", range: 36..42, closed: true },
        LandmarkGroup { name: "left_eye", range: 42..48, closed: true },
        LandmarkGroup { name: "outer_lips", range: 48..60, closed: true },
        LandmarkGroup { name: "inner_lips", range: 60..68, closed: true },
    ]
}

pub const JAW: Range<usize> = 0..17;
pub const BROWS: Range<usize> = 17..27;
pub const RIGHT_EYE: Range<usize> = 36..42;
pub const LEFT_EYE: Range<usize> = 42..48;
pub const OUTER_LIPS: Range<usize> = 48..60;
pub const INNER_LIPS: Range<usize> = 60..68;
pub const MOUTH: Range<usize> = 48..68;

/// 68 facial landmarks in canvas pixel space (z is a pixel-equivalent depth).
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks68 {
    points: [[f64; 3]; NUM_LANDMARKS],
}

impl Landmarks68 {
    pub fn new(points: [[f64; 3]; NUM_LANDMARKS]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("landmark coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn zeros() -> Self {
        Self {
            points: [[0.0; 3]; NUM_LANDMARKS],
        }
    }

    pub fn from_slice(points: &[[f64; 3]]) -> Result<Self> {
        let points: [[f64; 3]; NUM_LANDMARKS] = points.try_into().map_err(|_| {
            Error::invalid(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            ))
        })?;
        Self::new(points)
    }

    pub fn points(&self) -> &[[f64; 3]; NUM_LANDMARKS] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> [f64; 3] {
        self.points[idx]
    }

    /// Applies `f` to every point. Non-finite results are rejected.
    pub fn map(&self, mut f: impl FnMut(usize, [f64; 3]) -> [f64; 3]) -> Result<Self> {
        let mut points = self.points;
        for (i, p) in points.iter_mut().enumerate() {
            *p = f(i, *p);
        }
        Self::new(points)
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut points = self.points;
        for p in points.iter_mut() {
            for d in 0..3 {
                p[d] += offset[d];
            }
        }
        Self { points }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / NUM_LANDMARKS as f64)
    }

    /// Axis-aligned 2-D bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bbox_2d(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            b.0 = b.0.min(p[0]);
            b.1 = b.1.min(p[1]);
            b.2 = b.2.max(p[0]);
            b.3 = b.3.max(p[1]);
        }
        b
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (x0, y0, x1, y1) = self.bbox_2d();
        (x1 - x0).hypot(y1 - y0)
    }

    pub fn bbox_area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.bbox_2d();
        (x1 - x0) * (y1 - y0)
    }

    /// 2-D polygon (x, y) for a contiguous index range.
    pub fn polygon(&self, range: Range<usize>) -> Vec<[f64; 2]> {
        self.points[range].iter().map(|p| [p[0], p[1]]).collect()
    }
}

/// Row-major, point-then-coordinate flattening into a 204-vector.
pub fn vectorize_landmarks(lm: &Landmarks68) -> Vec<f64> {
    lm.points.iter().flatten().copied().collect()
}

pub fn unvectorize_landmarks(v: &[f64]) -> Result<Landmarks68> {
    if v.len() != LANDMARK_DIM {
        return Err(Error::invalid(format!(
            "landmark vector must have {LANDMARK_DIM} entries, got {}",
            v.len()
        )));
    }
    let mut points = [[0.0; 3]; NUM_LANDMARKS];
    for (p, chunk) in points.iter_mut().zip(v.chunks_exact(3)) {
        p.copy_from_slice(chunk);
    }
    Landmarks68::new(points)
}

/// A set of K ≥ 4 keypoints (K × 3).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<[f64; 3]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::invalid(format!(
                "a keypoint set needs at least 4 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("keypoint coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Drops z for use as 2-D warp correspondences.
    pub fn project_xy(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p[0], p[1]]).collect()
    }
}

/// Pose and expression disentangled from one image: rotation `R`, translation `τ`
/// and per-keypoint additive expression offsets `ε_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub expression: Vec<[f64; 3]>,
}

impl PoseParams {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        expression: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let finite = rotation.iter().all(|v| v.is_finite())
            && translation.iter().all(|v| v.is_finite())
            && expression.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("pose parameters must be finite"));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho_err > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "rotation must be orthonormal with det 1 (orthonormality error {ortho_err:.2e}, det {det:.6})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
            expression,
        })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            expression: vec![[0.0; 3]; k],
        }
    }
}

/// Head pose `x_t`: axis-angle rotation (radians) followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    pub rotvec: [f64; 3],
    pub trans: [f64; 3],
}

impl HeadPose {
    pub fn new(rotvec: [f64; 3], trans: [f64; 3]) -> Result<Self> {
        if rotvec.iter().chain(&trans).any(|v| !v.is_finite()) {
            return Err(Error::invalid("head pose must be finite"));
        }
        let norm = Vector3::from(rotvec).norm();
        if norm >= 2.0 * std::f64::consts::PI {
            return Err(Error::invalid(format!(
                "rotation vector norm {norm} is outside [0, 2π)"
            )));
        }
        Ok(Self { rotvec, trans })
    }

    pub fn zero() -> Self {
        Self {
            rotvec: [0.0; 3],
            trans: [0.0; 3],
        }
    }

    pub fn from_array(x: [f64; 6]) -> Result<Self> {
        Self::new([x[0], x[1], x[2]], [x[3], x[4], x[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.rotvec;
        let [d, e, f] = self.trans;
        [a, b, c, d, e, f]
    }
}

/// Exponential map from an axis-angle vector to a row-convention rotation matrix.
pub fn rotvec_to_matrix(rotvec: [f64; 3]) -> Result<Matrix3<f64>> {
    if rotvec.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("rotation vector must be finite"));
    }
    let v = Vector3::from(rotvec);
    let theta = v.norm();
    if theta < 1e-300 {
        return Ok(Matrix3::identity());
    }
    let k = v / theta;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let column_form = Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos());
    Ok(column_form.transpose())
}

/// `C_k = c_k R + τ + ε_k`, used for both the neutral image and (with the
/// reference image's pose and expression) the style reference.
pub fn recompose_keypoints(c: &KeypointSet, pose: &PoseParams) -> Result<KeypointSet> {
    if pose.expression.len() != c.len() {
        return Err(Error::invalid(format!(
            "expression has {} offsets but the keypoint set has {} points",
            pose.expression.len(),
            c.len()
        )));
    }
    let r = &pose.rotation;
    let points = c
        .points()
        .iter()
        .zip(&pose.expression)
        .map(|(p, eps)| {
            let mut out = [0.0; 3];
            for (j, o) in out.iter_mut().enumerate() {
                *o = p[0] * r[(0, j)]
                    + p[1] * r[(1, j)]
                    + p[2] * r[(2, j)]
                    + pose.translation[j]
                    + eps[j];
            }
            out
        })
        .collect();
    KeypointSet::new(points)
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    points: Vec<[f64; 3]>,
}

/// Reads a landmark sequence stored as newline-delimited JSON
/// (`{"frame": i, "points": [[x, y, z]; 68]}` per line, frames 0..N in order).
pub fn read_landmark_sequence(path: &Path) -> Result<Vec<Landmarks68>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", line_no + 1)))?;
        if rec.frame != frames.len() {
            return Err(Error::format(
                path,
                format!("line {}: expected frame {}, found {}", line_no + 1, frames.len(), rec.frame),
            ));
        }
        let lm = Landmarks68::from_slice(&rec.points)
            .map_err(|e| Error::format(path, format!("line {}: {e}", line_no + 1)))?;
        frames.push(lm);
    }
    Ok(frames)
}

pub fn write_landmark_sequence(path: &Path, frames: &[Landmarks68]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (frame, lm) in frames.iter().enumerate() {
        let rec = FrameRecord {
            frame,
            points: lm.points().to_vec(),
        };
        let line = serde_json::to_string(&rec).expect("landmark record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
