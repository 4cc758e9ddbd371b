//! Facial-map line raster and the region weighting mask.

use std::path::Path;

use nalgebra::{Matrix3x4, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{landmark_groups, Landmarks68, BROWS, JAW, LEFT_EYE, OUTER_LIPS, RIGHT_EYE};

pub const MOUTH_WEIGHT: f32 = 5.0;
pub const EYE_WEIGHT: f32 = 3.0;
pub const SKIN_WEIGHT: f32 = 1.0;
/// PNG encoding factor for weights: {0, 1, 3, 5} -> {0, 32, 96, 160}.
pub const WEIGHT_PNG_SCALE: f32 = 32.0;

/// A 3×4 projection from homogeneous landmark coordinates to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    matrix: Matrix3x4<f64>,
}

impl Camera {
    pub fn new(matrix: Matrix3x4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera matrix must be finite"));
        }
        let svd = matrix.svd(false, false);
        let smallest = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        let largest = svd.singular_values.iter().copied().fold(0.0, f64::max);
        if !(smallest > 1e-12 * largest.max(1.0)) {
            return Err(Error::invalid("camera matrix must have rank 3"));
        }
        Ok(Self { matrix })
    }

    /// Orthographic identity on pixel-space landmarks: `(x, y, z) -> (x, y)`.
    pub fn orthographic_identity() -> Self {
        Self::orthographic(1.0, [0.0, 0.0])
    }

    /// `(x, y, z) -> (s·x + ox, s·y + oy)`.
    pub fn orthographic(scale: f64, offset: [f64; 2]) -> Self {
        Self {
            matrix: Matrix3x4::new(scale, 0.0, 0.0, offset[0], 0.0, scale, 0.0, offset[1], 0.0, 0.0, 0.0, 1.0),
        }
    }

    /// Orthographic scale-and-centre camera placing the landmarks' 2-D box inside `size` with `margin` px on every side.
    pub fn fit_bbox(landmarks: &Landmarks68, size: usize, margin: f64) -> Result<Self> {
        let (x0, y0, x1, y1) = landmarks.bbox_2d();
        let extent = (x1 - x0).max(y1 - y0);
        if !(extent > 0.0) {
            return Err(Error::invalid("landmarks have an empty bounding box"));
        }
        let scale = (size as f64 - 2.0 * margin) / extent;
        let cx = 0.5 * (x0 + x1);
        let cy = 0.5 * (y0 + y1);
        let centre = 0.5 * (size as f64 - 1.0);
        Ok(Self::orthographic(scale, [centre - scale * cx, centre - scale * cy]))
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.matrix
    }

    /// Pixel position, or `None` for points on or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let h = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        (h[2] > 0.0).then(|| [h[0] / h[2], h[1] / h[2]])
    }
}

impl Default for Camera {
    fn default() -> Self {
        Self::orthographic_identity()
    }
}

/// Binary `size × size` raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FacialMap {
    size: usize,
    pixels: Vec<u8>,
}

impl FacialMap {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.size + x]
    }

    pub fn lit_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn lit_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.pixels.len())
            .filter(|&i| self.pixels[i] != 0)
            .map(|i| (i % self.size, i / self.size))
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            image::Luma([self.get(x as usize, y as usize) * 255])
        });
        img.save(path).map_err(|e| image_error(path, e))
    }
}

/// Region weights, row-major, values in {0, 1, 3, 5}.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    size: usize,
    weights: Vec<f32>,
}

impl WeightMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.weights[y * self.size + x]
    }

    pub fn count(&self, value: f32) -> usize {
        self.weights.iter().filter(|&&w| w == value).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            image::Luma([(self.get(x as usize, y as usize) * WEIGHT_PNG_SCALE) as u8])
        });
        img.save(path).map_err(|e| image_error(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
        if img.width() != img.height() {
            return Err(Error::format(path, "weight mask must be square"));
        }
        let weights = img
            .pixels()
            .map(|p| match p.0[0] {
                0 => Ok(0.0),
                32 => Ok(SKIN_WEIGHT),
                96 => Ok(EYE_WEIGHT),
                160 => Ok(MOUTH_WEIGHT),
                other => Err(Error::format(path, format!("pixel value {other} is not a weight code"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { size: img.width() as usize, weights })
    }
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

fn round_px(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Integer Bresenham from `a` to `b`.
///
/// Endpoints are ordered along the major axis before stepping, so the pixel
/// set does not depend on segment direction; exact half-steps round towards
/// the start point.
pub fn bresenham(a: (i64, i64), b: (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let x_major = (b.0 - a.0).abs() >= (b.1 - a.1).abs();
    let (p, q) = if x_major {
        if a.0 <= b.0 { (a, b) } else { (b, a) }
    } else if a.1 <= b.1 {
        (a, b)
    } else {
        (b, a)
    };
    // Work in (major, minor) coordinates.
    let (p, q) = if x_major { (p, q) } else { ((p.1, p.0), (q.1, q.0)) };
    let dx = q.0 - p.0;
    let dy = (q.1 - p.1).abs();
    let step = if q.1 >= p.1 { 1 } else { -1 };
    let mut d = 2 * dy - dx;
    let mut minor = p.1;
    for major in p.0..=q.0 {
        if x_major {
            plot(major, minor);
        } else {
            plot(minor, major);
        }
        if d > 0 {
            minor += step;
            d -= 2 * dx;
        }
        d += 2 * dy;
    }
}

/// Projects the landmarks and draws every semantic group as a 1-px polyline
/// (eyes and lips closed); pixels outside the canvas are dropped.
pub fn rasterize_facial_map(landmarks: &Landmarks68, camera: &Camera, size: usize) -> Result<FacialMap> {
    let projected: Vec<Option<(i64, i64)>> = landmarks
        .points()
        .iter()
        .map(|&p| camera.project(p).map(|[u, v]| (round_px(u), round_px(v))))
        .collect();
    if projected.iter().all(Option::is_none) {
        return Err(Error::EmptyMap);
    }
    let mut pixels = vec![0u8; size * size];
    let mut plot = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            pixels[y as usize * size + x as usize] = 1;
        }
    };
    for group in landmark_groups() {
        let idx: Vec<usize> = group.range.clone().collect();
        let mut segments: Vec<(usize, usize)> = idx.windows(2).map(|w| (w[0], w[1])).collect();
        if group.closed {
            segments.push((*idx.last().unwrap(), idx[0]));
        }
        for (i, j) in segments {
            if let (Some(a), Some(b)) = (projected[i], projected[j]) {
                bresenham(a, b, &mut plot);
            }
        }
    }
    Ok(FacialMap { size, pixels })
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(x: f64, y: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[i][0], poly[i][1]);
        let (xj, yj) = (poly[j][0], poly[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// True when two non-adjacent edges of the closed polygon cross properly.
pub fn is_self_intersecting(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            let (o1, o2) = (orient(a, b, c), orient(a, b, d));
            let (o3, o4) = (orient(c, d, a), orient(c, d, b));
            if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
                return true;
            }
        }
    }
    false
}

fn project_polygon(landmarks: &Landmarks68, camera: &Camera, idx: impl Iterator<Item = usize>) -> Result<Vec<[f64; 2]>> {
    idx.map(|i| camera.project(landmarks.point(i)).ok_or(Error::EmptyMap)).collect()
}

/// The face hull: jaw left to right, then the brows right to left.
pub fn face_hull_indices() -> Vec<usize> {
    JAW.chain(BROWS.rev()).collect()
}

fn fill_polygon(weights: &mut [f32], size: usize, poly: &[[f64; 2]], value: f32, name: &str) -> Result<()> {
    if is_self_intersecting(poly) {
        return Err(Error::DegenerateRegion(format!("{name} polygon intersects itself")));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in poly {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let clamp = |v: f64| v.max(0.0).min(size as f64 - 1.0) as usize;
    if x1 < 0.0 || y1 < 0.0 || x0 > size as f64 - 1.0 || y0 > size as f64 - 1.0 {
        return Ok(());
    }
    for y in clamp(y0.floor())..=clamp(y1.ceil()) {
        for x in clamp(x0.floor())..=clamp(x1.ceil()) {
            if point_in_polygon(x as f64, y as f64, poly) {
                weights[y * size + x] = value;
            }
        }
    }
    Ok(())
}

/// Pixel centres sit at integer coordinates. Regions are painted skin, eyes,
/// mouth in that order so the later ones take precedence.
pub fn build_weight_mask_with(landmarks: &Landmarks68, camera: &Camera, size: usize) -> Result<WeightMask> {
    let mut weights = vec![0.0f32; size * size];
    let hull = project_polygon(landmarks, camera, face_hull_indices().into_iter())?;
    fill_polygon(&mut weights, size, &hull, SKIN_WEIGHT, "face hull")?;
    for (range, name) in [(RIGHT_EYE, "right eye"), (LEFT_EYE, "left eye")] {
        let poly = project_polygon(landmarks, camera, range)?;
        fill_polygon(&mut weights, size, &poly, EYE_WEIGHT, name)?;
    }
    let mouth = project_polygon(landmarks, camera, OUTER_LIPS)?;
    fill_polygon(&mut weights, size, &mouth, MOUTH_WEIGHT, "outer lips")?;
    Ok(WeightMask { size, weights })
}

pub fn build_weight_mask(landmarks: &Landmarks68) -> Result<WeightMask> {
    build_weight_mask_with(landmarks, &Camera::default(), crate::geometry::CANVAS_SIZE)
}
