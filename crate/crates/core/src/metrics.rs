//! Landmark metrics, blur metric, and windowed style-aware metrics.
//!
//! Percent metrics are normalized by the reference argument's 2-D bounding
//! box, taken over every frame it contains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Landmarks68, INNER_LIPS, MOUTH, NUM_LANDMARKS};

const CPBD_BETA: f64 = 3.6;
const CPBD_THRESHOLD: f64 = 0.63;
const CPBD_BLOCK: u32 = 64;

/// Union 2-D bounding box `(x0, y0, x1, y1)` over a window of frames.
pub fn window_bbox(frames: &[Landmarks68]) -> (f64, f64, f64, f64) {
    frames.iter().map(Landmarks68::bbox_2d).fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |acc, b| (acc.0.min(b.0), acc.1.min(b.1), acc.2.max(b.2), acc.3.max(b.3)),
    )
}

fn bbox_diagonal(frames: &[Landmarks68]) -> Result<f64> {
    let (x0, y0, x1, y1) = window_bbox(frames);
    let d = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::invalid("reference face has a zero-size bounding box"))
    }
}

fn bbox_area(frames: &[Landmarks68]) -> Result<f64> {
    let (x0, y0, x1, y1) = window_bbox(frames);
    let a = (x1 - x0) * (y1 - y0);
    if a > 0.0 {
        Ok(a)
    } else {
        Err(Error::invalid("reference face has a zero-area bounding box"))
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("windows differ in length: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::invalid("windows are empty"));
    }
    Ok(())
}

fn dist2(p: [f64; 3], q: [f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn frame_velocity(a: &Landmarks68, b: &Landmarks68) -> [[f64; 3]; NUM_LANDMARKS] {
    std::array::from_fn(|k| {
        let (p, q) = (a.point(k), b.point(k));
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    })
}

fn sum_point_distance(p: &[[f64; 3]], q: &[[f64; 3]], range: std::ops::Range<usize>) -> f64 {
    range.map(|k| dist2(p[k], q[k])).sum()
}

/// D-L: mean 2-D point distance over frames and all 68 points, as a percentage of the reference box diagonal.
pub fn metric_dl(a: &[Landmarks68], b: &[Landmarks68]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let diag = bbox_diagonal(a)?;
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| sum_point_distance(p.points(), q.points(), 0..NUM_LANDMARKS))
        .sum();
    Ok(total / (a.len() * NUM_LANDMARKS) as f64 / diag * 100.0)
}

/// D-V: D-L of frame-to-frame velocities, normalized by the reference position box.
pub fn metric_dv(a: &[Landmarks68], b: &[Landmarks68]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid("velocity needs at least two frames"));
    }
    let diag = bbox_diagonal(a)?;
    let total: f64 = (0..a.len() - 1)
        .map(|t| {
            let va = frame_velocity(&a[t], &a[t + 1]);
            let vb = frame_velocity(&b[t], &b[t + 1]);
            sum_point_distance(&va, &vb, 0..NUM_LANDMARKS)
        })
        .sum();
    Ok(total / ((a.len() - 1) * NUM_LANDMARKS) as f64 / diag * 100.0)
}

/// Shoelace area of a closed 2-D polygon.
pub fn shoelace_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Inner-lip (60..68) opening area in px².
pub fn inner_mouth_area(lm: &Landmarks68) -> Result<f64> {
    let poly = lm.polygon(INNER_LIPS);
    let perimeter: f64 = (0..poly.len())
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
        })
        .sum();
    if perimeter == 0.0 {
        return Err(Error::invalid("inner-lip contour has zero length"));
    }
    Ok(shoelace_area(&poly))
}

/// D-A: mean absolute inner-mouth area difference as a percentage of the reference box area.
pub fn metric_da(a: &[Landmarks68], b: &[Landmarks68]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let area = bbox_area(a)?;
    let mut total = 0.0;
    for (p, q) in a.iter().zip(b) {
        total += (inner_mouth_area(p)? - inner_mouth_area(q)?).abs();
    }
    Ok(total / a.len() as f64 / area * 100.0)
}

/// LMD: mean 2-D distance over frames and the 20 mouth points, in pixels.
pub fn metric_lmd(a: &[Landmarks68], b: &[Landmarks68]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let total: f64 = a.iter().zip(b).map(|(p, q)| sum_point_distance(p.points(), q.points(), MOUTH)).sum();
    Ok(total / (a.len() * MOUTH.len()) as f64)
}

/// Sharpness as the fraction of edge pixels whose blur probability stays at or under 0.63.
///
/// Edges: horizontal Sobel responses whose square exceeds four times the mean
/// square, thinned to row-wise maxima. Widths: distance between the intensity
/// extrema bracketing the edge along the row. `w_JNB` is 5 in 64×64 blocks
/// with contrast ≤ 50 and 3 otherwise. An edge-free image scores 0.
pub fn metric_cpbd(img: &image::GrayImage) -> Result<f64> {
    let (w, h) = img.dimensions();
    if w < 3 || h < 3 {
        return Err(Error::invalid("CPBD needs an image of at least 3x3 pixels"));
    }
    let gx = imageproc::gradients::horizontal_sobel(img);
    let sq = |x: u32, y: u32| (gx.get_pixel(x, y).0[0] as f64).powi(2);
    let mean_sq = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| sq(x, y)).sum::<f64>()
        / (w * h) as f64;
    let cutoff = 4.0 * mean_sq;
    let px = |x: u32, y: u32| img.get_pixel(x, y).0[0] as f64;

    let (bw, bh) = (w.div_ceil(CPBD_BLOCK), h.div_ceil(CPBD_BLOCK));
    let contrast: Vec<f64> = (0..bw * bh)
        .map(|b| {
            let (bx, by) = (b % bw, b / bw);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in by * CPBD_BLOCK..((by + 1) * CPBD_BLOCK).min(h) {
                for x in bx * CPBD_BLOCK..((bx + 1) * CPBD_BLOCK).min(w) {
                    lo = lo.min(px(x, y));
                    hi = hi.max(px(x, y));
                }
            }
            hi - lo
        })
        .collect();

    let (mut edges, mut sharp) = (0usize, 0usize);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let s = sq(x, y);
            if !(s > cutoff) || s < sq(x - 1, y) || s <= sq(x + 1, y) {
                continue;
            }
            let rising = gx.get_pixel(x, y).0[0] > 0;
            let (mut left, mut right) = (x, x);
            if rising {
                while left > 0 && px(left - 1, y) < px(left, y) {
                    left -= 1;
                }
                while right + 1 < w && px(right + 1, y) > px(right, y) {
                    right += 1;
                }
            } else {
                while left > 0 && px(left - 1, y) > px(left, y) {
                    left -= 1;
                }
                while right + 1 < w && px(right + 1, y) < px(right, y) {
                    right += 1;
                }
            }
            let width = (right - left).max(1) as f64;
            let block = (y / CPBD_BLOCK) * bw + x / CPBD_BLOCK;
            let w_jnb = if contrast[block as usize] <= 50.0 { 5.0 } else { 3.0 };
            let p_blur = 1.0 - (-(width / w_jnb).powf(CPBD_BETA)).exp();
            edges += 1;
            if p_blur <= CPBD_THRESHOLD {
                sharp += 1;
            }
        }
    }
    if edges == 0 {
        log::warn!("CPBD: image has no edges; scoring 0");
        return Ok(0.0);
    }
    Ok(sharp as f64 / edges as f64)
}

/// Core distance used inside the windowed style metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StyleCore {
    /// SLD.
    Distance,
    /// SLV.
    Velocity,
    /// SMD as written: mouth landmark distance.
    MouthLandmarks,
    /// SMD under the "mouth area" reading.
    MouthArea,
}

impl StyleCore {
    fn min_window(self) -> usize {
        match self {
            StyleCore::Velocity => 2,
            _ => 1,
        }
    }

    pub fn apply(self, a: &[Landmarks68], b: &[Landmarks68]) -> Result<f64> {
        match self {
            StyleCore::Distance => metric_dl(a, b),
            StyleCore::Velocity => metric_dv(a, b),
            StyleCore::MouthLandmarks => metric_lmd(a, b),
            StyleCore::MouthArea => metric_da(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub f: usize,
    pub v: usize,
}

impl WindowSpec {
    pub fn new(f: usize, v: usize) -> Result<Self> {
        if f == 0 || v == 0 {
            return Err(Error::invalid("window size and stride must be positive"));
        }
        Ok(Self { f, v })
    }

    /// Start frames `0, v, …, κv` with `κ = floor((n − F) / v)`.
    pub fn starts(&self, n: usize) -> Vec<usize> {
        if n < self.f {
            return Vec::new();
        }
        (0..=(n - self.f) / self.v).map(|i| i * self.v).collect()
    }
}

fn check_feasible(reference: &[Landmarks68], generated: &[Landmarks68], spec: WindowSpec, core: StyleCore) -> Result<()> {
    let shortest = reference.len().min(generated.len());
    if spec.f > shortest {
        return Err(Error::invalid(format!("window of {} frames exceeds sequence length {shortest}", spec.f)));
    }
    if spec.f < core.min_window() {
        return Err(Error::invalid(format!("{core:?} needs windows of at least {} frames", core.min_window())));
    }
    Ok(())
}

/// Reference implementation: enumerate windows and call the core metric on each pair.
pub fn style_metric_naive(
    reference: &[Landmarks68],
    generated: &[Landmarks68],
    spec: WindowSpec,
    core: StyleCore,
) -> Result<f64> {
    check_feasible(reference, generated, spec, core)?;
    let ref_starts = spec.starts(reference.len());
    let gen_starts = spec.starts(generated.len());
    let mut total = 0.0;
    for &s in &ref_starts {
        let mut best = f64::INFINITY;
        for &g in &gen_starts {
            let d = core.apply(&reference[s..s + spec.f], &generated[g..g + spec.f])?;
            best = best.min(d);
        }
        total += best;
    }
    Ok(total / ref_starts.len() as f64)
}

/// Precomputed frame-pair costs with diagonal prefix sums, reusable for every `(F, v)`.
pub struct StyleMetricTable {
    core: StyleCore,
    reference: Vec<Landmarks68>,
    /// Prefix sums along diagonals, `(nr + 1) × (ng + 1)`; entry `(p, q)` sums costs `(p − k, q − k)` for `k ≥ 1`.
    prefix: Vec<f64>,
    cols: usize,
    nr: usize,
    ng: usize,
    /// Number of cost terms per frame pair (points per frame, or 1 for areas).
    per_frame: f64,
}

impl StyleMetricTable {
    pub fn new<'a>(reference: &'a [Landmarks68], generated: &'a [Landmarks68], core: StyleCore) -> Result<Self> {
        if reference.is_empty() || generated.is_empty() {
            return Err(Error::invalid("sequences must be non-empty"));
        }
        // Rows of the cost matrix: frames (or velocity steps).
        type Cost<'c> = Box<dyn Fn(usize, usize) -> f64 + 'c>;
        let (cost, nr, ng, per_frame): (Cost<'a>, usize, usize, f64) = match core {
            StyleCore::Distance => (
                Box::new(|p, q| sum_point_distance(reference[p].points(), generated[q].points(), 0..NUM_LANDMARKS)),
                reference.len(),
                generated.len(),
                NUM_LANDMARKS as f64,
            ),
            StyleCore::MouthLandmarks => (
                Box::new(|p, q| sum_point_distance(reference[p].points(), generated[q].points(), MOUTH)),
                reference.len(),
                generated.len(),
                MOUTH.len() as f64,
            ),
            StyleCore::Velocity => {
                let vr: Vec<_> = reference.windows(2).map(|w| frame_velocity(&w[0], &w[1])).collect();
                let vg: Vec<_> = generated.windows(2).map(|w| frame_velocity(&w[0], &w[1])).collect();
                let (nr, ng) = (vr.len(), vg.len());
                (
                    Box::new(move |p, q| sum_point_distance(&vr[p], &vg[q], 0..NUM_LANDMARKS)),
                    nr,
                    ng,
                    NUM_LANDMARKS as f64,
                )
            }
            StyleCore::MouthArea => {
                let ar = reference.iter().map(inner_mouth_area).collect::<Result<Vec<_>>>()?;
                let ag = generated.iter().map(inner_mouth_area).collect::<Result<Vec<_>>>()?;
                (Box::new(move |p, q| (ar[p] - ag[q]).abs()), reference.len(), generated.len(), 1.0)
            }
        };
        let cols = ng + 1;
        let mut prefix = vec![0.0; (nr + 1) * cols];
        for p in 1..=nr {
            for q in 1..=ng {
                prefix[p * cols + q] = prefix[(p - 1) * cols + q - 1] + cost(p - 1, q - 1);
            }
        }
        Ok(Self { core, reference: reference.to_vec(), prefix, cols, nr, ng, per_frame })
    }

    /// Sum of costs over `len` aligned pairs starting at `(p, q)`.
    fn diagonal_sum(&self, p: usize, q: usize, len: usize) -> f64 {
        self.prefix[(p + len) * self.cols + q + len] - self.prefix[p * self.cols + q]
    }

    fn normalizer(&self, window: &[Landmarks68]) -> Result<f64> {
        match self.core {
            StyleCore::Distance | StyleCore::Velocity => Ok(100.0 / bbox_diagonal(window)?),
            StyleCore::MouthLandmarks => Ok(1.0),
            StyleCore::MouthArea => Ok(100.0 / bbox_area(window)?),
        }
    }

    pub fn evaluate(&self, spec: WindowSpec) -> Result<f64> {
        let n_ref = self.reference.len();
        let n_gen = match self.core {
            StyleCore::Velocity => self.ng + 1,
            _ => self.ng,
        };
        if spec.f > n_ref.min(n_gen) {
            return Err(Error::invalid(format!(
                "window of {} frames exceeds sequence length {}",
                spec.f,
                n_ref.min(n_gen)
            )));
        }
        if spec.f < self.core.min_window() {
            return Err(Error::invalid(format!(
                "{:?} needs windows of at least {} frames",
                self.core,
                self.core.min_window()
            )));
        }
        // Cost terms per window: F frames, or F − 1 velocity steps.
        let len = match self.core {
            StyleCore::Velocity => spec.f - 1,
            _ => spec.f,
        };
        debug_assert!(len <= self.nr);
        let ref_starts = spec.starts(n_ref);
        let gen_starts = spec.starts(n_gen);
        let mut total = 0.0;
        for &s in &ref_starts {
            let best = gen_starts
                .iter()
                .map(|&g| self.diagonal_sum(s, g, len))
                .fold(f64::INFINITY, f64::min);
            total += best / (len as f64 * self.per_frame) * self.normalizer(&self.reference[s..s + spec.f])?;
        }
        Ok(total / ref_starts.len() as f64)
    }
}

pub fn style_metric(
    reference: &[Landmarks68],
    generated: &[Landmarks68],
    spec: WindowSpec,
    core: StyleCore,
) -> Result<f64> {
    check_feasible(reference, generated, spec, core)?;
    StyleMetricTable::new(reference, generated, core)?.evaluate(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(rename = "F")]
    pub f: usize,
    pub v: usize,
    pub value: f64,
}

/// Default protocol: `F ∈ 1..=100`, `v ∈ 1..=20`.
pub fn default_grid() -> (Vec<usize>, Vec<usize>) {
    ((1..=100).collect(), (1..=20).collect())
}

/// Evaluates every feasible `(F, v)` cell and returns the cell mean together with the cells.
pub fn style_metric_grid(
    reference: &[Landmarks68],
    generated: &[Landmarks68],
    f_set: &[usize],
    v_set: &[usize],
    core: StyleCore,
) -> Result<(f64, Vec<GridCell>)> {
    let shortest = reference.len().min(generated.len());
    let specs: Vec<WindowSpec> = f_set
        .iter()
        .flat_map(|&f| v_set.iter().map(move |&v| (f, v)))
        .filter(|&(f, v)| f >= core.min_window() && f <= shortest && v >= 1)
        .map(|(f, v)| WindowSpec { f, v })
        .collect();
    if specs.is_empty() {
        return Err(Error::invalid("no feasible (F, v) cell in the grid"));
    }
    let table = StyleMetricTable::new(reference, generated, core)?;
    let cells = specs
        .par_iter()
        .map(|&spec| Ok(GridCell { f: spec.f, v: spec.v, value: table.evaluate(spec)? }))
        .collect::<Result<Vec<_>>>()?;
    let mean = cells.iter().map(|c| c.value).sum::<f64>() / cells.len() as f64;
    Ok((mean, cells))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cpbd: Option<f64>,
    pub lmd: f64,
    pub d_l: f64,
    pub d_v: f64,
    pub d_a: f64,
    pub sld: f64,
    pub slv: f64,
    pub smd: f64,
    pub sld_grid: Vec<GridCell>,
    pub slv_grid: Vec<GridCell>,
    pub smd_grid: Vec<GridCell>,
}

/// Every landmark metric; frame-aligned metrics use the common prefix of the two sequences.
pub fn evaluate(
    reference: &[Landmarks68],
    generated: &[Landmarks68],
    f_set: &[usize],
    v_set: &[usize],
) -> Result<MetricReport> {
    let n = reference.len().min(generated.len());
    if n < 2 {
        return Err(Error::invalid("evaluation needs at least two frames in each sequence"));
    }
    let (r, g) = (&reference[..n], &generated[..n]);
    let (sld, sld_grid) = style_metric_grid(reference, generated, f_set, v_set, StyleCore::Distance)?;
    let (slv, slv_grid) = style_metric_grid(reference, generated, f_set, v_set, StyleCore::Velocity)?;
    let (smd, smd_grid) = style_metric_grid(reference, generated, f_set, v_set, StyleCore::MouthLandmarks)?;
    Ok(MetricReport {
        cpbd: None,
        lmd: metric_lmd(r, g)?,
        d_l: metric_dl(r, g)?,
        d_v: metric_dv(r, g)?,
        d_a: metric_da(r, g)?,
        sld,
        slv,
        smd,
        sld_grid,
        slv_grid,
        smd_grid,
    })
}

/// Mean CPBD over a set of frames.
pub fn mean_cpbd(frames: &[image::GrayImage]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to score"));
    }
    let scores = frames.iter().map(metric_cpbd).collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
