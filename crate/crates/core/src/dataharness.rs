//! Synthetic style world: a parametric face driven by audio-coupled mouth
//! motion, periodic head bob and blinks, with procedural frame rendering.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioClip, VIDEO_FPS};
use crate::container::{read_matrix, write_matrix, FrameMatrix};
use crate::error::{Error, Result};
use crate::facialmap::{face_hull_indices, image_error, point_in_polygon};
use crate::geometry::{
    read_landmark_sequence, write_landmark_sequence, HeadPose, Landmarks68, CANVAS_SIZE, INNER_LIPS, LEFT_EYE,
    OUTER_LIPS, RIGHT_EYE,
};
use crate::motion::{compose_landmarks, mouth_eye_vertices, DisplacementSequence};

pub const SAMPLE_RATE: u32 = 16_000;
/// Rest gap between upper and lower eyelid at the lid centre, px.
const LID_GAP: f64 = 20.0;
const BLINK_FRAMES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyle {
    pub name: String,
    /// Hz.
    pub head_bob_freq: f64,
    /// Degrees.
    pub head_bob_amp: f64,
    /// Mouth opening in px per unit of smoothed audio envelope.
    pub mouth_gain: f64,
    /// Frames between blink onsets.
    pub blink_period: usize,
    /// Added to the resting eye openness (1.0 = fully open).
    pub eye_openness_bias: f64,
}

impl SyntheticStyle {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.head_bob_freq, self.head_bob_amp, self.mouth_gain, self.eye_openness_bias]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.head_bob_freq > 0.0) || self.head_bob_amp < 0.0 || self.mouth_gain < 0.0 {
            return Err(Error::Validation(format!("style {} has out-of-range parameters", self.name)));
        }
        if self.blink_period == 0 {
            return Err(Error::Validation(format!("style {} needs a positive blink period", self.name)));
        }
        Ok(())
    }

    fn vector(&self) -> [f64; 5] {
        [
            self.head_bob_freq,
            self.head_bob_amp,
            self.mouth_gain,
            self.blink_period as f64,
            self.eye_openness_bias,
        ]
    }
}

/// Scale of each style parameter in [`synth_style_distance`].
const STYLE_SCALE: [f64; 5] = [1.0, 5.0, 20.0, 100.0, 0.5];

/// Euclidean distance over parameters divided by their nominal scales.
pub fn synth_style_distance(a: &SyntheticStyle, b: &SyntheticStyle) -> f64 {
    let (va, vb) = (a.vector(), b.vector());
    (0..5).map(|i| ((va[i] - vb[i]) / STYLE_SCALE[i]).powi(2)).sum::<f64>().sqrt()
}

/// `neutral` is the source style used for pretraining; the other three are the target styles.
pub fn builtin_styles() -> Vec<SyntheticStyle> {
    let s = |name: &str, f, a, g, b, e| SyntheticStyle {
        name: name.into(),
        head_bob_freq: f,
        head_bob_amp: a,
        mouth_gain: g,
        blink_period: b,
        eye_openness_bias: e,
    };
    vec![
        s("neutral", 0.5, 2.0, 14.0, 200, 0.0),
        s("ballad", 0.4, 4.0, 10.0, 90, -0.25),
        s("rap", 2.0, 6.0, 22.0, 180, 0.0),
        s("opera", 0.3, 3.0, 40.0, 240, 0.15),
    ]
}

/// Built-in styles first, then `extra`.
pub fn style_by_name(name: &str, extra: &[SyntheticStyle]) -> Result<SyntheticStyle> {
    builtin_styles()
        .into_iter()
        .chain(extra.iter().cloned())
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Validation(format!("unknown style {name}")))
}

fn face_depth(x: f64) -> f64 {
    let u = (x - 256.0) / 160.0;
    40.0 * (1.0 - u * u).max(0.0)
}

/// The fixed synthetic identity in 512-px canvas space.
pub fn canonical_face() -> Landmarks68 {
    let mut p = [[0.0; 3]; 68];
    for (i, pt) in p.iter_mut().enumerate().take(17) {
        let theta = PI - i as f64 * PI / 16.0;
        *pt = [256.0 + 150.0 * theta.cos(), 230.0 + 170.0 * theta.sin(), 0.0];
    }
    for j in 0..5 {
        let s = (PI * j as f64 / 4.0).sin();
        p[17 + j] = [150.0 + 20.0 * j as f64, 180.0 - 12.0 * s, 0.0];
        p[22 + j] = [282.0 + 20.0 * j as f64, 180.0 - 12.0 * s, 0.0];
    }
    for j in 0..4 {
        p[27 + j] = [256.0, 195.0 + 25.0 * j as f64, 0.0];
    }
    for (j, (x, y)) in [(232.0, 290.0), (244.0, 294.0), (256.0, 296.0), (268.0, 294.0), (280.0, 290.0)]
        .into_iter()
        .enumerate()
    {
        p[31 + j] = [x, y, 0.0];
    }
    let eye = [(-28.0, 0.0), (-10.0, -10.0), (10.0, -10.0), (28.0, 0.0), (10.0, 10.0), (-10.0, 10.0)];
    for (j, (dx, dy)) in eye.into_iter().enumerate() {
        p[36 + j] = [200.0 + dx, 215.0 + dy, 0.0];
        p[42 + j] = [312.0 + dx, 215.0 + dy, 0.0];
    }
    let outer = [
        (206.0, 340.0),
        (222.0, 328.0),
        (240.0, 322.0),
        (256.0, 325.0),
        (272.0, 322.0),
        (290.0, 328.0),
        (306.0, 340.0),
        (290.0, 354.0),
        (272.0, 360.0),
        (256.0, 362.0),
        (240.0, 360.0),
        (222.0, 354.0),
    ];
    for (j, (x, y)) in outer.into_iter().enumerate() {
        p[48 + j] = [x, y, 0.0];
    }
    let inner = [
        (214.0, 340.0),
        (236.0, 338.0),
        (256.0, 338.0),
        (276.0, 338.0),
        (298.0, 340.0),
        (276.0, 342.0),
        (256.0, 342.0),
        (236.0, 342.0),
    ];
    for (j, (x, y)) in inner.into_iter().enumerate() {
        p[60 + j] = [x, y, 0.0];
    }
    for pt in p.iter_mut() {
        pt[2] = face_depth(pt[0]);
    }
    p[30][2] += 40.0;
    p[29][2] += 30.0;
    p[28][2] += 20.0;
    p[27][2] += 10.0;
    Landmarks68::new(p).expect("canonical face is finite")
}

/// Object-space displacements for a mouth opening `o` (px) and eye openness `e` (1 = rest).
fn deformation(o: f64, e: f64) -> Vec<(usize, [f64; 3])> {
    let lid = LID_GAP * (1.0 - e);
    let mut d = vec![(37, [0.0, lid, 0.0]), (38, [0.0, lid, 0.0]), (43, [0.0, lid, 0.0]), (44, [0.0, lid, 0.0])];
    d.push((8, [0.0, 0.5 * o, 0.0]));
    d.push((48, [0.05 * o, 0.3 * o, 0.0]));
    d.push((54, [-0.05 * o, 0.3 * o, 0.0]));
    for k in 49..=53 {
        d.push((k, [0.0, -0.1 * o, 0.0]));
    }
    for (k, w) in (55..=59).zip([0.6, 0.9, 1.0, 0.9, 0.6]) {
        d.push((k, [0.0, w * o, 0.0]));
    }
    d.push((60, [0.05 * o, 0.3 * o, 0.0]));
    d.push((64, [-0.05 * o, 0.3 * o, 0.0]));
    for k in 61..=63 {
        d.push((k, [0.0, -0.15 * o, 0.0]));
    }
    for (k, w) in (65..=67).zip([0.9, 1.0, 0.9]) {
        d.push((k, [0.0, w * o, 0.0]));
    }
    d
}

/// Mouth/eye displacements on the 25 driven vertices, in [`mouth_eye_vertices`] order.
pub fn driven_deltas(mouth_opening: f64, eye_openness: f64) -> Vec<[f64; 3]> {
    let vertices = mouth_eye_vertices(25).expect("25 is supported");
    let deform = deformation(mouth_opening, eye_openness);
    vertices
        .iter()
        .map(|v| deform.iter().find(|(k, _)| k == v).map_or([0.0; 3], |(_, d)| *d))
        .collect()
}

/// Raised-cosine syllable bumps: `(onset_s, duration_s, amplitude)`.
fn syllables(rng: &mut ChaCha8Rng, duration_s: f64) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    let mut t = rng.random_range(0.05..0.2);
    while t < duration_s {
        let d = rng.random_range(0.10..0.25);
        out.push((t, d, rng.random_range(0.5..1.0)));
        t += d + rng.random_range(0.04..0.15);
        if rng.random_bool(0.15) {
            t += rng.random_range(0.3..0.6);
        }
    }
    out
}

fn envelope_at(bumps: &[(f64, f64, f64)], t: f64) -> f64 {
    bumps
        .iter()
        .filter(|(on, d, _)| t >= *on && t < on + d)
        .map(|(on, d, a)| a * 0.5 * (1.0 - (2.0 * PI * (t - on) / d).cos()))
        .fold(0.0, f64::max)
}

/// One-pole high-pass then low-pass: noise limited to roughly 300–3000 Hz.
fn band_limited_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let dt = 1.0 / SAMPLE_RATE as f64;
    let rc_hi = 1.0 / (2.0 * PI * 300.0);
    let rc_lo = 1.0 / (2.0 * PI * 3000.0);
    let a_hi = rc_hi / (rc_hi + dt);
    let a_lo = dt / (rc_lo + dt);
    let (mut prev_x, mut hp, mut lp) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            hp = a_hi * (hp + x - prev_x);
            prev_x = x;
            lp += a_lo * (hp - lp);
            lp
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum FrameSource {
    Procedural { size: usize },
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub style: SyntheticStyle,
    pub audio: AudioClip,
    pub landmarks: Vec<Landmarks68>,
    pub poses: Vec<HeadPose>,
    /// Ground-truth displacements on the 25 driven vertices.
    pub deltas: DisplacementSequence,
    pub frames: FrameSource,
}

impl SyntheticSample {
    pub fn n_frames(&self) -> usize {
        self.landmarks.len()
    }

    pub fn pose_rows(&self) -> Vec<[f64; 6]> {
        self.poses.iter().map(HeadPose::to_array).collect()
    }

    pub fn frame(&self, t: usize) -> Result<RgbImage> {
        match &self.frames {
            FrameSource::Procedural { size } => render_face(&self.landmarks[t], *size),
            FrameSource::Files(paths) => {
                let path = &paths[t];
                Ok(image::open(path).map_err(|e| image_error(path, e))?.to_rgb8())
            }
        }
    }
}

/// Landmark frames for a clip: `floor(duration × 60)`.
pub fn video_frame_count(n_samples: usize, sample_rate: u32) -> usize {
    n_samples * VIDEO_FPS as usize / sample_rate as usize
}

pub fn synth_generate(style: &SyntheticStyle, duration_s: f64, seed: u64, frame_size: usize) -> Result<SyntheticSample> {
    style.validate()?;
    if !(duration_s >= 1.0) {
        return Err(Error::invalid("synthetic clips must last at least one second"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_samples = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let bumps = syllables(&mut rng, duration_s);
    let noise = band_limited_noise(&mut rng, n_samples);
    let noise_rms = (noise.iter().map(|v| v * v).sum::<f64>() / n_samples as f64).sqrt().max(1e-12);
    let samples: Vec<f64> = noise
        .iter()
        .enumerate()
        .map(|(i, v)| 0.3 * envelope_at(&bumps, i as f64 / SAMPLE_RATE as f64) * v / noise_rms)
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    let audio = AudioClip::new(samples, SAMPLE_RATE)?;

    let n_frames = video_frame_count(n_samples, SAMPLE_RATE);
    let phase = rng.random_range(0.0..2.0 * PI);
    let blink_offset = rng.random_range(0..style.blink_period);
    let neutral = canonical_face();
    let vertices = mouth_eye_vertices(25)?;
    let (mut landmarks, mut poses, mut deltas) = (Vec::new(), Vec::new(), Vec::new());
    let mut smoothed = 0.0;
    for t in 0..n_frames {
        let time = t as f64 / VIDEO_FPS as f64;
        // Envelope sampled mid-frame and smoothed with a one-pole filter.
        smoothed += 0.5 * (envelope_at(&bumps, time + 0.5 / VIDEO_FPS as f64) - smoothed);
        let opening = style.mouth_gain * smoothed;
        let k = (t + blink_offset) % style.blink_period;
        let closure = if k < BLINK_FRAMES { (PI * k as f64 / BLINK_FRAMES as f64).sin() } else { 0.0 };
        let openness = (1.0 + style.eye_openness_bias - closure).clamp(0.05, 1.5);

        let w = 2.0 * PI * style.head_bob_freq * time + phase;
        let yaw = style.head_bob_amp * w.sin();
        let pitch = 0.35 * style.head_bob_amp * (w + 1.0).sin();
        let pose = HeadPose::new([pitch.to_radians(), yaw.to_radians(), 0.0], [0.6 * yaw, 0.6 * pitch, 0.0])?;

        let d = driven_deltas(opening, openness);
        landmarks.push(compose_landmarks(&neutral, &vertices, &d, &pose)?);
        poses.push(pose);
        deltas.push(d);
    }
    Ok(SyntheticSample {
        style: style.clone(),
        audio,
        landmarks,
        poses,
        deltas: DisplacementSequence::new(deltas)?,
        frames: FrameSource::Procedural { size: frame_size },
    })
}

const BACKGROUND: [u8; 3] = [40, 60, 90];
const SKIN: [u8; 3] = [222, 184, 150];
const EYE: [u8; 3] = [245, 245, 240];
const LIPS: [u8; 3] = [170, 60, 70];
const MOUTH_INSIDE: [u8; 3] = [60, 15, 25];

/// Subsamples per pixel side: at least 256-px canvas precision, capped at 4.
fn supersampling(size: usize) -> usize {
    (CANVAS_SIZE / 2).div_ceil(size).clamp(1, 4)
}

/// Flat-shaded face: hull, eyes, lips and mouth opening over a flat background,
/// scaled from the 512-px canvas to `size`. Small frames are supersampled so
/// edges keep sub-pixel position.
pub fn render_face(landmarks: &Landmarks68, size: usize) -> Result<RgbImage> {
    if size == 0 {
        return Err(Error::invalid("frame size must be positive"));
    }
    let scale = size as f64 / CANVAS_SIZE as f64;
    let poly = |idx: Vec<usize>| -> Vec<[f64; 2]> {
        idx.into_iter()
            .map(|i| {
                let p = landmarks.point(i);
                [p[0] * scale, p[1] * scale]
            })
            .collect()
    };
    // Painted back to front; the last layer containing a sample wins.
    let layers = [
        (poly(face_hull_indices()), SKIN),
        (poly(RIGHT_EYE.collect()), EYE),
        (poly(LEFT_EYE.collect()), EYE),
        (poly(OUTER_LIPS.collect()), LIPS),
        (poly(INNER_LIPS.collect()), MOUTH_INSIDE),
    ];
    let bounds: Vec<[f64; 4]> = layers
        .iter()
        .map(|(shape, _)| {
            shape.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
                [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
            })
        })
        .collect();
    let ss = supersampling(size);
    let offsets: Vec<f64> = (0..ss).map(|i| (i as f64 + 0.5) / ss as f64 - 0.5).collect();
    let [hx0, hy0, hx1, hy1] = bounds[0];
    let mut img = RgbImage::from_pixel(size as u32, size as u32, image::Rgb(BACKGROUND));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            if fx + 0.5 < hx0 || fx - 0.5 > hx1 || fy + 0.5 < hy0 || fy - 0.5 > hy1 {
                continue;
            }
            let mut acc = [0u32; 3];
            for dy in &offsets {
                for dx in &offsets {
                    let (sx, sy) = (fx + dx, fy + dy);
                    let colour = layers
                        .iter()
                        .zip(&bounds)
                        .rev()
                        .find(|((shape, _), b)| {
                            sx >= b[0] && sx <= b[2] && sy >= b[1] && sy <= b[3] && point_in_polygon(sx, sy, shape)
                        })
                        .map_or(BACKGROUND, |((_, c), _)| *c);
                    for c in 0..3 {
                        acc[c] += colour[c] as u32;
                    }
                }
            }
            let n = (ss * ss) as u32;
            img.put_pixel(x as u32, y as u32, image::Rgb(acc.map(|v| ((v + n / 2) / n) as u8)));
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub landmarks: PathBuf,
    pub frames_dir: PathBuf,
    pub style: String,
    /// Ground-truth head poses (ADST1 matrix, dim 6).
    pub poses: PathBuf,
    /// Ground-truth driven-vertex displacements (ADST1 matrix, dim 75).
    pub deltas: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STYLES_FILE: &str = "styles.json";

fn frame_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

/// Writes every sample under `dir` plus `manifest.json`; returns the manifest path.
/// Custom (non built-in) styles are recorded in `styles.json`.
pub fn save_dataset(dir: &Path, samples: &[SyntheticSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let builtin: Vec<String> = builtin_styles().into_iter().map(|s| s.name).collect();
    let mut custom: Vec<SyntheticStyle> = Vec::new();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}");
        let sub = dir.join(&name);
        let frames_dir = sub.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        write_wav(&sub.join("audio.wav"), &sample.audio)?;
        write_landmark_sequence(&sub.join("landmarks.jsonl"), &sample.landmarks)?;
        let pose_rows: Vec<Vec<f64>> = sample.pose_rows().iter().map(|r| r.to_vec()).collect();
        write_matrix(&sub.join("poses.adst"), &FrameMatrix::from_rows(&pose_rows)?)?;
        write_matrix(&sub.join("deltas.adst"), &sample.deltas.to_matrix()?)?;
        for t in 0..sample.n_frames() {
            let path = frames_dir.join(frame_name(t));
            sample.frame(t)?.save(&path).map_err(|e| image_error(&path, e))?;
        }
        if !builtin.contains(&sample.style.name) && !custom.iter().any(|s| s.name == sample.style.name) {
            custom.push(sample.style.clone());
        }
        let rel = PathBuf::from(&name);
        entries.push(ManifestEntry {
            audio: rel.join("audio.wav"),
            landmarks: rel.join("landmarks.jsonl"),
            frames_dir: rel.join("frames"),
            style: sample.style.name.clone(),
            poses: rel.join("poses.adst"),
            deltas: rel.join("deltas.adst"),
        });
    }
    if !custom.is_empty() {
        let path = dir.join(STYLES_FILE);
        let text = serde_json::to_string_pretty(&custom).expect("styles serialize");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Streams the samples listed in a manifest, in manifest order.
pub struct Dataset {
    root: PathBuf,
    entries: std::vec::IntoIter<ManifestEntry>,
    styles: Vec<SyntheticStyle>,
    len: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn load(&self, entry: &ManifestEntry) -> Result<SyntheticSample> {
        let style = style_by_name(&entry.style, &self.styles)?;
        let audio = read_wav(&self.root.join(&entry.audio))?;
        let landmarks = read_landmark_sequence(&self.root.join(&entry.landmarks))?;
        let expected = video_frame_count(audio.samples().len(), audio.sample_rate());
        if landmarks.len() != expected {
            return Err(Error::Validation(format!(
                "{}: {} landmark frames, audio implies {expected}",
                entry.landmarks.display(),
                landmarks.len()
            )));
        }
        let poses_path = self.root.join(&entry.poses);
        let pose_m = read_matrix(&poses_path)?;
        if pose_m.dim != 6 || pose_m.n_frames != expected {
            return Err(Error::Validation(format!("{}: expected {expected} x 6 poses", poses_path.display())));
        }
        let poses = pose_m
            .to_rows()
            .iter()
            .map(|r| HeadPose::from_array(r.as_slice().try_into().expect("six columns")))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Validation(format!("{}: {e}", poses_path.display())))?;
        let deltas_path = self.root.join(&entry.deltas);
        let deltas = DisplacementSequence::from_matrix(&read_matrix(&deltas_path)?)
            .map_err(|e| Error::Validation(format!("{}: {e}", deltas_path.display())))?;
        if deltas.len() != expected {
            return Err(Error::Validation(format!("{}: expected {expected} frames", deltas_path.display())));
        }
        let frames_dir = self.root.join(&entry.frames_dir);
        let paths: Vec<PathBuf> = (0..expected).map(|t| frames_dir.join(frame_name(t))).collect();
        if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
            return Err(Error::io(missing, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        Ok(SyntheticSample { style, audio, landmarks, poses, deltas, frames: FrameSource::Files(paths) })
    }
}

impl Iterator for Dataset {
    type Item = Result<SyntheticSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.next()?;
        Some(self.load(&entry))
    }
}

/// Manifest entries with paths relative to the manifest's directory.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let styles_path = root.join(STYLES_FILE);
    let styles = if styles_path.is_file() {
        let text = std::fs::read_to_string(&styles_path).map_err(|e| Error::io(&styles_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&styles_path, e.to_string()))?
    } else {
        Vec::new()
    };
    let len = entries.len();
    Ok(Dataset { root, entries: entries.into_iter(), styles, len })
}
