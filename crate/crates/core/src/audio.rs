//! Log-Mel features and the autoregressive predictive coding (APC) encoder.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::container::FrameMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, GruCell, HasParams, Linear, ParamStore};

pub const N_MELS: usize = 80;
pub const N_FFT: usize = 512;
pub const MEL_FLOOR: f64 = 1e-10;
/// Audio feature frames per second (1/120 s shift).
pub const AUDIO_FPS: u32 = 120;
pub const VIDEO_FPS: u32 = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio clip is empty"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("audio clip contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `N × 80` log-Mel frames at a 1/120 s shift.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Vec<Vec<f64>>,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<Vec<f64>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("mel spectrogram has no frames"));
        }
        if frames.iter().any(|f| f.len() != N_MELS) {
            return Err(Error::invalid(format!("every mel frame must have {N_MELS} bands")));
        }
        if frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mel spectrogram contains non-finite values"));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_shift_s(&self) -> f64 {
        1.0 / AUDIO_FPS as f64
    }

    pub fn frame_length_s(&self) -> f64 {
        2.0 / AUDIO_FPS as f64
    }

    /// `[1, N, 80]`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(nn::tensor_from_rows(&self.frames, dtype)?.unsqueeze(0)?)
    }
}

/// Per-audio-frame stream features `h` (one row per mel frame).
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub features: Vec<Vec<f64>>,
}

impl AudioFeatureSequence {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn to_matrix(&self) -> Result<FrameMatrix> {
        FrameMatrix::from_rows(&self.features)
    }

    pub fn from_matrix(m: &FrameMatrix) -> Self {
        Self { features: m.to_rows() }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edge frequencies: `n_mels + 2` points evenly spaced on the mel scale over `[0, sr/2]`.
pub fn mel_band_edges_hz(sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, evaluated on the `N_FFT/2 + 1` bin frequencies.
fn mel_filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_band_edges_hz(sample_rate);
    let n_bins = N_FFT / 2 + 1;
    (0..N_MELS)
        .map(|m| {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / N_FFT as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= centre {
                        (f - lo) / (centre - lo)
                    } else {
                        (hi - f) / (hi - centre)
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of whole frames: `floor((duration - 1/60) / (1/120)) + 1`, in exact integer arithmetic.
pub fn mel_frame_count(n_samples: usize, sample_rate: u32) -> Option<usize> {
    let scaled = n_samples as u64 * AUDIO_FPS as u64;
    let need = 2 * sample_rate as u64;
    (scaled >= need).then(|| ((scaled - need) / sample_rate as u64) as usize + 1)
}

pub struct MelExtractor {
    sample_rate: u32,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(sample_rate: u32) -> Result<Self> {
        let frame_len = (sample_rate / VIDEO_FPS) as usize;
        if frame_len == 0 || frame_len > N_FFT {
            return Err(Error::invalid(format!(
                "sample rate {sample_rate} gives a {frame_len}-sample frame; it must fit a {N_FFT}-point STFT"
            )));
        }
        let window = (0..frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame_len as f64).cos())
            .collect();
        Ok(Self {
            sample_rate,
            window,
            filters: mel_filterbank(sample_rate),
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
        })
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::invalid(format!(
                "extractor expects {} Hz, clip is {} Hz",
                self.sample_rate,
                clip.sample_rate()
            )));
        }
        let samples = clip.samples();
        let n = mel_frame_count(samples.len(), self.sample_rate).ok_or_else(|| {
            Error::invalid(format!(
                "clip of {:.4} s is shorter than one {:.4} s frame",
                clip.duration_s(),
                2.0 / AUDIO_FPS as f64
            ))
        })?;
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            let start = (i as u64 * self.sample_rate as u64 / AUDIO_FPS as u64) as usize;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (j, w) in self.window.iter().enumerate() {
                buf[j].re = samples[start + j] * w;
            }
            self.fft.process(&mut buf);
            let mag: Vec<f64> = buf[..N_FFT / 2 + 1].iter().map(|c| c.norm()).collect();
            let frame = self
                .filters
                .iter()
                .map(|f| {
                    let e: f64 = f.iter().zip(&mag).map(|(w, m)| w * m).sum();
                    e.max(MEL_FLOOR).ln()
                })
                .collect();
            frames.push(frame);
        }
        MelSpectrogram::new(frames)
    }
}

pub fn compute_log_mel(clip: &AudioClip) -> Result<MelSpectrogram> {
    MelExtractor::new(clip.sample_rate())?.compute(clip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApcConfig {
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for ApcConfig {
    fn default() -> Self {
        Self { hidden: 512, layers: 3, seed: 0, dtype: DType::F32 }
    }
}

/// Stacked GRU over log-Mel frames, a next-frame predictor head, and the
/// manifold projection that yields the stream feature `h`.
pub struct ApcModel {
    params: ParamStore,
    grus: Vec<GruCell>,
    predictor: Linear,
    manifold: Linear,
    config: ApcConfig,
}

impl HasParams for ApcModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl ApcModel {
    pub fn new(config: ApcConfig) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::invalid("APC needs at least one layer and one hidden unit"));
        }
        let mut ps = ParamStore::new(config.seed, config.dtype);
        let grus = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { N_MELS } else { config.hidden };
                GruCell::new(&mut ps, &format!("apc.gru{l}"), input, config.hidden)
            })
            .collect::<Result<Vec<_>>>()?;
        let predictor = Linear::new(&mut ps, "apc.predictor", config.hidden, N_MELS, true)?;
        let h = config.hidden;
        let identity = (0..h * h).map(|i| if i / h == i % h { 1.0 } else { 0.0 }).collect();
        let manifold = Linear {
            weight: ps.from_values("apc.manifold.weight", &[h, h], identity)?,
            bias: None,
        };
        Ok(Self { params: ps, grus, predictor, manifold, config })
    }

    pub fn config(&self) -> &ApcConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn predictor(&self) -> &Linear {
        &self.predictor
    }

    /// Every layer's states for `mel: [B, T, 80]`.
    pub fn layer_states(&self, mel: &Tensor) -> Result<Vec<Tensor>> {
        nn::run_gru_stack(&self.grus, &mel.to_dtype(self.config.dtype)?)
    }

    /// Unnormalized manifold map of `h3`: `[.., H] -> [.., H]`.
    pub fn manifold_linear(&self, h3: &Tensor) -> Result<Tensor> {
        self.manifold.forward(h3)
    }

    /// `h` for every mel frame.
    pub fn encode(&self, mel: &MelSpectrogram) -> Result<AudioFeatureSequence> {
        let states = self.layer_states(&mel.to_tensor(self.config.dtype)?)?;
        let h3 = states.last().expect("at least one layer").squeeze(0)?;
        self.project_to_manifold(&nn::rows_from_tensor(&h3)?)
    }

    pub fn project_to_manifold(&self, h3: &[Vec<f64>]) -> Result<AudioFeatureSequence> {
        if h3.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite APC state"));
        }
        let mapped = self.manifold_linear(&nn::tensor_from_rows(h3, self.config.dtype)?)?;
        Ok(AudioFeatureSequence { features: l2_normalize_rows(&nn::rows_from_tensor(&mapped)?) })
    }

    /// Mean squared error between the predictor applied to `h3[t]` and `mel[t + offset]`.
    pub fn loss(&self, mel: &Tensor, offset: usize) -> Result<Tensor> {
        let (_, t, bands) = mel.dims3()?;
        if bands != N_MELS {
            return Err(Error::invalid(format!("mel batch has {bands} bands, expected {N_MELS}")));
        }
        if offset == 0 {
            return Err(Error::invalid("prediction offset must be at least 1"));
        }
        if t < offset + 1 {
            return Err(Error::invalid(format!(
                "batch of {t} frames is too short for prediction offset {offset}"
            )));
        }
        let mel = mel.to_dtype(self.config.dtype)?;
        let inputs = mel.narrow(1, 0, t - offset)?;
        let targets = mel.narrow(1, offset, t - offset)?;
        let states = nn::run_gru_stack(&self.grus, &inputs)?;
        let pred = self.predictor.forward(states.last().expect("at least one layer"))?;
        Ok((pred - targets)?.sqr()?.mean_all()?)
    }
}

/// One optimizer step on `mel: [B, T, 80]`; returns the pre-step loss.
pub fn apc_train_step(model: &ApcModel, opt: &mut Adam, mel: &Tensor, offset: usize) -> Result<f64> {
    let loss = model.loss(mel, offset)?;
    let value = nn::scalar(&loss)?;
    opt.backward_step(&loss)?;
    Ok(value)
}

/// Scales each row to unit L2 norm. Zero rows pass through unchanged.
pub fn l2_normalize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut zero_rows = 0usize;
    let out = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                zero_rows += 1;
                r.clone()
            } else {
                r.iter().map(|v| v / norm).collect()
            }
        })
        .collect();
    if zero_rows > 0 {
        log::warn!("{zero_rows} zero feature rows passed through manifold normalization unchanged");
    }
    out
}

/// Differentiable counterpart of [`l2_normalize_rows`] over the last dimension.
pub fn l2_normalize_tensor(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let is_zero = norm.eq(0.0)?.to_dtype(x.dtype())?;
    Ok(x.broadcast_div(&(norm + is_zero)?)?)
}

/// Averages each run of `audio_fps / video_fps` consecutive audio frames; a trailing partial run is dropped.
pub fn align_audio_to_video(
    features: &AudioFeatureSequence,
    audio_fps: u32,
    video_fps: u32,
) -> Result<Vec<Vec<f64>>> {
    if video_fps == 0 || audio_fps % video_fps != 0 {
        return Err(Error::invalid(format!(
            "video rate {video_fps} does not divide audio rate {audio_fps}"
        )));
    }
    let ratio = (audio_fps / video_fps) as usize;
    Ok(features
        .features
        .chunks_exact(ratio)
        .map(|group| {
            let mut mean = vec![0.0; group[0].len()];
            for row in group {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= ratio as f64);
            mean
        })
        .collect())
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
    };
    let samples = if channels > 1 {
        log::warn!("{}: averaging {channels} channels to mono", path.display());
        raw.chunks_exact(channels).map(|c| c.iter().sum::<f64>() / channels as f64).collect()
    } else {
        raw
    };
    AudioClip::new(samples, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for s in clip.samples() {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// `[B, T, 80]` batch from equally long spectrograms.
pub fn mel_batch(mels: &[&MelSpectrogram], dtype: DType) -> Result<Tensor> {
    let t = mels.first().map_or(0, |m| m.n_frames());
    if mels.is_empty() || mels.iter().any(|m| m.n_frames() != t) {
        return Err(Error::invalid("mel batch needs spectrograms of equal length"));
    }
    let flat: Vec<f64> = mels.iter().flat_map(|m| m.frames().iter().flatten().copied()).collect();
    Ok(Tensor::from_vec(flat, (mels.len(), t, N_MELS), &Device::Cpu)?.to_dtype(dtype)?)
}
