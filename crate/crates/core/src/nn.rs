//! Small layer library over candle tensors.
//!
//! Parameters are created from a seeded ChaCha stream so that every model is
//! reproducible from its seed alone (candle's CPU RNG cannot be seeded).

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{self, WeightBlock};
use crate::error::{Error, Result};

/// Ordered, named collection of trainable variables.
pub struct ParamStore {
    vars: Vec<(String, Var)>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Vec::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.from_values(name, shape, values)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.from_values(name, shape, vec![0.0; n])
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_blocks(&self) -> Result<Vec<WeightBlock>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                Ok(WeightBlock {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrites every variable from `blocks`; names and shapes must match exactly.
    pub fn load_blocks(&self, blocks: &[WeightBlock]) -> Result<()> {
        for (name, var) in &self.vars {
            let block = blocks
                .iter()
                .find(|b| &b.name == name)
                .ok_or_else(|| Error::Validation(format!("checkpoint has no block named {name}")))?;
            if block.shape != var.dims() {
                return Err(Error::Validation(format!(
                    "block {name} has shape {:?}, model expects {:?}",
                    block.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(block.data.clone(), block.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Copies every value from another store with identical layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load_blocks(&other.to_blocks()?)
    }
}

pub trait HasParams {
    fn params(&self) -> &ParamStore;

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        container::write_checkpoint(path, &self.params().to_blocks()?)
    }

    fn load_checkpoint(&self, path: &Path) -> Result<()> {
        let blocks = container::read_checkpoint(path)?;
        self.params().load_blocks(&blocks)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = if bias {
            Some(ps.uniform(&format!("{name}.bias"), &[out_dim], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[in_ch, out_ch, kernel, kernel], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 0.5 (tanh(x/2) + 1): saturates without overflowing exp.
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Long short-term memory cell with PyTorch gate order (i, f, g, o).
#[derive(Clone)]
pub struct LstmCell {
    w_ih: Linear,
    w_hh: Linear,
    hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let w_ih = Linear::new(ps, &format!("{name}.ih"), in_dim, 4 * hidden, true)?;
        let w_hh = Linear::new(ps, &format!("{name}.hh"), hidden, 4 * hidden, false)?;
        Ok(Self { w_ih, w_hh, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.w_ih.in_dim()
    }

    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gates = (self.w_ih.forward(x)? + self.w_hh.forward(h)?)?;
        let chunks = gates.chunk(4, D::Minus1)?;
        let i = sigmoid(&chunks[0])?;
        let f = sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = sigmoid(&chunks[3])?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }
}

/// Gated recurrent unit cell (PyTorch formulation, reset gate applied after W_hn).
#[derive(Clone)]
pub struct GruCell {
    w_ih: Linear,
    w_hh: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let w_ih = Linear::new(ps, &format!("{name}.ih"), in_dim, 3 * hidden, true)?;
        let w_hh = Linear::new(ps, &format!("{name}.hh"), hidden, 3 * hidden, true)?;
        Ok(Self { w_ih, w_hh, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.w_ih.in_dim()
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = self.w_ih.forward(x)?.chunk(3, D::Minus1)?;
        let gh = self.w_hh.forward(h)?.chunk(3, D::Minus1)?;
        let r = sigmoid(&(&gi[0] + &gh[0])?)?;
        let z = sigmoid(&(&gi[1] + &gh[1])?)?;
        let n = (&gi[2] + (r * &gh[2])?)?.tanh()?;
        // (1 - z) n + z h
        Ok(((&n - (&z * &n)?)? + (z * h)?)?)
    }
}

/// Runs stacked GRU layers over `xs: [B, T, in]`, returning every layer's
/// per-step states `[B, T, H]`.
pub fn run_gru_stack(cells: &[GruCell], xs: &Tensor) -> Result<Vec<Tensor>> {
    let (b, t, _) = xs.dims3()?;
    let mut layer_input: Vec<Tensor> = (0..t)
        .map(|i| xs.narrow(1, i, 1)?.squeeze(1))
        .collect::<candle_core::Result<_>>()?;
    let mut outputs = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut h = Tensor::zeros((b, cell.hidden()), xs.dtype(), xs.device())?;
        let mut states = Vec::with_capacity(t);
        for x in &layer_input {
            h = cell.step(x, &h)?;
            states.push(h.clone());
        }
        outputs.push(Tensor::stack(&states, 1)?);
        layer_input = states;
    }
    Ok(outputs)
}

/// Runs stacked LSTM layers over `xs: [B, T, in]`, returning the last layer `[B, T, H]`.
pub fn run_lstm_stack(cells: &[LstmCell], xs: &Tensor) -> Result<Tensor> {
    let (b, t, _) = xs.dims3()?;
    let mut layer_input: Vec<Tensor> = (0..t)
        .map(|i| xs.narrow(1, i, 1)?.squeeze(1))
        .collect::<candle_core::Result<_>>()?;
    for cell in cells {
        let mut h = Tensor::zeros((b, cell.hidden()), xs.dtype(), xs.device())?;
        let mut c = h.clone();
        let mut states = Vec::with_capacity(t);
        for x in &layer_input {
            (h, c) = cell.step(x, &h, &c)?;
            states.push(h.clone());
        }
        layer_input = states;
    }
    Ok(Tensor::stack(&layer_input, 1)?)
}

/// `lr_min + (lr_max - lr_min) (1 + cos(π step / total)) / 2`.
pub fn cosine_annealing(lr_max: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_min;
    }
    let progress = (step.min(total) as f64) / total as f64;
    lr_min + (lr_max - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam (decoupled weight decay disabled) with optional global-norm gradient clipping.
pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip_norm: None,
        })
    }

    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    /// Backpropagates `loss`, clips, and applies one update. Returns the
    /// pre-clipping global gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Validation("non-finite gradient norm".into()));
        }
        if let Some(max) = self.clip_norm {
            if norm > max {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.inner.step(&grads)?;
        Ok(norm)
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn tensor_from_rows(rows: &[Vec<f64>], dtype: DType) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), cols), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn rows_from_tensor(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// `[1, 3, H, W]` with values mapped from `0..=255` to `[-1, 1]`.
pub fn rgb_to_tensor(img: &image::RgbImage, dtype: DType) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`rgb_to_tensor`] for `[1, 3, H, W]` or `[3, H, W]`; values are clamped to `[-1, 1]`.
pub fn tensor_to_rgb(t: &Tensor) -> Result<image::RgbImage> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = data[ch * w * h + y as usize * w + x as usize].clamp(-1.0, 1.0);
            ((v + 1.0) * 127.5).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    }))
}
