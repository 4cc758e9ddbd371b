//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! unparsable values are validation errors, never silently dropped.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::transfer::GammaMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceHint {
    Cpu,
    Accelerator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub device: DeviceHint,
    pub image_size: usize,

    pub train_samples: usize,
    pub duration_s: f64,
    pub train_style: String,
    pub transfer_style: String,
    pub style_duration_s: f64,

    pub apc_hidden: usize,
    pub apc_layers: usize,
    pub apc_steps: usize,
    pub apc_lr: f64,
    pub apc_batch: usize,
    pub apc_crop: usize,

    pub motion_hidden: usize,
    pub motion_steps: usize,
    pub motion_lr: f64,
    pub motion_batch: usize,

    pub style_pretrain_steps: usize,
    pub style_lr: f64,
    pub style_batch: usize,

    pub stylemap_width: usize,
    pub stylemap_views: usize,
    pub stylemap_steps: usize,
    pub intermediate_steps: usize,
    pub stylemap_lr: f64,
    pub stylemap_batch: usize,

    pub generator_channels: Vec<usize>,
    pub disc_width: usize,
    pub generator_steps: usize,
    pub generator_lr: f64,
    pub generator_batch: usize,
    pub lambda_pw: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,

    pub gamma_mode: GammaMode,
    pub gamma: f64,
    pub transfer_frozen_epochs: usize,
    pub transfer_finetune_epochs: usize,
    pub transfer_lr_phase1: f64,
    pub transfer_lr_phase2: f64,
    pub transfer_window: usize,

    pub eval_f_max: usize,
    pub eval_v_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: DeviceHint::Cpu,
            image_size: 512,
            train_samples: 20,
            duration_s: 4.0,
            train_style: "neutral".into(),
            transfer_style: "rap".into(),
            style_duration_s: 4.0,
            apc_hidden: 512,
            apc_layers: 3,
            apc_steps: 1000,
            apc_lr: 1e-4,
            apc_batch: 64,
            apc_crop: 240,
            motion_hidden: 256,
            motion_steps: 2000,
            motion_lr: 1e-4,
            motion_batch: 64,
            style_pretrain_steps: 200,
            style_lr: 1e-4,
            style_batch: 64,
            stylemap_width: 16,
            stylemap_views: 400,
            stylemap_steps: 800,
            intermediate_steps: 600,
            stylemap_lr: 1e-4,
            stylemap_batch: 64,
            generator_channels: crate::renderer::FULL_ENCODER_CHANNELS.to_vec(),
            disc_width: 64,
            generator_steps: 1000,
            generator_lr: 1e-5,
            generator_batch: 8,
            lambda_pw: 100.0,
            lambda_p: 10.0,
            lambda_f: 1.0,
            gamma_mode: GammaMode::UniformRandom,
            gamma: 0.5,
            transfer_frozen_epochs: 1,
            transfer_finetune_epochs: 5,
            transfer_lr_phase1: 1e-3,
            transfer_lr_phase2: 1e-7,
            transfer_window: 60,
            eval_f_max: 100,
            eval_v_max: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Validation(format!("cannot parse {key} = {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "device" => {
                self.device = match v {
                    "cpu" => DeviceHint::Cpu,
                    "accelerator" => DeviceHint::Accelerator,
                    _ => return Err(Error::Validation(format!("device must be cpu or accelerator, got {v:?}"))),
                }
            }
            "image_size" => self.image_size = parse(key, v)?,
            "train_samples" => self.train_samples = parse(key, v)?,
            "duration_s" => self.duration_s = parse(key, v)?,
            "train_style" => self.train_style = v.to_string(),
            "transfer_style" => self.transfer_style = v.to_string(),
            "style_duration_s" => self.style_duration_s = parse(key, v)?,
            "apc_hidden" => self.apc_hidden = parse(key, v)?,
            "apc_layers" => self.apc_layers = parse(key, v)?,
            "apc_steps" => self.apc_steps = parse(key, v)?,
            "apc_lr" => self.apc_lr = parse(key, v)?,
            "apc_batch" => self.apc_batch = parse(key, v)?,
            "apc_crop" => self.apc_crop = parse(key, v)?,
            "motion_hidden" => self.motion_hidden = parse(key, v)?,
            "motion_steps" => self.motion_steps = parse(key, v)?,
            "motion_lr" => self.motion_lr = parse(key, v)?,
            "motion_batch" => self.motion_batch = parse(key, v)?,
            "style_pretrain_steps" => self.style_pretrain_steps = parse(key, v)?,
            "style_lr" => self.style_lr = parse(key, v)?,
            "style_batch" => self.style_batch = parse(key, v)?,
            "stylemap_width" => self.stylemap_width = parse(key, v)?,
            "stylemap_views" => self.stylemap_views = parse(key, v)?,
            "stylemap_steps" => self.stylemap_steps = parse(key, v)?,
            "intermediate_steps" => self.intermediate_steps = parse(key, v)?,
            "stylemap_lr" => self.stylemap_lr = parse(key, v)?,
            "stylemap_batch" => self.stylemap_batch = parse(key, v)?,
            "generator_channels" => self.generator_channels = parse_list(key, v)?,
            "disc_width" => self.disc_width = parse(key, v)?,
            "generator_steps" => self.generator_steps = parse(key, v)?,
            "generator_lr" => self.generator_lr = parse(key, v)?,
            "generator_batch" => self.generator_batch = parse(key, v)?,
            "lambda_pw" => self.lambda_pw = parse(key, v)?,
            "lambda_p" => self.lambda_p = parse(key, v)?,
            "lambda_f" => self.lambda_f = parse(key, v)?,
            "gamma_mode" => {
                self.gamma_mode = match v {
                    "fixed" => GammaMode::Fixed,
                    "uniform-random" => GammaMode::UniformRandom,
                    _ => return Err(Error::Validation(format!("gamma_mode must be fixed or uniform-random, got {v:?}"))),
                }
            }
            "gamma" => self.gamma = parse(key, v)?,
            "transfer_frozen_epochs" => self.transfer_frozen_epochs = parse(key, v)?,
            "transfer_finetune_epochs" => self.transfer_finetune_epochs = parse(key, v)?,
            "transfer_lr_phase1" => self.transfer_lr_phase1 = parse(key, v)?,
            "transfer_lr_phase2" => self.transfer_lr_phase2 = parse(key, v)?,
            "transfer_window" => self.transfer_window = parse(key, v)?,
            "eval_f_max" => self.eval_f_max = parse(key, v)?,
            "eval_v_max" => self.eval_v_max = parse(key, v)?,
            other => return Err(Error::Validation(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("apc_lr", self.apc_lr),
            ("motion_lr", self.motion_lr),
            ("style_lr", self.style_lr),
            ("stylemap_lr", self.stylemap_lr),
            ("generator_lr", self.generator_lr),
            ("transfer_lr_phase1", self.transfer_lr_phase1),
            ("transfer_lr_phase2", self.transfer_lr_phase2),
        ];
        if let Some((name, _)) = rates.iter().find(|(_, r)| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Validation(format!("{name} must be a positive learning rate")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma = {} lies outside [0, 1]", self.gamma)));
        }
        let sizes = [
            ("image_size", self.image_size),
            ("train_samples", self.train_samples),
            ("apc_hidden", self.apc_hidden),
            ("apc_layers", self.apc_layers),
            ("apc_batch", self.apc_batch),
            ("motion_hidden", self.motion_hidden),
            ("motion_batch", self.motion_batch),
            ("style_batch", self.style_batch),
            ("stylemap_width", self.stylemap_width),
            ("stylemap_batch", self.stylemap_batch),
            ("generator_batch", self.generator_batch),
            ("disc_width", self.disc_width),
            ("eval_f_max", self.eval_f_max),
            ("eval_v_max", self.eval_v_max),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, s)| *s == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if self.generator_channels.is_empty() {
            return Err(Error::Validation("generator_channels must list at least one layer".into()));
        }
        if self.duration_s < 1.0 || self.style_duration_s < 1.0 {
            return Err(Error::Validation("clip durations must be at least one second".into()));
        }
        Ok(())
    }

    /// Canonical text form; [`RunConfig::parse`] of the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let gamma_mode = match self.gamma_mode {
            GammaMode::Fixed => "fixed",
            GammaMode::UniformRandom => "uniform-random",
        };
        let device = match self.device {
            DeviceHint::Cpu => "cpu",
            DeviceHint::Accelerator => "accelerator",
        };
        let channels: Vec<String> = self.generator_channels.iter().map(usize::to_string).collect();
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("device", device.into()),
            ("image_size", self.image_size.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("duration_s", self.duration_s.to_string()),
            ("train_style", self.train_style.clone()),
            ("transfer_style", self.transfer_style.clone()),
            ("style_duration_s", self.style_duration_s.to_string()),
            ("apc_hidden", self.apc_hidden.to_string()),
            ("apc_layers", self.apc_layers.to_string()),
            ("apc_steps", self.apc_steps.to_string()),
            ("apc_lr", self.apc_lr.to_string()),
            ("apc_batch", self.apc_batch.to_string()),
            ("apc_crop", self.apc_crop.to_string()),
            ("motion_hidden", self.motion_hidden.to_string()),
            ("motion_steps", self.motion_steps.to_string()),
            ("motion_lr", self.motion_lr.to_string()),
            ("motion_batch", self.motion_batch.to_string()),
            ("style_pretrain_steps", self.style_pretrain_steps.to_string()),
            ("style_lr", self.style_lr.to_string()),
            ("style_batch", self.style_batch.to_string()),
            ("stylemap_width", self.stylemap_width.to_string()),
            ("stylemap_views", self.stylemap_views.to_string()),
            ("stylemap_steps", self.stylemap_steps.to_string()),
            ("intermediate_steps", self.intermediate_steps.to_string()),
            ("stylemap_lr", self.stylemap_lr.to_string()),
            ("stylemap_batch", self.stylemap_batch.to_string()),
            ("generator_channels", channels.join(",")),
            ("disc_width", self.disc_width.to_string()),
            ("generator_steps", self.generator_steps.to_string()),
            ("generator_lr", self.generator_lr.to_string()),
            ("generator_batch", self.generator_batch.to_string()),
            ("lambda_pw", self.lambda_pw.to_string()),
            ("lambda_p", self.lambda_p.to_string()),
            ("lambda_f", self.lambda_f.to_string()),
            ("gamma_mode", gamma_mode.into()),
            ("gamma", self.gamma.to_string()),
            ("transfer_frozen_epochs", self.transfer_frozen_epochs.to_string()),
            ("transfer_finetune_epochs", self.transfer_finetune_epochs.to_string()),
            ("transfer_lr_phase1", self.transfer_lr_phase1.to_string()),
            ("transfer_lr_phase2", self.transfer_lr_phase2.to_string()),
            ("transfer_window", self.transfer_window.to_string()),
            ("eval_f_max", self.eval_f_max.to_string()),
            ("eval_v_max", self.eval_v_max.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
