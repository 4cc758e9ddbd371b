//! Pipeline stages over a run directory, shared by the command-line front end
//! and the end-to-end smoke run. Every stage derives its randomness from the
//! run seed, so identical configurations reproduce identical artifacts.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, ApcConfig, ApcModel, AudioClip};
use crate::container::{read_matrix, write_matrix, FrameMatrix};
use crate::config::{DeviceHint, RunConfig};
use crate::dataharness::{
    canonical_face, load_dataset, read_manifest, save_dataset, style_by_name, synth_generate, video_frame_count,
    SyntheticSample, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::facialmap::{image_error, rasterize_facial_map};
use crate::geometry::{read_landmark_sequence, write_landmark_sequence, Landmarks68};
use crate::metrics::{evaluate, mean_cpbd, MetricReport};
use crate::nn::{self, HasParams};
use crate::renderer::{
    canvas_camera, retrieve_matched_style, train_step_gan, training_example, DiscriminatorNet, GanBatch, GanTrainer,
    GeneratorInput, GeneratorNet, LossWeights, RendererConfig,
};
use crate::stylemap::{
    build_isp, default_templates, disentangle, harness_views, neutral_view, train_disentanglers,
    train_intermediate_generator, DisentangleConfig, GeneratorConfig, IntermediateGenerator, IspSet,
    KeypointExtractor, PoseExpressionNet, StyleReferenceSet,
};
use crate::training::{
    frame_features, train_apc, train_motion, ApcTrainConfig, MotionExample, MotionGenerator, MotionGeneratorConfig,
    MotionTrainConfig,
};
use crate::transfer::{
    pretrain_style_net, require_pretrained, run_transfer, StyleTransferConfig, StyleTransferNet, TransferConfig,
    TransferManifest, TransferModels,
};

const DTYPE: DType = DType::F32;

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
    feature_cache: Option<PathBuf>,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), feature_cache: None }
    }

    /// Stores per-clip speech features under `dir`, keyed by the encoder weights and the samples.
    pub fn with_feature_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.feature_cache = Some(dir.into());
        self
    }

    pub fn feature_cache(&self) -> Option<&Path> {
        self.feature_cache.as_deref()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("data").join("train").join(MANIFEST_FILE)
    }

    pub fn style_manifest(&self) -> PathBuf {
        self.root.join("data").join("style").join(MANIFEST_FILE)
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn transfer_dir(&self) -> PathBuf {
        self.root.join("models").join("transfer")
    }

    pub fn transferred_motion(&self) -> PathBuf {
        self.transfer_dir().join("motion.ckpt")
    }

    pub fn isp_dir(&self) -> PathBuf {
        self.root.join("isp")
    }

    pub fn source_image(&self) -> PathBuf {
        self.isp_dir().join("source.png")
    }

    pub fn isp_image(&self, i: usize) -> PathBuf {
        self.isp_dir().join(format!("isp_{i}.png"))
    }

    pub fn animation_dir(&self) -> PathBuf {
        self.root.join("animation")
    }

    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.json"))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

/// Stage-specific seed so that stages stay independent of each other's draw counts.
fn stage_seed(cfg: &RunConfig, stage: u64) -> u64 {
    cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

fn check_device(cfg: &RunConfig) {
    if cfg.device == DeviceHint::Accelerator {
        log::warn!("no accelerator backend is compiled in; running on the CPU");
    }
}

pub fn apc_config(cfg: &RunConfig) -> ApcConfig {
    ApcConfig { hidden: cfg.apc_hidden, layers: cfg.apc_layers, seed: stage_seed(cfg, 1), dtype: DTYPE }
}

pub fn motion_config(cfg: &RunConfig) -> MotionGeneratorConfig {
    MotionGeneratorConfig::scaled(cfg.apc_hidden, cfg.motion_hidden, stage_seed(cfg, 2))
}

pub fn style_net_config(cfg: &RunConfig) -> StyleTransferConfig {
    StyleTransferConfig { seed: stage_seed(cfg, 3), ..StyleTransferConfig::default() }
}

pub fn disentangle_config(cfg: &RunConfig) -> DisentangleConfig {
    DisentangleConfig {
        image_size: cfg.image_size,
        width: cfg.stylemap_width,
        seed: stage_seed(cfg, 4),
        ..DisentangleConfig::default()
    }
}

pub fn intermediate_config(cfg: &RunConfig) -> GeneratorConfig {
    GeneratorConfig {
        image_size: cfg.image_size,
        width: cfg.stylemap_width,
        seed: stage_seed(cfg, 5),
        ..GeneratorConfig::default()
    }
}

pub fn renderer_config(cfg: &RunConfig) -> RendererConfig {
    RendererConfig {
        image_size: cfg.image_size,
        channels: cfg.generator_channels.clone(),
        disc_width: cfg.disc_width,
        seed: stage_seed(cfg, 6),
        dtype: DTYPE,
    }
}

fn load_samples(manifest: &Path) -> Result<Vec<SyntheticSample>> {
    load_dataset(manifest)?.collect()
}

fn load_apc(cfg: &RunConfig, layout: &RunLayout) -> Result<ApcModel> {
    let apc = ApcModel::new(apc_config(cfg))?;
    apc.load_checkpoint(&layout.model("apc"))?;
    Ok(apc)
}

/// Writes the training set (`train_style`) and the single transfer clip (`transfer_style`).
pub fn stage_synth_data(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    let train_style = style_by_name(&cfg.train_style, &[])?;
    let transfer_style = style_by_name(&cfg.transfer_style, &[])?;
    let base = stage_seed(cfg, 10);
    let train = (0..cfg.train_samples)
        .map(|i| synth_generate(&train_style, cfg.duration_s, base.wrapping_add(i as u64), cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    save_dataset(&layout.train_manifest().with_file_name(""), &train)?;
    let style = synth_generate(&transfer_style, cfg.style_duration_s, stage_seed(cfg, 11), cfg.image_size)?;
    save_dataset(&layout.style_manifest().with_file_name(""), &[style])?;
    Ok(())
}

pub fn stage_train_apc(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<f64>> {
    check_device(cfg);
    let samples = load_samples(&layout.train_manifest())?;
    let apc = ApcModel::new(apc_config(cfg))?;
    let clips: Vec<_> = samples.iter().map(|s| &s.audio).collect();
    let losses = train_apc(
        &apc,
        &clips,
        &ApcTrainConfig {
            steps: cfg.apc_steps,
            crop: cfg.apc_crop,
            batch: cfg.apc_batch,
            lr: cfg.apc_lr,
            seed: stage_seed(cfg, 20),
        },
    )?;
    ensure_parent(&layout.model("apc"))?;
    apc.save_checkpoint(&layout.model("apc"))?;
    write_json(&layout.log("train-apc"), &losses)?;
    Ok(losses)
}

/// Frame-aligned speech features, read from the feature cache when one is configured.
/// Cached values are exact: the encoder runs in f32, which the container stores losslessly.
fn features_for(
    layout: &RunLayout,
    apc: &ApcModel,
    apc_checkpoint: &Path,
    clip: &AudioClip,
    n_frames: usize,
) -> Result<Vec<Vec<f64>>> {
    let Some(dir) = layout.feature_cache() else {
        return frame_features(apc, clip, n_frames);
    };
    let weights = std::fs::read(apc_checkpoint).map_err(|e| Error::io(apc_checkpoint, e))?;
    let mut h = DefaultHasher::new();
    weights.hash(&mut h);
    clip.sample_rate().hash(&mut h);
    for x in clip.samples() {
        x.to_bits().hash(&mut h);
    }
    n_frames.hash(&mut h);
    let path = dir.join(format!("{:016x}.feat", h.finish()));
    if path.is_file() {
        let m = read_matrix(&path)?;
        if m.n_frames == n_frames {
            return Ok(m.to_rows());
        }
    }
    let rows = frame_features(apc, clip, n_frames)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix(&path, &FrameMatrix::from_rows(&rows)?)?;
    Ok(rows)
}

fn motion_examples(layout: &RunLayout, apc: &ApcModel, samples: &[SyntheticSample]) -> Result<Vec<MotionExample>> {
    let ckpt = layout.model("apc");
    samples
        .iter()
        .map(|s| {
            let features = features_for(layout, apc, &ckpt, &s.audio, s.n_frames())?;
            MotionExample::new(features, s.deltas.clone(), s.pose_rows())
        })
        .collect()
}

/// Trains the motion generator, then pre-trains the style network on same-style landmark pairs.
pub fn stage_train_motion(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<f64>> {
    check_device(cfg);
    let apc = load_apc(cfg, layout)?;
    let samples = load_samples(&layout.train_manifest())?;
    let examples = motion_examples(layout, &apc, &samples)?;
    let gen = MotionGenerator::new(&motion_config(cfg))?;
    let mut losses = train_motion(
        &gen,
        &examples,
        &MotionTrainConfig { steps: cfg.motion_steps, lr: cfg.motion_lr, pose_frames: cfg.motion_batch, seed: stage_seed(cfg, 30) },
    )?;
    gen.save(&layout.model("motion"))?;

    let mut groups: BTreeMap<&str, Vec<Landmarks68>> = BTreeMap::new();
    for s in &samples {
        groups.entry(s.style.name.as_str()).or_default().extend(s.landmarks.iter().cloned());
    }
    let f = StyleTransferNet::new(&style_net_config(cfg))?;
    let groups: Vec<Vec<Landmarks68>> = groups.into_values().collect();
    let style_losses =
        pretrain_style_net(&f, &groups, cfg.style_pretrain_steps, cfg.style_batch, cfg.style_lr, stage_seed(cfg, 31))?;
    f.save_checkpoint(&layout.model("style_net"))?;
    write_json(&layout.log("train-motion"), &losses)?;
    write_json(&layout.log("pretrain-style"), &style_losses)?;
    losses.extend(style_losses);
    Ok(losses)
}

struct StyleMapModels {
    extractor: KeypointExtractor,
    pose_net: PoseExpressionNet,
    intermediate: IntermediateGenerator,
}

fn new_stylemap(cfg: &RunConfig) -> Result<StyleMapModels> {
    Ok(StyleMapModels {
        extractor: KeypointExtractor::new(disentangle_config(cfg))?,
        pose_net: PoseExpressionNet::new(disentangle_config(cfg))?,
        intermediate: IntermediateGenerator::new(intermediate_config(cfg))?,
    })
}

fn load_stylemap(cfg: &RunConfig, layout: &RunLayout) -> Result<StyleMapModels> {
    let m = new_stylemap(cfg)?;
    m.extractor.load_checkpoint(&layout.model("keypoints"))?;
    m.pose_net.load_checkpoint(&layout.model("pose_expression"))?;
    m.intermediate.load_checkpoint(&layout.model("intermediate"))?;
    Ok(m)
}

fn isp_for(source: &RgbImage, refs: &StyleReferenceSet, m: &StyleMapModels) -> Result<IspSet> {
    let neutral = disentangle(source, &m.extractor, &m.pose_net)?;
    build_isp(source, &neutral, refs, &m.pose_net, &m.intermediate)
}

/// Trains the style-mapping networks, then the image generator and discriminator.
pub fn stage_train_generator(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<f64>> {
    check_device(cfg);
    let m = new_stylemap(cfg)?;
    let views = harness_views(cfg.stylemap_views, cfg.image_size, stage_seed(cfg, 40))?;
    let dis = train_disentanglers(
        &m.extractor,
        &m.pose_net,
        &views,
        cfg.stylemap_steps,
        cfg.stylemap_batch,
        cfg.stylemap_lr,
        stage_seed(cfg, 41),
    )?;
    let neutral = neutral_view(cfg.image_size)?;
    let inter = train_intermediate_generator(
        &m.intermediate,
        &neutral,
        &views,
        cfg.intermediate_steps,
        cfg.generator_batch,
        cfg.stylemap_lr,
        stage_seed(cfg, 42),
    )?;
    ensure_parent(&layout.model("keypoints"))?;
    m.extractor.save_checkpoint(&layout.model("keypoints"))?;
    m.pose_net.save_checkpoint(&layout.model("pose_expression"))?;
    m.intermediate.save_checkpoint(&layout.model("intermediate"))?;

    let samples = load_samples(&layout.train_manifest())?;
    let templates = default_templates();
    let prepared: Vec<(StyleReferenceSet, IspSet)> = samples
        .iter()
        .map(|s| {
            let refs = StyleReferenceSet::retrieve(&s.landmarks, &templates, |t| s.frame(t))?;
            let isp = isp_for(&neutral.image, &refs, &m)?;
            Ok((refs, isp))
        })
        .collect::<Result<_>>()?;

    let rcfg = renderer_config(cfg);
    let g = GeneratorNet::new(rcfg.clone())?;
    let d = DiscriminatorNet::new(&rcfg)?;
    let mut trainer = GanTrainer::new(&g, &d, cfg.generator_lr, cfg.generator_lr)?;
    trainer.weights = LossWeights { pw: cfg.lambda_pw, p: cfg.lambda_p, f: cfg.lambda_f };
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg, 43));
    let mut gan = Vec::with_capacity(cfg.generator_steps);
    for _ in 0..cfg.generator_steps {
        let items = (0..cfg.generator_batch)
            .map(|_| {
                let i = rng.random_range(0..samples.len());
                let s = &samples[i];
                let t = rng.random_range(0..s.n_frames());
                let (refs, isp) = &prepared[i];
                let matched = retrieve_matched_style(&s.landmarks[t], refs)?;
                training_example(&neutral.image, &s.frame(t)?, &s.landmarks[t], isp, matched, DTYPE)
            })
            .collect::<Result<Vec<_>>>()?;
        gan.push(train_step_gan(&GanBatch::stack(&items)?, &g, &d, &mut trainer)?);
    }
    g.save_checkpoint(&layout.model("generator"))?;
    d.save_checkpoint(&layout.model("discriminator"))?;

    let mut log = BTreeMap::new();
    log.insert("disentangle_keypoints", dis.iter().map(|x| x.0).collect::<Vec<_>>());
    log.insert("disentangle_pose", dis.iter().map(|x| x.1).collect());
    log.insert("intermediate", inter.clone());
    log.insert("gan_generator", gan.iter().map(|s| s.generator_total).collect());
    log.insert("gan_discriminator", gan.iter().map(|s| s.discriminator).collect());
    write_json(&layout.log("train-generator"), &log)?;
    Ok(log.into_values().flatten().collect())
}

fn load_rgb(path: &Path, size: usize) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::Validation(format!(
            "{} is {}x{}, the run uses {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

/// Retrieves the style references of the transfer clip and writes the four ISP images.
/// The source image defaults to the rendered canonical identity.
pub fn stage_build_isp(cfg: &RunConfig, layout: &RunLayout, source: Option<&Path>) -> Result<Vec<usize>> {
    let m = load_stylemap(cfg, layout)?;
    let style = load_samples(&layout.style_manifest())?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Validation("the style dataset is empty".into()))?;
    let refs = StyleReferenceSet::retrieve(&style.landmarks, &default_templates(), |t| style.frame(t))?;
    let image = match source {
        Some(p) => load_rgb(p, cfg.image_size)?,
        None => neutral_view(cfg.image_size)?.image,
    };
    let isp = isp_for(&image, &refs, &m)?;
    isp.save_pngs(&layout.isp_dir())?;
    let src = layout.source_image();
    image.save(&src).map_err(|e| image_error(&src, e))?;
    write_json(&layout.isp_dir().join("references.json"), &refs.source_indices)?;
    Ok(refs.source_indices.to_vec())
}

fn transfer_config(cfg: &RunConfig) -> TransferConfig {
    TransferConfig {
        gamma_mode: cfg.gamma_mode,
        gamma: cfg.gamma,
        frozen_epochs: cfg.transfer_frozen_epochs,
        finetune_epochs: cfg.transfer_finetune_epochs,
        lr_phase1: cfg.transfer_lr_phase1,
        lr_phase2: cfg.transfer_lr_phase2,
        window: cfg.transfer_window,
        anchor_pose_frames: cfg.motion_batch,
        seed: stage_seed(cfg, 50),
        ..TransferConfig::default()
    }
}

/// Fine-tunes the motion generator on the transfer clip; requires the APC, motion and style checkpoints.
pub fn stage_transfer(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<f64>> {
    check_device(cfg);
    let (apc_path, motion_path, style_path) = (layout.model("apc"), layout.model("motion"), layout.model("style_net"));
    require_pretrained(&[&apc_path, &motion_path, &style_path])?;
    let apc = load_apc(cfg, layout)?;
    let motion = MotionGenerator::new(&motion_config(cfg))?;
    motion.load(&motion_path)?;
    let f = StyleTransferNet::new(&style_net_config(cfg))?;
    f.load_checkpoint(&style_path)?;

    let style_manifest = layout.style_manifest();
    let entry = read_manifest(&style_manifest)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Validation("the style dataset is empty".into()))?;
    let root = style_manifest.parent().unwrap_or(Path::new("."));
    let reference = read_landmark_sequence(&root.join(&entry.landmarks))?;
    let audio = read_wav(&root.join(&entry.audio))?;
    let anchor = motion_examples(layout, &apc, &load_samples(&layout.train_manifest())?)?;
    let neutral = canonical_face();
    let tcfg = transfer_config(cfg);
    let report = run_transfer(
        &reference,
        &audio,
        &TransferModels { apc: &apc, motion: &motion, style_net: &f, neutral: &neutral, anchor: &anchor },
        &tcfg,
    )?;
    let dir = layout.transfer_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    motion.save(&layout.transferred_motion())?;
    f.save_checkpoint(&dir.join("style_net.ckpt"))?;
    TransferManifest {
        style_name: entry.style.clone(),
        reference_landmark_file: root.join(&entry.landmarks),
        audio_file: root.join(&entry.audio),
        epochs: tcfg.frozen_epochs + tcfg.finetune_epochs,
        gamma_mode: tcfg.gamma_mode,
        seed: cfg.seed,
    }
    .write(&dir)?;
    write_json(&layout.log("transfer"), &report)?;
    Ok(report.steps.iter().map(|s| s.total).collect())
}

/// Inputs of [`stage_animate`].
#[derive(Debug, Clone)]
pub struct AnimateRequest<'a> {
    pub audio: &'a Path,
    pub image: &'a Path,
    /// Directory holding the checkpoints; defaults to the run layout's model directory.
    pub checkpoints: Option<&'a Path>,
    /// Directory holding `isp_0.png`..`isp_3.png`; defaults to the run layout's.
    pub isp: Option<&'a Path>,
    /// First frame of this landmark file is the identity's neutral face; the canonical face otherwise.
    pub neutral: Option<&'a Path>,
    pub out: &'a Path,
}

/// Audio + single image → numbered PNG frames and `landmarks.jsonl` under `out`.
/// The fine-tuned motion generator is used when present.
pub fn stage_animate(cfg: &RunConfig, layout: &RunLayout, req: &AnimateRequest) -> Result<Vec<Landmarks68>> {
    let model_dir = req.checkpoints.map(Path::to_path_buf).unwrap_or_else(|| layout.root().join("models"));
    let model_path = |name: &str| model_dir.join(format!("{name}.ckpt"));
    let apc = ApcModel::new(apc_config(cfg))?;
    apc.load_checkpoint(&model_path("apc"))?;
    let motion = MotionGenerator::new(&motion_config(cfg))?;
    let transferred = model_dir.join("transfer").join("motion.ckpt");
    motion.load(&if transferred.is_file() { transferred } else { model_path("motion") })?;
    let g = GeneratorNet::new(renderer_config(cfg))?;
    g.load_checkpoint(&model_path("generator"))?;
    let isp = IspSet {
        images: (0..4)
            .map(|i| {
                let path = match req.isp {
                    Some(dir) => dir.join(format!("isp_{i}.png")),
                    None => layout.isp_image(i),
                };
                load_rgb(&path, cfg.image_size)
            })
            .collect::<Result<_>>()?,
    };
    let source = load_rgb(req.image, cfg.image_size)?;
    let neutral = match req.neutral {
        Some(p) => read_landmark_sequence(p)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Validation(format!("{} holds no frames", p.display())))?,
        None => canonical_face(),
    };

    let clip = read_wav(req.audio)?;
    let n = video_frame_count(clip.samples().len(), clip.sample_rate());
    let features = features_for(layout, &apc, &model_path("apc"), &clip, n)?;
    let landmarks = motion.generate_landmarks(&neutral, &features, &[[0.0; 6]])?;
    let frames_dir = req.out.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let cam = canvas_camera(cfg.image_size);
    for (t, lm) in landmarks.iter().enumerate() {
        let map = rasterize_facial_map(lm, &cam, cfg.image_size)?;
        let x = GeneratorInput { source: &source, facial_map: &map, isp: &isp }.to_tensor(DTYPE)?;
        let img = nn::tensor_to_rgb(&g.forward(&x)?)?;
        let path = frames_dir.join(format!("frame_{t:05}.png"));
        img.save(&path).map_err(|e| image_error(&path, e))?;
    }
    write_landmark_sequence(&req.out.join("landmarks.jsonl"), &landmarks)?;
    Ok(landmarks)
}

/// Pure measurement: never loads model weights. CPBD is added when a frame directory is given.
pub fn stage_evaluate(cfg: &RunConfig, reference: &Path, generated: &Path, frames: Option<&Path>) -> Result<MetricReport> {
    let r = read_landmark_sequence(reference)?;
    let g = read_landmark_sequence(generated)?;
    let f_set: Vec<usize> = (1..=cfg.eval_f_max).collect();
    let v_set: Vec<usize> = (1..=cfg.eval_v_max).collect();
    let mut report = evaluate(&r, &g, &f_set, &v_set)?;
    if let Some(dir) = frames {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|x| x == "png"));
        paths.sort();
        let gray = paths
            .iter()
            .map(|p| Ok(image::open(p).map_err(|e| image_error(p, e))?.to_luma8()))
            .collect::<Result<Vec<_>>>()?;
        report.cpbd = Some(mean_cpbd(&gray)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeSummary {
    pub losses: BTreeMap<String, Vec<f64>>,
    pub report: MetricReport,
}

/// synth-data → train stages → build-isp → transfer → animate → evaluate, all under `root`.
pub fn run_smoke(cfg: &RunConfig, root: &Path) -> Result<SmokeSummary> {
    let layout = RunLayout::new(root);
    let mut losses = BTreeMap::new();
    stage_synth_data(cfg, &layout)?;
    losses.insert("train-apc".to_string(), stage_train_apc(cfg, &layout)?);
    losses.insert("train-motion".to_string(), stage_train_motion(cfg, &layout)?);
    losses.insert("train-generator".to_string(), stage_train_generator(cfg, &layout)?);
    stage_build_isp(cfg, &layout, None)?;
    losses.insert("transfer".to_string(), stage_transfer(cfg, &layout)?);

    let style_manifest = layout.style_manifest();
    let entry = read_manifest(&style_manifest)?.into_iter().next().expect("synth-data writes one style clip");
    let style_root = style_manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = layout.animation_dir();
    stage_animate(
        cfg,
        &layout,
        &AnimateRequest {
            audio: &style_root.join(&entry.audio),
            image: &layout.source_image(),
            checkpoints: None,
            isp: None,
            neutral: None,
            out: &out,
        },
    )?;
    let report = stage_evaluate(cfg, &style_root.join(&entry.landmarks), &out.join("landmarks.jsonl"), Some(&out.join("frames")))?;
    write_json(&root.join("report.json"), &report)?;
    Ok(SmokeSummary { losses, report })
}
