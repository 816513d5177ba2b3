//! Flat `key = value` run configuration.
//!
//! Every setting has a fixed key; a snapshot lists all of them in a stable
//! order so two configs can be diffed line by line. Keys under `run.` describe
//! where and how often output is written and never affect results.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::clip::ClipConfig;
use crate::data::{CropParams, SyntheticSpec};
use crate::error::{Error, Result};
use crate::masking::MaskParams;
use crate::mim::PretextMode;
use crate::optim::OptimConfig;
use crate::probe::{FeatureKind, ProbeConfig};
use crate::teacher::{FrozenNetConfig, TeacherKind};
use crate::vit::EncoderConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// EVAD files replacing the synthetic splits when set.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    /// `None` reuses the run seed.
    pub seed: Option<u64>,
    pub net: FrozenNetConfig,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSettings {
    pub model: ClipConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// MIM checkpoint to initialize the vision tower from.
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub dir: Option<PathBuf>,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Stop pretraining after this many optimizer steps; 0 runs the full schedule.
    pub max_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub mask: MaskParams,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub augment: bool,
    pub crop: CropParams,
    pub mode: PretextMode,
    pub teacher: TeacherConfig,
    pub probe: ProbeConfig,
    pub probe_feature: FeatureKind,
    pub clip: ClipSettings,
    pub run: RunSettings,
}

impl Default for RunConfig {
    /// The toy recipe.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            encoder: EncoderConfig::toy(),
            mask: MaskParams::default(),
            optim: OptimConfig::default(),
            data: DataConfig {
                classes: 8,
                train_per_class: 500,
                test_per_class: 100,
                noise_sigma: crate::data::DEFAULT_NOISE_SIGMA,
                seed: 0,
                train_path: None,
                test_path: None,
            },
            batch_size: 64,
            augment: true,
            crop: CropParams::default(),
            mode: PretextMode::RegressMasked,
            teacher: TeacherConfig { kind: TeacherKind::FrozenNet, seed: None, net: FrozenNetConfig::default(), path: None },
            probe: ProbeConfig::default(),
            probe_feature: FeatureKind::MeanPatch,
            clip: ClipSettings { model: ClipConfig::default(), steps: 2000, batch_size: 32, peak_lr: 5e-4, init: None },
            run: RunSettings { dir: None, checkpoint_every: 0, max_steps: 0 },
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn kind_name(k: TeacherKind) -> &'static str {
    match k {
        TeacherKind::FrozenNet => "frozen-net",
        TeacherKind::File => "file",
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "encoder.image_size" => self.encoder.image_size = num(key, v)?,
            "encoder.patch_size" => self.encoder.patch_size = num(key, v)?,
            "encoder.depth" => self.encoder.depth = num(key, v)?,
            "encoder.width" => self.encoder.width = num(key, v)?,
            "encoder.mlp_width" => self.encoder.mlp_width = num(key, v)?,
            "encoder.heads" => self.encoder.heads = num(key, v)?,
            "encoder.drop_path_rate" => self.encoder.drop_path_rate = num(key, v)?,
            "encoder.teacher_dim" => self.encoder.teacher_dim = num(key, v)?,
            "mask.ratio" => self.mask.ratio = num(key, v)?,
            "mask.min_block" => self.mask.min_block = num(key, v)?,
            "mask.aspect" => self.mask.aspect = num(key, v)?,
            "optim.peak_lr" => self.optim.peak_lr = num(key, v)?,
            "optim.min_lr" => self.optim.min_lr = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = num(key, v)?,
            "optim.total_steps" => self.optim.total_steps = num(key, v)?,
            "optim.layer_decay" => self.optim.layer_decay = num(key, v)?,
            "data.classes" => self.data.classes = num(key, v)?,
            "data.train_per_class" => self.data.train_per_class = num(key, v)?,
            "data.test_per_class" => self.data.test_per_class = num(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,
            "data.train_path" => self.data.train_path = opt_path(v),
            "data.test_path" => self.data.test_path = opt_path(v),
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.augment" => self.augment = flag(key, v)?,
            "train.crop_scale_min" => self.crop.scale_min = num(key, v)?,
            "train.crop_scale_max" => self.crop.scale_max = num(key, v)?,
            "train.mode" => self.mode = PretextMode::parse(v)?,
            "teacher.kind" => {
                self.teacher.kind = match v {
                    "frozen-net" => TeacherKind::FrozenNet,
                    "file" => TeacherKind::File,
                    _ => return Err(Error::Config(format!("{key}: expected frozen-net or file, got {v:?}"))),
                }
            }
            "teacher.seed" => self.teacher.seed = if v == "run" { None } else { Some(num(key, v)?) },
            "teacher.depth" => self.teacher.net.depth = num(key, v)?,
            "teacher.width" => self.teacher.net.width = num(key, v)?,
            "teacher.mlp_width" => self.teacher.net.mlp_width = num(key, v)?,
            "teacher.heads" => self.teacher.net.heads = num(key, v)?,
            "teacher.path" => self.teacher.path = opt_path(v),
            "probe.epochs" => self.probe.epochs = num(key, v)?,
            "probe.lr" => self.probe.lr = num(key, v)?,
            "probe.weight_decay" => self.probe.weight_decay = num(key, v)?,
            "probe.batch_size" => self.probe.batch_size = num(key, v)?,
            "probe.feature" => self.probe_feature = FeatureKind::parse(v)?,
            "clip.embed_dim" => self.clip.model.embed_dim = num(key, v)?,
            "clip.text_width" => self.clip.model.text_width = num(key, v)?,
            "clip.text_depth" => self.clip.model.text_depth = num(key, v)?,
            "clip.text_heads" => self.clip.model.text_heads = num(key, v)?,
            "clip.text_mlp" => self.clip.model.text_mlp = num(key, v)?,
            "clip.steps" => self.clip.steps = num(key, v)?,
            "clip.batch_size" => self.clip.batch_size = num(key, v)?,
            "clip.peak_lr" => self.clip.peak_lr = num(key, v)?,
            "clip.init" => self.clip.init = opt_path(v),
            "run.dir" => self.run.dir = opt_path(v),
            "run.checkpoint_every" => self.run.checkpoint_every = num(key, v)?,
            "run.max_steps" => self.run.max_steps = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in snapshot order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let o = &self.optim;
        let d = &self.data;
        let t = &self.teacher;
        let c = &self.clip;
        vec![
            ("seed", self.seed.to_string()),
            ("encoder.image_size", e.image_size.to_string()),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.depth", e.depth.to_string()),
            ("encoder.width", e.width.to_string()),
            ("encoder.mlp_width", e.mlp_width.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.drop_path_rate", e.drop_path_rate.to_string()),
            ("encoder.teacher_dim", e.teacher_dim.to_string()),
            ("mask.ratio", self.mask.ratio.to_string()),
            ("mask.min_block", self.mask.min_block.to_string()),
            ("mask.aspect", self.mask.aspect.to_string()),
            ("optim.peak_lr", o.peak_lr.to_string()),
            ("optim.min_lr", o.min_lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.warmup_steps", o.warmup_steps.to_string()),
            ("optim.total_steps", o.total_steps.to_string()),
            ("optim.layer_decay", o.layer_decay.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.train_per_class", d.train_per_class.to_string()),
            ("data.test_per_class", d.test_per_class.to_string()),
            ("data.noise_sigma", d.noise_sigma.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.train_path", show_path(&d.train_path)),
            ("data.test_path", show_path(&d.test_path)),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.augment", self.augment.to_string()),
            ("train.crop_scale_min", self.crop.scale_min.to_string()),
            ("train.crop_scale_max", self.crop.scale_max.to_string()),
            ("train.mode", self.mode.name().into()),
            ("teacher.kind", kind_name(t.kind).into()),
            ("teacher.seed", t.seed.map_or("run".into(), |s| s.to_string())),
            ("teacher.depth", t.net.depth.to_string()),
            ("teacher.width", t.net.width.to_string()),
            ("teacher.mlp_width", t.net.mlp_width.to_string()),
            ("teacher.heads", t.net.heads.to_string()),
            ("teacher.path", show_path(&t.path)),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("probe.weight_decay", self.probe.weight_decay.to_string()),
            ("probe.batch_size", self.probe.batch_size.to_string()),
            ("probe.feature", self.probe_feature.name().into()),
            ("clip.embed_dim", c.model.embed_dim.to_string()),
            ("clip.text_width", c.model.text_width.to_string()),
            ("clip.text_depth", c.model.text_depth.to_string()),
            ("clip.text_heads", c.model.text_heads.to_string()),
            ("clip.text_mlp", c.model.text_mlp.to_string()),
            ("clip.steps", c.steps.to_string()),
            ("clip.batch_size", c.batch_size.to_string()),
            ("clip.peak_lr", c.peak_lr.to_string()),
            ("clip.init", show_path(&c.init)),
            ("run.dir", show_path(&self.run.dir)),
            ("run.checkpoint_every", self.run.checkpoint_every.to_string()),
            ("run.max_steps", self.run.max_steps.to_string()),
        ]
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Defaults, then `text`, then validation.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Snapshot text; `with_run` false leaves out the `run.*` keys.
    pub fn to_text(&self, with_run: bool) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| with_run || !k.starts_with("run."))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        self.optim.validate()?;
        self.clip.model.validate()?;
        if !(self.mask.ratio > 0.0 && self.mask.ratio <= 1.0) {
            return bad(format!("mask.ratio must be in (0,1], got {}", self.mask.ratio));
        }
        if !(self.mask.aspect > 0.0 && self.mask.aspect <= 1.0) || self.mask.min_block == 0 {
            return bad("mask.aspect must be in (0,1] and mask.min_block positive".into());
        }
        if self.optim.total_steps == 0 {
            return bad("optim.total_steps must be positive".into());
        }
        if self.batch_size == 0 || self.probe.batch_size == 0 || self.probe.epochs == 0 {
            return bad("batch sizes and probe.epochs must be positive".into());
        }
        if !(self.probe.lr > 0.0) || self.probe.weight_decay < 0.0 {
            return bad("probe.lr must be positive and probe.weight_decay non-negative".into());
        }
        let cr = &self.crop;
        if !(cr.scale_min > 0.0 && cr.scale_min <= cr.scale_max && cr.scale_max <= 1.0) {
            return bad(format!("crop scale range ({}, {}) must satisfy 0 < min <= max <= 1", cr.scale_min, cr.scale_max));
        }
        self.synthetic(0, 1).validate()?;
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return bad("data.train_per_class and data.test_per_class must be positive".into());
        }
        match self.teacher.kind {
            TeacherKind::FrozenNet if self.teacher.net.width != self.encoder.teacher_dim => {
                return bad(format!("teacher.width {} must equal encoder.teacher_dim {}", self.teacher.net.width, self.encoder.teacher_dim));
            }
            TeacherKind::FrozenNet if self.teacher.net.heads == 0 || self.teacher.net.width % self.teacher.net.heads != 0 => {
                return bad("teacher.width must be a multiple of teacher.heads".into());
            }
            TeacherKind::File if self.teacher.path.is_none() => return bad("teacher.kind = file needs teacher.path".into()),
            TeacherKind::File if self.augment => return bad("teacher.kind = file needs train.augment = false".into()),
            _ => {}
        }
        if self.clip.batch_size < 2 || self.clip.steps == 0 || !(self.clip.peak_lr > 0.0) {
            return bad("clip.batch_size must be at least 2, clip.steps and clip.peak_lr positive".into());
        }
        if self.data.classes > self.clip.model.max_classes() {
            return bad(format!("data.classes {} exceeds what captions can name ({})", self.data.classes, self.clip.model.max_classes()));
        }
        Ok(())
    }

    /// Synthetic split of `per_class` images per class starting at `first_index`.
    pub fn synthetic(&self, first_index: usize, per_class: usize) -> SyntheticSpec {
        SyntheticSpec {
            class_count: self.data.classes,
            image_size: self.encoder.image_size,
            samples_per_class: per_class,
            seed: self.data.seed,
            noise_sigma: self.data.noise_sigma,
            first_index,
        }
    }

    pub fn teacher_seed(&self) -> u64 {
        self.teacher.seed.unwrap_or(self.seed)
    }

    pub fn crop(&self) -> Option<CropParams> {
        self.augment.then_some(self.crop)
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig { seed: self.seed, ..self.probe }
    }
}
