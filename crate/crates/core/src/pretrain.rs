//! Deterministic pretraining loop: batch assembly, masking, augmentation and updates.
//!
//! Every random choice of step `s` derives from `(seed, epoch, k)` where
//! `epoch = s / steps_per_epoch` and `k = s % steps_per_epoch`, so any step can
//! be rebuilt independently and a resumed run retraces the original exactly.

use crate::data::{epoch_permutation, normalize, patch_batch, rand_resize_crop, CropParams, Dataset, Image};
use crate::error::{Error, Result};
use crate::masking::{generate, MaskParams, MaskSet};
use crate::mim::{pretrain_step, MimModel, PretextMode, PretrainBatch, StepReport};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::{streams, Prng};
use crate::teacher::{TeacherKind, TeacherProvider};
use crate::vit::EncoderConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSetup {
    pub encoder: EncoderConfig,
    pub mask: MaskParams,
    pub optim: OptimConfig,
    pub batch_size: usize,
    /// `None` disables augmentation.
    pub crop: Option<CropParams>,
    pub mode: PretextMode,
    pub seed: u64,
}

impl PretrainSetup {
    pub fn toy(seed: u64) -> Self {
        PretrainSetup {
            encoder: EncoderConfig::toy(),
            mask: MaskParams::default(),
            optim: OptimConfig::default(),
            batch_size: 64,
            crop: Some(CropParams::default()),
            mode: PretextMode::RegressMasked,
            seed,
        }
    }
}

/// Deterministic batch assembly, independent of model state.
#[derive(Clone, Copy)]
pub struct BatchSource<'a> {
    pub setup: &'a PretrainSetup,
    teacher: &'a dyn TeacherProvider,
    data: &'a Dataset,
}

impl<'a> BatchSource<'a> {
    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.len() / self.setup.batch_size) as u64
    }

    fn labels(&self, step: u64) -> [u64; 2] {
        let spe = self.steps_per_epoch();
        [step / spe, step % spe]
    }

    /// Dataset indices of step `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let [epoch, k] = self.labels(step);
        let b = self.setup.batch_size;
        let k = k as usize;
        epoch_permutation(self.setup.seed, epoch, self.data.len())[k * b..(k + 1) * b].to_vec()
    }

    /// Rebuilds the full input of step `step`.
    pub fn batch(&self, step: u64) -> Result<PretrainBatch> {
        let cfg = &self.setup.encoder;
        let [epoch, k] = self.labels(step);
        let indices = self.batch_indices(step);
        let aug = Prng::new(self.setup.seed, streams::AUGMENT);
        let mask_root = Prng::new(self.setup.seed, streams::MASK);
        let side = cfg.grid_side();
        let mut images = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len());
        for (j, &i) in indices.iter().enumerate() {
            let img = Image::from_record(&self.data.records[i], self.data.image_size);
            let img = match &self.setup.crop {
                Some(c) => rand_resize_crop(&img, c, cfg.image_size, &mut aug.derive(&[epoch, k, j as u64]))?,
                None => img,
            };
            images.push(normalize(&img));
            masks.push(match self.setup.mode {
                PretextMode::RegressMasked => generate(side, side, &self.setup.mask, &mut mask_root.derive(&[epoch, k, j as u64]))?,
                PretextMode::DistillAll => MaskSet::empty(side, side),
            });
        }
        let patches = patch_batch(&images, cfg.patch_size)?;
        let targets = self.teacher.features(&patches, &indices)?;
        Ok(PretrainBatch { patches, targets, masks })
    }
}

/// Model, optimizer, data and teacher of one run.
pub struct Pretrainer<'a> {
    pub setup: PretrainSetup,
    pub model: MimModel<f32>,
    pub opt: AdamW<f32>,
    teacher: &'a dyn TeacherProvider,
    data: &'a Dataset,
}

impl<'a> Pretrainer<'a> {
    /// Fresh model initialized from `(seed, init stream)`.
    pub fn new(setup: PretrainSetup, teacher: &'a dyn TeacherProvider, data: &'a Dataset) -> Result<Self> {
        let model = MimModel::new(&setup.encoder, &mut Prng::new(setup.seed, streams::INIT))?;
        let opt = AdamW::new(setup.optim, setup.encoder.depth, &model.params)?;
        Self::resume(setup, teacher, data, model, opt)
    }

    /// Continues from an existing model and optimizer state.
    pub fn resume(
        setup: PretrainSetup,
        teacher: &'a dyn TeacherProvider,
        data: &'a Dataset,
        model: MimModel<f32>,
        opt: AdamW<f32>,
    ) -> Result<Self> {
        let cfg = &setup.encoder;
        if data.image_size != cfg.image_size {
            return Err(Error::Config(format!("dataset image size {} vs encoder {}", data.image_size, cfg.image_size)));
        }
        if setup.batch_size == 0 || setup.batch_size > data.len() {
            return Err(Error::Config(format!("batch_size {} must be in [1, {}]", setup.batch_size, data.len())));
        }
        if teacher.grid() != cfg.grid() || teacher.teacher_dim() != cfg.teacher_dim {
            return Err(Error::Config(format!(
                "teacher grid {} dim {} vs student grid {} dim {}",
                teacher.grid(),
                teacher.teacher_dim(),
                cfg.grid(),
                cfg.teacher_dim
            )));
        }
        if teacher.kind() == TeacherKind::File && setup.crop.is_some() {
            return Err(Error::Config("file teachers hold features of unaugmented images; disable augmentation".into()));
        }
        Ok(Pretrainer { setup, model, opt, teacher, data })
    }

    pub fn source(&self) -> BatchSource<'_> {
        BatchSource { setup: &self.setup, teacher: self.teacher, data: self.data }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.source().steps_per_epoch()
    }

    /// Dataset indices of step `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        self.source().batch_indices(step)
    }

    /// Rebuilds the full input of step `step`.
    pub fn batch(&self, step: u64) -> Result<PretrainBatch> {
        self.source().batch(step)
    }

    /// Runs the next step.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.batch(self.opt.step)?;
        self.step_on(&batch)
    }

    /// Runs the next step on a batch already built for it.
    pub fn step_on(&mut self, batch: &PretrainBatch) -> Result<StepReport> {
        let labels = self.source().labels(self.opt.step);
        let mut dp = Prng::new(self.setup.seed, streams::DROP_PATH).derive(&labels);
        pretrain_step(&mut self.model, &mut self.opt, batch, self.setup.mode, &mut dp)
    }

    /// Trains up to (not including) optimizer step `end`, building batches on a
    /// helper thread at most `depth` steps ahead. `on_step` sees every report
    /// and may stop the run by returning an error.
    pub fn run_until<F>(&mut self, end: u64, depth: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Self, &StepReport) -> Result<()>,
    {
        let start = self.opt.step;
        if start >= end {
            return Ok(());
        }
        let setup = self.setup.clone();
        let source = BatchSource { setup: &setup, teacher: self.teacher, data: self.data };
        std::thread::scope(|s| {
            let (tx, rx) = std::sync::mpsc::sync_channel(depth.max(1));
            s.spawn(move || {
                for step in start..end {
                    if tx.send(source.batch(step)).is_err() {
                        break;
                    }
                }
            });
            for _ in start..end {
                let batch = rx.recv().map_err(|_| Error::InvalidArgument("batch producer stopped".into()))??;
                let r = self.step_on(&batch)?;
                on_step(self, &r)?;
            }
            Ok(())
        })
    }

    pub fn into_parts(self) -> (MimModel<f32>, AdamW<f32>) {
        (self.model, self.opt)
    }
}
