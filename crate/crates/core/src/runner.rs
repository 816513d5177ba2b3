//! Command implementations shared by the CLI, the C API and the acceptance suite.
//!
//! Each command writes into a run directory holding `config.txt` (the full
//! snapshot), `metrics.txt` (one record per line) and any checkpoints.

use std::path::{Path, PathBuf};

use crate::checkpoint::{AnyTensor, Checkpoint};
use crate::clip::{init_from_mim, zero_shot_eval, ClipModel, ClipStepReport, ClipTrainer, InitReport};
use crate::config::RunConfig;
use crate::data::{read_evad, synth_generate, write_evad, Dataset};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, SuiteEntry};
use crate::mim::{MimModel, PretextMode, StepReport};
use crate::optim::{AdamW, OptimConfig};
use crate::params::ParamStore;
use crate::pretrain::{PretrainSetup, Pretrainer};
use crate::probe::{eval_patches, extract_features, probe_evaluate, FeatureKind, ProbeResult};
use crate::records::{render_table, Record, RecordLog};
use crate::rng::{streams, Prng};
use crate::teacher::{write_evat, FileTeacher, FrozenNetTeacher, TeacherKind, TeacherProvider};
use crate::vit::{EncoderState, patch_rows};

pub const RUN_DIR_ENV: &str = "MIMFORGE_RUN_DIR";
pub const FINAL_CHECKPOINT: &str = "final.evac";
const PREFETCH_DEPTH: usize = 2;

/// `ckpt-<step>.evac` with the step zero-padded to six digits.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.evac")
}

/// Output directory of one command invocation.
pub struct RunDir {
    pub path: PathBuf,
    log: RecordLog,
}

impl RunDir {
    /// `run.dir` if set, else `$MIMFORGE_RUN_DIR/<command>-seed<seed>`, else `runs/...`.
    pub fn resolve(cfg: &RunConfig, command: &str) -> PathBuf {
        match &cfg.run.dir {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(format!("{command}-seed{}", cfg.seed))
            }
        }
    }

    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        Self::create_at(cfg, Self::resolve(cfg, command))
    }

    pub fn create_at(cfg: &RunConfig, path: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        std::fs::write(path.join("config.txt"), cfg.to_text(true))?;
        let log = RecordLog::create(&path.join("metrics.txt"))?;
        Ok(RunDir { path, log })
    }

    pub fn record(&mut self, r: &Record) -> Result<()> {
        self.log.write(r)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Training and test splits: EVAD files when configured, else synthetic.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let load = |path: &Option<PathBuf>, first: usize, per: usize| -> Result<Dataset> {
        let ds = match path {
            Some(p) => read_evad(p)?,
            None => synth_generate(&cfg.synthetic(first, per))?,
        };
        if ds.image_size != cfg.encoder.image_size {
            return Err(Error::Config(format!("dataset image size {} vs encoder.image_size {}", ds.image_size, cfg.encoder.image_size)));
        }
        Ok(ds)
    };
    let train = load(&cfg.data.train_path, 0, cfg.data.train_per_class)?;
    let test = load(&cfg.data.test_path, cfg.data.train_per_class, cfg.data.test_per_class)?;
    if train.class_count != test.class_count {
        return Err(Error::Config(format!("train has {} classes, test {}", train.class_count, test.class_count)));
    }
    Ok((train, test))
}

pub fn teacher(cfg: &RunConfig) -> Result<Box<dyn TeacherProvider>> {
    let e = &cfg.encoder;
    match cfg.teacher.kind {
        TeacherKind::FrozenNet => Ok(Box::new(FrozenNetTeacher::new(e.image_size, e.patch_size, cfg.teacher.net, cfg.teacher_seed())?)),
        TeacherKind::File => {
            let path = cfg.teacher.path.as_ref().ok_or_else(|| Error::Config("teacher.path is not set".into()))?;
            let t = FileTeacher::open(path)?;
            t.check_student(e.grid(), e.teacher_dim)?;
            Ok(Box::new(t))
        }
    }
}

pub fn pretrain_setup(cfg: &RunConfig) -> PretrainSetup {
    PretrainSetup {
        encoder: cfg.encoder,
        mask: cfg.mask,
        optim: cfg.optim,
        batch_size: cfg.batch_size,
        crop: cfg.crop(),
        mode: cfg.mode,
        seed: cfg.seed,
    }
}

fn save_training(cfg: &RunConfig, params: &ParamStore<f32>, opt: &AdamW<f32>, path: &Path) -> Result<()> {
    Checkpoint::from_training(cfg.to_text(false), params, Some(opt))?.save(path)
}

fn config_diff(expected: &str, found: &str) -> String {
    let a: Vec<&str> = expected.lines().collect();
    let b: Vec<&str> = found.lines().collect();
    let mut diffs: Vec<String> = a.iter().filter(|l| !b.contains(l)).map(|l| format!("now {l}")).collect();
    diffs.extend(b.iter().filter(|l| !a.contains(l)).map(|l| format!("checkpoint {l}")));
    diffs.join("; ")
}

/// Loads a checkpoint whose config blob must equal `cfg` (run keys aside).
pub fn load_matching(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let want = cfg.to_text(false);
    if ck.config != want {
        return Err(Error::Config(format!("{} was written by a different config: {}", path.display(), config_diff(&want, &ck.config))));
    }
    Ok(ck)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: MimModel<f32>,
    pub opt: AdamW<f32>,
    pub reports: Vec<StepReport>,
    pub final_checkpoint: PathBuf,
}

impl PretrainOutcome {
    /// Mean loss over the last `window` steps of this invocation.
    pub fn tail_loss(&self, window: usize) -> f64 {
        let n = self.reports.len().min(window).max(1);
        let tail = &self.reports[self.reports.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Pretrains from scratch (saving the step-0 checkpoint) or from `resume`,
/// stopping at `optim.total_steps` or `run.max_steps`, whichever is first.
pub fn pretrain(cfg: &RunConfig, dir: &mut RunDir, train: &Dataset, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let teacher = teacher(cfg)?;
    let setup = pretrain_setup(cfg);
    let mut tr = match resume {
        None => {
            let t = Pretrainer::new(setup, teacher.as_ref(), train)?;
            save_training(cfg, &t.model.params, &t.opt, &dir.file(&checkpoint_name(0)))?;
            t
        }
        Some(p) => {
            let ck = load_matching(cfg, p)?;
            let mut model = MimModel::new(&cfg.encoder, &mut Prng::new(cfg.seed, streams::INIT))?;
            ck.load_params(&mut model.params)?;
            let mut opt = AdamW::new(cfg.optim, cfg.encoder.depth, &model.params)?;
            ck.load_optimizer(&model.params, &mut opt)?;
            dir.record(&Record::new("resume").with("from", p.display()).with("step", opt.step))?;
            Pretrainer::resume(setup, teacher.as_ref(), train, model, opt)?
        }
    };
    let total = cfg.optim.total_steps;
    let end = if cfg.run.max_steps > 0 { total.min(cfg.run.max_steps) } else { total };
    let spe = tr.steps_per_epoch();
    dir.record(
        &Record::new("schedule")
            .with("steps_per_epoch", spe)
            .with("total_steps", total)
            .with("epochs", format!("{:.2}", total as f64 / spe as f64))
            .with("warmup_steps", cfg.optim.warmup_steps)
            .with("warmup_epochs", format!("{:.2}", cfg.optim.warmup_steps as f64 / spe as f64)),
    )?;
    let every = cfg.run.checkpoint_every;
    let mut reports = Vec::new();
    let result = tr.run_until(end, PREFETCH_DEPTH, |t, r| {
        dir.record(
            &Record::new("pretrain").with("step", r.step).with("loss", r.loss).with("grad_norm", r.grad_norm).with("lr", r.lr),
        )?;
        reports.push(*r);
        let done = t.opt.step;
        if every > 0 && done % every == 0 && done < end {
            save_training(cfg, &t.model.params, &t.opt, &dir.file(&checkpoint_name(done)))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if e.is_numeric() {
            dir.record(&Record::new("abort").with("step", tr.opt.step).with("reason", format!("{e}").replace(' ', "_")))?;
        }
        return Err(e);
    }
    let final_checkpoint = dir.file(FINAL_CHECKPOINT);
    save_training(cfg, &tr.model.params, &tr.opt, &dir.file(&checkpoint_name(tr.opt.step)))?;
    save_training(cfg, &tr.model.params, &tr.opt, &final_checkpoint)?;
    let (model, opt) = tr.into_parts();
    Ok(PretrainOutcome { model, opt, reports, final_checkpoint })
}

/// The encoder stored in `path` (any checkpoint holding `encoder.*`), or a
/// freshly initialized one, identical to the step-0 pretraining encoder, when `None`.
pub fn load_encoder(cfg: &RunConfig, path: Option<&Path>) -> Result<EncoderState<f32>> {
    let mut st = EncoderState::<f32>::new(&cfg.encoder, &mut Prng::new(cfg.seed, streams::INIT))?;
    if let Some(p) = path {
        let ck = Checkpoint::load(p)?;
        let names: Vec<String> = st.params.names().map(str::to_string).collect();
        for n in names {
            match ck.get(&n) {
                Some(AnyTensor::F32(t)) => st.params.set(&n, t.clone())?,
                Some(_) => return Err(Error::Tensor { name: n, reason: "expected f32".into() }),
                None => return Err(Error::Tensor { name: n, reason: format!("missing from {}", p.display()) }),
            }
        }
    }
    Ok(st)
}

/// Linear probe of frozen encoder features.
pub fn probe_encoder(cfg: &RunConfig, st: &EncoderState<f32>, train: &Dataset, test: &Dataset, kind: FeatureKind) -> Result<ProbeResult> {
    let ftr = extract_features(&st.encoder, &st.params, train, kind)?;
    let fte = extract_features(&st.encoder, &st.params, test, kind)?;
    probe_evaluate((&ftr, &train.labels()), (&fte, &test.labels()), train.class_count, kind, &cfg.probe_config())
}

fn probe_record(r: &ProbeResult, source: &str) -> Record {
    Record::new("probe")
        .with("feature", r.feature_kind.name())
        .with("top1", r.top1)
        .with("final_train_loss", r.train_loss_curve.last().copied().unwrap_or(f64::NAN))
        .with("source", source)
}

/// Probes the checkpoint's encoder, or the random-init encoder when `ckpt` is `None`.
pub fn probe_command(cfg: &RunConfig, dir: &mut RunDir, ckpt: Option<&Path>) -> Result<ProbeResult> {
    let (train, test) = datasets(cfg)?;
    let st = load_encoder(cfg, ckpt)?;
    let r = probe_encoder(cfg, &st, &train, &test, cfg.probe_feature)?;
    let source = ckpt.map_or("random-init".to_string(), |p| p.display().to_string());
    dir.record(&probe_record(&r, &source))?;
    Ok(r)
}

pub fn pretrain_command(cfg: &RunConfig, dir: &mut RunDir, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let (train, _) = datasets(cfg)?;
    pretrain(cfg, dir, &train, resume)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: PretextMode,
    pub final_loss: f64,
    pub top1: f64,
}

pub const ABLATION_HEADER: [&str; 3] = ["mode", "final pretext loss", "probe top1"];
/// Steps averaged into the reported final pretext loss.
pub const LOSS_WINDOW: usize = 100;

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> =
        rows.iter().map(|r| vec![r.mode.name().to_string(), format!("{:.4}", r.final_loss), format!("{:.4}", r.top1)]).collect();
    render_table(&ABLATION_HEADER, &body)
}

/// Pretrains both pretext modes from the same seed, probes each, and writes
/// `ablation.txt`. Each arm gets its own sub-directory.
pub fn ablate_command(cfg: &RunConfig, dir: &mut RunDir) -> Result<(Vec<AblationRow>, String)> {
    let (train, test) = datasets(cfg)?;
    let mut rows = Vec::new();
    for mode in [PretextMode::RegressMasked, PretextMode::DistillAll] {
        let mut arm = cfg.clone();
        arm.mode = mode;
        arm.run.dir = Some(dir.file(mode.name()));
        let mut sub = RunDir::create_at(&arm, dir.file(mode.name()))?;
        let out = pretrain(&arm, &mut sub, &train, None)?;
        let st = EncoderState { encoder: out.model.encoder.clone(), params: out.model.params.clone() };
        let pr = probe_encoder(&arm, &st, &train, &test, arm.probe_feature)?;
        sub.record(&probe_record(&pr, mode.name()))?;
        let row = AblationRow { mode, final_loss: out.tail_loss(LOSS_WINDOW), top1: pr.top1 };
        dir.record(&Record::new("ablate").with("mode", mode.name()).with("final_loss", row.final_loss).with("top1", row.top1))?;
        rows.push(row);
    }
    let table = ablation_table(&rows);
    std::fs::write(dir.file("ablation.txt"), &table)?;
    Ok((rows, table))
}

#[derive(Debug, Clone)]
pub struct ClipOutcome {
    pub model: ClipModel<f32>,
    pub init: InitReport,
    pub reports: Vec<ClipStepReport>,
    pub zero_shot_top1: f64,
    pub final_checkpoint: PathBuf,
}

/// Contrastive training, optionally initialized from a MIM checkpoint, then
/// zero-shot evaluation on the test split.
pub fn clip_train_command(cfg: &RunConfig, dir: &mut RunDir) -> Result<ClipOutcome> {
    let (train, test) = datasets(cfg)?;
    let mut rng = Prng::new(cfg.seed, streams::CLIP);
    let (model, init) = match &cfg.clip.init {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut src = ParamStore::new();
            for (n, t) in &ck.tensors {
                if let (false, AnyTensor::F32(t)) = (n.starts_with("opt."), t) {
                    src.add(n, t.clone(), 0, false)?;
                }
            }
            init_from_mim(&src, &cfg.encoder, &cfg.clip.model, &mut rng)?
        }
        None => {
            let m = ClipModel::<f32>::new(&cfg.encoder, &cfg.clip.model, &mut rng)?;
            let new = m.params.names().map(str::to_string).collect();
            (m, InitReport { matched: Vec::new(), new, unused: Vec::new() })
        }
    };
    dir.record(&Record::new("clip_init").with("matched", init.matched.len()).with("new", init.new.len()).with("unused", init.unused.len()))?;
    let ocfg = OptimConfig {
        peak_lr: cfg.clip.peak_lr,
        warmup_steps: cfg.clip.steps / 20,
        total_steps: cfg.clip.steps,
        layer_decay: 1.0,
        ..cfg.optim
    };
    let opt = AdamW::new(ocfg, cfg.encoder.depth, &model.params)?;
    let mut tr = ClipTrainer::new(model, opt, cfg.clip.batch_size, cfg.seed, &train)?;
    let every = cfg.run.checkpoint_every;
    let save = |tr: &ClipTrainer, path: &Path| Checkpoint::from_training(cfg.to_text(false), &tr.model.params, Some(&tr.opt))?.save(path);
    let mut reports = Vec::new();
    while tr.opt.step < cfg.clip.steps {
        let r = match tr.step() {
            Ok(r) => r,
            Err(e) => {
                if e.is_numeric() {
                    dir.record(&Record::new("abort").with("step", tr.opt.step))?;
                }
                return Err(e);
            }
        };
        dir.record(
            &Record::new("clip")
                .with("step", r.step)
                .with("loss", r.loss)
                .with("grad_norm", r.grad_norm)
                .with("lr", r.lr)
                .with("temperature", r.temperature),
        )?;
        reports.push(r);
        if every > 0 && tr.opt.step % every == 0 && tr.opt.step < cfg.clip.steps {
            save(&tr, &dir.file(&checkpoint_name(tr.opt.step)))?;
        }
    }
    let final_checkpoint = dir.file(FINAL_CHECKPOINT);
    save(&tr, &final_checkpoint)?;
    let (top1, _) = zero_shot_eval(&tr.model, &test)?;
    dir.record(&Record::new("zeroshot").with("top1", top1).with("images", test.len()))?;
    Ok(ClipOutcome { model: tr.model, init, reports, zero_shot_top1: top1, final_checkpoint })
}

/// Zero-shot top-1 of a CLIP checkpoint on the test split.
pub fn zeroshot_command(cfg: &RunConfig, dir: &mut RunDir, ckpt: &Path) -> Result<f64> {
    let (_, test) = datasets(cfg)?;
    let mut model = ClipModel::<f32>::new(&cfg.encoder, &cfg.clip.model, &mut Prng::new(cfg.seed, streams::CLIP))?;
    Checkpoint::load(ckpt)?.load_params(&mut model.params)?;
    let (top1, _) = zero_shot_eval(&model, &test)?;
    dir.record(&Record::new("zeroshot").with("top1", top1).with("images", test.len()).with("source", ckpt.display()))?;
    Ok(top1)
}

pub fn gradcheck_command(dir: &mut RunDir, h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let entries = run_suite(h, tol)?;
    for e in &entries {
        dir.record(
            &Record::new("gradcheck")
                .with("op", e.name)
                .with("max_rel_err", e.report.max_rel_err)
                .with("checked", e.report.checked)
                .with("passed", e.report.passed),
        )?;
    }
    Ok(entries)
}

/// Writes `train.evad`, `test.evad` and, for a frozen-net teacher, `teacher.evat`
/// holding its features of the unaugmented training images.
pub fn gen_data_command(cfg: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let (train, test) = datasets(cfg)?;
    write_evad(&dir.file("train.evad"), &train)?;
    write_evad(&dir.file("test.evad"), &test)?;
    dir.record(&Record::new("gen_data").with("split", "train").with("images", train.len()).with("classes", train.class_count))?;
    dir.record(&Record::new("gen_data").with("split", "test").with("images", test.len()).with("classes", test.class_count))?;
    if cfg.teacher.kind == TeacherKind::FrozenNet {
        let t = teacher(cfg)?;
        let all: Vec<usize> = (0..train.len()).collect();
        let mut values = Vec::with_capacity(train.len() * t.grid() * t.teacher_dim());
        for chunk in all.chunks(128) {
            values.extend_from_slice(t.features(&eval_patches(&train, chunk, cfg.encoder.patch_size)?, chunk)?.features.data());
        }
        write_evat(&dir.file("teacher.evat"), t.grid(), t.teacher_dim(), &values)?;
        dir.record(&Record::new("gen_data").with("split", "teacher").with("source", t.source_id()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSummary {
    pub tensors: usize,
    pub optimizer_entries: usize,
    pub parameter_tensors: usize,
    pub parameter_values: usize,
    pub listing: String,
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let ck = Checkpoint::load(path)?;
    let mut rows = Vec::new();
    let (mut opt, mut params, mut values) = (0, 0, 0);
    for (n, t) in &ck.tensors {
        if n.starts_with("opt.") {
            opt += 1;
        } else {
            params += 1;
            values += t.numel();
        }
        let dtype = match t.dtype() {
            crate::tensor::DType::F32 => "f32",
            crate::tensor::DType::F64 => "f64",
        };
        rows.push(vec![n.clone(), dtype.to_string(), format!("{:?}", t.shape()), t.numel().to_string()]);
    }
    let mut listing = String::new();
    for line in ck.config.lines() {
        listing.push_str("# ");
        listing.push_str(line);
        listing.push('\n');
    }
    listing.push_str(&render_table(&["name", "dtype", "shape", "numel"], &rows));
    listing.push_str(&format!("tensors={} parameter_tensors={params} parameter_values={values} optimizer_entries={opt}\n", ck.tensors.len()));
    Ok(CheckpointSummary { tensors: ck.tensors.len(), optimizer_entries: opt, parameter_tensors: params, parameter_values: values, listing })
}

/// Number of MIM model tensors (encoder plus pretext head) a checkpoint of `cfg` holds.
pub fn mim_tensor_names(cfg: &RunConfig) -> Result<Vec<String>> {
    let m = MimModel::<f32>::new(&cfg.encoder, &mut Prng::new(0, 0))?;
    Ok(m.params.names().map(str::to_string).collect())
}

/// Patch-token rows of an encoder output, re-exported for callers assembling features.
pub fn patch_token_rows(batch: usize, grid: usize) -> Vec<usize> {
    patch_rows(batch, grid)
}
