//! Toy contrastive image-text stage: a vision tower initialized from a MIM
//! checkpoint, a small caption encoder, symmetric InfoNCE and zero-shot labels.

use crate::autodiff::{Graph, Var};
use crate::data::{epoch_permutation, Dataset};
use crate::error::{Error, Result};
use crate::mim::{global_grad_norm, COS_EPS};
use crate::optim::{AdamW, OptimConfig};
use crate::params::{Bound, ParamId, ParamStore};
use crate::probe::{argmax, eval_patches};
use crate::rng::{streams, Prng};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{declare, patch_rows, Block, Build, Encoder, EncoderConfig, Init, Mode, LN_EPS};

pub const TEMP_MIN: f64 = 0.01;
pub const TEMP_MAX: f64 = 100.0;
pub const INIT_TEMP: f64 = 0.07;

/// Template tokens shared by every caption; the class token follows them.
pub const TEMPLATE: [usize; 3] = [1, 2, 3];
/// Id of the class-0 token.
pub const CLASS_TOKEN_BASE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub embed_dim: usize,
    pub vocab: usize,
    pub context: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_mlp: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { embed_dim: 32, vocab: 64, context: 4, text_width: 32, text_depth: 2, text_heads: 4, text_mlp: 128 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.text_width == 0 || self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "clip text width {} must be a positive multiple of heads {} and embed_dim positive",
                self.text_width, self.text_heads
            )));
        }
        if self.context != TEMPLATE.len() + 1 {
            return Err(Error::Config(format!("caption context must be {}", TEMPLATE.len() + 1)));
        }
        if self.vocab <= CLASS_TOKEN_BASE {
            return Err(Error::Config(format!("vocab {} leaves no class tokens", self.vocab)));
        }
        Ok(())
    }

    /// Largest class count the vocabulary can name.
    pub fn max_classes(&self) -> usize {
        self.vocab - CLASS_TOKEN_BASE
    }
}

/// Token ids of the caption naming `class`.
pub fn caption(class: usize, cfg: &ClipConfig) -> Result<Vec<usize>> {
    if class >= cfg.max_classes() {
        return Err(Error::OutOfRange { index: class, limit: cfg.max_classes() });
    }
    let mut c = TEMPLATE.to_vec();
    c.push(CLASS_TOKEN_BASE + class);
    Ok(c)
}

/// Images paired row-by-row with captions.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `(batch · grid) × patch_dim`, normalized.
    pub patches: Tensor<f32>,
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct TextTower {
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: (ParamId, ParamId),
    proj: ParamId,
}

/// Vision encoder plus projection, caption encoder, and learnable log-temperature.
#[derive(Debug, Clone)]
pub struct ClipModel<T> {
    pub vision: Encoder,
    pub clip: ClipConfig,
    pub params: ParamStore<T>,
    visual_proj: ParamId,
    text: TextTower,
    log_temp: ParamId,
}

/// Outcome of [`init_from_mim`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitReport {
    /// Vision tensors copied from the checkpoint.
    pub matched: Vec<String>,
    /// Freshly initialized tensors.
    pub new: Vec<String>,
    /// Checkpoint tensors outside the vision encoder (e.g. the pretext head).
    pub unused: Vec<String>,
}

fn declare_tail<T: Scalar>(
    store: &mut ParamStore<T>,
    build: &mut Build,
    vision: &EncoderConfig,
    cfg: &ClipConfig,
) -> Result<(ParamId, TextTower, ParamId)> {
    let top = vision.depth + 1;
    let w = cfg.text_width;
    let visual_proj = declare(store, build, "clip.visual_proj.weight".into(), &[vision.width, cfg.embed_dim], Init::Xavier, top, false)?;
    let token_embed = declare(store, build, "clip.text.token_embed".into(), &[cfg.vocab, w], Init::TruncNormal, top, true)?;
    let pos_embed = declare(store, build, "clip.text.pos_embed".into(), &[cfg.context, w], Init::TruncNormal, top, true)?;
    let blocks = (0..cfg.text_depth)
        .map(|i| Block::declare(store, build, &format!("clip.text.blocks.{i}"), w, cfg.text_mlp, top))
        .collect::<Result<Vec<_>>>()?;
    let norm = (
        declare(store, build, "clip.text.norm.weight".into(), &[w], Init::Ones, top, true)?,
        declare(store, build, "clip.text.norm.bias".into(), &[w], Init::Zeros, top, true)?,
    );
    let proj = declare(store, build, "clip.text_proj.weight".into(), &[w, cfg.embed_dim], Init::Xavier, top, false)?;
    let log_temp = match build {
        Build::Fresh(_) => store.add("clip.log_temp", Tensor::from_f64(&[1], &[INIT_TEMP.ln()])?, top, true)?,
        Build::Attach => declare(store, build, "clip.log_temp".into(), &[1], Init::Zeros, top, true)?,
    };
    Ok((visual_proj, TextTower { token_embed, pos_embed, blocks, norm, proj }, log_temp))
}

impl<T: Scalar> ClipModel<T> {
    /// Everything freshly initialized, vision encoder included.
    pub fn new(vision: &EncoderConfig, clip: &ClipConfig, rng: &mut Prng) -> Result<Self> {
        clip.validate()?;
        let mut params = ParamStore::new();
        let enc = Encoder::init(vision, &mut params, "encoder", rng)?;
        let (visual_proj, text, log_temp) = declare_tail(&mut params, &mut Build::Fresh(rng), vision, clip)?;
        Ok(ClipModel { vision: enc, clip: *clip, params, visual_proj, text, log_temp })
    }

    /// Binds to a complete CLIP store (e.g. loaded from a checkpoint).
    pub fn from_params(vision: &EncoderConfig, clip: &ClipConfig, mut params: ParamStore<T>) -> Result<Self> {
        clip.validate()?;
        let enc = Encoder::attach(vision, &mut params, "encoder")?;
        let before = params.len();
        let (visual_proj, text, log_temp) = declare_tail(&mut params, &mut Build::Attach, vision, clip)?;
        debug_assert_eq!(before, params.len());
        Ok(ClipModel { vision: enc, clip: *clip, params, visual_proj, text, log_temp })
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.log_temp).item().as_f64().exp()
    }

    /// Projects `log_temp` back into `[ln TEMP_MIN, ln TEMP_MAX]`.
    pub fn clamp_temperature(&mut self) {
        let v = self.params.get(self.log_temp).item().as_f64().clamp(TEMP_MIN.ln(), TEMP_MAX.ln());
        self.params.get_mut(self.log_temp).data_mut()[0] = T::of(v);
    }

    /// Mean-patch encoder features projected to `embed_dim`, one row per image.
    pub fn image_embed(&self, g: &mut Graph<T>, p: &Bound, patches: Var, mode: &mut Mode) -> Result<Var> {
        let grid = self.vision.cfg.grid();
        let out = self.vision.forward(g, p, patches, None, mode)?;
        let batch = g.value(out).rows_cols().0 / (grid + 1);
        let tokens = g.embedding_lookup(out, &patch_rows(batch, grid))?;
        let pooled = g.group_mean_rows(tokens, grid)?;
        g.linear(pooled, p[self.visual_proj], None)
    }

    /// Caption embeddings, one row per caption.
    pub fn text_embed(&self, g: &mut Graph<T>, p: &Bound, captions: &[Vec<usize>]) -> Result<Var> {
        let ctx = self.clip.context;
        if captions.is_empty() {
            return Err(Error::InvalidArgument("no captions".into()));
        }
        let mut ids = Vec::with_capacity(captions.len() * ctx);
        for c in captions {
            if c.len() != ctx {
                return Err(Error::InvalidArgument(format!("caption of {} tokens, expected {ctx}", c.len())));
            }
            if let Some(&bad) = c.iter().find(|&&t| t >= self.clip.vocab) {
                return Err(Error::OutOfRange { index: bad, limit: self.clip.vocab });
            }
            ids.extend_from_slice(c);
        }
        let x = g.embedding_lookup(p[self.text.token_embed], &ids)?;
        let pos_ids: Vec<usize> = (0..captions.len()).flat_map(|_| 0..ctx).collect();
        let pos = g.embedding_lookup(p[self.text.pos_embed], &pos_ids)?;
        let mut x = g.add(x, pos)?;
        for b in &self.text.blocks {
            x = b.forward(g, p, x, captions.len(), ctx, self.clip.text_heads, &mut Mode::Eval)?;
        }
        let x = g.layernorm(x, p[self.text.norm.0], p[self.text.norm.1], LN_EPS)?;
        let pooled = g.group_mean_rows(x, ctx)?;
        g.linear(pooled, p[self.text.proj], None)
    }

    /// Contrastive loss of a pair batch under the model's own temperature.
    pub fn loss(&self, g: &mut Graph<T>, p: &Bound, patches: Var, captions: &[Vec<usize>], mode: &mut Mode) -> Result<Var> {
        let img = self.image_embed(g, p, patches, mode)?;
        let txt = self.text_embed(g, p, captions)?;
        let neg = g.scale(p[self.log_temp], -1.0)?;
        let inv_temp = g.exp(neg)?;
        infonce_graph(g, img, txt, inv_temp)
    }
}

/// Symmetric InfoNCE on graph values; `inv_temp` is a one-element logit scale.
pub fn infonce_graph<T: Scalar>(g: &mut Graph<T>, img: Var, txt: Var, inv_temp: Var) -> Result<Var> {
    let (b, d) = g.value(img).rows_cols();
    if g.shape(txt) != [b, d] {
        return Err(Error::dim("infonce", g.shape(img), g.shape(txt)));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!("infonce needs a batch of at least 2, got {b}")));
    }
    let a = g.l2_normalize_lastdim(img, COS_EPS)?;
    let t = g.l2_normalize_lastdim(txt, COS_EPS)?;
    let tt = g.transpose2d(t)?;
    let sim = g.matmul(a, tt)?;
    let logits = g.mul_scalar(sim, inv_temp)?;
    let diag: Vec<usize> = (0..b).collect();
    let i2t = g.softmax_cross_entropy(logits, &diag)?;
    let lt = g.transpose2d(logits)?;
    let t2i = g.softmax_cross_entropy(lt, &diag)?;
    let s = g.add(i2t, t2i)?;
    g.scale(s, 0.5)
}

/// Symmetric InfoNCE of `batch × dim` embeddings at temperature `temp`.
pub fn infonce(img: &Tensor<f64>, txt: &Tensor<f64>, temp: f64) -> Result<f64> {
    if !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temp}")));
    }
    let mut g = Graph::<f64>::new();
    let a = g.constant(img.clone());
    let t = g.constant(txt.clone());
    let s = g.constant(Tensor::scalar(1.0 / temp));
    let l = infonce_graph(&mut g, a, t, s)?;
    Ok(g.value(l).item())
}

/// Index of the most cosine-similar class row for each image row; ties go to
/// the lowest class id.
pub fn nearest_class(img: &Tensor<f64>, classes: &Tensor<f64>) -> Result<Vec<usize>> {
    let (n, d) = img.rows_cols();
    let (c, d2) = classes.rows_cols();
    if c == 0 {
        return Err(Error::InvalidArgument("empty class set".into()));
    }
    if d != d2 {
        return Err(Error::dim("nearest_class", img.shape(), classes.shape()));
    }
    let unit = |r: &[f64]| {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(COS_EPS);
        r.iter().map(|v| v / norm).collect::<Vec<_>>()
    };
    let cls: Vec<Vec<f64>> = classes.data().chunks(d).map(unit).collect();
    Ok((0..n)
        .map(|i| {
            let x = unit(&img.data()[i * d..(i + 1) * d]);
            let scores: Vec<f64> = cls.iter().map(|c| c.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            argmax(&scores)
        })
        .collect())
}

/// Zero-shot labels for normalized patchified images, one caption per class.
pub fn zero_shot_classify(model: &ClipModel<f32>, patches: &Tensor<f32>, class_captions: &[Vec<usize>]) -> Result<Vec<usize>> {
    if class_captions.is_empty() {
        return Err(Error::InvalidArgument("empty class set".into()));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(patches.clone());
    let img = model.image_embed(&mut g, &p, x, &mut Mode::Eval)?;
    let txt = model.text_embed(&mut g, &p, class_captions)?;
    nearest_class(&g.value(img).cast(), &g.value(txt).cast())
}

/// Zero-shot top-1 over a whole dataset, captioning every class it holds.
pub fn zero_shot_eval(model: &ClipModel<f32>, ds: &Dataset) -> Result<(f64, Vec<usize>)> {
    let captions = (0..ds.class_count).map(|c| caption(c, &model.clip)).collect::<Result<Vec<_>>>()?;
    let labels = ds.labels();
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut preds = Vec::with_capacity(ds.len());
    for chunk in all.chunks(128) {
        preds.extend(zero_shot_classify(model, &eval_patches(ds, chunk, model.vision.cfg.patch_size)?, &captions)?);
    }
    Ok((crate::probe::top1(&preds, &labels)?, preds))
}

/// Builds a CLIP model whose vision encoder is copied from `source`; nothing
/// is loaded unless every encoder tensor is present with the right shape.
pub fn init_from_mim(
    source: &ParamStore<f32>,
    vision: &EncoderConfig,
    clip: &ClipConfig,
    rng: &mut Prng,
) -> Result<(ClipModel<f32>, InitReport)> {
    let mut model = ClipModel::<f32>::new(vision, clip, rng)?;
    let enc_names: Vec<String> = model.vision.param_ids().iter().map(|&id| model.params.meta(id).name.clone()).collect();
    for name in &enc_names {
        let want = model.params.by_name(name).expect("declared").shape().to_vec();
        match source.by_name(name) {
            None => return Err(Error::Tensor { name: name.clone(), reason: "missing from checkpoint".into() }),
            Some(t) if t.shape() != want => {
                return Err(Error::Tensor { name: name.clone(), reason: format!("checkpoint shape {:?} vs expected {want:?}", t.shape()) })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = source.names().find(|n| n.starts_with("encoder.") && !enc_names.iter().any(|e| e == n)) {
        return Err(Error::Tensor { name: extra.to_string(), reason: "not part of the configured encoder".into() });
    }
    for name in &enc_names {
        model.params.set(name, source.by_name(name).expect("checked").clone())?;
    }
    let new = model.params.names().filter(|n| !enc_names.iter().any(|e| e == n)).map(str::to_string).collect();
    let unused = source.names().filter(|n| !n.starts_with("encoder.")).map(str::to_string).collect();
    Ok((model, InitReport { matched: enc_names, new, unused }))
}

/// Per-step record of contrastive training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub temperature: f64,
}

/// One contrastive update followed by the temperature clamp.
pub fn clip_step(model: &mut ClipModel<f32>, opt: &mut AdamW<f32>, batch: &PairBatch, drop_path_rng: &mut Prng) -> Result<ClipStepReport> {
    let step = opt.step;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let x = g.constant(batch.patches.clone());
    let mut fwd = Mode::Train { drop_path: model.vision.cfg.drop_path_rate, rng: drop_path_rng };
    let loss = model.loss(&mut g, &p, x, &batch.captions, &mut fwd)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss: value });
    }
    g.backward(loss)?;
    let grads = p.grads(&g);
    let grad_norm = global_grad_norm(&grads);
    let lr = opt.step(&mut model.params, &grads)?;
    model.clamp_temperature();
    Ok(ClipStepReport { step, loss: value, grad_norm, lr, temperature: model.temperature() })
}

/// Deterministic contrastive training over a labeled dataset.
pub struct ClipTrainer<'a> {
    pub model: ClipModel<f32>,
    pub opt: AdamW<f32>,
    pub batch_size: usize,
    pub seed: u64,
    data: &'a Dataset,
}

impl<'a> ClipTrainer<'a> {
    pub fn new(model: ClipModel<f32>, opt: AdamW<f32>, batch_size: usize, seed: u64, data: &'a Dataset) -> Result<Self> {
        if batch_size < 2 || batch_size > data.len() {
            return Err(Error::Config(format!("clip batch size {batch_size} must be in [2, {}]", data.len())));
        }
        if data.image_size != model.vision.cfg.image_size {
            return Err(Error::Config(format!("dataset image size {} vs encoder {}", data.image_size, model.vision.cfg.image_size)));
        }
        if data.class_count > model.clip.max_classes() {
            return Err(Error::Config(format!("{} classes exceed the caption vocabulary ({})", data.class_count, model.clip.max_classes())));
        }
        Ok(ClipTrainer { model, opt, batch_size, seed, data })
    }

    /// Optimizer settings used by the default recipe.
    pub fn default_optim(total_steps: u64) -> OptimConfig {
        OptimConfig { peak_lr: 5e-4, warmup_steps: total_steps / 20, total_steps, ..OptimConfig::default() }
    }

    pub fn batch(&self, step: u64) -> Result<PairBatch> {
        let spe = (self.data.len() / self.batch_size) as u64;
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let perm = epoch_permutation(self.seed ^ streams::CLIP, epoch, self.data.len());
        let idx = &perm[k * self.batch_size..(k + 1) * self.batch_size];
        let captions = idx.iter().map(|&i| caption(self.data.records[i].label as usize, &self.model.clip)).collect::<Result<_>>()?;
        Ok(PairBatch { patches: eval_patches(self.data, idx, self.model.vision.cfg.patch_size)?, captions })
    }

    pub fn step(&mut self) -> Result<ClipStepReport> {
        let step = self.opt.step;
        let batch = self.batch(step)?;
        let mut dp = Prng::new(self.seed, streams::CLIP).derive(&[step]);
        clip_step(&mut self.model, &mut self.opt, &batch, &mut dp)
    }
}
