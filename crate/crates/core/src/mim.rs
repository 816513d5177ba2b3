//! Pretext head, negative-cosine feature regression, and one training step.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::optim::AdamW;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::{Scalar, Tensor};
use crate::teacher::TeacherBatch;
use crate::vit::{declare, patch_rows, Build, Encoder, EncoderConfig, Init, Mode, LN_EPS};

/// Norm floor applied to both cosine operands.
pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretextMode {
    /// Predict teacher features at masked positions from a corrupted input.
    RegressMasked,
    /// Predict teacher features at every position from the clean input.
    DistillAll,
}

impl PretextMode {
    pub fn name(self) -> &'static str {
        match self {
            PretextMode::RegressMasked => "regress-masked",
            PretextMode::DistillAll => "distill-all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regress-masked" => Ok(PretextMode::RegressMasked),
            "distill-all" => Ok(PretextMode::DistillAll),
            _ => Err(Error::Config(format!("unknown pretext mode {s:?} (expected regress-masked or distill-all)"))),
        }
    }
}

/// Affine layernorm followed by a biased projection to the teacher dimension.
#[derive(Debug, Clone)]
pub struct MimHead {
    pub norm: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub teacher_dim: usize,
}

impl MimHead {
    pub(crate) fn declare<T: Scalar>(store: &mut ParamStore<T>, build: &mut Build, cfg: &EncoderConfig) -> Result<Self> {
        let (d, t, layer) = (cfg.width, cfg.teacher_dim, cfg.depth + 1);
        Ok(MimHead {
            norm: (
                declare(store, build, "head.norm.weight".into(), &[d], Init::Ones, layer, true)?,
                declare(store, build, "head.norm.bias".into(), &[d], Init::Zeros, layer, true)?,
            ),
            proj: (
                declare(store, build, "head.proj.weight".into(), &[d, t], Init::Xavier, layer, false)?,
                declare(store, build, "head.proj.bias".into(), &[t], Init::Zeros, layer, true)?,
            ),
            teacher_dim: t,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.layernorm(x, p[self.norm.0], p[self.norm.1], LN_EPS)?;
        g.linear(h, p[self.proj.0], Some(p[self.proj.1]))
    }
}

/// `−mean_rows cos(pred_r, target_r)`; a zero target row contributes cosine 0.
pub fn neg_cosine<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("neg_cosine", g.shape(pred), g.shape(target)));
    }
    let a = g.l2_normalize_lastdim(pred, COS_EPS)?;
    let b = g.l2_normalize_lastdim(target, COS_EPS)?;
    let prod = g.mul(a, b)?;
    let cos = g.sum_lastdim(prod)?;
    let m = g.mean(cos)?;
    g.scale(m, -1.0)
}

fn check_patch_out<T: Scalar>(g: &Graph<T>, patch_out: Var, targets: Var, grid: usize) -> Result<usize> {
    let (rows, _) = g.value(patch_out).rows_cols();
    let (trows, _) = g.value(targets).rows_cols();
    if grid == 0 || rows == 0 || rows % grid != 0 || rows != trows {
        return Err(Error::dim("mim targets", g.shape(patch_out), g.shape(targets)));
    }
    Ok(rows / grid)
}

/// Negative cosine averaged over masked positions only.
///
/// `patch_out` is `(batch · grid) × width` (cls rows removed), `targets` is
/// `(batch · grid) × teacher_dim`.
pub fn mim_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    head: &MimHead,
    patch_out: Var,
    targets: Var,
    masks: &[MaskSet],
    grid: usize,
) -> Result<Var> {
    let batch = check_patch_out(g, patch_out, targets, grid)?;
    if masks.len() != batch {
        return Err(Error::Mismatch(format!("{} masks for a batch of {batch}", masks.len())));
    }
    let mut rows = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::InvalidArgument(format!("image {b} has an empty mask")));
        }
        if m.cells() != grid {
            return Err(Error::Mismatch(format!("mask grid {} vs {grid}", m.cells())));
        }
        rows.extend(m.indices.iter().map(|&i| b * grid + i));
    }
    let h = g.embedding_lookup(patch_out, &rows)?;
    let t = g.embedding_lookup(targets, &rows)?;
    let pred = head.forward(g, p, h)?;
    neg_cosine(g, pred, t)
}

/// Negative cosine averaged over every patch position.
pub fn distill_loss<T: Scalar>(g: &mut Graph<T>, p: &Bound, head: &MimHead, patch_out: Var, targets: Var, grid: usize) -> Result<Var> {
    check_patch_out(g, patch_out, targets, grid)?;
    let pred = head.forward(g, p, patch_out)?;
    neg_cosine(g, pred, targets)
}

/// Encoder plus pretext head sharing one parameter store.
#[derive(Debug, Clone)]
pub struct MimModel<T> {
    pub encoder: Encoder,
    pub head: MimHead,
    pub params: ParamStore<T>,
}

impl<T: Scalar> MimModel<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Prng) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::init(cfg, &mut params, "encoder", rng)?;
        let head = MimHead::declare(&mut params, &mut Build::Fresh(rng), cfg)?;
        Ok(MimModel { encoder, head, params })
    }

    /// Binds to an existing store (e.g. loaded from a checkpoint).
    pub fn from_params(cfg: &EncoderConfig, mut params: ParamStore<T>) -> Result<Self> {
        let encoder = Encoder::attach(cfg, &mut params, "encoder")?;
        let head = MimHead::declare(&mut params, &mut Build::Attach, cfg)?;
        if params.len() != encoder.param_ids().len() + 4 {
            return Err(Error::Mismatch(format!("store holds {} tensors, model declares {}", params.len(), encoder.param_ids().len() + 4)));
        }
        Ok(MimModel { encoder, head, params })
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.encoder.cfg
    }

    /// Full pretext loss on bound parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        patches: Var,
        targets: Var,
        masks: &[MaskSet],
        mode: PretextMode,
        fwd: &mut Mode,
    ) -> Result<Var> {
        let grid = self.cfg().grid();
        let corrupt = match mode {
            PretextMode::RegressMasked => Some(masks),
            PretextMode::DistillAll => None,
        };
        let out = self.encoder.forward(g, p, patches, corrupt, fwd)?;
        let batch = g.value(out).rows_cols().0 / (grid + 1);
        let patch_out = g.embedding_lookup(out, &patch_rows(batch, grid))?;
        match mode {
            PretextMode::RegressMasked => mim_loss(g, p, &self.head, patch_out, targets, masks, grid),
            PretextMode::DistillAll => distill_loss(g, p, &self.head, patch_out, targets, grid),
        }
    }
}

/// Inputs of one pretraining step.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    /// `(batch · grid) × patch_dim`, normalized.
    pub patches: Tensor<f32>,
    pub targets: TeacherBatch,
    pub masks: Vec<MaskSet>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Global L2 norm over every present gradient.
pub fn global_grad_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads.iter().flatten().flat_map(|t| t.data()).map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Forward, loss, backward and one AdamW update.
pub fn pretrain_step(
    model: &mut MimModel<f32>,
    opt: &mut AdamW<f32>,
    batch: &PretrainBatch,
    mode: PretextMode,
    drop_path_rng: &mut Prng,
) -> Result<StepReport> {
    let cfg = *model.cfg();
    batch.targets.check(cfg.grid(), cfg.teacher_dim)?;
    let step = opt.step;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let x = g.constant(batch.patches.clone());
    let t = g.constant(batch.targets.features.clone());
    let mut fwd = Mode::Train { drop_path: cfg.drop_path_rate, rng: drop_path_rng };
    let loss = model.loss(&mut g, &p, x, t, &batch.masks, mode, &mut fwd)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss: value });
    }
    g.backward(loss)?;
    let grads = p.grads(&g);
    let grad_norm = global_grad_norm(&grads);
    let lr = opt.step(&mut model.params, &grads)?;
    Ok(StepReport { step, loss: value, grad_norm, lr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn neg_cosine_parallel_and_orthogonal() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, -3.0, 0.5]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 2], &[2.0, 4.0, -0.3, 0.05]).unwrap());
        let l = neg_cosine(&mut g, a, b).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-12);
        let c = g.constant(Tensor::from_f64(&[2, 2], &[-2.0, 1.0, 0.5, 3.0]).unwrap());
        let l = neg_cosine(&mut g, a, c).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn zero_target_row_contributes_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 2], &[3.0, 0.0, 0.0, 0.0]).unwrap());
        let l = neg_cosine(&mut g, a, b).unwrap();
        assert!((g.value(l).item() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_patch_distill_is_negative_cosine() {
        let cfg = EncoderConfig { image_size: 4, patch_size: 4, depth: 1, width: 8, mlp_width: 8, heads: 2, drop_path_rate: 0.0, teacher_dim: 3 };
        let m = MimModel::<f64>::new(&cfg, &mut Prng::new(0, 1)).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let h = g.constant(Tensor::from_f64(&[1, 8], &[0.1, -0.4, 0.3, 0.9, -1.0, 0.2, 0.0, 0.5]).unwrap());
        let tv = [0.3, -1.2, 0.7];
        let t = g.constant(Tensor::from_f64(&[1, 3], &tv).unwrap());
        let l = distill_loss(&mut g, &p, &m.head, h, t, 1).unwrap();
        let pred = m.head.forward(&mut g, &p, h).unwrap();
        let want = -cos(g.value(pred).data(), &tv);
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        let cfg = EncoderConfig { image_size: 8, patch_size: 4, depth: 1, width: 8, mlp_width: 8, heads: 2, drop_path_rate: 0.0, teacher_dim: 3 };
        let m = MimModel::<f64>::new(&cfg, &mut Prng::new(0, 1)).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let h = g.constant(Tensor::zeros(&[4, 8]));
        let t = g.constant(Tensor::zeros(&[4, 3]));
        let masks = [MaskSet::empty(2, 2)];
        assert!(mim_loss(&mut g, &p, &m.head, h, t, &masks, 4).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [PretextMode::RegressMasked, PretextMode::DistillAll] {
            assert_eq!(PretextMode::parse(m.name()).unwrap(), m);
        }
        assert!(PretextMode::parse("tokens").is_err());
    }
}
