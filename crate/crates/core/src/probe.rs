//! Linear probing on frozen encoder features and the robustness-gap metric.

use crate::autodiff::Graph;
use crate::data::{normalize, patch_batch, Dataset, Image};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimConfig};
use crate::params::ParamStore;
use crate::rng::{streams, Prng};
use crate::tensor::Tensor;
use crate::vit::{cls_rows, patch_rows, Encoder, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Cls,
    MeanPatch,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Cls => "cls",
            FeatureKind::MeanPatch => "mean-patch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(FeatureKind::Cls),
            "mean-patch" => Ok(FeatureKind::MeanPatch),
            _ => Err(Error::Config(format!("unknown feature kind {s:?} (expected cls or mean-patch)"))),
        }
    }
}

/// Normalized, patchified images of `ds[indices]` without augmentation.
pub fn eval_patches(ds: &Dataset, indices: &[usize], patch: usize) -> Result<Tensor<f32>> {
    let images: Vec<Image> = indices.iter().map(|&i| normalize(&Image::from_record(&ds.records[i], ds.image_size))).collect();
    patch_batch(&images, patch)
}

/// Frozen eval-mode features, one row per image.
pub fn extract_features(encoder: &Encoder, params: &ParamStore<f32>, ds: &Dataset, kind: FeatureKind) -> Result<Tensor<f32>> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot extract features from an empty dataset".into()));
    }
    if ds.image_size != encoder.cfg.image_size {
        return Err(Error::Mismatch(format!("dataset image size {} vs encoder {}", ds.image_size, encoder.cfg.image_size)));
    }
    const CHUNK: usize = 128;
    let grid = encoder.cfg.grid();
    let width = encoder.cfg.width;
    let mut out = Vec::with_capacity(ds.len() * width);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(eval_patches(ds, chunk, encoder.cfg.patch_size)?);
        let y = encoder.forward(&mut g, &p, x, None, &mut Mode::Eval)?;
        let f = match kind {
            FeatureKind::Cls => g.embedding_lookup(y, &cls_rows(chunk.len(), grid))?,
            FeatureKind::MeanPatch => {
                let pr = g.embedding_lookup(y, &patch_rows(chunk.len(), grid))?;
                g.group_mean_rows(pr, grid)?
            }
        };
        out.extend_from_slice(g.value(f).data());
    }
    Tensor::from_vec(&[ds.len(), width], out)
}

pub fn top1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 60, lr: 1e-2, weight_decay: 1e-4, batch_size: 256, seed: 0 }
    }
}

/// Trained linear classifier over standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    params: ParamStore<f32>,
    pub train_loss_curve: Vec<f64>,
}

fn standardize(x: &Tensor<f32>, mean: &[f32], inv_std: &[f32]) -> Tensor<f32> {
    let c = mean.len();
    let data = x.data().chunks(c).flat_map(|row| row.iter().zip(mean).zip(inv_std).map(|((v, m), s)| (v - m) * s)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

impl LinearProbe {
    pub fn logits(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(standardize(features, &self.mean, &self.inv_std));
        let y = g.linear(x, p.vars()[0], Some(p.vars()[1]))?;
        Ok(g.value(y).clone())
    }

    /// Argmax class per row; ties go to the lowest class id.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        let c = logits.rows_cols().1;
        Ok(logits.data().chunks(c).map(argmax).collect())
    }
}

pub(crate) fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a single linear layer with softmax cross-entropy and AdamW.
pub fn probe_train(features: &Tensor<f32>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    let (n, c) = features.rows_cols();
    if n == 0 {
        return Err(Error::InvalidArgument("probe needs at least one sample".into()));
    }
    if labels.len() != n {
        return Err(Error::Mismatch(format!("{} labels for {n} feature rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::OutOfRange { index: bad, limit: classes });
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("probe epochs and batch_size must be positive".into()));
    }
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for row in features.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / n as f64;
        }
    }
    for row in features.data().chunks(c) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v.sqrt() + 1e-6)) as f32).collect();
    let x = standardize(features, &mean, &inv_std);

    let mut params = ParamStore::new();
    params.add("probe.weight", Tensor::zeros(&[c, classes]), 0, false)?;
    params.add("probe.bias", Tensor::zeros(&[classes]), 0, true)?;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let ocfg = OptimConfig {
        peak_lr: cfg.lr,
        min_lr: 0.0,
        weight_decay: cfg.weight_decay,
        warmup_steps: 0,
        total_steps: total,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::<f32>::new(ocfg, 0, &params)?;
    let mut rng = Prng::new(cfg.seed, streams::PROBE);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * c);
            for &i in chunk {
                data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let xb = g.constant(Tensor::from_vec(&[chunk.len(), c], data)?);
            let logits = g.linear(xb, p.vars()[0], Some(p.vars()[1]))?;
            let loss = g.softmax_cross_entropy(logits, &ys)?;
            epoch_loss += g.value(loss).item() as f64 * chunk.len() as f64;
            g.backward(loss)?;
            opt.step(&mut params, &p.grads(&g))?;
        }
        curve.push(epoch_loss / n as f64);
    }
    Ok(LinearProbe { mean, inv_std, params, train_loss_curve: curve })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub top1: f64,
    pub train_loss_curve: Vec<f64>,
    pub feature_kind: FeatureKind,
}

/// Trains on one split and reports top-1 on the other.
pub fn probe_evaluate(
    train: (&Tensor<f32>, &[usize]),
    test: (&Tensor<f32>, &[usize]),
    classes: usize,
    kind: FeatureKind,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let probe = probe_train(train.0, train.1, classes, cfg)?;
    let preds = probe.predict(test.0)?;
    Ok(ProbeResult { top1: top1(&preds, test.1)?, train_loss_curve: probe.train_loss_curve, feature_kind: kind })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub original_acc: f64,
    pub variant_accs: Vec<f64>,
    pub avg: f64,
    pub delta: f64,
}

/// Mean accuracy over the variant list (taken verbatim) and its gap to the original.
pub fn robustness_gap(original_acc: f64, variant_accs: &[f64]) -> Result<RobustnessReport> {
    if variant_accs.is_empty() {
        return Err(Error::InvalidArgument("robustness gap needs at least one variant".into()));
    }
    let in_range = |a: f64| (0.0..=100.0).contains(&a);
    if !in_range(original_acc) || !variant_accs.iter().all(|&a| in_range(a)) {
        return Err(Error::InvalidArgument("accuracies must lie in [0, 100]".into()));
    }
    let avg = variant_accs.iter().sum::<f64>() / variant_accs.len() as f64;
    Ok(RobustnessReport { original_acc, variant_accs: variant_accs.to_vec(), avg, delta: original_acc - avg })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_perfect_and_errors() {
        assert_eq!(top1(&[0, 3, 2], &[0, 3, 2]).unwrap(), 1.0);
        assert_eq!(top1(&[0, 1], &[1, 1]).unwrap(), 0.5);
        assert!(top1(&[], &[]).is_err());
    }

    #[test]
    fn gap_of_equal_accuracies_is_zero() {
        let r = robustness_gap(70.0, &[70.0; 4]).unwrap();
        assert_eq!(r.delta, 0.0);
        assert!(robustness_gap(70.0, &[]).is_err());
    }

    #[test]
    fn probe_fits_separable_features() {
        let mut r = Prng::new(3, 0);
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let data: Vec<f32> = labels.iter().flat_map(|&l| (0..6).map(|j| if j == l { 3.0 } else { 0.0 }).collect::<Vec<_>>()).map(|v| v + 0.3 * r.normal() as f32).collect();
        let x = Tensor::from_vec(&[n, 6], data).unwrap();
        let cfg = ProbeConfig { epochs: 20, batch_size: 32, ..Default::default() };
        let res = probe_evaluate((&x, &labels), (&x, &labels), 4, FeatureKind::MeanPatch, &cfg).unwrap();
        assert!(res.top1 > 0.95, "{}", res.top1);
        assert!(res.train_loss_curve.last().unwrap() < &res.train_loss_curve[0]);
    }

    #[test]
    fn probe_rejects_bad_labels() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(probe_train(&x, &[0, 5], 4, &ProbeConfig::default()), Err(Error::OutOfRange { .. })));
    }
}
