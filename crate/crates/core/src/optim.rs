//! AdamW with decoupled weight decay, warmup + cosine schedule, and
//! layer-wise learning-rate decay.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Geometric per-layer decay in `(0, 1]`; 1 disables it.
    pub layer_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 1e-3,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.05,
            warmup_steps: 150,
            total_steps: 3000,
            layer_decay: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas must be in (0,1), got ({}, {})", self.beta1, self.beta2));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.min_lr <= self.peak_lr) || self.min_lr < 0.0 {
            return bad(format!("need 0 <= min_lr <= peak_lr, got {} and {}", self.min_lr, self.peak_lr));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return bad(format!("layer_decay must be in (0,1], got {}", self.layer_decay));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at `total_steps`.
/// Steps past the end stay at `min_lr`.
pub fn cosine_lr(step: u64, cfg: &OptimConfig) -> f64 {
    if step >= cfg.total_steps {
        return cfg.min_lr;
    }
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let decay_steps = (cfg.total_steps - cfg.warmup_steps) as f64;
    let tau = (step - cfg.warmup_steps) as f64 / decay_steps;
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * tau).cos())
}

/// Learning-rate multiplier `d^(depth + 1 - layer_index)`.
pub fn layer_scale(layer_index: usize, depth: usize, d: f64) -> Result<f64> {
    if !(d > 0.0 && d <= 1.0) {
        return Err(Error::InvalidArgument(format!("layer decay must be in (0,1], got {d}")));
    }
    if layer_index > depth + 1 {
        return Err(Error::OutOfRange { index: layer_index, limit: depth + 2 });
    }
    Ok(d.powi((depth + 1 - layer_index) as i32))
}

/// Tensors sharing a layer index and decay treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub layer_index: usize,
    pub wd_exempt: bool,
    pub params: Vec<ParamId>,
}

/// Partitions a store into optimizer groups; every tensor lands in exactly one.
pub fn param_groups<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamGroup> {
    let mut groups: Vec<ParamGroup> = Vec::new();
    for id in store.ids() {
        let m = store.meta(id);
        match groups.iter_mut().find(|g| g.layer_index == m.layer && g.wd_exempt == m.wd_exempt) {
            Some(g) => g.params.push(id),
            None => groups.push(ParamGroup { layer_index: m.layer, wd_exempt: m.wd_exempt, params: vec![id] }),
        }
    }
    groups
}

/// One bias-corrected Adam update followed by decoupled decay `p ← p − lr·wd·p`.
///
/// `t` is the 1-based step count; `decay` is false for exempt tensors.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &OptimConfig,
    decay: bool,
) {
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr_t = T::of(lr);
    let eps = T::of(cfg.eps);
    let shrink = T::of(lr * cfg.weight_decay);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        if decay {
            p[i] = p[i] - shrink * p[i];
        }
    }
}

/// AdamW state over a whole [`ParamStore`], kept in store order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    /// Transformer depth used for layer-wise decay.
    pub depth: usize,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<U: Scalar>(cfg: OptimConfig, depth: usize, store: &ParamStore<U>) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Ok(AdamW { cfg, depth, step: 0, m: zeros.clone(), v: zeros })
    }

    /// Scheduled base learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, &self.cfg)
    }

    /// Applies one update. Tensors with no gradient are still decayed.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Mismatch(format!("{} grads for {} params", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGrad(store.meta(id).name.clone()));
                }
            }
        }
        let base_lr = self.current_lr();
        self.step += 1;
        let t = self.step;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let meta = store.meta(id).clone();
            let lr = base_lr * layer_scale(meta.layer.min(self.depth + 1), self.depth, self.cfg.layer_decay)?;
            let p = store.get_mut(id).data_mut();
            let zero;
            let g = match &grads[i] {
                Some(g) => g.data(),
                None => {
                    zero = vec![T::zero(); p.len()];
                    &zero
                }
            };
            adamw_update(p, g, self.m[i].data_mut(), self.v[i].data_mut(), t, lr, &self.cfg, !meta.wd_exempt);
        }
        Ok(base_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OptimConfig {
        OptimConfig { peak_lr: 1.0, min_lr: 0.1, warmup_steps: 10, total_steps: 110, ..Default::default() }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        assert_eq!(cosine_lr(0, &c), 0.0);
        assert_eq!(cosine_lr(10, &c), 1.0);
        assert_eq!(cosine_lr(110, &c), 0.1);
        assert_eq!(cosine_lr(500, &c), 0.1);
        assert!((cosine_lr(60, &c) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotone_after_warmup() {
        let c = cfg();
        let lrs: Vec<f64> = (10..=110).map(|s| cosine_lr(s, &c)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!((cosine_lr(9, &c) - cosine_lr(10, &c)).abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn layer_scale_cases() {
        assert_eq!(layer_scale(0, 4, 1.0).unwrap(), 1.0);
        assert_eq!(layer_scale(5, 4, 0.3).unwrap(), 1.0);
        assert!((layer_scale(0, 4, 0.85).unwrap() - 0.85f64.powi(5)).abs() < 1e-15);
        assert!((layer_scale(0, 4, 0.85).unwrap() - 0.4437).abs() < 1e-4);
        assert!(layer_scale(0, 4, 0.0).is_err());
        assert!(layer_scale(0, 4, 1.5).is_err());
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let c = OptimConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.3f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &c, true);
        assert_eq!(p, vec![0.3, -2.0]);
    }

    #[test]
    fn pure_decay_closed_form() {
        let c = OptimConfig { weight_decay: 0.05, ..Default::default() };
        let mut p = vec![2.0f64, -4.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &c, true);
        assert_eq!(p, vec![2.0 * 0.995, -4.0 * 0.995]);
    }

    #[test]
    fn hand_evaluated_first_step() {
        // m̂ = 1, v̂ = 1 → p' = 1 − 0.1 · 1/(1 + 1e-8)
        let c = OptimConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.0, ..Default::default() };
        let mut p = vec![1.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &c, true);
        assert!((p[0] - 0.9).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn exempt_tensors_never_shrink_under_zero_grad() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full(&[3], 1.0), 1, false).unwrap();
        store.add("b", Tensor::full(&[3], 1.0), 1, true).unwrap();
        let cfg = OptimConfig { warmup_steps: 0, total_steps: 10, ..Default::default() };
        let mut opt = AdamW::<f32>::new(cfg, 1, &store).unwrap();
        for _ in 0..5 {
            opt.step(&mut store, &[None, None]).unwrap();
        }
        assert!(store.by_name("w").unwrap().data()[0] < 1.0);
        assert_eq!(store.by_name("b").unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn non_finite_grad_names_tensor() {
        let mut store = ParamStore::<f32>::new();
        store.add("enc.w", Tensor::full(&[2], 1.0), 1, false).unwrap();
        let mut opt = AdamW::<f32>::new(OptimConfig::default(), 1, &store).unwrap();
        let err = opt.step(&mut store, &[Some(Tensor::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap())]).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }

    #[test]
    fn groups_partition_store() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[1]), 0, true).unwrap();
        store.add("b", Tensor::zeros(&[1]), 1, false).unwrap();
        store.add("c", Tensor::zeros(&[1]), 1, false).unwrap();
        store.add("d", Tensor::zeros(&[1]), 1, true).unwrap();
        let groups = param_groups(&store);
        let mut all: Vec<usize> = groups.iter().flat_map(|g| g.params.iter().map(|p| p.index())).collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(groups.len(), 3);
    }
}
