//! Finite-difference checks of every differentiable graph op and of the full
//! pretext loss, all in f64.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{gradcheck_many, GradCheckReport};
use crate::masking::{generate, MaskParams};
use crate::mim::{MimModel, PretextMode};
use crate::params::Bound;
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::vit::{EncoderConfig, Mode};

pub const SUITE_H: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand(shape: &[usize], rng: &mut Prng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches")
}

/// Weighted sum against a fixed pseudo-random tensor, so every output element
/// gets a distinct upstream gradient.
fn probe_sum(g: &mut Graph<f64>, y: Var, salt: u64) -> Result<Var> {
    let mut r = Prng::new(0x5eed, salt);
    let w = rand(g.shape(y), &mut r);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y, 1)
        })),
        ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe_sum(g, y, 2)
        })),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            probe_sum(g, y, 3)
        })),
        ("add_row_bias", vec![vec![3, 4], vec![4]], Box::new(|g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            probe_sum(g, y, 4)
        })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            probe_sum(g, y, 5)
        })),
        ("scale", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7)?;
            probe_sum(g, y, 6)
        })),
        ("mul_scalar", vec![vec![2, 3], vec![1]], Box::new(|g, v| {
            let y = g.mul_scalar(v[0], v[1])?;
            probe_sum(g, y, 7)
        })),
        ("exp", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.exp(v[0])?;
            probe_sum(g, y, 8)
        })),
        ("transpose2d", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.transpose2d(v[0])?;
            probe_sum(g, y, 9)
        })),
        ("reshape", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.reshape(v[0], &[3, 2])?;
            probe_sum(g, y, 10)
        })),
        ("slice_rows", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            probe_sum(g, y, 11)
        })),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1], v[0]])?;
            probe_sum(g, y, 12)
        })),
        ("gelu", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.gelu(v[0])?;
            probe_sum(g, y, 13)
        })),
        ("softmax_lastdim", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.softmax_lastdim(v[0])?;
            probe_sum(g, y, 14)
        })),
        ("layernorm", vec![vec![3, 5], vec![5], vec![5]], Box::new(|g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
            probe_sum(g, y, 15)
        })),
        ("l2_normalize_lastdim", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.l2_normalize_lastdim(v[0], 1e-8)?;
            probe_sum(g, y, 16)
        })),
        ("mean", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.exp(v[0])?;
            g.mean(y)
        })),
        ("sum", vec![vec![2, 3]], Box::new(|g, v| {
            let y = g.exp(v[0])?;
            g.sum(y)
        })),
        ("sum_lastdim", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.sum_lastdim(v[0])?;
            probe_sum(g, y, 19)
        })),
        ("embedding_lookup", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.embedding_lookup(v[0], &[2, 0, 2, 3])?;
            probe_sum(g, y, 20)
        })),
        ("row_scale", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.row_scale(v[0], &[0.0, 1.25], 2)?;
            probe_sum(g, y, 21)
        })),
        ("group_mean_rows", vec![vec![6, 2]], Box::new(|g, v| {
            let y = g.group_mean_rows(v[0], 3)?;
            probe_sum(g, y, 22)
        })),
        ("attention", vec![vec![2 * 5, 3 * 8]], Box::new(|g, v| {
            let y = g.attention(v[0], 2, 5, 2)?;
            probe_sum(g, y, 23)
        })),
        ("softmax_cross_entropy", vec![vec![4, 5]], Box::new(|g, v| g.softmax_cross_entropy(v[0], &[1, 0, 4, 1]))),
        ("dropout", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.dropout(v[0], 0.3, &mut Prng::new(7, 7))?;
            probe_sum(g, y, 25)
        })),
        ("infonce", vec![vec![3, 4], vec![3, 4], vec![1]], Box::new(|g, v| crate::clip::infonce_graph(g, v[0], v[1], v[2]))),
    ]
}

/// Every op case, each over its own random inputs.
pub fn check_ops(h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let mut rng = Prng::new(0x9c, i as u64);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand(s, &mut rng)).collect();
        out.push(SuiteEntry { name, report: gradcheck_many(|g, v| f(g, v), &inputs, h, tol)? });
    }
    Ok(out)
}

/// Encoder of the full-loss check: depth 2, width 8, 2×2 patch grid.
pub fn suite_encoder() -> EncoderConfig {
    EncoderConfig { image_size: 8, patch_size: 4, depth: 2, width: 8, mlp_width: 16, heads: 2, drop_path_rate: 0.1, teacher_dim: 4 }
}

/// The regress-masked loss with drop path active, differentiated with respect
/// to every model parameter at once.
pub fn check_mim_loss(h: f64, tol: f64) -> Result<SuiteEntry> {
    let cfg = suite_encoder();
    let model = MimModel::<f64>::new(&cfg, &mut Prng::new(11, 1))?;
    let batch = 3;
    let mut rng = Prng::new(11, 2);
    let patches = rand(&[batch * cfg.grid(), cfg.patch_dim()], &mut rng);
    let targets = rand(&[batch * cfg.grid(), cfg.teacher_dim], &mut rng);
    let params = MaskParams { ratio: 0.5, min_block: 1, aspect: 0.3 };
    let masks = (0..batch).map(|_| generate(2, 2, &params, &mut rng)).collect::<Result<Vec<_>>>()?;
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck_many(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = g.constant(patches.clone());
            let t = g.constant(targets.clone());
            let mut dp = Prng::new(11, 3);
            model.loss(g, &p, x, t, &masks, PretextMode::RegressMasked, &mut Mode::Train { drop_path: cfg.drop_path_rate, rng: &mut dp })
        },
        &inputs,
        h,
        tol,
    )?;
    Ok(SuiteEntry { name: "mim_loss", report })
}

/// Op checks followed by the full-loss check.
pub fn run_suite(h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut all = check_ops(h, tol)?;
    all.push(check_mim_loss(h, tol)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for e in check_ops(SUITE_H, SUITE_TOL).unwrap() {
            assert!(e.report.passed, "{}: rel err {:e} at {:?}", e.name, e.report.max_rel_err, e.report.worst);
        }
    }

    #[test]
    fn full_pretext_loss_passes() {
        let e = check_mim_loss(SUITE_H, SUITE_TOL).unwrap();
        assert!(e.report.passed, "rel err {:e} at {:?}", e.report.max_rel_err, e.report.worst);
        assert!(e.report.checked > 1000);
    }
}
