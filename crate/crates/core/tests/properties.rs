use mimforge::autodiff::Graph;
use mimforge::masking::{generate, target_count, MaskParams, MaskSet};
use mimforge::mim::{mim_loss, MimModel};
use mimforge::params::ParamStore;
use mimforge::rng::Prng;
use mimforge::tensor::Tensor;
use mimforge::vit::EncoderConfig;
use proptest::prelude::*;

fn small() -> EncoderConfig {
    EncoderConfig { image_size: 8, patch_size: 2, depth: 1, width: 6, mlp_width: 8, heads: 2, drop_path_rate: 0.0, teacher_dim: 5 }
}

fn loss_of(model: &MimModel<f64>, h: &[f64], t: &[f64], masks: &[MaskSet]) -> f64 {
    let cfg = model.cfg();
    let rows = masks.len() * cfg.grid();
    let mut g = Graph::<f64>::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(Tensor::from_vec(&[rows, cfg.width], h.to_vec()).unwrap());
    let y = g.constant(Tensor::from_vec(&[rows, cfg.teacher_dim], t.to_vec()).unwrap());
    let l = mim_loss(&mut g, &p, &model.head, x, y, masks, cfg.grid()).unwrap();
    g.value(l).item()
}

fn instance(seed: u64, batch: usize, ratio: f64) -> (MimModel<f64>, Vec<f64>, Vec<f64>, Vec<MaskSet>) {
    let cfg = small();
    let model = MimModel::<f64>::new(&cfg, &mut Prng::new(seed, 1)).unwrap();
    let mut r = Prng::new(seed, 2);
    let rows = batch * cfg.grid();
    let h = (0..rows * cfg.width).map(|_| 3.0 * r.normal()).collect();
    let t = (0..rows * cfg.teacher_dim).map(|_| r.normal()).collect();
    let params = MaskParams { ratio, min_block: 2, aspect: 0.3 };
    let masks = (0..batch).map(|_| generate(4, 4, &params, &mut r).unwrap()).collect();
    (model, h, t, masks)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_count_is_exact(seed in any::<u64>(), gh in 1usize..20, gw in 1usize..20, ratio in 0.0f64..=1.0, min_block in 1usize..40, aspect in 0.05f64..=1.0) {
        let m = generate(gh, gw, &MaskParams { ratio, min_block, aspect }, &mut Prng::new(seed, 2)).unwrap();
        prop_assert_eq!(m.len(), target_count(ratio, gh * gw));
        prop_assert_eq!(m.reconstruct(), m.indices.clone());
        prop_assert!(m.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn loss_stays_in_bounds(seed in any::<u64>(), batch in 1usize..4, ratio in 0.1f64..=1.0) {
        let (model, h, t, masks) = instance(seed, batch, ratio);
        let l = loss_of(&model, &h, &t, &masks);
        prop_assert!((-1.0..=1.0).contains(&l), "{}", l);
    }

    #[test]
    fn positive_target_scale_is_irrelevant(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let (model, h, t, masks) = instance(seed, 2, 0.4);
        let scaled: Vec<f64> = t.iter().map(|v| v * c).collect();
        prop_assert!((loss_of(&model, &h, &t, &masks) - loss_of(&model, &h, &scaled, &masks)).abs() < 1e-6);
    }

    #[test]
    fn unmasked_targets_never_matter(seed in any::<u64>(), noise in -10.0f64..10.0) {
        let (model, h, t, masks) = instance(seed, 2, 0.4);
        let td = small().teacher_dim;
        let grid = small().grid();
        let mut moved = t.clone();
        for (b, m) in masks.iter().enumerate() {
            for cell in (0..grid).filter(|c| !m.contains(*c)) {
                for d in 0..td {
                    moved[(b * grid + cell) * td + d] += noise * (1 + d) as f64;
                }
            }
        }
        prop_assert_eq!(loss_of(&model, &h, &t, &masks), loss_of(&model, &h, &moved, &masks));
    }

    #[test]
    fn cast_round_trip_is_exact(seed in any::<u64>()) {
        let store: ParamStore<f32> = MimModel::<f32>::new(&small(), &mut Prng::new(seed, 1)).unwrap().params;
        let back: ParamStore<f32> = store.cast::<f64>().cast::<f32>();
        prop_assert_eq!(store.fingerprint(), back.fingerprint());
    }
}
