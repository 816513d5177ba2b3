//! Vanilla ViT encoder with `[MASK]`-token corruption.
//!
//! Pre-norm blocks (LN → attention → residual, LN → MLP → residual), learned
//! absolute position embeddings covering the cls slot, no relative position
//! bias and no layer-scale. Token activations are kept as a
//! `(batch · (grid + 1)) × width` matrix; row `b · (grid + 1)` is image `b`'s
//! cls token and the following `grid` rows are its patches in row-major order.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::params::{trunc_normal, xavier_uniform, Bound, ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub heads: usize,
    pub drop_path_rate: f64,
    /// Target feature dimension of the pretext head.
    pub teacher_dim: usize,
}

impl EncoderConfig {
    /// The 1.0B-parameter giant configuration (patch 14, 40 × 1408, MLP 6144, 16 heads).
    pub fn eva_giant() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 14,
            depth: 40,
            width: 1408,
            mlp_width: 6144,
            heads: 16,
            drop_path_rate: 0.1,
            teacher_dim: 768,
        }
    }

    /// Desk-scale recipe used by the toy experiments.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            depth: 4,
            width: 64,
            mlp_width: 256,
            heads: 4,
            drop_path_rate: 0.1,
            teacher_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image_size {} must be a positive multiple of patch_size {}", self.image_size, self.patch_size));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} must be divisible by heads {}", self.width, self.heads));
        }
        if self.mlp_width == 0 || self.teacher_dim == 0 {
            return bad("mlp_width and teacher_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate must be in [0,1), got {}", self.drop_path_rate));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn tokens(&self) -> usize {
        self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Exact number of encoder parameters (pretext head excluded).
pub fn count_parameters(cfg: &EncoderConfig) -> u64 {
    let d = cfg.width as u64;
    let m = cfg.mlp_width as u64;
    let patch = cfg.patch_dim() as u64 * d + d;
    let pos = cfg.tokens() as u64 * d;
    let tokens = 2 * d;
    let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d);
    let final_norm = 2 * d;
    patch + pos + tokens + cfg.depth as u64 * block + final_norm
}

/// Training or evaluation behaviour of a forward pass.
pub enum Mode<'a> {
    Eval,
    Train { drop_path: f64, rng: &'a mut Prng },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Residual update `residual + block_out`, with per-sample stochastic depth in training.
///
/// In training each sample's contribution is dropped with probability `rate`
/// and otherwise scaled by `1/(1-rate)`; rows are grouped by sample in equal runs.
pub fn stochastic_depth<T: Scalar>(
    g: &mut Graph<T>,
    block_out: Var,
    residual: Var,
    rate: f64,
    rng: &mut Prng,
    training: bool,
    batch: usize,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("stochastic depth rate must be in [0,1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return g.add(residual, block_out);
    }
    let rows = g.value(block_out).rows_cols().0;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("stochastic_depth", g.shape(block_out), &[batch]));
    }
    let keep = 1.0 / (1.0 - rate);
    let factors: Vec<f64> = (0..batch).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    let scaled = g.row_scale(block_out, &factors, rows / batch)?;
    g.add(residual, scaled)
}

// ── parameter declaration ────────────────────────────────────────────

pub(crate) enum Init {
    Zeros,
    Ones,
    TruncNormal,
    Xavier,
}

/// Either creates fresh tensors or binds to ones already in the store.
pub(crate) enum Build<'a> {
    Fresh(&'a mut Prng),
    Attach,
}

pub(crate) fn declare<T: Scalar>(
    store: &mut ParamStore<T>,
    build: &mut Build,
    name: String,
    shape: &[usize],
    init: Init,
    layer: usize,
    wd_exempt: bool,
) -> Result<ParamId> {
    match build {
        Build::Fresh(rng) => {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::TruncNormal => trunc_normal(shape, 0.02, rng),
                Init::Xavier => xavier_uniform(shape[0], shape[1], rng),
            };
            store.add(&name, t, layer, wd_exempt)
        }
        Build::Attach => {
            let id = store.id(&name).ok_or_else(|| Error::Tensor { name: name.clone(), reason: "missing".into() })?;
            if store.get(id).shape() != shape {
                return Err(Error::Tensor {
                    name,
                    reason: format!("shape {:?}, expected {:?}", store.get(id).shape(), shape),
                });
            }
            Ok(id)
        }
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: (ParamId, ParamId),
    pub qkv: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl Block {
    pub(crate) fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        build: &mut Build,
        prefix: &str,
        width: usize,
        mlp: usize,
        layer: usize,
    ) -> Result<Self> {
        let mut d = |suffix: &str, shape: &[usize], init: Init, exempt: bool| {
            declare(store, build, format!("{prefix}.{suffix}"), shape, init, layer, exempt)
        };
        Ok(Block {
            norm1: (d("norm1.weight", &[width], Init::Ones, true)?, d("norm1.bias", &[width], Init::Zeros, true)?),
            qkv: (d("attn.qkv.weight", &[width, 3 * width], Init::Xavier, false)?, d("attn.qkv.bias", &[3 * width], Init::Zeros, true)?),
            proj: (d("attn.proj.weight", &[width, width], Init::Xavier, false)?, d("attn.proj.bias", &[width], Init::Zeros, true)?),
            norm2: (d("norm2.weight", &[width], Init::Ones, true)?, d("norm2.bias", &[width], Init::Zeros, true)?),
            fc1: (d("mlp.fc1.weight", &[width, mlp], Init::Xavier, false)?, d("mlp.fc1.bias", &[mlp], Init::Zeros, true)?),
            fc2: (d("mlp.fc2.weight", &[mlp, width], Init::Xavier, false)?, d("mlp.fc2.bias", &[width], Init::Zeros, true)?),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.norm1, self.qkv, self.proj, self.norm2, self.fc1, self.fc2].iter().flat_map(|&(a, b)| [a, b]).collect()
    }

    /// `x` is `(batch · tokens) × width`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let (rate, training) = match mode {
            Mode::Eval => (0.0, false),
            Mode::Train { drop_path, .. } => (*drop_path, true),
        };
        let mut scratch = Prng::new(0, 0);
        let h = g.layernorm(x, p[self.norm1.0], p[self.norm1.1], LN_EPS)?;
        let qkv = g.linear(h, p[self.qkv.0], Some(p[self.qkv.1]))?;
        let a = g.attention(qkv, batch, tokens, heads)?;
        let a = g.linear(a, p[self.proj.0], Some(p[self.proj.1]))?;
        let rng = match mode {
            Mode::Train { rng, .. } => &mut **rng,
            Mode::Eval => &mut scratch,
        };
        let x = stochastic_depth(g, a, x, rate, rng, training, batch)?;
        let h = g.layernorm(x, p[self.norm2.0], p[self.norm2.1], LN_EPS)?;
        let h = g.linear(h, p[self.fc1.0], Some(p[self.fc1.1]))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, p[self.fc2.0], Some(p[self.fc2.1]))?;
        stochastic_depth(g, h, x, rate, rng, training, batch)
    }
}

/// Parameter layout of a ViT encoder inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
    pub patch_embed: (ParamId, ParamId),
    pub pos_embed: ParamId,
    pub cls_token: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: (ParamId, ParamId),
}

impl Encoder {
    fn declare<T: Scalar>(cfg: &EncoderConfig, store: &mut ParamStore<T>, prefix: &str, mut build: Build) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let top = cfg.depth + 1;
        let patch_embed = (
            declare(store, &mut build, format!("{prefix}.patch_embed.weight"), &[cfg.patch_dim(), d], Init::Xavier, 0, false)?,
            declare(store, &mut build, format!("{prefix}.patch_embed.bias"), &[d], Init::Zeros, 0, true)?,
        );
        let pos_embed = declare(store, &mut build, format!("{prefix}.pos_embed"), &[cfg.tokens(), d], Init::TruncNormal, 0, true)?;
        let cls_token = declare(store, &mut build, format!("{prefix}.cls_token"), &[1, d], Init::TruncNormal, 0, true)?;
        let mask_token = declare(store, &mut build, format!("{prefix}.mask_token"), &[1, d], Init::TruncNormal, 0, true)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::declare(store, &mut build, &format!("{prefix}.blocks.{i}"), d, cfg.mlp_width, i + 1))
            .collect::<Result<Vec<_>>>()?;
        let norm = (
            declare(store, &mut build, format!("{prefix}.norm.weight"), &[d], Init::Ones, top, true)?,
            declare(store, &mut build, format!("{prefix}.norm.bias"), &[d], Init::Zeros, top, true)?,
        );
        Ok(Encoder { cfg: *cfg, prefix: prefix.to_string(), patch_embed, pos_embed, cls_token, mask_token, blocks, norm })
    }

    /// Registers freshly initialized encoder tensors under `prefix`.
    pub fn init<T: Scalar>(cfg: &EncoderConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut Prng) -> Result<Self> {
        Self::declare(cfg, store, prefix, Build::Fresh(rng))
    }

    /// Binds to tensors already present in `store`, checking every name and shape.
    pub fn attach<T: Scalar>(cfg: &EncoderConfig, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        Self::declare(cfg, store, prefix, Build::Attach)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_embed.0, self.patch_embed.1, self.pos_embed, self.cls_token, self.mask_token];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.extend([self.norm.0, self.norm.1]);
        ids
    }

    /// Embeds patches, substitutes `[MASK]` at masked positions, adds position
    /// embeddings, runs every block and the final norm.
    ///
    /// `patches` is `(batch · grid) × patch_dim`. Masked patch tokens are replaced
    /// before the position embedding is added, so masked slots keep their position.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        patches: Var,
        masks: Option<&[MaskSet]>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let grid = cfg.grid();
        let (rows, cols) = g.value(patches).rows_cols();
        if cols != cfg.patch_dim() || rows % grid != 0 || rows == 0 {
            return Err(Error::dim("encoder input", g.shape(patches), &[grid, cfg.patch_dim()]));
        }
        let batch = rows / grid;
        if let Some(ms) = masks {
            if ms.len() != batch {
                return Err(Error::Mismatch(format!("{} masks for a batch of {batch}", ms.len())));
            }
            for m in ms {
                if m.cells() != grid {
                    return Err(Error::Mismatch(format!("mask grid {}x{} vs encoder grid {grid}", m.grid_h, m.grid_w)));
                }
                if let Some(&bad) = m.indices.iter().find(|&&i| i >= grid) {
                    return Err(Error::OutOfRange { index: bad, limit: grid });
                }
            }
        }

        let emb = g.linear(patches, p[self.patch_embed.0], Some(p[self.patch_embed.1]))?;
        let pool = g.concat_rows(&[p[self.cls_token], p[self.mask_token], emb])?;
        let tokens = cfg.tokens();
        let mut ids = Vec::with_capacity(batch * tokens);
        let mut pos_ids = Vec::with_capacity(batch * tokens);
        for b in 0..batch {
            ids.push(0);
            let mask = masks.map(|ms| &ms[b]);
            for gi in 0..grid {
                let masked = mask.is_some_and(|m| m.contains(gi));
                ids.push(if masked { 1 } else { 2 + b * grid + gi });
            }
            pos_ids.extend(0..tokens);
        }
        let x = g.embedding_lookup(pool, &ids)?;
        let pos = g.embedding_lookup(p[self.pos_embed], &pos_ids)?;
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, p, x, batch, tokens, cfg.heads, mode)?;
        }
        g.layernorm(x, p[self.norm.0], p[self.norm.1], LN_EPS)
    }
}

/// Row indices of patch tokens (cls rows excluded) in encoder output.
pub fn patch_rows(batch: usize, grid: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| (0..grid).map(move |gi| b * (grid + 1) + 1 + gi)).collect()
}

/// Row indices of cls tokens in encoder output.
pub fn cls_rows(batch: usize, grid: usize) -> Vec<usize> {
    (0..batch).map(|b| b * (grid + 1)).collect()
}

/// A standalone encoder with its own parameters.
#[derive(Debug, Clone)]
pub struct EncoderState<T> {
    pub encoder: Encoder,
    pub params: ParamStore<T>,
}

impl<T: Scalar> EncoderState<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut Prng) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::init(cfg, &mut params, "encoder", rng)?;
        Ok(EncoderState { encoder, params })
    }

    /// Eval-mode forward of already-patchified images; returns the output rows.
    pub fn forward_eval(&self, patches: Tensor<T>, masks: Option<&[MaskSet]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(patches);
        let out = self.encoder.forward(&mut g, &p, x, masks, &mut Mode::Eval)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig { image_size: 8, patch_size: 4, depth: 2, width: 8, mlp_width: 16, heads: 2, drop_path_rate: 0.0, teacher_dim: 4 }
    }

    fn patches(cfg: &EncoderConfig, batch: usize, seed: u64) -> Tensor<f64> {
        let mut r = Prng::new(seed, 0);
        let n = batch * cfg.grid() * cfg.patch_dim();
        Tensor::from_vec(&[batch * cfg.grid(), cfg.patch_dim()], (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn toy_count_matches_hand_sum() {
        // patch 48*64+64, pos 65*64, tokens 2*64, 4 blocks of 49984, final norm 128
        assert_eq!(count_parameters(&EncoderConfig::toy()), 3136 + 4160 + 128 + 4 * 49_984 + 128);
        assert_eq!(count_parameters(&EncoderConfig::toy()), 207_488);
    }

    #[test]
    fn depth_zero_counts_embeddings_only() {
        let cfg = EncoderConfig { depth: 0, ..EncoderConfig::toy() };
        assert_eq!(count_parameters(&cfg), 3136 + 4160 + 128 + 128);
    }

    #[test]
    fn store_matches_count() {
        let cfg = EncoderConfig::toy();
        let s = EncoderState::<f32>::new(&cfg, &mut Prng::new(0, 1)).unwrap();
        assert_eq!(s.params.numel() as u64, count_parameters(&cfg));
        assert_eq!(s.encoder.param_ids().len(), s.params.len());
        assert!(s.params.all_finite());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(EncoderConfig { image_size: 30, ..EncoderConfig::toy() }.validate().is_err());
        assert!(EncoderConfig { heads: 3, ..EncoderConfig::toy() }.validate().is_err());
    }

    #[test]
    fn empty_mask_matches_unmasked_forward_bitwise() {
        let cfg = tiny();
        let s = EncoderState::<f64>::new(&cfg, &mut Prng::new(1, 1)).unwrap();
        let x = patches(&cfg, 2, 3);
        let a = s.forward_eval(x.clone(), None).unwrap();
        let masks = vec![MaskSet::empty(2, 2), MaskSet::empty(2, 2)];
        let b = s.forward_eval(x, Some(&masks)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2 * 5, 8]);
    }

    #[test]
    fn full_mask_ignores_pixels() {
        let cfg = tiny();
        let s = EncoderState::<f64>::new(&cfg, &mut Prng::new(1, 1)).unwrap();
        let masks = vec![MaskSet::full(2, 2)];
        let a = s.forward_eval(patches(&cfg, 1, 3), Some(&masks)).unwrap();
        let b = s.forward_eval(patches(&cfg, 1, 4), Some(&masks)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_errors() {
        let cfg = tiny();
        let s = EncoderState::<f64>::new(&cfg, &mut Prng::new(1, 1)).unwrap();
        let one = vec![MaskSet::empty(2, 2)];
        assert!(matches!(s.forward_eval(patches(&cfg, 2, 0), Some(&one)), Err(Error::Mismatch(_))));
        let bad = vec![MaskSet { indices: vec![7], ..MaskSet::empty(2, 2) }];
        assert!(matches!(s.forward_eval(patches(&cfg, 1, 0), Some(&bad)), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn stochastic_depth_rate_zero_and_eval_are_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let r = g.constant(Tensor::full(&[4, 2], 0.5));
        let mut rng = Prng::new(0, 0);
        let plain = g.add(r, a).unwrap();
        let z = stochastic_depth(&mut g, a, r, 0.0, &mut rng, true, 2).unwrap();
        let e = stochastic_depth(&mut g, a, r, 0.7, &mut rng, false, 2).unwrap();
        assert_eq!(g.value(z), g.value(plain));
        assert_eq!(g.value(e), g.value(plain));
        assert!(stochastic_depth(&mut g, a, r, 1.0, &mut rng, true, 2).is_err());
    }

    #[test]
    fn stochastic_depth_drop_frequency() {
        let n = 10_000;
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[n, 1], 1.0));
        let r = g.constant(Tensor::zeros(&[n, 1]));
        let mut rng = Prng::new(11, 4);
        let y = stochastic_depth(&mut g, a, r, 0.5, &mut rng, true, n).unwrap();
        let dropped = g.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((dropped - 0.5).abs() <= 0.02, "{dropped}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
