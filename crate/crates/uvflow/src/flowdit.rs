//! Conditional rectified-flow transformer over portrait and texture tokens.
//!
//! The backbone is a stack of double-stream blocks (separate weights per
//! stream, joint attention over the concatenated rows) followed by
//! single-stream blocks (one weight set over the merged rows). Token rows are
//! ordered condition first, image second. Every block exposes one hook
//! tensor: the concatenated multi-head attention output right before the
//! output projection. An [`InjectionSpec`] can scale or replace that tensor
//! per layer, and a [`FeatureCache`] records it for replay in another pass.
//!
//! Images enter and leave as channel-major [3, H, W] arrays. Pixel data in
//! [0, 1] is mapped to [-1, 1] model space inside the loss; samplers work in
//! model space and rescale at the end.

use crate::ckpt::{Checkpoint, TensorData, MAGIC_DIT};
use crate::error::{Result, UvError};
use crate::nn::{cosine_lr, Adam, GradBuf, LayerNorm, Linear, ParamStore};
use crate::tensor::{no_grad, Scalar, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

pub const CHANNELS: usize = 3;
/// Hidden width of every block MLP relative to the token width.
const MLP_RATIO: usize = 2;
/// Sinusoid argument scale; spreads t in [0, 1] over distinguishable phases.
const TIME_SCALE: f64 = 1000.0;
/// Init scale for all randomly initialized projections.
const INIT_STD: f64 = 0.02;

/// RNG streams: init, per-step data draws, truncation branch decisions.
/// Branch decisions live on their own stream so enabling truncation with
/// p = 0 consumes the data stream exactly like plain training.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_BRANCH: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub n_double: usize,
    pub n_single: usize,
    /// Layer counts closing semantic groups 1 and 2 in the unified layer
    /// order; group 3 always ends at the last layer. Equal boundaries
    /// collapse group 2 onto group 1.
    pub group_boundaries: (usize, usize),
    pub time_dim: usize,
    pub cond_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 4,
            token_dim: 128,
            heads: 4,
            n_double: 4,
            n_single: 8,
            group_boundaries: (4, 8),
            time_dim: 64,
            cond_tokens: 64,
        }
    }
}

impl ModelConfig {
    pub fn n_layers(&self) -> usize {
        self.n_double + self.n_single
    }

    pub fn img_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn img_tokens(&self) -> usize {
        self.img_grid() * self.img_grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn cond_grid(&self) -> usize {
        (self.cond_tokens as f64).sqrt().round() as usize
    }

    pub fn cond_patch(&self) -> usize {
        self.image_size / self.cond_grid().max(1)
    }

    pub fn cond_patch_dim(&self) -> usize {
        CHANNELS * self.cond_patch() * self.cond_patch()
    }

    /// Rows in the joint attention: condition tokens first, then image tokens.
    pub fn n_tokens(&self) -> usize {
        self.cond_tokens + self.img_tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }

    /// Number of layers executed for a truncated decode of the given group.
    pub fn group_end(&self, group_k: usize) -> Result<usize> {
        match group_k {
            1 => Ok(self.group_boundaries.0),
            2 => Ok(self.group_boundaries.1),
            3 => Ok(self.n_layers()),
            _ => Err(UvError::validation("group index", format!("{group_k} is not in 1..=3"))),
        }
    }

    /// Unified indices of the single-stream layers.
    pub fn single_layers(&self) -> Vec<usize> {
        (self.n_double..self.n_layers()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(UvError::validation("model config", why));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return fail(format!("token_dim {} must divide into {} heads", self.token_dim, self.heads));
        }
        if self.token_dim % 4 != 0 {
            return fail("token_dim must be divisible by 4 for the 2-d positional code".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return fail(format!("time_dim {} must be positive and even", self.time_dim));
        }
        if self.n_layers() == 0 {
            return fail("need at least one block".into());
        }
        let (b1, b2) = self.group_boundaries;
        if !(b1 > 0 && b1 <= b2 && b2 < self.n_layers()) {
            return fail(format!(
                "group_boundaries {:?} must satisfy 0 < b1 <= b2 < {}",
                self.group_boundaries,
                self.n_layers()
            ));
        }
        let g = self.cond_grid();
        if g == 0 || g * g != self.cond_tokens || self.image_size % g != 0 {
            return fail(format!(
                "cond_tokens {} must be a square number whose side divides image_size {}",
                self.cond_tokens, self.image_size
            ));
        }
        Ok(())
    }
}

/// Flat gather table mapping a [3, size, size] image to [n_tokens, patch_dim]
/// tokens. Token k covers the pixel block (k mod grid, k div grid); features
/// are laid out channel-major, then row-major within the patch.
fn patch_table(size: usize, patch: usize) -> Arc<Vec<u32>> {
    let grid = size / patch;
    let pd = CHANNELS * patch * patch;
    let mut table = Vec::with_capacity(grid * grid * pd);
    for k in 0..grid * grid {
        let (gx, gy) = (k % grid, k / grid);
        for c in 0..CHANNELS {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (x, y) = (gx * patch + dx, gy * patch + dy);
                    table.push((c * size * size + y * size + x) as u32);
                }
            }
        }
    }
    Arc::new(table)
}

/// Inverse of [`patch_table`]: image pixel index -> flat token-feature index.
fn unpatch_table(size: usize, patch: usize) -> Arc<Vec<u32>> {
    let grid = size / patch;
    let pd = CHANNELS * patch * patch;
    let mut table = vec![0u32; CHANNELS * size * size];
    for c in 0..CHANNELS {
        for y in 0..size {
            for x in 0..size {
                let k = (y / patch) * grid + x / patch;
                let f = c * patch * patch + (y % patch) * patch + (x % patch);
                table[c * size * size + y * size + x] = (k * pd + f) as u32;
            }
        }
    }
    Arc::new(table)
}

/// Fixed 2-d sin-cos positional code: half the width encodes the x grid
/// coordinate, half the y, in interleaved (sin, cos) pairs.
fn sincos_2d<S: Scalar>(grid: usize, dim: usize) -> ArrayD<S> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = ArrayD::zeros(IxDyn(&[grid * grid, dim]));
    for k in 0..grid * grid {
        let (gx, gy) = ((k % grid) as f64, (k / grid) as f64);
        for i in 0..quarter {
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
            out[[k, 2 * i]] = S::from_f64((gx * omega).sin());
            out[[k, 2 * i + 1]] = S::from_f64((gx * omega).cos());
            out[[k, half + 2 * i]] = S::from_f64((gy * omega).sin());
            out[[k, half + 2 * i + 1]] = S::from_f64((gy * omega).cos());
        }
    }
    out
}

/// Sinusoidal embedding of a scalar time, shape [1, dim].
fn time_embedding<S: Scalar>(t: f64, dim: usize) -> ArrayD<S> {
    let mut out = ArrayD::zeros(IxDyn(&[1, dim]));
    for i in 0..dim / 2 {
        let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t * TIME_SCALE * omega;
        out[[0, 2 * i]] = S::from_f64(arg.sin());
        out[[0, 2 * i + 1]] = S::from_f64(arg.cos());
    }
    out
}

/// Attention outputs captured from one forward pass, indexed by layer.
#[derive(Clone)]
pub struct FeatureCache<S: Scalar> {
    layers: Vec<Option<Arc<ArrayD<S>>>>,
}

impl<S: Scalar> FeatureCache<S> {
    pub fn empty(n_layers: usize) -> Self {
        FeatureCache { layers: vec![None; n_layers] }
    }

    pub fn keys(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.layers[l].is_some()).collect()
    }

    pub fn get(&self, layer: usize) -> Option<&ArrayD<S>> {
        self.layers.get(layer).and_then(|s| s.as_deref())
    }

    fn get_arc(&self, layer: usize) -> Option<Arc<ArrayD<S>>> {
        self.layers.get(layer).and_then(|s| s.clone())
    }

    fn put(&mut self, layer: usize, data: Arc<ArrayD<S>>) {
        self.layers[layer] = Some(data);
    }
}

/// Per-layer directive for the attention hook.
#[derive(Clone)]
pub enum LayerRule {
    Passthrough,
    /// Substitute the cached tensor for this layer; with a mask, only the
    /// masked token rows are substituted.
    Replace { mask: Option<Arc<Vec<bool>>> },
    /// Multiply the hook tensor by eps (or, in logit mode, the pre-softmax
    /// attention logits of the masked query rows).
    Scale { eps: f64, mask: Option<Arc<Vec<bool>>> },
}

/// What to do at each layer's attention hook during one forward pass.
#[derive(Clone)]
pub struct InjectionSpec<S: Scalar> {
    rules: Vec<LayerRule>,
    cache: Option<Arc<FeatureCache<S>>>,
    logit_mode: bool,
}

impl<S: Scalar> InjectionSpec<S> {
    pub fn passthrough(n_layers: usize) -> Self {
        InjectionSpec {
            rules: vec![LayerRule::Passthrough; n_layers],
            cache: None,
            logit_mode: false,
        }
    }

    pub fn set_scale(&mut self, layer: usize, eps: f64, mask: Option<Vec<bool>>) -> Result<()> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(UvError::validation("injection eps", format!("{eps} must be finite and >= 0")));
        }
        self.check_layer(layer)?;
        self.rules[layer] = LayerRule::Scale { eps, mask: mask.map(Arc::new) };
        Ok(())
    }

    pub fn set_replace(&mut self, layer: usize, mask: Option<Vec<bool>>) -> Result<()> {
        self.check_layer(layer)?;
        self.rules[layer] = LayerRule::Replace { mask: mask.map(Arc::new) };
        Ok(())
    }

    pub fn attach_cache(&mut self, cache: Arc<FeatureCache<S>>) {
        self.cache = Some(cache);
    }

    /// Switch eps-scaling from the attention output to the pre-softmax logits.
    pub fn set_logit_mode(&mut self, on: bool) {
        self.logit_mode = on;
    }

    /// Scale rules for the given layers, shared cache-free spec.
    pub fn scaled(n_layers: usize, layers: &[usize], eps: f64) -> Result<Self> {
        let mut spec = Self::passthrough(n_layers);
        for &l in layers {
            spec.set_scale(l, eps, None)?;
        }
        Ok(spec)
    }

    /// Replace rules for the given layers, sourcing from `cache`.
    pub fn replacing(n_layers: usize, layers: &[usize], cache: Arc<FeatureCache<S>>) -> Result<Self> {
        let mut spec = Self::passthrough(n_layers);
        for &l in layers {
            spec.set_replace(l, None)?;
        }
        spec.attach_cache(cache);
        Ok(spec)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.rules.len() {
            return Err(UvError::validation(
                "injection layer",
                format!("{layer} out of range for {} layers", self.rules.len()),
            ));
        }
        Ok(())
    }

    fn rule(&self, layer: usize) -> &LayerRule {
        &self.rules[layer]
    }

    fn cache_layer(&self, layer: usize, rows: usize, cols: usize) -> Result<Arc<ArrayD<S>>> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            UvError::validation("injection", format!("replace rule at layer {layer} without an attached cache"))
        })?;
        let src = cache.get_arc(layer).ok_or_else(|| {
            UvError::validation("injection", format!("attached cache holds nothing for layer {layer}"))
        })?;
        if src.shape() != [rows, cols] {
            return Err(UvError::ShapeMismatch {
                name: format!("cached features for layer {layer}"),
                expected: vec![rows, cols],
                found: src.shape().to_vec(),
            });
        }
        Ok(src)
    }
}

/// One pre-norm transformer unit: attention + MLP, each with a residual.
struct StreamWeights {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

impl StreamWeights {
    fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<S>, rng: &mut R, prefix: &str, d: usize) -> Self {
        let hidden = d * MLP_RATIO;
        StreamWeights {
            ln1: LayerNorm::new(ps, &format!("{prefix}.ln1"), d),
            qkv: Linear::new(ps, rng, &format!("{prefix}.qkv"), d, 3 * d, INIT_STD),
            out: Linear::new(ps, rng, &format!("{prefix}.out"), d, d, INIT_STD),
            ln2: LayerNorm::new(ps, &format!("{prefix}.ln2"), d),
            mlp1: Linear::new(ps, rng, &format!("{prefix}.mlp1"), d, hidden, INIT_STD),
            mlp2: Linear::new(ps, rng, &format!("{prefix}.mlp2"), hidden, d, INIT_STD),
        }
    }
}

enum Block {
    Double { cond: StreamWeights, img: StreamWeights },
    Single(StreamWeights),
}

/// Training-run bookkeeping carried inside checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    /// Word positions of the data and branch RNG streams at run end.
    pub data_pos: String,
    pub branch_pos: String,
}

pub struct FlowModel<S: Scalar> {
    cfg: ModelConfig,
    pub ps: ParamStore<S>,
    img_embed: Linear,
    cond_embed: Linear,
    time1: Linear,
    time2: Linear,
    stream_img: usize,
    stream_cond: usize,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    t_patch: Arc<Vec<u32>>,
    t_unpatch: Arc<Vec<u32>>,
    t_cond: Arc<Vec<u32>>,
    pos_img: Arc<ArrayD<S>>,
    pos_cond: Arc<ArrayD<S>>,
    disentangled: bool,
    train_state: Option<TrainState>,
}

fn check_finite<S: Scalar>(t: &Tensor<S>, layer: usize) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(UvError::Runtime(format!("non-finite activations at layer {layer}")))
    }
}

/// [rows, cols] constant that is `on` in masked rows and 1 elsewhere.
fn row_factor<S: Scalar>(mask: &[bool], rows: usize, cols: usize, on: S) -> ArrayD<S> {
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |ix| if mask[ix[0]] { on } else { S::one() })
}

impl<S: Scalar> FlowModel<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let mut ps = ParamStore::new();
        let d = cfg.token_dim;
        let img_embed = Linear::new(&mut ps, &mut rng, "img_embed", cfg.patch_dim(), d, INIT_STD);
        let cond_embed = Linear::new(&mut ps, &mut rng, "cond_embed", cfg.cond_patch_dim(), d, INIT_STD);
        let time1 = Linear::new(&mut ps, &mut rng, "time1", cfg.time_dim, d, INIT_STD);
        let time2 = Linear::new(&mut ps, &mut rng, "time2", d, d, INIT_STD);
        let stream_img = ps.register("stream_img", crate::nn::init_normal(&mut rng, &[d], INIT_STD));
        let stream_cond = ps.register("stream_cond", crate::nn::init_normal(&mut rng, &[d], INIT_STD));
        let mut blocks = Vec::with_capacity(cfg.n_layers());
        for l in 0..cfg.n_double {
            blocks.push(Block::Double {
                cond: StreamWeights::new(&mut ps, &mut rng, &format!("blk{l:02}.cond"), d),
                img: StreamWeights::new(&mut ps, &mut rng, &format!("blk{l:02}.img"), d),
            });
        }
        for l in cfg.n_double..cfg.n_layers() {
            blocks.push(Block::Single(StreamWeights::new(&mut ps, &mut rng, &format!("blk{l:02}"), d)));
        }
        let final_ln = LayerNorm::new(&mut ps, "final_ln", d);
        // Zero head: the raw model predicts zero velocity until trained.
        let head = Linear::new_zeroed(&mut ps, "head", d, cfg.patch_dim());
        Ok(FlowModel {
            t_patch: patch_table(cfg.image_size, cfg.patch_size),
            t_unpatch: unpatch_table(cfg.image_size, cfg.patch_size),
            t_cond: patch_table(cfg.image_size, cfg.cond_patch()),
            pos_img: Arc::new(sincos_2d(cfg.img_grid(), d)),
            pos_cond: Arc::new(sincos_2d(cfg.cond_grid(), d)),
            cfg,
            ps,
            img_embed,
            cond_embed,
            time1,
            time2,
            stream_img,
            stream_cond,
            blocks,
            final_ln,
            head,
            disentangled: false,
            train_state: None,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Set once a truncation-supervised training run has completed.
    pub fn disentangled(&self) -> bool {
        self.disentangled
    }

    pub fn train_state(&self) -> Option<&TrainState> {
        self.train_state.as_ref()
    }

    /// [3, H, W] image tensor -> [img_tokens, patch_dim] tokens.
    pub fn patchify(&self, img: &Tensor<S>) -> Tensor<S> {
        img.gather(Arc::clone(&self.t_patch), &[self.cfg.img_tokens(), self.cfg.patch_dim()])
    }

    /// Exact inverse of [`Self::patchify`] (both are index permutations).
    pub fn unpatchify(&self, tokens: &Tensor<S>) -> Tensor<S> {
        let s = self.cfg.image_size;
        tokens.gather(Arc::clone(&self.t_unpatch), &[CHANNELS, s, s])
    }

    /// [3, H, W] portrait tensor -> [cond_tokens, cond_patch_dim] tokens.
    pub fn patchify_cond(&self, img: &Tensor<S>) -> Tensor<S> {
        img.gather(Arc::clone(&self.t_cond), &[self.cfg.cond_tokens, self.cfg.cond_patch_dim()])
    }

    /// Portrait pixels in [0, 1] -> condition tokens in model space.
    pub fn prepare_cond(&self, cond01: &ArrayD<S>) -> Result<Tensor<S>> {
        let s = self.cfg.image_size;
        if cond01.shape() != [CHANNELS, s, s] {
            return Err(UvError::ShapeMismatch {
                name: "condition image".into(),
                expected: vec![CHANNELS, s, s],
                found: cond01.shape().to_vec(),
            });
        }
        let one = S::one();
        Ok(self.patchify_cond(&Tensor::constant(cond01.mapv(|v| v + v - one))))
    }

    fn embed(
        &self,
        x_tokens: &Tensor<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
        train: bool,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        if !t.is_finite() {
            return Err(UvError::validation("time", format!("{t} is not finite")));
        }
        let expect_x = [self.cfg.img_tokens(), self.cfg.patch_dim()];
        if x_tokens.shape() != expect_x {
            return Err(UvError::ShapeMismatch {
                name: "image tokens".into(),
                expected: expect_x.to_vec(),
                found: x_tokens.shape().to_vec(),
            });
        }
        let expect_c = [self.cfg.cond_tokens, self.cfg.cond_patch_dim()];
        if cond_tokens.shape() != expect_c {
            return Err(UvError::ShapeMismatch {
                name: "condition tokens".into(),
                expected: expect_c.to_vec(),
                found: cond_tokens.shape().to_vec(),
            });
        }
        let ps = &self.ps;
        let temb_in = Tensor::constant(time_embedding::<S>(t, self.cfg.time_dim));
        let temb = self
            .time2
            .fwd(ps, &self.time1.fwd(ps, &temb_in, train).silu(), train)
            .reshape(&[self.cfg.token_dim]);
        let (si, sc) = if train {
            (ps.leaf(self.stream_img), ps.leaf(self.stream_cond))
        } else {
            (ps.frozen(self.stream_img), ps.frozen(self.stream_cond))
        };
        let h_img = self
            .img_embed
            .fwd(ps, x_tokens, train)
            .add(&Tensor::constant_shared(Arc::clone(&self.pos_img)))
            .add_rowvec(&si)
            .add_rowvec(&temb);
        let h_cond = self
            .cond_embed
            .fwd(ps, cond_tokens, train)
            .add(&Tensor::constant_shared(Arc::clone(&self.pos_cond)))
            .add_rowvec(&sc)
            .add_rowvec(&temb);
        Ok((h_cond, h_img))
    }

    /// Joint attention over [cond; img] rows with the hook applied to the
    /// concatenated multi-head output. Rows of each softmax sum to 1 before
    /// any output-side scaling.
    fn attention(
        &self,
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
        layer: usize,
        spec: &InjectionSpec<S>,
        record: &mut Option<&mut FeatureCache<S>>,
    ) -> Result<Tensor<S>> {
        let n = self.cfg.n_tokens();
        let d = self.cfg.token_dim;
        let hd = self.cfg.head_dim();
        let rule = spec.rule(layer);
        if let LayerRule::Replace { mask: Some(m) } | LayerRule::Scale { mask: Some(m), .. } = rule {
            if m.len() != n {
                return Err(UvError::validation(
                    "injection mask",
                    format!("length {} does not match {} tokens", m.len(), n),
                ));
            }
        }
        let inv_sqrt = S::from_f64(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = q.slice_cols(h * hd, hd);
            let kh = k.slice_cols(h * hd, hd);
            let vh = v.slice_cols(h * hd, hd);
            let mut logits = qh.matmul_t(&kh).scale(inv_sqrt);
            if spec.logit_mode {
                if let LayerRule::Scale { eps, mask } = rule {
                    logits = match mask {
                        None => logits.scale(S::from_f64(*eps)),
                        Some(m) => logits.mul(&Tensor::constant(row_factor(m, n, n, S::from_f64(*eps)))),
                    };
                }
            }
            heads.push(logits.softmax_rows().matmul(&vh));
        }
        let mut attn = Tensor::concat_cols(&heads);
        if !spec.logit_mode {
            if let LayerRule::Scale { eps, mask } = rule {
                attn = match mask {
                    None => attn.scale(S::from_f64(*eps)),
                    Some(m) => attn.mul(&Tensor::constant(row_factor(m, n, d, S::from_f64(*eps)))),
                };
            }
        }
        if let LayerRule::Replace { mask } = rule {
            let src = spec.cache_layer(layer, n, d)?;
            attn = match mask {
                None => Tensor::constant_shared(src),
                Some(m) => {
                    let keep = ArrayD::from_shape_fn(IxDyn(&[n, d]), |ix| {
                        if m[ix[0]] {
                            S::zero()
                        } else {
                            S::one()
                        }
                    });
                    let inject = ArrayD::from_shape_fn(IxDyn(&[n, d]), |ix| {
                        if m[ix[0]] {
                            src[[ix[0], ix[1]]]
                        } else {
                            S::zero()
                        }
                    });
                    attn.mul(&Tensor::constant(keep)).add(&Tensor::constant(inject))
                }
            };
        }
        if let Some(c) = record.as_deref_mut() {
            c.put(layer, attn.data_arc());
        }
        Ok(attn)
    }

    fn double_block(
        &self,
        wc: &StreamWeights,
        wi: &StreamWeights,
        h_c: &Tensor<S>,
        h_i: &Tensor<S>,
        layer: usize,
        spec: &InjectionSpec<S>,
        record: &mut Option<&mut FeatureCache<S>>,
        train: bool,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let ps = &self.ps;
        let d = self.cfg.token_dim;
        let nc = self.cfg.cond_tokens;
        let ni = self.cfg.img_tokens();
        let qkv_c = wc.qkv.fwd(ps, &wc.ln1.fwd(ps, h_c, train), train);
        let qkv_i = wi.qkv.fwd(ps, &wi.ln1.fwd(ps, h_i, train), train);
        let q = Tensor::concat_rows(&[qkv_c.slice_cols(0, d), qkv_i.slice_cols(0, d)]);
        let k = Tensor::concat_rows(&[qkv_c.slice_cols(d, d), qkv_i.slice_cols(d, d)]);
        let v = Tensor::concat_rows(&[qkv_c.slice_cols(2 * d, d), qkv_i.slice_cols(2 * d, d)]);
        let attn = self.attention(&q, &k, &v, layer, spec, record)?;
        let h_c = h_c.add(&wc.out.fwd(ps, &attn.slice_rows(0, nc), train));
        let h_i = h_i.add(&wi.out.fwd(ps, &attn.slice_rows(nc, ni), train));
        let h_c = h_c.add(&mlp(ps, wc, &h_c, train));
        let h_i = h_i.add(&mlp(ps, wi, &h_i, train));
        Ok((h_c, h_i))
    }

    fn single_block(
        &self,
        w: &StreamWeights,
        h: &Tensor<S>,
        layer: usize,
        spec: &InjectionSpec<S>,
        record: &mut Option<&mut FeatureCache<S>>,
        train: bool,
    ) -> Result<Tensor<S>> {
        let ps = &self.ps;
        let d = self.cfg.token_dim;
        let qkv = w.qkv.fwd(ps, &w.ln1.fwd(ps, h, train), train);
        let q = qkv.slice_cols(0, d);
        let k = qkv.slice_cols(d, d);
        let v = qkv.slice_cols(2 * d, d);
        let attn = self.attention(&q, &k, &v, layer, spec, record)?;
        let h = h.add(&w.out.fwd(ps, &attn, train));
        Ok(h.add(&mlp(ps, w, &h, train)))
    }

    /// Runs the first `n_run` layers and returns the image-stream hidden rows.
    fn backbone(
        &self,
        x_tokens: &Tensor<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
        spec: &InjectionSpec<S>,
        mut record: Option<&mut FeatureCache<S>>,
        n_run: usize,
        train: bool,
    ) -> Result<Tensor<S>> {
        if spec.rules.len() != self.cfg.n_layers() {
            return Err(UvError::validation(
                "injection spec",
                format!("{} rules for {} layers", spec.rules.len(), self.cfg.n_layers()),
            ));
        }
        debug_assert!(n_run >= 1 && n_run <= self.cfg.n_layers());
        let (mut h_c, mut h_i) = self.embed(x_tokens, t, cond_tokens, train)?;
        let mut merged: Option<Tensor<S>> = None;
        for l in 0..n_run {
            match &self.blocks[l] {
                Block::Double { cond, img } => {
                    let (c, i) = self.double_block(cond, img, &h_c, &h_i, l, spec, &mut record, train)?;
                    h_c = c;
                    h_i = i;
                    check_finite(&h_i, l)?;
                    check_finite(&h_c, l)?;
                }
                Block::Single(w) => {
                    let h = match merged.take() {
                        Some(h) => h,
                        None => Tensor::concat_rows(&[h_c.clone(), h_i.clone()]),
                    };
                    let h = self.single_block(w, &h, l, spec, &mut record, train)?;
                    check_finite(&h, l)?;
                    merged = Some(h);
                }
            }
        }
        Ok(match merged {
            Some(h) => h.slice_rows(self.cfg.cond_tokens, self.cfg.img_tokens()),
            None => h_i,
        })
    }

    /// Shared output head: final norm and linear decode to patch features.
    fn decode(&self, h_img: &Tensor<S>, train: bool) -> Tensor<S> {
        self.head.fwd(&self.ps, &self.final_ln.fwd(&self.ps, h_img, train), train)
    }

    fn run_tokens(
        &self,
        x_tokens: &Tensor<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
        spec: &InjectionSpec<S>,
        record: Option<&mut FeatureCache<S>>,
        n_run: usize,
        train: bool,
    ) -> Result<Tensor<S>> {
        let h = self.backbone(x_tokens, t, cond_tokens, spec, record, n_run, train)?;
        Ok(self.decode(&h, train))
    }

    /// Full pass: predicted velocity tokens, deterministic in its inputs.
    pub fn forward(
        &self,
        x_tokens: &Tensor<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
        spec: &InjectionSpec<S>,
    ) -> Result<Tensor<S>> {
        self.run_tokens(x_tokens, t, cond_tokens, spec, None, self.cfg.n_layers(), false)
    }

    /// Plain pass that also captures every layer's attention output.
    pub fn record_features(
        &self,
        x_tokens: &Tensor<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
    ) -> Result<(Tensor<S>, FeatureCache<S>)> {
        let mut cache = FeatureCache::empty(self.cfg.n_layers());
        let spec = InjectionSpec::passthrough(self.cfg.n_layers());
        let v = self.run_tokens(x_tokens, t, cond_tokens, &spec, Some(&mut cache), self.cfg.n_layers(), false)?;
        Ok((v, cache))
    }

    /// Runs layers up to the group boundary, then decodes through the shared
    /// head into a velocity image. Group 3 equals the full forward, decoded.
    pub fn forward_truncated(
        &self,
        x_tokens: &Tensor<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
        group_k: usize,
    ) -> Result<Tensor<S>> {
        let end = self.cfg.group_end(group_k)?;
        let spec = InjectionSpec::passthrough(self.cfg.n_layers());
        let toks = self.run_tokens(x_tokens, t, cond_tokens, &spec, None, end, false)?;
        Ok(self.unpatchify(&toks))
    }

    /// Velocity field on [3, H, W] arrays in model space; the workhorse for
    /// samplers. Gradients are never tracked here.
    pub fn velocity(
        &self,
        x: &ArrayD<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
        spec: &InjectionSpec<S>,
        record: Option<&mut FeatureCache<S>>,
    ) -> Result<ArrayD<S>> {
        let s = self.cfg.image_size;
        if x.shape() != [CHANNELS, s, s] {
            return Err(UvError::ShapeMismatch {
                name: "sample state".into(),
                expected: vec![CHANNELS, s, s],
                found: x.shape().to_vec(),
            });
        }
        no_grad(|| {
            let xt = self.patchify(&Tensor::constant(x.clone()));
            let v = self.run_tokens(&xt, t, cond_tokens, spec, record, self.cfg.n_layers(), false)?;
            Ok(self.unpatchify(&v).data().clone())
        })
    }

    /// Truncated-decode velocity image for group evaluations, in model space.
    pub fn velocity_truncated(
        &self,
        x: &ArrayD<S>,
        t: f64,
        cond_tokens: &Tensor<S>,
        group_k: usize,
    ) -> Result<ArrayD<S>> {
        no_grad(|| {
            let xt = self.patchify(&Tensor::constant(x.clone()));
            Ok(self.forward_truncated(&xt, t, cond_tokens, group_k)?.data().clone())
        })
    }

    /// One training term: straight-path interpolation noised at `draw.t`,
    /// squared error against the constant path velocity (eps - x0). Truncated
    /// passes decode at `truncate_at` layers instead of the full depth.
    fn sample_loss(
        &self,
        x0_01: &ArrayD<S>,
        cond_01: &ArrayD<S>,
        draw: &RfDraw<S>,
        truncate_at: Option<usize>,
        train: bool,
    ) -> Result<Tensor<S>> {
        let s = self.cfg.image_size;
        if x0_01.shape() != [CHANNELS, s, s] || cond_01.shape() != x0_01.shape() {
            return Err(UvError::ShapeMismatch {
                name: "training sample".into(),
                expected: vec![CHANNELS, s, s],
                found: x0_01.shape().to_vec(),
            });
        }
        let one = S::one();
        let t = S::from_f64(draw.t);
        let x0 = x0_01.mapv(|v| v + v - one);
        let xt = &x0 * (one - t) + &draw.eps * t;
        let target = &draw.eps - &x0;
        let x_tokens = self.patchify(&Tensor::constant(xt));
        let cond_tokens = self.patchify_cond(&Tensor::constant(cond_01.mapv(|v| v + v - one)));
        let target_tokens = self.patchify(&Tensor::constant(target));
        let spec = InjectionSpec::passthrough(self.cfg.n_layers());
        let n_run = truncate_at.unwrap_or(self.cfg.n_layers());
        let v = self.run_tokens(&x_tokens, draw.t, &cond_tokens, &spec, None, n_run, train)?;
        Ok(v.mse(&target_tokens))
    }

    /// Mean flow-matching loss of a batch of ([0,1] texture, [0,1] portrait)
    /// pairs. Per sample it draws t ~ U(0,1) then the noise field from `rng`;
    /// equal seeds give bit-equal losses.
    pub fn loss_rf(&self, batch: &[(ArrayD<S>, ArrayD<S>)], rng: &mut ChaCha8Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(UvError::validation("batch", "no samples"));
        }
        no_grad(|| {
            let mut acc = 0.0f64;
            for (x0, cond) in batch {
                let draw = draw_rf::<S>(rng, x0.shape());
                acc += self.sample_loss(x0, cond, &draw, None, false)?.value().to_f64();
            }
            Ok(acc / batch.len() as f64)
        })
    }

    pub fn save_checkpoint(&self, path: &Path, opt: Option<&Adam>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "texture-flow-model",
            "config": self.cfg,
            "disentangled": self.disentangled,
            "train": self.train_state,
            "opt_step": opt.map(|o| o.step),
            "param_count": self.ps.n_scalars(),
        });
        let mut ck = Checkpoint::new(MAGIC_DIT, meta.to_string());
        ck.push_params(&self.ps);
        if let Some(o) = opt {
            for id in 0..self.ps.len() {
                let name = self.ps.name(id).to_string();
                let m = &o.m[id];
                let v = &o.v[id];
                ck.push_f64(&format!("opt.m.{name}"), m.shape(), m.iter().copied().collect());
                ck.push_f64(&format!("opt.v.{name}"), v.shape(), v.iter().copied().collect());
            }
        }
        ck.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Ok(Self::load_full(path)?.0)
    }

    /// Load with the optimizer state, when the checkpoint carries one.
    pub fn load_full(path: &Path) -> Result<(Self, Option<Adam>)> {
        let ck = Checkpoint::load(path, MAGIC_DIT)?;
        let meta = ck.meta_value()?;
        let bad = |why: String| UvError::Checkpoint { path: path.into(), why };
        let cfg: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| bad(format!("bad model config: {e}")))?;
        let mut model = FlowModel::new(cfg, 0)?;
        ck.load_params(&mut model.ps)?;
        model.disentangled = meta["disentangled"].as_bool().unwrap_or(false);
        model.train_state = serde_json::from_value(meta["train"].clone())
            .map_err(|e| bad(format!("bad train state: {e}")))?;
        let opt_step = meta["opt_step"].as_u64();
        let opt = match opt_step {
            None => None,
            Some(step) => {
                let mut opt = Adam::new(&model.ps);
                opt.step = step;
                for id in 0..model.ps.len() {
                    let name = model.ps.name(id).to_string();
                    for (tag, dst) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                        let t = ck
                            .find(&format!("opt.{tag}.{name}"))
                            .ok_or_else(|| bad(format!("missing optimizer tensor opt.{tag}.{name}")))?;
                        let TensorData::F64(vals) = &t.data else {
                            return Err(bad(format!("optimizer tensor opt.{tag}.{name} is not f64")));
                        };
                        dst[id] = ArrayD::from_shape_vec(IxDyn(&t.shape), vals.clone())
                            .map_err(|e| bad(format!("optimizer tensor opt.{tag}.{name}: {e}")))?;
                    }
                }
                Some(opt)
            }
        };
        Ok((model, opt))
    }
}

fn mlp<S: Scalar>(ps: &ParamStore<S>, w: &StreamWeights, x: &Tensor<S>, train: bool) -> Tensor<S> {
    w.mlp2.fwd(ps, &w.mlp1.fwd(ps, &w.ln2.fwd(ps, x, train), train).silu(), train)
}

/// One flow-matching draw: the interpolation time and the noise endpoint.
struct RfDraw<S: Scalar> {
    t: f64,
    eps: ArrayD<S>,
}

fn draw_rf<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> RfDraw<S> {
    let t: f64 = rng.random();
    let eps = ArrayD::from_shape_fn(IxDyn(shape), |_| S::std_normal(rng));
    RfDraw { t, eps }
}

/// One training example; layered partial targets are only needed when
/// truncation supervision is on.
pub struct TrainSample<S: Scalar> {
    pub x0: ArrayD<S>,
    pub cond: ArrayD<S>,
    pub t_skin: Option<ArrayD<S>>,
    pub t_skin_mouth: Option<ArrayD<S>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 600, batch: 32, lr: 3e-4, warmup: 20, grad_clip: 1.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |why: &str| Err(UvError::validation("train config", why));
        if self.steps == 0 {
            return fail("steps must be >= 1");
        }
        if self.batch == 0 {
            return fail("batch must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Truncation-supervision settings. Per batch, boundary 1 is drawn first
/// with probability p (group-1 decode supervised against t_skin), then
/// boundary 2 (t_skin_mouth); otherwise the full pass trains against x0.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DisentangleConfig {
    pub p: f64,
}

impl DisentangleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(UvError::validation("truncation probability", format!("{} not in [0, 1]", self.p)));
        }
        Ok(())
    }
}

/// Adam training loop with cosine decay and global-norm clipping. Gradients
/// accumulate per sample in index order, so runs are bit-reproducible for a
/// fixed seed. Returns the per-step mean losses.
pub fn train<S: Scalar>(
    model: &mut FlowModel<S>,
    data: &[TrainSample<S>],
    cfg: &TrainConfig,
    dis: Option<&DisentangleConfig>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(UvError::validation("training data", "no samples"));
    }
    if let Some(d) = dis {
        d.validate()?;
        if data.iter().any(|s| s.t_skin.is_none() || s.t_skin_mouth.is_none()) {
            return Err(UvError::validation(
                "training data",
                "truncation supervision needs t_skin and t_skin_mouth on every sample",
            ));
        }
    }
    let (b1, b2) = model.cfg.group_boundaries;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(STREAM_DATA);
    let mut branch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    branch_rng.set_stream(STREAM_BRANCH);
    let mut opt = Adam::new(&model.ps);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let branch = match dis {
            None => None,
            Some(dcfg) => {
                let u1: f64 = branch_rng.random();
                if u1 < dcfg.p {
                    Some(1usize)
                } else {
                    let u2: f64 = branch_rng.random();
                    if u2 < dcfg.p {
                        Some(2)
                    } else {
                        None
                    }
                }
            }
        };
        let idx: Vec<usize> = (0..cfg.batch).map(|_| data_rng.random_range(0..data.len())).collect();
        let mut gb = GradBuf::new(model.ps.len());
        let mut acc = 0.0f64;
        for &i in &idx {
            let sample = &data[i];
            let draw = draw_rf::<S>(&mut data_rng, sample.x0.shape());
            let (x0, end) = match branch {
                None => (&sample.x0, None),
                Some(1) => (sample.t_skin.as_ref().unwrap(), Some(b1)),
                Some(_) => (sample.t_skin_mouth.as_ref().unwrap(), Some(b2)),
            };
            let loss = model.sample_loss(x0, &sample.cond, &draw, end, true)?;
            acc += loss.value().to_f64();
            gb.absorb(loss.backward(), model.ps.len());
        }
        gb.scale(S::from_f64(1.0 / cfg.batch as f64));
        gb.clip_global_norm(cfg.grad_clip);
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup);
        opt.apply(&mut model.ps, &gb, lr);
        let mean = acc / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(UvError::Runtime(format!("non-finite training loss at step {step}")));
        }
        losses.push(mean);
        on_step(step, mean);
    }
    let prev = model.train_state.as_ref().map(|s| s.step).unwrap_or(0);
    model.train_state = Some(TrainState {
        step: prev + cfg.steps,
        seed: cfg.seed,
        data_pos: data_rng.get_word_pos().to_string(),
        branch_pos: branch_rng.get_word_pos().to_string(),
    });
    if dis.is_some() {
        model.disentangled = true;
    }
    Ok(losses)
}
