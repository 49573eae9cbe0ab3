//! A micro asymmetric encoder-decoder transformer.
//!
//! Only visible patches are embedded and encoded. Tokens of visible crop
//! patches additionally receive a single learnable angle embedding before
//! the encoder. The decoder sees every grid position: projected latents at
//! visible positions and a shared mask token everywhere else, each with a
//! fixed 2D sine-cosine positional embedding.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod posembed;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{gradcheck, GradcheckReport, Objective};
pub use posembed::sincos_2d;

use crate::error::{Error, Result};
use crate::patching::MaskLayout;
use layers::{Block, BlockCache, LayerNorm, LayerNormCache, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub p: usize,
    pub channels: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub use_angle_embedding: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 96,
            p: 8,
            channels: 3,
            enc_dim: 64,
            enc_depth: 2,
            enc_heads: 4,
            dec_dim: 32,
            dec_depth: 1,
            dec_heads: 4,
            use_angle_embedding: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.p) {
            return Err(Error::invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.p
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        for (name, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("decoder", self.dec_dim, self.dec_heads),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return Err(Error::invalid(format!(
                    "{name} width {dim} not divisible by {heads} heads"
                )));
            }
            if dim % 4 != 0 {
                return Err(Error::invalid(format!(
                    "{name} width {dim} must be a multiple of 4 for 2D positional tables"
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.p
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.channels
    }

    pub fn enc_head_dim(&self) -> usize {
        self.enc_dim / self.enc_heads
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("image_size", self.image_size.to_string()),
            ("p", self.p.to_string()),
            ("channels", self.channels.to_string()),
            ("enc_dim", self.enc_dim.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("dec_dim", self.dec_dim.to_string()),
            ("dec_depth", self.dec_depth.to_string()),
            ("dec_heads", self.dec_heads.to_string()),
            ("use_angle_embedding", self.use_angle_embedding.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Reads the model keys out of a `key = value` map, defaulting the rest.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in map {
            let bad = || Error::invalid(format!("bad value {v:?} for {k}"));
            let n = || v.parse::<usize>().map_err(|_| bad());
            match k.as_str() {
                "image_size" => cfg.image_size = n()?,
                "p" => cfg.p = n()?,
                "channels" => cfg.channels = n()?,
                "enc_dim" => cfg.enc_dim = n()?,
                "enc_depth" => cfg.enc_depth = n()?,
                "enc_heads" => cfg.enc_heads = n()?,
                "dec_dim" => cfg.dec_dim = n()?,
                "dec_depth" => cfg.dec_depth = n()?,
                "dec_heads" => cfg.dec_heads = n()?,
                "use_angle_embedding" => cfg.use_angle_embedding = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learnable weights plus the two constant positional tables. The same type
/// doubles as a gradient accumulator; its positional tables are then unused.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_embed: Linear,
    pub pos_embed_enc: Array2<f64>,
    pub pos_embed_dec: Array2<f64>,
    pub angle_embed: Array1<f64>,
    pub mask_token: Array1<f64>,
    pub encoder_blocks: Vec<Block>,
    pub enc_norm: LayerNorm,
    pub enc_to_dec: Linear,
    pub decoder_blocks: Vec<Block>,
    pub dec_norm: LayerNorm,
    pub pred_head: Linear,
}

/// A named learnable tensor: `(name, shape, values)`.
pub type NamedTensor<'a> = (String, Vec<usize>, &'a [f64]);

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let grid = config.grid();
        Ok(ModelParams {
            patch_embed: Linear::xavier(config.patch_dim(), config.enc_dim, rng),
            pos_embed_enc: sincos_2d(config.enc_dim, grid),
            pos_embed_dec: sincos_2d(config.dec_dim, grid),
            angle_embed: Array1::from_shape_simple_fn(config.enc_dim, || small.sample(rng)),
            mask_token: Array1::from_shape_simple_fn(config.dec_dim, || small.sample(rng)),
            encoder_blocks: (0..config.enc_depth)
                .map(|_| Block::init(config.enc_dim, rng))
                .collect(),
            enc_norm: LayerNorm::new(config.enc_dim),
            enc_to_dec: Linear::xavier(config.enc_dim, config.dec_dim, rng),
            decoder_blocks: (0..config.dec_depth)
                .map(|_| Block::init(config.dec_dim, rng))
                .collect(),
            dec_norm: LayerNorm::new(config.dec_dim),
            pred_head: Linear::xavier(config.dec_dim, config.patch_dim(), rng),
        })
    }

    /// All-zero parameters shaped like `self` (positional tables copied).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Learnable tensors in a fixed order. Positional tables are constants
    /// and never appear here.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out: Vec<NamedTensor<'_>> = Vec::new();
        fn linear<'a>(out: &mut Vec<NamedTensor<'a>>, name: &str, l: &'a Linear) {
            out.push((format!("{name}.weight"), l.weight.shape().to_vec(), slice_of(&l.weight)));
            out.push((format!("{name}.bias"), l.bias.shape().to_vec(), slice_of(&l.bias)));
        }
        fn norm<'a>(out: &mut Vec<NamedTensor<'a>>, name: &str, n: &'a LayerNorm) {
            out.push((format!("{name}.gamma"), n.gamma.shape().to_vec(), slice_of(&n.gamma)));
            out.push((format!("{name}.beta"), n.beta.shape().to_vec(), slice_of(&n.beta)));
        }
        linear(&mut out, "patch_embed", &self.patch_embed);
        out.push(("angle_embed".into(), self.angle_embed.shape().to_vec(), slice_of(&self.angle_embed)));
        out.push(("mask_token".into(), self.mask_token.shape().to_vec(), slice_of(&self.mask_token)));
        for (prefix, blocks) in [("encoder", &self.encoder_blocks), ("decoder", &self.decoder_blocks)] {
            for (i, b) in blocks.iter().enumerate() {
                let p = format!("{prefix}.{i}");
                norm(&mut out, &format!("{p}.norm1"), &b.norm1);
                linear(&mut out, &format!("{p}.qkv"), &b.qkv);
                linear(&mut out, &format!("{p}.proj"), &b.proj);
                norm(&mut out, &format!("{p}.norm2"), &b.norm2);
                linear(&mut out, &format!("{p}.fc1"), &b.fc1);
                linear(&mut out, &format!("{p}.fc2"), &b.fc2);
            }
        }
        norm(&mut out, "enc_norm", &self.enc_norm);
        linear(&mut out, "enc_to_dec", &self.enc_to_dec);
        norm(&mut out, "dec_norm", &self.dec_norm);
        linear(&mut out, "pred_head", &self.pred_head);
        out
    }

    /// Mutable view of the learnable tensors, in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        let ModelParams {
            patch_embed,
            angle_embed,
            mask_token,
            encoder_blocks,
            enc_norm,
            enc_to_dec,
            decoder_blocks,
            dec_norm,
            pred_head,
            ..
        } = self;
        fn linear<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, l: &'a mut Linear) {
            out.push((format!("{name}.weight"), slice_of_mut(&mut l.weight)));
            out.push((format!("{name}.bias"), slice_of_mut(&mut l.bias)));
        }
        fn norm<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, n: &'a mut LayerNorm) {
            out.push((format!("{name}.gamma"), slice_of_mut(&mut n.gamma)));
            out.push((format!("{name}.beta"), slice_of_mut(&mut n.beta)));
        }
        linear(&mut out, "patch_embed", patch_embed);
        out.push(("angle_embed".into(), slice_of_mut(angle_embed)));
        out.push(("mask_token".into(), slice_of_mut(mask_token)));
        for (prefix, blocks) in [("encoder", encoder_blocks), ("decoder", decoder_blocks)] {
            for (i, b) in blocks.iter_mut().enumerate() {
                let p = format!("{prefix}.{i}");
                norm(&mut out, &format!("{p}.norm1"), &mut b.norm1);
                linear(&mut out, &format!("{p}.qkv"), &mut b.qkv);
                linear(&mut out, &format!("{p}.proj"), &mut b.proj);
                norm(&mut out, &format!("{p}.norm2"), &mut b.norm2);
                linear(&mut out, &format!("{p}.fc1"), &mut b.fc1);
                linear(&mut out, &format!("{p}.fc2"), &mut b.fc2);
            }
        }
        norm(&mut out, "enc_norm", enc_norm);
        linear(&mut out, "enc_to_dec", enc_to_dec);
        norm(&mut out, "dec_norm", dec_norm);
        linear(&mut out, "pred_head", pred_head);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, over learnable tensors.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    ModelParams::init(config, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `N × p²C`, one row per grid position.
    pub predictions: Array2<f64>,
    /// Encoder output for the visible tokens, in token order.
    pub latents: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    visible: Vec<usize>,
    masked: Vec<usize>,
    crop_visible: usize,
    patches: Array2<f64>,
    enc_blocks: Vec<BlockCache>,
    enc_norm: LayerNormCache,
    latents: Array2<f64>,
    dec_blocks: Vec<BlockCache>,
    dec_norm: LayerNormCache,
    dec_out: Array2<f64>,
}

fn check_layout(layout: &MaskLayout, patches: &Array2<f64>, config: &ModelConfig) -> Result<()> {
    let n = config.num_patches();
    if patches.dim() != (n, config.patch_dim()) {
        return Err(Error::shape(format!(
            "expected {n}×{} patches, got {:?}",
            config.patch_dim(),
            patches.dim()
        )));
    }
    layout.validate(n)?;
    if layout.crop_visible.len() + layout.bg_visible.len() == 0 {
        return Err(Error::invalid("no visible patches to encode"));
    }
    Ok(())
}

/// Patch embedding plus positional embedding of the visible patches, with
/// the angle embedding added to visible crop patches. Order: crop-visible
/// then background-visible, each ascending.
pub fn embed_visible(
    patches: &Array2<f64>,
    layout: &MaskLayout,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Array2<f64>> {
    check_layout(layout, patches, config)?;
    Ok(embed(patches, layout, params, config).0)
}

fn embed(
    patches: &Array2<f64>,
    layout: &MaskLayout,
    params: &ModelParams,
    config: &ModelConfig,
) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
    let visible = layout.visible();
    let picked = patches.select(Axis(0), &visible);
    let mut tokens = params.patch_embed.forward(&picked) + &params.pos_embed_enc.select(Axis(0), &visible);
    if config.use_angle_embedding {
        for mut row in tokens.outer_iter_mut().take(layout.crop_visible.len()) {
            row += &params.angle_embed;
        }
    }
    (tokens, picked, visible)
}

fn encode_cached(
    tokens: Array2<f64>,
    params: &ModelParams,
    config: &ModelConfig,
) -> (Array2<f64>, Vec<BlockCache>, LayerNormCache) {
    let mut x = tokens;
    let mut caches = Vec::with_capacity(params.encoder_blocks.len());
    for block in &params.encoder_blocks {
        let (y, cache) = block.forward(&x, config.enc_heads);
        caches.push(cache);
        x = y;
    }
    let (latents, norm) = params.enc_norm.forward(&x);
    (latents, caches, norm)
}

/// Encoder blocks followed by the final normalization.
pub fn encode(tokens: &Array2<f64>, params: &ModelParams, config: &ModelConfig) -> Result<Array2<f64>> {
    if tokens.nrows() == 0 || tokens.ncols() != config.enc_dim {
        return Err(Error::shape(format!(
            "encoder expects T×{} tokens with T ≥ 1, got {:?}",
            config.enc_dim,
            tokens.dim()
        )));
    }
    Ok(encode_cached(tokens.clone(), params, config).0)
}

fn decoder_input(
    latents: &Array2<f64>,
    layout: &MaskLayout,
    params: &ModelParams,
    visible: &[usize],
) -> Array2<f64> {
    let projected = params.enc_to_dec.forward(latents);
    let n = layout.num_patches();
    let mut full = Array2::zeros((n, params.mask_token.len()));
    for k in layout.crop_masked.iter().chain(&layout.bg_masked) {
        full.row_mut(*k).assign(&params.mask_token);
    }
    for (row, &k) in projected.outer_iter().zip(visible) {
        full.row_mut(k).assign(&row);
    }
    full + &params.pos_embed_dec
}

fn decode_cached(
    latents: &Array2<f64>,
    layout: &MaskLayout,
    params: &ModelParams,
    config: &ModelConfig,
    visible: &[usize],
) -> (Array2<f64>, Vec<BlockCache>, LayerNormCache, Array2<f64>) {
    let mut x = decoder_input(latents, layout, params, visible);
    let mut caches = Vec::with_capacity(params.decoder_blocks.len());
    for block in &params.decoder_blocks {
        let (y, cache) = block.forward(&x, config.dec_heads);
        caches.push(cache);
        x = y;
    }
    let (dec_out, norm) = params.dec_norm.forward(&x);
    let predictions = params.pred_head.forward(&dec_out);
    (predictions, caches, norm, dec_out)
}

/// Scatters latents to their grid positions, fills masked positions with the
/// mask token, and predicts every patch.
pub fn decode(
    latents: &Array2<f64>,
    layout: &MaskLayout,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    let visible = layout.visible();
    layout.validate(config.num_patches())?;
    if latents.dim() != (visible.len(), config.enc_dim) {
        return Err(Error::shape(format!(
            "{} visible patches but latents are {:?}",
            visible.len(),
            latents.dim()
        )));
    }
    let (predictions, ..) = decode_cached(latents, layout, params, config, &visible);
    Ok(ForwardOutput {
        predictions,
        latents: latents.clone(),
    })
}

/// Full forward pass over one image's patches, keeping what backward needs.
pub fn forward(
    patches: &Array2<f64>,
    layout: &MaskLayout,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(ForwardOutput, ForwardCache)> {
    check_layout(layout, patches, config)?;
    let (tokens, picked, visible) = embed(patches, layout, params, config);
    let (latents, enc_blocks, enc_norm) = encode_cached(tokens, params, config);
    let (predictions, dec_blocks, dec_norm, dec_out) =
        decode_cached(&latents, layout, params, config, &visible);
    let cache = ForwardCache {
        masked: layout.crop_masked.iter().chain(&layout.bg_masked).copied().collect(),
        crop_visible: layout.crop_visible.len(),
        visible,
        patches: picked,
        enc_blocks,
        enc_norm,
        latents: latents.clone(),
        dec_blocks,
        dec_norm,
        dec_out,
    };
    Ok((
        ForwardOutput {
            predictions,
            latents,
        },
        cache,
    ))
}

/// Accumulates `∂L/∂params` into `grad` given `∂L/∂predictions`.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ForwardCache,
    d_predictions: &Array2<f64>,
    grad: &mut ModelParams,
) {
    let d_dec_out = params
        .pred_head
        .backward(&cache.dec_out, d_predictions, &mut grad.pred_head);
    let mut dx = params
        .dec_norm
        .backward(&cache.dec_norm, &d_dec_out, &mut grad.dec_norm);
    for ((block, bc), g) in params
        .decoder_blocks
        .iter()
        .zip(&cache.dec_blocks)
        .zip(grad.decoder_blocks.iter_mut())
        .rev()
    {
        dx = block.backward(bc, &dx, config.dec_heads, g);
    }
    for &k in &cache.masked {
        grad.mask_token += &dx.row(k);
    }
    let d_projected = dx.select(Axis(0), &cache.visible);
    let d_latents = params
        .enc_to_dec
        .backward(&cache.latents, &d_projected, &mut grad.enc_to_dec);

    let mut dt = params
        .enc_norm
        .backward(&cache.enc_norm, &d_latents, &mut grad.enc_norm);
    for ((block, bc), g) in params
        .encoder_blocks
        .iter()
        .zip(&cache.enc_blocks)
        .zip(grad.encoder_blocks.iter_mut())
        .rev()
    {
        dt = block.backward(bc, &dt, config.enc_heads, g);
    }
    if config.use_angle_embedding {
        for row in dt.outer_iter().take(cache.crop_visible) {
            grad.angle_embed += &row;
        }
    }
    params
        .patch_embed
        .backward(&cache.patches, &dt, &mut grad.patch_embed);
}
