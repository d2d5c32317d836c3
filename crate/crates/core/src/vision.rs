//! Vision learner: patch encoder with a latent-prediction head, plus the
//! frozen-feature evaluator heads (segmentation, depth).

use rand::Rng;
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{self, BlockShape};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_classes: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig { channels: 3, height: 16, width: 16, patch: 4, d_model: 32, n_heads: 2, n_layers: 2, d_ff: 64, n_classes: 4 }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config("image extents must be multiples of the patch size".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config("vision d_model must be a positive multiple of n_heads".into()));
        }
        if self.n_classes < 2 || self.channels == 0 {
            return Err(Error::Config("need at least two classes and one channel".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn pixels_per_patch(&self) -> usize {
        self.patch * self.patch
    }
}

/// Index into a flat `[B, C, H, W]` array for each patch entry, ordered
/// `(b, patch_y, patch_x, c, py, px)`.
pub fn patch_index(b: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for gy in 0..h / p {
            for gx in 0..w / p {
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(((bi * c + ci) * h + gy * p + py) * w + gx * p + px);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of `idx`.
pub fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (k, &i) in idx.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// `[B, C, H, W] -> [B * n_patches, C * p * p]`.
pub fn patchify<T: Scalar>(x: &Var<T>, p: usize) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let idx = patch_index(b, c, h, w, p);
    Ok(x.reshape(&[b * c * h * w, 1])?.gather_rows(&idx)?.reshape(&[b * (h / p) * (w / p), c * p * p])?)
}

/// Reorders a flat per-pixel array `[B, H, W]` into patch order.
pub fn to_patch_order<U: Copy>(values: &[U], b: usize, h: usize, w: usize, p: usize) -> Vec<U> {
    patch_index(b, 1, h, w, p).into_iter().map(|i| values[i]).collect()
}

pub fn init_vision<T: Scalar>(cfg: &VisionConfig, rng: &mut impl Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    let d = cfg.d_model;
    nn::init_linear(&mut p, "embed.patch", cfg.patch_dim(), d, 1.0, rng);
    p.push_normal("embed.pos", &[cfg.n_patches(), d], 0.3, rng);
    let shape = BlockShape { d_model: d, n_heads: cfg.n_heads, d_ff: cfg.d_ff, n_layers: cfg.n_layers };
    for k in 0..cfg.n_layers {
        nn::init_block(&mut p, &format!("block.{k}"), shape, rng);
    }
    nn::init_layer_norm(&mut p, "enc.ln", d);
    p.push_normal("pred.mask", &[d], 0.3, rng);
    nn::init_linear(&mut p, "pred.up", d, cfg.d_ff, 1.0, rng);
    nn::init_linear(&mut p, "pred.down", cfg.d_ff, d, 1.0, rng);
    p
}

fn check_images(cfg: &VisionConfig, shape: &[usize]) -> Result<usize> {
    if shape.len() != 4 || shape[1] != cfg.channels || shape[2] != cfg.height || shape[3] != cfg.width {
        return Err(Error::Shape(format!(
            "images {shape:?} do not match [B, {}, {}, {}]",
            cfg.channels, cfg.height, cfg.width
        )));
    }
    Ok(shape[0])
}

/// Encoder features `[B * n_patches, d]`.
pub fn encode<T: Scalar>(cfg: &VisionConfig, p: &Bound<T>, images: &Var<T>) -> Result<Var<T>> {
    let b = check_images(cfg, &images.shape())?;
    let np = cfg.n_patches();
    let d = cfg.d_model;
    let patches = patchify(images, cfg.patch)?;
    let mut x = nn::linear(p, "embed.patch", &patches)?.reshape(&[b, np, d])?.add(p.get("embed.pos")?)?;
    for k in 0..cfg.n_layers {
        x = nn::block(p, &format!("block.{k}"), &x, None, cfg.n_heads)?;
    }
    nn::layer_norm(p, "enc.ln", &x.reshape(&[b * np, d])?)
}

/// Per-patch mean of a `[B, H, W]` mask, `[B * n_patches, 1]`.
pub fn patch_mask_mean<T: Scalar>(cfg: &VisionConfig, mask: &Var<T>) -> Result<Var<T>> {
    let s = mask.shape();
    let m4 = mask.reshape(&[s[0], 1, s[1], s[2]])?;
    Ok(patchify(&m4, cfg.patch)?.mean_last()?)
}

/// Applies a `[B, H, W]` soft mask to every channel of `[B, C, H, W]` images.
pub fn apply_mask<T: Scalar>(images: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
    let s = mask.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("mask must be [B, H, W], got {s:?}")));
    }
    Ok(images.mul(&mask.reshape(&[s[0], 1, s[1], s[2]])?)?)
}

/// Latent prediction `g(f(x * m), m)` for every patch, `[B * n_patches, d]`.
pub fn predict_latents<T: Scalar>(cfg: &VisionConfig, p: &Bound<T>, images: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
    let ctx = encode(cfg, p, &apply_mask(images, mask)?)?;
    let side = patch_mask_mean(cfg, mask)?.mul(p.get("pred.mask")?)?;
    let h = nn::gelu(&nn::linear(p, "pred.up", &ctx.add(&side)?)?)?;
    nn::linear(p, "pred.down", &h)
}

/// Masked latent prediction loss against stop-gradient target features.
pub fn ssl_loss<T: Scalar>(cfg: &VisionConfig, g: &Graph<T>, p: &Bound<T>, images: &Var<T>, mask: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    let pred = predict_latents(cfg, p, images, mask)?;
    Ok(pred.mse(&g.constant(target.clone()))?)
}

/// Target-encoder features of clean images, as plain values.
pub fn target_features<T: Scalar>(cfg: &VisionConfig, target_params: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let _ng = g.no_grad();
    let p = target_params.bind(&g, false);
    let f = encode(cfg, &p, &g.constant(images.clone()))?;
    let v = (*f.value()).clone();
    Ok(v)
}

pub fn init_heads<T: Scalar>(cfg: &VisionConfig, rng: &mut impl Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    let pp = cfg.pixels_per_patch();
    nn::init_linear(&mut p, "seg", cfg.d_model, pp * cfg.n_classes, 1.0, rng);
    nn::init_linear(&mut p, "depth", cfg.d_model, pp, 1.0, rng);
    p
}

/// Per-pixel class logits in patch order, `[B * n_patches * p * p, n_classes]`.
pub fn seg_logits<T: Scalar>(cfg: &VisionConfig, heads: &Bound<T>, features: &Var<T>) -> Result<Var<T>> {
    let rows = features.shape()[0] * cfg.pixels_per_patch();
    Ok(nn::linear(heads, "seg", features)?.reshape(&[rows, cfg.n_classes])?)
}

/// Per-pixel depth in patch order, `[B * n_patches, p * p]`.
pub fn depth_pred<T: Scalar>(heads: &Bound<T>, features: &Var<T>) -> Result<Var<T>> {
    nn::linear(heads, "depth", features)
}
