//! Vision task designer: a tiny encoder-decoder emitting one soft mask value
//! per pixel, and the mask regularizers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, ParamStore};
use crate::vision::{invert, patch_index, patchify, VisionConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskDesignerConfig {
    pub hidden: usize,
    /// Initial mean mask value.
    pub init_keep: f64,
}

impl Default for MaskDesignerConfig {
    fn default() -> Self {
        MaskDesignerConfig { hidden: 16, init_keep: 0.5 }
    }
}

pub fn init_mask_designer<T: Scalar>(cfg: &MaskDesignerConfig, vision: &VisionConfig, rng: &mut impl Rng) -> ParamStore<T> {
    let mut p = ParamStore::new();
    nn::init_linear(&mut p, "mask.enc", vision.patch_dim(), cfg.hidden, 1.0, rng);
    nn::init_linear(&mut p, "mask.dec", cfg.hidden, vision.pixels_per_patch(), 0.5, rng);
    let logit = (cfg.init_keep / (1.0 - cfg.init_keep)).ln();
    *p.get_mut("mask.dec.b").expect("just pushed") = Tensor::full(&[vision.pixels_per_patch()], T::of(logit));
    p
}

/// Soft masks `[B, H, W]` in `[0, 1]`.
pub fn designer_mask<T: Scalar>(vision: &VisionConfig, phi: &Bound<T>, images: &Var<T>) -> Result<Var<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != vision.channels || s[2] != vision.height || s[3] != vision.width {
        return Err(Error::Shape(format!("images {s:?} do not match the configured geometry")));
    }
    let (b, h, w) = (s[0], vision.height, vision.width);
    let np = vision.n_patches();
    let f = nn::linear(phi, "mask.enc", &patchify(images, vision.patch)?)?.tanh()?;
    let hd = f.shape()[1];
    let f3 = f.reshape(&[b, np, hd])?;
    let ctx = f3.sum_to(&[b, 1, hd])?.scale(T::one() / T::of(np as f64))?;
    let logits = nn::linear(phi, "mask.dec", &f3.add(&ctx)?.reshape(&[b * np, hd])?)?;
    let inv = invert(&patch_index(b, 1, h, w, vision.patch));
    let m = logits.sigmoid()?.reshape(&[b * h * w, 1])?.gather_rows(&inv)?;
    Ok(m.reshape(&[b, h, w])?)
}

/// `(mean(m) - keep_ratio)^2`.
pub fn sparsity_penalty<T: Scalar>(mask: &Var<T>, keep_ratio: f64) -> Result<Var<T>> {
    Ok(mask.mean()?.add_scalar(T::of(-keep_ratio))?.square()?)
}

/// Sum of squared differences over 4-neighbour pairs (no wraparound), averaged
/// over the batch.
pub fn tv_penalty<T: Scalar>(mask: &Var<T>) -> Result<Var<T>> {
    let s = mask.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let k = (bi * h + y) * w + x;
                if x + 1 < w {
                    left.push(k);
                    right.push(k + 1);
                }
                if y + 1 < h {
                    left.push(k);
                    right.push(k + w);
                }
            }
        }
    }
    if left.is_empty() {
        let g: &Graph<T> = mask.graph();
        return Ok(g.scalar(T::zero()));
    }
    let flat = mask.reshape(&[b * h * w, 1])?;
    let diff = flat.gather_rows(&left)?.sub(&flat.gather_rows(&right)?)?;
    Ok(diff.square()?.sum()?.scale(T::one() / T::of(b as f64))?)
}

/// Fixed binary masks keeping a random `keep_ratio` fraction of patches.
pub fn random_patch_masks<T: Scalar>(vision: &VisionConfig, batch: usize, keep_ratio: f64, rng: &mut impl Rng) -> Tensor<T> {
    let (h, w, p) = (vision.height, vision.width, vision.patch);
    let (gh, gw) = (h / p, w / p);
    let keep = ((gh * gw) as f64 * keep_ratio).round() as usize;
    let mut data = vec![T::zero(); batch * h * w];
    for bi in 0..batch {
        let mut cells: Vec<usize> = (0..gh * gw).collect();
        cells.shuffle(rng);
        for &c in &cells[..keep] {
            let (gy, gx) = (c / gw, c % gw);
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    data[(bi * h + y) * w + x] = T::one();
                }
            }
        }
    }
    Tensor::new(data, &[batch, h, w]).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularizer_identities() {
        let g = Graph::<f64>::new();
        let constant = g.constant(Tensor::full(&[2, 3, 3], 0.25));
        assert_eq!(sparsity_penalty(&constant, 0.25).unwrap().item(), 0.0);
        assert_eq!(tv_penalty(&constant).unwrap().item(), 0.0);
        let checker = g.constant(Tensor::from_f64(&[0., 1., 1., 0.], &[1, 2, 2]).unwrap());
        assert_eq!(tv_penalty(&checker).unwrap().item(), 4.0);
    }
}
