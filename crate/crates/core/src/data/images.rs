//! Procedural dense-prediction images: coloured shapes with a per-pixel class
//! map and a smooth per-shape depth field.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{Scalar, Tensor};

use std::fs;
use std::path::Path;

use super::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Diamond,
}

impl ShapeKind {
    /// Shape drawn for class `c >= 1` by the generator.
    pub fn for_class(c: u8) -> ShapeKind {
        match c % 3 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Diamond,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    /// Radius (circle) or half-extent (square, diamond).
    pub size: f64,
    /// Depth at the shape's centre.
    pub depth: f64,
}

impl Shape {
    /// Whether the pixel with centre `(x + 0.5, y + 0.5)` is covered, and the
    /// normalized distance from the shape centre (0 at centre, 1 at the edge).
    pub fn cover(&self, x: usize, y: usize) -> Option<f64> {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let r = match self.kind {
            ShapeKind::Circle => (dx * dx + dy * dy).sqrt(),
            ShapeKind::Square => dx.abs().max(dy.abs()),
            ShapeKind::Diamond => dx.abs() + dy.abs(),
        } / self.size;
        (r <= 1.0).then_some(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseImageSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub max_shapes: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub noise: f64,
    pub n_unlabeled: usize,
    pub n_train_head: usize,
    pub n_meta: usize,
    pub n_eval: usize,
}

impl Default for DenseImageSpec {
    fn default() -> Self {
        DenseImageSpec {
            seed: 0,
            height: 16,
            width: 16,
            n_classes: 4,
            max_shapes: 3,
            depth_min: 1.0,
            depth_max: 10.0,
            noise: 0.05,
            n_unlabeled: 512,
            n_train_head: 128,
            n_meta: 64,
            n_eval: 128,
        }
    }
}

impl DenseImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.n_classes < 2 {
            return Err(Error::Config("image extents and class count must be positive (at least 2 classes)".into()));
        }
        if !(self.depth_max > self.depth_min + 1.0) {
            return Err(Error::Config("depth range must span more than 1".into()));
        }
        Ok(())
    }
}

pub const CHANNELS: usize = 3;

/// One image: pixels `[3, H, W]`, classes `[H, W]`, depth `[H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseImage {
    pub index: usize,
    pub pixels: Vec<f64>,
    pub classes: Vec<u8>,
    pub depth: Vec<f64>,
}

fn class_color(c: u8, n_classes: usize) -> [f64; 3] {
    if c == 0 {
        return [0.15, 0.15, 0.15];
    }
    let hue = (c as f64 - 1.0) / (n_classes - 1).max(1) as f64;
    let ang = 2.0 * std::f64::consts::PI * hue;
    [0.55 + 0.4 * ang.cos(), 0.55 + 0.4 * (ang + 2.1).cos(), 0.55 + 0.4 * (ang + 4.2).cos()]
}

/// Paints `shapes` in order (later ones occlude earlier ones).
pub fn render(spec: &DenseImageSpec, shapes: &[Shape], index: usize, rng: &mut impl Rng) -> DenseImage {
    let (h, w) = (spec.height, spec.width);
    let mut classes = vec![0u8; h * w];
    let mut depth = vec![spec.depth_max; h * w];
    for s in shapes {
        for y in 0..h {
            for x in 0..w {
                if let Some(r) = s.cover(x, y) {
                    classes[y * w + x] = s.class;
                    depth[y * w + x] = (s.depth + 0.5 * r).clamp(spec.depth_min, spec.depth_max);
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite");
    let mut pixels = vec![0.0; CHANNELS * h * w];
    for k in 0..h * w {
        let col = class_color(classes[k], spec.n_classes);
        let shade = 1.0 - 0.5 * (depth[k] - spec.depth_min) / (spec.depth_max - spec.depth_min);
        for c in 0..CHANNELS {
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            pixels[c * h * w + k] = col[c] * shade + n;
        }
    }
    DenseImage { index, pixels, classes, depth }
}

fn random_shapes(spec: &DenseImageSpec, rng: &mut impl Rng) -> Vec<Shape> {
    let n = rng.random_range(1..=spec.max_shapes.max(1));
    let side = spec.height.min(spec.width) as f64;
    (0..n)
        .map(|_| {
            let class = rng.random_range(1..spec.n_classes) as u8;
            Shape {
                kind: ShapeKind::for_class(class),
                class,
                cx: rng.random_range(0.0..spec.width as f64),
                cy: rng.random_range(0.0..spec.height as f64),
                size: rng.random_range(0.15 * side..0.35 * side),
                depth: rng.random_range(spec.depth_min..spec.depth_max - 0.5),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseImageTask {
    pub spec: DenseImageSpec,
    pub unlabeled: Vec<DenseImage>,
    pub train_head: Vec<DenseImage>,
    pub meta: Vec<DenseImage>,
    pub eval: Vec<DenseImage>,
}

/// Images are numbered globally; each split takes a disjoint index range.
pub fn gen_dense_images(spec: &DenseImageSpec) -> Result<DenseImageTask> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, "images");
    let mut next = 0;
    let mut split = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let out: Vec<DenseImage> = (next..next + n)
            .map(|i| {
                let shapes = random_shapes(spec, rng);
                render(spec, &shapes, i, rng)
            })
            .collect();
        next += n;
        out
    };
    let unlabeled = split(spec.n_unlabeled, &mut rng);
    let train_head = split(spec.n_train_head, &mut rng);
    let meta = split(spec.n_meta, &mut rng);
    let eval = split(spec.n_eval, &mut rng);
    Ok(DenseImageTask { spec: spec.clone(), unlabeled, train_head, meta, eval })
}

/// Stacks images into `[B, 3, H, W]`.
pub fn image_tensor<T: Scalar>(images: &[&DenseImage], h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for im in images {
        data.extend(im.pixels.iter().map(|&x| T::of(x)));
    }
    Tensor::new(data, &[images.len(), CHANNELS, h, w]).expect("image batch shape")
}

#[derive(Serialize, Deserialize)]
struct Index {
    kind: String,
    spec: DenseImageSpec,
}

/// Writes one line-delimited file per split and an index file.
pub fn save_image_task(task: &DenseImageTask, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, split) in [("unlabeled", &task.unlabeled), ("train_head", &task.train_head), ("meta", &task.meta), ("eval", &task.eval)] {
        write_jsonl(&dir.join(format!("{name}.jsonl")), split)?;
    }
    let index = Index { kind: "images".into(), spec: task.spec.clone() };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_image_task(dir: &Path) -> Result<DenseImageTask> {
    let index: Index = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    if index.kind != "images" {
        return Err(Error::Config(format!("{} holds a {} task", dir.display(), index.kind)));
    }
    Ok(DenseImageTask {
        spec: index.spec,
        unlabeled: read_jsonl(&dir.join("unlabeled.jsonl"))?,
        train_head: read_jsonl(&dir.join("train_head.jsonl"))?,
        meta: read_jsonl(&dir.join("meta.jsonl"))?,
        eval: read_jsonl(&dir.join("eval.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_only_has_zero_classes() {
        let spec = DenseImageSpec::default();
        let im = render(&spec, &[], 0, &mut rng::stream(0, "t"));
        assert!(im.classes.iter().all(|&c| c == 0));
        assert!(im.depth.iter().all(|&d| d == spec.depth_max));
    }

    #[test]
    fn circle_area_matches_rasterized_disc() {
        let spec = DenseImageSpec { height: 64, width: 64, ..DenseImageSpec::default() };
        for &r in &[5.0, 9.5, 14.2] {
            let c = Shape { kind: ShapeKind::Circle, class: 3, cx: 32.0, cy: 31.3, size: r, depth: 4.0 };
            let im = render(&spec, &[c], 0, &mut rng::stream(0, "t"));
            let count = im.classes.iter().filter(|&&k| k == 3).count() as f64;
            let ring = 2.0 * std::f64::consts::PI * r;
            assert!((count - std::f64::consts::PI * r * r).abs() <= ring, "r={r}: {count}");
        }
    }

    #[test]
    fn labels_stay_in_declared_ranges() {
        let spec = DenseImageSpec { n_unlabeled: 20, n_train_head: 5, n_meta: 5, n_eval: 5, ..DenseImageSpec::default() };
        let task = gen_dense_images(&spec).unwrap();
        for im in task.unlabeled.iter().chain(&task.eval) {
            assert!(im.classes.iter().all(|&c| (c as usize) < spec.n_classes));
            assert!(im.depth.iter().all(|&d| d >= spec.depth_min && d <= spec.depth_max));
        }
        assert_eq!(task, gen_dense_images(&spec).unwrap());
    }
}
