//! Procedural detection scenes and labelled/unlabelled pool splitting.
//!
//! Each scene draws from its own ChaCha stream (`seed`, stream = scene id),
//! so any scene can be regenerated alone and generation order never matters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::metrics::LabelSet;

/// Base hues of the foreground classes.
pub const CLASS_PALETTE: [[f32; 3]; 2] = [[0.78, 0.42, 0.22], [0.30, 0.34, 0.78]];
const BACKGROUND: [f32; 3] = [0.32, 0.46, 0.28];
const BRANCH: [f32; 3] = [0.42, 0.33, 0.22];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    /// `count_probs[k]` is the probability of a scene holding `k` objects.
    pub count_probs: Vec<f64>,
    pub n_classes: usize,
    /// Object side range in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Per-object colour deviation from the class hue.
    pub color_jitter: f64,
    /// Background texture strength in `[0, 1]`.
    pub clutter: f64,
    /// Chance that an object gets a background-coloured bar across it.
    pub occlusion_prob: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            width: 32,
            height: 32,
            count_probs: vec![0.1, 0.4, 0.3, 0.2],
            n_classes: 2,
            min_size: 6,
            max_size: 13,
            color_jitter: 0.08,
            clutter: 0.3,
            occlusion_prob: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn max_objects(&self) -> usize {
        self.count_probs.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::config("dataset.width", "image sides must be at least 4 pixels"));
        }
        if self.count_probs.is_empty() || self.count_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("dataset.count_probs", "probabilities must lie in [0, 1]"));
        }
        if (self.count_probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config("dataset.count_probs", "probabilities must sum to 1"));
        }
        if self.n_classes == 0 || self.n_classes > CLASS_PALETTE.len() {
            return Err(Error::config("dataset.n_classes", format!("must lie in 1..={}", CLASS_PALETTE.len())));
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size > self.width.min(self.height) {
            return Err(Error::config("dataset.min_size", "need 2 <= min_size <= max_size <= image side"));
        }
        for (name, v) in [("dataset.clutter", self.clutter), ("dataset.occlusion_prob", self.occlusion_prob), ("dataset.color_jitter", self.color_jitter)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub image: Image,
    pub labels: LabelSet,
}

/// Render-time facts about one object, kept for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedObject {
    /// Half-open pixel extents.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub class_id: usize,
    pub color: [f32; 3],
    pub occluded: bool,
}

fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn jitter_color<R: Rng>(base: [f32; 3], amount: f64, rng: &mut R) -> [f32; 3] {
    let mut c = base;
    for v in &mut c {
        *v = (*v as f64 + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0) as f32;
    }
    c
}

fn draw_count<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn paint_background<R: Rng>(cfg: &DatasetConfig, rng: &mut R) -> Image {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = Image::filled(w, h, BACKGROUND);
    if cfg.clutter <= 0.0 {
        return img;
    }
    // soft blobs of lighter and darker foliage
    let blobs = rng.gen_range(2..=5);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let r = rng.gen_range(3.0..(w.min(h) as f64 / 3.0));
        let shade = rng.gen_range(-0.15..0.15) * cfg.clutter;
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let k = (-d2 / (r * r)).exp() * shade;
                let mut p = img.pixel(x, y);
                for v in &mut p {
                    *v = (*v as f64 + k).clamp(0.0, 1.0) as f32;
                }
                img.set_pixel(x, y, p);
            }
        }
    }
    // thin branch-like distractors
    let branches = (rng.gen::<f64>() * 3.0 * cfg.clutter).round() as usize;
    for _ in 0..branches {
        let color = jitter_color(BRANCH, 0.05, rng);
        if rng.gen_bool(0.5) {
            let x = rng.gen_range(0..w);
            let (y0, y1) = (rng.gen_range(0..h / 2), rng.gen_range(h / 2..h));
            for y in y0..y1 {
                img.set_pixel(x, y, color);
            }
        } else {
            let y = rng.gen_range(0..h);
            let (x0, x1) = (rng.gen_range(0..w / 2), rng.gen_range(w / 2..w));
            for x in x0..x1 {
                img.set_pixel(x, y, color);
            }
        }
    }
    // per-pixel grain
    let grain = 0.06 * cfg.clutter;
    for v in &mut img.data {
        *v = (*v as f64 + rng.gen_range(-grain..=grain)).clamp(0.0, 1.0) as f32;
    }
    img
}

/// Renders scene `id`. Objects are rounded rectangles of a class hue that
/// never touch each other; labels are their exact pixel extents.
pub fn render_scene(cfg: &DatasetConfig, seed: u64, id: u64) -> (Scene, Vec<RenderedObject>) {
    let mut rng = scene_rng(seed, id);
    let (w, h) = (cfg.width, cfg.height);
    let mut image = paint_background(cfg, &mut rng);
    let wanted = draw_count(&cfg.count_probs, &mut rng);

    let mut objects: Vec<RenderedObject> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..50 {
            let ow = rng.gen_range(cfg.min_size..=cfg.max_size);
            let oh = rng.gen_range(cfg.min_size..=cfg.max_size);
            let x0 = rng.gen_range(0..=w - ow);
            let y0 = rng.gen_range(0..=h - oh);
            let (x1, y1) = (x0 + ow, y0 + oh);
            let clear = objects
                .iter()
                .all(|o| x1 < o.x0 || o.x1 < x0 || y1 < o.y0 || o.y1 < y0);
            if clear {
                let class_id = rng.gen_range(0..cfg.n_classes);
                let color = jitter_color(CLASS_PALETTE[class_id], cfg.color_jitter, &mut rng);
                objects.push(RenderedObject { x0, y0, x1, y1, class_id, color, occluded: false });
                break;
            }
        }
    }

    for o in &mut objects {
        let (ow, oh) = (o.x1 - o.x0, o.y1 - o.y0);
        let round = ow >= 4 && oh >= 4;
        for y in o.y0..o.y1 {
            for x in o.x0..o.x1 {
                let corner = (x == o.x0 || x == o.x1 - 1) && (y == o.y0 || y == o.y1 - 1);
                if !(round && corner) {
                    image.set_pixel(x, y, o.color);
                }
            }
        }
        if cfg.occlusion_prob > 0.0 && rng.gen_bool(cfg.occlusion_prob) {
            o.occluded = true;
            let thick = rng.gen_range(1..=2usize);
            if rng.gen_bool(0.5) {
                let x = rng.gen_range(o.x0 + 1..o.x1 - 1);
                for y in o.y0.saturating_sub(2)..(o.y1 + 2).min(h) {
                    for dx in 0..thick {
                        if x + dx < w {
                            image.set_pixel(x + dx, y, BACKGROUND);
                        }
                    }
                }
            } else {
                let y = rng.gen_range(o.y0 + 1..o.y1 - 1);
                for x in o.x0.saturating_sub(2)..(o.x1 + 2).min(w) {
                    for dy in 0..thick {
                        if y + dy < h {
                            image.set_pixel(x, y + dy, BACKGROUND);
                        }
                    }
                }
            }
        }
    }

    let mut labels = LabelSet::empty();
    for o in &objects {
        labels.push(
            BBox::new(o.x0 as f64 / w as f64, o.y0 as f64 / h as f64, o.x1 as f64 / w as f64, o.y1 as f64 / h as f64),
            o.class_id,
        );
    }
    (Scene { id, image, labels }, objects)
}

/// Scenes with ids `first .. first + n`.
pub fn generate_range(cfg: &DatasetConfig, seed: u64, first: u64, n: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((first..first + n as u64).map(|id| render_scene(cfg, seed, id).0).collect())
}

pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, n: usize) -> Result<Vec<Scene>> {
    generate_range(cfg, seed, 0, n)
}

/// Train/validation/test sizes of the standard benchmark.
pub const STANDARD_SIZES: (usize, usize, usize) = (2000, 200, 400);

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Three disjoint id ranges drawn from one seed.
pub fn generate_benchmark(cfg: &DatasetConfig, seed: u64, sizes: (usize, usize, usize)) -> Result<Benchmark> {
    let (a, b, c) = sizes;
    Ok(Benchmark {
        train: generate_range(cfg, seed, 0, a)?,
        val: generate_range(cfg, seed, a as u64, b)?,
        test: generate_range(cfg, seed, (a + b) as u64, c)?,
    })
}

/// Labelled/unlabelled partition of a training pool, as indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub labelled_ratio: f64,
    pub fold_seed: u64,
}

/// Uniform random partition keeping `round(ratio * n)` scenes labelled.
pub fn split_pld(n_scenes: usize, labelled_ratio: f64, fold_seed: u64) -> Result<Split> {
    if !(labelled_ratio > 0.0 && labelled_ratio <= 1.0) {
        return Err(Error::config("split.ratio", "labelled ratio must lie in (0, 1]"));
    }
    let k = (labelled_ratio * n_scenes as f64).round() as usize;
    if k == 0 {
        return Err(Error::EmptyLabelledPool);
    }
    let mut idx: Vec<usize> = (0..n_scenes).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed));
    let mut labelled = idx[..k].to_vec();
    let mut unlabelled = idx[k..].to_vec();
    labelled.sort_unstable();
    unlabelled.sort_unstable();
    Ok(Split { labelled, unlabelled, labelled_ratio, fold_seed })
}
