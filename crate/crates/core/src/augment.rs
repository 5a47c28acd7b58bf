//! Weak and strong augmentation pipelines with label-consistent geometry.
//!
//! Both pipelines draw their magnitudes from one full-scale table scaled by
//! a per-pipeline intensity. Every geometric step is recorded so labels can
//! be carried into the output frame with [`AugOutcome::map_labels`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_sequence, apply_transform_with, BBox, GeomTransform};
use crate::image::{Image, CHANNELS};
use crate::metrics::LabelSet;

/// Fill colour for pixels uncovered by a translation.
const TRANSLATE_FILL: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    /// Master switch; when off both pipelines are the identity.
    pub enabled: bool,
    pub weak_intensity: f64,
    pub strong_intensity: f64,
    pub flip: bool,
    pub translate: bool,
    pub crop: bool,
    pub color: bool,
    pub erase: bool,
    /// Full-scale translation as a fraction of the frame.
    pub max_translate: f64,
    /// Full-scale colour gain deviation; bias deviation is half of it.
    pub max_jitter: f64,
    /// Smallest crop side fraction at full intensity.
    pub min_crop_scale: f64,
    pub erase_count: (usize, usize),
    /// Area fraction of the frame per erased patch.
    pub erase_area: (f64, f64),
    /// Box-aware crops keep at least one label box this visible.
    pub crop_keep_visible: f64,
    pub crop_attempts: usize,
    /// Labels less visible than this after a transform are dropped.
    pub min_visible: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            enabled: true,
            weak_intensity: 0.2,
            strong_intensity: 1.0,
            flip: true,
            translate: true,
            crop: true,
            color: true,
            erase: true,
            max_translate: 0.15,
            max_jitter: 0.25,
            min_crop_scale: 0.6,
            erase_count: (1, 3),
            erase_area: (0.05, 0.15),
            crop_keep_visible: 0.5,
            crop_attempts: 20,
            min_visible: crate::geometry::DEFAULT_MIN_VISIBLE,
        }
    }
}

impl AugConfig {
    /// Both pipelines disabled.
    pub fn none() -> Self {
        AugConfig { enabled: false, ..AugConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.weak_intensity) || !unit(self.strong_intensity) {
            return Err(Error::config("aug.intensity", "intensities must lie in [0, 1]"));
        }
        if self.enabled && self.weak_intensity >= self.strong_intensity {
            return Err(Error::config("aug.weak_intensity", "must be below the strong intensity"));
        }
        if !(0.0..=0.5).contains(&self.max_translate) || !unit(self.max_jitter) {
            return Err(Error::config("aug.max_translate", "translation in [0, 0.5], jitter in [0, 1]"));
        }
        if !(self.min_crop_scale > 0.0 && self.min_crop_scale <= 1.0) {
            return Err(Error::config("aug.min_crop_scale", "must lie in (0, 1]"));
        }
        if self.erase_count.0 > self.erase_count.1 {
            return Err(Error::config("aug.erase_count", "min exceeds max"));
        }
        let (a0, a1) = self.erase_area;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::config("aug.erase_area", "need 0 < min <= max <= 1"));
        }
        if !unit(self.crop_keep_visible) || !unit(self.min_visible) {
            return Err(Error::config("aug.visibility", "visibility fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Photometric record; none of it affects labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotometricRecord {
    pub gain: Option<[f32; 3]>,
    pub bias: Option<[f32; 3]>,
    /// Erased pixel rectangles `(x0, y0, x1, y1)`, half-open.
    pub erased: Vec<(usize, usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugOutcome {
    pub image: Image,
    /// Geometric steps in application order.
    pub geometry: Vec<GeomTransform>,
    pub photometric: PhotometricRecord,
}

impl AugOutcome {
    pub fn identity(image: &Image) -> Self {
        AugOutcome { image: image.clone(), geometry: Vec::new(), photometric: PhotometricRecord::default() }
    }

    /// Carries labels into the output frame, dropping boxes that the
    /// geometry pushes (mostly) out of view.
    pub fn map_labels(&self, labels: &LabelSet, min_visible: f64) -> LabelSet {
        let mut out = LabelSet::empty();
        for (b, c) in labels.iter() {
            if let Some(m) = apply_sequence(&self.geometry, b, min_visible) {
                out.push(m, c);
            }
        }
        out
    }
}

struct Magnitudes {
    translate: f64,
    jitter: f64,
}

fn magnitudes(cfg: &AugConfig, intensity: f64) -> Magnitudes {
    Magnitudes { translate: cfg.max_translate * intensity, jitter: cfg.max_jitter * intensity }
}

/// Flip and translate, recorded. `current` holds the labels in the frame
/// before this step; a shift that would drop all of them is redrawn, and
/// after `crop_attempts` tries the translation is skipped.
fn geometric_step<R: Rng + ?Sized>(
    cfg: &AugConfig,
    m: &Magnitudes,
    intensity: f64,
    current: &LabelSet,
    out: &mut AugOutcome,
    rng: &mut R,
) {
    let mut frame_boxes = current.boxes.clone();
    if cfg.flip && intensity > 0.0 && rng.gen_bool(0.5) {
        out.image = out.image.flip_horizontal();
        out.geometry.push(GeomTransform::HorizontalFlip);
        for b in &mut frame_boxes {
            *b = apply_transform_with(&GeomTransform::HorizontalFlip, b, 0.0).expect("flips keep boxes");
        }
    }
    if cfg.translate && m.translate > 0.0 {
        let (w, h) = (out.image.width as f64, out.image.height as f64);
        for _ in 0..cfg.crop_attempts.max(1) {
            let dx = (rng.gen_range(-m.translate..=m.translate) * w).round() as i64;
            let dy = (rng.gen_range(-m.translate..=m.translate) * h).round() as i64;
            if dx == 0 && dy == 0 {
                return;
            }
            let t = GeomTransform::Translate { dx: dx as f64 / w, dy: dy as f64 / h };
            let survives = frame_boxes.is_empty()
                || frame_boxes.iter().any(|b| apply_transform_with(&t, b, cfg.min_visible).is_some());
            if survives {
                out.image = out.image.translate(dx, dy, TRANSLATE_FILL);
                out.geometry.push(t);
                return;
            }
        }
    }
}

fn color_step<R: Rng + ?Sized>(cfg: &AugConfig, m: &Magnitudes, out: &mut AugOutcome, rng: &mut R) {
    if !cfg.color || m.jitter <= 0.0 {
        return;
    }
    let mut gain = [1.0f32; 3];
    let mut bias = [0.0f32; 3];
    for c in 0..CHANNELS {
        gain[c] = (1.0 + rng.gen_range(-m.jitter..=m.jitter)) as f32;
        bias[c] = rng.gen_range(-0.5 * m.jitter..=0.5 * m.jitter) as f32;
    }
    out.image = out.image.color_affine(gain, bias);
    out.photometric.gain = Some(gain);
    out.photometric.bias = Some(bias);
}

/// Low-intensity flip, translate and colour jitter. Never erases.
pub fn weak_augment<R: Rng + ?Sized>(image: &Image, cfg: &AugConfig, rng: &mut R) -> AugOutcome {
    let mut out = AugOutcome::identity(image);
    if !cfg.enabled || cfg.weak_intensity <= 0.0 {
        return out;
    }
    let m = magnitudes(cfg, cfg.weak_intensity);
    geometric_step(cfg, &m, cfg.weak_intensity, &LabelSet::empty(), &mut out, rng);
    color_step(cfg, &m, &mut out, rng);
    out
}

/// Samples a crop window, rejecting windows that leave every label box less
/// than `crop_keep_visible` visible. Falls back to the full frame.
fn sample_crop<R: Rng + ?Sized>(labels: &LabelSet, cfg: &AugConfig, rng: &mut R) -> BBox {
    let lo = 1.0 - (1.0 - cfg.min_crop_scale) * cfg.strong_intensity;
    if lo >= 1.0 {
        return BBox::FULL;
    }
    for _ in 0..cfg.crop_attempts.max(1) {
        let sw = rng.gen_range(lo..=1.0);
        let sh = rng.gen_range(lo..=1.0);
        let x0 = rng.gen_range(0.0..=1.0 - sw);
        let y0 = rng.gen_range(0.0..=1.0 - sh);
        let window = BBox::new(x0, y0, (x0 + sw).min(1.0), (y0 + sh).min(1.0));
        let keeps_one = labels.boxes.iter().any(|b| {
            let a = b.area();
            a > 0.0 && b.intersection(&window) >= cfg.crop_keep_visible * a
        });
        if labels.is_empty() || keeps_one {
            return window;
        }
    }
    BBox::FULL
}

/// Box-aware crop-resize, then flip/translate, colour jitter and random
/// erasing, with labels mapped through the recorded geometry.
pub fn strong_augment<R: Rng + ?Sized>(
    image: &Image,
    labels: &LabelSet,
    cfg: &AugConfig,
    rng: &mut R,
) -> (AugOutcome, LabelSet) {
    let mut out = AugOutcome::identity(image);
    if !cfg.enabled || cfg.strong_intensity <= 0.0 {
        return (out, labels.clone());
    }
    let s = cfg.strong_intensity;
    let m = magnitudes(cfg, s);

    if cfg.crop {
        let window = sample_crop(labels, cfg, rng);
        if window != BBox::FULL {
            out.image = out.image.crop_resize(&window);
            out.geometry.push(GeomTransform::CropResize { window });
        }
    }
    let after_crop = out.map_labels(labels, cfg.min_visible);
    geometric_step(cfg, &m, s, &after_crop, &mut out, rng);
    color_step(cfg, &m, &mut out, rng);

    if cfg.erase {
        let (w, h) = (out.image.width, out.image.height);
        let patches = rng.gen_range(cfg.erase_count.0..=cfg.erase_count.1);
        for _ in 0..patches {
            let area = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1) * (w * h) as f64;
            let aspect: f64 = rng.gen_range(0.5..=2.0);
            let pw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let ph = ((area / aspect).sqrt().round() as usize).clamp(1, h);
            let x0 = rng.gen_range(0..=w - pw);
            let y0 = rng.gen_range(0..=h - ph);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    let rgb = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
                    out.image.set_pixel(x, y, rgb);
                }
            }
            out.photometric.erased.push((x0, y0, x0 + pw, y0 + ph));
        }
    }

    let mapped = out.map_labels(labels, cfg.min_visible);
    (out, mapped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{render_scene, DatasetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_only(f: impl FnOnce(&mut AugConfig)) -> AugConfig {
        let mut c = AugConfig { flip: false, translate: false, crop: false, color: false, erase: false, ..AugConfig::default() };
        f(&mut c);
        c
    }

    fn sample_scene(seed: u64) -> crate::datagen::Scene {
        let cfg = DatasetConfig { count_probs: vec![0.0, 0.0, 1.0], ..DatasetConfig::default() };
        render_scene(&cfg, seed, 0).0
    }

    #[test]
    fn zero_weak_intensity_is_identity() {
        let scene = sample_scene(1);
        let cfg = AugConfig { weak_intensity: 0.0, ..AugConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = weak_augment(&scene.image, &cfg, &mut rng);
        assert_eq!(out.image, scene.image);
        assert!(out.geometry.is_empty());
        let out = weak_augment(&scene.image, &AugConfig::none(), &mut rng);
        assert_eq!(out.image, scene.image);
    }

    #[test]
    fn flip_only_mirrors_pixels() {
        let scene = sample_scene(2);
        let cfg = cfg_only(|c| c.flip = true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut saw_flip = false;
        for _ in 0..20 {
            let out = weak_augment(&scene.image, &cfg, &mut rng);
            if out.geometry == vec![GeomTransform::HorizontalFlip] {
                saw_flip = true;
                assert_eq!(out.image, scene.image.flip_horizontal());
            } else {
                assert_eq!(out.image, scene.image);
            }
        }
        assert!(saw_flip);
    }

    #[test]
    fn translated_labels_match_rerendered_objects() {
        // re-render with objects shifted by whole pixels and compare
        let dcfg = DatasetConfig { width: 20, height: 20, min_size: 4, max_size: 7, clutter: 0.0, occlusion_prob: 0.0, count_probs: vec![0.0, 1.0], ..DatasetConfig::default() };
        let (scene, objs) = render_scene(&dcfg, 17, 4);
        let shift = 2i64; // 0.1 of a 20-pixel frame
        let moved = scene.image.translate(shift, 0, TRANSLATE_FILL);
        let t = GeomTransform::Translate { dx: 0.1, dy: 0.0 };
        for (o, (b, _)) in objs.iter().zip(scene.labels.iter()) {
            let mapped = apply_transform_with(&t, b, 0.1).unwrap();
            // pixel scan of the shifted object colour
            let (mut x0, mut x1) = (usize::MAX, 0);
            for y in 0..20 {
                for x in 0..20 {
                    if moved.pixel(x, y) == o.color {
                        x0 = x0.min(x);
                        x1 = x1.max(x + 1);
                    }
                }
            }
            let expect_x0 = (o.x0 as i64 + shift).clamp(0, 20) as f64 / 20.0;
            assert!((mapped.xmin - expect_x0).abs() < 1e-12);
            assert!((mapped.xmin - x0 as f64 / 20.0).abs() < 1e-12);
            assert!((mapped.xmax - (x1 as f64 / 20.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn strong_with_empty_labels() {
        let scene = sample_scene(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (out, labels) = strong_augment(&scene.image, &LabelSet::empty(), &AugConfig::default(), &mut rng);
        assert!(labels.is_empty());
        assert!(out.image.in_unit_range());
    }

    #[test]
    fn full_frame_crop_with_flip_mirrors_label() {
        let scene = sample_scene(5);
        let b = BBox::new(0.4, 0.4, 0.6, 0.7);
        let labels = LabelSet::new(vec![b], vec![1]).unwrap();
        let cfg = cfg_only(|c| c.flip = true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let (out, mapped) = strong_augment(&scene.image, &labels, &cfg, &mut rng);
            if out.geometry.is_empty() {
                assert_eq!(mapped, labels);
            } else {
                let m = mapped.boxes[0];
                assert!((m.xmin - 0.4).abs() < 1e-12 && (m.xmax - 0.6).abs() < 1e-12);
                assert_eq!(mapped.classes, vec![1]);
            }
        }
    }

    #[test]
    fn crop_that_covers_one_of_two_boxes() {
        let left = BBox::new(0.05, 0.1, 0.25, 0.3);
        let right = BBox::new(0.7, 0.6, 0.9, 0.8);
        let labels = LabelSet::new(vec![left, right], vec![0, 1]).unwrap();
        let window = BBox::new(0.5, 0.4, 1.0, 1.0);
        let outcome = AugOutcome {
            image: sample_scene(6).image.crop_resize(&window),
            geometry: vec![GeomTransform::CropResize { window }],
            photometric: PhotometricRecord::default(),
        };
        let mapped = outcome.map_labels(&labels, 0.1);
        assert_eq!(mapped.len(), 1);
        assert_eq!(mapped.classes, vec![1]);
        let expect = apply_transform_with(&GeomTransform::CropResize { window }, &right, 0.1).unwrap();
        assert_eq!(mapped.boxes[0], expect);
    }

    #[test]
    fn strong_outputs_are_label_consistent_and_box_aware() {
        let cfg = AugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scene = sample_scene(7);
        let mut color_only = cfg.clone();
        color_only.flip = false;
        color_only.translate = false;
        color_only.crop = false;
        for i in 0..10_000 {
            let labels = if i % 2 == 0 {
                scene.labels.clone()
            } else {
                LabelSet::new(vec![BBox::new(0.02, 0.02, 0.1, 0.1)], vec![0]).unwrap()
            };
            let (out, mapped) = strong_augment(&scene.image, &labels, &cfg, &mut rng);
            assert!(!mapped.is_empty(), "draw {i} lost every label");
            assert_eq!(mapped, out.map_labels(&labels, cfg.min_visible));
            if i % 50 == 0 {
                assert!(out.image.in_unit_range());
                let (_, same) = strong_augment(&scene.image, &labels, &color_only, &mut rng);
                assert_eq!(same, labels);
            }
        }
    }
}
