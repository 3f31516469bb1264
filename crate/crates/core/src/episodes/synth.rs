//! Procedural shapes dataset with pixel-exact masks.
//!
//! Each class is a (shape kind, colour, stripe texture) combination. Every
//! image holds one shape of its primary class and, with probability
//! `co_occurrence`, a second shape of a different class so that multi-way
//! episodes with both classes in the query exist.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, Dataset, DatasetIndex, IndexEntry, LabelMask, Sample};
use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of images that also contain a second class.
    pub co_occurrence: f64,
    /// Shape radius range as fractions of `min(height, width)`.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            images_per_class: 20,
            height: 96,
            width: 96,
            co_occurrence: 0.5,
            min_radius: 0.16,
            max_radius: 0.26,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Ellipse,
}

impl ShapeKind {
    const ALL: [ShapeKind; 7] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Ellipse,
    ];

    fn for_class(class: ClassId) -> Self {
        Self::ALL[(class as usize - 1) % Self::ALL.len()]
    }

    fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Ellipse => "ellipse",
        }
    }

    /// Membership test in shape-local coordinates for radius `r`.
    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= r * r,
            ShapeKind::Square => u.abs() <= 0.85 * r && v.abs() <= 0.85 * r,
            ShapeKind::Triangle => v <= 0.5 * r && v >= -r + 3f64.sqrt() * u.abs(),
            ShapeKind::Diamond => u.abs() + v.abs() <= r,
            ShapeKind::Cross => {
                (u.abs() <= r / 3.0 && v.abs() <= r) || (v.abs() <= r / 3.0 && u.abs() <= r)
            }
            ShapeKind::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            ShapeKind::Ellipse => (u / r).powi(2) + (v / (0.5 * r)).powi(2) <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub class: ClassId,
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

impl ShapeParams {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.kind.contains(u, v, self.radius)
    }
}

/// Paints shapes in order onto a background mask; later shapes occlude earlier ones.
pub fn rasterize_mask(shapes: &[ShapeParams], height: usize, width: usize) -> LabelMask {
    let mut labels = vec![0u8; height * width];
    for s in shapes {
        let lo_y = (s.cy - s.radius * 1.5).floor().max(0.0) as usize;
        let hi_y = ((s.cy + s.radius * 1.5).ceil().max(0.0) as usize).min(height);
        let lo_x = (s.cx - s.radius * 1.5).floor().max(0.0) as usize;
        let hi_x = ((s.cx + s.radius * 1.5).ceil().max(0.0) as usize).min(width);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                if s.covers(x, y) {
                    labels[y * width + x] = s.class;
                }
            }
        }
    }
    LabelMask::new(height, width, labels)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Golden-ratio hue steps, so any contiguous block of class ids (one fold)
/// still spans the colour wheel.
fn class_color(class: ClassId) -> [f64; 3] {
    let h = ((class as f64 - 1.0) * 0.618_033_988_749_895).fract();
    let v = if class.is_multiple_of(2) { 0.75 } else { 0.95 };
    hsv_to_rgb(h, 0.85, v)
}

/// Renders an image for the given mask; pixels are quantized to 8 bits so that
/// a PNG round trip is lossless.
fn render(mask: &LabelMask, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(mask.labels.len() * 3);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let l = mask.labels[y * mask.width + x];
            let noise = rng.random_range(-0.05..0.05);
            let rgb = if l == 0 {
                let g = rng.random_range(0.25..0.55);
                [g, g, g]
            } else {
                let base = class_color(l);
                // stripe orientation and period vary with the class id
                let period = 4 + (l as usize % 3) * 2;
                let coord = if l.is_multiple_of(2) { x } else { y };
                let stripe = if (coord / (period / 2)).is_multiple_of(2) { 1.0 } else { 0.8 };
                base.map(|c| c * stripe)
            };
            for c in rgb {
                data.push(((c + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    Tensor::from_vec(&[mask.height, mask.width, 3], data)
}

fn random_shape(class: ClassId, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ShapeParams {
    let side = cfg.height.min(cfg.width) as f64;
    let radius = rng.random_range(cfg.min_radius..=cfg.max_radius) * side;
    let cx = rng.random_range(radius..=(cfg.width as f64 - radius).max(radius));
    let cy = rng.random_range(radius..=(cfg.height as f64 - radius).max(radius));
    ShapeParams {
        class,
        kind: ShapeKind::for_class(class),
        cx,
        cy,
        radius,
        angle: rng.random_range(-0.5..0.5),
    }
}

/// Generates `num_classes × images_per_class` images deterministically from `seed`.
pub fn synth_shapes(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.num_classes > 255 {
        return Err(config_err!("synthetic class count must be in 1..=255"));
    }
    if cfg.height < 8 || cfg.width < 8 {
        return Err(config_err!("synthetic images must be at least 8x8"));
    }
    if !(0.0..=1.0).contains(&cfg.co_occurrence) {
        return Err(config_err!("co_occurrence must lie in [0, 1]"));
    }
    if !(cfg.min_radius > 0.0 && cfg.min_radius <= cfg.max_radius && cfg.max_radius <= 0.5) {
        return Err(config_err!("radius range must satisfy 0 < min <= max <= 0.5"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.num_classes as ClassId;
    let class_names: BTreeMap<ClassId, String> = (1..=n)
        .map(|c| (c, format!("{}{}", ShapeKind::for_class(c).name(), c)))
        .collect();

    let mut entries = Vec::new();
    let mut samples = Vec::new();
    let mut all_shapes = Vec::new();
    for primary in 1..=n {
        for i in 0..cfg.images_per_class {
            let want_pair = n > 1 && rng.random_bool(cfg.co_occurrence);
            let mut shapes = vec![random_shape(primary, cfg, &mut rng)];
            if want_pair {
                let mut other = rng.random_range(1..n);
                if other >= primary {
                    other += 1;
                }
                let solo_primary = rasterize_mask(&shapes, cfg.height, cfg.width).count(primary);
                let mut accepted = None;
                for _ in 0..200 {
                    let cand = random_shape(other, cfg, &mut rng);
                    let solo_other = rasterize_mask(std::slice::from_ref(&cand), cfg.height, cfg.width)
                        .count(other);
                    let both = [shapes[0].clone(), cand.clone()];
                    let m = rasterize_mask(&both, cfg.height, cfg.width);
                    if m.count(primary) * 2 >= solo_primary && m.count(other) * 2 >= solo_other {
                        accepted = Some(cand);
                        break;
                    }
                }
                if let Some(c) = accepted {
                    shapes.push(c);
                }
            }
            let mask = rasterize_mask(&shapes, cfg.height, cfg.width);
            let image = render(&mask, &mut rng);
            let classes = mask.distinct().into_iter().filter(|&l| l != 0).collect();
            entries.push(IndexEntry {
                name: format!("c{primary:03}_{i:04}"),
                image_path: None,
                mask_path: None,
                classes,
            });
            samples.push(Sample { image, mask });
            all_shapes.push(shapes);
        }
    }
    let index = DatasetIndex::new("synthetic", class_names, entries);
    Ok(Dataset::in_memory(index, samples, Some(all_shapes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            images_per_class: 3,
            height: 32,
            width: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shape_sizes_are_positive() {
        let ds = synth_shapes(&small(), 1).unwrap();
        for pos in 0..ds.len() {
            let s = ds.sample(pos).unwrap();
            for c in &ds.index.entries[pos].classes {
                assert!(s.mask.count(*c) > 0);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small();
        cfg.co_occurrence = 1.5;
        assert!(synth_shapes(&cfg, 0).is_err());
    }

    #[test]
    fn rasterize_respects_occlusion_order() {
        let a = ShapeParams {
            class: 1,
            kind: ShapeKind::Square,
            cx: 8.0,
            cy: 8.0,
            radius: 6.0,
            angle: 0.0,
        };
        let b = ShapeParams {
            class: 2,
            cx: 8.0,
            cy: 8.0,
            radius: 2.0,
            kind: ShapeKind::Square,
            angle: 0.0,
        };
        let m = rasterize_mask(&[a, b], 16, 16);
        assert_eq!(m.labels[8 * 16 + 8], 2);
        assert_eq!(m.labels[4 * 16 + 4], 1);
        assert_eq!(m.labels[0], 0);
    }
}
