//! Input preparation: random scale/crop, rotation and mirror applied jointly
//! to an image and its mask, resizing to the network input and normalization.

use rand::Rng;

use super::config::AugmentConfig;
use crate::episodes::LabelMask;
use crate::tensor::Tensor;

pub const IMAGE_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel standardization of an `[H, W, 3]` image in `[0, 1]`.
pub fn normalize_image(img: &Tensor) -> Tensor {
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - IMAGE_MEAN[c]) / IMAGE_STD[c];
        }
    }
    out
}

/// Geometry of one augmentation draw, relative to an `S×S` output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub angle: f64,
    pub mirror: bool,
    /// Crop origin in the scaled frame, in output pixels.
    pub offset_x: f64,
    pub offset_y: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        angle: 0.0,
        mirror: false,
        offset_x: 0.0,
        offset_y: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, size: usize, rng: &mut R) -> Transform {
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let angle = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
        } else {
            0.0
        };
        let mirror = rng.random_bool(cfg.mirror_prob);
        let slack = size as f64 * (scale - 1.0);
        let mut offset = || {
            if slack > 0.0 {
                rng.random_range(0.0..=slack)
            } else {
                slack / 2.0
            }
        };
        let offset_x = offset();
        let offset_y = offset();
        Transform {
            scale,
            angle,
            mirror,
            offset_x,
            offset_y,
        }
    }

    /// Maps the centre of output pixel `(u, v)` to fractional source
    /// coordinates in a `src_h × src_w` image.
    fn source(&self, u: usize, v: usize, size: usize, src_h: usize, src_w: usize) -> (f64, f64) {
        let big = size as f64 * self.scale;
        let c = big / 2.0;
        let px = u as f64 + 0.5 + self.offset_x - c;
        let py = v as f64 + 0.5 + self.offset_y - c;
        let (s, co) = self.angle.sin_cos();
        let mut qx = co * px + s * py + c;
        let qy = -s * px + co * py + c;
        if self.mirror {
            qx = big - qx;
        }
        (qx / big * src_w as f64, qy / big * src_h as f64)
    }
}

/// Resamples `image` (bilinear, mean-colour padding) and `mask` (nearest,
/// background padding) to `size × size` under `t`.
pub fn apply_transform(image: &Tensor, mask: &LabelMask, size: usize, t: &Transform) -> (Tensor, LabelMask) {
    let (h, w, _) = image.dims3();
    assert_eq!((mask.height, mask.width), (h, w));
    let mut out = Vec::with_capacity(size * size * 3);
    let mut labels = Vec::with_capacity(size * size);
    for v in 0..size {
        for u in 0..size {
            let (sx, sy) = t.source(u, v, size, h, w);
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                out.extend_from_slice(&IMAGE_MEAN);
                labels.push(0);
                continue;
            }
            labels.push(mask.labels[sy as usize * w + sx as usize]);
            let fx = (sx - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (sy - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            for c in 0..3 {
                let top = image.at3(y0, x0, c) * (1.0 - ax) + image.at3(y0, x1, c) * ax;
                let bot = image.at3(y1, x0, c) * (1.0 - ax) + image.at3(y1, x1, c) * ax;
                out.push(top * (1.0 - ay) + bot * ay);
            }
        }
    }
    (
        Tensor::from_vec(&[size, size, 3], out),
        LabelMask::new(size, size, labels),
    )
}

/// Network-ready `(normalized image, mask)` at `size × size`; random
/// geometry is drawn only when `aug` is given and enabled.
pub fn prepare<R: Rng + ?Sized>(
    image: &Tensor,
    mask: &LabelMask,
    size: usize,
    aug: Option<&AugmentConfig>,
    rng: &mut R,
) -> (Tensor, LabelMask) {
    let t = match aug {
        Some(cfg) if cfg.enabled => Transform::sample(cfg, size, rng),
        _ => Transform::IDENTITY,
    };
    let (img, m) = apply_transform(image, mask, size, &t);
    (normalize_image(&img), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> (Tensor, LabelMask) {
        let mut d = Vec::new();
        let mut l = Vec::new();
        for y in 0..h {
            for x in 0..w {
                d.extend_from_slice(&[x as f64 / w as f64, y as f64 / h as f64, 0.5]);
                l.push(((x + y) % 3) as u8);
            }
        }
        (Tensor::from_vec(&[h, w, 3], d), LabelMask::new(h, w, l))
    }

    #[test]
    fn identity_at_same_size_is_exact() {
        let (img, m) = ramp(8, 8);
        let (o, om) = apply_transform(&img, &m, 8, &Transform::IDENTITY);
        assert!(o.max_abs_diff(&img) < 1e-12);
        assert_eq!(om, m);
    }

    #[test]
    fn mirror_flips_columns() {
        let (img, m) = ramp(6, 6);
        let t = Transform {
            mirror: true,
            ..Transform::IDENTITY
        };
        let (o, om) = apply_transform(&img, &m, 6, &t);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(om.labels[y * 6 + x], m.labels[y * 6 + 5 - x]);
                assert!((o.at3(y, x, 0) - img.at3(y, 5 - x, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_and_mask_move_together() {
        // a bright square and its label stay aligned under any augmentation
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentConfig::default();
        let n = 32;
        let mut img = Tensor::zeros(&[n, n, 3]);
        let mut lab = vec![0u8; n * n];
        for y in 12..20 {
            for x in 12..20 {
                lab[y * n + x] = 1;
                for c in 0..3 {
                    img.set3(y, x, c, 1.0);
                }
            }
        }
        let m = LabelMask::new(n, n, lab);
        for _ in 0..20 {
            let t = Transform::sample(&cfg, n, &mut rng);
            let (o, om) = apply_transform(&img, &m, n, &t);
            let agree = (0..n * n)
                .filter(|&i| (o.data()[i * 3] > 0.5) == (om.labels[i] == 1))
                .count();
            assert!(agree as f64 >= 0.97 * (n * n) as f64, "{t:?}");
            assert!(om.count(1) > 0);
        }
    }

    #[test]
    fn normalization_is_per_channel() {
        let img = Tensor::from_vec(&[1, 1, 3], IMAGE_MEAN.to_vec());
        assert!(normalize_image(&img).data().iter().all(|v| v.abs() < 1e-15));
    }
}
