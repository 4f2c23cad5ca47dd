//! Random flips, rotation, shift and zoom with bilinear resampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_p: f64,
    pub max_rotation_deg: f64,
    /// Largest shift per axis as a fraction of the extent.
    pub max_shift: f64,
    pub zoom_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, flip_p: 0.5, max_rotation_deg: 15.0, max_shift: 0.1, zoom_range: (0.9, 1.1) }
    }
}

/// One concrete draw of the random transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_deg: f64,
    /// (rows, cols) shift as fractions of the extent.
    pub shift: (f64, f64),
    pub zoom: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { flip_h: false, flip_v: false, rotation_deg: 0.0, shift: (0.0, 0.0), zoom: 1.0 };

    /// Draws flips, then rotation, shifts and zoom, in that order.
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let sym = |rng: &mut dyn rand::RngCore, a: f64| if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
        let flip_h = rng.gen::<f64>() < cfg.flip_p;
        let flip_v = rng.gen::<f64>() < cfg.flip_p;
        let rotation_deg = sym(rng, cfg.max_rotation_deg);
        let shift = (sym(rng, cfg.max_shift), sym(rng, cfg.max_shift));
        let (lo, hi) = cfg.zoom_range;
        let zoom = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        AugmentParams { flip_h, flip_v, rotation_deg, shift, zoom }
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shift == (0.0, 0.0) && self.zoom == 1.0
    }

    /// Applies the transform to an `[h,w,c]` image. Output pixels that map
    /// outside the source read zeros; values are clipped to [0,1].
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let s = image.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = image.data();
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let sy = if self.flip_v { h - 1 - y } else { y };
                let sx = if self.flip_h { w - 1 - x } else { x };
                out[(y * w + x) * c..(y * w + x + 1) * c]
                    .copy_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
            }
        }
        if !self.is_affine_identity() {
            out = self.resample(&out, h, w, c);
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(s.to_vec(), out).expect("shape preserved")
    }

    /// Inverse-maps each output pixel about the image centre and samples
    /// the source bilinearly.
    fn resample(&self, src: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (dy, dx) = (self.shift.0 * h as f64, self.shift.1 * w as f64);
        let at = |yy: isize, xx: isize, ch: usize| -> f64 {
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                0.0
            } else {
                src[(yy as usize * w + xx as usize) * c + ch]
            }
        };
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = ((y as f64 - cy - dy) / self.zoom, (x as f64 - cx - dx) / self.zoom);
                let qy = cos * py + sin * px + cy;
                let qx = -sin * py + cos * px + cx;
                let (y0, x0) = (qy.floor(), qx.floor());
                let (fy, fx) = (qy - y0, qx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                for ch in 0..c {
                    let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x0 + 1, ch) * fx;
                    let bottom = at(y0 + 1, x0, ch) * (1.0 - fx) + at(y0 + 1, x0 + 1, ch) * fx;
                    out[(y * w + x) * c + ch] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        out
    }
}

/// Draws a transform from `rng` and applies it.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    AugmentParams::draw(cfg, rng).apply(image)
}
