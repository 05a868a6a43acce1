//! Geometric and intensity augmentation of 2D slices.
//!
//! A geometric transform maps an input slice to an output slice in the order
//! flip → scale/rotate/translate (about the slice center) → elastic displacement.
//! Rendering uses inverse mapping: every output pixel looks up its source location.
//! Coordinates are `(x, y) = (column, row)`; positive angles rotate from +x toward +y.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Dense displacement field in pixels, sampled at output locations.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeomTransform {
    pub rotation_deg: f64,
    pub scale: f64,
    /// `(dx, dy)` in pixels.
    pub translation: (f64, f64),
    /// Mirror columns.
    pub flip_h: bool,
    /// Mirror rows.
    pub flip_v: bool,
    pub elastic: Option<ElasticField>,
}

impl GeomTransform {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            translation: (0.0, 0.0),
            flip_h: false,
            flip_v: false,
            elastic: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityTransform {
    pub contrast: f64,
    pub brightness: f64,
}

impl IntensityTransform {
    pub fn identity() -> Self {
        Self {
            contrast: 1.0,
            brightness: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation drawn from `[−r, r]` degrees.
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    /// Translation drawn from `[−f, f]` times the slice size, per axis.
    pub translation_frac: f64,
    pub flip_prob: f64,
    /// Probability of adding an elastic field.
    pub elastic_prob: f64,
    /// Largest displacement of the elastic field, pixels.
    pub elastic_alpha: f64,
    /// Gaussian smoothing width of the elastic field, pixels.
    pub elastic_sigma: f64,
    pub contrast: (f64, f64),
    pub brightness: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            scale: (0.9, 1.1),
            translation_frac: 0.05,
            flip_prob: 0.5,
            elastic_prob: 0.5,
            elastic_alpha: 2.0,
            elastic_sigma: 5.0,
            contrast: (0.8, 1.2),
            brightness: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    /// Zero-width ranges everywhere: every sampled transform is the identity.
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translation_frac: 0.0,
            flip_prob: 0.0,
            elastic_prob: 0.0,
            elastic_alpha: 0.0,
            elastic_sigma: 1.0,
            contrast: (1.0, 1.0),
            brightness: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.translation_frac >= 0.0
            && (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=1.0).contains(&self.elastic_prob)
            && self.elastic_alpha >= 0.0
            && self.elastic_sigma > 0.0
            && self.contrast.0 > 0.0
            && self.contrast.0 <= self.contrast.1
            && self.brightness.0 <= self.brightness.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid augmentation ranges".into()))
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..=b)
    }
}

/// Draws an affine + flip transform (no elastic field).
pub fn sample_affine<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, dims: (usize, usize)) -> GeomTransform {
    let flip_h = rng.random_bool(cfg.flip_prob);
    let flip_v = rng.random_bool(cfg.flip_prob);
    let rotation_deg = uniform(rng, (-cfg.rotation_deg, cfg.rotation_deg));
    let scale = uniform(rng, cfg.scale);
    let ty = uniform(rng, (-cfg.translation_frac, cfg.translation_frac)) * dims.0 as f64;
    let tx = uniform(rng, (-cfg.translation_frac, cfg.translation_frac)) * dims.1 as f64;
    GeomTransform {
        rotation_deg,
        scale,
        translation: (tx, ty),
        flip_h,
        flip_v,
        elastic: None,
    }
}

/// Draws a full geometric transform, adding an elastic field with probability `cfg.elastic_prob`.
pub fn sample_geom<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, dims: (usize, usize)) -> GeomTransform {
    let mut t = sample_affine(rng, cfg, dims);
    if rng.random_bool(cfg.elastic_prob) && cfg.elastic_alpha > 0.0 {
        t.elastic = Some(sample_elastic(rng, dims, cfg.elastic_alpha, cfg.elastic_sigma));
    }
    t
}

pub fn sample_intensity<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> IntensityTransform {
    IntensityTransform {
        contrast: uniform(rng, cfg.contrast),
        brightness: uniform(rng, cfg.brightness),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn smooth(field: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * field[y * w + clampi(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clampi(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Smoothed uniform noise, rescaled so the largest displacement component equals `alpha`.
pub fn sample_elastic<R: Rng + ?Sized>(rng: &mut R, dims: (usize, usize), alpha: f64, sigma: f64) -> ElasticField {
    let (h, w) = dims;
    let kernel = gaussian_kernel(sigma);
    let mut component = || {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = smooth(&raw, h, w, &kernel);
        let m = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 {
            s.into_iter().map(|v| v * alpha / m).collect()
        } else {
            s
        }
    };
    let dx = component();
    let dy = component();
    ElasticField {
        height: h,
        width: w,
        dx,
        dy,
    }
}

/// Pixel types a geometric transform can resample.
pub trait Pixel: Copy + Default {
    /// Discrete values (labels) admit nearest-neighbor interpolation only.
    const DISCRETE: bool;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Pixel for f32 {
    const DISCRETE: bool = false;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Pixel for u8 {
    const DISCRETE: bool = true;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as u8
    }
}

/// Source location `(x, y)` of output pixel `(x, y)`.
fn source_location(t: &GeomTransform, h: usize, w: usize, x: usize, y: usize) -> (f64, f64) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (mut u, mut v) = (x as f64, y as f64);
    if let Some(e) = &t.elastic {
        u += e.dx[y * w + x];
        v += e.dy[y * w + x];
    }
    // inverse affine: p = S⁻¹R⁻¹(q − c − t) + c
    let (s, c) = t.rotation_deg.to_radians().sin_cos();
    let (qx, qy) = (u - cx - t.translation.0, v - cy - t.translation.1);
    let inv = 1.0 / t.scale;
    let mut px = (c * qx + s * qy) * inv + cx;
    let mut py = (-s * qx + c * qy) * inv + cy;
    if t.flip_h {
        px = 2.0 * cx - px;
    }
    if t.flip_v {
        py = 2.0 * cy - py;
    }
    (px, py)
}

/// Applies `t` to an `h × w` slice; out-of-bounds samples are 0.
pub fn apply_geom<P: Pixel>(img: &[P], h: usize, w: usize, t: &GeomTransform, interp: Interp) -> Result<Vec<P>> {
    if P::DISCRETE && interp == Interp::Bilinear {
        return Err(Error::invalid("interp", "label maps require nearest-neighbor interpolation"));
    }
    if img.len() != h * w {
        return Err(Error::DimMismatch(format!("{} pixels for {h}x{w}", img.len())));
    }
    if let Some(e) = &t.elastic {
        if (e.height, e.width) != (h, w) {
            return Err(Error::DimMismatch(format!(
                "elastic field {}x{} for a {h}x{w} slice",
                e.height, e.width
            )));
        }
    }
    if t.is_identity() {
        return Ok(img.to_vec());
    }
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            img[yy as usize * w + xx as usize].to_f64()
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_location(t, h, w, x, y);
            let v = match interp {
                Interp::Nearest => {
                    let (xi, yi) = (sx.round() as isize, sy.round() as isize);
                    if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                        P::default().to_f64()
                    } else {
                        img[yi as usize * w + xi as usize].to_f64()
                    }
                }
                Interp::Bilinear => {
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                    top * (1.0 - fy) + bot * fy
                }
            };
            out.push(P::from_f64(v));
        }
    }
    Ok(out)
}

/// Inverse of an affine + flip transform, expressed again as flip followed by affine.
pub fn invert_geom(t: &GeomTransform) -> Result<GeomTransform> {
    if t.elastic.is_some() {
        return Err(Error::NotInvertible("elastic displacement field"));
    }
    // Conjugating by a single mirror reverses the rotation sense.
    let single_mirror = t.flip_h != t.flip_v;
    let theta = if single_mirror { t.rotation_deg } else { -t.rotation_deg };
    let inv_scale = 1.0 / t.scale;
    // t' = −(1/s) · M · R(−θ) · t
    let (s, c) = (-t.rotation_deg).to_radians().sin_cos();
    let (tx, ty) = t.translation;
    let mut rx = c * tx - s * ty;
    let mut ry = s * tx + c * ty;
    if t.flip_h {
        rx = -rx;
    }
    if t.flip_v {
        ry = -ry;
    }
    Ok(GeomTransform {
        rotation_deg: theta,
        scale: inv_scale,
        translation: (-inv_scale * rx, -inv_scale * ry),
        flip_h: t.flip_h,
        flip_v: t.flip_v,
        elastic: None,
    })
}

/// `contrast · x + brightness`, unclamped.
pub fn apply_intensity(img: &[f32], t: &IntensityTransform) -> Vec<f32> {
    let (a, b) = (t.contrast as f32, t.brightness as f32);
    img.iter().map(|&v| a * v + b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<u8> {
        (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                u8::from((r0..r1).contains(&r) && (c0..c1).contains(&c))
            })
            .collect()
    }

    #[test]
    fn degenerate_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_geom(&mut rng, &AugmentConfig::none(), (8, 8));
        assert!(t.is_identity());
        assert_eq!(sample_intensity(&mut rng, &AugmentConfig::none()), IntensityTransform::identity());
    }

    #[test]
    fn same_rng_state_same_transform() {
        let cfg = AugmentConfig::default();
        let a = sample_geom(&mut ChaCha8Rng::seed_from_u64(3), &cfg, (16, 16));
        let b = sample_geom(&mut ChaCha8Rng::seed_from_u64(3), &cfg, (16, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_stays_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t = sample_affine(&mut rng, &cfg, (16, 16));
            assert!(t.rotation_deg.abs() <= 15.0);
            assert!((0.9..=1.1).contains(&t.scale));
        }
    }

    #[test]
    fn identity_and_double_flip() {
        let img: Vec<f32> = (0..30).map(|v| v as f32 * 0.37).collect();
        assert_eq!(apply_geom(&img, 5, 6, &GeomTransform::identity(), Interp::Bilinear).unwrap(), img);
        let flip = GeomTransform {
            flip_h: true,
            ..GeomTransform::identity()
        };
        let once = apply_geom(&img, 5, 6, &flip, Interp::Bilinear).unwrap();
        assert_eq!(once[0], img[5]);
        assert_eq!(apply_geom(&once, 5, 6, &flip, Interp::Bilinear).unwrap(), img);
    }

    #[test]
    fn quarter_turn_transposes_a_rectangle() {
        let (h, w) = (11, 11);
        let mask = rect(h, w, 3, 5, 2, 9);
        let t = GeomTransform {
            rotation_deg: 90.0,
            ..GeomTransform::identity()
        };
        let out = apply_geom(&mask, h, w, &t, Interp::Nearest).unwrap();
        // index-permutation oracle: output (x, y) reads source (y, 2c − x) with c = 5
        let oracle: Vec<u8> = (0..h * w).map(|i| mask[(10 - i % w) * w + i / w]).collect();
        assert_eq!(out, oracle);
        assert_eq!(out.iter().filter(|&&v| v == 1).count(), 14);
        assert_eq!(out, rect(h, w, 2, 9, 6, 8));
    }

    #[test]
    fn bilinear_on_labels_is_rejected() {
        let lab = vec![0u8; 16];
        assert!(apply_geom(&lab, 4, 4, &GeomTransform::identity(), Interp::Bilinear).is_err());
    }

    #[test]
    fn inverse_of_flip_and_rotation() {
        let f = GeomTransform {
            flip_v: true,
            ..GeomTransform::identity()
        };
        assert_eq!(invert_geom(&f).unwrap(), f);
        let r = GeomTransform {
            rotation_deg: 12.0,
            scale: 1.25,
            ..GeomTransform::identity()
        };
        let inv = invert_geom(&r).unwrap();
        assert_eq!(inv.rotation_deg, -12.0);
        assert_eq!(inv.scale, 0.8);
        let mut e = r.clone();
        e.elastic = Some(sample_elastic(&mut ChaCha8Rng::seed_from_u64(0), (4, 4), 1.0, 1.0));
        assert!(matches!(invert_geom(&e), Err(Error::NotInvertible(_))));
    }

    #[test]
    fn intensity_transform_arithmetic() {
        let img = [0.0f32, 1.0, -2.5, 0.3];
        assert_eq!(apply_intensity(&img, &IntensityTransform::identity()), img);
        let up = apply_intensity(&img, &IntensityTransform { contrast: 2.0, brightness: 0.0 });
        let back = apply_intensity(&up, &IntensityTransform { contrast: 0.5, brightness: 0.0 });
        assert_eq!(back, img);
        let t = IntensityTransform {
            contrast: 1.1,
            brightness: 0.05,
        };
        let out = apply_intensity(&img, &t);
        for (o, i) in out.iter().zip(&img) {
            assert_eq!(*o, 1.1f32 * i + 0.05f32);
        }
    }
}
