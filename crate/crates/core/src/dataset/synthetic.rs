//! Synthetic cardiac-like phantoms.
//!
//! Class 1 is a disk ("left ventricle"), class 2 the ring around it ("myocardium") and
//! classes 3.. are blobs touching the ring's outside ("right ventricle" for class 3).
//! Subjects differ in pose, size, spacing, per-class intensity, bias field, distractor
//! blobs and noise. The structures shrink from the first to the last slice.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, LabeledVolume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeJitter {
    /// Maximum offset of the structure center from the image center, mm.
    pub position_mm: f64,
    /// Maximum rotation of the layout, degrees.
    pub rotation_deg: f64,
    /// Range of the inner disk radius at the first slice, mm.
    pub radius_mm: (f64, f64),
    /// Range of the ring thickness, mm.
    pub thickness_mm: (f64, f64),
    /// Relative amplitude range of the boundary wobble.
    pub wobble: f64,
    /// Relative spacing jitter: spacing is drawn from `base · [1 − j, 1 + j]`.
    pub spacing: f64,
}

impl Default for ShapeJitter {
    fn default() -> Self {
        Self {
            position_mm: 5.0,
            rotation_deg: 35.0,
            radius_mm: (5.0, 8.5),
            thickness_mm: (2.5, 4.0),
            wobble: 0.12,
            spacing: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_subjects: usize,
    /// Foreground structures C.
    pub num_classes: u8,
    pub slices_per_volume: usize,
    pub dims: (usize, usize),
    /// Base in-plane spacing, mm per pixel.
    pub spacing: (f64, f64),
    pub noise_std: f64,
    pub shape_jitter: ShapeJitter,
    /// Mean-intensity interval per class, background first (`C + 1` entries).
    pub intensity_ranges: Vec<(f64, f64)>,
    /// Upper bound on the number of distractor blobs in the background.
    pub max_distractors: usize,
    /// Maximum relative slope of the multiplicative bias field across the field of view.
    pub bias: f64,
    /// Smooth structure edges with a 3×3 binomial kernel (partial-volume effect).
    pub blur: bool,
}

/// Default interval per class. The two blood pools overlap each other, and the ring
/// overlaps the background tissue, so intensity alone does not separate the classes.
pub fn default_intensity_ranges(c: u8) -> Vec<(f64, f64)> {
    let mut r = vec![(0.25, 0.5), (0.62, 0.92), (0.15, 0.38)];
    for k in 3..=c as usize {
        r.push(if k == 3 { (0.52, 0.85) } else { (0.45, 0.8) });
    }
    r.truncate(c as usize + 1);
    r
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_subjects: 70,
            num_classes: 3,
            slices_per_volume: 8,
            dims: (56, 56),
            spacing: (1.0, 1.0),
            noise_std: 0.08,
            shape_jitter: ShapeJitter::default(),
            intensity_ranges: default_intensity_ranges(3),
            max_distractors: 4,
            bias: 0.3,
            blur: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("synthetic spec", reason));
        if self.num_subjects == 0 || self.slices_per_volume == 0 || self.dims.0 == 0 || self.dims.1 == 0 {
            return bad("subjects, slices and dims must be positive");
        }
        if self.num_classes < 1 {
            return bad("num_classes must be >= 1");
        }
        if self.intensity_ranges.len() != self.num_classes as usize + 1 {
            return bad("intensity_ranges needs one interval per class plus background");
        }
        if self.intensity_ranges.iter().any(|(a, b)| !(a <= b)) {
            return bad("intensity interval with low > high");
        }
        if !(self.spacing.0 > 0.0 && self.spacing.1 > 0.0) || !(self.noise_std >= 0.0) {
            return bad("spacing must be > 0 and noise_std >= 0");
        }
        let j = &self.shape_jitter;
        if !(j.spacing >= 0.0 && j.spacing < 1.0) || j.radius_mm.0 > j.radius_mm.1 || j.thickness_mm.0 > j.thickness_mm.1
        {
            return bad("invalid shape jitter");
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..b)
    }
}

fn sym<R: Rng>(rng: &mut R, half: f64) -> f64 {
    uniform(rng, (-half, half))
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

struct Subject {
    spacing: (f64, f64),
    cx: f64,
    cy: f64,
    theta: f64,
    radius: f64,
    aspect: f64,
    thickness: f64,
    wobble: (f64, f64),
    blobs: Vec<(f64, f64, f64, f64)>,
    means: Vec<f64>,
    body: (f64, f64),
    distractors: Vec<(Ellipse, f64)>,
    bias: (f64, f64),
    gain: f64,
    offset: f64,
}

fn draw_subject(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Subject {
    let j = &spec.shape_jitter;
    let spacing = (
        spec.spacing.0 * (1.0 + sym(rng, j.spacing)),
        spec.spacing.1 * (1.0 + sym(rng, j.spacing)),
    );
    let fov = (spec.dims.0 as f64 * spacing.0, spec.dims.1 as f64 * spacing.1);
    let theta = sym(rng, j.rotation_deg).to_radians();
    let radius = uniform(rng, j.radius_mm);
    let thickness = uniform(rng, j.thickness_mm);
    let extra = spec.num_classes.saturating_sub(2) as usize;
    // (direction, tangential half-axis, radial half-axis, penetration into the ring)
    let blobs = (0..extra)
        .map(|k| {
            let dir = theta + k as f64 * 0.7 * PI + sym(rng, 0.15);
            let scale = if k == 0 { 1.0 } else { 0.6 };
            (
                dir,
                scale * uniform(rng, (7.0, 11.0)),
                scale * uniform(rng, (3.5, 5.5)),
                uniform(rng, (0.3, 0.8)),
            )
        })
        .collect();
    let means = spec.intensity_ranges.iter().map(|r| uniform(rng, *r)).collect();
    let body = (fov.1 * uniform(rng, (0.38, 0.46)), fov.0 * uniform(rng, (0.34, 0.44)));
    let n_dis = if spec.max_distractors == 0 {
        0
    } else {
        rng.random_range(0..=spec.max_distractors)
    };
    let distractors = (0..n_dis)
        .map(|_| {
            let e = Ellipse {
                cx: sym(rng, fov.1 * 0.35),
                cy: sym(rng, fov.0 * 0.35),
                a: uniform(rng, (2.5, 7.0)),
                b: uniform(rng, (2.0, 5.0)),
                angle: uniform(rng, (0.0, PI)),
            };
            (e, uniform(rng, (0.1, 0.9)))
        })
        .collect();
    let bias_angle = uniform(rng, (0.0, 2.0 * PI));
    let bias_amp = uniform(rng, (0.0, spec.bias.max(0.0)));
    Subject {
        spacing,
        cx: sym(rng, j.position_mm),
        cy: sym(rng, j.position_mm),
        theta,
        radius,
        aspect: uniform(rng, (0.85, 1.15)),
        thickness,
        wobble: (uniform(rng, (0.0, j.wobble)), uniform(rng, (0.0, 2.0 * PI))),
        blobs,
        means,
        body,
        distractors,
        bias: (bias_angle, bias_amp),
        gain: uniform(rng, (50.0, 150.0)),
        offset: uniform(rng, (-20.0, 40.0)),
    }
}

/// Label of the physical point `(x, y)` (mm from the image center) at shrink factor `f`.
fn label_at(s: &Subject, c: u8, x: f64, y: f64, f: f64) -> u8 {
    let (dx, dy) = (x - s.cx, y - s.cy);
    let (sn, cs) = s.theta.sin_cos();
    let u = dx * cs + dy * sn;
    let v = (-dx * sn + dy * cs) * s.aspect;
    let r = (u * u + v * v).sqrt();
    let phi = v.atan2(u);
    let wob = 1.0 + s.wobble.0 * (3.0 * phi + s.wobble.1).sin();
    let inner = s.radius * f * wob;
    if r < inner {
        return 1;
    }
    if c >= 2 && r < inner + s.thickness {
        return 2;
    }
    if c == 1 {
        return 0;
    }
    let outer = s.radius * f + s.thickness;
    for (k, &(dir, ta, ra, pen)) in s.blobs.iter().enumerate() {
        let ra = ra * f.sqrt();
        let ta = ta * f.sqrt();
        let dist = outer + ra * (1.0 - pen);
        let e = Ellipse {
            cx: s.cx + dist * dir.cos(),
            cy: s.cy + dist * dir.sin(),
            a: ra,
            b: ta,
            angle: dir,
        };
        if e.rho(x, y) < 1.0 {
            return 3 + k as u8;
        }
    }
    0
}

fn blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = [0.25, 0.5, 0.25];
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..3)
                .map(|i| k[i] * img[y * w + (x + i).saturating_sub(1).min(w - 1)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..3)
                .map(|i| k[i] * tmp[(y + i).saturating_sub(1).min(h - 1) * w + x])
                .sum();
        }
    }
    out
}

fn render(spec: &SyntheticSpec, s: &Subject, rng: &mut ChaCha8Rng, index: usize) -> Result<LabeledVolume> {
    let (h, w) = spec.dims;
    let n = spec.slices_per_volume;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let mut intensities = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    let fov_w = w as f64 * s.spacing.1;
    for z in 0..n {
        let f = if n == 1 { 1.0 } else { 1.0 - 0.45 * z as f64 / (n - 1) as f64 };
        let mut img = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let y = (row as f64 - (h as f64 - 1.0) / 2.0) * s.spacing.0;
                let x = (col as f64 - (w as f64 - 1.0) / 2.0) * s.spacing.1;
                let l = label_at(s, spec.num_classes, x, y, f);
                let base = if l > 0 {
                    s.means[l as usize]
                } else {
                    let in_body = (x / s.body.0).powi(2) + (y / s.body.1).powi(2) < 1.0;
                    let mut v = if in_body { s.means[0] } else { 0.03 };
                    for (e, val) in &s.distractors {
                        if e.rho(x, y) < 1.0 {
                            v = *val;
                        }
                    }
                    v
                };
                let proj = x * s.bias.0.cos() + y * s.bias.0.sin();
                img[row * w + col] = base * (1.0 + s.bias.1 * proj / fov_w);
                labels.push(l);
            }
        }
        let img = if spec.blur { blur(&img, h, w) } else { img };
        for v in img {
            let noisy = if spec.noise_std > 0.0 { v + noise.sample(rng) } else { v };
            intensities.push((s.gain * noisy + s.offset) as f32);
        }
    }
    let vol = Volume::new(intensities, n, h, w, s.spacing, format!("syn{index:04}"))?;
    let lab = LabelVolume::new(labels, n, h, w, spec.num_classes)?;
    Ok((vol, lab))
}

/// Generates `spec.num_subjects` phantoms. Subject `i` depends only on `(spec, seed, i)`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<LabeledVolume>> {
    spec.validate()?;
    (0..spec.num_subjects)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let s = draw_subject(spec, &mut rng);
            render(spec, &s, &mut rng, i)
        })
        .collect()
}
