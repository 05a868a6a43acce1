//! Intensity normalization, in-plane resampling and crop-or-pad.
//!
//! Percentiles use linear interpolation between order statistics: the `p`-th percentile
//! of `n` sorted values sits at fractional rank `p/100 · (n − 1)`.

use serde::{Deserialize, Serialize};

use crate::dataset::{LabelVolume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Target in-plane spacing, mm per pixel (row, column).
    pub target_resolution: (f64, f64),
    pub target_dims: (usize, usize),
    pub percentiles: (f64, f64),
}

impl PreprocessConfig {
    pub fn paper() -> Self {
        Self {
            target_resolution: (1.367, 1.367),
            target_dims: (192, 192),
            percentiles: (1.0, 99.0),
        }
    }

    pub fn desk() -> Self {
        Self {
            target_resolution: (1.0, 1.0),
            target_dims: (48, 48),
            percentiles: (1.0, 99.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.percentiles;
        if !(self.target_resolution.0 > 0.0 && self.target_resolution.1 > 0.0) {
            return Err(Error::Config("target_resolution must be > 0".into()));
        }
        if self.target_dims.0 == 0 || self.target_dims.1 == 0 {
            return Err(Error::Config("target_dims must be > 0".into()));
        }
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::Config("percentiles must satisfy 0 <= low < high <= 100".into()));
        }
        Ok(())
    }
}

/// Percentile `p` (0–100) of already sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `(x − x_lo)/(x_hi − x_lo)` over the whole volume, without clamping.
pub fn percentile_normalize_with(vol: &Volume, percentiles: (f64, f64)) -> Result<Volume> {
    if vol.intensities.is_empty() {
        return Err(Error::invalid("volume", "empty"));
    }
    let mut sorted: Vec<f64> = vol.intensities.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, percentiles.0);
    let hi = percentile_sorted(&sorted, percentiles.1);
    if hi <= lo {
        return Err(Error::ConstantVolume(lo));
    }
    let scale = 1.0 / (hi - lo);
    let intensities = vol.intensities.iter().map(|&v| ((v as f64 - lo) * scale) as f32).collect();
    Ok(Volume {
        intensities,
        ..vol.clone()
    })
}

/// Normalization with the 1st and 99th percentiles.
pub fn percentile_normalize(vol: &Volume) -> Result<Volume> {
    percentile_normalize_with(vol, (1.0, 99.0))
}

/// Source coordinate of output index `i` when resampling by `ratio = out_spacing / in_spacing`
/// with pixel centers aligned.
fn source_coord(i: usize, ratio: f64) -> f64 {
    (i as f64 + 0.5) * ratio - 0.5
}

fn output_len(n: usize, in_spacing: f64, out_spacing: f64) -> usize {
    ((n as f64 * in_spacing / out_spacing).round() as usize).max(1)
}

/// Bilinear resampling of one `h × w` slice to `oh × ow`; out-of-range samples clamp to the edge.
pub fn resample_bilinear(img: &[f32], h: usize, w: usize, oh: usize, ow: usize, ratio: (f64, f64)) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let y = source_coord(r, ratio.0).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for c in 0..ow {
            let x = source_coord(c, ratio.1).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let v = |yy: usize, xx: usize| img[yy * w + xx] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Nearest-neighbor resampling (used for label maps).
pub fn resample_nearest<T: Copy>(img: &[T], h: usize, w: usize, oh: usize, ow: usize, ratio: (f64, f64)) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let y = (source_coord(r, ratio.0) + 0.5).floor().clamp(0.0, (h - 1) as f64) as usize;
        for c in 0..ow {
            let x = (source_coord(c, ratio.1) + 0.5).floor().clamp(0.0, (w - 1) as f64) as usize;
            out.push(img[y * w + x]);
        }
    }
    out
}

/// Resamples every slice to `cfg.target_resolution`.
pub fn resample_inplane(
    vol: &Volume,
    labels: Option<&LabelVolume>,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Option<LabelVolume>)> {
    if !(vol.spacing.0 > 0.0 && vol.spacing.1 > 0.0) {
        return Err(Error::invalid("spacing", "missing or non-positive spacing"));
    }
    if let Some(l) = labels {
        if !l.matches(vol) {
            return Err(Error::DimMismatch(format!("labels of {}", vol.subject_id)));
        }
    }
    let (rf_y, rf_x) = cfg.target_resolution;
    let oh = output_len(vol.height, vol.spacing.0, rf_y);
    let ow = output_len(vol.width, vol.spacing.1, rf_x);
    let ratio = (rf_y / vol.spacing.0, rf_x / vol.spacing.1);
    let mut img = Vec::with_capacity(vol.slices * oh * ow);
    for s in 0..vol.slices {
        img.extend(resample_bilinear(vol.slice(s), vol.height, vol.width, oh, ow, ratio));
    }
    let out_vol = Volume {
        intensities: img,
        slices: vol.slices,
        height: oh,
        width: ow,
        spacing: cfg.target_resolution,
        subject_id: vol.subject_id.clone(),
    };
    let out_lab = labels.map(|l| {
        let mut lab = Vec::with_capacity(l.slices * oh * ow);
        for s in 0..l.slices {
            lab.extend(resample_nearest(l.slice(s), l.height, l.width, oh, ow, ratio));
        }
        LabelVolume {
            labels: lab,
            slices: l.slices,
            height: oh,
            width: ow,
            num_classes: l.num_classes,
        }
    });
    Ok((out_vol, out_lab))
}

/// Centered crop or pad of one slice; an odd remainder goes to the high-index side.
pub fn crop_or_pad<T: Copy>(img: &[T], h: usize, w: usize, target: (usize, usize), fill: T) -> Vec<T> {
    let (th, tw) = target;
    // offset of the source origin inside the target (may be negative when cropping)
    let offset = |t: usize, n: usize| {
        if t >= n {
            ((t - n) / 2) as isize
        } else {
            -(((n - t) / 2) as isize)
        }
    };
    let (oy, ox) = (offset(th, h), offset(tw, w));
    let mut out = vec![fill; th * tw];
    for r in 0..th {
        let sy = r as isize - oy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for c in 0..tw {
            let sx = c as isize - ox;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            out[r * tw + c] = img[sy as usize * w + sx as usize];
        }
    }
    out
}

/// Normalize, resample and crop/pad one volume (and its labels), in that order.
pub fn preprocess_volume(
    vol: &Volume,
    labels: Option<&LabelVolume>,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Option<LabelVolume>)> {
    cfg.validate()?;
    let norm = percentile_normalize_with(vol, cfg.percentiles)?;
    let (res, lab) = resample_inplane(&norm, labels, cfg)?;
    let (th, tw) = cfg.target_dims;
    let mut img = Vec::with_capacity(res.slices * th * tw);
    for s in 0..res.slices {
        img.extend(crop_or_pad(res.slice(s), res.height, res.width, cfg.target_dims, 0.0));
    }
    let out_lab = lab.map(|l| {
        let mut v = Vec::with_capacity(l.slices * th * tw);
        for s in 0..l.slices {
            v.extend(crop_or_pad(l.slice(s), l.height, l.width, cfg.target_dims, 0u8));
        }
        LabelVolume {
            labels: v,
            height: th,
            width: tw,
            ..l
        }
    });
    Ok((
        Volume {
            intensities: img,
            height: th,
            width: tw,
            ..res
        },
        out_lab,
    ))
}
