//! k-fold rotational replication, wedge masks and circular masking.
//!
//! Angles are measured from the upward vertical, counter-clockwise as seen on
//! screen. Sector `s` covers `[s·2π/k, (s+1)·2π/k)`; sector 0 is the canonical
//! wedge whose content is replicated into the others. Pixel centres sit on
//! integer `(row, col)` coordinates, so the canvas centre of an even canvas is
//! a half-integer point.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::request::SymmetryConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Angle of the offset `(dr, dc)` in `[0, 2π)`.
#[inline]
pub fn polar_angle(dr: f64, dc: f64) -> f64 {
    if dr == 0.0 && dc == 0.0 {
        return 0.0;
    }
    let a = (-dc).atan2(-dr);
    if a < 0.0 {
        a + TAU
    } else {
        a
    }
}

/// Rotates an offset counter-clockwise by `phi` radians.
#[inline]
pub fn rotate_offset(dr: f64, dc: f64, phi: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    (dr * c - dc * s, dr * s + dc * c)
}

#[inline]
fn sector_of(dr: f64, dc: f64, k: u32) -> u32 {
    let w = TAU / k as f64;
    ((polar_angle(dr, dc) / w).floor() as u32).min(k - 1)
}

/// Snaps coordinates that are integral up to rounding noise.
#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn check_params(canvas: usize, k: u32, center: (f64, f64)) -> Result<()> {
    if k < 2 {
        return Err(Error::Param(format!("repetition number must be ≥ 2, got {k}")));
    }
    let edge = canvas as f64 - 1.0;
    if canvas == 0 || !(0.0..=edge).contains(&center.0) || !(0.0..=edge).contains(&center.1) {
        return Err(Error::Param(format!("center {center:?} outside {canvas}x{canvas} canvas")));
    }
    Ok(())
}

/// Boolean mask of the canonical wedge inside the inscribed disc.
#[derive(Clone, Debug, PartialEq)]
pub struct WedgeMask {
    pub k: u32,
    pub center: (f64, f64),
    pub canvas: usize,
    pub radius: f64,
    pub mask: Vec<bool>,
}

impl WedgeMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_fn(self.canvas, self.canvas, |r, c| {
            if self.mask[r * self.canvas + c] {
                0.0
            } else {
                1.0
            }
        })
    }
}

pub fn build_wedge_mask(canvas: usize, k: u32, center: (f64, f64)) -> Result<WedgeMask> {
    check_params(canvas, k, center)?;
    let radius = SymmetryConfig::max_radius(canvas, center);
    let mut mask = vec![false; canvas * canvas];
    for r in 0..canvas {
        for c in 0..canvas {
            let (dr, dc) = (r as f64 - center.0, c as f64 - center.1);
            if dr.hypot(dc) <= radius && sector_of(dr, dc, k) == 0 {
                mask[r * canvas + c] = true;
            }
        }
    }
    Ok(WedgeMask {
        k,
        center,
        canvas,
        radius,
        mask,
    })
}

#[derive(Clone, Debug)]
enum Source {
    Keep,
    Copy(u32),
    Blend { idx: [u32; 4], w: [f32; 4], n: u8 },
}

/// Precomputed replication map for one `(canvas, k, center, radius, interpolation)`.
///
/// Only pixels within `radius` of the centre are rewritten, and their new
/// values depend only on canonical-wedge pixels, which makes replication
/// idempotent in both interpolation modes.
///
/// Nearest mode copies each pixel from the canonical pixel nearest to its
/// rotation back into the canonical wedge. Bilinear mode blends the
/// canonical neighbours of that point.
#[derive(Clone, Debug)]
pub struct Replicator {
    canvas: usize,
    k: u32,
    center: (f64, f64),
    radius: f64,
    interpolation: Interpolation,
    plan: Vec<Source>,
}

impl Replicator {
    pub fn new(
        canvas: usize,
        k: u32,
        center: (f64, f64),
        radius: f64,
        interpolation: Interpolation,
    ) -> Result<Self> {
        check_params(canvas, k, center)?;
        let radius = radius.min(SymmetryConfig::max_radius(canvas, center));
        let plan = match interpolation {
            Interpolation::Nearest => nearest_plan(canvas, k, center, radius),
            Interpolation::Bilinear => bilinear_plan(canvas, k, center, radius),
        };
        Ok(Self {
            canvas,
            k,
            center,
            radius,
            interpolation,
            plan,
        })
    }

    pub fn from_config(canvas: usize, cfg: &SymmetryConfig) -> Result<Self> {
        Self::new(canvas, cfg.k, cfg.center, cfg.radius, cfg.interpolation)
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    /// Replicates an interleaved `canvas x canvas x channels` buffer in place.
    /// Values are not clamped, so this also works on noisy diffusion states.
    pub fn apply_in_place(&self, data: &mut [f32], channels: usize) {
        assert_eq!(data.len(), self.canvas * self.canvas * channels, "buffer shape mismatch");
        let src = data.to_vec();
        for (p, source) in self.plan.iter().enumerate() {
            match source {
                Source::Keep => {}
                Source::Copy(q) => {
                    let q = *q as usize;
                    for ch in 0..channels {
                        data[p * channels + ch] = src[q * channels + ch];
                    }
                }
                Source::Blend { idx, w, n } => {
                    // offsets from the first sample keep constant regions exact
                    for ch in 0..channels {
                        let base = src[idx[0] as usize * channels + ch];
                        let mut acc = base;
                        for i in 1..*n as usize {
                            acc += w[i] * (src[idx[i] as usize * channels + ch] - base);
                        }
                        data[p * channels + ch] = acc;
                    }
                }
            }
        }
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        if img.height() != self.canvas || img.width() != self.canvas {
            return Err(Error::Param(format!(
                "image is {}x{}, replicator expects {}x{}",
                img.height(),
                img.width(),
                self.canvas,
                self.canvas
            )));
        }
        let mut data = img.data().to_vec();
        self.apply_in_place(&mut data, img.channels());
        ImageTensor::from_clamped(self.canvas, self.canvas, img.channels(), data)
    }
}

fn in_disc(canvas: usize, center: (f64, f64), radius: f64, r: i64, c: i64) -> bool {
    r >= 0
        && c >= 0
        && (r as usize) < canvas
        && (c as usize) < canvas
        && (r as f64 - center.0).hypot(c as f64 - center.1) <= radius
}

/// Canonical-wedge pixel that supplies `p` in nearest mode: the pixel
/// nearest to `p` rotated back by its sector, falling back to the closest
/// canonical corner of the containing grid cell. `None` for canonical
/// pixels, pixels outside the disc, and pixels without a canonical source.
fn nearest_source(canvas: usize, k: u32, center: (f64, f64), radius: f64, p: usize) -> Option<usize> {
    let (r, c) = ((p / canvas) as i64, (p % canvas) as i64);
    if !in_disc(canvas, center, radius, r, c) {
        return None;
    }
    let (dr, dc) = (r as f64 - center.0, c as f64 - center.1);
    let s = sector_of(dr, dc, k);
    if s == 0 {
        return None;
    }
    let (qr, qc) = rotate_offset(dr, dc, -(s as f64) * TAU / k as f64);
    let (y, x) = (snap(center.0 + qr), snap(center.1 + qc));
    let canonical = |a: i64, b: i64| {
        in_disc(canvas, center, radius, a, b) && sector_of(a as f64 - center.0, b as f64 - center.1, k) == 0
    };
    let (nr, nc) = (y.round() as i64, x.round() as i64);
    if canonical(nr, nc) {
        return Some(nr as usize * canvas + nc as usize);
    }
    let (y0, x0) = (y.floor() as i64, x.floor() as i64);
    let mut corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
    corners.sort_by(|a, b| {
        let da = (a.0 as f64 - y).hypot(a.1 as f64 - x);
        let db = (b.0 as f64 - y).hypot(b.1 as f64 - x);
        da.total_cmp(&db)
    });
    corners
        .iter()
        .find(|&&(a, b)| canonical(a, b))
        .map(|&(a, b)| a as usize * canvas + b as usize)
}

fn nearest_plan(canvas: usize, k: u32, center: (f64, f64), radius: f64) -> Vec<Source> {
    (0..canvas * canvas)
        .map(|p| match nearest_source(canvas, k, center, radius, p) {
            Some(q) => Source::Copy(q as u32),
            None => Source::Keep,
        })
        .collect()
}

fn bilinear_plan(canvas: usize, k: u32, center: (f64, f64), radius: f64) -> Vec<Source> {
    let n = canvas * canvas;
    let canonical = |r: i64, c: i64| {
        in_disc(canvas, center, radius, r, c) && sector_of(r as f64 - center.0, c as f64 - center.1, k) == 0
    };
    (0..n)
        .map(|p| {
            let (r, c) = ((p / canvas) as i64, (p % canvas) as i64);
            if !in_disc(canvas, center, radius, r, c) {
                return Source::Keep;
            }
            let (dr, dc) = (r as f64 - center.0, c as f64 - center.1);
            let s = sector_of(dr, dc, k);
            if s == 0 {
                return Source::Keep;
            }
            let (qr, qc) = rotate_offset(dr, dc, -(s as f64) * TAU / k as f64);
            let (y, x) = (snap(center.0 + qr), snap(center.1 + qc));
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let corners = [
                (y0 as i64, x0 as i64, (1.0 - fy) * (1.0 - fx)),
                (y0 as i64, x0 as i64 + 1, (1.0 - fy) * fx),
                (y0 as i64 + 1, x0 as i64, fy * (1.0 - fx)),
                (y0 as i64 + 1, x0 as i64 + 1, fy * fx),
            ];
            let mut idx = [0u32; 4];
            let mut w = [0f32; 4];
            let mut m = 0usize;
            let mut total = 0.0f64;
            for &(cr, cc, wt) in &corners {
                if wt > 0.0 && canonical(cr, cc) {
                    idx[m] = (cr as usize * canvas + cc as usize) as u32;
                    w[m] = wt as f32;
                    total += wt;
                    m += 1;
                }
            }
            if m == 0 {
                let (nr, nc) = (y.round() as i64, x.round() as i64);
                return if canonical(nr, nc) {
                    Source::Copy((nr as usize * canvas + nc as usize) as u32)
                } else {
                    Source::Keep
                };
            }
            if m == 1 {
                return Source::Copy(idx[0]);
            }
            for wi in w.iter_mut().take(m) {
                *wi = (*wi as f64 / total) as f32;
            }
            Source::Blend { idx, w, n: m as u8 }
        })
        .collect()
}

/// Makes `img` k-fold rotationally symmetric about `center` by replicating the
/// canonical wedge. Works on the largest disc that fits on the canvas; pixels
/// outside it are unchanged.
pub fn symmetrize(
    img: &ImageTensor,
    k: u32,
    center: (f64, f64),
    interpolation: Interpolation,
) -> Result<ImageTensor> {
    if !img.is_square() {
        return Err(Error::Param("symmetrize needs a square image".into()));
    }
    let canvas = img.height();
    let radius = SymmetryConfig::max_radius(canvas, center);
    Replicator::new(canvas, k, center, radius, interpolation)?.apply(img)
}

/// Sets every pixel farther than `radius` from `center` to `background`.
pub fn apply_circular_mask(img: &ImageTensor, center: (f64, f64), radius: f64, background: f32) -> ImageTensor {
    let mut data = img.data().to_vec();
    mask_in_place(&mut data, img.height(), img.width(), img.channels(), center, radius, background);
    ImageTensor::from_clamped(img.height(), img.width(), img.channels(), data)
        .expect("mask preserves shape")
}

pub fn mask_in_place(
    data: &mut [f32],
    height: usize,
    width: usize,
    channels: usize,
    center: (f64, f64),
    radius: f64,
    background: f32,
) {
    for r in 0..height {
        for c in 0..width {
            if (r as f64 - center.0).hypot(c as f64 - center.1) > radius {
                let base = (r * width + c) * channels;
                data[base..base + channels].fill(background);
            }
        }
    }
}

/// Mean absolute residual between `img` and its rotation by `2π/k` over the
/// inscribed disc, with bilinear resampling.
pub fn symmetry_score(img: &ImageTensor, k: u32, center: (f64, f64)) -> Result<f64> {
    let radius = SymmetryConfig::max_radius(img.height(), center);
    symmetry_score_with(img, k, center, radius, Interpolation::Bilinear)
}

/// Mean absolute residual over the disc of `radius`.
///
/// Bilinear: each pixel against the image rotated by `2π/k`, over pixels
/// whose rotated sample is supported entirely inside the disc. Nearest: each
/// pixel outside the canonical wedge against its nearest-mode canonical
/// source, so the score is zero exactly when nearest replication is a no-op.
pub fn symmetry_score_with(
    img: &ImageTensor,
    k: u32,
    center: (f64, f64),
    radius: f64,
    interpolation: Interpolation,
) -> Result<f64> {
    if !img.is_square() {
        return Err(Error::Param("symmetry score needs a square image".into()));
    }
    let canvas = img.height();
    check_params(canvas, k, center)?;
    let ch = img.channels();
    let data = img.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in 0..canvas {
        for c in 0..canvas {
            if !in_disc(canvas, center, radius, r as i64, c as i64) {
                continue;
            }
            let p = r * canvas + c;
            match interpolation {
                Interpolation::Nearest => {
                    let Some(q) = nearest_source(canvas, k, center, radius, p) else {
                        continue;
                    };
                    for i in 0..ch {
                        total += (data[p * ch + i] - data[q * ch + i]).abs() as f64;
                    }
                }
                Interpolation::Bilinear => {
                    let (dr, dc) = rotate_offset(r as f64 - center.0, c as f64 - center.1, -TAU / k as f64);
                    let (y, x) = (snap(center.0 + dr), snap(center.1 + dc));
                    let (y0, x0) = (y.floor() as i64, x.floor() as i64);
                    let (y1, x1) = (y.ceil() as i64, x.ceil() as i64);
                    if ![(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
                        .iter()
                        .all(|&(a, b)| in_disc(canvas, center, radius, a, b))
                    {
                        continue;
                    }
                    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                    for i in 0..ch {
                        let g = |a: i64, b: i64| img.get(a as usize, b as usize, i) as f64;
                        let v = (g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx) * (1.0 - fy)
                            + (g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx) * fy;
                        total += (img.get(r, c, i) as f64 - v).abs();
                    }
                }
            }
            count += ch;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
