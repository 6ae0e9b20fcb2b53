//! High-density simulation by horizontal shift-and-overlay.
//!
//! An image is zero-padded by `S` columns on the left and, separately, on the
//! right; blending the two copies doubles the visible crowd and creates
//! occlusions. The matching ground truth adds the two padded density maps with
//! unit weights, so its count is exactly twice the original.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{Point, PointAnnotation};
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Horizontal shift `S` in pixels.
    pub shift: i64,
    /// Weight of the left-padded copy.
    pub lambda: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { shift: 0, lambda: 0.5 }
    }
}

impl SimConfig {
    pub fn new(shift: i64, lambda: f64) -> Result<Self> {
        let cfg = Self { shift, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_shift(self.shift)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidBlend(self.lambda));
        }
        Ok(())
    }

    pub fn shift_px(&self) -> usize {
        self.shift.max(0) as usize
    }
}

fn check_shift(s: i64) -> Result<usize> {
    if s < 0 {
        Err(Error::NegativeShift(s))
    } else {
        Ok(s as usize)
    }
}

/// Adds `s` zero columns on one side; content lands at column offset `s`
/// (left) or `0` (right).
pub fn zero_pad(r: &Raster, side: Side, s: i64) -> Result<Raster> {
    let s = check_shift(s)?;
    let (h, w, c) = (r.height(), r.width(), r.channels());
    let offset = match side {
        Side::Left => s,
        Side::Right => 0,
    };
    let mut out = Raster::zeros(h, w + s, c);
    let row = w * c;
    let out_row = (w + s) * c;
    for y in 0..h {
        let dst = y * out_row + offset * c;
        out.data_mut()[dst..dst + row].copy_from_slice(&r.data()[y * row..(y + 1) * row]);
    }
    Ok(out)
}

/// `lambda * P_L(I, S) + (1 - lambda) * P_R(I, S)`, shape `H x (W + S) x C`.
pub fn simulate_high_density(image: &Raster, cfg: &SimConfig) -> Result<Raster> {
    cfg.validate()?;
    let left = zero_pad(image, Side::Left, cfg.shift)?;
    let right = zero_pad(image, Side::Right, cfg.shift)?;
    let lam = cfg.lambda;
    let data = left.data().iter().zip(right.data()).map(|(&l, &r)| lam * l + (1.0 - lam) * r).collect();
    Raster::new(left.height(), left.width(), left.channels(), data)
}

/// `P_L(GT, S) + P_R(GT, S)`; the count doubles.
pub fn generate_gt(gt: &Raster, s: i64) -> Result<Raster> {
    let left = zero_pad(gt, Side::Left, s)?;
    let right = zero_pad(gt, Side::Right, s)?;
    let data = left.data().iter().zip(right.data()).map(|(&l, &r)| l + r).collect();
    Raster::new(left.height(), left.width(), left.channels(), data)
}

/// Point-domain mirror of [`generate_gt`]: originals followed by copies shifted
/// right by `s`.
pub fn shift_overlay_points(ann: &PointAnnotation, s: i64) -> Result<PointAnnotation> {
    let s = check_shift(s)? as f64;
    let mut points = ann.points.clone();
    points.extend(ann.points.iter().map(|p| Point::new(p.x + s, p.y)));
    Ok(PointAnnotation::new(points))
}

/// Inclusive range the per-sample training shift is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRange {
    pub min: usize,
    /// Upper bound; `0` means a quarter of the crop width.
    pub max: usize,
}

impl Default for ShiftRange {
    fn default() -> Self {
        Self { min: 8, max: 0 }
    }
}

impl ShiftRange {
    pub fn bounds(&self, crop_w: usize) -> (usize, usize) {
        let hi = if self.max == 0 { crop_w / 4 } else { self.max };
        (self.min.min(hi), hi)
    }

    pub fn sample(&self, crop_w: usize, rng: &mut impl Rng) -> usize {
        let (lo, hi) = self.bounds(crop_w);
        rng.gen_range(lo..=hi)
    }
}
