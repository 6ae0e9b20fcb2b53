use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{Point, PointAnnotation};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip_prob: f64,
    pub jitter_prob: f64,
    /// Maximum relative change of brightness, contrast and saturation.
    pub jitter_strength: (f64, f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub sharpen_prob: f64,
    pub sharpen_amount: (f64, f64),
}

impl Default for AugmentConfig {
    /// Sized for 128x128 synthetic canvases.
    fn default() -> Self {
        Self {
            crop_h: 96,
            crop_w: 96,
            hflip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: (0.2, 0.2, 0.2),
            blur_prob: 0.3,
            blur_sigma: (0.3, 1.2),
            sharpen_prob: 0.3,
            sharpen_amount: (0.3, 1.0),
        }
    }
}

impl AugmentConfig {
    /// 320x320 crops for full-size imagery.
    pub fn paper_scale() -> Self {
        Self { crop_h: 320, crop_w: 320, ..Self::default() }
    }

    /// Only the plain crop: no flips or photometric changes.
    pub fn plain(crop_h: usize, crop_w: usize) -> Self {
        Self {
            crop_h,
            crop_w,
            hflip_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            sharpen_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_h == 0 || self.crop_w == 0 || !self.crop_h.is_multiple_of(16) || !self.crop_w.is_multiple_of(16) {
            return Err(Error::Config(format!("crop {}x{} must be positive multiples of 16", self.crop_h, self.crop_w)));
        }
        for (k, p) in [("hflip_prob", self.hflip_prob), ("jitter_prob", self.jitter_prob), ("blur_prob", self.blur_prob), ("sharpen_prob", self.sharpen_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{k} must lie in [0, 1], got {p}")));
            }
        }
        let ranges = [("blur_sigma", self.blur_sigma), ("sharpen_amount", self.sharpen_amount)];
        for (k, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("augment.{k} must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Two photometric views of one crop plus the crop's annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub views: [Raster; 2],
    pub annotation: PointAnnotation,
}

/// Photometric changes per view on the full image, then one shared crop and flip.
pub fn augment(img: &Raster, ann: &PointAnnotation, cfg: &AugmentConfig, seed: u64) -> Result<Augmented> {
    let (h, w) = (img.height(), img.width());
    if cfg.crop_h > h || cfg.crop_w > w {
        return Err(Error::CropTooLarge { crop_h: cfg.crop_h, crop_w: cfg.crop_w, height: h, width: w });
    }
    let mut geo = rng_for(seed, "augment.geometry", 0);
    let top = geo.gen_range(0..=h - cfg.crop_h);
    let left = geo.gen_range(0..=w - cfg.crop_w);
    let flip = geo.gen_bool(cfg.hflip_prob);

    let views = [0u64, 1].map(|v| -> Result<Raster> {
        let mut rng = rng_for(seed, "augment.photometric", v);
        let p = photometric(img, cfg, &mut rng);
        let c = p.crop(top, left, cfg.crop_h, cfg.crop_w)?;
        Ok(if flip { c.hflip() } else { c })
    });
    let [a, b] = views;
    let annotation = crop_points(ann, top, left, cfg.crop_h, cfg.crop_w, flip);
    Ok(Augmented { views: [a?, b?], annotation })
}

/// Points whose centers fall inside the crop, in crop coordinates.
pub fn crop_points(ann: &PointAnnotation, top: usize, left: usize, crop_h: usize, crop_w: usize, flip: bool) -> PointAnnotation {
    let points = ann
        .points
        .iter()
        .filter_map(|p| {
            let (x, y) = (p.x - left as f64, p.y - top as f64);
            if !(0.0..crop_w as f64).contains(&x) || !(0.0..crop_h as f64).contains(&y) {
                return None;
            }
            let x = if flip { (crop_w as f64 - 1.0 - x).max(0.0) } else { x };
            Some(Point::new(x, y))
        })
        .collect();
    PointAnnotation::new(points)
}

fn photometric(img: &Raster, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Raster {
    let mut out = img.clone();
    if rng.gen_bool(cfg.jitter_prob) {
        let (b, c, s) = cfg.jitter_strength;
        let fb = 1.0 + rng.gen_range(-b..=b);
        let fc = 1.0 + rng.gen_range(-c..=c);
        let fs = 1.0 + rng.gen_range(-s..=s);
        out = color_jitter(&out, fb, fc, fs);
    }
    if rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
    }
    if rng.gen_bool(cfg.sharpen_prob) {
        let amount = rng.gen_range(cfg.sharpen_amount.0..=cfg.sharpen_amount.1);
        out = sharpen(&out, amount);
    }
    out
}

/// Brightness scale, contrast about the image mean, saturation about the
/// per-pixel grey value; clamped to `[0, 1]`.
pub fn color_jitter(img: &Raster, brightness: f64, contrast: f64, saturation: f64) -> Raster {
    let c = img.channels();
    let mean = img.sum() / img.data().len().max(1) as f64;
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(c) {
        let grey = px.iter().sum::<f64>() / c as f64;
        for v in px.iter_mut() {
            let sat = grey + saturation * (*v - grey);
            let con = mean + contrast * (sat - mean);
            *v = (con * brightness).clamp(0.0, 1.0);
        }
    }
    out
}

fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    let k = kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w, c) = (img.height() as i64, img.width() as i64, img.channels());
    let mut tmp = Raster::zeros(h as usize, w as usize, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = k.iter().enumerate().map(|(i, kv)| kv * img.get(y as usize, (x + i as i64 - r).clamp(0, w - 1) as usize, ch)).sum();
                tmp.set(y as usize, x as usize, ch, v);
            }
        }
    }
    let mut out = Raster::zeros(h as usize, w as usize, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = k.iter().enumerate().map(|(i, kv)| kv * tmp.get((y + i as i64 - r).clamp(0, h - 1) as usize, x as usize, ch)).sum();
                out.set(y as usize, x as usize, ch, v);
            }
        }
    }
    out
}

/// Unsharp mask: `x + amount * (x - blur(x))`, clamped to `[0, 1]`.
pub fn sharpen(img: &Raster, amount: f64) -> Raster {
    let blurred = gaussian_blur(img, 1.0);
    let data = img.data().iter().zip(blurred.data()).map(|(&x, &b)| (x + amount * (x - b)).clamp(0.0, 1.0)).collect();
    Raster::new(img.height(), img.width(), img.channels(), data).expect("same shape")
}
