//! Synthetic crowd scenes: disc-like "heads" over a textured background.
//!
//! Low- and high-density regimes differ only in their [`SynthConfig`], which
//! makes the low-to-high generalization experiment runnable without real data.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{write_annotations, DatasetRecord, Point, PointAnnotation, Split};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::seed::{derive_seed, rng_for};

const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Flat,
    Noise,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// `(height, width)` in pixels.
    pub canvas_size: (usize, usize),
    /// Inclusive `(min_heads, max_heads)`.
    pub count_range: (usize, usize),
    /// Inclusive `(min_px, max_px)` head radius.
    pub head_radius_range: (f64, f64),
    pub background_texture: Background,
    /// Minimum center distance as a fraction of the two radii's sum; 1.0 forbids
    /// any overlap, smaller values let heads occlude each other.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::low_density()
    }
}

impl SynthConfig {
    /// 5-15 clearly separated heads.
    pub fn low_density() -> Self {
        Self {
            canvas_size: (128, 128),
            count_range: (5, 15),
            head_radius_range: (4.0, 6.0),
            background_texture: Background::Noise,
            min_separation: 1.0,
            seed: 0,
        }
    }

    /// 40-80 heads with mutual occlusion allowed.
    pub fn high_density() -> Self {
        Self {
            canvas_size: (128, 128),
            count_range: (40, 80),
            head_radius_range: (4.0, 6.0),
            background_texture: Background::Noise,
            min_separation: 0.55,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.count_range;
        let (rlo, rhi) = self.head_radius_range;
        if hi < lo {
            return Err(Error::Config(format!("count_range ({lo}, {hi}) has max < min")));
        }
        if !(rlo >= 1.0 && rhi >= rlo) {
            return Err(Error::Config(format!("head_radius_range ({rlo}, {rhi}) must satisfy 1 <= min <= max")));
        }
        if self.canvas_size.0 == 0 || self.canvas_size.1 == 0 {
            return Err(Error::Config("canvas_size must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.min_separation) {
            return Err(Error::Config(format!("min_separation {} outside [0, 2]", self.min_separation)));
        }
        Ok(())
    }
}

fn render_background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Raster {
    let (h, w) = cfg.canvas_size;
    let base: [f64; 3] = [rng.gen_range(0.45..0.85), rng.gen_range(0.45..0.85), rng.gen_range(0.45..0.85)];
    let mut img = Raster::zeros(h, w, 3);
    match cfg.background_texture {
        Background::Flat => {
            for y in 0..h {
                for x in 0..w {
                    for (c, b) in base.iter().enumerate() {
                        img.set(y, x, c, *b);
                    }
                }
            }
        }
        Background::Noise => {
            for y in 0..h {
                for x in 0..w {
                    let n: f64 = rng.gen_range(-0.06..0.06);
                    for (c, b) in base.iter().enumerate() {
                        img.set(y, x, c, (b + n).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Background::Gradient => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.gen_range(0.1..0.25);
            let (dx, dy) = (angle.cos() / w as f64, angle.sin() / h as f64);
            for y in 0..h {
                for x in 0..w {
                    let t = (x as f64 * dx + y as f64 * dy) * amp;
                    for (c, b) in base.iter().enumerate() {
                        img.set(y, x, c, (b + t).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    img
}

/// Anti-aliased shaded disc composited over `img`.
fn render_head(img: &mut Raster, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (x0, x1) = ((cx - r - 1.0).floor() as isize, (cx + r + 1.0).ceil() as isize);
    let (y0, y1) = ((cy - r - 1.0).floor() as isize, (cy + r + 1.0).ceil() as isize);
    let (hx, hy) = (cx - r / 3.0, cy - r / 3.0);
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let (fx, fy) = (x as f64, y as f64);
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
            if alpha <= 0.0 {
                continue;
            }
            let dh = ((fx - hx).powi(2) + (fy - hy).powi(2)).sqrt();
            let highlight = 0.18 * (1.0 - dh / r).max(0.0);
            for (c, col) in color.iter().enumerate() {
                let bg = img.get(y as usize, x as usize, c);
                let v = (1.0 - alpha) * bg + alpha * (col + highlight).min(1.0);
                img.set(y as usize, x as usize, c, v);
            }
        }
    }
}

/// Renders one scene and its head-center annotation; deterministic in `cfg.seed`.
pub fn generate_synthetic_scene(cfg: &SynthConfig) -> Result<(Raster, PointAnnotation)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "scene", 0);
    let (h, w) = cfg.canvas_size;
    let mut img = render_background(cfg, &mut rng);
    let (lo, hi) = cfg.count_range;
    let target = rng.gen_range(lo..=hi);
    let (rlo, rhi) = cfg.head_radius_range;

    let mut heads: Vec<(f64, f64, f64)> = Vec::with_capacity(target);
    for i in 0..target {
        let r = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.gen_range(0.0..w as f64);
            let y = rng.gen_range(0.0..h as f64);
            let clear = heads.iter().all(|&(hx, hy, hr)| {
                ((x - hx).powi(2) + (y - hy).powi(2)).sqrt() >= cfg.min_separation * (r + hr)
            });
            if clear {
                placed = Some((x, y, r));
                break;
            }
        }
        match placed {
            Some(head) => heads.push(head),
            None if i < lo => return Err(Error::InfeasiblePacking { placed: i, required: lo }),
            None => break,
        }
    }

    for &(x, y, r) in &heads {
        let tone: f64 = rng.gen_range(0.05..0.3);
        let color = [
            (tone + rng.gen_range(0.0..0.08)).min(1.0),
            tone,
            (tone + rng.gen_range(-0.04..0.04)).max(0.0),
        ];
        render_head(&mut img, x, y, r, color);
    }
    let points = heads.iter().map(|&(x, y, _)| Point::new(x, y)).collect();
    Ok((img, PointAnnotation::new(points)))
}

/// In-memory sample: image plus its head annotation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Raster,
    pub annotation: PointAnnotation,
}

/// `n` scenes drawn from `cfg`, image `i` seeded from `(root_seed, tag, i)`.
pub fn synthesize_split(cfg: &SynthConfig, n: usize, root_seed: u64, tag: &str) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let scene_cfg = SynthConfig { seed: derive_seed(root_seed, tag, i as u64), ..cfg.clone() };
            let (image, annotation) = generate_synthetic_scene(&scene_cfg)?;
            Ok(Sample { image, annotation })
        })
        .collect()
}

/// Writes samples as `images/<split>_<index>.png` plus records describing them.
pub fn write_split(out_dir: &Path, split: Split, samples: &[Sample]) -> Result<Vec<DatasetRecord>> {
    let images = out_dir.join("images");
    fs::create_dir_all(&images)?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = images.join(format!("{name}_{i:04}.png"));
            s.image.write_png(&path)?;
            Ok(DatasetRecord {
                image_path: path,
                height: s.image.height(),
                width: s.image.width(),
                annotation: s.annotation.clone(),
                split,
            })
        })
        .collect()
}

/// Writes a full dataset (train and test splits) with `annotations.json`.
pub fn write_dataset(out_dir: &Path, train: &[Sample], test: &[Sample]) -> Result<Vec<DatasetRecord>> {
    fs::create_dir_all(out_dir)?;
    let mut records = write_split(out_dir, Split::Train, train)?;
    records.extend(write_split(out_dir, Split::Test, test)?);
    write_annotations(&out_dir.join("annotations.json"), &records)?;
    Ok(records)
}
