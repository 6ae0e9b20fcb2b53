//! Head feature enhancement.
//!
//! The clear low-density feature is pooled over channels, upsampled to image
//! resolution and shift-overlaid exactly like the image itself; the
//! high-density branch's pooled feature is pulled towards it at head locations
//! through a density-masked MSE.

use std::fmt;
use std::str::FromStr;

use densim_tensor::{Elem, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::simulation::{simulate_high_density, zero_pad, SimConfig, Side};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::UnknownStrategy(other.to_string())),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text,)+ })
            }
        }
    };
}

/// Encoder tap(s) the loss is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum HfemScale {
    #[serde(rename = "s1")]
    S1,
    #[serde(rename = "s2")]
    S2,
    #[default]
    #[serde(rename = "s3")]
    S3,
    #[serde(rename = "s2+s3")]
    S2S3,
    #[serde(rename = "s1+s3")]
    S1S3,
}
string_enum!(HfemScale { S1 => "s1", S2 => "s2", S3 => "s3", S2S3 => "s2+s3", S1S3 => "s1+s3" });

impl HfemScale {
    /// Tap indices (0 = S1) in ascending order.
    pub fn taps(self) -> &'static [usize] {
        match self {
            HfemScale::S1 => &[0],
            HfemScale::S2 => &[1],
            HfemScale::S3 => &[2],
            HfemScale::S2S3 => &[1, 2],
            HfemScale::S1S3 => &[0, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Pool {
    #[default]
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "avg")]
    Avg,
    /// No pooling: every channel is compared.
    #[serde(rename = "none")]
    None,
    /// Sum of the average- and max-pooled maps.
    #[serde(rename = "avg+max")]
    AvgMax,
}
string_enum!(Pool { Max => "max", Avg => "avg", None => "none", AvgMax => "avg+max" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// The simulated density map itself is the multiplicative mask.
    #[default]
    Density,
    /// `1` where the simulated density is positive.
    Binary,
}
string_enum!(MaskMode { Density => "density", Binary => "binary" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Overlay {
    /// `lambda`-weighted blend, as for images.
    #[default]
    Blend,
    /// Elementwise maximum of the two shifted copies.
    Max,
}
string_enum!(Overlay { Blend => "blend", Max => "max" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct HfemConfig {
    pub scale: HfemScale,
    pub pool: Pool,
    pub mask: MaskMode,
    pub overlay: Overlay,
}

/// Per-pixel maximum over the channels of a `(C, h, w)` feature.
pub fn channel_max_pool<T: Elem>(f: &Tensor<T>) -> Result<Raster> {
    let [c, h, w] = f.shape() else {
        return Err(Error::Shape(format!("expected a (C,H,W) feature, got {:?}", f.shape())));
    };
    if *c == 0 {
        return Err(Error::Shape("feature has no channels".into()));
    }
    let plane = h * w;
    let d = f.data();
    let data = (0..plane)
        .map(|p| (0..*c).map(|ch| d[ch * plane + p].to_f64()).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Raster::new(*h, *w, 1, data)
}

/// Replicates every cell into an `(H/h) x (W/w)` block.
pub fn upsample_nearest(m: &Raster, height: usize, width: usize) -> Result<Raster> {
    let (h, w) = (m.height(), m.width());
    if h == 0 || w == 0 || !height.is_multiple_of(h) || !width.is_multiple_of(w) || height < h || width < w {
        return Err(Error::NonIntegerFactor { from_h: h, from_w: w, to_h: height, to_w: width });
    }
    let (fh, fw) = (height / h, width / w);
    let c = m.channels();
    let mut out = Raster::zeros(height, width, c);
    for y in 0..height {
        for x in 0..width {
            for ch in 0..c {
                out.set(y, x, ch, m.get(y / fh, x / fw, ch));
            }
        }
    }
    Ok(out)
}

/// Shift-overlay of an upsampled activation map, mirroring the image transform.
pub fn build_feature_target(m_le: &Raster, cfg: &SimConfig, overlay: Overlay) -> Result<Raster> {
    match overlay {
        Overlay::Blend => simulate_high_density(m_le, cfg),
        Overlay::Max => {
            cfg.validate()?;
            let l = zero_pad(m_le, Side::Left, cfg.shift)?;
            let r = zero_pad(m_le, Side::Right, cfg.shift)?;
            let data = l.data().iter().zip(r.data()).map(|(a, b)| a.max(*b)).collect();
            Raster::new(l.height(), l.width(), l.channels(), data)
        }
    }
}

fn mask_value(g: f64, mode: MaskMode) -> f64 {
    match mode {
        MaskMode::Density => g,
        MaskMode::Binary => {
            if g > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// `mean((m_he * gt) - (target * gt))^2` over all pixels.
pub fn hfem_loss(m_he: &Raster, target: &Raster, gt_sim: &Raster, mask: MaskMode) -> Result<f64> {
    if !m_he.same_shape(target) || !m_he.same_shape(gt_sim) {
        return Err(Error::Shape(format!(
            "hfem inputs differ: {}x{}x{}, {}x{}x{}, {}x{}x{}",
            m_he.height(),
            m_he.width(),
            m_he.channels(),
            target.height(),
            target.width(),
            target.channels(),
            gt_sim.height(),
            gt_sim.width(),
            gt_sim.channels()
        )));
    }
    let n = m_he.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = m_he
        .data()
        .iter()
        .zip(target.data())
        .zip(gt_sim.data())
        .map(|((&a, &t), &g)| {
            let g = mask_value(g, mask);
            (a * g - t * g).powi(2)
        })
        .sum();
    Ok(s / n as f64)
}

/// Pools an NCHW feature over channels inside the graph.
pub fn pool_channels<T: Elem>(g: &mut Graph<T>, x: Var, pool: Pool) -> Var {
    match pool {
        Pool::Max => g.max_channels(x),
        Pool::Avg => g.mean_channels(x),
        Pool::None => x,
        Pool::AvgMax => {
            let a = g.mean_channels(x);
            let m = g.max_channels(x);
            g.add(a, m)
        }
    }
}

/// Per-sample geometry of a high-density batch.
#[derive(Debug, Clone)]
pub struct HfemBatch<'a> {
    /// Shift used for every sample.
    pub shifts: &'a [usize],
    pub lambda: f64,
    /// Simulated density map per sample, `H x (W + S_i)`.
    pub gt_sim: &'a [Raster],
}

/// HFEM loss for one encoder tap, inside the graph.
///
/// `le` is the (frozen) low-density tap `(N, C, h, w)` of the unsimulated crops
/// and `he` the high-density tap `(N, C, h, w_hd)` of the simulated, right-padded
/// crops. Each sample's loss is a mean over its own `C' x H x (W + S_i)` pixels;
/// the batch loss is the mean over samples.
pub fn hfem_term<T: Elem>(g: &mut Graph<T>, le: Var, he: Var, factor: usize, batch: &HfemBatch<'_>, cfg: &HfemConfig) -> Result<Var> {
    let le_pooled = pool_channels(g, le, cfg.pool);
    let he_pooled = pool_channels(g, he, cfg.pool);
    let [n, cp, h, w] = g.shape(le_pooled).to_vec()[..] else {
        return Err(Error::Shape("low-density tap must be NCHW".into()));
    };
    let [hn, hc, hh, hw] = g.shape(he_pooled).to_vec()[..] else {
        return Err(Error::Shape("high-density tap must be NCHW".into()));
    };
    if hn != n || hc != cp || hh != h || batch.shifts.len() != n || batch.gt_sim.len() != n {
        return Err(Error::Shape(format!(
            "hfem batch mismatch: low {:?}, high {:?}, {} shifts, {} maps",
            [n, cp, h, w],
            [hn, hc, hh, hw],
            batch.shifts.len(),
            batch.gt_sim.len()
        )));
    }
    let (big_h, big_w, wp) = (h * factor, w * factor, hw * factor);
    let plane = big_h * wp;
    let mut target = vec![T::zero(); n * cp * plane];
    let mut mask = vec![T::zero(); n * cp * plane];
    let mut weight = vec![T::zero(); n * cp * plane];
    let le_val = g.value(le_pooled).clone();
    for i in 0..n {
        let s = batch.shifts[i];
        let gt = &batch.gt_sim[i];
        if gt.height() != big_h || gt.width() != big_w + s || big_w + s > wp {
            return Err(Error::Shape(format!(
                "sample {i}: density {}x{} does not match {}x{} with shift {s} in width {wp}",
                gt.height(),
                gt.width(),
                big_h,
                big_w
            )));
        }
        let sim = SimConfig::new(s as i64, batch.lambda)?;
        let wt = T::from_f64(1.0 / (n * cp * big_h * (big_w + s)) as f64);
        for ch in 0..cp {
            let start = ((i * cp + ch) * h) * w;
            let small = Raster::new(h, w, 1, le_val.data()[start..start + h * w].iter().map(|&v| Elem::to_f64(v)).collect())?;
            let tgt = build_feature_target(&upsample_nearest(&small, big_h, big_w)?, &sim, cfg.overlay)?;
            let base = (i * cp + ch) * plane;
            for y in 0..big_h {
                for x in 0..big_w + s {
                    let m = mask_value(gt.get(y, x, 0), cfg.mask);
                    target[base + y * wp + x] = T::from_f64(tgt.get(y, x, 0) * m);
                    mask[base + y * wp + x] = T::from_f64(m);
                    weight[base + y * wp + x] = wt;
                }
            }
        }
    }
    let shape = vec![n, cp, big_h, wp];
    let up = g.upsample_nearest(he_pooled, factor, factor);
    let mask = g.constant(Tensor::new(shape.clone(), mask));
    let target = g.constant(Tensor::new(shape.clone(), target));
    let weight = g.constant(Tensor::new(shape, weight));
    let masked = g.mul(up, mask);
    let diff = g.sub(masked, target);
    let sq = g.sqr(diff);
    let weighted = g.mul(sq, weight);
    Ok(g.sum_all(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(rows: &[&[f64]]) -> Raster {
        Raster::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn max_pool_cases() {
        let f = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 0.0]);
        assert_eq!(channel_max_pool(&f).unwrap().data(), &[3.0, 2.0]);
        let single = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]);
        assert_eq!(channel_max_pool(&single).unwrap().data(), single.data());
    }

    #[test]
    fn upsample_cases() {
        let m = r(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(upsample_nearest(&m, 2, 2).unwrap(), m);
        let one = r(&[&[7.0]]);
        assert_eq!(upsample_nearest(&one, 2, 2).unwrap().data(), &[7.0; 4]);
        assert!(matches!(upsample_nearest(&m, 3, 4), Err(Error::NonIntegerFactor { .. })));
    }

    #[test]
    fn upsample_then_block_mean_round_trips() {
        let m = Raster::new(3, 3, 1, (0..9).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let up = upsample_nearest(&m, 48, 48).unwrap();
        let back = up.block_sum(16).unwrap().map(|v| v / 256.0);
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn target_cases() {
        let m = r(&[&[0.0, 1.0, 0.0, 0.0]]);
        let id = build_feature_target(&m, &SimConfig::new(0, 0.5).unwrap(), Overlay::Blend).unwrap();
        assert_eq!(id, m);
        let t = build_feature_target(&m, &SimConfig::new(3, 0.5).unwrap(), Overlay::Blend).unwrap();
        assert_eq!(t.data(), &[0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.0]);
        let mx = build_feature_target(&m, &SimConfig::new(3, 0.5).unwrap(), Overlay::Max).unwrap();
        assert_eq!(mx.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            build_feature_target(&m, &SimConfig { shift: -1, lambda: 0.5 }, Overlay::Blend),
            Err(Error::NegativeShift(-1))
        ));
    }

    #[test]
    fn loss_cases() {
        let he = r(&[&[1.0, 0.0]]);
        let tgt = r(&[&[0.0, 0.0]]);
        let gt = r(&[&[1.0, 0.0]]);
        assert_eq!(hfem_loss(&he, &tgt, &gt, MaskMode::Density).unwrap(), 0.5);
        assert_eq!(hfem_loss(&he, &he, &gt, MaskMode::Density).unwrap(), 0.0);
        assert_eq!(hfem_loss(&he, &tgt, &r(&[&[0.0, 0.0]]), MaskMode::Density).unwrap(), 0.0);
        let half = r(&[&[0.5, 0.0]]);
        assert_eq!(hfem_loss(&he, &tgt, &half, MaskMode::Density).unwrap(), 0.125);
        assert_eq!(hfem_loss(&he, &tgt, &half, MaskMode::Binary).unwrap(), 0.5);
        assert!(hfem_loss(&he, &r(&[&[0.0]]), &gt, MaskMode::Density).is_err());
    }

    #[test]
    fn graph_term_matches_raster_loss() {
        let mut g: Graph<f64> = Graph::new();
        let (h, w, f, s) = (2, 2, 4, 3);
        let le_data: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.7).cos()).collect();
        let he_w = 3;
        let he_data: Vec<f64> = (0..2 * h * he_w).map(|i| (i as f64 * 0.3).sin()).collect();
        let le = g.constant(Tensor::new(vec![1, 2, h, w], le_data.clone()));
        let he = g.leaf(Tensor::new(vec![1, 2, h, he_w], he_data.clone()), true);
        let gt = Raster::new(h * f, w * f + s, 1, (0..(h * f) * (w * f + s)).map(|i| ((i % 5) as f64) / 4.0).collect())
            .unwrap();
        let batch = HfemBatch { shifts: &[s], lambda: 0.5, gt_sim: std::slice::from_ref(&gt) };
        let cfg = HfemConfig::default();
        let loss = hfem_term(&mut g, le, he, f, &batch, &cfg).unwrap();

        let le_map = channel_max_pool(&Tensor::new(vec![2, h, w], le_data)).unwrap();
        let target = build_feature_target(
            &upsample_nearest(&le_map, h * f, w * f).unwrap(),
            &SimConfig::new(s as i64, 0.5).unwrap(),
            Overlay::Blend,
        )
        .unwrap();
        let he_map = channel_max_pool(&Tensor::new(vec![2, h, he_w], he_data)).unwrap();
        let he_up = upsample_nearest(&he_map, h * f, he_w * f).unwrap().crop(0, 0, h * f, w * f + s).unwrap();
        let want = hfem_loss(&he_up, &target, &gt, MaskMode::Density).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }
}
