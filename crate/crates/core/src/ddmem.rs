//! Dual-density memory encoding.
//!
//! The high-density decoder feature `F` (`c2 x hw`) attends over a memory bank
//! `V` (`c2 x l`) with `A = softmax(F^T V / sqrt(c2))`, and is re-encoded as the
//! convex combination `V A^T`. Two banks (low- and high-density crowd memory)
//! produce two reconstructions that are fused, by default by concatenation.

use std::fmt;
use std::str::FromStr;

use densim_tensor::{Elem, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Module, Param};

/// `c2 x l` matrix of memory vectors (one per column).
#[derive(Debug, Clone)]
pub struct MemoryBank<T> {
    pub vectors: Param<T>,
    pub trainable: bool,
}

impl<T: Elem> MemoryBank<T> {
    pub fn c2(&self) -> usize {
        self.vectors.value.dim(0)
    }

    pub fn len(&self) -> usize {
        self.vectors.value.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Elem> Module<T> for MemoryBank<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.vectors);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.vectors);
    }
}

/// Bank with entries i.i.d. uniform in `[-1/sqrt(c2), 1/sqrt(c2)]`.
pub fn init_memory<T: Elem>(name: &str, l: usize, c2: usize, seed: u64, trainable: bool) -> Result<MemoryBank<T>> {
    if l == 0 || c2 == 0 {
        return Err(Error::BadDims(format!("memory bank needs l >= 1 and c2 >= 1, got l={l}, c2={c2}")));
    }
    let bound = 1.0 / (c2 as f64).sqrt();
    Ok(MemoryBank { vectors: Param::uniform(name, vec![c2, l], bound, seed), trainable })
}

fn matrix_dims<T: Elem>(g: &Graph<T>, v: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::DimMismatch(format!("{what} must be a matrix, got {s:?}"))),
    }
}

/// `softmax(F^T V / sqrt(c2))` for `F: c2 x hw`, `V: c2 x l`; result `hw x l`.
pub fn attention_scores<T: Elem>(g: &mut Graph<T>, f: Var, v: Var) -> Result<Var> {
    let (fc, _) = matrix_dims(g, f, "feature")?;
    let (vc, _) = matrix_dims(g, v, "memory")?;
    if fc != vc {
        return Err(Error::DimMismatch(format!("feature has {fc} channels, memory has {vc}")));
    }
    let logits = g.matmul_t(f, v, true, false);
    Ok(scaled_softmax(g, logits, fc))
}

/// Same as [`attention_scores`] with the feature given row-wise (`hw x c2`).
pub fn attention_scores_rows<T: Elem>(g: &mut Graph<T>, rows: Var, v: Var) -> Result<Var> {
    let (_, rc) = matrix_dims(g, rows, "feature rows")?;
    let (vc, _) = matrix_dims(g, v, "memory")?;
    if rc != vc {
        return Err(Error::DimMismatch(format!("feature has {rc} channels, memory has {vc}")));
    }
    let logits = g.matmul(rows, v);
    Ok(scaled_softmax(g, logits, rc))
}

fn scaled_softmax<T: Elem>(g: &mut Graph<T>, logits: Var, c2: usize) -> Var {
    let scaled = g.scale(logits, T::from_f64(1.0 / (c2 as f64).sqrt()));
    g.softmax_rows(scaled)
}

/// `V A^T`: `c2 x hw`, every column a convex combination of memory vectors.
pub fn reconstruct<T: Elem>(g: &mut Graph<T>, v: Var, a: Var) -> Result<Var> {
    let (_, l) = matrix_dims(g, v, "memory")?;
    let (_, al) = matrix_dims(g, a, "attention")?;
    if l != al {
        return Err(Error::DimMismatch(format!("memory has {l} slots, attention has {al}")));
    }
    Ok(g.matmul_t(v, a, false, true))
}

/// `A V^T`: the reconstruction laid out row-wise (`hw x c2`).
pub fn reconstruct_rows<T: Elem>(g: &mut Graph<T>, v: Var, a: Var) -> Result<Var> {
    let (_, l) = matrix_dims(g, v, "memory")?;
    let (_, al) = matrix_dims(g, a, "attention")?;
    if l != al {
        return Err(Error::DimMismatch(format!("memory has {l} slots, attention has {al}")));
    }
    Ok(g.matmul_t(a, v, false, true))
}

/// Fusion of the two memory reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Concat,
    Add,
    /// Per-pixel learned selection between two density maps.
    Adaptive,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "add" => Ok(Fusion::Add),
            "adaptive" => Ok(Fusion::Adaptive),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Concat => "concat",
            Fusion::Add => "add",
            Fusion::Adaptive => "adaptive",
        })
    }
}

/// Feature-level fusion strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFusion {
    Concat,
    Add,
}

fn channel_axis(rank: usize) -> Result<usize> {
    match rank {
        2 => Ok(0),
        4 => Ok(1),
        r => Err(Error::DimMismatch(format!("features must be c x hw or NCHW, got rank {r}"))),
    }
}

/// Fuses two equally-shaped features along their channel axis (`c x hw` or NCHW).
pub fn fuse<T: Elem>(g: &mut Graph<T>, f_ld: Var, f_hd: Var, how: FeatureFusion) -> Result<Var> {
    if g.shape(f_ld) != g.shape(f_hd) {
        return Err(Error::DimMismatch(format!(
            "cannot fuse {:?} with {:?}",
            g.shape(f_ld),
            g.shape(f_hd)
        )));
    }
    let axis = channel_axis(g.shape(f_ld).len())?;
    Ok(match how {
        FeatureFusion::Concat => g.concat(f_ld, f_hd, axis),
        FeatureFusion::Add => g.add(f_ld, f_hd),
    })
}

/// `s * d_ld + (1 - s) * d_hd` with `s = sigmoid(selection_logits)`.
pub fn fuse_adaptive<T: Elem>(g: &mut Graph<T>, d_ld: Var, d_hd: Var, selection_logits: Var) -> Result<Var> {
    let shape = g.shape(d_ld).to_vec();
    if g.shape(d_hd) != shape.as_slice() || g.shape(selection_logits) != shape.as_slice() {
        return Err(Error::DimMismatch("adaptive fusion inputs must share a shape".into()));
    }
    let s = g.sigmoid(selection_logits);
    let a = g.mul(s, d_ld);
    let neg = g.scale(s, -T::one());
    let rest = g.add_scalar(neg, T::one());
    let b = g.mul(rest, d_hd);
    Ok(g.add(a, b))
}

/// Splits a channel-concatenated `2c x hw` feature back into its halves.
pub fn split_concat<T: Elem>(t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let [c, n] = t.shape() else {
        return Err(Error::DimMismatch(format!("expected a matrix, got {:?}", t.shape())));
    };
    if c % 2 != 0 {
        return Err(Error::DimMismatch(format!("odd channel count {c}")));
    }
    let half = c / 2 * n;
    let d = t.data();
    Ok((
        Tensor::new(vec![c / 2, *n], d[..half].to_vec()),
        Tensor::new(vec![c / 2, *n], d[half..].to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph<f64>, r: usize, c: usize, data: Vec<f64>) -> Var {
        g.constant(Tensor::new(vec![r, c], data))
    }

    #[test]
    fn zero_feature_gives_uniform_rows() {
        let mut g = Graph::new();
        let f = mat(&mut g, 3, 4, vec![0.0; 12]);
        let bank: MemoryBank<f64> = init_memory("m", 5, 3, 1, true).unwrap();
        let v = g.constant(bank.vectors.value.clone());
        let a = attention_scores(&mut g, f, v).unwrap();
        assert_eq!(g.shape(a), &[4, 5]);
        assert!(g.value(a).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn smallest_instance() {
        let mut g = Graph::new();
        let f = mat(&mut g, 1, 1, vec![0.0]);
        let v = mat(&mut g, 1, 2, vec![0.0, 0.0]);
        let a = attention_scores(&mut g, f, v).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut g = Graph::new();
        let f = mat(&mut g, 2, 3, vec![0.0; 6]);
        let v = mat(&mut g, 3, 2, vec![0.0; 6]);
        assert!(matches!(attention_scores(&mut g, f, v), Err(Error::DimMismatch(_))));
        let a = mat(&mut g, 3, 4, vec![0.25; 12]);
        assert!(matches!(reconstruct(&mut g, v, a), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn single_slot_reconstructs_the_slot() {
        let mut g = Graph::new();
        let v = mat(&mut g, 3, 1, vec![0.1, -0.2, 0.3]);
        let f = mat(&mut g, 3, 4, (0..12).map(|i| i as f64).collect());
        let a = attention_scores(&mut g, f, v).unwrap();
        let r = reconstruct(&mut g, v, a).unwrap();
        let out = g.value(r);
        for col in 0..4 {
            for ch in 0..3 {
                assert!((out.data()[ch * 4 + col] - [0.1, -0.2, 0.3][ch]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uniform_attention_gives_mean_vector() {
        let mut g = Graph::new();
        let v = mat(&mut g, 2, 4, vec![1.0, 2.0, 3.0, 6.0, -1.0, 0.0, 1.0, 4.0]);
        let a = mat(&mut g, 3, 4, vec![0.25; 12]);
        let r = reconstruct(&mut g, v, a).unwrap();
        for col in 0..3 {
            assert!((g.value(r).data()[col] - 3.0).abs() < 1e-12);
            assert!((g.value(r).data()[3 + col] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_shapes_and_identities() {
        let mut g = Graph::new();
        let a = mat(&mut g, 256, 6, (0..256 * 6).map(|i| i as f64).collect());
        let b = mat(&mut g, 256, 6, (0..256 * 6).map(|i| -(i as f64)).collect());
        let c = fuse(&mut g, a, b, FeatureFusion::Concat).unwrap();
        assert_eq!(g.shape(c), &[512, 6]);
        let (x, y) = split_concat(g.value(c)).unwrap();
        assert_eq!(&x, g.value(a));
        assert_eq!(&y, g.value(b));
        let zero = mat(&mut g, 256, 6, vec![0.0; 256 * 6]);
        let s = fuse(&mut g, a, zero, FeatureFusion::Add).unwrap();
        assert_eq!(g.value(s), g.value(a));
        let other = mat(&mut g, 255, 6, vec![0.0; 255 * 6]);
        assert!(fuse(&mut g, a, other, FeatureFusion::Concat).is_err());
    }

    #[test]
    fn nchw_concat_is_along_channels() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::full(vec![2, 3, 2, 2], 1.0));
        let b = g.constant(Tensor::full(vec![2, 3, 2, 2], 2.0));
        let c = fuse(&mut g, a, b, FeatureFusion::Concat).unwrap();
        assert_eq!(g.shape(c), &[2, 6, 2, 2]);
    }

    #[test]
    fn adaptive_blend_stays_between_inputs() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![3.0, 2.0, 1.0]));
        let s = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![-40.0, 0.0, 40.0]));
        let d = fuse_adaptive(&mut g, a, b, s).unwrap();
        let v = g.value(d).data();
        assert!((v[0] - 3.0).abs() < 1e-9);
        assert!((v[1] - 2.0).abs() < 1e-12);
        assert!((v[2] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn memory_init_contract() {
        let a: MemoryBank<f32> = init_memory("hdcm", 64, 64, 9, true).unwrap();
        let b: MemoryBank<f32> = init_memory("hdcm", 64, 64, 9, true).unwrap();
        assert_eq!(a.vectors.value, b.vectors.value);
        assert_eq!(a.vectors.value.shape(), &[64, 64]);
        assert!(a.vectors.value.data().iter().all(|v| v.abs() <= 0.125));
        let c: MemoryBank<f32> = init_memory("hdcm", 64, 64, 10, true).unwrap();
        assert_ne!(a.vectors.value, c.vectors.value);
        assert!(matches!(init_memory::<f32>("m", 0, 4, 1, true), Err(Error::BadDims(_))));
    }

    #[test]
    fn unknown_fusion_name() {
        assert_eq!("concat".parse::<Fusion>().unwrap(), Fusion::Concat);
        assert!(matches!("mean".parse::<Fusion>(), Err(Error::UnknownStrategy(_))));
    }
}
