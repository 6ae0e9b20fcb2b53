use densim_tensor::{Elem, Graph, Tensor, Var, LOGIT_CLAMP};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub theta_den: f64,
    pub theta_enh: f64,
    pub theta_cls: f64,
    pub theta_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { theta_den: 1.0, theta_enh: 1.0, theta_cls: 10.0, theta_con: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub den: f64,
    pub enh: f64,
    pub cls: f64,
    pub con: f64,
}

impl LossParts {
    pub fn all_finite(&self) -> bool {
        [self.den, self.enh, self.cls, self.con].iter().all(|v| v.is_finite())
    }
}

fn shape_check(a: &Raster, b: &Raster, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )))
    }
}

/// Pixelwise MSE between a predicted map and a block-sum-pooled ground truth.
pub fn density_loss(pred: &Raster, gt: &Raster) -> Result<f64> {
    shape_check(pred, gt, "density loss")?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// `1` for every `patch x patch` block of `gt` with positive mass.
pub fn patch_labels(gt: &Raster, patch: usize) -> Result<Raster> {
    Ok(gt.block_sum(patch)?.map(|m| if m > 0.0 { 1.0 } else { 0.0 }))
}

fn bce(x: f64, t: f64) -> f64 {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of per-patch logits against "patch holds a head".
pub fn patch_cls_loss(logits: &Raster, gt: &Raster, patch: usize) -> Result<f64> {
    let labels = patch_labels(gt, patch)?;
    shape_check(logits, &labels, "patch classification")?;
    let n = labels.data().len().max(1) as f64;
    Ok(logits.data().iter().zip(labels.data()).map(|(&x, &t)| bce(x, t)).sum::<f64>() / n)
}

/// Mean squared difference of two attention matrices.
pub fn attention_consistency_loss<T: Elem>(a1: &Tensor<T>, a2: &Tensor<T>) -> Result<f64> {
    if a1.shape() != a2.shape() {
        return Err(Error::Shape(format!("attention shapes {:?} vs {:?}", a1.shape(), a2.shape())));
    }
    let n = a1.len().max(1) as f64;
    Ok(a1.data().iter().zip(a2.data()).map(|(&x, &y)| (Elem::to_f64(x) - Elem::to_f64(y)).powi(2)).sum::<f64>() / n)
}

/// Weighted sum of the four terms.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    if !parts.all_finite() {
        return Err(Error::NonFiniteLoss { step: 0, detail: format!("{parts:?}") });
    }
    Ok(w.theta_den * parts.den + w.theta_enh * parts.enh + w.theta_cls * parts.cls + w.theta_con * parts.con)
}

/// Graph form of [`density_loss`].
pub fn density_loss_graph<T: Elem>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::Shape(format!("density loss: {:?} vs {:?}", g.shape(pred), gt.shape())));
    }
    let t = g.constant(gt.clone());
    let d = g.sub(pred, t);
    let s = g.sqr(d);
    Ok(g.mean_all(s))
}

/// Graph form of [`patch_cls_loss`] with precomputed labels.
pub fn patch_cls_loss_graph<T: Elem>(g: &mut Graph<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    if g.shape(logits) != labels.shape() {
        return Err(Error::Shape(format!("cls loss: {:?} vs {:?}", g.shape(logits), labels.shape())));
    }
    Ok(g.bce_with_logits(logits, labels))
}

/// MSE between the first and second half of the rows of an attention matrix,
/// i.e. between two views stacked along the batch axis.
pub fn consistency_graph<T: Elem>(g: &mut Graph<T>, attn: Var) -> Result<Var> {
    let rows = g.shape(attn)[0];
    if !rows.is_multiple_of(2) {
        return Err(Error::Shape(format!("attention with {rows} rows cannot hold two views")));
    }
    let a = g.narrow(attn, 0, 0, rows / 2);
    let b = g.narrow(attn, 0, rows / 2, rows / 2);
    let d = g.sub(a, b);
    let s = g.sqr(d);
    Ok(g.mean_all(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(rows: &[&[f64]]) -> Raster {
        Raster::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn density_loss_cases() {
        let a = r(&[&[1.0, 2.0]]);
        assert_eq!(density_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(density_loss(&r(&[&[2.0]]), &r(&[&[0.0]])).unwrap(), 4.0);
        assert!(density_loss(&a, &r(&[&[1.0]])).is_err());
    }

    #[test]
    fn cls_loss_cases() {
        let zero = Raster::zeros(4, 4, 1);
        let logits = Raster::zeros(2, 2, 1);
        assert!((patch_cls_loss(&logits, &zero, 2).unwrap() - 2f64.ln()).abs() < 1e-12);

        let mut gt = Raster::zeros(2, 2, 1);
        gt.set(0, 0, 0, 0.3);
        gt.set(1, 1, 0, 1.0);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let l = r(&[&[logit(0.9), logit(0.1)], &[logit(0.2), logit(0.8)]]);
        let want = (-(0.9f64.ln()) * 2.0 - 0.8f64.ln() * 2.0) / 4.0;
        let got = patch_cls_loss(&l, &gt, 1).unwrap();
        assert!((got - want).abs() < 1e-12);
        // exact value is 0.16425; the commonly quoted figure 0.1644 is a loose rounding
        assert!((got - 0.1644).abs() < 2e-4);

        let perfect = r(&[&[1e9, -1e9], &[-1e9, 1e9]]);
        assert!(patch_cls_loss(&perfect, &gt, 1).unwrap() < 1e-20);
        assert!(patch_cls_loss(&logits, &Raster::zeros(3, 4, 1), 2).is_err());
    }

    #[test]
    fn consistency_cases() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let b = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        assert_eq!(attention_consistency_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(attention_consistency_loss(&b, &a).unwrap(), 1.0);
        assert_eq!(attention_consistency_loss(&a, &a).unwrap(), 0.0);

        let mut g: Graph<f64> = Graph::new();
        let stacked = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let c = consistency_graph(&mut g, stacked).unwrap();
        assert_eq!(g.value(c).item(), 1.0);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap(), 0.0);
        let ones = LossParts { den: 1.0, enh: 1.0, cls: 1.0, con: 1.0 };
        assert_eq!(total_loss(&ones, &w).unwrap(), 22.0);
        let p = LossParts { den: 0.5, enh: 0.2, cls: 0.1, con: 0.3 };
        assert!((total_loss(&p, &w).unwrap() - 4.7).abs() < 1e-12);
        let bad = LossParts { den: f64::NAN, ..p };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn block_sum_pooling_keeps_count() {
        let g = Raster::new(32, 48, 1, (0..32 * 48).map(|i| ((i * 31) % 17) as f64 / 1e3).collect()).unwrap();
        assert!((g.block_sum(16).unwrap().sum() - g.sum()).abs() < 1e-9);
    }

    #[test]
    fn graph_forms_agree_with_raster_forms() {
        let mut g: Graph<f64> = Graph::new();
        let pred = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]));
        let l = density_loss_graph(&mut g, pred, &Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0])).unwrap();
        assert_eq!(g.value(l).item(), 2.5);
        let logits = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.3, -2.0]));
        let c = patch_cls_loss_graph(&mut g, logits, &Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0])).unwrap();
        let want = patch_cls_loss(&r(&[&[0.3, -2.0]]), &r(&[&[1.0, 0.0]]), 1).unwrap();
        assert!((g.value(c).item() - want).abs() < 1e-12);
    }
}
