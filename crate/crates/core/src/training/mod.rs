//! Losses, augmentation, batch assembly and the two-stage optimization loop.
//!
//! Stage one trains a low-density model (branch, memory, head) on plain crops.
//! Stage two freezes it, clones its branch into a high-density branch and
//! trains that on shift-overlaid crops with all four loss terms.

mod augment;
mod losses;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use densim_tensor::{Elem, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::density::points_to_density;
use crate::error::{Error, Result};
use crate::hfem::{hfem_term, HfemBatch, HfemConfig};
use crate::network::{image_batch, Branch, Ctx, MemoryMode, Model, NetConfig, STRIDE};
use crate::raster::Raster;
use crate::seed::{derive_seed, rng_for};
use crate::simulation::{generate_gt, simulate_high_density, ShiftRange, SimConfig};
use crate::synth::Sample;

pub use augment::{augment, color_jitter, crop_points, gaussian_blur, sharpen, AugmentConfig, Augmented};
pub use losses::{
    attention_consistency_loss, consistency_graph, density_loss, density_loss_graph, patch_cls_loss, patch_cls_loss_graph,
    patch_labels, total_loss, LossParts, LossWeights,
};
pub use optim::{AdamW, OneCycle, OptimizerConfig};

/// Default length of the low-density stage.
pub const PRETRAIN_EPOCHS: usize = 120;

/// Everything the training loop needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub net: NetConfig,
    pub optim: OptimizerConfig,
    pub pretrain: OptimizerConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub hfem: HfemConfig,
    pub shift: ShiftRange,
    pub lambda: f64,
    pub sigma: f64,
    pub bn_momentum: f64,
    /// Batches used to re-estimate batch-norm statistics after a stage.
    pub recalibration_batches: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            optim: OptimizerConfig::default(),
            // The density path sits behind a softmax over small memory vectors
            // and stays near-constant after only 30 epochs.
            pretrain: OptimizerConfig { max_lr: 1e-3, epochs: PRETRAIN_EPOCHS, ..OptimizerConfig::default() },
            augment: AugmentConfig::default(),
            loss: LossWeights::default(),
            hfem: HfemConfig::default(),
            shift: ShiftRange::default(),
            lambda: 0.5,
            sigma: crate::density::DEFAULT_SIGMA,
            bn_momentum: 0.1,
            recalibration_batches: 8,
            seed: 0,
        }
    }
}

/// One training example after augmentation and simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    /// Two photometric views of the crop.
    pub views: [Raster; 2],
    /// Density of the crop.
    pub gt: Raster,
    /// Both views shift-overlaid, `H x (W + S)`.
    pub sim_views: [Raster; 2],
    pub gt_sim: Raster,
    pub sim: SimConfig,
    /// Heads inside the crop.
    pub count: usize,
}

/// Augments, crops and simulates one sample; deterministic in `seed`.
pub fn prepare_item(sample: &Sample, s: &TrainSettings, seed: u64) -> Result<BatchItem> {
    let aug = augment(&sample.image, &sample.annotation, &s.augment, seed)?;
    let (h, w) = (s.augment.crop_h, s.augment.crop_w);
    let gt = points_to_density(&aug.annotation, h, w, s.sigma)?;
    let shift = s.shift.sample(w, &mut rng_for(seed, "shift", 0));
    let sim = SimConfig::new(shift as i64, s.lambda)?;
    let [v0, v1] = aug.views;
    let sim_views = [simulate_high_density(&v0, &sim)?, simulate_high_density(&v1, &sim)?];
    let gt_sim = generate_gt(&gt, sim.shift)?;
    Ok(BatchItem { views: [v0, v1], gt, sim_views, gt_sim, sim, count: aug.annotation.len() })
}

/// Network-ready tensors for a list of items. Views are stacked as
/// `[view0 of every item, view1 of every item]`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub items: Vec<BatchItem>,
    /// `(2N, 3, H, W)`.
    pub low: Tensor<T>,
    /// `(2N, 3, H, Wp)`, right-padded simulated views.
    pub high: Tensor<T>,
    pub gt_low: Tensor<T>,
    pub gt_high: Tensor<T>,
    pub labels_low: Tensor<T>,
    pub labels_high: Tensor<T>,
}

fn density_batch<T: Elem>(maps: &[&Raster], width: usize, factor: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut gts = Vec::with_capacity(maps.len());
    let mut labels = Vec::with_capacity(maps.len());
    for m in maps {
        let pooled = m.pad_to(m.height(), width)?.block_sum(factor)?;
        labels.push(pooled.map(|v| if v > 0.0 { 1.0 } else { 0.0 }).to_chw());
        gts.push(pooled.to_chw());
    }
    Ok((Tensor::stack(&gts), Tensor::stack(&labels)))
}

impl<T: Elem> Batch<T> {
    pub fn new(items: Vec<BatchItem>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (h, w) = (first.gt.height(), first.gt.width());
        let wp = items.iter().map(|it| it.gt_sim.width()).max().unwrap_or(w).div_ceil(STRIDE) * STRIDE;
        let order = |v: usize| items.iter().map(move |it| (it, v));
        let low_views: Vec<Raster> = order(0).chain(order(1)).map(|(it, v)| it.views[v].clone()).collect();
        let high_views = order(0)
            .chain(order(1))
            .map(|(it, v)| it.sim_views[v].pad_to(h, wp))
            .collect::<Result<Vec<_>>>()?;
        let gts: Vec<&Raster> = order(0).chain(order(1)).map(|(it, _)| &it.gt).collect();
        let sims: Vec<&Raster> = order(0).chain(order(1)).map(|(it, _)| &it.gt_sim).collect();
        let (gt_low, labels_low) = density_batch(&gts, w, STRIDE)?;
        let (gt_high, labels_high) = density_batch(&sims, wp, STRIDE)?;
        Ok(Self {
            low: image_batch(&low_views)?,
            high: image_batch(&high_views)?,
            gt_low,
            gt_high,
            labels_low,
            labels_high,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The first view of every item, `(N, 3, H, W)`.
    pub fn low_first_view(&self) -> Tensor<T> {
        let n = self.items.len();
        let per = self.low.len() / (2 * n);
        let mut shape = self.low.shape().to_vec();
        shape[0] = n;
        Tensor::new(shape, self.low.data()[..n * per].to_vec())
    }
}

/// Loss weights and HFEM options used by the forward graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub hfem: HfemConfig,
    pub lambda: f64,
}

impl From<&TrainSettings> for LossSettings {
    fn from(s: &TrainSettings) -> Self {
        Self { weights: s.loss, hfem: s.hfem, lambda: s.lambda }
    }
}

/// A forward pass with its loss graph.
pub struct LossGraph<T> {
    pub ctx: Ctx<T>,
    pub total: Var,
    pub parts: LossParts,
    /// Graph nodes of each term, when present.
    pub terms: [Option<Var>; 4],
}

const TAP_FACTORS: [usize; 3] = [4, 8, 16];

/// Builds the full loss graph. Models with a high-density branch are trained
/// on the simulated views (all four terms); low-only models on the plain
/// views (no enhancement term).
pub fn forward_loss<T: Elem>(model: &Model<T>, batch: &Batch<T>, s: &LossSettings, train: bool) -> Result<LossGraph<T>> {
    let mut ctx = Ctx::new(train);
    let n = batch.len();
    let (den, cls, con, enh) = if model.high.is_some() {
        let x = ctx.g.constant(batch.high.clone());
        let fwd = model.forward_high(&mut ctx, x)?;
        let den = density_loss_graph(&mut ctx.g, fwd.density, &batch.gt_high)?;
        let cls = patch_cls_loss_graph(&mut ctx.g, fwd.cls_logits, &batch.labels_high)?;
        let con = consistency_terms(&mut ctx, [fwd.attn_ld, fwd.attn_hd])?;
        let x_le = ctx.g.constant(batch.low_first_view());
        let le = model.low.encoder.forward(&mut ctx, x_le, false);
        let le = [le.s1, le.s2, le.s3];
        let he = [fwd.pyramid.s1, fwd.pyramid.s2, fwd.pyramid.s3];
        let shifts: Vec<usize> = batch.items.iter().map(|it| it.sim.shift_px()).collect();
        let gt_sim: Vec<Raster> = batch.items.iter().map(|it| it.gt_sim.clone()).collect();
        let hb = HfemBatch { shifts: &shifts, lambda: s.lambda, gt_sim: &gt_sim };
        let mut enh: Option<Var> = None;
        for &tap in s.hfem.scale.taps() {
            let he_first = ctx.g.narrow(he[tap], 0, 0, n);
            let term = hfem_term(&mut ctx.g, le[tap], he_first, TAP_FACTORS[tap], &hb, &s.hfem)?;
            enh = Some(match enh {
                Some(e) => ctx.g.add(e, term),
                None => term,
            });
        }
        (den, cls, con, enh)
    } else {
        let x = ctx.g.constant(batch.low.clone());
        let fwd = model.forward_low(&mut ctx, x)?;
        let den = density_loss_graph(&mut ctx.g, fwd.density, &batch.gt_low)?;
        let cls = patch_cls_loss_graph(&mut ctx.g, fwd.cls_logits, &batch.labels_low)?;
        let con = consistency_terms(&mut ctx, [fwd.attn_ld, None])?;
        (den, cls, con, None)
    };
    let w = &s.weights;
    let mut total = ctx.g.scale(den, T::from_f64(w.theta_den));
    let weighted = [(enh, w.theta_enh), (Some(cls), w.theta_cls), (con, w.theta_con)];
    for (term, theta) in weighted {
        if let Some(t) = term {
            let t = ctx.g.scale(t, T::from_f64(theta));
            total = ctx.g.add(total, t);
        }
    }
    let read = |v: Option<Var>| v.map_or(0.0, |v| Elem::to_f64(ctx.g.value(v).item()));
    let parts = LossParts { den: read(Some(den)), enh: read(enh), cls: read(Some(cls)), con: read(con) };
    Ok(LossGraph { total, parts, terms: [Some(den), enh, Some(cls), con], ctx })
}

/// Mean of the view-consistency losses of the attention matrices present.
fn consistency_terms<T: Elem>(ctx: &mut Ctx<T>, attns: [Option<Var>; 2]) -> Result<Option<Var>> {
    let present: Vec<Var> = attns.into_iter().flatten().collect();
    let mut acc: Option<Var> = None;
    for a in &present {
        let c = consistency_graph(&mut ctx.g, *a)?;
        acc = Some(match acc {
            Some(x) => ctx.g.add(x, c),
            None => c,
        });
    }
    Ok(acc.map(|a| ctx.g.scale(a, T::from_f64(1.0 / present.len() as f64))))
}

fn active_branch_mut<T: Elem>(model: &mut Model<T>) -> &mut Branch<T> {
    match &mut model.high {
        Some(hb) => &mut hb.branch,
        None => &mut model.low,
    }
}

/// One optimizer update. Only parameters bound as trainable in the graph
/// receive gradients, so frozen parts cannot change.
pub fn train_step<T: Elem>(
    model: &mut Model<T>,
    opt: &mut AdamW,
    batch: &Batch<T>,
    s: &LossSettings,
    lr: f64,
    step: usize,
    bn_momentum: f64,
) -> Result<LossParts> {
    let mut lg = forward_loss(model, batch, s, true)?;
    let total = Elem::to_f64(lg.ctx.g.value(lg.total).item());
    if !lg.parts.all_finite() || !total.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("{:?}", lg.parts) });
    }
    let mut grads = lg.ctx.g.backward(lg.total);
    let mut named = BTreeMap::new();
    for (name, v) in lg.ctx.bound() {
        if let Some(g) = grads.take(*v) {
            if !g.all_finite() {
                return Err(Error::NonFiniteLoss { step, detail: format!("gradient of {name}") });
            }
            named.insert(name.clone(), g);
        }
    }
    opt.step(model, &named, lr)?;
    let stats = lg.ctx.take_bn_stats();
    let branch = active_branch_mut(model);
    for (name, st) in &stats {
        if let Some(layer) = branch.conv_layers_mut().find(|l| &l.name == name) {
            layer.update_running(st, bn_momentum);
        }
    }
    Ok(lg.parts)
}

/// Replaces the running statistics of the trainable branch by their average
/// over the given batches.
pub fn recalibrate_bn<T: Elem>(model: &mut Model<T>, batches: &[Batch<T>]) -> Result<()> {
    let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for b in batches {
        let mut ctx = Ctx::new(true);
        if model.high.is_some() {
            let x = ctx.g.constant(b.high.clone());
            model.forward_high(&mut ctx, x)?;
        } else {
            let x = ctx.g.constant(b.low.clone());
            model.forward_low(&mut ctx, x)?;
        }
        for (name, st) in ctx.take_bn_stats() {
            let e = acc.entry(name).or_insert_with(|| (vec![0.0; st.mean.len()], vec![0.0; st.var.len()]));
            for (a, v) in e.0.iter_mut().zip(&st.mean) {
                *a += Elem::to_f64(*v);
            }
            for (a, v) in e.1.iter_mut().zip(&st.var) {
                *a += Elem::to_f64(*v);
            }
        }
    }
    if batches.is_empty() {
        return Ok(());
    }
    let k = batches.len() as f64;
    for layer in active_branch_mut(model).conv_layers_mut() {
        if let Some((m, v)) = acc.get(&layer.name) {
            for (r, x) in layer.running_mean.value.data_mut().iter_mut().zip(m) {
                *r = T::from_f64(x / k);
            }
            for (r, x) in layer.running_var.value.data_mut().iter_mut().zip(v) {
                *r = T::from_f64(x / k);
            }
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub den: f64,
    pub enh: f64,
    pub cls: f64,
    pub con: f64,
    pub total: f64,
}

/// Summary of one training stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageReport {
    pub records: Vec<LogRecord>,
}

impl StageReport {
    pub fn max_lr(&self) -> f64 {
        self.records.iter().map(|r| r.lr).fold(0.0, f64::max)
    }
}

fn batch_seeds(seed: u64, tag: &str, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<(usize, u64)>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &format!("{tag}.shuffle"), epoch as u64));
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| (i, derive_seed(seed, &format!("{tag}.item"), (epoch * n + i) as u64))).collect())
        .collect()
}

/// Builds a batch from `(sample index, augmentation seed)` pairs.
pub fn make_batch<T: Elem>(samples: &[Sample], picks: &[(usize, u64)], s: &TrainSettings) -> Result<Batch<T>> {
    let items = picks.iter().map(|&(i, seed)| prepare_item(&samples[i], s, seed)).collect::<Result<Vec<_>>>()?;
    Batch::new(items)
}

/// Runs `optim.epochs` epochs over `samples` for whichever stage the model is
/// in, then recalibrates batch norm. Every step is logged.
pub fn run_stage<T: Elem>(
    model: &mut Model<T>,
    samples: &[Sample],
    s: &TrainSettings,
    optim: &OptimizerConfig,
    tag: &str,
    log: &mut dyn Write,
) -> Result<StageReport> {
    optim.validate()?;
    s.augment.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let n = samples.len();
    let per_epoch = n.div_ceil(optim.batch_size);
    let schedule = OneCycle::new(optim, optim.epochs * per_epoch);
    let mut opt = AdamW::new(optim);
    let ls = LossSettings::from(s);
    let mut report = StageReport::default();
    let mut step = 0;
    for epoch in 0..optim.epochs {
        for picks in batch_seeds(s.seed, tag, epoch, n, optim.batch_size) {
            let batch = make_batch::<T>(samples, &picks, s)?;
            let lr = schedule.lr(step);
            let parts = train_step(model, &mut opt, &batch, &ls, lr, step, s.bn_momentum)?;
            let rec = LogRecord {
                step,
                lr,
                den: parts.den,
                enh: parts.enh,
                cls: parts.cls,
                con: parts.con,
                total: total_loss(&parts, &s.loss)?,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            report.records.push(rec);
            step += 1;
        }
    }
    let recal = batch_seeds(s.seed, &format!("{tag}.recal"), 0, n, optim.batch_size);
    let batches = recal
        .iter()
        .take(s.recalibration_batches)
        .map(|p| make_batch::<T>(samples, p, s))
        .collect::<Result<Vec<_>>>()?;
    recalibrate_bn(model, &batches)?;
    Ok(report)
}

/// Trains a low-density model from scratch on unsimulated crops and freezes it.
pub fn pretrain_low_branch<T: Elem>(samples: &[Sample], s: &TrainSettings, log: &mut dyn Write) -> Result<Model<T>> {
    let mut model = Model::new_low(s.net.clone(), derive_seed(s.seed, "model.low", 0))?;
    run_stage(&mut model, samples, s, &s.pretrain, "pretrain", log).map_err(|e| match e {
        Error::NonFiniteLoss { step, detail } => Error::DivergedTraining(format!("pretraining step {step}: {detail}")),
        other => other,
    })?;
    model.freeze_low();
    Ok(model)
}

/// Second stage: attaches a high-density branch to a frozen low-density model
/// using the fusion and memory options of `s.net`, and trains it.
pub fn train_high<T: Elem>(pretrained: &Model<T>, samples: &[Sample], s: &TrainSettings, log: &mut dyn Write) -> Result<Model<T>> {
    if pretrained.high.is_some() {
        return Err(Error::Config("model already has a high-density branch".into()));
    }
    let mut model = pretrained.clone();
    model.config.fusion = s.net.fusion;
    model.config.memories = s.net.memories;
    model.config.ldcm_trainable = s.net.ldcm_trainable;
    model.attach_high(derive_seed(s.seed, "model.high", 0))?;
    run_stage(&mut model, samples, s, &s.optim, "train", log)?;
    Ok(model)
}

/// Both stages back to back.
pub fn train_full<T: Elem>(samples: &[Sample], s: &TrainSettings, log: &mut dyn Write) -> Result<Model<T>> {
    let low = pretrain_low_branch(samples, s, log)?;
    train_high(&low, samples, s, log)
}

/// Whether the settings describe the full model (both memories).
pub fn uses_both_memories(s: &TrainSettings) -> bool {
    s.net.memories == MemoryMode::Both
}
