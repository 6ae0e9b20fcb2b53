use std::fmt;
use std::str::FromStr;

use densim_tensor::{Elem, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{Conv1x1, Ctx, Module, Param};
use super::{Branch, EncoderConfig, Pyramid};
use crate::ddmem::{self, init_memory, FeatureFusion, Fusion, MemoryBank};
use crate::error::{Error, Result};

/// Initial bias of the density head. Memory reconstructions start out nearly
/// constant across pixels, so a non-positive start can leave the output ReLU
/// dead everywhere from the first step.
pub const HEAD_BIAS_INIT: f64 = 0.01;

/// Which memories re-encode the high-density decoder feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    #[default]
    Both,
    Ldcm,
    Hdcm,
    None,
}

impl FromStr for MemoryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(MemoryMode::Both),
            "ldcm" => Ok(MemoryMode::Ldcm),
            "hdcm" => Ok(MemoryMode::Hdcm),
            "none" => Ok(MemoryMode::None),
            other => Err(Error::UnknownStrategy(other.to_string())),
        }
    }
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::Both => "both",
            MemoryMode::Ldcm => "ldcm",
            MemoryMode::Hdcm => "hdcm",
            MemoryMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub c2: usize,
    /// Memory slots per bank.
    pub l: usize,
    pub fusion: Fusion,
    pub memories: MemoryMode,
    /// Keep training the copied low-density memory in the second stage.
    pub ldcm_trainable: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            c2: 64,
            l: 64,
            fusion: Fusion::Concat,
            memories: MemoryMode::Both,
            ldcm_trainable: false,
        }
    }
}

/// Density head sitting on top of the memory reconstructions.
#[derive(Debug, Clone)]
pub enum FusionHead<T> {
    /// One reconstruction (or the raw feature) into a `c2 -> 1` head.
    Single(Conv1x1<T>),
    /// `[ld; hd]` into a `2c2 -> 1` head.
    Concat(Conv1x1<T>),
    /// `ld + hd` into a `c2 -> 1` head.
    Add(Conv1x1<T>),
    /// Two density maps blended by a learned per-pixel selection.
    Adaptive { ld: Conv1x1<T>, hd: Conv1x1<T>, select: Conv1x1<T> },
}

impl<T: Elem> FusionHead<T> {
    /// Initialized from a pretrained `c2 -> 1` head. The concatenation head
    /// gets that head's weights on both halves, so at initialization it
    /// computes exactly what the addition head computes.
    fn warm_start(base: &Conv1x1<T>, mode: MemoryMode, fusion: Fusion, seed: u64) -> Self {
        let renamed = |name: &str| {
            let mut h = base.clone();
            h.weight.name = format!("high.{name}.weight");
            h.bias.name = format!("high.{name}.bias");
            h
        };
        if mode != MemoryMode::Both {
            return FusionHead::Single(renamed("head"));
        }
        match fusion {
            Fusion::Concat => {
                let c2 = base.in_channels();
                let mut h = Conv1x1::new("high.head", 2 * c2, 1, seed);
                let w = [base.weight.value.data(), base.weight.value.data()].concat();
                h.weight.value = Tensor::new(vec![1, 2 * c2, 1, 1], w);
                h.bias.value = base.bias.value.clone();
                FusionHead::Concat(h)
            }
            Fusion::Add => FusionHead::Add(renamed("head")),
            Fusion::Adaptive => {
                let mut select = Conv1x1::new("high.select", 2 * base.in_channels(), 1, seed);
                select.zero();
                FusionHead::Adaptive { ld: renamed("head_ld"), hd: renamed("head_hd"), select }
            }
        }
    }
}

impl<T: Elem> Module<T> for FusionHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            FusionHead::Single(h) | FusionHead::Concat(h) | FusionHead::Add(h) => h.visit(f),
            FusionHead::Adaptive { ld, hd, select } => {
                ld.visit(f);
                hd.visit(f);
                select.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            FusionHead::Single(h) | FusionHead::Concat(h) | FusionHead::Add(h) => h.visit_mut(f),
            FusionHead::Adaptive { ld, hd, select } => {
                ld.visit_mut(f);
                hd.visit_mut(f);
                select.visit_mut(f);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HighBranch<T> {
    pub branch: Branch<T>,
    pub hdcm: MemoryBank<T>,
    pub head: FusionHead<T>,
}

/// Graph outputs of one forward pass over an NCHW batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub pyramid: Pyramid<Var>,
    /// Decoder output, `(N, c2, h, w)`.
    pub feature: Var,
    /// `(N*h*w, l)` attention over the low-density memory, if used.
    pub attn_ld: Option<Var>,
    pub attn_hd: Option<Var>,
    /// `(N, 1, h, w)`, non-negative.
    pub density: Var,
    pub cls_logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: NetConfig,
    pub low: Branch<T>,
    pub ldcm: MemoryBank<T>,
    pub low_head: Conv1x1<T>,
    pub high: Option<HighBranch<T>>,
}

fn memory_pass<T: Elem>(ctx: &mut Ctx<T>, rows: Var, bank: &MemoryBank<T>, trainable: bool) -> Result<(Var, Var)> {
    let v = ctx.bind(&bank.vectors, trainable && bank.trainable);
    let a = ddmem::attention_scores_rows(&mut ctx.g, rows, v)?;
    let r = ddmem::reconstruct_rows(&mut ctx.g, v, a)?;
    Ok((a, r))
}

impl<T: Elem> Model<T> {
    /// Fresh low-density model (branch, memory and head), all trainable.
    pub fn new_low(config: NetConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if config.c2 == 0 {
            return Err(Error::BadDims("c2 must be positive".into()));
        }
        Ok(Self {
            low: Branch::new("low", &config.encoder, config.c2, seed),
            ldcm: init_memory("low.ldcm", config.l, config.c2, seed, true)?,
            low_head: Conv1x1::new("low.head", config.c2, 1, seed).with_bias(HEAD_BIAS_INIT),
            high: None,
            config,
        })
    }

    /// Freezes the low-density branch and memory and adds a high-density branch
    /// initialized from it, a fresh high-density memory and a fusion head.
    pub fn attach_high(&mut self, seed: u64) -> Result<()> {
        self.freeze_low();
        let mut branch = self.low.clone();
        branch.frozen = false;
        branch.calls = Default::default();
        for layer in branch.conv_layers_mut() {
            layer.name = layer.name.replacen("low.", "high.", 1);
        }
        branch.visit_mut(&mut |p| p.name = p.name.replacen("low.", "high.", 1));
        self.ldcm.trainable = self.config.ldcm_trainable;
        self.high = Some(HighBranch {
            branch,
            hdcm: init_memory("high.hdcm", self.config.l, self.config.c2, seed, true)?,
            head: FusionHead::warm_start(&self.low_head, self.config.memories, self.config.fusion, seed),
        });
        Ok(())
    }

    pub fn freeze_low(&mut self) {
        self.low.frozen = true;
        self.ldcm.trainable = false;
    }

    pub fn is_frozen_low(&self) -> bool {
        self.low.frozen
    }

    /// Low-density path: branch, low-density memory, head.
    pub fn forward_low(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Forward> {
        let (pyramid, feature) = self.low.forward(ctx, x);
        let [n, _, h, w] = ctx.g.shape(feature).to_vec()[..] else { unreachable!() };
        let rows = ctx.g.to_rows(feature);
        let (a, r) = memory_pass(ctx, rows, &self.ldcm, !self.low.frozen)?;
        let recon = ctx.g.from_rows(r, n, h, w);
        let d = self.low_head.forward(ctx, recon, !self.low.frozen);
        let density = ctx.g.relu(d);
        let cls_logits = self.low.cls_logits(ctx, feature);
        Ok(Forward { pyramid, feature, attn_ld: Some(a), attn_hd: None, density, cls_logits })
    }

    /// High-density path: branch, both memories, fusion, head.
    pub fn forward_high(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Forward> {
        let hb = self.high.as_ref().ok_or_else(|| Error::ModelNotLoaded("model has no high-density branch".into()))?;
        let (pyramid, feature) = hb.branch.forward(ctx, x);
        let [n, _, h, w] = ctx.g.shape(feature).to_vec()[..] else { unreachable!() };
        let rows = ctx.g.to_rows(feature);
        let mode = self.config.memories;
        let (attn_ld, rec_ld) = if matches!(mode, MemoryMode::Both | MemoryMode::Ldcm) {
            let (a, r) = memory_pass(ctx, rows, &self.ldcm, true)?;
            (Some(a), Some(ctx.g.from_rows(r, n, h, w)))
        } else {
            (None, None)
        };
        let (attn_hd, rec_hd) = if matches!(mode, MemoryMode::Both | MemoryMode::Hdcm) {
            let (a, r) = memory_pass(ctx, rows, &hb.hdcm, true)?;
            (Some(a), Some(ctx.g.from_rows(r, n, h, w)))
        } else {
            (None, None)
        };
        let density = match (&hb.head, rec_ld, rec_hd) {
            (FusionHead::Single(head), ld, hd) => {
                let input = ld.or(hd).unwrap_or(feature);
                let d = head.forward(ctx, input, true);
                ctx.g.relu(d)
            }
            (FusionHead::Concat(head), Some(ld), Some(hd)) => {
                let fused = ddmem::fuse(&mut ctx.g, ld, hd, FeatureFusion::Concat)?;
                let d = head.forward(ctx, fused, true);
                ctx.g.relu(d)
            }
            (FusionHead::Add(head), Some(ld), Some(hd)) => {
                let fused = ddmem::fuse(&mut ctx.g, ld, hd, FeatureFusion::Add)?;
                let d = head.forward(ctx, fused, true);
                ctx.g.relu(d)
            }
            (FusionHead::Adaptive { ld: hl, hd: hh, select }, Some(ld), Some(hd)) => {
                let d_ld = hl.forward(ctx, ld, true);
                let d_ld = ctx.g.relu(d_ld);
                let d_hd = hh.forward(ctx, hd, true);
                let d_hd = ctx.g.relu(d_hd);
                let both = ctx.g.concat(ld, hd, 1);
                let s = select.forward(ctx, both, true);
                ddmem::fuse_adaptive(&mut ctx.g, d_ld, d_hd, s)?
            }
            _ => return Err(Error::DimMismatch("fusion head does not match the memory configuration".into())),
        };
        let cls_logits = hb.branch.cls_logits(ctx, feature);
        Ok(Forward { pyramid, feature, attn_ld, attn_hd, density, cls_logits })
    }

    /// The path used at test time: the high-density branch when present,
    /// otherwise the low-density model on its own.
    pub fn forward_infer(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Forward> {
        if self.high.is_some() {
            self.forward_high(ctx, x)
        } else {
            self.forward_low(ctx, x)
        }
    }

    /// Names of all parameters an optimizer may change in the current stage.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |p: &Param<T>, t: bool| {
            if t {
                out.push(p.name.clone());
            }
        };
        let low_t = !self.low.frozen;
        for layer in self.low.conv_layers() {
            push(&layer.weight, low_t);
            push(&layer.gamma, low_t);
            push(&layer.beta, low_t);
        }
        self.low.cls_head.visit(&mut |p| push(p, low_t));
        self.ldcm.visit(&mut |p| push(p, self.ldcm.trainable));
        self.low_head.visit(&mut |p| push(p, low_t));
        if let Some(hb) = &self.high {
            for layer in hb.branch.conv_layers() {
                push(&layer.weight, true);
                push(&layer.gamma, true);
                push(&layer.beta, true);
            }
            hb.branch.cls_head.visit(&mut |p| push(p, true));
            hb.hdcm.visit(&mut |p| push(p, true));
            hb.head.visit(&mut |p| push(p, true));
        }
        out
    }

    /// Parameter lookup by name.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit(&mut |p| {
            if p.name == name {
                found = Some(p.value.clone());
            }
        });
        found
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Elem>(&self) -> Model<U> {
        fn conv<T: Elem, U: Elem>(c: &super::ConvBn<T>) -> super::ConvBn<U> {
            super::ConvBn {
                name: c.name.clone(),
                weight: cast_param(&c.weight),
                gamma: cast_param(&c.gamma),
                beta: cast_param(&c.beta),
                running_mean: cast_param(&c.running_mean),
                running_var: cast_param(&c.running_var),
                stride: c.stride,
                pad: c.pad,
            }
        }
        fn c1<T: Elem, U: Elem>(c: &Conv1x1<T>) -> Conv1x1<U> {
            Conv1x1 { weight: cast_param(&c.weight), bias: cast_param(&c.bias) }
        }
        fn branch<T: Elem, U: Elem>(b: &Branch<T>) -> Branch<U> {
            Branch {
                encoder: super::Encoder { layers: b.encoder.layers.iter().map(conv).collect() },
                decoder: super::Decoder { layers: b.decoder.layers.iter().map(conv).collect() },
                cls_head: c1(&b.cls_head),
                frozen: b.frozen,
                calls: Default::default(),
            }
        }
        fn bank<T: Elem, U: Elem>(m: &MemoryBank<T>) -> MemoryBank<U> {
            MemoryBank { vectors: cast_param(&m.vectors), trainable: m.trainable }
        }
        Model {
            config: self.config.clone(),
            low: branch(&self.low),
            ldcm: bank(&self.ldcm),
            low_head: c1(&self.low_head),
            high: self.high.as_ref().map(|hb| HighBranch {
                branch: branch(&hb.branch),
                hdcm: bank(&hb.hdcm),
                head: match &hb.head {
                    FusionHead::Single(h) => FusionHead::Single(c1(h)),
                    FusionHead::Concat(h) => FusionHead::Concat(c1(h)),
                    FusionHead::Add(h) => FusionHead::Add(c1(h)),
                    FusionHead::Adaptive { ld, hd, select } => {
                        FusionHead::Adaptive { ld: c1(ld), hd: c1(hd), select: c1(select) }
                    }
                },
            }),
        }
    }
}

fn cast_param<T: Elem, U: Elem>(p: &Param<T>) -> Param<U> {
    Param { name: p.name.clone(), value: p.value.cast() }
}

impl<T: Elem> Module<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.low.visit(f);
        self.ldcm.visit(f);
        self.low_head.visit(f);
        if let Some(hb) = &self.high {
            hb.branch.visit(f);
            hb.hdcm.visit(f);
            hb.head.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.low.visit_mut(f);
        self.ldcm.visit_mut(f);
        self.low_head.visit_mut(f);
        if let Some(hb) = &mut self.high {
            hb.branch.visit_mut(f);
            hb.hdcm.visit_mut(f);
            hb.head.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::image_batch;
    use crate::raster::Raster;

    fn tiny(fusion: Fusion, memories: MemoryMode) -> NetConfig {
        NetConfig {
            encoder: EncoderConfig { base_channels: 4, stage_channels: [4, 6, 8], out_channels_c1: 8 },
            c2: 4,
            l: 3,
            fusion,
            memories,
            ldcm_trainable: false,
        }
    }

    fn run(model: &Model<f64>, high: bool) -> Tensor<f64> {
        let img = Raster::new(32, 48, 3, (0..32 * 48 * 3).map(|i| (i % 29) as f64 / 28.0).collect()).unwrap();
        let mut ctx = Ctx::new(false);
        let x = ctx.g.constant(image_batch(&[img]).unwrap());
        let out = if high { model.forward_high(&mut ctx, x) } else { model.forward_low(&mut ctx, x) }.unwrap();
        ctx.g.value(out.density).clone()
    }

    #[test]
    fn concat_and_add_heads_start_out_equal() {
        let low: Model<f64> = Model::new_low(tiny(Fusion::Concat, MemoryMode::Both), 4).unwrap();
        let mut cat = low.clone();
        cat.attach_high(5).unwrap();
        let mut add = low.clone();
        add.config.fusion = Fusion::Add;
        add.attach_high(5).unwrap();
        let (a, b) = (run(&cat, true), run(&add, true));
        assert_eq!(a.shape(), &[1, 1, 2, 3]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_ldcm_head_reproduces_the_low_model() {
        let mut m: Model<f64> = Model::new_low(tiny(Fusion::Concat, MemoryMode::Ldcm), 4).unwrap();
        let before = run(&m, false);
        m.attach_high(5).unwrap();
        let after = run(&m, true);
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_head_variant_runs() {
        for mode in [MemoryMode::Both, MemoryMode::Ldcm, MemoryMode::Hdcm, MemoryMode::None] {
            for fusion in [Fusion::Concat, Fusion::Add, Fusion::Adaptive] {
                let mut m: Model<f64> = Model::new_low(tiny(fusion, mode), 4).unwrap();
                m.attach_high(5).unwrap();
                let d = run(&m, true);
                assert!(d.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
            }
        }
    }

    #[test]
    fn parameter_names_are_unique_and_prefixed() {
        let mut m: Model<f32> = Model::new_low(tiny(Fusion::Concat, MemoryMode::Both), 4).unwrap();
        m.attach_high(5).unwrap();
        let mut names = Vec::new();
        m.visit(&mut |p| names.push(p.name.clone()));
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(names.iter().all(|s| s.starts_with("low.") || s.starts_with("high.")));
        let trainable = m.trainable_names();
        assert!(trainable.iter().all(|s| s.starts_with("high.")));
        assert!(trainable.iter().any(|s| s == "high.hdcm"));
    }

    #[test]
    fn branches_do_not_share_parameters() {
        let mut m: Model<f32> = Model::new_low(tiny(Fusion::Concat, MemoryMode::Both), 4).unwrap();
        m.attach_high(5).unwrap();
        let hb = m.high.as_mut().unwrap();
        hb.branch.encoder.layers[0].weight.value.data_mut()[0] += 1.0;
        assert_ne!(hb.branch.encoder.layers[0].weight.value, m.low.encoder.layers[0].weight.value);
    }

    #[test]
    fn cast_round_trip() {
        let mut m: Model<f64> = Model::new_low(tiny(Fusion::Adaptive, MemoryMode::Both), 4).unwrap();
        m.attach_high(5).unwrap();
        let back: Model<f64> = m.cast::<f32>().cast();
        let mut a = Vec::new();
        m.visit(&mut |p| a.push(p.value.cast::<f32>()));
        let mut b = Vec::new();
        back.visit(&mut |p| b.push(p.value.cast::<f32>()));
        assert_eq!(a, b);
    }
}
