//! Two-branch counting network: a small strided encoder with taps at strides
//! 4/8/16, a six-layer decoder, memory re-encoding and a density head.

mod layers;
mod model;

use std::sync::atomic::{AtomicUsize, Ordering};

use densim_tensor::{Elem, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub use layers::{Conv1x1, ConvBn, Ctx, Module, Param};
pub use model::{Forward, FusionHead, HighBranch, MemoryMode, Model, NetConfig};

/// Every spatial input dimension must be a multiple of this.
pub const STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the first (stride-2) convolution.
    pub base_channels: usize,
    /// Channels at S1, S2 and S3.
    pub stage_channels: [usize; 3],
    /// Channels of the S3 output; equal to `stage_channels[2]`.
    pub out_channels_c1: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { base_channels: 16, stage_channels: [32, 64, 128], out_channels_c1: 128 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if self.out_channels_c1 != self.stage_channels[2] {
            return Err(Error::Config(format!(
                "encoder.out_channels_c1 ({}) must equal stage_channels[2] ({})",
                self.out_channels_c1, self.stage_channels[2]
            )));
        }
        Ok(())
    }
}

/// Encoder taps; `S` is a graph variable or a concrete tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pyramid<S> {
    pub s1: S,
    pub s2: S,
    pub s3: S,
}

pub type FeaturePyramid<T> = Pyramid<Tensor<T>>;

/// Counts forward passes so tests can tell which branch ran.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicUsize);

impl CallCounter {
    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        CallCounter(AtomicUsize::new(self.get()))
    }
}

/// Stage layout: two convs per stage; the first stage downsamples twice, the
/// others once, landing on strides 4, 8 and 16.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub layers: Vec<ConvBn<T>>,
}

impl<T: Elem> Encoder<T> {
    pub fn new(prefix: &str, cfg: &EncoderConfig, seed: u64) -> Self {
        let [c1, c2, c3] = cfg.stage_channels;
        let spec = [(3, cfg.base_channels, 2), (cfg.base_channels, c1, 2), (c1, c2, 2), (c2, c2, 1), (c2, c3, 2), (c3, c3, 1)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| ConvBn::new(&format!("{prefix}.enc.{i}"), cin, cout, 3, s, seed))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, trainable: bool) -> Pyramid<Var> {
        let mut h = x;
        let mut taps = Vec::with_capacity(3);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h, trainable);
            if i % 2 == 1 {
                taps.push(h);
            }
        }
        Pyramid { s1: taps[0], s2: taps[1], s3: taps[2] }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, ConvBn::out_channels)
    }
}

/// Six 3x3 conv layers and one 1x1, all with batch norm and ReLU, constant width `c2`.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub layers: Vec<ConvBn<T>>,
}

impl<T: Elem> Decoder<T> {
    pub fn new(prefix: &str, c1: usize, c2: usize, seed: u64) -> Self {
        let mut layers: Vec<ConvBn<T>> =
            (0..6).map(|i| ConvBn::new(&format!("{prefix}.dec.{i}"), if i == 0 { c1 } else { c2 }, c2, 3, 1, seed)).collect();
        layers.push(ConvBn::new(&format!("{prefix}.dec.6"), c2, c2, 1, 1, seed));
        Self { layers }
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, trainable: bool) -> Var {
        self.layers.iter().fold(x, |h, l| l.forward(ctx, h, trainable))
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].weight.value.dim(1)
    }
}

/// Encoder, decoder and patch-classification head of one branch.
#[derive(Debug, Clone)]
pub struct Branch<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub cls_head: Conv1x1<T>,
    pub frozen: bool,
    pub calls: CallCounter,
}

impl<T: Elem> Branch<T> {
    pub fn new(prefix: &str, enc: &EncoderConfig, c2: usize, seed: u64) -> Self {
        Self {
            encoder: Encoder::new(prefix, enc, seed),
            decoder: Decoder::new(prefix, enc.out_channels_c1, c2, seed),
            cls_head: Conv1x1::new(&format!("{prefix}.cls"), c2, 1, seed),
            frozen: false,
            calls: CallCounter::default(),
        }
    }

    pub fn c2(&self) -> usize {
        self.cls_head.in_channels()
    }

    /// Encoder taps and decoder feature for an NCHW batch.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> (Pyramid<Var>, Var) {
        self.calls.bump();
        let pyr = self.encoder.forward(ctx, x, !self.frozen);
        let f = self.decoder.forward(ctx, pyr.s3, !self.frozen);
        (pyr, f)
    }

    pub fn cls_logits(&self, ctx: &mut Ctx<T>, f: Var) -> Var {
        self.cls_head.forward(ctx, f, !self.frozen)
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        self.encoder.layers.iter_mut().chain(self.decoder.layers.iter_mut())
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvBn<T>> {
        self.encoder.layers.iter().chain(self.decoder.layers.iter())
    }

    /// Eval-mode encoding of one image.
    pub fn encode(&self, img: &Raster) -> Result<FeaturePyramid<T>> {
        let x = image_batch(std::slice::from_ref(img))?;
        let mut ctx = Ctx::new(false);
        let xv = ctx.g.constant(x);
        let (pyr, _) = self.forward(&mut ctx, xv);
        Ok(Pyramid {
            s1: ctx.g.value(pyr.s1).index0(0),
            s2: ctx.g.value(pyr.s2).index0(0),
            s3: ctx.g.value(pyr.s3).index0(0),
        })
    }

    /// Eval-mode decoding of a `(c1, h, w)` feature to `(c2, h, w)`.
    pub fn decode(&self, s3: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = s3.shape() else {
            return Err(Error::Shape(format!("decoder input must be (C,H,W), got {:?}", s3.shape())));
        };
        if *c != self.decoder.in_channels() {
            return Err(Error::Shape(format!("decoder expects {} channels, got {c}", self.decoder.in_channels())));
        }
        let mut ctx = Ctx::new(false);
        let x = ctx.g.constant(s3.clone().reshape(vec![1, *c, *h, *w]));
        let f = self.decoder.forward(&mut ctx, x, false);
        Ok(ctx.g.value(f).index0(0))
    }
}

/// Marks a branch frozen: no optimizer updates, batch norm on fixed statistics.
pub fn freeze_branch<T: Elem>(mut b: Branch<T>) -> Branch<T> {
    b.frozen = true;
    b
}

impl<T: Elem> Module<T> for Branch<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv_layers().for_each(|l| l.visit(f));
        self.cls_head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv_layers_mut().for_each(|l| l.visit_mut(f));
        self.cls_head.visit_mut(f);
    }
}

/// `1x1 conv + ReLU` applied to a `(C, h, w)` feature; output `(1, h, w)`.
pub fn density_head<T: Elem>(head: &Conv1x1<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = f.shape() else {
        return Err(Error::Shape(format!("head input must be (C,H,W), got {:?}", f.shape())));
    };
    if *c != head.in_channels() {
        return Err(Error::Shape(format!("density head expects {} channels, got {c}", head.in_channels())));
    }
    let mut ctx = Ctx::new(false);
    let x = ctx.g.constant(f.clone().reshape(vec![1, *c, *h, *w]));
    let y = head.forward(&mut ctx, x, false);
    let y = ctx.g.relu(y);
    Ok(ctx.g.value(y).index0(0))
}

/// Stacks equally sized images into an `(N, 3, H, W)` batch; grey images are
/// replicated to three channels. Dimensions must be multiples of [`STRIDE`].
pub fn image_batch<T: Elem>(images: &[Raster]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if h % STRIDE != 0 || w % STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {h}x{w} is not a positive multiple of {STRIDE}")));
    }
    let mut items = Vec::with_capacity(images.len());
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape(format!("batch mixes {h}x{w} with {}x{}", img.height(), img.width())));
        }
        let t = match img.channels() {
            3 => img.to_chw(),
            1 => {
                let plane = img.to_chw::<T>().into_data();
                Tensor::new(vec![3, h, w], [plane.as_slice(); 3].concat())
            }
            c => return Err(Error::Shape(format!("images must have 1 or 3 channels, got {c}"))),
        };
        items.push(t);
    }
    Ok(Tensor::stack(&items))
}
