//! Count metrics, test-time inference and the low-to-high generalization
//! experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use densim_tensor::Elem;
use serde::{Deserialize, Serialize};

use crate::ddmem::Fusion;
use crate::error::{Error, Result};
use crate::network::{image_batch, Ctx, MemoryMode, Model, STRIDE};
use crate::raster::Raster;
use crate::seed::derive_seed;
use crate::synth::{synthesize_split, Sample, SynthConfig};
use crate::training::{pretrain_low_branch, train_high, TrainSettings};

/// Mean absolute count error.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok(pairs.iter().map(|(c, g)| (c - g).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Root mean squared count error.
pub fn mse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    Ok((pairs.iter().map(|(c, g)| (c - g).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "N")]
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    /// `(predicted, ground truth)` per image.
    pub per_image: Vec<(f64, f64)>,
}

impl EvalResult {
    pub fn from_pairs(per_image: Vec<(f64, f64)>) -> Result<Self> {
        Ok(Self { n: per_image.len(), mae: mae(&per_image)?, mse: mse(&per_image)?, per_image })
    }
}

/// Predicted stride-16 density map and count of one image.
///
/// The image is zero-padded on the right and bottom to multiples of 16; the
/// count sums the cells that overlap the original image.
pub fn infer<T: Elem>(img: &Raster, model: &Model<T>) -> Result<(Raster, f64)> {
    let padded = img.pad_to_multiple(STRIDE);
    let mut ctx = Ctx::new(false);
    let x = ctx.g.constant(image_batch::<T>(std::slice::from_ref(&padded))?);
    let out = model.forward_infer(&mut ctx, x)?;
    let map = Raster::from_chw(&ctx.g.value(out.density).index0(0))?;
    let (ch, cw) = (img.height().div_ceil(STRIDE), img.width().div_ceil(STRIDE));
    let mut count = 0.0;
    for y in 0..ch {
        for x in 0..cw {
            count += map.get(y, x, 0);
        }
    }
    Ok((map, count))
}

/// Runs [`infer`] over a labelled set.
pub fn evaluate<T: Elem>(model: &Model<T>, samples: &[Sample]) -> Result<EvalResult> {
    let pairs = samples
        .iter()
        .map(|s| infer(&s.image, model).map(|(_, c)| (c, s.annotation.len() as f64)))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_pairs(pairs)
}

/// A model configuration compared in the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variant {
    /// The pretrained low-density model alone, no simulation or memories.
    Baseline { name: String },
    /// A high-density branch trained with the given memories and fusion.
    High { name: String, memories: MemoryMode, fusion: Fusion },
}

impl Variant {
    pub fn name(&self) -> &str {
        match self {
            Variant::Baseline { name } | Variant::High { name, .. } => name,
        }
    }

    pub fn baseline() -> Self {
        Variant::Baseline { name: "baseline".into() }
    }

    pub fn high(name: &str, memories: MemoryMode, fusion: Fusion) -> Self {
        Variant::High { name: name.into(), memories, fusion }
    }

    /// Baseline, the full model, single-memory ablations and fusion alternatives.
    pub fn ablation_grid() -> Vec<Self> {
        vec![
            Self::baseline(),
            Self::high("ldcm", MemoryMode::Ldcm, Fusion::Concat),
            Self::high("hdcm", MemoryMode::Hdcm, Fusion::Concat),
            Self::high("ldcm+hdcm", MemoryMode::Both, Fusion::Concat),
            Self::high("add", MemoryMode::Both, Fusion::Add),
            Self::high("adaptive", MemoryMode::Both, Fusion::Adaptive),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub settings: TrainSettings,
    pub train_synth: SynthConfig,
    pub test_synth: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            settings: TrainSettings::default(),
            train_synth: SynthConfig::low_density(),
            test_synth: SynthConfig::high_density(),
            n_train: 64,
            n_test: 32,
            seeds: vec![0, 1, 2],
            variants: Variant::ablation_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub mae: f64,
    pub mse: f64,
}

/// Seed-averaged result of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub mae: f64,
    pub mse: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: Vec<u64>,
    pub runs: Vec<SeedRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Report {
    pub variants: BTreeMap<String, VariantReport>,
}

impl Report {
    pub fn get(&self, name: &str) -> Option<&VariantReport> {
        self.variants.get(name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table, one row per variant in the given order.
    pub fn table(&self, order: &[Variant]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>5}", "variant", "MAE", "MSE", "N");
        for v in order {
            if let Some(r) = self.variants.get(v.name()) {
                let _ = writeln!(s, "{:<14} {:>10.3} {:>10.3} {:>5}", v.name(), r.mae, r.mse, r.n);
            }
        }
        s
    }
}

/// Trains every variant on a synthetic low-density split and evaluates it on a
/// synthetic high-density split, once per seed; metrics are averaged over
/// seeds. The pretrained low-density model is shared by all variants of a seed.
pub fn run_generalization_experiment(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<Report> {
    let mut runs: BTreeMap<String, Vec<(SeedRun, usize)>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let train = synthesize_split(&cfg.train_synth, cfg.n_train, derive_seed(seed, "data", 0), "train")?;
        let test = synthesize_split(&cfg.test_synth, cfg.n_test, derive_seed(seed, "data", 1), "test")?;
        let settings = TrainSettings { seed, ..cfg.settings.clone() };
        let low: Model<f32> = pretrain_low_branch(&train, &settings, log)?;
        for v in &cfg.variants {
            let result = match v {
                Variant::Baseline { .. } => evaluate(&low, &test)?,
                Variant::High { memories, fusion, .. } => {
                    let mut s = settings.clone();
                    s.net.memories = *memories;
                    s.net.fusion = *fusion;
                    let model = train_high(&low, &train, &s, log)?;
                    evaluate(&model, &test)?
                }
            };
            runs.entry(v.name().to_string())
                .or_default()
                .push((SeedRun { seed, mae: result.mae, mse: result.mse }, result.n));
        }
    }
    let variants = runs
        .into_iter()
        .map(|(name, rs)| {
            let k = rs.len() as f64;
            let report = VariantReport {
                mae: rs.iter().map(|(r, _)| r.mae).sum::<f64>() / k,
                mse: rs.iter().map(|(r, _)| r.mse).sum::<f64>() / k,
                n: rs.first().map_or(0, |(_, n)| *n),
                seed: rs.iter().map(|(r, _)| r.seed).collect(),
                runs: rs.into_iter().map(|(r, _)| r).collect(),
            };
            (name, report)
        })
        .collect();
    Ok(Report { variants })
}
