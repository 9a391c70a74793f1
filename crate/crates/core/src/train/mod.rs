//! Two-stage training and evaluation.
//!
//! Stage 1 pretrains encoder, fusion and decoder by reconstructing the
//! normalized input stack; stage 2 fine-tunes on the IR-drop target. Each batch
//! runs one tape per sample on the rayon pool and sums gradients in batch
//! order, so results do not depend on the thread count.

mod dataset;
pub mod metrics;
pub mod prep;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use dataset::{load_cases, load_row, Case, Manifest, ManifestRow, Tag};
pub use metrics::{evaluate, f1_score, mae, reports_csv, EvalReport, EvalRow, GoldenPredictor, MetricError, Predictor};
pub use prep::{augment, postprocess, preprocess, ChannelStats, PadScale, Resize};

use crate::cloud::{cap_pointcloud, FEATURES};
use crate::model::{Head, LmmModel, ModelConfig, ModelError, ModelInput};
use crate::raster::Grid;
use crate::scalar::Real;
use crate::tensor::checkpoint::{Archive, CheckpointError};
use crate::tensor::{Tape, Tensor};

/// Seed of the point-budget subsample; fixed so inference is repeatable.
const CAP_SEED: u64 = 0x5eed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("case {0}: {1}")]
    Case(String, String),
    #[error("no training samples")]
    NoSamples,
    #[error("loss diverged (non-finite) at stage {stage} step {step}")]
    DivergedLoss { stage: u8, step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn manifest(path: &Path, e: impl std::fmt::Display) -> Self {
        TrainError::Manifest { path: path.to_path_buf(), reason: e.to_string() }
    }
}

/// Learning-rate schedule within each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to 0 over the stage.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig { base_channels: 8, ..ModelConfig::default() },
            batch_size: 2,
            pretrain_steps: 50,
            finetune_steps: 200,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sigma_max: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("lr must be positive and betas in [0, 1)".into()));
        }
        if !(self.sigma_max >= 0.0) {
            return Err(TrainError::Config("sigma_max must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr: T::lit(lr),
            beta1: T::lit(beta1),
            beta2: T::lit(beta2),
            eps: T::lit(eps),
            t: 0,
            m: shapes.iter().map(|s| vec![T::zero(); s.len()]).collect(),
            v: shapes.iter().map(|s| vec![T::zero(); s.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (one - self.beta1) * d;
                v[k] = self.beta2 * v[k] + (one - self.beta2) * d * d;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// A model plus the preprocessing constants it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: LmmModel<f32>,
    pub stats: ChannelStats,
    /// Targets are divided by this before training.
    pub target_scale: f64,
}

impl TrainedModel {
    /// Normalized `[1, C, S, S]` stack, capped point features and the fit record.
    pub fn input_for(&self, case: &Case) -> (ModelInput<f32>, PadScale) {
        let cfg = &self.model.config;
        let (chans, rec) = preprocess(&case.channels, cfg.out_side, &self.stats);
        let pc = cap_pointcloud(&case.cloud, cfg.max_points, CAP_SEED);
        let feats: Vec<f32> = pc.feature_matrix().into_iter().map(|v| v as f32).collect();
        let points = Tensor::new(&[pc.len(), FEATURES], feats).expect("feature matrix is len x F");
        (ModelInput { stack: prep::stack_tensor(&chans), points }, rec)
    }

    /// Scaled, fitted target as `[1, 1, S, S]`.
    pub fn target_for(&self, case: &Case) -> Tensor<f32> {
        let (t, _) = prep::fit_map(&case.target, self.model.config.out_side);
        prep::stack_tensor(&[t.map(|v| v / self.target_scale)])
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        let c = self.stats.mean.len();
        a.insert("norm.mean", &Tensor::new(&[c], self.stats.mean.clone()).expect("length c"));
        a.insert("norm.std", &Tensor::new(&[c], self.stats.std.clone()).expect("length c"));
        a.insert("target.scale", &Tensor::new(&[1], vec![self.target_scale]).expect("length 1"));
        a
    }

    pub fn from_archive(config: ModelConfig, a: &Archive) -> Result<Self, TrainError> {
        let model = LmmModel::from_archive(config, a)?;
        let c = config.in_channels;
        let mean = a.load::<f64>("norm.mean", &[c])?.into_data();
        let std = a.load::<f64>("norm.std", &[c])?.into_data();
        let target_scale = a.load::<f64>("target.scale", &[1])?.item();
        Ok(TrainedModel { model, stats: ChannelStats { mean, std }, target_scale })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_archive().save(path)?)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self, TrainError> {
        Self::from_archive(config, &Archive::open(path)?)
    }
}

impl Predictor for TrainedModel {
    fn predict(&self, case: &Case) -> Result<Grid<f64>, TrainError> {
        let (input, rec) = self.input_for(case);
        let y = self.model.forward(&input)?;
        let s = self.model.config.out_side;
        let map = Grid::from_vec(s, s, y.data().iter().map(|&v| v as f64 * self.target_scale).collect());
        Ok(postprocess(&map, &rec))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub history: Vec<LossRecord>,
    /// Clean training-set IR-map MSE (scaled units) before and after stage 2.
    pub initial_mse: f64,
    pub final_mse: f64,
}

pub fn loss_history_csv(h: &[LossRecord]) -> String {
    let mut s = String::from("stage,step,loss\n");
    for r in h {
        s.push_str(&format!("{},{},{:?}\n", r.stage, r.step, r.loss));
    }
    s
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Channel statistics and target scale over `cases`, rounded to the
/// checkpoint's 32-bit storage so saved and in-memory models agree.
pub fn fit_constants(cases: &[Case], side: usize) -> (ChannelStats, f64) {
    let fitted: Vec<Vec<Grid<f64>>> =
        cases.iter().map(|c| c.channels.iter().map(|g| prep::fit_map(g, side).0).collect()).collect();
    let st = ChannelStats::compute(&fitted);
    let stats = ChannelStats {
        mean: st.mean.into_iter().map(round_f32).collect(),
        std: st.std.into_iter().map(|s| round_f32(s).max(prep::STD_FLOOR)).collect(),
    };
    let tmax = cases.iter().map(|c| c.target.max()).fold(0.0, f64::max);
    let scale = if tmax > 0.0 { round_f32(tmax) } else { 1.0 };
    (stats, scale)
}

struct Prepared {
    input: ModelInput<f32>,
    target: Tensor<f32>,
}

fn sample_loss(
    model: &LmmModel<f32>,
    p: &Prepared,
    head: Head,
    noise: Option<(u64, f64)>,
) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    let mut input = p.input.clone();
    if let Some((seed, sigma_max)) = noise {
        augment(&mut input.stack, seed, sigma_max);
    }
    let tape = Tape::new();
    let b = model.bind(&tape, true);
    let out = model.run(&b, &input, head)?;
    let target = match head {
        Head::IrMap => tape.constant(p.target.clone()),
        Head::Reconstruct => tape.constant(p.input.stack.clone()),
    };
    let loss = out.mse_loss(&target).map_err(ModelError::from)?;
    let g = tape.backward(loss);
    Ok((loss.value().item() as f64, b.gradients(&g)))
}

fn dataset_mse(model: &LmmModel<f32>, data: &[Prepared]) -> Result<f64, TrainError> {
    let losses = data
        .par_iter()
        .map(|p| {
            let y = model.forward(&p.input)?;
            Ok(y.data().iter().zip(p.target.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>()
                / y.len() as f64)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Two-stage training from a seeded initialization; `on_step` sees each
/// batch loss as it is produced.
pub fn train(cases: &[Case], cfg: &TrainConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let (stats, target_scale) = fit_constants(cases, cfg.model.out_side);
    let mut trained = TrainedModel { model: LmmModel::new(cfg.model, cfg.seed)?, stats, target_scale };
    let data: Vec<Prepared> = cases
        .iter()
        .map(|c| Prepared { input: trained.input_for(c).0, target: trained.target_for(c) })
        .collect();
    let order: Vec<usize> = cases.iter().enumerate().flat_map(|(i, c)| std::iter::repeat_n(i, c.repeats)).collect();
    let noise = cfg.model.ablation.augmentation() && cfg.sigma_max > 0.0;
    let mut history = Vec::new();
    let mut initial_mse = 0.0;
    for (stage, steps, head) in [(1u8, cfg.pretrain_steps, Head::Reconstruct), (2, cfg.finetune_steps, Head::IrMap)] {
        if stage == 2 {
            initial_mse = dataset_mse(&trained.model, &data)?;
        }
        let model = &mut trained.model;
        let mut adam = Adam::new(model.params.tensors(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(stage as u64));
        let mut queue: Vec<usize> = Vec::new();
        for step in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if queue.is_empty() {
                    queue = order.clone();
                    queue.shuffle(&mut rng);
                }
                batch.push(queue.pop().expect("refilled"));
            }
            let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let m: &LmmModel<f32> = model;
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| sample_loss(m, &data[i], head, noise.then_some((s, cfg.sigma_max))))
                .collect::<Result<Vec<_>, _>>()?;
            let n = results.len() as f32;
            let mut loss = 0.0;
            let mut grads: Vec<Tensor<f32>> = m.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (l, g) in &results {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, &v)| *a += v);
                }
            }
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
            let loss = loss / n as f64;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { stage, step });
            }
            adam.lr = cfg.lr_schedule.at(cfg.lr, step, steps) as f32;
            adam.step(model.params.tensors_mut(), &grads);
            let rec = LossRecord { stage, step, loss };
            log::debug!("stage {stage} step {step} loss {loss:.6e}");
            on_step(&rec);
            history.push(rec);
        }
    }
    let final_mse = dataset_mse(&trained.model, &data)?;
    Ok(TrainOutcome { trained, history, initial_mse, final_mse })
}
