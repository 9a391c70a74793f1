//! The multimodal IR-drop network.
//!
//! A U-shaped CNN encodes the rasterized circuit stack; a point-cloud
//! transformer encodes the netlist records; one cross-attention step injects
//! pooled netlist tokens into the CNN bottleneck; an attention-gated decoder
//! upsamples back to the input side.

mod params;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use params::{Bound, ParamStore};

use crate::cloud::FEATURES;
use crate::scalar::Real;
use crate::tensor::checkpoint::{Archive, CheckpointError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, ModelError>;

const MASK_LOGIT: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Architecture switches used by the ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub disable_attention_gates: bool,
    pub disable_lnt: bool,
    pub disable_augmentation: bool,
    pub encoder_decoder_only: bool,
}

impl Ablation {
    pub fn gates(&self) -> bool {
        !(self.disable_attention_gates || self.encoder_decoder_only)
    }

    pub fn lnt(&self) -> bool {
        !(self.disable_lnt || self.encoder_decoder_only)
    }

    pub fn augmentation(&self) -> bool {
        !(self.disable_augmentation || self.encoder_decoder_only)
    }

    /// Report label: `EC`, `United`, or the `W-*` tags of disabled parts.
    pub fn label(&self) -> String {
        if self.encoder_decoder_only || (!self.lnt() && !self.gates() && !self.augmentation()) {
            return "EC".into();
        }
        let mut tags = Vec::new();
        if !self.gates() {
            tags.push("W-Att");
        }
        if !self.lnt() {
            tags.push("W-LNT");
        }
        if !self.augmentation() {
            tags.push("W-Aug");
        }
        if tags.is_empty() {
            "United".into()
        } else {
            tags.join("+")
        }
    }

    pub fn set(&mut self, name: &str, on: bool) -> bool {
        match name {
            "disable_attention_gates" => self.disable_attention_gates = on,
            "disable_lnt" => self.disable_lnt = on,
            "disable_augmentation" => self.disable_augmentation = on,
            "encoder_decoder_only" => self.encoder_decoder_only = on,
            _ => return false,
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub encoder_stages: usize,
    pub lnt_embed_dim: usize,
    pub lnt_layers: usize,
    pub lnt_heads: usize,
    pub pool_grid: usize,
    pub out_side: usize,
    /// Point budget for the netlist stream.
    pub max_points: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 6,
            base_channels: 16,
            encoder_stages: 4,
            lnt_embed_dim: 64,
            lnt_layers: 2,
            lnt_heads: 4,
            pool_grid: 16,
            out_side: 512,
            max_points: 1024,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.encoder_stages != 4 {
            return bad(format!("encoder_stages must be 4, got {}", self.encoder_stages));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.pool_grid == 0 || self.max_points == 0 {
            return bad("in_channels, base_channels, pool_grid and max_points must be positive".into());
        }
        if self.lnt_heads == 0 || self.lnt_embed_dim == 0 || self.lnt_embed_dim % self.lnt_heads != 0 {
            return bad(format!(
                "lnt_embed_dim {} must be a positive multiple of lnt_heads {}",
                self.lnt_embed_dim, self.lnt_heads
            ));
        }
        if self.out_side < 16 || self.out_side % 16 != 0 {
            return bad(format!("out_side {} must be a positive multiple of 16", self.out_side));
        }
        Ok(())
    }

    /// Channel width of encoder stage `l` (and of its skip).
    pub fn stage_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.encoder_stages - 1)
    }

    pub fn bottleneck_side(&self) -> usize {
        self.out_side >> self.encoder_stages
    }

    fn gate_channels(&self, l: usize) -> usize {
        (self.stage_channels(l) / 2).max(1)
    }

    fn coarse_channels(&self, l: usize) -> usize {
        if l + 1 == self.encoder_stages {
            self.bottleneck_channels()
        } else {
            self.stage_channels(l + 1)
        }
    }

    /// `(name, shape, fan_in)` of every parameter, in checkpoint order.
    /// `fan_in = 0` marks tensors initialised to zero, `usize::MAX` to one.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut v = Vec::new();
        let conv = |v: &mut Vec<_>, name: String, o: usize, i: usize, k: usize| {
            v.push((format!("{name}.w"), vec![o, i, k, k], i * k * k));
            v.push((format!("{name}.b"), vec![o], 0));
        };
        let mut cin = self.in_channels;
        for l in 0..self.encoder_stages {
            let c = self.stage_channels(l);
            conv(&mut v, format!("enc{l}.c1"), c, cin, 3);
            conv(&mut v, format!("enc{l}.c2"), c, c, 3);
            cin = c;
        }
        let d = self.lnt_embed_dim;
        let dh = d / self.lnt_heads;
        v.push(("lnt.embed.w".into(), vec![FEATURES, d], FEATURES));
        v.push(("lnt.embed.b".into(), vec![d], 0));
        for i in 0..self.lnt_layers {
            for h in 0..self.lnt_heads {
                for m in ["wq", "wk", "wv"] {
                    v.push((format!("lnt{i}.h{h}.{m}"), vec![d, dh], d));
                }
            }
            v.push((format!("lnt{i}.wo"), vec![d, d], d));
            v.push((format!("lnt{i}.ln1.g"), vec![d], usize::MAX));
            v.push((format!("lnt{i}.ln1.b"), vec![d], 0));
            v.push((format!("lnt{i}.ff1.w"), vec![d, 2 * d], d));
            v.push((format!("lnt{i}.ff1.b"), vec![2 * d], 0));
            v.push((format!("lnt{i}.ff2.w"), vec![2 * d, d], 2 * d));
            v.push((format!("lnt{i}.ff2.b"), vec![d], 0));
            v.push((format!("lnt{i}.ln2.g"), vec![d], usize::MAX));
            v.push((format!("lnt{i}.ln2.b"), vec![d], 0));
        }
        let cb = self.bottleneck_channels();
        v.push(("fuse.wq".into(), vec![cb, cb], cb));
        v.push(("fuse.wk".into(), vec![d, cb], d));
        v.push(("fuse.wv".into(), vec![d, cb], d));
        v.push(("fuse.bv".into(), vec![cb], 0));
        for l in (0..self.encoder_stages).rev() {
            let (c, cg, ci) = (self.stage_channels(l), self.coarse_channels(l), self.gate_channels(l));
            v.push((format!("gate{l}.wx"), vec![ci, c, 1, 1], c));
            v.push((format!("gate{l}.wg"), vec![ci, cg, 1, 1], cg));
            conv(&mut v, format!("gate{l}.psi"), 1, ci, 1);
            v.push((format!("dec{l}.up.w"), vec![cg, c, 2, 2], cg * 4));
            v.push((format!("dec{l}.up.b"), vec![c], 0));
            conv(&mut v, format!("dec{l}.conv"), c, 2 * c, 3);
        }
        conv(&mut v, "head".into(), 1, self.base_channels, 1);
        conv(&mut v, "recon".into(), self.in_channels, self.base_channels, 1);
        v
    }
}

/// Which output head to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    IrMap,
    Reconstruct,
}

/// One preprocessed sample: `[1, C, S, S]` stack and `[N, F]` point features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub stack: Tensor<T>,
    pub points: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> LmmModel<T> {
    /// He fan-in normal weights, zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in config.param_specs() {
            let t = match fan_in {
                0 => Tensor::zeros(&shape),
                usize::MAX => Tensor::full(&shape, T::one()),
                f => {
                    let dist = Normal::new(0.0, (2.0 / f as f64).sqrt()).expect("finite std");
                    Tensor::from_fn(&shape, |_| T::lit(dist.sample(&mut rng)))
                }
            };
            params.push(name, t);
        }
        Ok(LmmModel { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, _) in config.param_specs() {
            params.push(name, Tensor::zeros(&shape));
        }
        Ok(LmmModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, t) in self.params.iter() {
            a.insert(name, t);
        }
        a
    }

    pub fn from_archive(config: ModelConfig, a: &Archive) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, _) in config.param_specs() {
            let t = a.load(&name, &shape)?;
            params.push(name, t);
        }
        Ok(LmmModel { config, params })
    }

    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, 'p, T> {
        self.params.bind(tape, trainable)
    }

    /// Inference: `[1, 1, S, S]` IR map.
    pub fn forward(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        self.infer(input, Head::IrMap)
    }

    /// Inference through the reconstruction head: `[1, C, S, S]`.
    pub fn reconstruct(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        self.infer(input, Head::Reconstruct)
    }

    fn infer(&self, input: &ModelInput<T>, head: Head) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        Ok((*self.run(&b, input, head)?.value()).clone())
    }

    /// Full graph on `tape` with bound parameters.
    pub fn run<'t>(&self, b: &Bound<'t, '_, T>, input: &ModelInput<T>, head: Head) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let s = cfg.out_side;
        let want = [1, cfg.in_channels, s, s];
        if input.stack.shape() != want {
            return Err(TensorError::shapes("forward", &[input.stack.shape(), &want]).into());
        }
        let x = b.tape().constant(input.stack.clone());
        let (skips, bottleneck) = self.circuit_encode(b, x)?;
        let fused = if cfg.ablation.lnt() {
            let (tokens, presence) = self.lnt_encode(b, &input.points)?;
            let q = Self::map_to_tokens(bottleneck)?;
            let f = self.fuse(b, q, tokens, &presence)?;
            Self::tokens_to_map(f, cfg.bottleneck_channels(), cfg.bottleneck_side())?
        } else {
            bottleneck
        };
        let d = self.decode(b, fused, &skips)?;
        Ok(match head {
            Head::IrMap => d.conv2d(&b.get("head.w")?, Some(&b.get("head.b")?), 1, 0)?.relu(),
            Head::Reconstruct => d.conv2d(&b.get("recon.w")?, Some(&b.get("recon.b")?), 1, 0)?,
        })
    }

    fn conv_relu<'t>(b: &Bound<'t, '_, T>, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        let w = b.get(&format!("{name}.w"))?;
        let bias = b.get(&format!("{name}.b"))?;
        Ok(x.conv2d(&w, Some(&bias), 1, w.shape()[2] / 2)?.relu())
    }

    /// Skips at sides `S, S/2, S/4, S/8` and the `S/16` bottleneck map.
    pub fn circuit_encode<'t>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<(Vec<Var<'t, T>>, Var<'t, T>)> {
        let mut skips = Vec::with_capacity(self.config.encoder_stages);
        let mut h = x;
        for l in 0..self.config.encoder_stages {
            h = Self::conv_relu(b, h, &format!("enc{l}.c1"))?;
            h = Self::conv_relu(b, h, &format!("enc{l}.c2"))?;
            skips.push(h);
            h = h.max_pool2d()?;
        }
        Ok((skips, h))
    }

    /// `[1, C, h, w]` -> `[h*w, C]`.
    pub fn map_to_tokens<'t>(m: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = m.shape();
        Ok(m.reshape(&[s[1], s[2] * s[3]])?.transpose()?)
    }

    pub fn tokens_to_map<'t>(t: Var<'t, T>, c: usize, side: usize) -> Result<Var<'t, T>> {
        Ok(t.transpose()?.reshape(&[1, c, side, side])?)
    }

    /// Embeds and self-attends over the points, then mean-pools them into a
    /// `pool_grid²` token grid by `(x1, y1)`. Returns tokens and bin presence.
    pub fn lnt_encode<'t>(&self, b: &Bound<'t, '_, T>, points: &Tensor<T>) -> Result<(Var<'t, T>, Vec<bool>)> {
        let sh = points.shape();
        if sh.len() != 2 || sh[1] != FEATURES {
            return Err(TensorError::shapes("lnt_encode", &[sh, &[0, FEATURES]]).into());
        }
        if sh[0] == 0 {
            return Err(ModelError::EmptyCloud);
        }
        let tape = b.tape();
        let p = tape.constant(points.clone());
        let mut e = p.matmul(&b.get("lnt.embed.w")?)?.add_row_bias(&b.get("lnt.embed.b")?)?;
        let eps = T::lit(LN_EPS);
        for i in 0..self.config.lnt_layers {
            let heads = (0..self.config.lnt_heads)
                .map(|h| {
                    let w = |m: &str| b.get(&format!("lnt{i}.h{h}.{m}"));
                    crate::tensor::attention(&e, &e, &w("wq")?, &w("wk")?, &w("wv")?, None).map_err(ModelError::from)
                })
                .collect::<Result<Vec<_>>>()?;
            let mha = Var::concat_cols(&heads)?.matmul(&b.get(&format!("lnt{i}.wo"))?)?;
            let ln = |x: Var<'t, T>, n: &str| -> Result<Var<'t, T>> {
                Ok(x.layer_norm(&b.get(&format!("lnt{i}.{n}.g"))?, &b.get(&format!("lnt{i}.{n}.b"))?, eps)?)
            };
            let h1 = ln(e.add(&mha)?, "ln1")?;
            let ff = h1
                .matmul(&b.get(&format!("lnt{i}.ff1.w"))?)?
                .add_row_bias(&b.get(&format!("lnt{i}.ff1.b"))?)?
                .relu()
                .matmul(&b.get(&format!("lnt{i}.ff2.w"))?)?
                .add_row_bias(&b.get(&format!("lnt{i}.ff2.b"))?)?;
            e = ln(h1.add(&ff)?, "ln2")?;
        }
        let (pool, presence) = pool_matrix(points, self.config.pool_grid);
        Ok((tape.constant(pool).matmul(&e)?, presence))
    }

    /// `X + softmax(X Wq (T Wk)ᵀ / √d + mask) (T Wv + bv)`; empty bins masked.
    pub fn fuse<'t>(
        &self,
        b: &Bound<'t, '_, T>,
        x: Var<'t, T>,
        tokens: Var<'t, T>,
        presence: &[bool],
    ) -> Result<Var<'t, T>> {
        let q = x.matmul(&b.get("fuse.wq")?)?;
        let k = tokens.matmul(&b.get("fuse.wk")?)?;
        let v = tokens.matmul(&b.get("fuse.wv")?)?.add_row_bias(&b.get("fuse.bv")?)?;
        let d = q.shape()[1];
        let mut logits = q.matmul_t(&k, false, true)?.scale(T::one() / T::lit(d as f64).sqrt());
        if presence.iter().any(|p| !p) {
            let nq = logits.shape()[0];
            let row: Vec<T> = presence.iter().map(|&p| if p { T::zero() } else { T::lit(MASK_LOGIT) }).collect();
            let mask = Tensor::from_fn(&[nq, presence.len()], |i| row[i % presence.len()]);
            logits = logits.add(&b.tape().constant(mask))?;
        }
        Ok(x.add(&logits.softmax(1)?.matmul(&v)?)?)
    }

    /// Additive gate on skip `x` driven by the coarser map `g`.
    pub fn attention_gate<'t>(
        &self,
        b: &Bound<'t, '_, T>,
        level: usize,
        x: Var<'t, T>,
        g: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = |n: &str| b.get(&format!("gate{level}.{n}"));
        let theta = x.conv2d(&w("wx")?, None, 1, 0)?;
        let phi = g.conv2d(&w("wg")?, None, 1, 0)?.upsample2x()?;
        let alpha = theta.add(&phi)?.relu().conv2d(&w("psi.w")?, Some(&w("psi.b")?), 1, 0)?.sigmoid();
        Ok(x.mul(&alpha.repeat_channels(x.shape()[1])?)?)
    }

    /// Four ×2 upsamplings, each merged with its (gated) skip.
    pub fn decode<'t>(&self, b: &Bound<'t, '_, T>, bottleneck: Var<'t, T>, skips: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let mut d = bottleneck;
        for l in (0..self.config.encoder_stages).rev() {
            let up = d.conv_transpose2d(&b.get(&format!("dec{l}.up.w"))?, Some(&b.get(&format!("dec{l}.up.b"))?))?;
            let skip = if self.config.ablation.gates() { self.attention_gate(b, l, skips[l], d)? } else { skips[l] };
            d = Self::conv_relu(b, up.concat_channels(&skip)?, &format!("dec{l}.conv"))?;
        }
        Ok(d)
    }
}

/// `[G², N]` averaging matrix over `(x1, y1)` bins, and which bins are occupied.
pub fn pool_matrix<T: Real>(points: &Tensor<T>, grid: usize) -> (Tensor<T>, Vec<bool>) {
    let n = points.shape()[0];
    let bin = |v: T| ((v.as_f64().clamp(0.0, 1.0) * grid as f64) as usize).min(grid - 1);
    let bins: Vec<usize> = (0..n)
        .map(|i| {
            let r = &points.data()[i * FEATURES..];
            bin(r[1]) * grid + bin(r[0])
        })
        .collect();
    let mut count = vec![0usize; grid * grid];
    bins.iter().for_each(|&k| count[k] += 1);
    let mut m = Tensor::zeros(&[grid * grid, n]);
    for (i, &k) in bins.iter().enumerate() {
        m.data_mut()[k * n + i] = T::one() / T::lit(count[k] as f64);
    }
    (m, count.into_iter().map(|c| c > 0).collect())
}

/// Per-tensor gradient norms keyed by name; handy for diagnostics.
pub fn grad_norms<T: Real>(store: &ParamStore<T>, grads: &[Tensor<T>]) -> HashMap<String, f64> {
    store
        .names()
        .iter()
        .zip(grads)
        .map(|(n, g)| (n.clone(), g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()))
        .collect()
}

/// Miniature configuration for end-to-end gradient checks.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        lnt_embed_dim: 4,
        lnt_heads: 2,
        lnt_layers: 1,
        pool_grid: 2,
        out_side: 32,
        ..ModelConfig::default()
    }
}

/// Outcome of [`end_to_end_grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes discarded because `x ± h` crossed a ReLU or max-pool switch.
    pub straddling: usize,
}

/// Central-difference check of the whole network in 64-bit on the miniature
/// config. The loss is a fixed random functional of both heads; up to
/// `per_tensor` coordinates of every parameter tensor are probed. A probe
/// whose perturbed evaluations change any ReLU sign or max-pool selection is
/// not differentiable over `[x - h, x + h]`; it is counted and replaced.
pub fn end_to_end_grad_check(seed: u64, per_tensor: usize, h: f64) -> Result<GradCheckReport> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    let cfg = miniature_config();
    let mut model = LmmModel::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // nonzero biases so every branch carries gradient
    for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
        if name.ends_with(".b") || name.ends_with("bv") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let s = cfg.out_side;
    let input = ModelInput {
        stack: Tensor::from_fn(&[1, cfg.in_channels, s, s], |_| rng.random_range(-1.0..1.0)),
        points: Tensor::from_fn(&[12, FEATURES], |_| rng.random_range(0.0..1.0)),
    };
    let w_ir = Tensor::from_fn(&[1, 1, s, s], |_| rng.random_range(-1.0..1.0));
    let w_rec = Tensor::from_fn(&[1, cfg.in_channels, s, s], |_| rng.random_range(-1.0..1.0));
    let eval = |m: &LmmModel<f64>, trainable: bool| -> Result<(f64, u64, Option<Vec<Tensor<f64>>>)> {
        let tape = Tape::new();
        let b = m.bind(&tape, trainable);
        let ir = m.run(&b, &input, Head::IrMap)?.mul(&tape.constant(w_ir.clone()))?.sum();
        let rec = m.run(&b, &input, Head::Reconstruct)?.mul(&tape.constant(w_rec.clone()))?.sum();
        let l = ir.add(&rec)?;
        let sig = tape.kink_signature();
        let grads = trainable.then(|| b.gradients(&tape.backward(l)));
        Ok((l.value().item(), sig, grads))
    };
    let (_, base_sig, grads) = eval(&model, true)?;
    let analytic = grads.expect("trainable");
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, straddling: 0 };
    for i in 0..analytic.len() {
        let mut coords: Vec<usize> = (0..analytic[i].len()).collect();
        coords.shuffle(&mut rng);
        let mut taken = 0;
        for k in coords {
            if taken == per_tensor {
                break;
            }
            let x0 = model.params.tensors()[i].data()[k];
            model.params.tensors_mut()[i].data_mut()[k] = x0 + h;
            let (up, sig_up, _) = eval(&model, false)?;
            model.params.tensors_mut()[i].data_mut()[k] = x0 - h;
            let (down, sig_down, _) = eval(&model, false)?;
            model.params.tensors_mut()[i].data_mut()[k] = x0;
            if sig_up != base_sig || sig_down != base_sig {
                report.straddling += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let e = crate::tensor::relative_error(analytic[i].data()[k], numeric);
            report.max_rel_error = report.max_rel_error.max(e);
            report.checked += 1;
            taken += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        miniature_config()
    }

    fn input(cfg: &ModelConfig, n: usize) -> ModelInput<f64> {
        let s = cfg.out_side;
        ModelInput {
            stack: Tensor::from_fn(&[1, cfg.in_channels, s, s], |i| ((i * 7919) % 97) as f64 / 97.0),
            points: Tensor::from_fn(&[n, FEATURES], |i| ((i * 31) % 17) as f64 / 17.0),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { encoder_stages: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { lnt_embed_dim: 5, ..tiny() }.validate().is_err());
        assert!(ModelConfig { out_side: 40, ..tiny() }.validate().is_err());
    }

    #[test]
    fn shapes_and_zero_model() {
        let cfg = tiny();
        let m = LmmModel::<f64>::new(cfg, 1).unwrap();
        let x = input(&cfg, 5);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 32, 32]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
        assert_eq!(m.reconstruct(&x).unwrap().shape(), [1, 6, 32, 32]);
        let z = LmmModel::<f64>::zeros(cfg).unwrap();
        assert!(z.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_sides_halve() {
        let cfg = ModelConfig { base_channels: 1, lnt_embed_dim: 4, lnt_heads: 1, ..ModelConfig::default() };
        let m = LmmModel::<f32>::new(cfg, 0).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 6, 512, 512]));
        let (skips, bott) = m.circuit_encode(&b, x).unwrap();
        let sides: Vec<usize> = skips.iter().map(|s| s.shape()[2]).collect();
        assert_eq!(sides, [512, 256, 128, 64]);
        assert_eq!(bott.shape(), [1, 8, 32, 32]);
    }

    #[test]
    fn labels() {
        let mut a = Ablation::default();
        assert_eq!(a.label(), "United");
        a.set("disable_lnt", true);
        assert_eq!(a.label(), "W-LNT");
        let a = Ablation { encoder_decoder_only: true, ..Default::default() };
        assert_eq!(a.label(), "EC");
        let a = Ablation { disable_lnt: true, disable_attention_gates: true, disable_augmentation: true, ..a };
        assert_eq!(a.label(), "EC");
        assert!(!Ablation::default().set("bogus", true));
    }

    #[test]
    fn pool_single_point() {
        let p = Tensor::<f64>::from_fn(&[1, FEATURES], |i| if i < 2 { 0.9 } else { 0.0 });
        let (m, present) = pool_matrix(&p, 2);
        assert_eq!(present, [false, false, false, true]);
        assert_eq!(m.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn end_to_end_gradients() {
        for seed in [4, 11] {
            let r = end_to_end_grad_check(seed, 4, 1e-5).unwrap();
            assert!(r.checked > 200 && r.straddling < r.checked / 10, "{r:?}");
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let m = LmmModel::<f32>::new(cfg, 3).unwrap();
        let back = LmmModel::<f32>::from_archive(cfg, &m.to_archive()).unwrap();
        assert_eq!(m, back);
        let other = ModelConfig { base_channels: 3, ..cfg };
        assert!(LmmModel::<f32>::from_archive(other, &m.to_archive()).is_err());
    }
}
