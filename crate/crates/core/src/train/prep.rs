//! Fixed-side model inputs: pad or rescale, normalize, augment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::raster::Grid;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    Identity,
    /// Zero-padded bottom/right.
    Pad,
    /// Bilinearly rescaled.
    Scale,
}

/// What preprocessing did to one map, enough to undo it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadScale {
    pub orig_height: usize,
    pub orig_width: usize,
    pub side: usize,
}

impl PadScale {
    pub fn new(orig_height: usize, orig_width: usize, side: usize) -> Self {
        PadScale { orig_height, orig_width, side }
    }

    pub fn mode(&self) -> Resize {
        let (h, w, s) = (self.orig_height, self.orig_width, self.side);
        if h == s && w == s {
            Resize::Identity
        } else if h.max(w) > s {
            Resize::Scale
        } else {
            Resize::Pad
        }
    }
}

/// Align-corners bilinear resampling.
pub fn resize_bilinear(g: &Grid<f64>, height: usize, width: usize) -> Grid<f64> {
    let (h, w) = g.shape();
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    Grid::from_fn(height, width, |r, c| {
        let (r0, r1, tr) = coord(r, height, h);
        let (c0, c1, tc) = coord(c, width, w);
        let top = lerp(g.get(r0, c0), g.get(r0, c1), tc);
        let bot = lerp(g.get(r1, c0), g.get(r1, c1), tc);
        lerp(top, bot, tr)
    })
}

/// Brings one map to `side x side`.
pub fn fit_map(g: &Grid<f64>, side: usize) -> (Grid<f64>, PadScale) {
    let rec = PadScale::new(g.height(), g.width(), side);
    let out = match rec.mode() {
        Resize::Identity => g.clone(),
        Resize::Scale => resize_bilinear(g, side, side),
        Resize::Pad => Grid::from_fn(side, side, |r, c| {
            if r < g.height() && c < g.width() {
                g.get(r, c)
            } else {
                0.0
            }
        }),
    };
    (out, rec)
}

/// Inverse of [`fit_map`]: crop or rescale back to the original shape.
pub fn postprocess(pred: &Grid<f64>, rec: &PadScale) -> Grid<f64> {
    match rec.mode() {
        Resize::Identity => pred.clone(),
        Resize::Pad => Grid::from_fn(rec.orig_height, rec.orig_width, |r, c| pred.get(r, c)),
        Resize::Scale => resize_bilinear(pred, rec.orig_height, rec.orig_width),
    }
}

/// Per-channel mean and standard deviation over a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics over fitted stacks (each a list of equal-sized channels).
    pub fn compute(stacks: &[Vec<Grid<f64>>]) -> Self {
        let c = stacks.first().map_or(0, |s| s.len());
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for k in 0..c {
            let n: usize = stacks.iter().map(|s| s[k].data().len()).sum();
            let m = stacks.iter().flat_map(|s| s[k].data()).sum::<f64>() / n as f64;
            let var = stacks.iter().flat_map(|s| s[k].data()).map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean[k] = m;
            std[k] = var.sqrt().max(STD_FLOOR);
        }
        ChannelStats { mean, std }
    }

    pub fn normalize(&self, channels: &[Grid<f64>]) -> Vec<Grid<f64>> {
        channels
            .iter()
            .enumerate()
            .map(|(k, g)| g.map(|v| (v - self.mean[k]) / self.std[k]))
            .collect()
    }

    pub fn denormalize(&self, channels: &[Grid<f64>]) -> Vec<Grid<f64>> {
        channels
            .iter()
            .enumerate()
            .map(|(k, g)| g.map(|v| v * self.std[k] + self.mean[k]))
            .collect()
    }
}

/// Fits every channel to `side` and normalizes them.
pub fn preprocess(channels: &[Grid<f64>], side: usize, stats: &ChannelStats) -> (Vec<Grid<f64>>, PadScale) {
    let fitted: Vec<Grid<f64>> = channels.iter().map(|g| fit_map(g, side).0).collect();
    let rec = PadScale::new(channels[0].height(), channels[0].width(), side);
    (stats.normalize(&fitted), rec)
}

/// `[1, C, S, S]` tensor from equal-sized channels.
pub fn stack_tensor<T: Real>(channels: &[Grid<f64>]) -> Tensor<T> {
    let (h, w) = channels[0].shape();
    let data = channels.iter().flat_map(|g| g.data().iter().map(|&v| T::lit(v))).collect();
    Tensor::new(&[1, channels.len(), h, w], data).expect("channels share one shape")
}

/// Adds `N(0, σ²)` noise with `σ ~ U(0, sigma_max)` drawn once from `seed`.
/// Returns the drawn σ.
pub fn augment<T: Real>(stack: &mut Tensor<T>, seed: u64, sigma_max: f64) -> f64 {
    if sigma_max <= 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.random_range(0.0..sigma_max);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for v in stack.data_mut() {
        *v += T::lit(noise.sample(&mut rng));
    }
    sigma
}
