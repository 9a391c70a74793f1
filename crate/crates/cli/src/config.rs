//! `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lmmir::raster::GridSpec;
use lmmir::solver::{Method, SolveOptions};
use lmmir::synth::GenSpec;
use lmmir::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
    pub cell_pitch_nm: i64,
    pub train: TrainConfig,
    pub solve: SolveOptions,
    pub gen: GenSpec,
    pub gen_cases: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: "data".into(),
            checkpoint: "model.ckpt".into(),
            report_dir: "reports".into(),
            cell_pitch_nm: GridSpec::DEFAULT_PITCH,
            train: TrainConfig::default(),
            solve: SolveOptions::default(),
            gen: GenSpec::default(),
            gen_cases: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e| format!("{key}: cannot parse `{v}`: {e}"))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Auto => "auto",
        Method::Direct => "direct",
        Method::Cg => "cg",
    }
}

fn schedule_name(s: LrSchedule) -> &'static str {
    match s {
        LrSchedule::Constant => "constant",
        LrSchedule::Cosine => "cosine",
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &t.model;
        let a = &m.ablation;
        let g = &self.gen;
        vec![
            ("dataset_dir", self.dataset_dir.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("report_dir", self.report_dir.display().to_string()),
            ("cell_pitch_nm", self.cell_pitch_nm.to_string()),
            ("in_channels", m.in_channels.to_string()),
            ("base_channels", m.base_channels.to_string()),
            ("encoder_stages", m.encoder_stages.to_string()),
            ("lnt_embed_dim", m.lnt_embed_dim.to_string()),
            ("lnt_layers", m.lnt_layers.to_string()),
            ("lnt_heads", m.lnt_heads.to_string()),
            ("pool_grid", m.pool_grid.to_string()),
            ("out_side", m.out_side.to_string()),
            ("max_points", m.max_points.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("pretrain_steps", t.pretrain_steps.to_string()),
            ("finetune_steps", t.finetune_steps.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("lr_schedule", schedule_name(t.lr_schedule).to_string()),
            ("beta1", format!("{:?}", t.beta1)),
            ("beta2", format!("{:?}", t.beta2)),
            ("adam_eps", format!("{:?}", t.adam_eps)),
            ("sigma_max", format!("{:?}", t.sigma_max)),
            ("seed", t.seed.to_string()),
            ("disable_attention_gates", a.disable_attention_gates.to_string()),
            ("disable_lnt", a.disable_lnt.to_string()),
            ("disable_augmentation", a.disable_augmentation.to_string()),
            ("encoder_decoder_only", a.encoder_decoder_only.to_string()),
            ("solver_tol", format!("{:?}", self.solve.tol)),
            ("solver_method", method_name(self.solve.method).to_string()),
            ("solver_max_iter", self.solve.max_iter.unwrap_or(0).to_string()),
            ("gen_cases", self.gen_cases.to_string()),
            ("gen_side_um", format!("{:?}", g.side_um)),
            ("gen_layers", g.layers.to_string()),
            ("gen_pitch_um", list(&g.pitch_um)),
            ("gen_sheet_res", list(&g.sheet_res)),
            ("gen_width_um", list(&g.width_um)),
            ("gen_via_res", format!("{:?}", g.via_res)),
            ("gen_current_sources", g.n_current_sources.to_string()),
            ("gen_current_min", format!("{:?}", g.current_range.0)),
            ("gen_current_max", format!("{:?}", g.current_range.1)),
            ("gen_voltage_pads", g.n_voltage_pads.to_string()),
            ("gen_vdd", format!("{:?}", g.vdd)),
            ("gen_sparse_region", g.sparse_region.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.train;
        let m = &mut t.model;
        let g = &mut self.gen;
        match key {
            "dataset_dir" => self.dataset_dir = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "report_dir" => self.report_dir = v.into(),
            "cell_pitch_nm" => {
                self.cell_pitch_nm = parse(key, v)?;
                if self.cell_pitch_nm <= 0 {
                    return Err("cell_pitch_nm must be positive".into());
                }
            }
            "in_channels" => m.in_channels = parse(key, v)?,
            "base_channels" => m.base_channels = parse(key, v)?,
            "encoder_stages" => m.encoder_stages = parse(key, v)?,
            "lnt_embed_dim" => m.lnt_embed_dim = parse(key, v)?,
            "lnt_layers" => m.lnt_layers = parse(key, v)?,
            "lnt_heads" => m.lnt_heads = parse(key, v)?,
            "pool_grid" => m.pool_grid = parse(key, v)?,
            "out_side" => m.out_side = parse(key, v)?,
            "max_points" => m.max_points = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "pretrain_steps" => t.pretrain_steps = parse(key, v)?,
            "finetune_steps" => t.finetune_steps = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_schedule" => {
                t.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(format!("lr_schedule: expected constant|cosine, got `{v}`")),
                }
            }
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "sigma_max" => t.sigma_max = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "disable_attention_gates" | "disable_lnt" | "disable_augmentation" | "encoder_decoder_only" => {
                m.ablation.set(key, parse(key, v)?);
            }
            "solver_tol" => self.solve.tol = parse(key, v)?,
            "solver_method" => {
                self.solve.method = match v {
                    "auto" => Method::Auto,
                    "direct" => Method::Direct,
                    "cg" => Method::Cg,
                    _ => return Err(format!("solver_method: expected auto|direct|cg, got `{v}`")),
                }
            }
            "solver_max_iter" => {
                let n: usize = parse(key, v)?;
                self.solve.max_iter = (n > 0).then_some(n);
            }
            "gen_cases" => self.gen_cases = parse(key, v)?,
            "gen_side_um" => g.side_um = parse(key, v)?,
            "gen_layers" => g.layers = parse(key, v)?,
            "gen_pitch_um" => g.pitch_um = parse_list(key, v)?,
            "gen_sheet_res" => g.sheet_res = parse_list(key, v)?,
            "gen_width_um" => g.width_um = parse_list(key, v)?,
            "gen_via_res" => g.via_res = parse(key, v)?,
            "gen_current_sources" => g.n_current_sources = parse(key, v)?,
            "gen_current_min" => g.current_range.0 = parse(key, v)?,
            "gen_current_max" => g.current_range.1 = parse(key, v)?,
            "gen_voltage_pads" => g.n_voltage_pads = parse(key, v)?,
            "gen_vdd" => g.vdd = parse(key, v)?,
            "gen_sparse_region" => g.sparse_region = parse(key, v)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("{origin}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects key=value, got `{kv}`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("lr = 0.01\nseed=9 # comment\n\ngen_pitch_um = 2, 4\ndisable_lnt = true\n", "t").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.seed, 9);
        assert!(c.train.model.ablation.disable_lnt);
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let mut c = RunConfig::default();
        for (k, v) in RunConfig::default().entries() {
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("batchsize", "2").unwrap_err().contains("unknown"));
        assert!(c.set("lr", "fast").is_err());
        assert!(c.apply_text("lr 0.1", "f").is_err());
        assert!(c.apply_override("seed").is_err());
        assert!(c.set("solver_method", "lu").is_err());
    }
}
