//! `lmmir`: synthetic PDN generation, golden solves, features, training and
//! evaluation of the IR-drop predictor.

mod config;

use std::fmt::Display;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use lmmir::cloud::{cap_pointcloud, encode_pointcloud, metadata_csv, write_binary, CloudError};
use lmmir::model::{end_to_end_grad_check, LmmModel, ModelError};
use lmmir::raster::image::write_png;
use lmmir::raster::{featurize, Grid, GridSpec, RasterError, CHANNEL_NAMES};
use lmmir::solver::{node_report_csv, solve_static, SolveError};
use lmmir::spice::{parse_netlist, Diagnostic, PdnNetlist, SpiceError};
use lmmir::synth::{generate_dataset, SynthError};
use lmmir::tensor::op_suite;
use lmmir::train::{
    evaluate, load_cases, loss_history_csv, reports_csv, train, Case, ChannelStats, EvalReport, GoldenPredictor,
    Predictor, TrainError, TrainedModel,
};

/// Relative error above which `gradcheck` fails.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "lmmir", version, about = "Static IR-drop prediction for power delivery networks")]
struct Cli {
    /// `key = value` config file applied over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with golden targets and a manifest.
    Gen(GenArgs),
    /// Solve a netlist and write the per-node report.
    Solve(SolveArgs),
    /// Rasterize the six input channels and the golden target.
    Featurize(FeaturizeArgs),
    /// Encode a netlist as a point cloud.
    EncodeCloud(EncodeArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Predict the IR-drop map of a netlist.
    Predict(PredictArgs),
    /// Evaluate checkpoints on a manifest.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every op and the full model.
    Gradcheck(GradArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory [default: config `dataset_dir` = data].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of cases [default: config `gen_cases` = 4].
    #[arg(long)]
    cases: Option<usize>,
    /// Seed of the first case; case i uses seed + i [default: config `seed` = 0].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// SPICE netlist.
    #[arg(long)]
    netlist: PathBuf,
    /// Node report CSV.
    #[arg(long)]
    out: PathBuf,
    /// auto, direct or cg [default: config `solver_method` = auto].
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    /// SPICE netlist.
    #[arg(long)]
    netlist: PathBuf,
    /// Directory receiving `<stem>_<channel>.csv` and `<stem>_target.csv`.
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write a PNG next to each CSV.
    #[arg(long, default_value_t = false)]
    png: bool,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// SPICE netlist.
    #[arg(long)]
    netlist: PathBuf,
    /// Binary point-cloud file; metadata goes to `<out>.meta.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Subsample to at most this many points [default: no cap].
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest CSV [default: `<dataset_dir>/manifest.csv`].
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to write [default: config `checkpoint` = model.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ablation switch to turn on; repeatable: disable_attention_gates,
    /// disable_lnt, disable_augmentation, encoder_decoder_only.
    #[arg(long)]
    ablation: Vec<String>,
    /// Skip training and write an all-zero model.
    #[arg(long, default_value_t = false)]
    zero_params: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint [default: config `checkpoint` = model.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// SPICE netlist.
    #[arg(long)]
    netlist: PathBuf,
    /// Predicted IR-drop map CSV, volts.
    #[arg(long)]
    out: PathBuf,
    /// Also write the map as PNG.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint; repeatable [default: config `checkpoint` = model.ckpt].
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Manifest CSV [default: `<dataset_dir>/manifest.csv`].
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report CSV [default: `<report_dir>/eval.csv`].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Label of the report the Ratio rows are relative to [default: none].
    #[arg(long)]
    baseline: Option<String>,
    /// Add a `Golden` report that predicts the ground truth.
    #[arg(long, default_value_t = false)]
    golden: bool,
    /// Write 0 for turnaround times so reports are byte-identical across runs.
    #[arg(long, default_value_t = false)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Coordinates probed per parameter tensor of the model check.
    #[arg(long, default_value_t = 4)]
    per_tensor: usize,
    /// Finite-difference step of the model check.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// CSV of `op,max_rel_error` [default: stdout only].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Config,
    Input,
    Numerical,
}

#[derive(Debug)]
struct CliError {
    kind: Kind,
    message: String,
}

impl CliError {
    fn new(kind: Kind, message: impl Display) -> Self {
        CliError { kind, message: message.to_string() }
    }

    fn config(m: impl Display) -> Self {
        Self::new(Kind::Config, m)
    }

    fn input(m: impl Display) -> Self {
        Self::new(Kind::Input, m)
    }

    fn code(&self) -> u8 {
        match self.kind {
            Kind::Config => 2,
            Kind::Input => 3,
            Kind::Numerical => 4,
        }
    }

    fn line(&self) -> String {
        let kind = match self.kind {
            Kind::Config => "config",
            Kind::Input => "input",
            Kind::Numerical => "numerical",
        };
        let msg = self.message.replace(['\n', '\r'], " ");
        format!("error kind={kind} code={} message={msg:?}", self.code())
    }
}

impl From<SpiceError> for CliError {
    fn from(e: SpiceError) -> Self {
        Self::input(e)
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::NoConvergence { .. } | SolveError::NotPositiveDefinite { .. } => {
                Self::new(Kind::Numerical, e)
            }
            _ => Self::input(e),
        }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        Self::input(e)
    }
}

impl From<CloudError> for CliError {
    fn from(e: CloudError) -> Self {
        Self::input(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::config(e),
            _ => Self::input(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) => Self::config(e),
            TrainError::DivergedLoss { .. } => Self::new(Kind::Numerical, e),
            _ => Self::input(e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InfeasibleSpec(_) => Self::config(e),
            SynthError::Solve { source, case } => {
                let inner = CliError::from(source);
                Self::new(inner.kind, format!("case {case}: {}", inner.message))
            }
            _ => Self::input(e),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_netlist(path: &Path) -> Result<PdnNetlist> {
    let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let nl = parse_netlist(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    for d in nl.diagnostics() {
        match d {
            Diagnostic::Unreachable(n) => log::warn!("{}: {} node(s) unreachable", path.display(), n.len()),
            other => log::warn!("{}: {other:?}", path.display()),
        }
    }
    Ok(nl)
}

fn write_png_file(path: &Path, g: &Grid<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_png(g, &mut buf).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    write_file(path, buf)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "case".into(), |s| s.to_string_lossy().into_owned())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Config of a checkpoint, stored next to it by `train`.
fn checkpoint_config(ckpt: &Path) -> Result<RunConfig> {
    let p = sidecar(ckpt, ".cfg");
    if !p.exists() {
        return Err(CliError::input(format!("{}: missing checkpoint config", p.display())));
    }
    RunConfig::from_file(&p).map_err(CliError::config)
}

fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    write_file(&cfg.report_dir.join(format!("{command}.effective.cfg")), cfg.to_text())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p).map_err(CliError::config)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply_override(kv).map_err(CliError::config)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Gen(a) => {
            if let Some(n) = a.cases {
                cfg.gen_cases = n;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            let out = a.out.unwrap_or_else(|| cfg.dataset_dir.clone());
            cfg.dataset_dir = out.clone();
            echo_config(&cfg, "gen")?;
            let cases: Vec<_> = (0..cfg.gen_cases)
                .map(|i| {
                    let spec = lmmir::synth::GenSpec { seed: cfg.train.seed + i as u64, ..cfg.gen.clone() };
                    (format!("case{i:03}"), spec)
                })
                .collect();
            let m = generate_dataset(&cases, &out, cfg.cell_pitch_nm)?;
            println!("cases={} manifest={}", m.rows.len(), out.join("manifest.csv").display());
        }
        Command::Solve(a) => {
            if let Some(m) = &a.method {
                cfg.set("solver_method", m).map_err(CliError::config)?;
            }
            echo_config(&cfg, "solve")?;
            let nl = read_netlist(&a.netlist)?;
            let sol = solve_static(&nl, &cfg.solve)?;
            write_file(&a.out, node_report_csv(&nl, &sol))?;
            println!(
                "nodes={} method={:?} iterations={} residual={:e} max_ir_drop={:?}",
                nl.node_count(),
                sol.method,
                sol.iterations,
                sol.residual_inf_norm,
                sol.max_ir_drop()
            );
        }
        Command::Featurize(a) => {
            echo_config(&cfg, "featurize")?;
            let nl = read_netlist(&a.netlist)?;
            let sol = solve_static(&nl, &cfg.solve)?;
            let spec = GridSpec::covering(&nl, cfg.cell_pitch_nm);
            let stack = featurize(&nl, &sol, &spec)?;
            let s = stem(&a.netlist);
            let names = CHANNEL_NAMES.iter().copied().chain(["target"]);
            for (name, g) in names.zip(stack.channels.iter().chain([&stack.target])) {
                write_file(&a.out_dir.join(format!("{s}_{name}.csv")), g.to_csv())?;
                if a.png {
                    write_png_file(&a.out_dir.join(format!("{s}_{name}.png")), g)?;
                }
            }
            println!("height={} width={} pitch_nm={}", spec.height_cells, spec.width_cells, spec.cell_pitch);
        }
        Command::EncodeCloud(a) => {
            echo_config(&cfg, "encode-cloud")?;
            let nl = read_netlist(&a.netlist)?;
            let mut pc = encode_pointcloud(&nl);
            if let Some(n) = a.cap {
                if n == 0 {
                    return Err(CliError::config("--cap must be at least 1"));
                }
                pc = cap_pointcloud(&pc, n, cfg.train.seed);
            }
            let f = File::create(&a.out).map_err(|e| CliError::input(format!("{}: {e}", a.out.display())))?;
            write_binary(&pc, BufWriter::new(f)).map_err(|e| CliError::input(format!("{}: {e}", a.out.display())))?;
            write_file(&sidecar(&a.out, ".meta.csv"), metadata_csv(&pc))?;
            println!("records={} capped={}", pc.len(), pc.capped);
        }
        Command::Train(a) => {
            for name in &a.ablation {
                if !cfg.train.model.ablation.set(name, true) {
                    return Err(CliError::config(format!("unknown ablation `{name}`")));
                }
            }
            let ckpt = a.checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            cfg.checkpoint = ckpt.clone();
            let manifest = a.manifest.unwrap_or_else(|| cfg.dataset_dir.join("manifest.csv"));
            echo_config(&cfg, "train")?;
            cfg.train.validate()?;
            let label = cfg.train.model.ablation.label();
            let history = if a.zero_params {
                let model = LmmModel::zeros(cfg.train.model)?;
                let stats = ChannelStats::identity(cfg.train.model.in_channels);
                TrainedModel { model, stats, target_scale: 1.0 }.save(&ckpt)?;
                Vec::new()
            } else {
                let cases = load_cases(&manifest, cfg.cell_pitch_nm)?;
                let out = train(&cases, &cfg.train, |r| log::info!("stage {} step {} loss {:e}", r.stage, r.step, r.loss))?;
                out.trained.save(&ckpt)?;
                println!("initial_mse={:e} final_mse={:e}", out.initial_mse, out.final_mse);
                out.history
            };
            write_file(&sidecar(&ckpt, ".cfg"), cfg.to_text())?;
            write_file(&sidecar(&ckpt, ".loss.csv"), loss_history_csv(&history))?;
            println!("label={label} checkpoint={}", ckpt.display());
        }
        Command::Predict(a) => {
            let ckpt = a.checkpoint.unwrap_or_else(|| cfg.checkpoint.clone());
            let ccfg = checkpoint_config(&ckpt)?;
            echo_config(&cfg, "predict")?;
            let trained = TrainedModel::load(ccfg.train.model, &ckpt)?;
            let nl = read_netlist(&a.netlist)?;
            let spec = GridSpec::covering(&nl, ccfg.cell_pitch_nm);
            let case = Case::new(&stem(&a.netlist), nl, spec.zeros(), ccfg.cell_pitch_nm, 1)?;
            let map = trained.predict(&case)?;
            write_file(&a.out, map.to_csv())?;
            if let Some(p) = &a.png {
                write_png_file(p, &map)?;
            }
            println!("height={} width={} max={:?}", map.height(), map.width(), map.max());
        }
        Command::Eval(a) => {
            let manifest = a.manifest.unwrap_or_else(|| cfg.dataset_dir.join("manifest.csv"));
            let out = a.out.unwrap_or_else(|| cfg.report_dir.join("eval.csv"));
            let ckpts = if a.checkpoint.is_empty() { vec![cfg.checkpoint.clone()] } else { a.checkpoint };
            echo_config(&cfg, "eval")?;
            let mut reports = Vec::new();
            if a.golden {
                let cases = load_cases(&manifest, cfg.cell_pitch_nm)?;
                reports.push(evaluate(&GoldenPredictor, &cases, "Golden")?);
            }
            for ckpt in &ckpts {
                let ccfg = checkpoint_config(ckpt)?;
                let trained = TrainedModel::load(ccfg.train.model, ckpt)?;
                let cases = load_cases(&manifest, ccfg.cell_pitch_nm)?;
                reports.push(evaluate(&trained, &cases, &ccfg.train.model.ablation.label())?);
            }
            if a.deterministic {
                for r in reports.iter_mut().flat_map(|r: &mut EvalReport| r.rows.iter_mut()) {
                    r.tat_s = 0.0;
                }
            }
            if let Some(b) = &a.baseline {
                if !reports.iter().any(|r| &r.label == b) {
                    return Err(CliError::config(format!("baseline `{b}` matches no report")));
                }
            }
            write_file(&out, reports_csv(&reports, a.baseline.as_deref()))?;
            for r in &reports {
                let s = r.average();
                println!("{} f1={:.4} mae_1e-4={:.4} tat_s={:.6}", r.label, s.f1, s.mae * 1e4, s.tat_s);
            }
        }
        Command::Gradcheck(a) => {
            echo_config(&cfg, "gradcheck")?;
            let seed = cfg.train.seed;
            let mut rows = op_suite(seed).map_err(|e| CliError::new(Kind::Numerical, e))?;
            let e2e = end_to_end_grad_check(seed, a.per_tensor, a.step)?;
            rows.push(("model", e2e.max_rel_error));
            let mut csv = String::from("op,max_rel_error\n");
            for (name, err) in &rows {
                csv.push_str(&format!("{name},{err:e}\n"));
            }
            print!("{csv}");
            println!("# model probes checked={} straddling={}", e2e.checked, e2e.straddling);
            if let Some(p) = &a.out {
                write_file(p, &csv)?;
            }
            if let Some((name, err)) = rows.iter().find(|(_, e)| !(*e < GRAD_TOLERANCE)) {
                return Err(CliError::new(Kind::Numerical, format!("{name}: relative error {err:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}
