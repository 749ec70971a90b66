//! Command implementations behind the `sfd` binary.
//!
//! Precedence for the seed and output root: command-line flag, then the
//! `SFD_SEED` / `SFD_OUTPUT_ROOT` environment variables, then the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sfd_core::gmm::{ClassRoles, GmmSpec};
use sfd_core::models::CondMlp;
use sfd_core::schedule::{Schedule, ScheduleConfig};
use sfd_core::trainer::Mode;
use sfd_lab::config::RunConfig;
use sfd_lab::pretrain::{pretrain_dsm, probe_error, ProbeError};
use sfd_lab::run::{self, MetricsRecord, Summary, CONFIG_FILE};
use sfd_lab::verify::{gradient_suite, inner_product_suite, verify_tweedie, GradCheck, IdentityCheck, GRAD_TOLERANCE};
use sfd_lab::{plots, LabError, Result};

pub const SEED_ENV: &str = "SFD_SEED";
pub const OUTPUT_ROOT_ENV: &str = "SFD_OUTPUT_ROOT";

/// Tweedie deviation bound for `verify`.
pub const TWEEDIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "sfd", version, about = "Score forgetting distillation on 2D mixture teachers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mixture score identities and finite-difference gradient checks.
    Verify(VerifyArgs),
    /// Train an MLP teacher by denoising score matching on mixture samples.
    Pretrain(PretrainArgs),
    /// Train a generator and write a run directory.
    Run(RunArgs),
    /// Re-evaluate a run checkpoint with the full metric set.
    Eval(EvalArgs),
    /// Write step-indexed CSVs from one run, or a comparison of two.
    ExportPlots(ExportArgs),
    /// Print the default configuration file.
    DefaultConfig,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub json: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random teacher/generator pairs for the inner-product identity.
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    /// Monte-Carlo samples per pair and timestep.
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
}

impl Overrides {
    pub fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(root) = &self.output_root {
            config.io.output_root = root.clone();
        }
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Destination file; defaults to `teacher.checkpoint`, else `<output_root>/teacher.ckpt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub run_name: Option<String>,
    /// Continue from a checkpoint inside the run directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the `config.toml` of the run directory holding the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub run_dir: PathBuf,
    /// Second run for the comparison CSV.
    pub other: Option<PathBuf>,
    /// Defaults to `<run_dir>/plots`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct IdentityRow {
    pub pair: usize,
    #[serde(flatten)]
    pub result: IdentityCheck,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct GradRow {
    #[serde(flatten)]
    pub check: GradCheck,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub samples: usize,
    pub inner_product: Vec<IdentityRow>,
    pub tweedie_max_deviation: f64,
    pub tweedie_pass: bool,
    pub gradients: Vec<GradRow>,
    pub pass: bool,
}

pub fn verify(args: &VerifyArgs) -> Result<VerifyReport> {
    let schedule = Schedule::new(ScheduleConfig::default())?;
    let inner_product: Vec<IdentityRow> = inner_product_suite(&schedule, args.pairs, args.samples, args.seed)?
        .into_iter()
        .enumerate()
        .map(|(i, result)| IdentityRow {
            pair: i / 3,
            pass: result.passes(),
            result,
        })
        .collect();
    let dev = verify_tweedie(&GmmSpec::default_benchmark(), &schedule, args.probes, 6.0, args.seed);
    let gradients: Vec<GradRow> = gradient_suite(args.seed)?
        .into_iter()
        .map(|check| GradRow {
            pass: check.rel_err < GRAD_TOLERANCE,
            check,
        })
        .collect();
    let tweedie_pass = dev < TWEEDIE_TOLERANCE;
    let pass = tweedie_pass && inner_product.iter().all(|r| r.pass) && gradients.iter().all(|g| g.pass);
    Ok(VerifyReport {
        seed: args.seed,
        samples: args.samples,
        inner_product,
        tweedie_max_deviation: dev,
        tweedie_pass,
        gradients,
        pass,
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn render_table(report: &VerifyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<50} {:>6} {:>14} {:>14} {:>12}  result", "check", "t", "lhs", "rhs", "3*se");
    for r in &report.inner_product {
        let _ = writeln!(
            s,
            "{:<50} {:>6} {:>14.6e} {:>14.6e} {:>12.3e}  {}",
            format!("inner-product identity, pair {}", r.pair),
            r.result.t,
            r.result.lhs,
            r.result.rhs,
            3.0 * r.result.se_diff,
            verdict(r.pass)
        );
    }
    let _ = writeln!(
        s,
        "{:<50} {:>6} {:>14.3e} {:>14} {:>12.0e}  {}",
        "tweedie max deviation",
        "",
        report.tweedie_max_deviation,
        "",
        TWEEDIE_TOLERANCE,
        verdict(report.tweedie_pass)
    );
    for g in &report.gradients {
        let _ = writeln!(
            s,
            "{:<50} {:>6} {:>14.3e} {:>14} {:>12.0e}  {}",
            format!("grad: {}", g.check.name),
            "",
            g.check.rel_err,
            format!("{} params", g.check.params),
            GRAD_TOLERANCE,
            verdict(g.pass)
        );
    }
    let _ = writeln!(s, "overall: {}", verdict(report.pass));
    s
}

#[derive(Debug, Serialize)]
pub struct PretrainReport {
    pub path: PathBuf,
    pub final_loss: f64,
    pub probe: ProbeError,
}

pub fn pretrain(args: &PretrainArgs) -> Result<PretrainReport> {
    let config = args.overrides.load()?;
    config.validate()?;
    let mut cfg = config.teacher.pretrain.clone();
    if let Some(seed) = args.overrides.seed {
        cfg.seed = seed;
    }
    let schedule = Schedule::new(config.schedule)?;
    let model = config.sfd_config().model;
    let spec = &config.teacher.spec;
    let file = pretrain_dsm(spec, &schedule, &model, &cfg)?;
    let net = CondMlp::new(model, spec.num_classes())?;
    let probe = probe_error(spec, &schedule, &net, &file.params, 100, cfg.seed.wrapping_add(1))?;
    let path = args
        .out
        .clone()
        .or_else(|| config.teacher.checkpoint.clone())
        .unwrap_or_else(|| config.io.output_root.join("teacher.ckpt"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(sfd_lab::error::io_at(parent))?;
    }
    file.save(&path)?;
    Ok(PretrainReport {
        path,
        final_loss: file.final_loss,
        probe,
    })
}

pub fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = args.overrides.load()?;
    if let Some(mode) = args.mode {
        config.train.mode = mode;
    }
    if let Some(name) = &args.run_name {
        config.io.run_name = Some(name.clone());
    }
    Ok(config)
}

pub fn run(args: &RunArgs) -> Result<(PathBuf, Summary)> {
    let config = run_config(args)?;
    let dir = config.io.output_root.join(config.run_name());
    let summary = run::execute(&config, &dir, args.resume.as_deref())?;
    Ok((dir, summary))
}

fn run_dir_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(LabError::Missing(path));
    }
    RunConfig::load(&path)
}

pub fn eval(args: &EvalArgs) -> Result<MetricsRecord> {
    let config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        // <run>/checkpoints/step-N.ckpt
        None => {
            let run_dir = args.checkpoint.parent().and_then(Path::parent).unwrap_or(Path::new("."));
            run_dir_config(run_dir)?
        }
    };
    run::evaluate_checkpoint(&config, &args.checkpoint)
}

pub fn export_plots(args: &ExportArgs) -> Result<Vec<PathBuf>> {
    let config = run_dir_config(&args.run_dir)?;
    let roles = ClassRoles::new(config.teacher.spec.num_classes(), config.loss.forgetting)?;
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("plots"));
    plots::export(&args.run_dir, args.other.as_deref(), &out, roles.num_classes(), roles.remaining())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

/// Runs one command; the returned flag is false when `verify` found a failure.
pub fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Verify(args) => {
            let report = verify(args)?;
            if args.json {
                println!("{}", json(&report));
            } else {
                print!("{}", render_table(&report));
            }
            Ok(report.pass)
        }
        Command::Pretrain(args) => {
            println!("{}", json(&pretrain(args)?));
            Ok(true)
        }
        Command::Run(args) => {
            let (dir, summary) = run(args)?;
            eprintln!("run directory: {}", dir.display());
            println!("{}", json(&summary));
            Ok(true)
        }
        Command::Eval(args) => {
            println!("{}", json(&eval(args)?));
            Ok(true)
        }
        Command::ExportPlots(args) => {
            for p in export_plots(args)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(true)
        }
    }
}
