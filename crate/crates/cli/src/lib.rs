//! Driver for the Eady slice experiments: presets and config files, the
//! `run`, `sweep` and `report` subcommands, and their on-disk artifacts.

pub mod config;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use eady_core::experiment::{self, SweepPoint};
use eady_core::{Event, Experiment, Outcome};
use log::{info, warn};

pub use config::{ExperimentConfig, Overrides, Preset};
use output::{DiagnosticsWriter, Summary};

#[derive(Debug, Parser)]
#[command(name = "eady", version, about = "Eady slice experiments with compatible finite elements")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a preset (control, highres, offcentred, reduced, sweep) or a
    /// config file.
    Run {
        target: String,
        #[command(flatten)]
        flags: Flags,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Rossby-number sweep: one run per β, reporting the imbalance slope.
    Sweep {
        /// Base preset or config file.
        #[arg(long, default_value = "control")]
        base: String,
        #[command(flatten)]
        flags: Flags,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Summarise diagnostics or sweep CSVs.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

/// Per-key overrides; these beat both the preset and a config file.
#[derive(Clone, Debug, Default, Args)]
pub struct Flags {
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub nz: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub days: Option<f64>,
    #[arg(long)]
    pub picard_iters: Option<usize>,
    #[arg(long)]
    pub solver_tol: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Comma-separated days after breeding.
    #[arg(long, value_delimiter = ',')]
    pub snapshot_days: Option<Vec<f64>>,
    #[arg(long)]
    pub cadence: Option<usize>,
}

impl From<Flags> for Overrides {
    fn from(f: Flags) -> Self {
        Overrides {
            nx: f.nx,
            nz: f.nz,
            degree: f.degree,
            dt: f.dt,
            alpha: f.alpha,
            beta: f.beta,
            days: f.days,
            picard_iters: f.picard_iters,
            solver_tol: f.solver_tol,
            output_dir: f.output_dir,
            snapshot_days: f.snapshot_days,
            cadence: f.cadence,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    /// Day after breeding at which η is measured.
    #[arg(long, default_value_t = 2.0)]
    pub day: f64,
    /// Largest β is 2^this.
    #[arg(long, default_value_t = 2, allow_negative_numbers = true)]
    pub beta_max_exp: i32,
    /// Smallest β is 2^this.
    #[arg(long, default_value_t = -6, allow_negative_numbers = true)]
    pub beta_min_exp: i32,
    /// Members run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl Default for SweepArgs {
    fn default() -> Self {
        Self { day: 2.0, beta_max_exp: 2, beta_min_exp: -6, jobs: 1 }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { target, flags, sweep } if target == "sweep" => run_sweep("control", flags.into(), &sweep, "sweep").map(|_| ()),
        Command::Run { target, flags, .. } => {
            let cfg = resolve(&target, flags.into())?;
            run_experiment(&cfg).map(|_| ())
        }
        Command::Sweep { base, flags, sweep } => run_sweep(&base, flags.into(), &sweep, "sweep").map(|_| ()),
        Command::Report { csv } => {
            for path in &csv {
                print!("{}", report(path)?);
            }
            Ok(())
        }
    }
}

/// Preset name or config path, then flags on top.
pub fn resolve(target: &str, flags: Overrides) -> Result<ExperimentConfig> {
    let (name, base, file) = match target.parse::<Preset>() {
        Ok(p) => (p.name().to_string(), p.experiment(), Overrides::default()),
        Err(_) => {
            let path = Path::new(target);
            if !path.exists() {
                anyhow::bail!("{target:?} is neither a preset ({}) nor a config file", preset_names());
            }
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom").to_string();
            (name, Preset::Control.experiment(), Overrides::from_file(path)?)
        }
    };
    ExperimentConfig::resolve(&name, base, &file.merge(flags))
}

fn preset_names() -> String {
    let mut v: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
    v.push("sweep");
    v.join(", ")
}

/// Runs one experiment, writing `diagnostics.csv`, snapshots,
/// `config.toml` and `summary.txt` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.echo()?)?;
    let e = &cfg.experiment;
    let spaces = e.build_spaces()?;
    let mut csv = DiagnosticsWriter::create(&dir.join("diagnostics.csv"))?;
    let mut io_err: Option<anyhow::Error> = None;
    let mut last_day = 0.0;
    let mut next_log = 1.0;
    let result = e.run_with(|ev| {
        if io_err.is_some() {
            return;
        }
        let r: Result<()> = (|| {
            match ev {
                Event::Initialised { balance, .. } => info!("initialised: {}", output::render_balance(balance).trim_end()),
                Event::Bred { steps, days } => info!("bred for {steps} steps ({days:.3} days)"),
                Event::Record(rec) => {
                    csv.write(rec)?;
                    last_day = rec.days();
                    if last_day >= next_log {
                        info!("day {:.2} rmsv {:.4} E {:.6e}", last_day, rec.rmsv, rec.e);
                        next_log = last_day.floor() + 1.0;
                    }
                }
                Event::Snapshot { day, state } => {
                    output::snapshot(&spaces, &state.v, "v", "m s^-1", day).write(&dir.join(output::snapshot_name("v", day)))?;
                    output::snapshot(&spaces, &state.b, "b", "m s^-2", day).write(&dir.join(output::snapshot_name("b", day)))?;
                }
            }
            Ok(())
        })();
        if let Err(err) = r {
            io_err = Some(err);
        }
    });
    csv.finish()?;
    if let Some(err) = io_err {
        return Err(err);
    }
    let steps_done = e.params.steps_for(last_day);
    let outcome = result.with_context(|| format!("run failed after step {steps_done} (day {last_day:.3})"))?;
    if outcome.max_courant > 1.0 {
        warn!("advective Courant number reached {:.3}", outcome.max_courant);
    }
    let mut text = format!("experiment {}\n", cfg.name);
    text.push_str(&output::render_balance(&outcome.balance));
    text.push_str(&format!("breeding {} steps ({:.3} days)\n", outcome.breeding_steps, outcome.breeding_days));
    text.push_str(&format!("max courant {:.4}\n", outcome.max_courant));
    text.push_str(&Summary::of(&outcome.records).render());
    fs::write(dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(outcome)
}

/// The β members of a sweep, from the experiment's own grid and α.
pub fn run_sweep(base: &str, flags: Overrides, args: &SweepArgs, name: &str) -> Result<Vec<SweepPoint>> {
    let mut cfg = resolve(base, flags)?;
    if cfg.output_dir == Path::new("output").join(&cfg.name) {
        cfg.output_dir = Path::new("output").join(name);
    }
    anyhow::ensure!(args.beta_min_exp <= args.beta_max_exp, "beta range is empty");
    anyhow::ensure!(args.day > 0.0, "sweep day must be positive");
    let betas = experiment::sweep_betas(args.beta_max_exp, args.beta_min_exp);
    let base: Experiment = cfg.experiment.clone();
    info!("sweep over {} betas at day {}", betas.len(), args.day);
    let points = experiment::sweep(&base, &betas, args.day, args.jobs)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.echo()?)?;
    output::write_sweep(&cfg.output_dir.join("sweep.csv"), &points)?;
    let text = output::render_sweep(&points);
    fs::write(cfg.output_dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(points)
}

/// Summary text for one CSV of either kind.
pub fn report(path: &Path) -> Result<String> {
    let body = match output::csv_kind(path)? {
        output::CsvKind::Diagnostics => Summary::of(&output::read_diagnostics(path)?).render(),
        output::CsvKind::Sweep => output::render_sweep(&output::read_sweep(path)?),
    };
    Ok(format!("== {}\n{body}", path.display()))
}
