//! Experiment configuration: presets, flat key-value files and flag
//! overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use eady_core::stepper::dt_for_beta;
use eady_core::Experiment;
use serde::{Deserialize, Serialize};

/// Keys accepted in a config file and on the command line. Every key is
/// optional; missing ones fall back to the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub nx: Option<usize>,
    pub nz: Option<usize>,
    pub degree: Option<usize>,
    pub dt: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub days: Option<f64>,
    pub picard_iters: Option<usize>,
    pub solver_tol: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub snapshot_days: Option<Vec<f64>>,
    pub cadence: Option<usize>,
}

impl Overrides {
    /// Parses `key = value` lines (TOML syntax, flat keys only).
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("bad config")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Keys set in `top` replace those in `self`.
    pub fn merge(self, top: Overrides) -> Overrides {
        Overrides {
            nx: top.nx.or(self.nx),
            nz: top.nz.or(self.nz),
            degree: top.degree.or(self.degree),
            dt: top.dt.or(self.dt),
            alpha: top.alpha.or(self.alpha),
            beta: top.beta.or(self.beta),
            days: top.days.or(self.days),
            picard_iters: top.picard_iters.or(self.picard_iters),
            solver_tol: top.solver_tol.or(self.solver_tol),
            output_dir: top.output_dir.or(self.output_dir),
            snapshot_days: top.snapshot_days.or(self.snapshot_days),
            cadence: top.cadence.or(self.cadence),
        }
    }
}

/// Named starting points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 60 × 30 cells, k = 2, Δt = 50 s, α = 0.5, 25 days.
    Control,
    /// 120 × 60 cells, Δt = 25 s.
    Highres,
    /// Control with α = 0.55.
    Offcentred,
    /// 30 × 15 cells, 12 days.
    Reduced,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Control, Preset::Highres, Preset::Offcentred, Preset::Reduced];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Control => "control",
            Preset::Highres => "highres",
            Preset::Offcentred => "offcentred",
            Preset::Reduced => "reduced",
        }
    }

    pub fn experiment(self) -> Experiment {
        let mut e = Experiment { snapshot_days: vec![2.0, 4.0, 7.0, 11.0], ..Experiment::default() };
        match self {
            Preset::Control => {}
            Preset::Highres => {
                e.params.nx = 120;
                e.params.nz = 60;
                e.params.dt = 25.0;
            }
            Preset::Offcentred => e.params.alpha = 0.55,
            Preset::Reduced => {
                e.params.nx = 30;
                e.params.nz = 15;
                e.params.days = 12.0;
            }
        }
        e
    }
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).with_context(|| format!("unknown preset {s:?}"))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: Experiment,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Applies `ov` on top of `base`. When β is given without Δt, Δt comes
    /// from the sweep schedule.
    pub fn resolve(name: &str, base: Experiment, ov: &Overrides) -> Result<Self> {
        let mut e = base;
        let p = &mut e.params;
        p.nx = ov.nx.unwrap_or(p.nx);
        p.nz = ov.nz.unwrap_or(p.nz);
        p.degree = ov.degree.unwrap_or(p.degree);
        p.alpha = ov.alpha.unwrap_or(p.alpha);
        p.beta = ov.beta.unwrap_or(p.beta);
        p.dt = match (ov.dt, ov.beta) {
            (Some(dt), _) => dt,
            (None, Some(beta)) => dt_for_beta(beta),
            (None, None) => p.dt,
        };
        p.days = ov.days.unwrap_or(p.days);
        p.picard_iters = ov.picard_iters.unwrap_or(p.picard_iters);
        p.solver_tol = ov.solver_tol.unwrap_or(p.solver_tol);
        p.cadence = ov.cadence.unwrap_or(p.cadence);
        if let Some(s) = &ov.snapshot_days {
            e.snapshot_days = s.clone();
        }
        // Snapshots past the end of a shortened run are dropped, except that
        // an explicit list must fit.
        if ov.snapshot_days.is_none() {
            let days = e.params.days;
            e.snapshot_days.retain(|&d| d <= days);
            if days == 0.0 {
                e.snapshot_days = vec![0.0];
            }
        }
        e.params.validate()?;
        for &d in &e.snapshot_days {
            if !(0.0..=e.params.days).contains(&d) {
                bail!("snapshot day {d} outside the run length 0..={}", e.params.days);
            }
        }
        let output_dir = ov.output_dir.clone().unwrap_or_else(|| PathBuf::from("output").join(name));
        Ok(Self { name: name.to_string(), experiment: e, output_dir })
    }

    /// The resolved configuration in the config-file format.
    pub fn to_overrides(&self) -> Overrides {
        let p = &self.experiment.params;
        Overrides {
            nx: Some(p.nx),
            nz: Some(p.nz),
            degree: Some(p.degree),
            dt: Some(p.dt),
            alpha: Some(p.alpha),
            beta: Some(p.beta),
            days: Some(p.days),
            picard_iters: Some(p.picard_iters),
            solver_tol: Some(p.solver_tol),
            output_dir: Some(self.output_dir.clone()),
            snapshot_days: Some(self.experiment.snapshot_days.clone()),
            cadence: Some(p.cadence),
        }
    }

    pub fn echo(&self) -> Result<String> {
        Ok(format!("# experiment: {}\n{}", self.name, toml::to_string(&self.to_overrides())?))
    }
}
