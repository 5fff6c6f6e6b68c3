//! Run configuration: a TOML file whose keys mirror the command-line flags.
//! Flags win over the file, the file wins over defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use joulemodel_core::profiler::{PlanSettings, Surrogate};
use serde::Deserialize;

use crate::backends::{BackendSpec, TraceMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateArg {
    Energy,
    Time,
}

impl From<SurrogateArg> for Surrogate {
    fn from(s: SurrogateArg) -> Self {
        match s {
            SurrogateArg::Energy => Surrogate::Energy,
            SurrogateArg::Time => Surrogate::Time,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// TOML file providing defaults for any of these options
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// sim:<config.json> | trace:<dir> | cmd:<command line>
    #[arg(long)]
    pub backend: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum profiled points per layer key
    #[arg(long)]
    pub budget: Option<usize>,
    /// Stop profiling a key once the largest posterior std falls below this
    /// fraction of its mean observed cost
    #[arg(long)]
    #[serde(alias = "variance_stop_frac")]
    pub var_stop: Option<f64>,
    #[arg(long, value_enum)]
    pub surrogate: Option<SurrogateArg>,
    /// Channel step of the candidate grid
    #[arg(long)]
    pub grid_stride: Option<u32>,
    /// Backend runs averaged per measurement
    #[arg(long)]
    pub repeats: Option<u32>,
    /// Architectures sampled by `evaluate`
    #[arg(long)]
    pub n: Option<usize>,
    /// Energy budget for `prune`, as a fraction of the original estimate
    #[arg(long)]
    pub target_fraction: Option<f64>,
    /// Independent evaluation rounds
    #[arg(long)]
    pub outer_repeats: Option<u32>,
    /// Standby power of recorded traces (trace backend)
    #[arg(long)]
    pub trace_standby_w: Option<f64>,
    /// Iterations covered by each recorded trace (trace backend)
    #[arg(long)]
    pub trace_iterations: Option<u64>,
}

macro_rules! prefer {
    ($a:expr, $b:expr, $($f:ident),*) => {
        RunOptions { config: $a.config.or($b.config), $($f: $a.$f.or($b.$f)),* }
    };
}

impl RunOptions {
    /// Field-wise `self` else `fallback`.
    pub fn or(self, fallback: RunOptions) -> RunOptions {
        prefer!(
            self, fallback, backend, out, seed, budget, var_stop, surrogate, grid_stride, repeats, n,
            target_fraction, outer_repeats, trace_standby_w, trace_iterations
        )
    }

    pub fn from_file(path: &Path) -> Result<RunOptions> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: Option<BackendSpec>,
    pub out: PathBuf,
    pub seed: u64,
    /// Whether the seed was set explicitly; only then does it replace the
    /// simulator config's own seed.
    pub seed_given: bool,
    pub settings: PlanSettings,
    pub n: usize,
    pub target_fraction: f64,
    pub outer_repeats: u32,
    pub trace: Option<TraceMeta>,
}

pub const DEFAULT_OUT: &str = "joulemodel-out";
pub const DEFAULT_N: usize = 100;
pub const DEFAULT_TARGET_FRACTION: f64 = 0.5;
pub const DEFAULT_OUTER_REPEATS: u32 = 3;

impl RunConfig {
    /// Merges flags over the config file they name, then validates.
    pub fn resolve(flags: RunOptions) -> Result<RunConfig> {
        let merged = match &flags.config {
            Some(path) => {
                let file = RunOptions::from_file(path)?;
                flags.or(file)
            }
            None => flags,
        };
        RunConfig::from_options(merged)
    }

    pub fn from_options(o: RunOptions) -> Result<RunConfig> {
        let defaults = PlanSettings::default();
        let settings = PlanSettings {
            budget: o.budget.unwrap_or(defaults.budget),
            variance_stop_frac: o.var_stop.unwrap_or(defaults.variance_stop_frac),
            surrogate: o.surrogate.map(Into::into).unwrap_or(defaults.surrogate),
            repeats: o.repeats.unwrap_or(defaults.repeats),
            grid_stride: o.grid_stride.unwrap_or(defaults.grid_stride),
            ..defaults
        };
        if settings.budget < 2 {
            bail!("budget must be at least 2, got {}", settings.budget);
        }
        if !(settings.variance_stop_frac > 0.0 && settings.variance_stop_frac < 1.0) {
            bail!("var-stop must lie in (0, 1), got {}", settings.variance_stop_frac);
        }
        if settings.repeats == 0 {
            bail!("repeats must be positive");
        }
        if settings.grid_stride == 0 {
            bail!("grid-stride must be positive");
        }
        let target_fraction = o.target_fraction.unwrap_or(DEFAULT_TARGET_FRACTION);
        if !(target_fraction > 0.0 && target_fraction <= 1.0) {
            bail!("target-fraction must lie in (0, 1], got {target_fraction}");
        }
        let backend = o
            .backend
            .as_deref()
            .map(str::parse::<BackendSpec>)
            .transpose()
            .map_err(anyhow::Error::msg)?;
        let trace = match (o.trace_standby_w, o.trace_iterations) {
            (Some(standby_power), Some(iterations)) => {
                if !(standby_power >= 0.0) || iterations == 0 {
                    bail!("trace metadata needs standby >= 0 and iterations > 0");
                }
                Some(TraceMeta { standby_power, iterations })
            }
            (None, None) => None,
            _ => bail!("trace_standby_w and trace_iterations must be given together"),
        };
        Ok(RunConfig {
            backend,
            out: o.out.unwrap_or_else(|| DEFAULT_OUT.into()),
            seed: o.seed.unwrap_or(0),
            seed_given: o.seed.is_some(),
            settings,
            n: o.n.unwrap_or(DEFAULT_N),
            target_fraction,
            outer_repeats: o.outer_repeats.unwrap_or(DEFAULT_OUTER_REPEATS).max(1),
            trace,
        })
    }

    pub fn require_backend(&self) -> Result<&BackendSpec> {
        self.backend.as_ref().context("a backend is required (--backend or `backend` in the config)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: RunOptions = toml::from_str(
            r#"
            backend = "sim:dev.json"
            budget = 12
            var_stop = 0.1
            surrogate = "time"
            seed = 4
            "#,
        )
        .unwrap();
        let flags = RunOptions {
            budget: Some(20),
            ..RunOptions::default()
        };
        let cfg = RunConfig::from_options(flags.or(file)).unwrap();
        assert_eq!(cfg.settings.budget, 20);
        assert_eq!(cfg.settings.variance_stop_frac, 0.1);
        assert_eq!(cfg.settings.surrogate, Surrogate::Time);
        assert_eq!(cfg.backend, Some(BackendSpec::Sim("dev.json".into())));
        assert_eq!((cfg.seed, cfg.seed_given), (4, true));
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::from_options(RunOptions::default()).unwrap();
        assert_eq!(cfg.settings, PlanSettings::default());
        assert_eq!(cfg.out, PathBuf::from(DEFAULT_OUT));
        assert!(!cfg.seed_given);
        assert!(cfg.backend.is_none() && cfg.require_backend().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for o in [
            RunOptions { budget: Some(1), ..RunOptions::default() },
            RunOptions { var_stop: Some(0.0), ..RunOptions::default() },
            RunOptions { var_stop: Some(1.0), ..RunOptions::default() },
            RunOptions { target_fraction: Some(1.5), ..RunOptions::default() },
            RunOptions { backend: Some("gpu".into()), ..RunOptions::default() },
            RunOptions { trace_standby_w: Some(1.0), ..RunOptions::default() },
        ] {
            assert!(RunConfig::from_options(o.clone()).is_err(), "{o:?}");
        }
        assert!(toml::from_str::<RunOptions>("budgett = 3").is_err());
        assert!(toml::from_str::<RunOptions>("variance_stop_frac = 0.2").unwrap().var_stop == Some(0.2));
    }
}
