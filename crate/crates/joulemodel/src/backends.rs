//! Measurement backends that need the operating system.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::str::FromStr;

use joulemodel_core::measurement::RunReading;
use joulemodel_core::{integrate_trace, EnergyBackend, Error, ModelSpec, PowerTrace, SimDevice};

use crate::io;

/// Where measurements come from: `sim:<config>`, `trace:<dir>` or `cmd:<command line>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Sim(PathBuf),
    Trace(PathBuf),
    Cmd(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("backend `{s}` must be sim:<path>, trace:<dir> or cmd:<command>"))?;
        if rest.trim().is_empty() {
            return Err(format!("backend `{s}` has an empty argument"));
        }
        match kind {
            "sim" => Ok(BackendSpec::Sim(rest.into())),
            "trace" => Ok(BackendSpec::Trace(rest.into())),
            "cmd" => Ok(BackendSpec::Cmd(rest.into())),
            _ => Err(format!("unknown backend kind `{kind}`")),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Sim(p) => write!(f, "sim:{}", p.display()),
            BackendSpec::Trace(p) => write!(f, "trace:{}", p.display()),
            BackendSpec::Cmd(c) => write!(f, "cmd:{c}"),
        }
    }
}

/// Runs a shell command per variant. The variant document is written to
/// stdin; the command prints `joules=<f> seconds=<f>` for the whole run.
#[derive(Debug, Clone)]
pub struct ExternalCommand {
    pub command: String,
}

/// Parses `joules=<f> seconds=<f>` (either order) from the first non-empty line.
pub fn parse_response(text: &str) -> Result<(f64, f64), Error> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| Error::Backend("empty response".into()))?;
    let (mut joules, mut seconds) = (None, None);
    for field in line.split_whitespace() {
        let (name, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Backend(format!("unparseable field `{field}`")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Backend(format!("unparseable number `{value}`")))?;
        match name {
            "joules" => joules = Some(v),
            "seconds" => seconds = Some(v),
            _ => return Err(Error::Backend(format!("unknown field `{name}`"))),
        }
    }
    match (joules, seconds) {
        (Some(j), Some(s)) if j.is_finite() && s.is_finite() && j >= 0.0 && s >= 0.0 => Ok((j, s)),
        (Some(_), Some(_)) => Err(Error::Backend(format!("negative or non-finite reading `{line}`"))),
        _ => Err(Error::Backend(format!("response `{line}` needs joules= and seconds="))),
    }
}

impl EnergyBackend for ExternalCommand {
    fn run(&mut self, variant: &ModelSpec, iterations: u64) -> joulemodel_core::Result<RunReading> {
        let mut doc = variant.to_document();
        doc.iterations = iterations;
        let body = serde_json::to_vec(&doc).map_err(|e| Error::Backend(e.to_string()))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("spawning `{}`: {e}", self.command)))?;
        if let Some(mut stdin) = child.stdin.take() {
            // a command that ignores its input may close the pipe early
            let _ = stdin.write_all(&body);
        }
        let out = child
            .wait_with_output()
            .map_err(|e| Error::Backend(format!("waiting for `{}`: {e}", self.command)))?;
        if !out.status.success() {
            return Err(Error::Backend(format!("`{}` exited with {}", self.command, out.status)));
        }
        let (joules, seconds) = parse_response(&String::from_utf8_lossy(&out.stdout))?;
        let n = iterations as f64;
        Ok(RunReading {
            joules_per_iter: joules / n,
            seconds_per_iter: seconds / n,
        })
    }
}

/// Replays recorded power traces, one `<variant name>.csv` per variant.
#[derive(Debug, Clone)]
pub struct TraceReplay {
    pub dir: PathBuf,
    pub standby_power: f64,
    /// Iterations each recorded trace covers.
    pub iterations: u64,
}

impl TraceReplay {
    pub fn trace_path(&self, variant: &ModelSpec) -> PathBuf {
        self.dir.join(format!("{}.csv", io::file_stem(&variant.name)))
    }
}

impl EnergyBackend for TraceReplay {
    fn run(&mut self, variant: &ModelSpec, _iterations: u64) -> joulemodel_core::Result<RunReading> {
        let path = self.trace_path(variant);
        let samples = io::read_trace_csv(&path).map_err(|e| Error::Backend(format!("{e:#}")))?;
        let trace = PowerTrace {
            samples,
            standby_power: self.standby_power,
            iterations: self.iterations,
        };
        let joules_per_iter = integrate_trace(&trace)?;
        Ok(RunReading {
            joules_per_iter,
            seconds_per_iter: trace.duration() / self.iterations as f64,
        })
    }
}

/// Trace sidecar metadata needed by the `trace:` backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceMeta {
    pub standby_power: f64,
    pub iterations: u64,
}

/// Builds the backend named by `spec`. `seed`, when given, replaces the
/// simulator's configured seed.
pub fn open(spec: &BackendSpec, seed: Option<u64>, trace: Option<TraceMeta>) -> anyhow::Result<Box<dyn EnergyBackend>> {
    Ok(match spec {
        BackendSpec::Sim(path) => {
            let mut cfg = io::read_sim_config(path)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Box::new(SimDevice::new(cfg)?)
        }
        BackendSpec::Trace(dir) => {
            let meta = trace.ok_or_else(|| {
                anyhow::anyhow!("trace backend needs trace_standby_w and trace_iterations in the config")
            })?;
            if !dir.is_dir() {
                anyhow::bail!("trace directory {} not found", dir.display());
            }
            Box::new(TraceReplay {
                dir: dir.clone(),
                standby_power: meta.standby_power,
                iterations: meta.iterations,
            })
        }
        BackendSpec::Cmd(command) => Box::new(ExternalCommand {
            command: command.clone(),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_parse() {
        assert_eq!("sim:a.json".parse(), Ok(BackendSpec::Sim("a.json".into())));
        assert_eq!("trace:/tmp/t".parse(), Ok(BackendSpec::Trace("/tmp/t".into())));
        assert_eq!(
            "cmd:./run --gpu 0".parse(),
            Ok(BackendSpec::Cmd("./run --gpu 0".into()))
        );
        assert!("gpu:0".parse::<BackendSpec>().is_err());
        assert!("sim:".parse::<BackendSpec>().is_err());
        assert!("sim".parse::<BackendSpec>().is_err());
        let s: BackendSpec = "cmd:echo a:b".parse().unwrap();
        assert_eq!(s.to_string(), "cmd:echo a:b");
    }

    #[test]
    fn responses_parse() {
        assert_eq!(parse_response("joules=12.5 seconds=3\n").unwrap(), (12.5, 3.0));
        assert_eq!(parse_response("\n  seconds=1e-3 joules=2\n").unwrap(), (2.0, 1e-3));
        assert!(parse_response("").is_err());
        assert!(parse_response("joules=1").is_err());
        assert!(parse_response("joules=x seconds=1").is_err());
        assert!(parse_response("joules=-1 seconds=1").is_err());
        assert!(parse_response("joules=1 seconds=1 watts=2").is_err());
    }
}
