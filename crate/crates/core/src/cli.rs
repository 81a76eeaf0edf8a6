//! Command-line front end: config parsing, parameter sweeps, figure
//! reproductions and CSV output.
//!
//! Configuration is line-oriented `key = value` text with optional
//! `[section]` headers; command-line flags override file values. Numeric
//! sweep keys accept a single value, a comma list, or a grid
//! `lin:start:stop:count` / `log:start:stop:count`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

use crate::analytic::{self, AnalyticError, Rate, VarX};
use crate::classical::{self, ClassicalError, ClassicalParams, ClassicalState};
use crate::model::{ConfigError, GaussianState, ProtocolConfig, ProtocolKind};
use crate::moments::{self, MomentError, SystemKind};
use crate::trajectory::{self, TrajectoryConfig, TrajectoryError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Largest relative error accepted by `validate`.
pub const VALIDATE_TOL: f64 = 1e-9;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

/// Where a setting came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag(String),
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag(name) => write!(f, "flag {name}"),
            Origin::Default => write!(f, "default"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{origin}: {message}")]
    Config { origin: Origin, message: String },
    #[error("invalid parameters: {0}")]
    Params(#[from] ConfigError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    fn config(origin: &Origin, message: impl Into<String>) -> Self {
        CliError::Config {
            origin: origin.clone(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Params(_) => EXIT_CONFIG,
            CliError::Analytic(e) => match e {
                AnalyticError::OutOfValidity { .. } => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            },
            CliError::Moments(e) => match e {
                MomentError::Config(_) | MomentError::Mismatch { .. } => EXIT_CONFIG,
                _ => EXIT_NUMERIC,
            },
            CliError::Trajectory(e) => match trajectory_root(e) {
                TrajectoryError::Config(_)
                | TrajectoryError::Stride
                | TrajectoryError::Duration(_)
                | TrajectoryError::BathNotSimulated
                | TrajectoryError::InactiveDetector(_)
                | TrajectoryError::TooFewTrajectories(_) => EXIT_CONFIG,
                _ => EXIT_NUMERIC,
            },
            CliError::Classical(e) => match e {
                ClassicalError::NonPositive { .. } => EXIT_CONFIG,
                _ => EXIT_NUMERIC,
            },
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_CONFIG => "config",
            EXIT_NUMERIC => "numeric",
            EXIT_VALIDATION => "validation",
            _ => "io",
        }
    }

    /// Single diagnostic line: `error code=<n> kind=<kind> message=<text>`.
    pub fn diagnostic(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error code={} kind={} message={msg}", self.exit_code(), self.kind())
    }
}

fn trajectory_root(e: &TrajectoryError) -> &TrajectoryError {
    match e {
        TrajectoryError::Trajectory { source, .. } => trajectory_root(source),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig2a,
    Fig2b,
    Fig2c,
    Fig3a,
    Fig3b,
}

impl Figure {
    pub const ALL: [Figure; 5] = [Figure::Fig2a, Figure::Fig2b, Figure::Fig2c, Figure::Fig3a, Figure::Fig3b];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig2a => "fig2a",
            Figure::Fig2b => "fig2b",
            Figure::Fig2c => "fig2c",
            Figure::Fig3a => "fig3a",
            Figure::Fig3b => "fig3b",
        }
    }

    fn is_sweep(self) -> bool {
        matches!(self, Figure::Fig2a | Figure::Fig2b | Figure::Fig2c)
    }

    fn protocol(self) -> ProtocolKind {
        match self {
            Figure::Fig2a => ProtocolKind::X,
            Figure::Fig2c => ProtocolKind::C,
            _ => ProtocolKind::XP,
        }
    }

    fn defaults(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Figure::Fig2a => &[("lambda", "0.2"), ("gamma_over_lambda", "log:0.5:8:10"), ("b", "1")],
            Figure::Fig2b => &[("lambda", "0.2,0.4"), ("gamma_over_lambda", "log:0.5:8:10"), ("b", "1")],
            Figure::Fig2c => &[("lambda", "0.1"), ("gamma_over_lambda", "log:10:100:10")],
            Figure::Fig3a => &[
                ("lambda", "0.1"),
                ("gamma", "0.2"),
                ("b", "1"),
                ("n_traj", "2000"),
                ("t_final", "50"),
                ("record_stride", "100"),
                ("mean_x", "2"),
                ("var_x", "2"),
                ("var_p", "2"),
            ],
            Figure::Fig3b => &[
                ("lambda", "0.1"),
                ("gamma", "0.5"),
                ("b", "1"),
                ("n_traj", "2000"),
                ("t_final", "50"),
                ("record_stride", "100"),
                ("mean_x", "2"),
                ("var_x", "2"),
                ("var_p", "2"),
            ],
        }
    }
}

impl std::str::FromStr for Figure {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown figure `{s}` (expected fig2a, fig2b, fig2c, fig3a or fig3b)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analytic,
    Moments,
    Ensemble,
    Classical,
    Reproduce(Figure),
    Validate,
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Command::Analytic => "analytic".into(),
            Command::Moments => "moments".into(),
            Command::Ensemble => "ensemble".into(),
            Command::Classical => "classical".into(),
            Command::Reproduce(f) => format!("reproduce {}", f.name()),
            Command::Validate => "validate".into(),
        }
    }

    fn parse(name: &str, target: Option<&str>, origin: &Origin) -> Result<Self, CliError> {
        let cmd = match name.trim() {
            "analytic" => Command::Analytic,
            "moments" => Command::Moments,
            "ensemble" => Command::Ensemble,
            "classical" => Command::Classical,
            "validate" => Command::Validate,
            "reproduce" => {
                let t = target.ok_or_else(|| CliError::config(origin, "`reproduce` needs a figure (fig2a, fig2b, fig2c, fig3a, fig3b)"))?;
                return t.parse().map(Command::Reproduce).map_err(|e| CliError::config(origin, e));
            }
            other => {
                return Err(CliError::config(
                    origin,
                    format!("unknown command `{other}` (expected analytic, moments, ensemble, classical, reproduce or validate)"),
                ))
            }
        };
        if let Some(t) = target {
            return Err(CliError::config(origin, format!("`{}` takes no target, got `{t}`", cmd.name())));
        }
        Ok(cmd)
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            Command::Analytic => &[
                "protocol", "omega", "lambda", "gamma", "gamma_over_lambda", "b", "mu", "bath_coupling", "nbar",
            ],
            Command::Moments => &[
                "protocol", "omega", "lambda", "gamma", "gamma_over_lambda", "b", "mu", "bath_coupling", "nbar",
                "system", "t_final", "dt", "record_stride", "mean_x", "mean_p", "var_x", "var_p", "cov",
            ],
            Command::Ensemble => &[
                "protocol", "omega", "lambda", "gamma", "gamma_over_lambda", "b", "mu", "seed", "n_traj", "dt",
                "t_final", "record_stride", "threads", "mean_x", "mean_p", "var_x", "var_p", "cov",
            ],
            Command::Classical => &["omega", "b", "gamma", "m", "dt_strobe", "steps", "x0", "p0", "d0", "dt", "t_final"],
            Command::Reproduce(f) if f.is_sweep() => &[
                "omega", "lambda", "gamma_over_lambda", "b", "mu", "seed", "n_traj", "dt", "t_final", "threads",
            ],
            Command::Reproduce(_) => &[
                "omega", "lambda", "gamma", "b", "seed", "n_traj", "dt", "t_final", "record_stride", "threads",
                "mean_x", "mean_p", "var_x", "var_p", "cov",
            ],
            Command::Validate => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KeyType {
    Text,
    Sweep,
    Float,
    Int,
}

/// Known keys: (name, section, type).
const KEYS: &[(&str, &str, KeyType)] = &[
    ("command", "run", KeyType::Text),
    ("target", "run", KeyType::Text),
    ("output", "run", KeyType::Text),
    ("protocol", "protocol", KeyType::Text),
    ("system", "protocol", KeyType::Text),
    ("omega", "protocol", KeyType::Sweep),
    ("lambda", "protocol", KeyType::Sweep),
    ("gamma", "protocol", KeyType::Sweep),
    ("gamma_over_lambda", "protocol", KeyType::Sweep),
    ("b", "protocol", KeyType::Sweep),
    ("mu", "protocol", KeyType::Sweep),
    ("bath_coupling", "protocol", KeyType::Float),
    ("nbar", "protocol", KeyType::Float),
    ("seed", "simulation", KeyType::Int),
    ("n_traj", "simulation", KeyType::Int),
    ("dt", "simulation", KeyType::Float),
    ("t_final", "simulation", KeyType::Float),
    ("record_stride", "simulation", KeyType::Int),
    ("threads", "simulation", KeyType::Int),
    ("mean_x", "initial", KeyType::Float),
    ("mean_p", "initial", KeyType::Float),
    ("var_x", "initial", KeyType::Float),
    ("var_p", "initial", KeyType::Float),
    ("cov", "initial", KeyType::Float),
    ("m", "classical", KeyType::Float),
    ("dt_strobe", "classical", KeyType::Float),
    ("steps", "classical", KeyType::Int),
    ("x0", "classical", KeyType::Float),
    ("p0", "classical", KeyType::Float),
    ("d0", "classical", KeyType::Float),
];

fn key_info(key: &str) -> Option<(&'static str, &'static str, KeyType)> {
    KEYS.iter().copied().find(|(k, _, _)| *k == key)
}

/// Keys left out of the CSV header: they change where and how fast a run
/// happens, not what it computes.
const EXECUTION_KEYS: &[&str] = &["command", "target", "output", "threads"];

/// A numeric axis: one or more values plus its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub text: String,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn single(v: f64) -> Self {
        Grid {
            text: fmt_num(v),
            values: vec![v],
        }
    }

    /// Parses `v`, `v1,v2,...`, `lin:a:b:n` or `log:a:b:n`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let t = text.trim();
        let num = |s: &str| -> Result<f64, String> {
            let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("`{s}` is not finite"))
            }
        };
        let values = if let Some(rest) = t.strip_prefix("lin:").or_else(|| t.strip_prefix("log:")) {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("grid `{t}` must look like {}start:stop:count", &t[..4]));
            }
            let (a, b) = (num(parts[0])?, num(parts[1])?);
            let n: usize = parts[2]
                .trim()
                .parse()
                .map_err(|_| format!("grid count `{}` is not a positive integer", parts[2]))?;
            if n == 0 {
                return Err("grid count must be at least 1".into());
            }
            if n == 1 && a != b {
                return Err("a 1-point grid needs start = stop".into());
            }
            let log = t.starts_with("log:");
            if log && !(a > 0.0 && b > 0.0) {
                return Err("log grid bounds must be positive".into());
            }
            (0..n)
                .map(|i| {
                    if i == 0 {
                        a
                    } else if i == n - 1 {
                        b
                    } else {
                        let f = i as f64 / (n - 1) as f64;
                        if log {
                            10f64.powf(a.log10() + f * (b.log10() - a.log10()))
                        } else {
                            a + f * (b - a)
                        }
                    }
                })
                .collect()
        } else {
            t.split(',').map(num).collect::<Result<Vec<_>, _>>()?
        };
        Ok(Grid {
            text: t.to_string(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The rate axis of a sweep: γ directly, or γ/λ.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaAxis {
    Gamma(Grid),
    OverLambda(Grid),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalSpec {
    pub m: f64,
    pub dt_strobe: f64,
    pub steps: usize,
    pub start: ClassicalState,
}

/// A fully validated run description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub command: Command,
    pub protocol: Option<ProtocolKind>,
    pub system: Option<SystemKind>,
    pub omega: Grid,
    pub lambda: Option<Grid>,
    pub gamma: Option<GammaAxis>,
    /// `b` for X and XP, `μ` for C.
    pub gain: Option<Grid>,
    pub bath_coupling: f64,
    pub nbar: f64,
    pub seed: u64,
    pub n_traj: usize,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub record_stride: Option<usize>,
    pub threads: Option<usize>,
    pub init: GaussianState,
    pub classical: ClassicalSpec,
    pub output: Option<PathBuf>,
    /// Resolved settings in canonical order, as written to CSV headers.
    pub resolved: Vec<(String, String)>,
}

/// One parameter point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub omega: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub gamma_over_lambda: f64,
    pub gain: f64,
}

/// Unresolved `key = value` settings with their origins.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<&'static str, (String, Origin)>,
}

impl RawConfig {
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut raw = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let origin = Origin::Line(i + 1);
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::config(&origin, format!("malformed section header `{line}`")))?
                    .trim();
                if !KEYS.iter().any(|(_, s, _)| *s == name) {
                    return Err(CliError::config(&origin, format!("unknown section `[{name}]`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(&origin, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let (name, sec, _) = key_info(key).ok_or_else(|| CliError::config(&origin, format!("unknown key `{key}`")))?;
            if let Some(s) = &section {
                if s != sec {
                    return Err(CliError::config(&origin, format!("key `{key}` belongs in [{sec}], not [{s}]")));
                }
            }
            if raw.entries.contains_key(name) {
                return Err(CliError::config(&origin, format!("duplicate key `{key}`")));
            }
            raw.entries.insert(name, (value.trim().to_string(), origin));
        }
        Ok(raw)
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), CliError> {
        let (name, _, _) = key_info(key).ok_or_else(|| CliError::config(&origin, format!("unknown key `{key}`")))?;
        self.entries.insert(name, (value.trim().to_string(), origin));
        Ok(())
    }

    fn set_default(&mut self, key: &'static str, value: &str) {
        self.entries
            .entry(key)
            .or_insert_with(|| (value.to_string(), Origin::Default));
    }

    fn get(&self, key: &str) -> Option<(&str, &Origin)> {
        self.entries.get(key).map(|(v, o)| (v.as_str(), o))
    }

    pub fn resolve(&self) -> Result<RunSpec, CliError> {
        let mut raw = self.clone();
        let (cmd_text, cmd_origin) = raw
            .get("command")
            .map(|(v, o)| (v.to_string(), o.clone()))
            .unwrap_or_else(|| ("analytic".to_string(), Origin::Default));
        let target = raw.get("target").map(|(v, _)| v.to_string());
        let command = Command::parse(&cmd_text, target.as_deref(), &cmd_origin)?;

        let allowed = command.keys();
        for (key, (_, origin)) in &raw.entries {
            if !EXECUTION_KEYS.contains(key) && !allowed.contains(key) {
                return Err(CliError::config(origin, format!("key `{key}` is not used by `{}`", command.name())));
            }
        }

        if let Command::Reproduce(fig) = command {
            if let Some((v, o)) = raw.get("protocol") {
                return Err(CliError::config(o, format!("protocol is fixed by {} (got `{v}`)", fig.name())));
            }
            if fig.protocol() == ProtocolKind::C {
                if let Some((_, o)) = raw.get("b") {
                    return Err(CliError::config(o, "protocol C takes its gain as `mu`, not `b`"));
                }
            } else if let Some((_, o)) = raw.get("mu") {
                return Err(CliError::config(o, format!("protocol {} takes its gain as `b`, not `mu`", fig.protocol().name())));
            }
            for (k, v) in fig.defaults() {
                if *k == "gamma_over_lambda" && raw.get("gamma").is_some() {
                    continue;
                }
                raw.set_default(k, v);
            }
        }
        if matches!(command, Command::Classical) {
            for (k, v) in [("m", "1"), ("dt_strobe", "0.1"), ("steps", "100"), ("x0", "1"), ("p0", "0"), ("d0", "0"), ("dt", "0.001")] {
                raw.set_default(k, v);
            }
        }
        for k in ["omega", "bath_coupling", "nbar", "seed", "n_traj", "dt", "mean_x", "mean_p", "var_x", "var_p", "cov"] {
            if allowed.contains(&k) && !(k == "dt" && command == Command::Moments) {
                let v = match k {
                    "omega" => "1",
                    "seed" => "1",
                    "n_traj" => "1000",
                    "dt" => "0.001",
                    "var_x" | "var_p" => "0.5",
                    _ => "0",
                };
                raw.set_default(k, v);
            }
        }

        let float = |key: &str| -> Result<Option<f64>, CliError> {
            raw.get(key)
                .map(|(v, o)| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| CliError::config(o, format!("{key}: expected a finite number, got `{v}`")))
                })
                .transpose()
        };
        let int = |key: &str| -> Result<Option<u64>, CliError> {
            raw.get(key)
                .map(|(v, o)| {
                    v.parse::<u64>()
                        .map_err(|_| CliError::config(o, format!("{key}: expected a non-negative integer, got `{v}`")))
                })
                .transpose()
        };
        let sweep = |key: &str| -> Result<Option<Grid>, CliError> {
            raw.get(key)
                .map(|(v, o)| Grid::parse(v).map_err(|e| CliError::config(o, format!("{key}: {e}"))))
                .transpose()
        };
        let positive_grid = |key: &str, g: &Option<Grid>| -> Result<(), CliError> {
            if let (Some(g), Some((_, o))) = (g, raw.get(key)) {
                if let Some(v) = g.values.iter().find(|v| !(**v > 0.0)) {
                    return Err(CliError::config(o, format!("{key} must be positive, got {}", fmt_num(*v))));
                }
            }
            Ok(())
        };
        let positive = |key: &str, v: Option<f64>| -> Result<(), CliError> {
            match (v, raw.get(key)) {
                (Some(x), Some((_, o))) if !(x > 0.0) => {
                    Err(CliError::config(o, format!("{key} must be positive, got {}", fmt_num(x))))
                }
                _ => Ok(()),
            }
        };
        let non_negative = |key: &str, v: f64| -> Result<(), CliError> {
            match raw.get(key) {
                Some((_, o)) if v < 0.0 => Err(CliError::config(o, format!("{key} must be non-negative, got {}", fmt_num(v)))),
                _ => Ok(()),
            }
        };

        let protocol = match command {
            Command::Reproduce(f) => Some(f.protocol()),
            _ => raw
                .get("protocol")
                .map(|(v, o)| v.parse::<ProtocolKind>().map_err(|e| CliError::config(o, e.to_string())))
                .transpose()?,
        };
        let system = raw
            .get("system")
            .map(|(v, o)| v.parse::<SystemKind>().map_err(|e| CliError::config(o, e)))
            .transpose()?;

        let omega = sweep("omega")?.unwrap_or_else(|| Grid::single(1.0));
        positive_grid("omega", &Some(omega.clone()))?;
        let lambda = sweep("lambda")?;
        positive_grid("lambda", &lambda)?;
        let gamma_grid = sweep("gamma")?;
        let ratio_grid = sweep("gamma_over_lambda")?;
        positive_grid("gamma", &gamma_grid)?;
        positive_grid("gamma_over_lambda", &ratio_grid)?;
        let gamma = match (gamma_grid, ratio_grid) {
            (Some(_), Some(_)) => {
                let (_, o) = raw.get("gamma_over_lambda").expect("present");
                return Err(CliError::config(o, "give either gamma or gamma_over_lambda, not both"));
            }
            (Some(g), None) => Some(GammaAxis::Gamma(g)),
            (None, Some(r)) => Some(GammaAxis::OverLambda(r)),
            (None, None) => None,
        };
        let b = sweep("b")?;
        let mu = sweep("mu")?;
        positive_grid("b", &b)?;
        positive_grid("mu", &mu)?;
        let gain = match (protocol, b, mu) {
            (_, Some(_), Some(_)) => {
                let (_, o) = raw.get("mu").expect("present");
                return Err(CliError::config(o, "give either b or mu, not both"));
            }
            (Some(ProtocolKind::C), Some(_), None) => {
                let (_, o) = raw.get("b").expect("present");
                return Err(CliError::config(o, "protocol C takes its gain as `mu`, not `b`"));
            }
            (Some(k @ (ProtocolKind::X | ProtocolKind::XP)), None, Some(_)) => {
                let (_, o) = raw.get("mu").expect("present");
                return Err(CliError::config(o, format!("protocol {} takes its gain as `b`, not `mu`", k.name())));
            }
            (_, b, mu) => b.or(mu),
        };

        let bath_coupling = float("bath_coupling")?.unwrap_or(0.0);
        let nbar = float("nbar")?.unwrap_or(0.0);
        non_negative("bath_coupling", bath_coupling)?;
        non_negative("nbar", nbar)?;

        let seed = int("seed")?.unwrap_or(1);
        let n_traj = int("n_traj")?.unwrap_or(1000) as usize;
        if let Some((_, o)) = raw.get("n_traj") {
            if n_traj < 2 {
                return Err(CliError::config(o, format!("n_traj must be at least 2, got {n_traj}")));
            }
        }
        let dt = float("dt")?;
        positive("dt", dt)?;
        let t_final = float("t_final")?;
        positive("t_final", t_final)?;
        let record_stride = int("record_stride")?.map(|v| v as usize);
        if let (Some(0), Some((_, o))) = (record_stride, raw.get("record_stride")) {
            return Err(CliError::config(o, "record_stride must be at least 1"));
        }
        let threads = int("threads")?.map(|v| v as usize);
        if let (Some(0), Some((_, o))) = (threads, raw.get("threads")) {
            return Err(CliError::config(o, "threads must be at least 1"));
        }

        let init = {
            let g = |k| float(k).map(|v| v.unwrap_or(if k.starts_with("var") { 0.5 } else { 0.0 }));
            let (mx, mp, vx, vp, c) = (g("mean_x")?, g("mean_p")?, g("var_x")?, g("var_p")?, g("cov")?);
            GaussianState::new(mx, mp, vx, vp, c).map_err(|e| {
                let origin = ["var_x", "var_p", "cov", "mean_x", "mean_p"]
                    .iter()
                    .find_map(|k| raw.get(k).filter(|(_, o)| **o != Origin::Default).map(|(_, o)| o.clone()))
                    .unwrap_or(Origin::Default);
                CliError::config(&origin, format!("initial state: {e}"))
            })?
        };

        let classical = ClassicalSpec {
            m: float("m")?.unwrap_or(1.0),
            dt_strobe: float("dt_strobe")?.unwrap_or(0.1),
            steps: int("steps")?.unwrap_or(100) as usize,
            start: ClassicalState::new(float("x0")?.unwrap_or(1.0), float("p0")?.unwrap_or(0.0), float("d0")?.unwrap_or(0.0)),
        };
        positive("m", Some(classical.m))?;
        positive("dt_strobe", Some(classical.dt_strobe))?;

        let output = raw.get("output").map(|(v, _)| PathBuf::from(v));

        // required keys
        let need = |cond: bool, key: &str| -> Result<(), CliError> {
            if cond {
                Ok(())
            } else {
                Err(CliError::config(&Origin::Default, format!("missing required key `{key}` for `{}`", command.name())))
            }
        };
        match command {
            Command::Analytic | Command::Moments | Command::Ensemble => {
                need(protocol.is_some(), "protocol")?;
                need(lambda.is_some(), "lambda")?;
                need(gamma.is_some(), "gamma")?;
                let gain_key = if protocol == Some(ProtocolKind::C) { "mu" } else { "b" };
                need(gain.is_some(), gain_key)?;
            }
            Command::Classical => {
                need(gamma.is_some(), "gamma")?;
                need(gain.is_some(), "b")?;
            }
            Command::Reproduce(_) | Command::Validate => {}
        }

        let mut spec = RunSpec {
            command,
            protocol,
            system,
            omega,
            lambda,
            gamma,
            gain,
            bath_coupling,
            nbar,
            seed,
            n_traj,
            dt,
            t_final,
            record_stride,
            threads,
            init,
            classical,
            output,
            resolved: vec![],
        };

        let single = matches!(command, Command::Moments | Command::Ensemble | Command::Classical)
            || matches!(command, Command::Reproduce(f) if !f.is_sweep());
        let points = spec.points();
        if single && points.len() > 1 {
            return Err(CliError::config(
                &Origin::Default,
                format!("`{}` takes a single parameter point, got {} from the sweep keys", command.name(), points.len()),
            ));
        }
        if let (Some(kind), false) = (protocol, matches!(command, Command::Classical)) {
            for p in &points {
                let cfg = ProtocolConfig::preset(kind, p.omega, p.lambda, p.gamma, p.gain)?;
                cfg.with_bath(bath_coupling, nbar)?;
            }
        }

        spec.resolved.push(("command".into(), command.name()));
        for (key, _, _) in KEYS {
            if EXECUTION_KEYS.contains(key) {
                continue;
            }
            if let Some((v, _)) = raw.get(key) {
                spec.resolved.push((key.to_string(), v.to_string()));
            }
        }
        if command == Command::Reproduce(Figure::Fig2c) && raw.get("mu").is_none() {
            spec.resolved.push(("mu".into(), "2*lambda/omega".into()));
        }
        if matches!(command, Command::Ensemble | Command::Moments | Command::Reproduce(_)) && raw.get("t_final").is_none() {
            spec.resolved.push(("t_final".into(), "auto".into()));
        }
        Ok(spec)
    }
}

/// Parses config text. The command defaults to `analytic` when the text
/// does not set `command`.
pub fn parse_config(text: &str) -> Result<RunSpec, CliError> {
    RawConfig::from_text(text)?.resolve()
}

impl RunSpec {
    /// Cartesian product of the sweep axes, ω outermost and gain innermost.
    pub fn points(&self) -> Vec<Point> {
        let lambdas = self.lambda.as_ref().map(|g| g.values.clone()).unwrap_or_else(|| vec![f64::NAN]);
        let gains = self.gain.as_ref().map(|g| g.values.clone()).unwrap_or_else(|| vec![f64::NAN]);
        let mut out = vec![];
        for &omega in &self.omega.values {
            for &lambda in &lambdas {
                let rates: Vec<(f64, f64)> = match &self.gamma {
                    Some(GammaAxis::Gamma(g)) => g.values.iter().map(|&g| (g, g / lambda)).collect(),
                    Some(GammaAxis::OverLambda(r)) => r.values.iter().map(|&r| (r * lambda, r)).collect(),
                    None => vec![(f64::NAN, f64::NAN)],
                };
                for &(gamma, ratio) in &rates {
                    for &gain in &gains {
                        let gain = if gain.is_nan() && self.command == Command::Reproduce(Figure::Fig2c) {
                            2.0 * lambda / omega
                        } else {
                            gain
                        };
                        out.push(Point {
                            omega,
                            lambda,
                            gamma,
                            gamma_over_lambda: ratio,
                            gain,
                        });
                    }
                }
            }
        }
        out
    }

    /// `# qfeedback <version> key=value ...`
    pub fn header(&self) -> String {
        let mut h = format!("# qfeedback {VERSION}");
        for (k, v) in &self.resolved {
            let _ = write!(h, " {k}={}", v.replace(' ', "_"));
        }
        h
    }

    fn config(&self, p: &Point) -> Result<ProtocolConfig, CliError> {
        let kind = self.protocol.expect("protocol resolved");
        Ok(ProtocolConfig::preset(kind, p.omega, p.lambda, p.gamma, p.gain)?.with_bath(self.bath_coupling, self.nbar)?)
    }

    fn dt(&self) -> f64 {
        self.dt.unwrap_or(1e-3)
    }
}

/// Shortest decimal text that reads back to the same `f64` (at most 17
/// significant digits).
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn csv_row(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

/// One file's worth of output.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    /// Appended to the main output path; empty for the main file.
    pub suffix: &'static str,
    pub content: String,
}

/// Result of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub tables: Vec<Table>,
    /// Human-readable lines for standard output.
    pub summary: Vec<String>,
    pub exit_code: i32,
}

fn table(spec: &RunSpec, columns: &[&str], rows: &[Vec<String>], footer: &[String]) -> String {
    let mut s = spec.header();
    s.push('\n');
    s.push_str(&columns.join(","));
    s.push('\n');
    for r in rows {
        s.push_str(&csv_row(r));
    }
    for f in footer {
        s.push_str("# ");
        s.push_str(f);
        s.push('\n');
    }
    s
}

/// Rounds `t` up to a whole number of steps of `dt`.
pub fn whole_steps(t: f64, dt: f64) -> f64 {
    let n = (t / dt * (1.0 - 1e-12)).ceil().max(1.0);
    n * dt
}

/// Default ensemble run length: `max(30/χ, 50/λ_min)` on the `dt` grid.
pub fn default_t_final(cfg: &ProtocolConfig, dt: f64) -> Result<f64, CliError> {
    let chi = relaxation_of(cfg)?;
    let lmin = [(cfg.channel_x_active, cfg.lambda_x), (cfg.channel_p_active, cfg.lambda_p)]
        .iter()
        .filter(|(a, _)| *a)
        .map(|(_, l)| *l)
        .fold(f64::INFINITY, f64::min);
    Ok(whole_steps((30.0 / chi).max(50.0 / lmin), dt))
}

fn relaxation_of(cfg: &ProtocolConfig) -> Result<f64, CliError> {
    let kind = cfg.kind().ok_or(AnalyticError::NotPreset)?;
    let sys = moments::build_system(cfg, kind.into())?;
    Ok(moments::relaxation_rate(&sys)?.rate)
}

/// Runs a resolved spec and returns its tables without touching the disk.
pub fn run(spec: &RunSpec) -> Result<Outcome, CliError> {
    match spec.command {
        Command::Analytic => run_analytic(spec),
        Command::Moments => run_moments(spec),
        Command::Ensemble => run_ensemble(spec),
        Command::Classical => run_classical(spec),
        Command::Reproduce(f) if f.is_sweep() => run_fig2(spec),
        Command::Reproduce(_) => run_fig3(spec),
        Command::Validate => run_validate(spec),
    }
}

fn ok(tables: Vec<Table>, summary: Vec<String>) -> Result<Outcome, CliError> {
    Ok(Outcome {
        tables,
        summary,
        exit_code: EXIT_OK,
    })
}

fn main_table(content: String) -> Table {
    Table { suffix: "", content }
}

fn run_analytic(spec: &RunSpec) -> Result<Outcome, CliError> {
    let kind = spec.protocol.expect("protocol");
    let cols = [
        "protocol", "omega", "gamma", "lambda", "gain", "energy", "var_x", "relaxation_rate", "trapped",
        "bath_coupling", "nbar", "thermal_energy", "thermal_path", "notes",
    ];
    let mut rows = vec![];
    for p in spec.points() {
        let r = analytic::report(kind, p.omega, p.gamma, p.lambda, p.gain)?;
        let var_x = match r.var_x {
            VarX::Finite(v) => fmt_num(v),
            VarX::Divergent => "inf".into(),
        };
        let rate = match r.relaxation_rate {
            Rate::Known { rate, .. } => fmt_num(rate),
            Rate::Unknown { .. } => "nan".into(),
        };
        let (thermal, path) = if spec.bath_coupling > 0.0 {
            let t = analytic::thermal_weighted_energy(&spec.config(&p)?)?;
            (fmt_num(t.energy), format!("{:?}", t.path).to_lowercase())
        } else {
            (String::new(), String::new())
        };
        rows.push(vec![
            kind.name().to_string(),
            fmt_num(p.omega),
            fmt_num(p.gamma),
            fmt_num(p.lambda),
            fmt_num(p.gain),
            fmt_num(r.energy),
            var_x,
            rate,
            r.trapped.to_string(),
            fmt_num(spec.bath_coupling),
            fmt_num(spec.nbar),
            thermal,
            path,
            format!("\"{}\"", r.regime_notes.join("; ")),
        ]);
    }
    let n = rows.len();
    ok(vec![main_table(table(spec, &cols, &rows, &[]))], vec![format!("{n} parameter point(s)")])
}

fn run_moments(spec: &RunSpec) -> Result<Outcome, CliError> {
    let p = spec.points()[0];
    let cfg = spec.config(&p)?;
    let kind = spec.protocol.expect("protocol");
    let system = spec.system.unwrap_or(match (kind, spec.bath_coupling > 0.0) {
        (ProtocolKind::X, true) => SystemKind::XThermalB1,
        (ProtocolKind::XP, true) => SystemKind::XPThermalB1,
        (k, _) => k.into(),
    });
    let sys = moments::build_system(&cfg, system)?;
    let relax = sys.relaxation_rate();
    let t_final = match (spec.t_final, &relax) {
        (Some(t), _) => t,
        (None, Ok(r)) => 30.0 / r.rate,
        (None, Err(e)) => return Err(e.clone().into()),
    };
    let (dt, t_final) = match spec.dt {
        Some(dt) => (dt, t_final),
        None => {
            let h = moments::max_step(&sys).min(1e-2);
            let n = (t_final / h).ceil();
            (t_final / n, t_final)
        }
    };
    let n = (t_final / dt).round() as usize;
    let stride = spec.record_stride.unwrap_or((n / 1000).max(1));
    let nu0 = sys.initial_moments(&spec.init, &Default::default());
    let series = moments::integrate_strided(&sys, &nu0, t_final, dt, stride)?;

    let mut cols: Vec<&str> = vec!["t"];
    cols.extend(sys.labels.iter().copied());
    cols.extend(["energy", "var_x"]);
    let mut rows = vec![];
    for (t, nu) in series.times.iter().zip(&series.values) {
        let obs = sys.observables(nu)?;
        let mut r = vec![fmt_num(*t)];
        r.extend(nu.iter().map(|v| fmt_num(*v)));
        r.push(fmt_num(obs.energy));
        r.push(obs.var_x.map(fmt_num).unwrap_or_default());
        rows.push(r);
    }
    let mut footer = vec![];
    let mut summary = vec![];
    match sys.fixed_point() {
        Ok(nu) => {
            let obs = sys.observables(&nu)?;
            let vals: Vec<String> = nu.iter().map(|v| fmt_num(*v)).collect();
            footer.push(format!("fixed_point = {}", vals.join(",")));
            summary.push(format!("stationary energy = {}", fmt_num(obs.energy)));
        }
        Err(MomentError::SingularSystem { null_direction }) => {
            let v: Vec<String> = null_direction.iter().map(|v| fmt_num(*v)).collect();
            footer.push(format!("fixed_point = singular; null_direction = {}", v.join(",")));
            summary.push("no unique fixed point (singular moment matrix)".into());
        }
        Err(e) => return Err(e.into()),
    }
    match &relax {
        Ok(r) => {
            footer.push(format!("relaxation_rate = {}", fmt_num(r.rate)));
            summary.push(format!("relaxation rate = {}", fmt_num(r.rate)));
        }
        Err(e) => summary.push(format!("relaxation rate unavailable: {e}")),
    }

    let spectrum = sys.spectrum()?;
    let spec_rows: Vec<Vec<String>> = spectrum
        .eigenvalues
        .iter()
        .zip(&spectrum.residuals)
        .zip(&spectrum.flagged)
        .map(|((z, r), f)| vec![fmt_num(z.re), fmt_num(z.im), fmt_num(*r), f.to_string()])
        .collect();
    ok(
        vec![
            main_table(table(spec, &cols, &rows, &footer)),
            Table {
                suffix: ".spectrum.csv",
                content: table(spec, &["re", "im", "residual", "flagged"], &spec_rows, &[]),
            },
        ],
        summary,
    )
}

fn trajectory_config(spec: &RunSpec, cfg: ProtocolConfig, seed: u64) -> Result<TrajectoryConfig, CliError> {
    let dt = spec.dt();
    let t_final = match spec.t_final {
        Some(t) => t,
        None => default_t_final(&cfg, dt)?,
    };
    let mut tc = TrajectoryConfig::new(cfg, t_final, dt, seed);
    tc.init_state = spec.init;
    let n = tc.n_steps()?;
    tc.record_stride = spec.record_stride.unwrap_or((n / 1000).max(1));
    Ok(tc)
}

fn run_ensemble(spec: &RunSpec) -> Result<Outcome, CliError> {
    let p = spec.points()[0];
    let cfg = spec.config(&p)?;
    let tc = trajectory_config(spec, cfg, spec.seed)?;
    let stats = trajectory::run_ensemble_with(&tc, spec.n_traj, spec.threads)?;
    let rows: Vec<Vec<String>> = (0..stats.times.len())
        .map(|j| vec![fmt_num(stats.times[j]), fmt_num(stats.mean_energy[j]), fmt_num(stats.sem_energy[j])])
        .collect();
    let kind = spec.protocol.expect("protocol");
    let analytic = analytic::asymptotic_energy(kind, p.omega, p.gamma, p.lambda, p.gain).ok();
    let mut footer = vec![
        format!("t_final = {}", fmt_num(tc.t_final)),
        format!("window_start = {}", fmt_num(stats.window_start_time)),
        format!("asymptotic_energy = {}", fmt_num(stats.asymptotic_energy)),
        format!("asymptotic_sem = {}", fmt_num(stats.asymptotic_sem)),
    ];
    if let Some(e) = analytic {
        footer.push(format!("analytic_energy = {}", fmt_num(e)));
    }
    let summary = vec![format!(
        "asymptotic energy {} ± {} (analytic {})",
        fmt_num(stats.asymptotic_energy),
        fmt_num(stats.asymptotic_sem),
        analytic.map(fmt_num).unwrap_or_else(|| "n/a".into())
    )];
    ok(vec![main_table(table(spec, &["t", "mean_energy", "sem_energy"], &rows, &footer))], summary)
}

fn run_classical(spec: &RunSpec) -> Result<Outcome, CliError> {
    let p = spec.points()[0];
    let c = spec.classical;
    let params = ClassicalParams {
        m: c.m,
        omega: p.omega,
        b: p.gain,
        gamma: p.gamma,
        dt_strobe: c.dt_strobe,
    };
    params.validate()?;
    let class = classical::classify_discrete(&params)?;
    let orbit = classical::discrete_orbit(c.start.x, c.start.p, &params, c.steps)?;
    let dt = spec.dt();
    let t_final = spec.t_final.unwrap_or(c.steps as f64 * c.dt_strobe);
    let cont = classical::continuous_orbit(c.start, &params, t_final, dt)?;
    let stride = (cont.len() / 1000).max(1);

    let mut rows = vec![];
    for (k, (x, pp)) in orbit.iter().enumerate() {
        rows.push(vec![
            "discrete".into(),
            fmt_num(k as f64 * c.dt_strobe),
            fmt_num(*x),
            fmt_num(*pp),
            String::new(),
            String::new(),
        ]);
    }
    for (i, (t, s)) in cont.iter().enumerate() {
        if i % stride == 0 || i == cont.len() - 1 {
            rows.push(vec![
                "continuous".into(),
                fmt_num(*t),
                fmt_num(s.x),
                fmt_num(s.p),
                fmt_num(s.d_x),
                fmt_num(params.energy(s)),
            ]);
        }
    }
    let regime = format!("{:?}", class.regime);
    let mut footer = vec![
        format!("discrete_regime = {regime}"),
        format!("spectral_radius = {}", fmt_num(class.spectral_radius)),
    ];
    if let Ok(rate) = classical::continuous_relaxation_rate(&params) {
        footer.push(format!("continuous_relaxation_rate = {}", fmt_num(rate)));
    }
    if p.gain == 1.0 {
        if let Ok((x, pp)) = classical::discrete_asymptote_b1(c.start.x, c.start.p, &params) {
            footer.push(format!("discrete_asymptote = {},{}", fmt_num(x), fmt_num(pp)));
        }
        let a = classical::continuous_asymptote_b1(c.start, &params);
        footer.push(format!("continuous_asymptote = {},{},{}", fmt_num(a.x), fmt_num(a.p), fmt_num(a.d_x)));
    }
    let summary = vec![format!(
        "discrete regime {regime}, spectral radius {}",
        fmt_num(class.spectral_radius)
    )];
    ok(vec![main_table(table(spec, &["model", "t", "x", "p", "d_x", "energy"], &rows, &footer))], summary)
}

/// One row of a `reproduce fig2*` sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub gamma_over_lambda: f64,
    pub lambda: f64,
    pub analytic_energy: f64,
    pub ensemble_energy: f64,
    pub sem: f64,
    pub n_traj: usize,
    pub seed: u64,
}

/// Runs the ensemble at every point of a sweep; the seed of row `i` is
/// `seed + i`. Run length per point is `30/χ` unless `t_final` is set.
pub fn sweep_rows(spec: &RunSpec) -> Result<Vec<SweepRow>, CliError> {
    let kind = spec.protocol.expect("protocol");
    let dt = spec.dt();
    let mut out = vec![];
    for (i, p) in spec.points().into_iter().enumerate() {
        let cfg = spec.config(&p)?;
        let t_final = match spec.t_final {
            Some(t) => t,
            None => whole_steps(30.0 / relaxation_of(&cfg)?, dt),
        };
        let seed = spec.seed.wrapping_add(i as u64);
        let mut tc = TrajectoryConfig::new(cfg, t_final, dt, seed);
        tc.record_stride = tc.n_steps()?;
        let stats = trajectory::run_ensemble_with(&tc, spec.n_traj, spec.threads)?;
        out.push(SweepRow {
            gamma_over_lambda: p.gamma_over_lambda,
            lambda: p.lambda,
            analytic_energy: analytic::asymptotic_energy(kind, p.omega, p.gamma, p.lambda, p.gain)?,
            ensemble_energy: stats.asymptotic_energy,
            sem: stats.asymptotic_sem,
            n_traj: spec.n_traj,
            seed,
        });
    }
    Ok(out)
}

fn run_fig2(spec: &RunSpec) -> Result<Outcome, CliError> {
    let rows = sweep_rows(spec)?;
    let within = rows
        .iter()
        .filter(|r| (r.ensemble_energy - r.analytic_energy).abs() <= 3.0 * r.sem + 1e-12 * r.analytic_energy.abs().max(1.0))
        .count();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_num(r.gamma_over_lambda),
                fmt_num(r.lambda),
                fmt_num(r.analytic_energy),
                fmt_num(r.ensemble_energy),
                fmt_num(r.sem),
                r.n_traj.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    let cols = ["gamma_over_lambda", "lambda", "analytic_energy", "ensemble_energy", "sem", "n_traj", "seed"];
    ok(
        vec![main_table(table(spec, &cols, &cells, &[]))],
        vec![format!("{within}/{} points within 3 SEM of the analytic energy", rows.len())],
    )
}

fn run_fig3(spec: &RunSpec) -> Result<Outcome, CliError> {
    let p = spec.points()[0];
    let cfg = spec.config(&p)?;
    let tc = trajectory_config(spec, cfg, spec.seed)?;
    let stats = trajectory::run_ensemble_with(&tc, spec.n_traj, spec.threads)?;
    let singles = (0..5)
        .map(|i| trajectory::simulate_indexed(&tc, i))
        .collect::<Result<Vec<_>, _>>()?;
    let asymptote = analytic::asymptotic_energy(ProtocolKind::XP, p.omega, p.gamma, p.lambda, p.gain)?;
    let rows: Vec<Vec<String>> = (0..stats.times.len())
        .map(|j| {
            let mut r = vec![fmt_num(stats.times[j])];
            r.extend(singles.iter().map(|s| fmt_num(s[j].energy)));
            r.push(fmt_num(stats.mean_energy[j]));
            r.push(fmt_num(asymptote));
            r
        })
        .collect();
    let cols = ["t", "traj_0", "traj_1", "traj_2", "traj_3", "traj_4", "ensemble_mean", "analytic_asymptote"];
    let summary = vec![format!(
        "final ensemble mean {} (analytic asymptote {})",
        fmt_num(*stats.mean_energy.last().expect("non-empty")),
        fmt_num(asymptote)
    )];
    ok(vec![main_table(table(spec, &cols, &rows, &[]))], summary)
}

/// Agreement of one closed-form quantity with the moment fixed points.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub check: String,
    pub points: usize,
    /// Grid points left out because the moment system is unstable there.
    pub unstable: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<CheckRow>,
}

impl ValidationReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < VALIDATE_TOL && self.rows.iter().all(|r| r.points > 0)
    }
}

fn log5(a: f64, b: f64) -> Vec<f64> {
    Grid::parse(&format!("log:{a}:{b}:5")).expect("valid grid").values
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Closed forms against moment fixed points on 5×5×5 log grids of
/// (γ/ω, λ/ω, gain) per protocol, plus the C variance at μ = 2λ/ω and
/// the exact bath-coupled energies.
pub fn validation_suite() -> Result<ValidationReport, CliError> {
    let omega = 1.0;
    let gammas = log5(0.01, 10.0);
    let lambdas = log5(0.001, 1.0);
    let mut rows = vec![];
    for kind in ProtocolKind::ALL {
        let gains = match kind {
            ProtocolKind::C => log5(0.001, 1.0),
            _ => log5(0.01, 0.9),
        };
        let mut energy = CheckRow {
            check: format!("{} energy", kind.name()),
            points: 0,
            unstable: 0,
            max_rel_err: 0.0,
        };
        let mut var_x = CheckRow {
            check: format!("{} var_x", kind.name()),
            ..energy.clone()
        };
        for &g in &gammas {
            for &l in &lambdas {
                for &b in &gains {
                    let cfg = ProtocolConfig::preset(kind, omega, l, g, b)?;
                    let sys = moments::build_system(&cfg, kind.into())?;
                    if sys.spectrum()?.abscissa() >= 0.0 {
                        energy.unstable += 1;
                        var_x.unstable += 1;
                        continue;
                    }
                    let obs = sys.observables(&sys.fixed_point()?)?;
                    let e = analytic::asymptotic_energy(kind, omega, g, l, b)?;
                    energy.points += 1;
                    energy.max_rel_err = energy.max_rel_err.max(rel_err(obs.energy, e));
                    if let (Some(v), VarX::Finite(w)) = (obs.var_x, analytic::asymptotic_var_x(kind, omega, g, l, b)?) {
                        var_x.points += 1;
                        var_x.max_rel_err = var_x.max_rel_err.max(rel_err(v, w));
                    }
                }
            }
        }
        rows.push(energy);
        rows.push(var_x);
    }

    let mut c_opt = CheckRow {
        check: "C var_x at mu = 2 lambda/omega".into(),
        points: 0,
        unstable: 0,
        max_rel_err: 0.0,
    };
    for &g in &gammas {
        for &l in &lambdas {
            let cfg = ProtocolConfig::preset(ProtocolKind::C, omega, l, g, 2.0 * l / omega)?;
            let sys = moments::build_system(&cfg, SystemKind::C)?;
            if sys.spectrum()?.abscissa() >= 0.0 {
                c_opt.unstable += 1;
                continue;
            }
            let v = sys.observables(&sys.fixed_point()?)?.var_x.expect("C has var_x");
            c_opt.points += 1;
            c_opt.max_rel_err = c_opt.max_rel_err.max(rel_err(v, 0.5 * (1.0 + omega * omega / (2.0 * g * g))));
        }
    }
    rows.push(c_opt);

    let baths = [(0.01, 0.0), (0.1, 1.0), (1.0, 10.0)];
    for kind in ProtocolKind::ALL {
        let mut row = CheckRow {
            check: format!("{} bath energy", kind.name()),
            points: 0,
            unstable: 0,
            max_rel_err: 0.0,
        };
        for &g in &gammas {
            for &l in &lambdas {
                for &(bath, nbar) in &baths {
                    let (system, gain) = match kind {
                        ProtocolKind::X => (SystemKind::XThermalB1, 1.0),
                        ProtocolKind::XP => (SystemKind::XPThermalB1, 1.0),
                        ProtocolKind::C => (SystemKind::C, 2.0 * l / omega),
                    };
                    let cfg = ProtocolConfig::preset(kind, omega, l, g, gain)?.with_bath(bath, nbar)?;
                    let sys = moments::build_system(&cfg, system)?;
                    if sys.spectrum()?.abscissa() >= 0.0 {
                        row.unstable += 1;
                        continue;
                    }
                    let e = sys.observables(&sys.fixed_point()?)?.energy;
                    let want = match kind {
                        ProtocolKind::X => analytic::x_bath_energy_b1(omega, g, l, bath, nbar),
                        ProtocolKind::XP => analytic::xp_bath_energy_b1(omega, g, l, bath, nbar),
                        ProtocolKind::C => analytic::c_bath_energy(omega, g, l, gain, bath, nbar),
                    };
                    row.points += 1;
                    row.max_rel_err = row.max_rel_err.max(rel_err(e, want));
                }
            }
        }
        rows.push(row);
    }
    Ok(ValidationReport { rows })
}

fn run_validate(spec: &RunSpec) -> Result<Outcome, CliError> {
    let report = validation_suite()?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![r.check.clone(), r.points.to_string(), r.unstable.to_string(), fmt_num(r.max_rel_err)])
        .collect();
    let max = report.max_rel_err();
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    let summary = vec![format!("max relative error = {} ({verdict}, tolerance {})", fmt_num(max), fmt_num(VALIDATE_TOL))];
    Ok(Outcome {
        tables: vec![main_table(table(
            spec,
            &["check", "points", "unstable", "max_rel_err"],
            &rows,
            &[format!("max_rel_err = {}", fmt_num(max))],
        ))],
        summary,
        exit_code: if report.passed() { EXIT_OK } else { EXIT_VALIDATION },
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes every table next to `path` (the main table at `path` itself).
/// Files are written under a temporary name and renamed; on any failure
/// everything written so far is removed.
pub fn write_tables(path: &Path, tables: &[Table]) -> Result<Vec<PathBuf>, CliError> {
    let mut done: Vec<PathBuf> = vec![];
    let io = |p: &Path, e: std::io::Error| CliError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    for t in tables {
        let target = sibling(path, t.suffix);
        let tmp = sibling(&target, ".partial");
        let res = fs::write(&tmp, &t.content).and_then(|_| fs::rename(&tmp, &target));
        if let Err(e) = res {
            let _ = fs::remove_file(&tmp);
            for d in &done {
                let _ = fs::remove_file(d);
            }
            return Err(io(&target, e));
        }
        done.push(target);
    }
    Ok(done)
}

/// Command-line arguments.
#[derive(Debug, Parser)]
#[command(name = "qfeedback", version, about = "Feedback cooling of a continuously measured quantum oscillator")]
pub struct Args {
    /// analytic | moments | ensemble | classical | reproduce | validate
    /// (may instead come from the config file)
    pub command: Option<String>,
    /// Figure for `reproduce`: fig2a, fig2b, fig2c, fig3a, fig3b
    pub target: Option<String>,
    /// Config file of `key = value` lines
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override any config key (repeatable)
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output CSV path (standard output when omitted)
    #[arg(short, long)]
    pub output: Option<String>,
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long = "n-traj")]
    pub n_traj: Option<String>,
    #[arg(long)]
    pub dt: Option<String>,
    #[arg(long = "t-final")]
    pub t_final: Option<String>,
    /// Worker threads for ensembles (does not change results)
    #[arg(long)]
    pub threads: Option<String>,
}

/// Builds the spec from a config file plus flags; flags win.
pub fn spec_from_args(args: &Args) -> Result<RunSpec, CliError> {
    let mut raw = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config {
                origin: Origin::Flag("--config".into()),
                message: format!("{}: {e}", path.display()),
            })?;
            RawConfig::from_text(&text)?
        }
        None => RawConfig::default(),
    };
    match &args.command {
        Some(c) => {
            raw.set("command", c, Origin::Flag("command".into()))?;
            match &args.target {
                Some(t) => raw.set("target", t, Origin::Flag("target".into()))?,
                None => {
                    raw.entries.remove("target");
                }
            }
        }
        None if !raw.entries.contains_key("command") => {
            return Err(CliError::config(&Origin::Default, "no command given on the command line or in the config file"));
        }
        None => {}
    }
    let named = [
        ("output", "--output", &args.output),
        ("protocol", "--protocol", &args.protocol),
        ("seed", "--seed", &args.seed),
        ("n_traj", "--n-traj", &args.n_traj),
        ("dt", "--dt", &args.dt),
        ("t_final", "--t-final", &args.t_final),
        ("threads", "--threads", &args.threads),
    ];
    for (key, flag, value) in named {
        if let Some(v) = value {
            raw.set(key, v, Origin::Flag(flag.into()))?;
        }
    }
    for kv in &args.set {
        let origin = Origin::Flag(format!("--set {kv}"));
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(&origin, "expected KEY=VALUE"))?;
        raw.set(k.trim(), v, origin)?;
    }
    raw.resolve()
}

/// Runs the tool and returns its exit code. Diagnostics go to standard
/// error; data goes to the output file or standard output.
pub fn main_with(args: &Args) -> i32 {
    let result = spec_from_args(args).and_then(|spec| {
        let outcome = run(&spec)?;
        match &spec.output {
            Some(path) => {
                let written = write_tables(path, &outcome.tables)?;
                for line in &outcome.summary {
                    println!("{line}");
                }
                for p in written {
                    println!("wrote {}", p.display());
                }
            }
            None => {
                // a closed pipe downstream is not an error
                let mut out = std::io::stdout().lock();
                for (i, t) in outcome.tables.iter().enumerate() {
                    let sep = if i > 0 { "\n" } else { "" };
                    if write!(out, "{sep}{}", t.content).is_err() {
                        break;
                    }
                }
                for line in &outcome.summary {
                    eprintln!("{line}");
                }
            }
        }
        Ok(outcome.exit_code)
    });
    match result {
        Ok(code) => {
            if code == EXIT_VALIDATION {
                eprintln!("{}", CliError::Validation("max relative error above tolerance".into()).diagnostic());
            }
            code
        }
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}
