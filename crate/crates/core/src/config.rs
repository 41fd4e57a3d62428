//! Run configuration: a flat TOML document with dotted keys.
//!
//! ```toml
//! problem = "P2"
//! grid.h = 0.03125
//! solver.scheme = "explicit"
//! verify.checks = ["sigma_nonpositive", "reflection"]
//! ```
//!
//! A custom problem replaces `problem` by `operator.*`, `obstacle.poly` and
//! `boundary.poly`. Polynomial rows are `[p_1, .., p_m, coeff]` over
//! `(x.., t)` for the obstacle and `(x.., y, t)` for the boundary data, so
//! `obstacle.poly = [[0, 0, 0.5], [2, 0, -1.0]]` is `0.5 - x^2` when `n = 2`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;
use toml::Value;

use crate::geometry::GridSpec;
use crate::library::{explicit_grid, BuiltIn, DEFAULT_SPAN};
use crate::operators::{EllipticOperator, EllipticityPair, OperatorKind};
use crate::problem::{CompatibilityPolicy, PolyBoundary, PolyObstacle, Polynomial, ProblemError, ProblemSpec};
use crate::solvers::{Scheme, SolverConfig, SweepOrder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(String),
    #[error("{}unknown key `{key}`{}", at(*line), hint(suggestion))]
    UnknownKey { key: String, line: Option<usize>, suggestion: Option<String> },
    #[error("{}`{key}` must be {expected}", at(*line))]
    Type { key: String, line: Option<usize>, expected: &'static str },
    #[error("{}`{key}` out of range: {message}", at(*line))]
    Range { key: String, line: Option<usize>, message: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Conflict(String),
}

fn at(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

fn hint(suggestion: &Option<String>) -> String {
    suggestion.as_ref().map(|s| format!("; did you mean `{s}`?")).unwrap_or_default()
}

/// The checks `verify` knows about, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckName {
    SigmaNonpositive,
    Complementarity,
    Semiconcavity,
    Reflection,
    Barrier,
    DecayFit,
    PenaltyConvergence,
}

impl CheckName {
    pub const ALL: [CheckName; 7] = [
        CheckName::SigmaNonpositive,
        CheckName::Complementarity,
        CheckName::Semiconcavity,
        CheckName::Reflection,
        CheckName::Barrier,
        CheckName::DecayFit,
        CheckName::PenaltyConvergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckName::SigmaNonpositive => "sigma_nonpositive",
            CheckName::Complementarity => "complementarity",
            CheckName::Semiconcavity => "semiconcavity",
            CheckName::Reflection => "reflection",
            CheckName::Barrier => "barrier",
            CheckName::DecayFit => "decay_fit",
            CheckName::PenaltyConvergence => "penalty_convergence",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeChoice {
    Signorini,
    Penalized,
    Neumann,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorConfig {
    pub kind: OperatorKind,
    pub lambda: f64,
    pub big_lambda: f64,
    /// Diagonal coefficient rows of a max-linear family.
    pub coefficients: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomProblem {
    pub operator: OperatorConfig,
    pub obstacle: Vec<Vec<f64>>,
    pub boundary: Vec<Vec<f64>>,
    pub margin: f64,
    pub relaxed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSource {
    BuiltIn(BuiltIn),
    Custom(CustomProblem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub n: usize,
    pub h: f64,
    /// `None` takes the largest stable explicit step.
    pub dt: Option<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSection {
    pub mode: ModeChoice,
    pub scheme: Scheme,
    pub theta: f64,
    pub tol_sweep: f64,
    pub max_sweeps: usize,
    pub sweep_order: SweepOrder,
    pub store_every: Option<usize>,
    pub penalty_k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySection {
    pub checks: Vec<CheckName>,
    /// Defaults to `5h`.
    pub sigma_tol: Option<f64>,
    /// Defaults to `5h`.
    pub complementarity_tol: Option<f64>,
    /// Contact tolerance for the decomposition; defaults to `10 h^2`.
    pub tol_contact: Option<f64>,
    /// Contact tolerance used to locate the free boundary for decay fits.
    pub fit_tol_contact: f64,
    /// Defaults to `{8h, 16h, 32h}`.
    pub radii: Option<Vec<f64>>,
    pub alpha_min: f64,
    pub alpha_max: Option<f64>,
    pub r2_min: f64,
    pub delta: f64,
    /// Mesh widths of the semiconcavity ladder; fewer than two reports the
    /// single-grid proxies only.
    pub ladder: Vec<f64>,
    pub ladder_variation_max: f64,
    pub ladder_growth_min: f64,
    pub barrier_boxes: usize,
    pub barrier_c0_factor: f64,
    /// Tangential position of the barrier base point; defaults to the
    /// non-contact thin node farthest from the lateral boundary.
    pub barrier_x: Option<Vec<f64>>,
    pub oracle_tol: f64,
    /// Flip the sign of `sigma` before the sign check (harness self-test).
    pub negative_control: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            checks: CheckName::ALL.to_vec(),
            sigma_tol: None,
            complementarity_tol: None,
            tol_contact: None,
            fit_tol_contact: 0.0,
            radii: None,
            alpha_min: 0.25,
            alpha_max: None,
            r2_min: 0.95,
            delta: 0.25,
            ladder: Vec::new(),
            ladder_variation_max: 0.25,
            ladder_growth_min: 1.5,
            barrier_boxes: 10,
            barrier_c0_factor: 1.1,
            barrier_x: None,
            oracle_tol: 1e-8,
            negative_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSource,
    pub grid: GridConfig,
    pub solver: SolverSection,
    pub penalty_schedule: Vec<f64>,
    pub sweep_h: Vec<f64>,
    pub verify: VerifySection,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "problem",
    "seed",
    "margin",
    "compatibility",
    "output.dir",
    "operator.kind",
    "operator.lambda",
    "operator.Lambda",
    "operator.coefficients",
    "obstacle.poly",
    "boundary.poly",
    "grid.n",
    "grid.h",
    "grid.dt",
    "grid.t_start",
    "grid.t_end",
    "solver.mode",
    "solver.scheme",
    "solver.theta",
    "solver.tol_sweep",
    "solver.max_sweeps",
    "solver.sweep_order",
    "solver.store_every",
    "solver.penalty_k",
    "penalty.schedule",
    "sweep.h",
    "verify.checks",
    "verify.sigma_tol",
    "verify.complementarity_tol",
    "verify.tol_contact",
    "verify.fit_tol_contact",
    "verify.radii",
    "verify.alpha_min",
    "verify.alpha_max",
    "verify.r2_min",
    "verify.delta",
    "verify.ladder",
    "verify.ladder_variation_max",
    "verify.ladder_growth_min",
    "verify.barrier_boxes",
    "verify.barrier_c0_factor",
    "verify.barrier_x",
    "verify.oracle_tol",
    "verify.negative_control",
];

/// Line of `path` in `text`, following `[section]` headers and dotted keys.
fn key_line(text: &str, path: &str) -> Option<usize> {
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            section = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        let Some((key, _)) = line.split_once('=') else { continue };
        let key: String = key.split('.').map(|s| s.trim().trim_matches('"')).collect::<Vec<_>>().join(".");
        let full = if section.is_empty() { key } else { format!("{section}.{key}") };
        if full == path || path.starts_with(&format!("{full}.")) {
            return Some(i + 1);
        }
    }
    None
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&path, t, out),
            other => {
                out.insert(path, other.clone());
            }
        }
    }
}

/// Closest known key segment at the first position where `key` leaves the
/// known key tree.
fn suggest(key: &str) -> Option<String> {
    let parts: Vec<&str> = key.split('.').collect();
    for depth in 0..parts.len() {
        let prefix = parts[..depth].join(".");
        let candidates: Vec<&str> = KEYS
            .iter()
            .filter(|k| depth == 0 || k.starts_with(&format!("{prefix}.")))
            .filter_map(|k| k.split('.').nth(depth))
            .collect();
        if candidates.contains(&parts[depth]) {
            continue;
        }
        return candidates
            .into_iter()
            .map(|c| (strsim::normalized_damerau_levenshtein(c, parts[depth]), c))
            .filter(|(s, _)| *s >= 0.5)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, c)| c.to_string());
    }
    None
}

struct Reader<'a> {
    text: &'a str,
    values: BTreeMap<String, Value>,
}

impl Reader<'_> {
    fn line(&self, key: &str) -> Option<usize> {
        key_line(self.text, key)
    }

    fn type_err(&self, key: &str, expected: &'static str) -> ConfigError {
        ConfigError::Type { key: key.into(), line: self.line(key), expected }
    }

    fn range(&self, key: &str, message: String) -> ConfigError {
        ConfigError::Range { key: key.into(), line: self.line(key), message }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.values.remove(key)
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(f)),
            Some(Value::Integer(i)) => Ok(Some(i as f64)),
            Some(_) => Err(self.type_err(key, "a number")),
        }
    }

    fn positive(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        let v = self.f64(key)?;
        match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(self.range(key, format!("{x} must be positive"))),
            _ => Ok(v),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as usize)),
            Some(Value::Integer(i)) => Err(self.range(key, format!("{i} must be non-negative"))),
            Some(_) => Err(self.type_err(key, "an integer")),
        }
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(b)),
            Some(_) => Err(self.type_err(key, "a boolean")),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.type_err(key, "a string")),
        }
    }

    fn numbers(&self, key: &str, v: &Value) -> Result<Vec<f64>, ConfigError> {
        let Value::Array(items) = v else { return Err(self.type_err(key, "an array of numbers")) };
        items
            .iter()
            .map(|x| match x {
                Value::Float(f) => Ok(*f),
                Value::Integer(i) => Ok(*i as f64),
                _ => Err(self.type_err(key, "an array of numbers")),
            })
            .collect()
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => self.numbers(key, &v).map(Some),
        }
    }

    fn rows(&mut self, key: &str) -> Result<Option<Vec<Vec<f64>>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(rows)) => rows.iter().map(|r| self.numbers(key, r)).collect::<Result<_, _>>().map(Some),
            Some(_) => Err(self.type_err(key, "an array of number arrays")),
        }
    }

    fn strings(&mut self, key: &str) -> Result<Option<Vec<String>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|x| match x {
                    Value::String(s) => Ok(s),
                    _ => Err(self.type_err(key, "an array of strings")),
                })
                .collect::<Result<_, _>>()
                .map(Some),
            Some(_) => Err(self.type_err(key, "an array of strings")),
        }
    }
}

fn parse_kind(s: &str) -> Option<OperatorKind> {
    [OperatorKind::Trace, OperatorKind::PucciMinus, OperatorKind::PucciPlus, OperatorKind::MaxLinear]
        .into_iter()
        .find(|k| k.name() == s)
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Explicit => "explicit",
        Scheme::ImplicitSweep => "implicit_sweep",
    }
}

fn mode_name(m: ModeChoice) -> &'static str {
    match m {
        ModeChoice::Signorini => "signorini",
        ModeChoice::Penalized => "penalized",
        ModeChoice::Neumann => "neumann",
    }
}

fn order_name(o: SweepOrder) -> &'static str {
    match o {
        SweepOrder::Forward => "forward",
        SweepOrder::Reverse => "reverse",
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut values = BTreeMap::new();
    flatten("", &table, &mut values);
    let unknown = values
        .keys()
        .filter(|k| !KEYS.contains(&k.as_str()))
        .map(|k| (key_line(text, k), k.clone()))
        .min_by_key(|(line, _)| line.unwrap_or(usize::MAX));
    if let Some((line, key)) = unknown {
        return Err(ConfigError::UnknownKey { line, suggestion: suggest(&key), key });
    }
    let mut r = Reader { text, values };

    let problem_name = r.string("problem")?;
    let op_kind = r.string("operator.kind")?;
    let lambda = r.positive("operator.lambda")?;
    let big_lambda = r.positive("operator.Lambda")?;
    let coefficients = r.rows("operator.coefficients")?;
    let obstacle = r.rows("obstacle.poly")?;
    let boundary = r.rows("boundary.poly")?;
    let margin = r.positive("margin")?;
    let compatibility = r.string("compatibility")?;

    let n = r.usize("grid.n")?.unwrap_or(2);
    if !(2..=3).contains(&n) {
        return Err(r.range("grid.n", format!("{n} must be 2 or 3")));
    }
    let h = r.positive("grid.h")?.ok_or_else(|| ConfigError::Missing("grid.h".into()))?;
    if h > 1.0 {
        return Err(r.range("grid.h", format!("{h} must be at most 1")));
    }
    let inv = 1.0 / h;
    if (inv - inv.round()).abs() > 1e-9 * inv {
        return Err(r.range("grid.h", format!("1/h = {inv} must be an integer")));
    }
    let dt = r.positive("grid.dt")?;
    let t_start = r.f64("grid.t_start")?.unwrap_or(DEFAULT_SPAN.0);
    let t_end = r.f64("grid.t_end")?.unwrap_or(DEFAULT_SPAN.1);
    if !(t_end > t_start) {
        return Err(r.range("grid.t_end", format!("t_end = {t_end} must exceed t_start = {t_start}")));
    }

    let problem = match problem_name {
        Some(name) => {
            let clash = [("operator.kind", op_kind.is_some()), ("obstacle.poly", obstacle.is_some()), ("boundary.poly", boundary.is_some())];
            if let Some((key, _)) = clash.iter().find(|(_, set)| *set) {
                return Err(ConfigError::Conflict(format!("`problem = \"{name}\"` cannot be combined with `{key}`")));
            }
            let b = BuiltIn::from_name(&name).map_err(|_| r.range("problem", format!("unknown problem `{name}`; expected P1..P4")))?;
            ProblemSource::BuiltIn(b)
        }
        None => {
            let kind_name = op_kind.ok_or_else(|| ConfigError::Missing("problem (or operator.kind)".into()))?;
            let kind = parse_kind(&kind_name).ok_or_else(|| {
                r.range("operator.kind", format!("`{kind_name}`; expected trace, pucci_minus, pucci_plus or max_linear"))
            })?;
            let (lambda, big_lambda) = match kind {
                OperatorKind::Trace => (lambda.unwrap_or(1.0), big_lambda.unwrap_or(1.0)),
                _ => (
                    lambda.ok_or_else(|| ConfigError::Missing("operator.lambda".into()))?,
                    big_lambda.ok_or_else(|| ConfigError::Missing("operator.Lambda".into()))?,
                ),
            };
            if lambda > big_lambda {
                return Err(r.range("operator.lambda", format!("lambda = {lambda} exceeds Lambda = {big_lambda}")));
            }
            let coefficients = coefficients.clone().unwrap_or_default();
            if kind == OperatorKind::MaxLinear {
                if coefficients.is_empty() {
                    return Err(ConfigError::Missing("operator.coefficients".into()));
                }
                for row in &coefficients {
                    if row.len() != n {
                        return Err(r.range("operator.coefficients", format!("row of length {} for n = {n}", row.len())));
                    }
                    if let Some(c) = row.iter().find(|&&c| !(c >= lambda && c <= big_lambda)) {
                        return Err(r.range(
                            "operator.coefficients",
                            format!("coefficient {c} outside [lambda, Lambda] = [{lambda}, {big_lambda}]"),
                        ));
                    }
                }
            } else if !coefficients.is_empty() {
                return Err(ConfigError::Conflict("`operator.coefficients` only applies to max_linear".into()));
            }
            let obstacle = obstacle.ok_or_else(|| ConfigError::Missing("obstacle.poly".into()))?;
            let boundary = boundary.ok_or_else(|| ConfigError::Missing("boundary.poly".into()))?;
            for (key, rows, vars) in [("obstacle.poly", &obstacle, n), ("boundary.poly", &boundary, n + 1)] {
                if let Err(e) = Polynomial::from_table(vars, rows) {
                    return Err(r.range(key, e.to_string()));
                }
            }
            let relaxed = match compatibility.as_deref() {
                None | Some("strict") => false,
                Some("relaxed") => true,
                Some(other) => return Err(r.range("compatibility", format!("`{other}`; expected strict or relaxed"))),
            };
            ProblemSource::Custom(CustomProblem {
                operator: OperatorConfig { kind, lambda, big_lambda, coefficients },
                obstacle,
                boundary,
                margin: margin.unwrap_or(0.125),
                relaxed,
            })
        }
    };
    if matches!(problem, ProblemSource::BuiltIn(_)) {
        for (key, set) in [
            ("operator.lambda", lambda.is_some()),
            ("operator.Lambda", big_lambda.is_some()),
            ("operator.coefficients", coefficients.is_some()),
            ("margin", margin.is_some()),
            ("compatibility", compatibility.is_some()),
        ] {
            if set {
                return Err(ConfigError::Conflict(format!("`{key}` only applies to custom problems")));
            }
        }
    }

    let mode = match r.string("solver.mode")?.as_deref() {
        None | Some("signorini") => ModeChoice::Signorini,
        Some("penalized") => ModeChoice::Penalized,
        Some("neumann") => ModeChoice::Neumann,
        Some(other) => return Err(r.range("solver.mode", format!("`{other}`; expected signorini, penalized or neumann"))),
    };
    let scheme = match r.string("solver.scheme")?.as_deref() {
        None | Some("explicit") => Scheme::Explicit,
        Some("implicit_sweep") => Scheme::ImplicitSweep,
        Some(other) => return Err(r.range("solver.scheme", format!("`{other}`; expected explicit or implicit_sweep"))),
    };
    let sweep_order = match r.string("solver.sweep_order")?.as_deref() {
        None | Some("forward") => SweepOrder::Forward,
        Some("reverse") => SweepOrder::Reverse,
        Some(other) => return Err(r.range("solver.sweep_order", format!("`{other}`; expected forward or reverse"))),
    };
    let defaults = SolverConfig::default();
    let theta = r.positive("solver.theta")?.unwrap_or(defaults.theta_cfl);
    if theta > 1.0 {
        return Err(r.range("solver.theta", format!("{theta} must lie in (0, 1]")));
    }
    let solver = SolverSection {
        mode,
        scheme,
        theta,
        tol_sweep: r.positive("solver.tol_sweep")?.unwrap_or(defaults.tol_sweep),
        max_sweeps: r.usize("solver.max_sweeps")?.unwrap_or(defaults.max_sweeps),
        sweep_order,
        store_every: r.usize("solver.store_every")?,
        penalty_k: match r.f64("solver.penalty_k")? {
            Some(k) if !(k >= 0.0 && k.is_finite()) => {
                return Err(r.range("solver.penalty_k", format!("{k} must be non-negative")))
            }
            k => k.unwrap_or(0.0),
        },
    };
    if solver.max_sweeps == 0 {
        return Err(r.range("solver.max_sweeps", "0 must be at least 1".into()));
    }
    if solver.store_every == Some(0) {
        return Err(r.range("solver.store_every", "0 must be at least 1".into()));
    }

    let penalty_schedule = r.list("penalty.schedule")?.unwrap_or_default();
    if let Some(k) = penalty_schedule.iter().find(|&&k| !(k > 0.0 && k.is_finite())) {
        return Err(r.range("penalty.schedule", format!("{k} must be positive")));
    }
    let sweep_h = r.list("sweep.h")?.unwrap_or_default();
    if let Some(x) = sweep_h.iter().find(|&&x| !(x > 0.0 && x <= 1.0 && ((1.0 / x) - (1.0 / x).round()).abs() < 1e-9 / x)) {
        return Err(r.range("sweep.h", format!("{x} must be 1/N for an integer N")));
    }

    let mut verify = VerifySection::default();
    if let Some(names) = r.strings("verify.checks")? {
        let mut checks = Vec::with_capacity(names.len());
        for name in names {
            let c = CheckName::from_name(&name).ok_or_else(|| {
                let known: Vec<&str> = CheckName::ALL.iter().map(|c| c.name()).collect();
                r.range("verify.checks", format!("unknown check `{name}`; expected one of {}", known.join(", ")))
            })?;
            if !checks.contains(&c) {
                checks.push(c);
            }
        }
        verify.checks = checks;
    }
    verify.sigma_tol = r.positive("verify.sigma_tol")?;
    verify.complementarity_tol = r.positive("verify.complementarity_tol")?;
    verify.tol_contact = match r.f64("verify.tol_contact")? {
        Some(t) if !(t >= 0.0) => return Err(r.range("verify.tol_contact", format!("{t} must be non-negative"))),
        t => t,
    };
    if let Some(t) = r.f64("verify.fit_tol_contact")? {
        if !(t >= 0.0) {
            return Err(r.range("verify.fit_tol_contact", format!("{t} must be non-negative")));
        }
        verify.fit_tol_contact = t;
    }
    verify.radii = r.list("verify.radii")?;
    if let Some(radii) = &verify.radii {
        if radii.len() < 2 || radii.iter().any(|&x| !(x > 0.0)) {
            return Err(r.range("verify.radii", "at least two positive radii are needed".into()));
        }
    }
    if let Some(a) = r.f64("verify.alpha_min")? {
        verify.alpha_min = a;
    }
    verify.alpha_max = r.f64("verify.alpha_max")?;
    if let Some(hi) = verify.alpha_max {
        if hi < verify.alpha_min {
            return Err(r.range("verify.alpha_max", format!("{hi} is below alpha_min = {}", verify.alpha_min)));
        }
    }
    if let Some(x) = r.f64("verify.r2_min")? {
        if !(0.0..=1.0).contains(&x) {
            return Err(r.range("verify.r2_min", format!("{x} must lie in [0, 1]")));
        }
        verify.r2_min = x;
    }
    if let Some(d) = r.f64("verify.delta")? {
        if !(d > 0.0 && d <= 0.5) {
            return Err(r.range("verify.delta", format!("{d} must lie in (0, 1/2]")));
        }
        verify.delta = d;
    }
    verify.ladder = r.list("verify.ladder")?.unwrap_or_default();
    if let Some(x) = verify.ladder.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(r.range("verify.ladder", format!("{x} must lie in (0, 1]")));
    }
    if let Some(x) = r.positive("verify.ladder_variation_max")? {
        verify.ladder_variation_max = x;
    }
    if let Some(x) = r.positive("verify.ladder_growth_min")? {
        verify.ladder_growth_min = x;
    }
    if let Some(b) = r.usize("verify.barrier_boxes")? {
        verify.barrier_boxes = b;
    }
    if let Some(c) = r.positive("verify.barrier_c0_factor")? {
        if c <= 1.0 {
            return Err(r.range("verify.barrier_c0_factor", format!("{c} must exceed 1")));
        }
        verify.barrier_c0_factor = c;
    }
    verify.barrier_x = r.list("verify.barrier_x")?;
    if let Some(x) = &verify.barrier_x {
        if x.len() != n - 1 || x.iter().any(|v| !(v.abs() < 1.0)) {
            return Err(r.range("verify.barrier_x", format!("expected {} coordinates inside (-1, 1)", n - 1)));
        }
    }
    if let Some(t) = r.positive("verify.oracle_tol")? {
        verify.oracle_tol = t;
    }
    verify.negative_control = r.bool("verify.negative_control")?.unwrap_or(false);

    let seed = match r.take("seed") {
        None => 0,
        Some(Value::Integer(i)) if i >= 0 => i as u64,
        Some(_) => return Err(r.range("seed", "must be a non-negative integer".into())),
    };
    let output_dir = PathBuf::from(r.string("output.dir")?.unwrap_or_else(|| "out".into()));

    debug_assert!(r.values.is_empty(), "key table and reader out of sync: {:?}", r.values.keys());
    Ok(RunConfig {
        problem,
        grid: GridConfig { n, h, dt, t_start, t_end },
        solver,
        penalty_schedule,
        sweep_h,
        verify,
        seed,
        output_dir,
    })
}

fn float_array(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| Value::Float(x)).collect())
}

fn rows_array(rows: &[Vec<f64>]) -> Value {
    Value::Array(rows.iter().map(|r| float_array(r)).collect())
}

/// Flat dotted-key rendering; `parse_config(&render_config(c)) == c`.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut put = |key: &str, v: Value| {
        let _ = writeln!(out, "{key} = {v}");
    };
    match &cfg.problem {
        ProblemSource::BuiltIn(b) => put("problem", Value::String(b.name().into())),
        ProblemSource::Custom(c) => {
            put("operator.kind", Value::String(c.operator.kind.name().into()));
            put("operator.lambda", Value::Float(c.operator.lambda));
            put("operator.Lambda", Value::Float(c.operator.big_lambda));
            if !c.operator.coefficients.is_empty() {
                put("operator.coefficients", rows_array(&c.operator.coefficients));
            }
            put("obstacle.poly", rows_array(&c.obstacle));
            put("boundary.poly", rows_array(&c.boundary));
            put("margin", Value::Float(c.margin));
            put("compatibility", Value::String(if c.relaxed { "relaxed" } else { "strict" }.into()));
        }
    }
    put("seed", Value::Integer(cfg.seed as i64));
    put("output.dir", Value::String(cfg.output_dir.to_string_lossy().into_owned()));
    put("grid.n", Value::Integer(cfg.grid.n as i64));
    put("grid.h", Value::Float(cfg.grid.h));
    if let Some(dt) = cfg.grid.dt {
        put("grid.dt", Value::Float(dt));
    }
    put("grid.t_start", Value::Float(cfg.grid.t_start));
    put("grid.t_end", Value::Float(cfg.grid.t_end));
    let s = &cfg.solver;
    put("solver.mode", Value::String(mode_name(s.mode).into()));
    put("solver.scheme", Value::String(scheme_name(s.scheme).into()));
    put("solver.theta", Value::Float(s.theta));
    put("solver.tol_sweep", Value::Float(s.tol_sweep));
    put("solver.max_sweeps", Value::Integer(s.max_sweeps as i64));
    put("solver.sweep_order", Value::String(order_name(s.sweep_order).into()));
    if let Some(k) = s.store_every {
        put("solver.store_every", Value::Integer(k as i64));
    }
    put("solver.penalty_k", Value::Float(s.penalty_k));
    put("penalty.schedule", float_array(&cfg.penalty_schedule));
    put("sweep.h", float_array(&cfg.sweep_h));
    let v = &cfg.verify;
    put("verify.checks", Value::Array(v.checks.iter().map(|c| Value::String(c.name().into())).collect()));
    for (key, x) in [
        ("verify.sigma_tol", v.sigma_tol),
        ("verify.complementarity_tol", v.complementarity_tol),
        ("verify.tol_contact", v.tol_contact),
        ("verify.alpha_max", v.alpha_max),
    ] {
        if let Some(x) = x {
            put(key, Value::Float(x));
        }
    }
    put("verify.fit_tol_contact", Value::Float(v.fit_tol_contact));
    if let Some(radii) = &v.radii {
        put("verify.radii", float_array(radii));
    }
    put("verify.alpha_min", Value::Float(v.alpha_min));
    put("verify.r2_min", Value::Float(v.r2_min));
    put("verify.delta", Value::Float(v.delta));
    put("verify.ladder", float_array(&v.ladder));
    put("verify.ladder_variation_max", Value::Float(v.ladder_variation_max));
    put("verify.ladder_growth_min", Value::Float(v.ladder_growth_min));
    put("verify.barrier_boxes", Value::Integer(v.barrier_boxes as i64));
    put("verify.barrier_c0_factor", Value::Float(v.barrier_c0_factor));
    if let Some(x) = &v.barrier_x {
        put("verify.barrier_x", float_array(x));
    }
    put("verify.oracle_tol", Value::Float(v.oracle_tol));
    put("verify.negative_control", Value::Boolean(v.negative_control));
    out
}

impl RunConfig {
    pub fn operator(&self) -> Result<EllipticOperator, ProblemError> {
        let n = self.grid.n;
        match &self.problem {
            ProblemSource::BuiltIn(b) => Ok(b.operator(n)),
            ProblemSource::Custom(c) => {
                let o = &c.operator;
                let pair = EllipticityPair::new(o.lambda, o.big_lambda)?;
                Ok(match o.kind {
                    OperatorKind::Trace => EllipticOperator::trace(n),
                    OperatorKind::PucciMinus => EllipticOperator::pucci_minus(n, pair),
                    OperatorKind::PucciPlus => EllipticOperator::pucci_plus(n, pair),
                    OperatorKind::MaxLinear => EllipticOperator::max_linear(pair, &o.coefficients)?,
                })
            }
        }
    }

    /// Grid at mesh width `h`, with the configured step or the largest stable
    /// explicit one.
    pub fn grid_spec(&self, h: f64) -> Result<GridSpec, ProblemError> {
        let g = &self.grid;
        match g.dt {
            Some(dt) => Ok(GridSpec::new(g.n, h, dt, g.t_start, g.t_end)?),
            None => explicit_grid(&self.operator()?, g.n, h, g.t_start, g.t_end, self.solver.theta),
        }
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec, ProblemError> {
        self.problem_spec_at(self.grid.h)
    }

    pub fn problem_spec_at(&self, h: f64) -> Result<ProblemSpec, ProblemError> {
        let grid = self.grid_spec(h)?;
        match &self.problem {
            ProblemSource::BuiltIn(b) => b.spec_on(grid),
            ProblemSource::Custom(c) => {
                let n = self.grid.n;
                Ok(ProblemSpec {
                    name: "custom".into(),
                    operator: self.operator()?,
                    obstacle: Arc::new(PolyObstacle::new(Polynomial::from_table(n, &c.obstacle)?)),
                    boundary: Arc::new(PolyBoundary(Polynomial::from_table(n + 1, &c.boundary)?)),
                    grid,
                    margin: c.margin,
                    compatibility: if c.relaxed { CompatibilityPolicy::Relaxed } else { CompatibilityPolicy::Strict },
                    exact: None,
                })
            }
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            scheme: s.scheme,
            theta_cfl: s.theta,
            tol_sweep: s.tol_sweep,
            max_sweeps: s.max_sweeps,
            penalty_k: s.penalty_k,
            sweep_order: s.sweep_order,
            store_every: s.store_every,
        }
    }
}
