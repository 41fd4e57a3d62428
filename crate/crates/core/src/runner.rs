//! Run orchestration: `solve`, `verify`, `sweep` and `oracle-compare`.
//!
//! Every run writes its artifacts into the configured output directory and
//! finishes with `manifest.toml`, which lists each file with its SHA-256
//! digest and the pass/fail outcome of every enabled check.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    barrier_h_check, barrier_threshold, check_sigma_nonpositive, complementarity_residual, compute_sigma,
    decompose_contact, default_sigma_tol, default_tol_contact, fit_sigma_decay, fit_u_decay, gamma_adjacent_max_uyy,
    reflection_check, select_free_boundary_point, semiconcavity_ladder, semiconcavity_report, AnalysisError,
    BarrierReport, ContactDecomposition, FitStatus, LadderSummary, PenaltyRow, ReflectionReport, RegularityReport,
    SemiconcavityExtrema, SigmaField,
};
use crate::config::{render_config, CheckName, ConfigError, ModeChoice, RunConfig};
use crate::geometry::{Node, NodeKind};
use crate::operators::check_structural_assumptions;
use crate::problem::{validate_compatibility, ProblemError, ProblemSpec};
use crate::solvers::{
    brute_force_oracle, solve_neumann, solve_penalized, solve_signorini, zero_flux, SolveMode, SolveResult,
    SolverConfig, SolverError, SpaceTimeField,
};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("problem setup failed: {0}")]
    Problem(#[from] ProblemError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("analysis failed: {0}")]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("could not render {what}: {message}")]
    Render { what: &'static str, message: String },
    #[error("{0} schedule is empty")]
    EmptySchedule(&'static str),
    #[error("manifest entry {name}: {problem}")]
    Manifest { name: String, problem: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    PenaltyK,
    MeshH,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Passed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        let status = if passed { CheckStatus::Passed } else { CheckStatus::Failed };
        Self { name: name.into(), status, detail }
    }

    fn skipped(name: &str, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: CheckStatus::Skipped, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub wall_clock_seconds: f64,
    pub all_passed: bool,
    pub config: String,
    pub files: Vec<FileEntry>,
    pub checks: Vec<CheckOutcome>,
}

impl RunManifest {
    pub fn render(&self) -> Result<String, RunError> {
        toml::to_string(self).map_err(|e| RunError::Render { what: "manifest", message: e.to_string() })
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Failed).map(|c| c.name.as_str()).collect()
    }

    /// Every listed file exists under `dir` with the recorded digest.
    pub fn verify_files(&self, dir: &Path) -> Result<(), RunError> {
        for f in &self.files {
            let path = dir.join(&f.name);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let digest = hex(&Sha256::digest(&bytes));
            if digest != f.sha256 || bytes.len() as u64 != f.bytes {
                return Err(RunError::Manifest { name: f.name.clone(), problem: "digest mismatch".into() });
            }
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects written files; the manifest is written last.
struct Output {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write_with(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        drop(w);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.files.push(FileEntry { name: name.into(), sha256: hex(&Sha256::digest(&bytes)), bytes: bytes.len() as u64 });
        Ok(())
    }

    fn write_str(&mut self, name: &str, text: &str) -> Result<(), RunError> {
        self.write_with(name, |w| w.write_all(text.as_bytes()))
    }

    fn finish(self, command: &str, cfg: &RunConfig, start: Instant, checks: Vec<CheckOutcome>) -> Result<RunManifest, RunError> {
        let manifest = RunManifest {
            command: command.into(),
            artifact_version: ARTIFACT_VERSION.into(),
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            all_passed: checks.iter().all(|c| c.status != CheckStatus::Failed),
            config: render_config(cfg),
            files: self.files,
            checks,
        };
        let path = self.dir.join("manifest.toml");
        fs::write(&path, manifest.render()?).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

fn coord_header(n: usize) -> String {
    (1..n).map(|a| format!("x{a},")).collect()
}

fn write_coords(w: &mut dyn Write, x: &[f64]) -> io::Result<()> {
    for v in x {
        write!(w, "{v:.16e},")?;
    }
    Ok(())
}

fn write_field(out: &mut Output, name: &str, field: &SpaceTimeField) -> Result<(), RunError> {
    let grid = field.grid();
    let n1 = grid.dim() - 1;
    out.write_with(name, |w| {
        writeln!(w, "{}y,t,u", coord_header(grid.dim()))?;
        for level in 0..grid.levels() {
            let t = grid.time(level);
            let u = field.slice(level);
            for (site, v) in u.iter().enumerate() {
                write_coords(w, &grid.site_x(site)[..n1])?;
                writeln!(w, "{:.16e},{t:.16e},{v:.16e}", grid.site_y(site))?;
            }
        }
        Ok(())
    })
}

fn write_sigma(out: &mut Output, sigma: &SigmaField) -> Result<(), RunError> {
    let grid = sigma.grid();
    let n1 = grid.dim() - 1;
    out.write_with("sigma.csv", |w| {
        writeln!(w, "{}t,sigma", coord_header(grid.dim()))?;
        for (node, s) in sigma.iter() {
            write_coords(w, &grid.site_x(node.site)[..n1])?;
            writeln!(w, "{:.16e},{s:.16e}", grid.time(node.level))?;
        }
        Ok(())
    })
}

fn write_contact(out: &mut Output, result: &SolveResult, decomp: &ContactDecomposition) -> Result<(), RunError> {
    let grid = result.grid();
    let n1 = grid.dim() - 1;
    out.write_with("contact.csv", |w| {
        writeln!(w, "{}t,u_minus_phi,flux,contact,free_boundary", coord_header(grid.dim()))?;
        for level in 1..grid.levels() {
            for (k, &site) in grid.thin_sites().iter().enumerate() {
                write_coords(w, &grid.site_x(site)[..n1])?;
                let gap = result.thin_value(level, k) - result.obstacle_at(level, k);
                writeln!(
                    w,
                    "{:.16e},{gap:.16e},{:.16e},{},{}",
                    grid.time(level),
                    result.flux_at(level, k),
                    u8::from(decomp.is_contact(level, k)),
                    u8::from(decomp.is_gamma(level, k)),
                )?;
            }
        }
        Ok(())
    })
}

fn write_toml<T: Serialize>(out: &mut Output, name: &str, what: &'static str, value: &T) -> Result<(), RunError> {
    let text = toml::to_string(value).map_err(|e| RunError::Render { what, message: e.to_string() })?;
    out.write_str(name, &text)
}

fn solve_mode(spec: &ProblemSpec, cfg: &RunConfig, mode: ModeChoice) -> Result<SolveResult, RunError> {
    let solver = cfg.solver_config();
    Ok(match mode {
        ModeChoice::Signorini => solve_signorini(spec, &solver)?,
        ModeChoice::Penalized => solve_penalized(spec, cfg.solver.penalty_k, &solver)?,
        ModeChoice::Neumann => solve_neumann(spec, &zero_flux, &solver)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSummary {
    pub problem: String,
    pub mode: String,
    pub n: usize,
    pub h: f64,
    pub march_dt: f64,
    pub steps: usize,
    pub store_every: usize,
    pub stored_levels: usize,
    pub compatibility_min_margin: f64,
    pub max_iterations: usize,
    pub sigma_max: f64,
    pub contact_nodes: usize,
    pub free_boundary_nodes: usize,
}

fn mode_label(mode: SolveMode) -> String {
    match mode {
        SolveMode::Neumann => "neumann".into(),
        SolveMode::Penalized { k } => format!("penalized(k={k})"),
        SolveMode::Signorini => "signorini".into(),
    }
}

fn summarize(result: &SolveResult, sigma: &SigmaField, decomp: &ContactDecomposition) -> Result<SolveSummary, RunError> {
    let grid = result.grid();
    Ok(SolveSummary {
        problem: result.problem.name.clone(),
        mode: mode_label(result.mode),
        n: grid.dim(),
        h: grid.h(),
        march_dt: result.march_dt,
        steps: result.iterations.len(),
        store_every: result.store_every,
        stored_levels: grid.levels(),
        compatibility_min_margin: validate_compatibility(&result.problem)?.min_ring_margin,
        max_iterations: result.iterations.iter().copied().max().unwrap_or(0),
        sigma_max: sigma.max(),
        contact_nodes: decomp.contact_count(),
        free_boundary_nodes: decomp.gamma_count(),
    })
}

/// Solve the configured problem and write the field, `sigma`, the contact
/// decomposition and a summary report.
pub fn run_solve(cfg: &RunConfig) -> Result<RunManifest, RunError> {
    let start = Instant::now();
    let spec = cfg.problem_spec()?;
    let result = solve_mode(&spec, cfg, cfg.solver.mode)?;
    let sigma = compute_sigma(&result)?;
    let h = result.grid().h();
    let decomp = decompose_contact(&result, cfg.verify.tol_contact.unwrap_or_else(|| default_tol_contact(h)));
    let mut out = Output::new(&cfg.output_dir)?;
    write_field(&mut out, "field.csv", &result.field)?;
    write_sigma(&mut out, &sigma)?;
    write_contact(&mut out, &result, &decomp)?;
    let summary = summarize(&result, &sigma, &decomp)?;
    write_toml(&mut out, "report.toml", "report", &SolveReport { summary })?;
    out.finish("solve", cfg, start, Vec::new())
}

#[derive(Serialize)]
struct SolveReport {
    summary: SolveSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralSummary {
    pub samples: usize,
    pub seed: u64,
    pub convexity_violation: Option<f64>,
    pub reflection_violation: f64,
    pub ellipticity_violation: f64,
}

/// Everything `verify` measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub summary: SolveSummary,
    pub checks: Vec<CheckOutcome>,
    pub regularity: RegularityReport,
    pub structural: StructuralSummary,
    pub reflection: Option<ReflectionReport>,
    pub barrier: Option<BarrierReport>,
    pub ladder: Option<LadderSummary>,
}

struct VerifyContext<'a> {
    cfg: &'a RunConfig,
    result: SolveResult,
    sigma: SigmaField,
    decomp: ContactDecomposition,
}

impl VerifyContext<'_> {
    fn h(&self) -> f64 {
        self.result.grid().h()
    }
}

/// Run the solve, then every enabled check. Checks are reported in a fixed
/// order whatever order they were requested in.
pub fn run_verify(cfg: &RunConfig) -> Result<(RunManifest, VerifyReport), RunError> {
    let start = Instant::now();
    let spec = cfg.problem_spec()?;
    let result = solve_mode(&spec, cfg, cfg.solver.mode)?;
    let sigma = compute_sigma(&result)?;
    let h = result.grid().h();
    let decomp = decompose_contact(&result, cfg.verify.tol_contact.unwrap_or_else(|| default_tol_contact(h)));
    let ctx = VerifyContext { cfg, result, sigma, decomp };

    let mut out = Output::new(&cfg.output_dir)?;
    write_field(&mut out, "field.csv", &ctx.result.field)?;
    write_sigma(&mut out, &ctx.sigma)?;
    write_contact(&mut out, &ctx.result, &ctx.decomp)?;

    let structural = check_structural_assumptions(&spec.operator, 256, cfg.seed);
    let mut report = VerifyReport {
        summary: summarize(&ctx.result, &ctx.sigma, &ctx.decomp)?,
        checks: Vec::new(),
        regularity: RegularityReport::default(),
        structural: StructuralSummary {
            samples: structural.samples,
            seed: structural.seed,
            convexity_violation: structural.convexity_violation,
            reflection_violation: structural.reflection_violation,
            ellipticity_violation: structural.ellipticity_violation,
        },
        reflection: None,
        barrier: None,
        ladder: None,
    };

    let mut enabled = cfg.verify.checks.clone();
    enabled.sort();
    for check in enabled {
        let outcome = match check {
            CheckName::SigmaNonpositive => check_sigma(&ctx, &mut report),
            CheckName::Complementarity => check_complementarity(&ctx, &mut report),
            CheckName::Semiconcavity => check_semiconcavity(&ctx, &mut report, &mut out)?,
            CheckName::Reflection => check_reflection(&ctx, &mut report)?,
            CheckName::Barrier => check_barrier(&ctx, &mut report, &mut out)?,
            CheckName::DecayFit => check_decay(&ctx, &mut report, &mut out)?,
            CheckName::PenaltyConvergence => check_penalty(&ctx, &mut report, &mut out)?,
        };
        report.checks.push(outcome);
    }

    out.write_with("checks.csv", |w| {
        writeln!(w, "check,status,detail")?;
        for c in &report.checks {
            let status = match c.status {
                CheckStatus::Passed => "passed",
                CheckStatus::Failed => "failed",
                CheckStatus::Skipped => "skipped",
            };
            writeln!(w, "{},{status},\"{}\"", c.name, c.detail.replace('"', "'"))?;
        }
        Ok(())
    })?;
    write_toml(&mut out, "report.toml", "report", &report)?;
    let manifest = out.finish("verify", cfg, start, report.checks.clone())?;
    Ok((manifest, report))
}

fn check_sigma(ctx: &VerifyContext, report: &mut VerifyReport) -> CheckOutcome {
    let name = CheckName::SigmaNonpositive.name();
    let tol = ctx.cfg.verify.sigma_tol.unwrap_or_else(|| default_sigma_tol(ctx.h()));
    let flipped;
    let sigma = if ctx.cfg.verify.negative_control {
        flipped = ctx.sigma.negated();
        &flipped
    } else {
        &ctx.sigma
    };
    let check = check_sigma_nonpositive(sigma, tol);
    report.regularity.sigma_max = Some(check.max_sigma);
    report.regularity.sigma_tol = Some(tol);
    let control = if ctx.cfg.verify.negative_control { " (negative control: sigma flipped)" } else { "" };
    CheckOutcome::new(name, check.passes, format!("max sigma_h = {:.3e}, tol = {tol:.3e}{control}", check.max_sigma))
}

fn check_complementarity(ctx: &VerifyContext, report: &mut VerifyReport) -> CheckOutcome {
    let name = CheckName::Complementarity.name();
    let tol = ctx.cfg.verify.complementarity_tol.unwrap_or_else(|| default_sigma_tol(ctx.h()));
    let c = complementarity_residual(&ctx.result, &ctx.sigma);
    report.regularity.complementarity_min_residual = Some(c.max_min_residual);
    report.regularity.complementarity_product = Some(c.max_product);
    CheckOutcome::new(
        name,
        c.max_min_residual <= tol,
        format!("max |min(u - phi, -sigma_h)| = {:.3e}, tol = {tol:.3e}", c.max_min_residual),
    )
}

fn semiconcavity_rung(result: &SolveResult, delta: f64, tol_contact: Option<f64>) -> Result<(SemiconcavityExtrema, Option<f64>), RunError> {
    let h = result.grid().h();
    let decomp = decompose_contact(result, tol_contact.unwrap_or_else(|| default_tol_contact(h)));
    Ok((semiconcavity_report(result, delta)?, gamma_adjacent_max_uyy(result, &decomp, delta)?))
}

fn check_semiconcavity(ctx: &VerifyContext, report: &mut VerifyReport, out: &mut Output) -> Result<CheckOutcome, RunError> {
    let name = CheckName::Semiconcavity.name();
    let v = &ctx.cfg.verify;
    let mut rungs = Vec::new();
    if v.ladder.len() < 2 {
        let (e, g) = semiconcavity_rung(&ctx.result, v.delta, v.tol_contact)?;
        rungs.push((ctx.h(), e, g));
    } else {
        let mut ladder = v.ladder.clone();
        ladder.sort_by(|a, b| b.total_cmp(a));
        for &h in &ladder {
            let result = if (h - ctx.h()).abs() < 1e-15 {
                None
            } else {
                Some(solve_mode(&ctx.cfg.problem_spec_at(h)?, ctx.cfg, ctx.cfg.solver.mode)?)
            };
            let (e, g) = semiconcavity_rung(result.as_ref().unwrap_or(&ctx.result), v.delta, v.tol_contact)?;
            rungs.push((h, e, g));
        }
    }
    out.write_with("semiconcavity.csv", |w| {
        writeln!(w, "h,max_first_difference,min_tangential_second,min_time_difference,max_normal_second,free_boundary_max_uyy")?;
        for (h, e, g) in &rungs {
            let g = g.map(|g| format!("{g:.16e}")).unwrap_or_default();
            writeln!(
                w,
                "{h:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{g}",
                e.max_first_difference, e.min_tangential_second, e.min_time_difference, e.max_normal_second
            )?;
        }
        Ok(())
    })?;
    report.regularity.semiconcavity = rungs.iter().find(|(h, _, _)| (*h - ctx.h()).abs() < 1e-15).map(|r| r.1);
    if rungs.len() < 2 {
        let e = &rungs[0].1;
        let finite = [e.max_first_difference, e.min_tangential_second, e.min_time_difference, e.max_normal_second]
            .iter()
            .all(|x| x.is_finite());
        return Ok(CheckOutcome::new(name, finite, "single grid: proxies recorded, no ladder requested".into()));
    }
    let floor = ctx.result.problem.data_constant()?.k;
    let ladder = semiconcavity_ladder(&rungs, floor);
    let worst = [
        ladder.first_difference_variation,
        ladder.tangential_negative_variation,
        ladder.time_negative_variation,
        ladder.normal_positive_variation,
    ]
    .into_iter()
    .fold(0.0f64, f64::max);
    let growth_ok = ladder.gamma_growth.iter().all(|&g| g >= v.ladder_growth_min);
    let growth = if ladder.gamma_growth.is_empty() {
        "no free-boundary growth measured".to_string()
    } else {
        format!("free-boundary u_yy growth {:?} (min {})", ladder.gamma_growth, v.ladder_growth_min)
    };
    let passes = worst <= v.ladder_variation_max && growth_ok;
    let detail = format!("largest proxy variation {worst:.3} (max {}); {growth}", v.ladder_variation_max);
    report.ladder = Some(ladder);
    Ok(CheckOutcome::new(name, passes, detail))
}

fn check_reflection(ctx: &VerifyContext, report: &mut VerifyReport) -> Result<CheckOutcome, RunError> {
    let name = CheckName::Reflection.name();
    if ctx.result.mode == SolveMode::Neumann {
        return Ok(CheckOutcome::skipped(name, "not a thin-obstacle solve"));
    }
    let r = reflection_check(&ctx.result)?;
    let detail = format!("max thin defect {:.3e}, tolerance {:.3e}", r.max_thin_defect, r.tolerance);
    let passes = r.passes;
    report.reflection = Some(r);
    Ok(CheckOutcome::new(name, passes, detail))
}

/// Thin node at the final level, off contact, farthest from the lateral
/// boundary (lowest index on ties), or the node nearest `x` when given.
fn barrier_base(ctx: &VerifyContext) -> Option<Node> {
    let grid = ctx.result.grid();
    let level = grid.levels() - 1;
    let n1 = grid.dim() - 1;
    let gap_tol = default_tol_contact(grid.h());
    let candidates = grid.thin_sites().iter().enumerate().filter(|&(k, _)| {
        ctx.result.thin_value(level, k) - ctx.result.obstacle_at(level, k) > gap_tol
    });
    let best = match &ctx.cfg.verify.barrier_x {
        Some(x0) => candidates
            .map(|(_, &s)| {
                let x = grid.site_x(s);
                let d = (0..n1).map(|a| (x[a] - x0[a]).abs()).fold(0.0, f64::max);
                (d, s)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0)),
        None => candidates
            .map(|(_, &s)| {
                let x = grid.site_x(s);
                let d = (0..n1).map(|a| 1.0 - x[a].abs()).fold(f64::INFINITY, f64::min);
                (-d, s)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0)),
    };
    best.map(|(_, site)| Node { level, site })
}

fn check_barrier(ctx: &VerifyContext, report: &mut VerifyReport, out: &mut Output) -> Result<CheckOutcome, RunError> {
    let name = CheckName::Barrier.name();
    let Some(p0) = barrier_base(ctx) else {
        return Ok(CheckOutcome::skipped(name, "no non-contact thin node at the final level"));
    };
    let v = &ctx.cfg.verify;
    let c0 = barrier_threshold(&ctx.result.problem.operator) * v.barrier_c0_factor;
    let b = barrier_h_check(&ctx.result, p0, c0, v.barrier_boxes, ctx.cfg.seed, 1e-9)?;
    out.write_with("barrier.csv", |w| {
        writeln!(w, "half_width,height,duration,boundary_sup")?;
        for bx in &b.boxes {
            writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e}", bx.half_width, bx.height, bx.duration, bx.sup)?;
        }
        Ok(())
    })?;
    let passes = b.supersolution_holds && b.majorant_holds && b.conclusion_holds;
    let detail = format!(
        "supersolution margin {:.3e} (need <= -{:.3e}), majorant gap {:.3e}, {} boxes, conclusion {}",
        b.supersolution_margin,
        b.k0,
        b.majorant_min_gap,
        b.boxes.len(),
        if b.conclusion_holds { "holds" } else { "fails" }
    );
    report.barrier = Some(b);
    Ok(CheckOutcome::new(name, passes, detail))
}

fn check_decay(ctx: &VerifyContext, report: &mut VerifyReport, out: &mut Output) -> Result<CheckOutcome, RunError> {
    let name = CheckName::DecayFit.name();
    let v = &ctx.cfg.verify;
    let h = ctx.h();
    let radii = v.radii.clone().unwrap_or_else(|| vec![8.0 * h, 16.0 * h, 32.0 * h]);
    let decomp = decompose_contact(&ctx.result, v.fit_tol_contact);
    let level = ctx.result.grid().levels() - 1;
    let skip = |reason: &str, report: &mut VerifyReport| {
        report.regularity.fit_skipped = Some(reason.to_string());
        CheckOutcome::skipped(name, reason)
    };
    if decomp.gamma_at(level).is_empty() {
        return Ok(skip("free boundary is empty at the final level", report));
    }
    let Some(p0) = select_free_boundary_point(&decomp, level, &radii) else {
        return Ok(skip("no free-boundary point at the final level admits every radius", report));
    };
    let u_fit = fit_u_decay(&ctx.result, &decomp, p0, &radii)?;
    let s_fit = fit_sigma_decay(&ctx.sigma, p0, &radii)?;
    out.write_with("decay_fit.csv", |w| {
        writeln!(w, "r,u_deviation,sigma_depth")?;
        for (i, r) in radii.iter().enumerate() {
            writeln!(w, "{r:.16e},{:.16e},{:.16e}", u_fit.deviation[i], s_fit.depth[i])?;
        }
        Ok(())
    })?;
    let (passes, detail) = match (u_fit.status, u_fit.alpha, u_fit.r2) {
        (FitStatus::Fitted, Some(a), Some(r2)) => {
            let in_range = a >= v.alpha_min && v.alpha_max.is_none_or(|hi| a <= hi);
            (in_range && r2 >= v.r2_min, format!("alpha_u = {a:.4} with R^2 = {r2:.5}, alpha_sigma = {:?}", s_fit.alpha))
        }
        (status, _, _) => (false, format!("no exponent: {status:?}")),
    };
    report.regularity.u_fit = Some(u_fit);
    report.regularity.sigma_fit = Some(s_fit);
    Ok(CheckOutcome::new(name, passes, detail))
}

fn flux_sup(result: &SolveResult) -> f64 {
    result.flux.iter().fold(0.0f64, |m, g| m.max(g.abs()))
}

/// Penalized solves against the Signorini reference, in increasing `k`, and
/// the distance between the last two penalized fields.
fn penalty_rows(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    reference: &SolveResult,
) -> Result<(Vec<PenaltyRow>, Option<f64>), RunError> {
    let mut ks = cfg.penalty_schedule.clone();
    ks.sort_by(f64::total_cmp);
    let solver = cfg.solver_config();
    let mut rows = Vec::with_capacity(ks.len());
    let mut last: Option<SpaceTimeField> = None;
    let mut last_pair = None;
    for k in ks {
        let r = solve_penalized(spec, k, &solver)?;
        rows.push(PenaltyRow { k, sup_difference: r.field.sup_difference(&reference.field)?, flux_sup: flux_sup(&r) });
        if let Some(prev) = &last {
            last_pair = Some(r.field.sup_difference(prev)?);
        }
        last = Some(r.field);
    }
    Ok((rows, last_pair))
}

fn write_penalty(out: &mut Output, name: &str, rows: &[PenaltyRow]) -> Result<(), RunError> {
    out.write_with(name, |w| {
        writeln!(w, "k,sup_difference,flux_sup")?;
        for r in rows {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", r.k, r.sup_difference, r.flux_sup)?;
        }
        Ok(())
    })
}

fn check_penalty(ctx: &VerifyContext, report: &mut VerifyReport, out: &mut Output) -> Result<CheckOutcome, RunError> {
    let name = CheckName::PenaltyConvergence.name();
    if ctx.cfg.penalty_schedule.is_empty() {
        return Ok(CheckOutcome::skipped(name, "penalty schedule is empty"));
    }
    let spec = &ctx.result.problem;
    let own;
    let reference = if ctx.result.mode == SolveMode::Signorini {
        &ctx.result
    } else {
        own = solve_signorini(spec, &ctx.cfg.solver_config())?;
        &own
    };
    let (rows, last_pair) = penalty_rows(ctx.cfg, spec, reference)?;
    write_penalty(out, "penalty.csv", &rows)?;
    let (passes, detail) = penalty_verdict(&rows, flux_sup(reference), last_pair);
    report.regularity.penalty_history = rows;
    Ok(CheckOutcome::new(name, passes, detail))
}

/// Strictly decreasing distance to the reference; final distance within 10x
/// the `O(1/k)` extrapolation `|u^(k_m) - u^(k_{m-1})| k_{m-1} / (k_m - k_{m-1})`;
/// flux sup-norms within 1.5x the Signorini flux.
pub fn penalty_verdict(rows: &[PenaltyRow], reference_flux: f64, last_pair: Option<f64>) -> (bool, String) {
    let decreasing = rows.windows(2).all(|w| w[1].sup_difference < w[0].sup_difference);
    let flux_bound = 1.5 * reference_flux.max(f64::MIN_POSITIVE);
    let flux_max = rows.iter().fold(0.0f64, |m, r| m.max(r.flux_sup));
    let mut detail = format!(
        "distances {:?}; {}; flux sup {flux_max:.3e} vs bound {flux_bound:.3e}",
        rows.iter().map(|r| format!("{:.3e}", r.sup_difference)).collect::<Vec<_>>(),
        if decreasing { "strictly decreasing" } else { "not strictly decreasing" }
    );
    let mut extrapolation_ok = true;
    if let ([.., prev, last], Some(diff)) = (rows, last_pair) {
        let estimate = diff * prev.k / (last.k - prev.k);
        extrapolation_ok = last.sup_difference <= 10.0 * estimate;
        detail.push_str(&format!("; final {:.3e} vs extrapolated {estimate:.3e}", last.sup_difference));
    }
    (decreasing && extrapolation_ok && flux_max <= flux_bound, detail)
}

/// Convergence table along one axis.
pub fn run_sweep(cfg: &RunConfig, axis: SweepAxis) -> Result<RunManifest, RunError> {
    let start = Instant::now();
    let mut out = Output::new(&cfg.output_dir)?;
    match axis {
        SweepAxis::PenaltyK => {
            if cfg.penalty_schedule.is_empty() {
                return Err(RunError::EmptySchedule("penalty.schedule"));
            }
            let spec = cfg.problem_spec()?;
            let reference = solve_signorini(&spec, &cfg.solver_config())?;
            let (rows, _) = penalty_rows(cfg, &spec, &reference)?;
            write_penalty(&mut out, "convergence.csv", &rows)?;
        }
        SweepAxis::MeshH => {
            if cfg.sweep_h.is_empty() {
                return Err(RunError::EmptySchedule("sweep.h"));
            }
            let rows = mesh_rows(cfg)?;
            out.write_with("convergence.csv", |w| {
                writeln!(w, "h,sup_difference,observed_order")?;
                for (i, (h, e)) in rows.iter().enumerate() {
                    let order = if i == 0 {
                        String::new()
                    } else {
                        let (hp, ep) = rows[i - 1];
                        format!("{:.6e}", (ep / e).ln() / (hp / h).ln())
                    };
                    writeln!(w, "{h:.16e},{e:.16e},{order}")?;
                }
                Ok(())
            })?;
        }
    }
    out.finish("sweep", cfg, start, Vec::new())
}

/// `(h, error)` in decreasing `h`: against the exact solution over every
/// stored node when one is known, otherwise against the finest run on the
/// final slice at shared nodes.
fn mesh_rows(cfg: &RunConfig) -> Result<Vec<(f64, f64)>, RunError> {
    let mut hs = cfg.sweep_h.clone();
    hs.sort_by(|a, b| b.total_cmp(a));
    let mut results = Vec::with_capacity(hs.len());
    for &h in &hs {
        let spec = cfg.problem_spec_at(h)?;
        results.push(solve_mode(&spec, cfg, cfg.solver.mode)?);
    }
    let finest = results.last().expect("nonempty schedule");
    let mut rows = Vec::with_capacity(hs.len());
    for (h, r) in hs.iter().zip(&results) {
        let grid = r.grid();
        let n1 = grid.dim() - 1;
        let err = match &r.problem.exact {
            Some(exact) => {
                let mut e = 0.0f64;
                for node in grid.nodes() {
                    let x = grid.site_x(node.site);
                    let v = exact.value(&x[..n1], grid.site_y(node.site), grid.time(node.level));
                    e = e.max((r.field.value(node) - v).abs());
                }
                e
            }
            None => final_slice_difference(r, finest),
        };
        rows.push((*h, err));
    }
    Ok(rows)
}

fn final_slice_difference(coarse: &SolveResult, fine: &SolveResult) -> f64 {
    let (gc, gf) = (coarse.grid(), fine.grid());
    let ratio = (gc.h() / gf.h()).round() as usize;
    let (uc, uf) = (coarse.field.slice(gc.levels() - 1), fine.field.slice(gf.levels() - 1));
    let n1 = gc.dim() - 1;
    let mut e = 0.0f64;
    for site in 0..gc.sites() {
        let i = gc.site_i(site);
        let fi: Vec<usize> = (0..n1).map(|a| i[a] * ratio).collect();
        let fs = gf.site_from_indices(&fi, gc.site_j(site) * ratio);
        e = e.max((uc[site] - uf[fs]).abs());
    }
    e
}

/// Marching Signorini solve against the brute-force oracle, both storing
/// every level.
pub fn run_oracle_compare(cfg: &RunConfig) -> Result<RunManifest, RunError> {
    let start = Instant::now();
    let spec = cfg.problem_spec()?;
    let solver = SolverConfig { store_every: Some(1), ..cfg.solver_config() };
    let marched = solve_signorini(&spec, &solver)?;
    let oracle = brute_force_oracle(&spec, &solver)?;
    let diff = marched.field.sup_difference(&oracle)?;
    let grid = marched.grid();
    let thin = grid.thin_sites().len();
    let unknowns = (0..grid.sites())
        .filter(|&s| matches!(grid.site_kind(s), NodeKind::Interior | NodeKind::ThinBoundary))
        .count();
    let mut out = Output::new(&cfg.output_dir)?;
    write_field(&mut out, "oracle_field.csv", &oracle)?;
    out.write_with("oracle.csv", |w| {
        writeln!(w, "h,dt,steps,thin_nodes,unknowns,sup_difference")?;
        writeln!(w, "{:.16e},{:.16e},{},{thin},{unknowns},{diff:.16e}", grid.h(), grid.dt(), grid.levels() - 1)
    })?;
    let tol = cfg.verify.oracle_tol;
    let check = CheckOutcome::new(
        "oracle_equivalence",
        diff <= tol,
        format!("sup |u_marched - u_oracle| = {diff:.3e}, tol = {tol:.1e}"),
    );
    out.finish("oracle-compare", cfg, start, vec![check])
}
