//! Time-marching finite-difference solvers.
//!
//! Every solver shares one discretization: centered second differences in
//! space, first-order steps in time, and a ghost layer `u(x, -h) = u(x, h) - 2h g`
//! below each thin node, where `g` is the normal flux. Tangential-normal mixed
//! differences vanish on the thin face (the ghost layer is an even reflection
//! up to the flux term), so the thin equations only see `g` through `u_yy`.
//!
//! The three thin-face rules are
//! * a prescribed flux `g` (Neumann),
//! * the penalty flux `g = -k (phi - u)^+`, solved implicitly per node,
//! * Signorini complementarity: `u >= phi`, `g <= 0`, `g (u - phi) = 0`.

use thiserror::Error;

use crate::geometry::{HalfCylinderGrid, Node, NodeKind, MAX_DIM};
use crate::operators::{EllipticOperator, OperatorError, SymMatrix};
use crate::problem::{validate_compatibility, DataSampler, ProblemError, ProblemSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("explicit time step dt={dt:e} exceeds the stability bound theta*h^2/(2 n Lambda) = {limit:e}")]
    Cfl { dt: f64, limit: f64 },
    #[error("sweeps at step {step} did not converge within {sweeps} sweeps (last update {update:e})")]
    NoConvergence { step: usize, sweeps: usize, update: f64 },
    #[error("non-finite value at step {step}, site {site} (x={x:?}, y={y})")]
    NonFinite { step: usize, site: usize, x: Vec<f64>, y: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("site {site} is a {kind:?} node; the stencil needs an interior or thin node")]
    NotStencilNode { site: usize, kind: NodeKind },
    #[error("slice has {got} values, grid has {expected} sites")]
    SliceLength { got: usize, expected: usize },
    #[error("brute-force oracle is limited to {limit} unknowns per slice, grid has {unknowns}")]
    OracleBudget { unknowns: usize, limit: usize },
    #[error("brute-force oracle found no feasible contact pattern at step {step}")]
    OracleInfeasible { step: usize },
    #[error("fields live on different grids")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Forward Euler under the CFL bound.
    Explicit,
    /// Backward Euler resolved by nonlinear Gauss-Seidel sweeps.
    ImplicitSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOrder {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub theta_cfl: f64,
    pub tol_sweep: f64,
    pub max_sweeps: usize,
    pub penalty_k: f64,
    pub sweep_order: SweepOrder,
    /// Keep every `store_every`-th time level; `None` picks a stride with
    /// stored spacing close to `8 h^2`.
    pub store_every: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Explicit,
            theta_cfl: 0.9,
            tol_sweep: 1e-12,
            max_sweeps: 10_000,
            penalty_k: 0.0,
            sweep_order: SweepOrder::Forward,
            store_every: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.theta_cfl > 0.0 && self.theta_cfl <= 1.0) {
            return Err(SolverError::Config(format!("theta_cfl={} must lie in (0, 1]", self.theta_cfl)));
        }
        if !(self.tol_sweep > 0.0) {
            return Err(SolverError::Config(format!("tol_sweep={} must be positive", self.tol_sweep)));
        }
        if self.max_sweeps == 0 {
            return Err(SolverError::Config("max_sweeps must be at least 1".into()));
        }
        if !(self.penalty_k >= 0.0) || !self.penalty_k.is_finite() {
            return Err(SolverError::Config(format!("penalty k={} must be finite and nonnegative", self.penalty_k)));
        }
        if self.store_every == Some(0) {
            return Err(SolverError::Config("store_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn implicit() -> Self {
        Self { scheme: Scheme::ImplicitSweep, ..Self::default() }
    }
}

/// Largest stable explicit step for `op` at mesh width `h`.
pub fn cfl_limit(op: &EllipticOperator, h: f64, theta: f64) -> f64 {
    theta * h * h / (2.0 * op.dim() as f64 * op.ellipticity().big_lambda())
}

/// Largest divisor of the step count whose stored spacing stays below `8 h^2`.
pub fn auto_store_every(grid: &HalfCylinderGrid) -> usize {
    let steps = grid.levels() - 1;
    let target = ((8.0 * grid.h() * grid.h() / grid.dt()) * (1.0 + 1e-9)).floor().max(1.0) as usize;
    (1..=target.min(steps)).rev().find(|d| steps.is_multiple_of(*d)).unwrap_or(1)
}

/// Nodal values on a (possibly time-coarsened) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: HalfCylinderGrid,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn new(grid: HalfCylinderGrid, values: Vec<f64>) -> Result<Self, SolverError> {
        if values.len() != grid.total_nodes() {
            return Err(SolverError::SliceLength { got: values.len(), expected: grid.total_nodes() });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: HalfCylinderGrid, mut f: impl FnMut(&[f64], f64, f64) -> f64) -> Self {
        let n1 = grid.dim() - 1;
        let mut values = Vec::with_capacity(grid.total_nodes());
        for level in 0..grid.levels() {
            let t = grid.time(level);
            for site in 0..grid.sites() {
                values.push(f(&grid.site_x(site)[..n1], grid.site_y(site), t));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &HalfCylinderGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice(&self, level: usize) -> &[f64] {
        let s = self.grid.sites();
        &self.values[level * s..(level + 1) * s]
    }

    pub fn value(&self, node: Node) -> f64 {
        self.values[self.grid.node_index(node)]
    }

    pub fn sup_difference(&self, other: &Self) -> Result<f64, SolverError> {
        if self.grid != other.grid {
            return Err(SolverError::GridMismatch);
        }
        Ok(self.values.iter().zip(&other.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    Neumann,
    Penalized { k: f64 },
    Signorini,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub problem: ProblemSpec,
    pub mode: SolveMode,
    pub config: SolverConfig,
    pub field: SpaceTimeField,
    /// Normal flux `g` per stored level and thin node, level-major.
    pub flux: Vec<f64>,
    /// `phi` per stored level and thin node, level-major.
    pub obstacle: Vec<f64>,
    /// For each stored level after the first, the march slice one step
    /// earlier, level-major; lets time differences use the march step.
    pub before: Vec<f64>,
    /// Sweeps (implicit) or 1 (explicit) per time step.
    pub iterations: Vec<usize>,
    /// Largest update in the last sweep per time step (0 for explicit steps).
    pub residuals: Vec<f64>,
    pub store_every: usize,
    /// Time step of the march (the field's grid step is `store_every` times this).
    pub march_dt: f64,
}

impl SolveResult {
    pub fn grid(&self) -> &HalfCylinderGrid {
        self.field.grid()
    }

    pub fn thin_count(&self) -> usize {
        self.grid().thin_sites().len()
    }

    pub fn flux_at(&self, level: usize, k: usize) -> f64 {
        self.flux[level * self.thin_count() + k]
    }

    pub fn obstacle_at(&self, level: usize, k: usize) -> f64 {
        self.obstacle[level * self.thin_count() + k]
    }

    /// The march slice one step before stored `level >= 1`.
    pub fn before_slice(&self, level: usize) -> &[f64] {
        let s = self.grid().sites();
        &self.before[(level - 1) * s..level * s]
    }

    /// `u` at the `k`-th thin node of `level`.
    pub fn thin_value(&self, level: usize, k: usize) -> f64 {
        let site = self.grid().thin_sites()[k];
        self.field.value(Node { level, site })
    }
}

/// Centered stencil with the ghost-layer closure on the thin face.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    n: usize,
    stride: [usize; MAX_DIM],
    h: f64,
    inv_h2: f64,
    inv_4h2: f64,
}

impl Stencil {
    pub(crate) fn new(grid: &HalfCylinderGrid) -> Self {
        let mut stride = [0; MAX_DIM];
        for (a, s) in stride.iter_mut().enumerate().take(grid.dim()) {
            *s = grid.stride(a);
        }
        let h = grid.h();
        Self { n: grid.dim(), stride, h, inv_h2: 1.0 / (h * h), inv_4h2: 0.25 / (h * h) }
    }

    /// Difference Hessian at `site` with the center value left out of the
    /// diagonal; `g` is the flux used for the ghost value when `thin`.
    #[inline]
    pub(crate) fn partial(&self, u: &[f64], site: usize, thin: bool, g: f64) -> SymMatrix {
        let nn = self.n - 1;
        let mut m = SymMatrix::zeros(self.n);
        for a in 0..self.n {
            let s = self.stride[a];
            let d = if thin && a == nn { 2.0 * u[site + 1] - 2.0 * self.h * g } else { u[site + s] + u[site - s] };
            m.set(a, a, d * self.inv_h2);
            if thin && a == nn {
                continue;
            }
            for b in 0..a {
                let sb = self.stride[b];
                let v = u[site + s + sb] - u[site + s - sb] - u[site - s + sb] + u[site - s - sb];
                m.set(a, b, v * self.inv_4h2);
            }
        }
        m
    }

    /// Add the center contribution `-2c/h^2` to every diagonal entry.
    #[inline]
    pub(crate) fn with_center(&self, m: &SymMatrix, c: f64) -> SymMatrix {
        let mut out = *m;
        let w = 2.0 * c * self.inv_h2;
        for a in 0..self.n {
            out.set(a, a, m.get(a, a) - w);
        }
        out
    }

    /// Add `w` to the normal second difference.
    #[inline]
    fn add_normal(&self, m: &SymMatrix, w: f64) -> SymMatrix {
        let mut out = *m;
        let nn = self.n - 1;
        out.set(nn, nn, m.get(nn, nn) + w);
        out
    }
}

/// The discrete Hessian `D^2_h u` at an interior or thin site; thin sites use
/// the ghost value `u(x,h) - 2h g`.
pub fn discrete_hessian(grid: &HalfCylinderGrid, slice: &[f64], site: usize, g: f64) -> Result<SymMatrix, SolverError> {
    if slice.len() != grid.sites() {
        return Err(SolverError::SliceLength { got: slice.len(), expected: grid.sites() });
    }
    let kind = grid.site_kind(site);
    let thin = match kind {
        NodeKind::Interior => false,
        NodeKind::ThinBoundary => true,
        _ => return Err(SolverError::NotStencilNode { site, kind }),
    };
    let st = Stencil::new(grid);
    Ok(st.with_center(&st.partial(slice, site, thin, g), slice[site]))
}

/// `F(D^2_h u)` at `site`; thin sites use the even reflection (zero flux).
pub fn discrete_operator_apply(
    op: &EllipticOperator,
    grid: &HalfCylinderGrid,
    slice: &[f64],
    site: usize,
) -> Result<f64, SolverError> {
    let m = discrete_hessian(grid, slice, site, 0.0)?;
    Ok(op.eval(&m)?)
}

/// Root of an increasing function bracketed by `f(lo) <= 0 <= f(hi)`, by the
/// Illinois variant of regula falsi.
pub(crate) fn solve_increasing(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, ftol: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa >= 0.0 {
        return a;
    }
    if fb <= 0.0 {
        return b;
    }
    let mut side = 0i8;
    let mut best = if -fa < fb { a } else { b };
    for _ in 0..200 {
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let fc = f(c);
        best = c;
        if fc.abs() <= ftol {
            break;
        }
        if fc < 0.0 {
            a = c;
            fa = fc;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        if b - a <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
            best = if -fa < fb { a } else { b };
            break;
        }
    }
    best
}

/// Solve `v - base - dt F(D^2(v)) = 0` for the center value `v`, where `m`
/// is the Hessian without the center contribution. The residual has slope
/// at least 1 in `v`, which yields the bracket.
#[inline]
fn implicit_center(op: &EllipticOperator, st: &Stencil, m: &SymMatrix, prev: f64, dt: f64, guess: f64) -> f64 {
    let r = |v: f64| v - prev - dt * op.apply(&st.with_center(m, v));
    let r0 = r(guess);
    if r0 == 0.0 {
        return guess;
    }
    let (lo, hi) = if r0 > 0.0 { (guess - r0, guess) } else { (guess, guess - r0) };
    let ftol = 1e-15 * (1.0 + prev.abs() + guess.abs());
    solve_increasing(r, lo, hi, ftol)
}

/// How the thin face is closed.
#[derive(Clone, Copy)]
enum ThinRule<'a> {
    Flux(&'a dyn Fn(&[f64], f64) -> f64),
    Penalty(f64),
    Signorini,
}

/// Zero flux, for [`solve_neumann`].
pub fn zero_flux(_x: &[f64], _t: f64) -> f64 {
    0.0
}

/// March with the prescribed flux `g(x, t)` on the thin face.
pub fn solve_neumann(
    spec: &ProblemSpec,
    g: &dyn Fn(&[f64], f64) -> f64,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    march(spec, cfg, ThinRule::Flux(g), SolveMode::Neumann)
}

/// March with `u_y = -k (phi - u)^+` on the thin face. `k = 0` runs the
/// zero-flux Neumann march.
pub fn solve_penalized(spec: &ProblemSpec, k: f64, cfg: &SolverConfig) -> Result<SolveResult, SolverError> {
    let cfg = SolverConfig { penalty_k: k, ..*cfg };
    cfg.validate()?;
    if k == 0.0 {
        let mut out = march(spec, &cfg, ThinRule::Flux(&zero_flux), SolveMode::Neumann)?;
        out.mode = SolveMode::Penalized { k };
        return Ok(out);
    }
    march(spec, &cfg, ThinRule::Penalty(k), SolveMode::Penalized { k })
}

/// March with Signorini complementarity on the thin face.
pub fn solve_signorini(spec: &ProblemSpec, cfg: &SolverConfig) -> Result<SolveResult, SolverError> {
    march(spec, cfg, ThinRule::Signorini, SolveMode::Signorini)
}

struct Marcher<'a> {
    op: &'a EllipticOperator,
    st: Stencil,
    grid: &'a HalfCylinderGrid,
    dt: f64,
    lambda: f64,
    interior: Vec<usize>,
    /// Interior and thin sites with their thin index, in sweep order.
    unknowns: Vec<(usize, Option<usize>)>,
    rule: ThinRule<'a>,
}

impl Marcher<'_> {
    /// Thin update given the Hessian `base` (center included, zero flux).
    /// Returns the new value and the flux.
    #[inline]
    fn thin_value(&self, base: &SymMatrix, prev: f64, phi: f64, center: Option<&SymMatrix>) -> (f64, f64) {
        let (op, st, dt, h) = (self.op, &self.st, self.dt, self.st.h);
        // `center`: Hessian without the center (implicit); `base` holds the
        // explicit Hessian otherwise.
        let cand = match center {
            None => prev + dt * op.apply(base),
            Some(m) => implicit_center(op, st, m, prev, dt, prev),
        };
        match self.rule {
            ThinRule::Flux(_) => (cand, 0.0),
            ThinRule::Penalty(k) => {
                if cand >= phi {
                    return (cand, 0.0);
                }
                let ftol = 1e-15 * (1.0 + prev.abs() + phi.abs());
                let v = match center {
                    None => solve_increasing(
                        |v| v - prev - dt * op.apply(&st.add_normal(base, 2.0 * k * (phi - v) / h)),
                        cand,
                        phi,
                        ftol,
                    ),
                    Some(m) => solve_increasing(
                        |v| v - prev - dt * op.apply(&st.add_normal(&st.with_center(m, v), 2.0 * k * (phi - v) / h)),
                        cand,
                        phi,
                        ftol,
                    ),
                };
                (v, -k * (phi - v).max(0.0))
            }
            ThinRule::Signorini => {
                if cand >= phi {
                    return (cand, 0.0);
                }
                let at_phi = match center {
                    None => *base,
                    Some(m) => st.with_center(m, phi),
                };
                let target = (phi - prev) / dt;
                let f0 = op.apply(&at_phi);
                let w_hi = ((target - f0) / self.lambda).max(0.0);
                let ftol = 1e-15 * (1.0 + target.abs() + f0.abs());
                let w = solve_increasing(|w| op.apply(&st.add_normal(&at_phi, w)) - target, 0.0, w_hi, ftol);
                (phi, -0.5 * w * h)
            }
        }
    }

    fn explicit_step(&self, prev: &[f64], next: &mut [f64], phi: &[f64], g: &mut [f64], t_old: f64) {
        let (op, st, dt) = (self.op, &self.st, self.dt);
        for &s in &self.interior {
            let c = prev[s];
            next[s] = c + dt * op.apply(&st.with_center(&st.partial(prev, s, false, 0.0), c));
        }
        let n1 = self.grid.dim() - 1;
        for (k, &s) in self.grid.thin_sites().iter().enumerate() {
            let c = prev[s];
            if let ThinRule::Flux(f) = self.rule {
                let gk = f(&self.grid.site_x(s)[..n1], t_old);
                g[k] = gk;
                next[s] = c + dt * op.apply(&st.with_center(&st.partial(prev, s, true, gk), c));
                continue;
            }
            let base = st.with_center(&st.partial(prev, s, true, 0.0), c);
            let (v, gk) = self.thin_value(&base, c, phi[k], None);
            next[s] = v;
            g[k] = gk;
        }
    }

    /// One backward-Euler step by Gauss-Seidel sweeps; returns (sweeps, last update).
    #[allow(clippy::too_many_arguments)]
    fn implicit_step(
        &self,
        prev: &[f64],
        next: &mut [f64],
        phi: &[f64],
        g: &mut [f64],
        t_new: f64,
        cfg: &SolverConfig,
        step: usize,
    ) -> Result<(usize, f64), SolverError> {
        let (op, st, dt) = (self.op, &self.st, self.dt);
        let n1 = self.grid.dim() - 1;
        if let ThinRule::Flux(f) = self.rule {
            for (k, &s) in self.grid.thin_sites().iter().enumerate() {
                g[k] = f(&self.grid.site_x(s)[..n1], t_new);
            }
        }
        let mut update = f64::INFINITY;
        for sweep in 1..=cfg.max_sweeps {
            update = 0.0;
            let mut visit = |&(s, thin): &(usize, Option<usize>)| {
                let old = next[s];
                let v = match thin {
                    None => implicit_center(op, st, &st.partial(next, s, false, 0.0), prev[s], dt, old),
                    Some(k) => {
                        if let ThinRule::Flux(_) = self.rule {
                            implicit_center(op, st, &st.partial(next, s, true, g[k]), prev[s], dt, old)
                        } else {
                            let m = st.partial(next, s, true, 0.0);
                            let (v, gk) = self.thin_value(&m, prev[s], phi[k], Some(&m));
                            g[k] = gk;
                            v
                        }
                    }
                };
                update = f64::max(update, (v - old).abs());
                next[s] = v;
            };
            match cfg.sweep_order {
                SweepOrder::Forward => self.unknowns.iter().for_each(&mut visit),
                SweepOrder::Reverse => self.unknowns.iter().rev().for_each(&mut visit),
            }
            if !update.is_finite() {
                break;
            }
            if update <= cfg.tol_sweep {
                return Ok((sweep, update));
            }
        }
        Err(SolverError::NoConvergence { step, sweeps: cfg.max_sweeps, update })
    }
}

fn march(spec: &ProblemSpec, cfg: &SolverConfig, rule: ThinRule, mode: SolveMode) -> Result<SolveResult, SolverError> {
    cfg.validate()?;
    validate_compatibility(spec)?.require()?;
    let grid = spec.grid()?;
    let op = &spec.operator;
    let dt = grid.dt();
    if cfg.scheme == Scheme::Explicit {
        let limit = cfl_limit(op, grid.h(), cfg.theta_cfl);
        if dt > limit * (1.0 + 1e-12) {
            return Err(SolverError::Cfl { dt, limit });
        }
    }
    let steps = grid.levels() - 1;
    let store = cfg.store_every.unwrap_or_else(|| auto_store_every(&grid));
    if steps % store != 0 {
        return Err(SolverError::Config(format!("store_every={store} does not divide the {steps} time steps")));
    }
    let stored_grid = grid.coarsen_time(store).map_err(ProblemError::from)?;

    let sampler = DataSampler::new(spec, &grid);
    let sites = grid.sites();
    let nthin = grid.thin_sites().len();
    let interior: Vec<usize> = (0..sites).filter(|&s| grid.site_kind(s) == NodeKind::Interior).collect();
    let unknowns: Vec<(usize, Option<usize>)> = (0..sites)
        .filter_map(|s| match grid.site_kind(s) {
            NodeKind::Interior => Some((s, None)),
            NodeKind::ThinBoundary => Some((s, grid.thin_index(s))),
            _ => None,
        })
        .collect();
    let marcher = Marcher {
        op,
        st: Stencil::new(&grid),
        grid: &grid,
        dt,
        lambda: op.ellipticity().lambda(),
        interior,
        unknowns,
        rule,
    };

    let mut prev = vec![0.0; sites];
    sampler.boundary_level(0, &mut prev)?;
    let mut next = prev.clone();
    let mut phi = vec![0.0; nthin];
    sampler.obstacle_level(0, &mut phi)?;
    let mut g = vec![0.0; nthin];
    if let ThinRule::Flux(f) = rule {
        let n1 = grid.dim() - 1;
        for (k, &s) in grid.thin_sites().iter().enumerate() {
            g[k] = f(&grid.site_x(s)[..n1], grid.time(0));
        }
    }

    let stored_levels = stored_grid.levels();
    let mut values = Vec::with_capacity(stored_levels * sites);
    values.extend_from_slice(&prev);
    let mut flux = Vec::with_capacity(stored_levels * nthin);
    flux.extend_from_slice(&g);
    let mut obstacle = Vec::with_capacity(stored_levels * nthin);
    obstacle.extend_from_slice(&phi);
    let mut before = Vec::with_capacity((stored_levels - 1) * sites);
    let mut iterations = Vec::with_capacity(steps);
    let mut residuals = Vec::with_capacity(steps);

    for step in 1..=steps {
        next.copy_from_slice(&prev);
        sampler.boundary_level(step, &mut next)?;
        sampler.obstacle_level(step, &mut phi)?;
        match cfg.scheme {
            Scheme::Explicit => {
                marcher.explicit_step(&prev, &mut next, &phi, &mut g, grid.time(step - 1));
                iterations.push(1);
                residuals.push(0.0);
            }
            Scheme::ImplicitSweep => {
                let (sweeps, update) = marcher.implicit_step(&prev, &mut next, &phi, &mut g, grid.time(step), cfg, step)?;
                iterations.push(sweeps);
                residuals.push(update);
            }
        }
        if let Some(site) = next.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite {
                step,
                site,
                x: grid.site_x(site)[..grid.dim() - 1].to_vec(),
                y: grid.site_y(site),
            });
        }
        if step % store == 0 {
            before.extend_from_slice(&prev);
            values.extend_from_slice(&next);
            flux.extend_from_slice(&g);
            obstacle.extend_from_slice(&phi);
        }
        std::mem::swap(&mut prev, &mut next);
    }

    Ok(SolveResult {
        problem: spec.clone(),
        mode,
        config: SolverConfig { store_every: Some(store), ..*cfg },
        field: SpaceTimeField::new(stored_grid, values)?,
        flux,
        obstacle,
        before,
        iterations,
        residuals,
        store_every: store,
        march_dt: dt,
    })
}

/// Unknowns per slice accepted by [`brute_force_oracle`].
pub const ORACLE_MAX_UNKNOWNS: usize = 512;
/// Thin nodes per slice up to which every contact pattern is enumerated.
pub const ORACLE_MAX_ENUMERATED: usize = 12;

/// Reference Signorini solve on a tiny grid, storing every level.
///
/// Each step solves the complementarity system directly: for up to
/// [`ORACLE_MAX_ENUMERATED`] thin nodes every contact pattern is tried with a
/// dense Newton solve, and the feasible one is kept; larger slices fall back
/// to projected sweeps run to `1e-12`. The Hessian assembly is written out
/// independently of the marching solvers.
pub fn brute_force_oracle(spec: &ProblemSpec, cfg: &SolverConfig) -> Result<SpaceTimeField, SolverError> {
    cfg.validate()?;
    validate_compatibility(spec)?.require()?;
    let grid = spec.grid()?;
    let op = &spec.operator;
    if cfg.scheme == Scheme::Explicit {
        let limit = cfl_limit(op, grid.h(), cfg.theta_cfl);
        if grid.dt() > limit * (1.0 + 1e-12) {
            return Err(SolverError::Cfl { dt: grid.dt(), limit });
        }
    }
    let oracle = Oracle::new(op, &grid, cfg.scheme == Scheme::ImplicitSweep)?;
    let sites = grid.sites();
    let n1 = grid.dim() - 1;
    let mut values = Vec::with_capacity(grid.total_nodes());
    let mut prev: Vec<f64> = (0..sites)
        .map(|s| spec.boundary.value(&grid.site_x(s)[..n1], grid.site_y(s), grid.time(0)))
        .collect();
    values.extend_from_slice(&prev);
    let mut pattern = 0u64;
    for step in 1..grid.levels() {
        let t = grid.time(step);
        let mut next = prev.clone();
        for s in 0..sites {
            if grid.is_dirichlet_site(s) {
                next[s] = spec.boundary.value(&grid.site_x(s)[..n1], grid.site_y(s), t);
            }
        }
        let phi: Vec<f64> = oracle.thin.iter().map(|&s| spec.obstacle.value(&grid.site_x(s)[..n1], t)).collect();
        pattern = oracle.step(&prev, &mut next, &phi, pattern, step)?;
        prev = next;
        values.extend_from_slice(&prev);
    }
    SpaceTimeField::new(grid, values)
}

struct Oracle<'a> {
    op: &'a EllipticOperator,
    grid: &'a HalfCylinderGrid,
    implicit: bool,
    unknown_sites: Vec<usize>,
    thin: Vec<usize>,
    /// Position of each thin site inside `unknown_sites`.
    thin_slot: Vec<usize>,
}

impl<'a> Oracle<'a> {
    fn new(op: &'a EllipticOperator, grid: &'a HalfCylinderGrid, implicit: bool) -> Result<Self, SolverError> {
        let unknown_sites: Vec<usize> = (0..grid.sites()).filter(|&s| !grid.is_dirichlet_site(s)).collect();
        if unknown_sites.len() > ORACLE_MAX_UNKNOWNS {
            return Err(SolverError::OracleBudget { unknowns: unknown_sites.len(), limit: ORACLE_MAX_UNKNOWNS });
        }
        let thin: Vec<usize> = unknown_sites.iter().copied().filter(|&s| grid.site_j(s) == 0).collect();
        let thin_slot = thin.iter().map(|s| unknown_sites.iter().position(|u| u == s).unwrap()).collect();
        Ok(Self { op, grid, implicit, unknown_sites, thin, thin_slot })
    }

    /// Value at lattice offset from `site`, with the flux ghost below the thin face.
    fn hessian(&self, u: &[f64], site: usize, g: f64) -> SymMatrix {
        let grid = self.grid;
        let n = grid.dim();
        let h = grid.h();
        let i = grid.site_i(site);
        let j = grid.site_j(site) as i64;
        let at = |di: [i64; MAX_DIM]| -> f64 {
            let mut idx = [0usize; MAX_DIM - 1];
            for a in 0..n - 1 {
                idx[a] = (i[a] as i64 + di[a]) as usize;
            }
            let jj = j + di[n - 1];
            if jj < 0 {
                let mirror = grid.site_from_indices(&idx[..n - 1], (-jj) as usize);
                u[mirror] - 2.0 * h * g
            } else {
                u[grid.site_from_indices(&idx[..n - 1], jj as usize)]
            }
        };
        let mut m = SymMatrix::zeros(n);
        let c = u[site];
        for a in 0..n {
            let mut e = [0i64; MAX_DIM];
            e[a] = 1;
            let mut em = [0i64; MAX_DIM];
            em[a] = -1;
            m.set(a, a, (at(e) - 2.0 * c + at(em)) / (h * h));
            for b in 0..a {
                if j == 0 && a == n - 1 {
                    continue;
                }
                let mut pp = [0i64; MAX_DIM];
                pp[a] = 1;
                pp[b] = 1;
                let mut pm = pp;
                pm[b] = -1;
                let mut mp = [0i64; MAX_DIM];
                mp[a] = -1;
                mp[b] = 1;
                let mut mm = mp;
                mm[b] = -1;
                m.set(a, b, (at(pp) - at(pm) - at(mp) + at(mm)) / (4.0 * h * h));
            }
        }
        m
    }

    /// Residuals of the step equations; `z` holds `u` at free unknowns and the
    /// flux at contact nodes (whose value is pinned to `phi`).
    fn residual(&self, prev: &[f64], work: &mut [f64], z: &[f64], contact: u64, phi: &[f64], out: &mut [f64]) {
        let mut flux = vec![0.0; self.thin.len()];
        let mut t = 0;
        for (q, &s) in self.unknown_sites.iter().enumerate() {
            let is_thin = t < self.thin.len() && self.thin[t] == s;
            if is_thin {
                if contact >> t & 1 == 1 {
                    work[s] = phi[t];
                    flux[t] = z[q];
                } else {
                    work[s] = z[q];
                }
                t += 1;
            } else {
                work[s] = z[q];
            }
        }
        let mut t = 0;
        for (q, &s) in self.unknown_sites.iter().enumerate() {
            let g = if t < self.thin.len() && self.thin[t] == s {
                t += 1;
                flux[t - 1]
            } else {
                0.0
            };
            let hess = if self.implicit { self.hessian(work, s, g) } else { self.hessian(prev, s, g) };
            out[q] = work[s] - prev[s] - self.grid.dt() * self.op.apply(&hess);
        }
    }

    fn newton(&self, prev: &[f64], base: &[f64], contact: u64, phi: &[f64]) -> Option<Vec<f64>> {
        let n = self.unknown_sites.len();
        let mut work = base.to_vec();
        let mut z: Vec<f64> = self.unknown_sites.iter().map(|&s| base[s]).collect();
        for (t, &slot) in self.thin_slot.iter().enumerate() {
            if contact >> t & 1 == 1 {
                z[slot] = 0.0;
            }
        }
        let mut r = vec![0.0; n];
        self.residual(prev, &mut work, &z, contact, phi, &mut r);
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut rn = norm(&r);
        let mut jac = vec![0.0; n * n];
        let mut rp = vec![0.0; n];
        for _ in 0..60 {
            if rn <= 1e-13 {
                break;
            }
            for c in 0..n {
                let eps = 1e-7 * (1.0 + z[c].abs());
                let mut zp = z.clone();
                zp[c] += eps;
                self.residual(prev, &mut work, &zp, contact, phi, &mut rp);
                for row in 0..n {
                    jac[row * n + c] = (rp[row] - r[row]) / eps;
                }
            }
            let step = gauss_solve(&mut jac.clone(), &mut r.clone(), n)?;
            let mut alpha = 1.0;
            loop {
                let zt: Vec<f64> = z.iter().zip(&step).map(|(a, d)| a - alpha * d).collect();
                self.residual(prev, &mut work, &zt, contact, phi, &mut rp);
                let tn = norm(&rp);
                if tn < rn || alpha < 1e-6 {
                    z = zt;
                    r.copy_from_slice(&rp);
                    rn = tn;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if rn > 1e-11 {
            return None;
        }
        Some(z)
    }

    fn feasible(&self, z: &[f64], contact: u64, phi: &[f64]) -> bool {
        self.thin_slot.iter().enumerate().all(|(t, &slot)| {
            if contact >> t & 1 == 1 {
                z[slot] <= 1e-12
            } else {
                z[slot] >= phi[t] - 1e-12
            }
        })
    }

    fn step(&self, prev: &[f64], next: &mut [f64], phi: &[f64], last: u64, step: usize) -> Result<u64, SolverError> {
        let m = self.thin.len();
        if m > ORACLE_MAX_ENUMERATED {
            self.projected_sweeps(prev, next, phi, step)?;
            return Ok(0);
        }
        let candidates = std::iter::once(last).chain((0..1u64 << m).filter(|&p| p != last));
        for contact in candidates {
            if let Some(z) = self.newton(prev, next, contact, phi) {
                if self.feasible(&z, contact, phi) {
                    let mut t = 0;
                    for (q, &s) in self.unknown_sites.iter().enumerate() {
                        if t < m && self.thin[t] == s {
                            next[s] = if contact >> t & 1 == 1 { phi[t] } else { z[q] };
                            t += 1;
                        } else {
                            next[s] = z[q];
                        }
                    }
                    return Ok(contact);
                }
            }
        }
        Err(SolverError::OracleInfeasible { step })
    }

    /// Projected nonlinear Gauss-Seidel with bisection scalar solves.
    fn projected_sweeps(&self, prev: &[f64], next: &mut [f64], phi: &[f64], step: usize) -> Result<(), SolverError> {
        let dt = self.grid.dt();
        for _ in 0..100_000 {
            let mut change = 0.0f64;
            let mut t = 0;
            for &s in &self.unknown_sites {
                let keep = next[s];
                let mut eq = |v: f64| {
                    next[s] = v;
                    let hess = if self.implicit { self.hessian(next, s, 0.0) } else { self.hessian(prev, s, 0.0) };
                    v - prev[s] - dt * self.op.apply(&hess)
                };
                let r0 = eq(keep);
                let (mut lo, mut hi) = if r0 > 0.0 { (keep - r0, keep) } else { (keep, keep - r0) };
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if eq(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let mut v = 0.5 * (lo + hi);
                if t < self.thin.len() && self.thin[t] == s {
                    v = v.max(phi[t]);
                    t += 1;
                }
                change = change.max((v - keep).abs());
                next[s] = v;
            }
            if change <= 1e-13 {
                return Ok(());
            }
        }
        Err(SolverError::OracleInfeasible { step })
    }
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
fn gauss_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geometry::GridSpec;
    use crate::library::BuiltIn;
    use crate::operators::EllipticityPair;
    use crate::problem::{CompatibilityPolicy, PolyBoundary, PolyObstacle, Polynomial};

    fn spec_with(op: EllipticOperator, phi: Polynomial, u0: Polynomial, grid: GridSpec) -> ProblemSpec {
        ProblemSpec {
            name: "test".into(),
            operator: op,
            obstacle: Arc::new(PolyObstacle::new(phi)),
            boundary: Arc::new(PolyBoundary(u0)),
            grid,
            margin: 0.25,
            compatibility: CompatibilityPolicy::Strict,
            exact: None,
        }
    }

    fn pucci() -> EllipticOperator {
        EllipticOperator::pucci_plus(2, EllipticityPair::new(1.0, 2.0).unwrap())
    }

    fn small_grid(op: &EllipticOperator) -> GridSpec {
        crate::library::explicit_grid(op, 2, 0.125, 0.0, 0.125, 0.9).unwrap()
    }

    #[test]
    fn constants_are_preserved() {
        let op = pucci();
        let grid = small_grid(&op);
        let spec = spec_with(op, Polynomial::constant(2, -1.0), Polynomial::constant(3, 0.7), grid);
        let cfg = SolverConfig { store_every: Some(1), ..SolverConfig::default() };
        for r in [
            solve_signorini(&spec, &cfg).unwrap(),
            solve_penalized(&spec, 50.0, &cfg).unwrap(),
            solve_neumann(&spec, &zero_flux, &cfg).unwrap(),
            solve_signorini(&spec, &SolverConfig { store_every: Some(1), ..SolverConfig::implicit() }).unwrap(),
        ] {
            assert!(r.field.values().iter().all(|&v| v == 0.7));
            assert!(r.flux.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn quadratic_hessian_is_exact() {
        let grid = HalfCylinderGrid::new(GridSpec::new(2, 0.125, 0.01, 0.0, 0.1).unwrap()).unwrap();
        // u = x^2 + 2xy + 3y^2, Hessian [[2, 2], [2, 6]]; u_y(x, 0) = 2x
        let slice: Vec<f64> = (0..grid.sites())
            .map(|s| {
                let (x, y) = (grid.site_x(s)[0], grid.site_y(s));
                x * x + 2.0 * x * y + 3.0 * y * y
            })
            .collect();
        for s in 0..grid.sites() {
            match grid.site_kind(s) {
                NodeKind::Interior => {
                    let m = discrete_hessian(&grid, &slice, s, 0.0).unwrap();
                    assert!((m.get(0, 0) - 2.0).abs() < 1e-10 && (m.get(0, 1) - 2.0).abs() < 1e-10);
                    assert!((m.get(1, 1) - 6.0).abs() < 1e-10);
                }
                NodeKind::ThinBoundary => {
                    let g = 2.0 * grid.site_x(s)[0];
                    let m = discrete_hessian(&grid, &slice, s, g).unwrap();
                    assert!((m.get(0, 0) - 2.0).abs() < 1e-10 && (m.get(1, 1) - 6.0).abs() < 1e-10);
                    assert_eq!(m.get(0, 1), 0.0);
                }
                kind => assert!(matches!(
                    discrete_hessian(&grid, &slice, s, 0.0),
                    Err(SolverError::NotStencilNode { kind: k, .. }) if k == kind
                )),
            }
        }
        let op = pucci();
        let s = grid.site_from_indices(&[4], 3);
        // M+ with eigenvalues 3 -+ sqrt(5), both positive: Lambda * trace
        assert!((discrete_operator_apply(&op, &grid, &slice, s).unwrap() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn unit_flux_is_enforced() {
        // u = y is stationary for the heat operator and has u_y = 1 on the thin face
        let op = EllipticOperator::trace(2);
        let grid = small_grid(&op);
        let u0 = Polynomial::new(3, vec![(vec![0, 1, 0], 1.0)]).unwrap();
        let spec = spec_with(op, Polynomial::constant(2, -1.0), u0, grid);
        let cfg = SolverConfig { store_every: Some(1), ..SolverConfig::default() };
        let one = |_: &[f64], _: f64| 1.0;
        for cfg in [cfg, SolverConfig { store_every: Some(1), ..SolverConfig::implicit() }] {
            let r = solve_neumann(&spec, &one, &cfg).unwrap();
            let g = r.grid();
            for node in g.nodes() {
                assert!((r.field.value(node) - g.site_y(node.site)).abs() < 1e-12);
            }
            assert!(r.flux.iter().all(|&f| f == 1.0));
        }
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let op = pucci();
        let limit = cfl_limit(&op, 0.125, 0.9);
        let grid = GridSpec::new(2, 0.125, 0.125 / 16.0, 0.0, 0.125).unwrap();
        assert!(grid.dt > limit);
        let spec = spec_with(op, Polynomial::constant(2, -1.0), Polynomial::constant(3, 0.0), grid);
        let err = solve_signorini(&spec, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolverError::Cfl { .. }));
        // the implicit scheme has no step restriction
        assert!(solve_signorini(&spec, &SolverConfig::implicit()).is_ok());
    }

    #[test]
    fn zero_penalty_is_neumann_bit_for_bit() {
        let spec = BuiltIn::P2.spec_on(small_grid(&BuiltIn::P2.operator(2))).unwrap();
        let cfg = SolverConfig::default();
        let a = solve_penalized(&spec, 0.0, &cfg).unwrap();
        let b = solve_neumann(&spec, &zero_flux, &cfg).unwrap();
        assert_eq!(a.field, b.field);
        assert_eq!(a.mode, SolveMode::Penalized { k: 0.0 });
    }

    #[test]
    fn no_contact_signorini_is_neumann() {
        let spec = BuiltIn::P4.spec(2, 0.125).unwrap();
        let cfg = SolverConfig::default();
        let a = solve_signorini(&spec, &cfg).unwrap();
        let b = solve_neumann(&spec, &zero_flux, &cfg).unwrap();
        assert_eq!(a.field, b.field);
    }

    #[test]
    fn signorini_complementarity_is_exact() {
        let spec = BuiltIn::P2.spec(2, 0.0625).unwrap();
        let r = solve_signorini(&spec, &SolverConfig::default()).unwrap();
        let grid = r.grid();
        let mut contacts = 0;
        for level in 0..grid.levels() {
            for k in 0..r.thin_count() {
                let gap = r.thin_value(level, k) - r.obstacle_at(level, k);
                let g = r.flux_at(level, k);
                assert!(gap >= 0.0 && g <= 0.0);
                assert!(g == 0.0 || gap == 0.0);
                contacts += usize::from(gap == 0.0);
            }
        }
        assert!(contacts > 0);
    }

    #[test]
    fn explicit_and_implicit_agree_to_first_order() {
        let spec = BuiltIn::P2.spec(2, 0.125).unwrap();
        let ex = solve_signorini(&spec, &SolverConfig::default()).unwrap();
        let im = solve_signorini(&spec, &SolverConfig::implicit()).unwrap();
        assert!(im.residuals.iter().all(|&r| r <= 1e-12));
        assert!(ex.field.sup_difference(&im.field).unwrap() < 0.01);
    }

    #[test]
    fn stored_stride_must_divide_steps() {
        let spec = BuiltIn::P4.spec(2, 0.125).unwrap();
        let steps = spec.grid.steps();
        let cfg = SolverConfig { store_every: Some(steps + 1), ..SolverConfig::default() };
        assert!(matches!(solve_signorini(&spec, &cfg), Err(SolverError::Config(_))));
        assert!(matches!(
            solve_signorini(&spec, &SolverConfig { store_every: Some(0), ..SolverConfig::default() }),
            Err(SolverError::Config(_))
        ));
    }

    #[test]
    fn oracle_matches_marching_solver() {
        let op = BuiltIn::P2.operator(2);
        let grid = GridSpec::new(2, 0.25, 1.0 / 32.0, -1.0, 0.0).unwrap();
        let spec = BuiltIn::P2.spec_on(grid).unwrap();
        let cfg = SolverConfig { store_every: Some(1), ..SolverConfig::implicit() };
        let oracle = brute_force_oracle(&spec, &cfg).unwrap();
        let marched = solve_signorini(&spec, &cfg).unwrap();
        assert!(marched.field.sup_difference(&oracle).unwrap() <= 1e-8);
        assert!(cfl_limit(&op, 0.25, 0.9) < grid.dt);
    }
}
