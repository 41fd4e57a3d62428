//! Problem instances: obstacle, boundary data, operator and grid.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{GeometryError, GridSpec, HalfCylinderGrid, Node, NodeKind, ParabolicPoint, MAX_DIM};
use crate::operators::EllipticOperator;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(
        "compatibility violated: u0 - phi = {margin:e} at edge-ring point x={x:?}, t={t} (must be {requirement})"
    )]
    Incompatible { margin: f64, x: Vec<f64>, t: f64, requirement: &'static str },
    #[error("{what} evaluated to a non-finite value at node level={level} site={site} (x={x:?}, y={y}, t={t})")]
    NonFinite { what: &'static str, level: usize, site: usize, x: Vec<f64>, y: f64, t: f64 },
    #[error("operator acts in dimension {operator} but the grid has n={grid}")]
    DimensionMismatch { operator: usize, grid: usize },
    #[error("margin rho={0} must lie in (0, 1)")]
    BadMargin(f64),
    #[error("polynomial term {index} has {got} exponents, expected {expected}")]
    PolynomialArity { index: usize, got: usize, expected: usize },
    #[error("polynomial term {index} has a negative or fractional exponent {value}")]
    PolynomialExponent { index: usize, value: f64 },
    #[error("unknown built-in problem {0:?} (expected P1, P2, P3 or P4)")]
    UnknownProblem(String),
    #[error(transparent)]
    Operator(#[from] crate::operators::OperatorError),
}

/// Multivariate polynomial `sum_k c_k prod_i v_i^{p_ki}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    vars: usize,
    terms: Vec<(Vec<u32>, f64)>,
}

impl Polynomial {
    pub fn new(vars: usize, terms: Vec<(Vec<u32>, f64)>) -> Result<Self, ProblemError> {
        for (index, (p, _)) in terms.iter().enumerate() {
            if p.len() != vars {
                return Err(ProblemError::PolynomialArity { index, got: p.len(), expected: vars });
            }
        }
        Ok(Self { vars, terms })
    }

    /// Rows `[p_1, ..., p_vars, coeff]`, as written in config tables.
    pub fn from_table(vars: usize, rows: &[Vec<f64>]) -> Result<Self, ProblemError> {
        let mut terms = Vec::with_capacity(rows.len());
        for (index, row) in rows.iter().enumerate() {
            if row.len() != vars + 1 {
                return Err(ProblemError::PolynomialArity { index, got: row.len().saturating_sub(1), expected: vars });
            }
            let mut powers = Vec::with_capacity(vars);
            for &p in &row[..vars] {
                if !(p >= 0.0) || p.fract() != 0.0 || p > 64.0 {
                    return Err(ProblemError::PolynomialExponent { index, value: p });
                }
                powers.push(p as u32);
            }
            terms.push((powers, row[vars]));
        }
        Self::new(vars, terms)
    }

    pub fn constant(vars: usize, c: f64) -> Self {
        Self { vars, terms: vec![(vec![0; vars], c)] }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn to_table(&self) -> Vec<Vec<f64>> {
        self.terms
            .iter()
            .map(|(p, c)| p.iter().map(|&e| e as f64).chain(std::iter::once(*c)).collect())
            .collect()
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(p, c)| p.iter().zip(v).fold(*c, |acc, (&e, &x)| acc * x.powi(e as i32)))
            .sum()
    }

    pub fn derivative(&self, var: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(p, _)| p[var] > 0)
            .map(|(p, c)| {
                let mut q = p.clone();
                q[var] -= 1;
                (q, c * p[var] as f64)
            })
            .collect();
        Self { vars: self.vars, terms }
    }
}

/// Obstacle `phi(x, t)` on the thin face, with tangential derivatives.
///
/// Default derivative methods use central differences; analytic evaluators
/// override them.
pub trait Obstacle: fmt::Debug + Send + Sync {
    fn value(&self, x: &[f64], t: f64) -> f64;

    fn gradient(&self, x: &[f64], t: f64) -> Vec<f64> {
        let eps = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += eps;
                m[i] -= eps;
                (self.value(&p, t) - self.value(&m, t)) / (2.0 * eps)
            })
            .collect()
    }

    fn hessian(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        let eps = 1e-4;
        let k = x.len();
        let mut out = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                let shifted = |si: f64, sj: f64| {
                    let mut p = x.to_vec();
                    p[i] += si;
                    p[j] += sj;
                    self.value(&p, t)
                };
                out[i][j] = (shifted(eps, eps) - shifted(eps, -eps) - shifted(-eps, eps) + shifted(-eps, -eps))
                    / (4.0 * eps * eps);
            }
        }
        out
    }

    fn time_derivative(&self, x: &[f64], t: f64) -> f64 {
        let eps = 1e-5;
        (self.value(x, t + eps) - self.value(x, t - eps)) / (2.0 * eps)
    }
}

/// Data `u0(x, y, t)` on the lateral and initial boundary.
pub trait BoundaryData: fmt::Debug + Send + Sync {
    fn value(&self, x: &[f64], y: f64, t: f64) -> f64;
}

/// Polynomial obstacle in the variables `(x_1, .., x_{n-1}, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyObstacle {
    poly: Polynomial,
    grad: Vec<Polynomial>,
    hess: Vec<Vec<Polynomial>>,
    time: Polynomial,
}

impl PolyObstacle {
    pub fn new(poly: Polynomial) -> Self {
        let k = poly.vars() - 1;
        let grad: Vec<_> = (0..k).map(|i| poly.derivative(i)).collect();
        let hess = grad.iter().map(|g| (0..k).map(|j| g.derivative(j)).collect()).collect();
        let time = poly.derivative(k);
        Self { poly, grad, hess, time }
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    fn args(x: &[f64], t: f64) -> [f64; MAX_DIM] {
        let mut v = [0.0; MAX_DIM];
        v[..x.len()].copy_from_slice(x);
        v[x.len()] = t;
        v
    }
}

impl Obstacle for PolyObstacle {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        self.poly.eval(&Self::args(x, t))
    }
    fn gradient(&self, x: &[f64], t: f64) -> Vec<f64> {
        let v = Self::args(x, t);
        self.grad.iter().map(|g| g.eval(&v)).collect()
    }
    fn hessian(&self, x: &[f64], t: f64) -> Vec<Vec<f64>> {
        let v = Self::args(x, t);
        self.hess.iter().map(|row| row.iter().map(|p| p.eval(&v)).collect()).collect()
    }
    fn time_derivative(&self, x: &[f64], t: f64) -> f64 {
        self.time.eval(&Self::args(x, t))
    }
}

/// Polynomial boundary data in the variables `(x_1, .., x_{n-1}, y, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBoundary(pub Polynomial);

impl BoundaryData for PolyBoundary {
    fn value(&self, x: &[f64], y: f64, t: f64) -> f64 {
        let mut v = [0.0; MAX_DIM + 1];
        v[..x.len()].copy_from_slice(x);
        v[x.len()] = y;
        v[x.len() + 1] = t;
        self.0.eval(&v[..x.len() + 2])
    }
}

/// The stationary 3/2-homogeneous Signorini profile `r^{3/2} cos(3 theta / 2)`,
/// with `r, theta` the polar coordinates of `(x_1, y)`.
///
/// Harmonic in `y > 0`; on `y = 0` it is `x^{3/2}` with zero normal derivative
/// for `x > 0`, and zero with normal derivative `-(3/2)|x|^{1/2}` for `x < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SignoriniProfile;

impl SignoriniProfile {
    pub fn eval(x: f64, y: f64) -> f64 {
        let r = x.hypot(y);
        if r == 0.0 {
            return 0.0;
        }
        let theta = y.atan2(x);
        r.powf(1.5) * (1.5 * theta).cos()
    }

    /// Normal derivative on the thin face.
    pub fn sigma(x: f64) -> f64 {
        if x < 0.0 {
            -1.5 * (-x).sqrt()
        } else {
            0.0
        }
    }
}

impl BoundaryData for SignoriniProfile {
    fn value(&self, x: &[f64], y: f64, _t: f64) -> f64 {
        Self::eval(x[0], y)
    }
}

/// Zero-flux heat mode `e^{-pi^2 t} cos(pi y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeatMode;

impl BoundaryData for HeatMode {
    fn value(&self, _x: &[f64], y: f64, t: f64) -> f64 {
        let pi = std::f64::consts::PI;
        (-pi * pi * t).exp() * (pi * y).cos()
    }
}

/// How strictly `u0 > phi` is enforced on the edge ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompatibilityPolicy {
    /// `u0 - phi > 0` at every edge-ring node.
    Strict,
    /// `u0 - phi >= 0`; for reference profiles whose contact set reaches the ring.
    Relaxed,
}

/// A concrete instance of the thin obstacle problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub operator: EllipticOperator,
    pub obstacle: Arc<dyn Obstacle>,
    pub boundary: Arc<dyn BoundaryData>,
    pub grid: GridSpec,
    /// Width `rho` of the band next to the edge ring where no contact is expected.
    pub margin: f64,
    pub compatibility: CompatibilityPolicy,
    /// Exact solution, when one is known.
    pub exact: Option<Arc<dyn BoundaryData>>,
}

/// Data constant `K = max(||u0||_inf, K_phi)`, computed from data samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConstant {
    pub boundary_sup: f64,
    /// max of `|phi|, |D phi|, |D^2 phi|, |phi_t|` over thin nodes.
    pub obstacle_bound: f64,
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityReport {
    pub min_ring_margin: f64,
    pub worst_ring_point: Option<ParabolicPoint>,
    /// Widest band `1 - max|x_i| <= b` next to the ring on which the initial
    /// slice satisfies `u0 > phi`.
    pub initial_band: f64,
    pub margin: f64,
    /// `rho` does not exceed the observed initial band.
    pub margin_plausible: bool,
    pub policy: CompatibilityPolicy,
    pub passes: bool,
}

impl CompatibilityReport {
    pub fn require(&self) -> Result<(), ProblemError> {
        if self.passes {
            return Ok(());
        }
        let (x, t) = match &self.worst_ring_point {
            Some(p) => (p.x.to_vec(), p.t),
            None => (Vec::new(), f64::NAN),
        };
        Err(ProblemError::Incompatible {
            margin: self.min_ring_margin,
            x,
            t,
            requirement: match self.policy {
                CompatibilityPolicy::Strict => "> 0",
                CompatibilityPolicy::Relaxed => ">= 0",
            },
        })
    }
}

impl ProblemSpec {
    pub fn grid(&self) -> Result<HalfCylinderGrid, ProblemError> {
        if self.operator.dim() != self.grid.n {
            return Err(ProblemError::DimensionMismatch { operator: self.operator.dim(), grid: self.grid.n });
        }
        Ok(HalfCylinderGrid::new(self.grid)?)
    }

    /// Same problem on a different grid.
    pub fn with_grid(&self, grid: GridSpec) -> Self {
        Self { grid, ..self.clone() }
    }

    pub fn data_constant(&self) -> Result<DataConstant, ProblemError> {
        let grid = self.grid()?;
        let n1 = grid.dim() - 1;
        let mut boundary_sup = 0.0f64;
        let mut obstacle_bound = 0.0f64;
        for level in 0..grid.levels() {
            let t = grid.time(level);
            for site in 0..grid.sites() {
                let node = Node { level, site };
                let kind = grid.kind(node);
                let x = grid.site_x(site);
                if matches!(kind, NodeKind::Initial | NodeKind::Lateral | NodeKind::EdgeRing) {
                    boundary_sup = boundary_sup.max(self.boundary.value(&x[..n1], grid.site_y(site), t).abs());
                }
            }
            for &site in grid.thin_sites() {
                let x = &grid.site_x(site)[..n1];
                let mut b = self.obstacle.value(x, t).abs().max(self.obstacle.time_derivative(x, t).abs());
                b = b.max(self.obstacle.gradient(x, t).iter().fold(0.0f64, |a, v| a.max(v.abs())));
                for row in self.obstacle.hessian(x, t) {
                    b = b.max(row.iter().fold(0.0f64, |a, v| a.max(v.abs())));
                }
                obstacle_bound = obstacle_bound.max(b);
            }
        }
        Ok(DataConstant { boundary_sup, obstacle_bound, k: boundary_sup.max(obstacle_bound) })
    }
}

/// Check `u0 > phi` (or `>=` under the relaxed policy) on the edge ring.
pub fn validate_compatibility(spec: &ProblemSpec) -> Result<CompatibilityReport, ProblemError> {
    if !(spec.margin > 0.0 && spec.margin < 1.0) {
        return Err(ProblemError::BadMargin(spec.margin));
    }
    let grid = spec.grid()?;
    let n1 = grid.dim() - 1;
    let mut min_margin = f64::INFINITY;
    let mut worst = None;
    for level in 1..grid.levels() {
        let t = grid.time(level);
        for site in 0..grid.sites() {
            if grid.site_kind(site) != NodeKind::EdgeRing {
                continue;
            }
            let x = grid.site_x(site);
            let gap = spec.boundary.value(&x[..n1], 0.0, t) - spec.obstacle.value(&x[..n1], t);
            if gap < min_margin || gap.is_nan() {
                min_margin = gap;
                worst = Some(grid.point(Node { level, site }));
            }
        }
    }

    // initial slice: widen the band from the ring inwards while u0 > phi
    let t0 = grid.time(0);
    let m = grid.cells();
    let mut band_cells = 0;
    for depth in 0..=m {
        let ok = (0..grid.sites()).filter(|&s| grid.site_j(s) == 0).all(|s| {
            let i = grid.site_i(s);
            let dist = (0..n1).map(|a| i[a].min(grid.nx() - 1 - i[a])).min().unwrap_or(0);
            if dist > depth {
                return true;
            }
            let x = grid.site_x(s);
            spec.boundary.value(&x[..n1], 0.0, t0) > spec.obstacle.value(&x[..n1], t0)
        });
        if !ok {
            break;
        }
        band_cells = depth;
        if depth == m {
            band_cells = m;
        }
    }
    let initial_band = band_cells as f64 * grid.h();
    let passes = match spec.compatibility {
        CompatibilityPolicy::Strict => min_margin > 0.0,
        CompatibilityPolicy::Relaxed => min_margin >= -1e-12,
    };
    Ok(CompatibilityReport {
        min_ring_margin: min_margin,
        worst_ring_point: worst,
        initial_band,
        margin: spec.margin,
        margin_plausible: spec.margin <= initial_band + 1e-12,
        policy: spec.compatibility,
        passes,
    })
}

/// Nodal samples of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledData {
    /// `phi` at thin sites, level-major: `phi[level * thin + k]`.
    pub obstacle: Vec<f64>,
    pub thin_per_level: usize,
    /// `u0` at initial, lateral and edge-ring nodes.
    pub boundary: Vec<(Node, f64)>,
}

/// Level-by-level sampler shared by [`sample_to_grid`] and the solvers.
pub(crate) struct DataSampler<'a> {
    spec: &'a ProblemSpec,
    grid: &'a HalfCylinderGrid,
}

impl<'a> DataSampler<'a> {
    pub(crate) fn new(spec: &'a ProblemSpec, grid: &'a HalfCylinderGrid) -> Self {
        Self { spec, grid }
    }

    fn non_finite(&self, what: &'static str, level: usize, site: usize) -> ProblemError {
        let x = self.grid.site_x(site)[..self.grid.dim() - 1].to_vec();
        ProblemError::NonFinite { what, level, site, x, y: self.grid.site_y(site), t: self.grid.time(level) }
    }

    /// `phi` on thin sites at `level`.
    pub(crate) fn obstacle_level(&self, level: usize, out: &mut [f64]) -> Result<(), ProblemError> {
        let t = self.grid.time(level);
        let n1 = self.grid.dim() - 1;
        for (k, &site) in self.grid.thin_sites().iter().enumerate() {
            let v = self.spec.obstacle.value(&self.grid.site_x(site)[..n1], t);
            if !v.is_finite() {
                return Err(self.non_finite("obstacle", level, site));
            }
            out[k] = v;
        }
        Ok(())
    }

    /// Write `u0` into every site prescribed at `level` (all sites at level 0).
    pub(crate) fn boundary_level(&self, level: usize, slice: &mut [f64]) -> Result<(), ProblemError> {
        let t = self.grid.time(level);
        let n1 = self.grid.dim() - 1;
        for site in 0..self.grid.sites() {
            if level > 0 && !self.grid.is_dirichlet_site(site) {
                continue;
            }
            let v = self.spec.boundary.value(&self.grid.site_x(site)[..n1], self.grid.site_y(site), t);
            if !v.is_finite() {
                return Err(self.non_finite("boundary data", level, site));
            }
            slice[site] = v;
        }
        Ok(())
    }
}

/// Sample `phi` on thin nodes and `u0` on the initial and lateral boundary.
pub fn sample_to_grid(spec: &ProblemSpec) -> Result<SampledData, ProblemError> {
    let grid = spec.grid()?;
    let sampler = DataSampler::new(spec, &grid);
    let thin = grid.thin_sites().len();
    let mut obstacle = vec![0.0; thin * grid.levels()];
    let mut slice = vec![f64::NAN; grid.sites()];
    let mut boundary = Vec::new();
    for level in 0..grid.levels() {
        sampler.obstacle_level(level, &mut obstacle[level * thin..(level + 1) * thin])?;
        sampler.boundary_level(level, &mut slice)?;
        for (site, &v) in slice.iter().enumerate() {
            if level == 0 || grid.is_dirichlet_site(site) {
                boundary.push((Node { level, site }, v));
            }
        }
    }
    Ok(SampledData { obstacle, thin_per_level: thin, boundary })
}

/// Largest discrepancy between the obstacle's derivative evaluators and
/// centered differences of its values, over thin nodes.
pub fn check_obstacle_derivatives(spec: &ProblemSpec) -> Result<f64, ProblemError> {
    let grid = spec.grid()?;
    let n1 = grid.dim() - 1;
    let h = grid.h();
    let phi = &spec.obstacle;
    let mut worst = 0.0f64;
    for level in 0..grid.levels() {
        let t = grid.time(level);
        for &site in grid.thin_sites() {
            let x = grid.site_x(site);
            let x = &x[..n1];
            let grad = phi.gradient(x, t);
            let hess = phi.hessian(x, t);
            for a in 0..n1 {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[a] += h;
                m[a] -= h;
                let (fp, f0, fm) = (phi.value(&p, t), phi.value(x, t), phi.value(&m, t));
                worst = worst.max(((fp - fm) / (2.0 * h) - grad[a]).abs());
                worst = worst.max(((fp - 2.0 * f0 + fm) / (h * h) - hess[a][a]).abs());
            }
            let dt = grid.dt();
            let ft = (phi.value(x, t + dt) - phi.value(x, t - dt)) / (2.0 * dt);
            worst = worst.max((ft - phi.time_derivative(x, t)).abs());
        }
    }
    Ok(worst)
}
