//! Post-processing of solves: normal derivative, contact sets, seminorms,
//! decay fits and the verification battery (signs, semi-concavity,
//! reflection, barriers).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{parabolic_distance, CylinderKind, HalfCylinderGrid, Node, NodeKind, ParabolicPoint};
use crate::operators::{pucci_plus, EllipticOperator, SymMatrix};
use crate::problem::{ProblemError, ProblemSpec};
use crate::solvers::{discrete_hessian, Scheme, SolveMode, SolveResult, SolverError, SpaceTimeField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("grid has {0} normal levels; at least 3 are needed")]
    TooCoarse(usize),
    #[error("subcylinder of radius {0} contains no usable nodes")]
    EmptySubcylinder(f64),
    #[error("delta={0} must lie in (0, 1/2]")]
    BadDelta(f64),
    #[error("node level={level} site={site} is not a free-boundary node")]
    NotFreeBoundary { level: usize, site: usize },
    #[error("node level={level} site={site} is not in the non-contact set")]
    NotNonContact { level: usize, site: usize },
    #[error("at least 3 radii are needed, got {0}")]
    TooFewRadii(usize),
    #[error("radius {radius} is not admissible: {reason}")]
    BadRadius { radius: f64, reason: String },
    #[error("Hoelder exponent {0} must lie in (0, 1]")]
    BadExponent(f64),
    #[error("node set is empty")]
    EmptyNodeSet,
    #[error("values and points differ in length ({values} vs {points})")]
    LengthMismatch { values: usize, points: usize },
    #[error("gamma={0} must be positive")]
    BadGamma(f64),
    #[error("C0={c0} must exceed the threshold {threshold}")]
    BarrierConstant { c0: f64, threshold: f64 },
    #[error("reflection check needs a Signorini or penalized solve, got {0:?}")]
    WrongMode(SolveMode),
}

/// Default contact threshold factor: `tol_contact = 10 h^2`.
pub const CONTACT_TOL_FACTOR: f64 = 10.0;

pub fn default_tol_contact(h: f64) -> f64 {
    CONTACT_TOL_FACTOR * h * h
}

/// Default tolerance of the sign check: `5 h`.
pub fn default_sigma_tol(h: f64) -> f64 {
    5.0 * h
}

/// `sigma_h = (-3u(x,0) + 4u(x,h) - u(x,2h)) / (2h)` on thin nodes of every
/// level after the initial one.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaField {
    grid: HalfCylinderGrid,
    /// Levels `1..`, level-major over thin nodes.
    values: Vec<f64>,
}

impl SigmaField {
    /// Synthetic field `sigma(x, t)`.
    pub fn from_fn(grid: HalfCylinderGrid, mut f: impl FnMut(&[f64], f64) -> f64) -> Self {
        let n1 = grid.dim() - 1;
        let mut values = Vec::new();
        for level in 1..grid.levels() {
            for &s in grid.thin_sites() {
                values.push(f(&grid.site_x(s)[..n1], grid.time(level)));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &HalfCylinderGrid {
        &self.grid
    }

    pub fn thin_count(&self) -> usize {
        self.grid.thin_sites().len()
    }

    /// `sigma` at thin index `k` of `level >= 1`.
    pub fn get(&self, level: usize, k: usize) -> f64 {
        self.values[(level - 1) * self.thin_count() + k]
    }

    /// `(node, sigma)` over all defined nodes.
    pub fn iter(&self) -> impl Iterator<Item = (Node, f64)> + '_ {
        let thin = self.grid.thin_sites();
        self.values.iter().enumerate().map(move |(i, &v)| {
            let level = i / thin.len() + 1;
            (Node { level, site: thin[i % thin.len()] }, v)
        })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Flip the sign, as a harness self-test.
    pub fn negated(&self) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|v| -v).collect() }
    }
}

pub fn compute_sigma(result: &SolveResult) -> Result<SigmaField, AnalysisError> {
    compute_sigma_field(&result.field)
}

pub fn compute_sigma_field(field: &SpaceTimeField) -> Result<SigmaField, AnalysisError> {
    let grid = field.grid();
    if grid.ny() < 3 {
        return Err(AnalysisError::TooCoarse(grid.ny()));
    }
    let h = grid.h();
    let mut values = Vec::with_capacity((grid.levels() - 1) * grid.thin_sites().len());
    for level in 1..grid.levels() {
        let u = field.slice(level);
        for &s in grid.thin_sites() {
            values.push((-3.0 * u[s] + 4.0 * u[s + 1] - u[s + 2]) / (2.0 * h));
        }
    }
    Ok(SigmaField { grid: grid.clone(), values })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignCheck {
    pub passes: bool,
    pub max_sigma: f64,
    pub tol: f64,
    pub worst: Option<ParabolicPoint>,
}

pub fn check_sigma_nonpositive(sigma: &SigmaField, tol: f64) -> SignCheck {
    let mut worst = None;
    let mut max_sigma = f64::NEG_INFINITY;
    for (node, v) in sigma.iter() {
        if v > max_sigma || v.is_nan() {
            max_sigma = v;
            worst = Some(sigma.grid.point(node));
        }
    }
    SignCheck { passes: max_sigma <= tol, max_sigma, tol, worst }
}

/// Contact (`Delta*`), non-contact (`Omega*`) and free-boundary (`Gamma`)
/// thin nodes, for every level after the initial one.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactDecomposition {
    pub tol_contact: f64,
    grid: HalfCylinderGrid,
    contact: Vec<bool>,
    gamma: Vec<bool>,
}

impl ContactDecomposition {
    fn index(&self, level: usize, k: usize) -> usize {
        (level - 1) * self.grid.thin_sites().len() + k
    }

    pub fn is_contact(&self, level: usize, k: usize) -> bool {
        self.contact[self.index(level, k)]
    }

    pub fn is_gamma(&self, level: usize, k: usize) -> bool {
        self.gamma[self.index(level, k)]
    }

    fn nodes_where(&self, flags: &[bool], want: bool) -> Vec<Node> {
        let thin = self.grid.thin_sites();
        flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == want)
            .map(|(i, _)| Node { level: i / thin.len() + 1, site: thin[i % thin.len()] })
            .collect()
    }

    pub fn delta_nodes(&self) -> Vec<Node> {
        self.nodes_where(&self.contact, true)
    }

    pub fn omega_nodes(&self) -> Vec<Node> {
        self.nodes_where(&self.contact, false)
    }

    pub fn gamma_nodes(&self) -> Vec<Node> {
        self.nodes_where(&self.gamma, true)
    }

    /// Free-boundary nodes of one level.
    pub fn gamma_at(&self, level: usize) -> Vec<Node> {
        let thin = self.grid.thin_sites();
        (0..thin.len()).filter(|&k| self.is_gamma(level, k)).map(|k| Node { level, site: thin[k] }).collect()
    }

    pub fn contact_count(&self) -> usize {
        self.contact.iter().filter(|&&c| c).count()
    }

    pub fn gamma_count(&self) -> usize {
        self.gamma.iter().filter(|&&c| c).count()
    }

    pub fn grid(&self) -> &HalfCylinderGrid {
        &self.grid
    }
}

/// Thin neighbours of `site` along tangential axes.
fn thin_neighbors(grid: &HalfCylinderGrid, site: usize) -> impl Iterator<Item = usize> + '_ {
    (0..grid.dim() - 1).flat_map(move |a| {
        let s = grid.stride(a);
        [site.checked_sub(s), Some(site + s)].into_iter().flatten().filter_map(|q| grid.thin_index(q))
    })
}

pub fn decompose_contact(result: &SolveResult, tol_contact: f64) -> ContactDecomposition {
    let grid = result.grid();
    let thin = grid.thin_sites();
    let mut contact = Vec::with_capacity((grid.levels() - 1) * thin.len());
    for level in 1..grid.levels() {
        for k in 0..thin.len() {
            contact.push(result.thin_value(level, k) - result.obstacle_at(level, k) <= tol_contact);
        }
    }
    let mut gamma = vec![false; contact.len()];
    for level in 1..grid.levels() {
        let base = (level - 1) * thin.len();
        for (k, &s) in thin.iter().enumerate() {
            gamma[base + k] = contact[base + k] && thin_neighbors(grid, s).any(|q| !contact[base + q]);
        }
    }
    ContactDecomposition { tol_contact, grid: grid.clone(), contact, gamma }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplementarityReport {
    /// `max |min(u - phi, -sigma_h)|`.
    pub max_min_residual: f64,
    /// `max |sigma_h (u - phi)|`.
    pub max_product: f64,
    pub worst_min: Option<ParabolicPoint>,
    pub worst_product: Option<ParabolicPoint>,
}

pub fn complementarity_residual(result: &SolveResult, sigma: &SigmaField) -> ComplementarityReport {
    let grid = result.grid();
    let mut rep = ComplementarityReport { max_min_residual: 0.0, max_product: 0.0, worst_min: None, worst_product: None };
    for level in 1..grid.levels() {
        for (k, &site) in grid.thin_sites().iter().enumerate() {
            let gap = result.thin_value(level, k) - result.obstacle_at(level, k);
            let s = sigma.get(level, k);
            let m = gap.min(-s).abs();
            let p = (s * gap).abs();
            if m > rep.max_min_residual {
                rep.max_min_residual = m;
                rep.worst_min = Some(grid.point(Node { level, site }));
            }
            if p > rep.max_product {
                rep.max_product = p;
                rep.worst_product = Some(grid.point(Node { level, site }));
            }
        }
    }
    rep
}

/// One-sided second-order quantities on `Q_{1-delta}^+` centred at
/// `(0, 0, t_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SemiconcavityExtrema {
    /// Max centred first difference in any axis.
    pub max_first_difference: f64,
    /// Min second tangential difference.
    pub min_tangential_second: f64,
    /// Min backward time difference.
    pub min_time_difference: f64,
    /// Max second normal difference.
    pub max_normal_second: f64,
    pub nodes: usize,
}

fn subcylinder_nodes(grid: &HalfCylinderGrid, delta: f64) -> Result<Vec<Node>, AnalysisError> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(AnalysisError::BadDelta(delta));
    }
    let center = ParabolicPoint { x: [0.0; 2], y: 0.0, t: grid.time(grid.levels() - 1) };
    let r = 1.0 - delta;
    let nodes: Vec<Node> = grid
        .cylinder_nodes(&center, r, CylinderKind::Half)
        .into_iter()
        .filter(|n| n.level >= 1 && grid.site_kind(n.site) == NodeKind::Interior)
        .collect();
    if nodes.is_empty() {
        return Err(AnalysisError::EmptySubcylinder(r));
    }
    Ok(nodes)
}

/// Semiconcavity proxies of a solve; the time difference uses the march step.
pub fn semiconcavity_report(result: &SolveResult, delta: f64) -> Result<SemiconcavityExtrema, AnalysisError> {
    semiconcavity_core(&result.field, delta, |level| (result.before_slice(level), result.march_dt))
}

/// Semiconcavity proxies of a bare field; the time difference uses consecutive levels.
pub fn semiconcavity_report_field(field: &SpaceTimeField, delta: f64) -> Result<SemiconcavityExtrema, AnalysisError> {
    let dt = field.grid().dt();
    semiconcavity_core(field, delta, |level| (field.slice(level - 1), dt))
}

fn semiconcavity_core<'a>(
    field: &'a SpaceTimeField,
    delta: f64,
    back: impl Fn(usize) -> (&'a [f64], f64),
) -> Result<SemiconcavityExtrema, AnalysisError> {
    let grid = field.grid();
    let nodes = subcylinder_nodes(grid, delta)?;
    let h = grid.h();
    let n = grid.dim();
    let mut out = SemiconcavityExtrema {
        max_first_difference: 0.0,
        min_tangential_second: f64::INFINITY,
        min_time_difference: f64::INFINITY,
        max_normal_second: f64::NEG_INFINITY,
        nodes: nodes.len(),
    };
    for node in nodes {
        let u = field.slice(node.level);
        let s = node.site;
        for a in 0..n {
            let st = grid.stride(a);
            let first = (u[s + st] - u[s - st]) / (2.0 * h);
            let second = (u[s + st] - 2.0 * u[s] + u[s - st]) / (h * h);
            out.max_first_difference = out.max_first_difference.max(first.abs());
            if a == n - 1 {
                out.max_normal_second = out.max_normal_second.max(second);
            } else {
                out.min_tangential_second = out.min_tangential_second.min(second);
            }
        }
        let (prev, dt) = back(node.level);
        out.min_time_difference = out.min_time_difference.min((u[s] - prev[s]) / dt);
    }
    Ok(out)
}

/// Max `|u_yy|` at first-row nodes (`y = h`) lying within one cell of a
/// free-boundary node of the same level, inside `Q_{1-delta}^+`.
pub fn gamma_adjacent_max_uyy(
    result: &SolveResult,
    decomp: &ContactDecomposition,
    delta: f64,
) -> Result<Option<f64>, AnalysisError> {
    let grid = result.grid();
    let nodes = subcylinder_nodes(grid, delta)?;
    let h = grid.h();
    let mut best: Option<f64> = None;
    for node in nodes.into_iter().filter(|n| grid.site_j(n.site) == 1) {
        let thin_site = node.site - 1;
        let near = decomp_near_gamma(grid, decomp, node.level, thin_site);
        if !near {
            continue;
        }
        let u = result.field.slice(node.level);
        let s = node.site;
        let uyy = ((u[s + 1] - 2.0 * u[s] + u[s - 1]) / (h * h)).abs();
        best = Some(best.map_or(uyy, |b| b.max(uyy)));
    }
    Ok(best)
}

fn decomp_near_gamma(grid: &HalfCylinderGrid, decomp: &ContactDecomposition, level: usize, thin_site: usize) -> bool {
    let here = grid.thin_index(thin_site).is_some_and(|k| decomp.is_gamma(level, k));
    here || thin_neighbors(grid, thin_site).any(|k| decomp.is_gamma(level, k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderSummary {
    pub h: Vec<f64>,
    /// Relative variation `(max - min) / max(max |v|, floor)` of each proxy.
    pub first_difference_variation: f64,
    pub tangential_negative_variation: f64,
    pub time_negative_variation: f64,
    pub normal_positive_variation: f64,
    /// Ratio of consecutive Gamma-adjacent `max |u_yy|` values (coarse to fine).
    pub gamma_growth: Vec<f64>,
    pub floor: f64,
}

fn relative_variation(v: &[f64], floor: f64) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = v.iter().fold(floor, |m, x| m.max(x.abs()));
    (max - min) / scale
}

/// Boundedness and sharpness signatures across a refinement ladder; `floor`
/// keeps variations of proxies that are near zero meaningful (the data
/// constant `K` is the natural choice).
pub fn semiconcavity_ladder(
    rungs: &[(f64, SemiconcavityExtrema, Option<f64>)],
    floor: f64,
) -> LadderSummary {
    let pick = |f: &dyn Fn(&SemiconcavityExtrema) -> f64| rungs.iter().map(|(_, e, _)| f(e)).collect::<Vec<_>>();
    let gamma: Vec<f64> = rungs.iter().filter_map(|(_, _, g)| *g).collect();
    LadderSummary {
        h: rungs.iter().map(|(h, _, _)| *h).collect(),
        first_difference_variation: relative_variation(&pick(&|e| e.max_first_difference), floor),
        tangential_negative_variation: relative_variation(&pick(&|e| (-e.min_tangential_second).max(0.0)), floor),
        time_negative_variation: relative_variation(&pick(&|e| (-e.min_time_difference).max(0.0)), floor),
        normal_positive_variation: relative_variation(&pick(&|e| e.max_normal_second.max(0.0)), floor),
        gamma_growth: gamma.windows(2).map(|w| w[1] / w[0]).collect(),
        floor,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReflectionReport {
    /// Max of `F(D^2 u*) - u*_t` on the thin plane of the doubled cylinder.
    pub max_thin_defect: f64,
    pub worst: Option<ParabolicPoint>,
    /// Max `|F(D^2 u) - u_t|` over interior nodes of the same field.
    pub truncation: f64,
    pub tolerance: f64,
    pub passes: bool,
}

/// Reflection check of a thin-obstacle solve. Time differences use the
/// march step, and the Hessian is taken on the slice the scheme used (the
/// earlier one for explicit marching), so the interior truncation is the
/// discrete residual of the scheme itself.
pub fn reflection_check(result: &SolveResult) -> Result<ReflectionReport, AnalysisError> {
    match result.mode {
        SolveMode::Signorini | SolveMode::Penalized { .. } => {}
        m => return Err(AnalysisError::WrongMode(m)),
    }
    let explicit = result.config.scheme == Scheme::Explicit;
    reflection_core(&result.problem.operator, &result.field, |level| {
        let back = result.before_slice(level);
        let eval = if explicit { back } else { result.field.slice(level) };
        (eval, back, result.march_dt)
    })
}

/// Defect of the even extension `u*(x, -y) = u(x, y)`. Off the thin plane
/// the extension coincides with `u`, so the defect there is the interior
/// truncation, which sets the tolerance. Uses consecutive stored levels.
pub fn reflection_check_field(op: &EllipticOperator, field: &SpaceTimeField) -> Result<ReflectionReport, AnalysisError> {
    let dt = field.grid().dt();
    reflection_core(op, field, |level| (field.slice(level), field.slice(level - 1), dt))
}

fn reflection_core<'a>(
    op: &EllipticOperator,
    field: &'a SpaceTimeField,
    pair: impl Fn(usize) -> (&'a [f64], &'a [f64], f64),
) -> Result<ReflectionReport, AnalysisError> {
    let grid = field.grid();
    let mut truncation = 0.0f64;
    let mut scale = 0.0f64;
    let mut max_thin_defect = f64::NEG_INFINITY;
    let mut worst = None;
    for level in 1..grid.levels() {
        let u = field.slice(level);
        let (eval, back, dt) = pair(level);
        for site in 0..grid.sites() {
            let kind = grid.site_kind(site);
            if !matches!(kind, NodeKind::Interior | NodeKind::ThinBoundary) {
                continue;
            }
            let f = op.eval(&discrete_hessian(grid, eval, site, 0.0)?).map_err(SolverError::from)?;
            let ut = (u[site] - back[site]) / dt;
            scale = scale.max(ut.abs());
            let defect = f - ut;
            if kind == NodeKind::Interior {
                truncation = truncation.max(defect.abs());
            } else if defect > max_thin_defect {
                max_thin_defect = defect;
                worst = Some(grid.point(Node { level, site }));
            }
        }
    }
    let tolerance = truncation + 1e-9 * (1.0 + scale);
    Ok(ReflectionReport { max_thin_defect, worst, truncation, tolerance, passes: max_thin_defect <= tolerance })
}

const HOLDER_MAX_NODES: usize = 5000;

fn subsample(len: usize) -> usize {
    len.div_ceil(HOLDER_MAX_NODES).max(1)
}

fn check_holder_input(points: &[ParabolicPoint], values: &[f64], alpha: f64) -> Result<(), AnalysisError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AnalysisError::BadExponent(alpha));
    }
    if points.len() != values.len() {
        return Err(AnalysisError::LengthMismatch { values: values.len(), points: points.len() });
    }
    if points.is_empty() {
        return Err(AnalysisError::EmptyNodeSet);
    }
    Ok(())
}

/// `[f]_alpha = sup |f(P1) - f(P2)| / p(P1, P2)^alpha` over node pairs; sets
/// above 5000 nodes are subsampled with a fixed stride.
pub fn holder_seminorm(points: &[ParabolicPoint], values: &[f64], alpha: f64) -> Result<f64, AnalysisError> {
    check_holder_input(points, values, alpha)?;
    let stride = subsample(points.len());
    let idx: Vec<usize> = (0..points.len()).step_by(stride).collect();
    let mut best = 0.0f64;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let d = parabolic_distance(&points[i], &points[j]);
            if d > 0.0 {
                best = best.max((values[i] - values[j]).abs() / d.powf(alpha));
            }
        }
    }
    Ok(best)
}

/// `<f>_{alpha+1} = sup |f(X, t) - f(X, s)| / |t - s|^{(1+alpha)/2}` over pairs
/// sharing the spatial position.
pub fn holder_time_seminorm(points: &[ParabolicPoint], values: &[f64], alpha: f64) -> Result<f64, AnalysisError> {
    check_holder_input(points, values, alpha)?;
    let stride = subsample(points.len());
    let idx: Vec<usize> = (0..points.len()).step_by(stride).collect();
    let mut best = 0.0f64;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let (p, q) = (&points[i], &points[j]);
            if p.x != q.x || p.y != q.y || p.t == q.t {
                continue;
            }
            best = best.max((values[i] - values[j]).abs() / (p.t - q.t).abs().powf(0.5 * (1.0 + alpha)));
        }
    }
    Ok(best)
}

/// Least-squares line through `(x, y)`: slope, intercept, `R^2`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitStatus {
    Fitted,
    /// The deviation vanishes on every radius; no exponent is defined.
    SuperSmooth,
    /// The window carries no signal (all zero).
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub p0: ParabolicPoint,
    pub a0: f64,
    /// Tangential components by centred differences; the normal one is 0.
    pub b0: Vec<f64>,
    pub radii: Vec<f64>,
    /// `max |u - R_0|` over `Q_r^+(P_0)` per radius.
    pub deviation: Vec<f64>,
    pub alpha: Option<f64>,
    pub r2: Option<f64>,
    pub status: FitStatus,
}

/// Admissible radii for a window centred at `p0`: at least `4h`, inside the
/// lateral faces and the time span.
pub fn radius_admissible(grid: &HalfCylinderGrid, p0: Node, r: f64) -> Result<(), String> {
    let p = grid.point(p0);
    let h = grid.h();
    if r < 4.0 * h * (1.0 - 1e-9) {
        return Err(format!("below 4h = {}", 4.0 * h));
    }
    let lateral = (0..grid.dim() - 1).map(|a| 1.0 - p.x[a].abs()).fold(1.0f64, f64::min);
    if r > lateral * (1.0 + 1e-9) {
        return Err(format!("exceeds the distance {lateral} to the lateral face"));
    }
    let span = p.t - grid.time(0);
    if r * r > span * (1.0 + 1e-9) {
        return Err(format!("r^2 exceeds the elapsed time {span}"));
    }
    Ok(())
}

fn check_radii(grid: &HalfCylinderGrid, p0: Node, radii: &[f64]) -> Result<(), AnalysisError> {
    if radii.len() < 3 {
        return Err(AnalysisError::TooFewRadii(radii.len()));
    }
    for &r in radii {
        radius_admissible(grid, p0, r).map_err(|reason| AnalysisError::BadRadius { radius: r, reason })?;
    }
    Ok(())
}

pub fn fit_u_decay(
    result: &SolveResult,
    decomp: &ContactDecomposition,
    p0: Node,
    radii: &[f64],
) -> Result<DecayFit, AnalysisError> {
    let grid = result.grid();
    let k0 = grid.thin_index(p0.site);
    if p0.level == 0 || !k0.is_some_and(|k| decomp.is_gamma(p0.level, k)) {
        return Err(AnalysisError::NotFreeBoundary { level: p0.level, site: p0.site });
    }
    check_radii(grid, p0, radii)?;
    let u = result.field.slice(p0.level);
    let h = grid.h();
    let n1 = grid.dim() - 1;
    let a0 = u[p0.site];
    let mut b0: Vec<f64> = (0..n1)
        .map(|a| {
            let s = grid.stride(a);
            (u[p0.site + s] - u[p0.site - s]) / (2.0 * h)
        })
        .collect();
    b0.push(0.0);
    let center = grid.point(p0);
    let mut deviation = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut m = 0.0f64;
        for node in grid.window_nodes(&center, r, CylinderKind::Half) {
            let x = grid.site_x(node.site);
            let mut r0 = a0;
            for a in 0..n1 {
                r0 += b0[a] * (x[a] - center.x[a]);
            }
            m = m.max((result.field.value(node) - r0).abs());
        }
        deviation.push(m);
    }
    let tiny = 1e-10 * (1.0 + a0.abs());
    let (alpha, r2, status) = if deviation.iter().all(|&m| m <= tiny) {
        (None, None, FitStatus::SuperSmooth)
    } else {
        let xs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
        let ys: Vec<f64> = deviation.iter().map(|m| m.max(f64::MIN_POSITIVE).ln()).collect();
        let (slope, _, r2) = linear_fit(&xs, &ys);
        (Some(slope - 1.0), Some(r2), FitStatus::Fitted)
    };
    Ok(DecayFit { p0: center, a0, b0, radii: radii.to_vec(), deviation, alpha, r2, status })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaDecayFit {
    pub p0: ParabolicPoint,
    pub radii: Vec<f64>,
    /// `max (-sigma)` over `Q_r^*(P_0)` per radius.
    pub depth: Vec<f64>,
    pub alpha: Option<f64>,
    pub c_sigma: Option<f64>,
    pub r2: Option<f64>,
    pub status: FitStatus,
}

/// Regress `log max_{Q_r^*} (-sigma)` on `log r` around a free-boundary node.
pub fn fit_sigma_decay(sigma: &SigmaField, p0: Node, radii: &[f64]) -> Result<SigmaDecayFit, AnalysisError> {
    let grid = sigma.grid();
    check_radii(grid, p0, radii)?;
    let center = grid.point(p0);
    let mut depth = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut m = 0.0f64;
        for node in grid.window_nodes(&center, r, CylinderKind::Thin) {
            if node.level == 0 {
                continue;
            }
            if let Some(k) = grid.thin_index(node.site) {
                m = m.max(-sigma.get(node.level, k));
            }
        }
        depth.push(m);
    }
    if depth.iter().all(|&d| d <= 1e-12) {
        return Ok(SigmaDecayFit {
            p0: center,
            radii: radii.to_vec(),
            depth,
            alpha: None,
            c_sigma: None,
            r2: None,
            status: FitStatus::Unconstrained,
        });
    }
    let xs: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = depth.iter().map(|d| d.max(f64::MIN_POSITIVE).ln()).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);
    Ok(SigmaDecayFit {
        p0: center,
        radii: radii.to_vec(),
        depth,
        alpha: Some(slope),
        c_sigma: Some(intercept.exp()),
        r2: Some(r2),
        status: FitStatus::Fitted,
    })
}

/// Free-boundary node of `level` admitting the most radii from `radii`;
/// ties go to the smallest first tangential coordinate.
pub fn select_free_boundary_point(decomp: &ContactDecomposition, level: usize, radii: &[f64]) -> Option<Node> {
    let grid = decomp.grid();
    let mut best: Option<(usize, f64, Node)> = None;
    for node in decomp.gamma_at(level) {
        let count = radii.iter().filter(|&&r| radius_admissible(grid, node, r).is_ok()).count();
        let x = grid.site_x(node.site)[0];
        let better = match best {
            None => true,
            Some((c, bx, _)) => count > c || (count == c && x < bx),
        };
        if better {
            best = Some((count, x, node));
        }
    }
    best.map(|(_, _, n)| n)
}

/// `(n / lambda) [Lambda (n - 1) + 1]`, the lower bound for `C_0`.
pub fn barrier_threshold(op: &EllipticOperator) -> f64 {
    let e = op.ellipticity();
    let n = op.dim() as f64;
    n / e.lambda() * (e.big_lambda() * (n - 1.0) + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierBox {
    pub half_width: f64,
    pub height: f64,
    pub duration: f64,
    /// `sup (u - h_{P0})` over the parabolic boundary in `y >= 0`.
    pub sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierReport {
    pub p0: ParabolicPoint,
    pub threshold: f64,
    pub c0: f64,
    pub k0: f64,
    /// Max over nodes of `M+(D^2 h, lambda/n, Lambda) - h_t`.
    pub supersolution_margin: f64,
    pub supersolution_holds: bool,
    /// Min over thin nodes with `t <= t0`, other than `P0`, of `h(x,0,t) - phi`.
    pub majorant_min_gap: f64,
    pub majorant_holds: bool,
    pub boxes: Vec<BarrierBox>,
    pub conclusion_holds: bool,
    pub tol: f64,
}

/// Barrier `h_{P0}` with `K0 = 2K` checked as a strict supersolution, as a
/// majorant of the obstacle, and through the comparison conclusion on random
/// boxes around `P0`.
pub fn barrier_h_check(
    result: &SolveResult,
    p0: Node,
    c0: f64,
    boxes: usize,
    seed: u64,
    tol: f64,
) -> Result<BarrierReport, AnalysisError> {
    let spec: &ProblemSpec = &result.problem;
    let grid = result.grid();
    let op = &spec.operator;
    let threshold = barrier_threshold(op);
    if !(c0 > threshold) {
        return Err(AnalysisError::BarrierConstant { c0, threshold });
    }
    let k = grid
        .thin_index(p0.site)
        .filter(|_| p0.level >= 1)
        .ok_or(AnalysisError::NotNonContact { level: p0.level, site: p0.site })?;
    if result.thin_value(p0.level, k) - result.obstacle_at(p0.level, k) <= default_tol_contact(grid.h()) {
        return Err(AnalysisError::NotNonContact { level: p0.level, site: p0.site });
    }
    let k0 = 2.0 * spec.data_constant()?.k;
    let n = grid.dim();
    let n1 = n - 1;
    let p = grid.point(p0);
    let phi0 = spec.obstacle.value(&p.x[..n1], p.t);
    let dphi0 = spec.obstacle.gradient(&p.x[..n1], p.t);
    let barrier = |x: &[f64], y: f64, t: f64| {
        let mut v = phi0 - k0 * (t - p.t) - c0 * k0 * y * y;
        for a in 0..n1 {
            let d = x[a] - p.x[a];
            v += dphi0[a] * d + k0 * d * d;
        }
        v
    };

    // (i) the Hessian is constant, but it is evaluated node by node
    let mut diag = vec![2.0 * k0; n];
    diag[n - 1] = -2.0 * c0 * k0;
    let hess = SymMatrix::diag(&diag);
    let e = op.ellipticity();
    let mut margin = f64::NEG_INFINITY;
    for _node in grid.nodes() {
        margin = margin.max(pucci_plus(&hess, e.lambda() / n as f64, e.big_lambda()) + k0);
    }

    // (ii)
    let mut min_gap = f64::INFINITY;
    for level in 1..=p0.level {
        let t = grid.time(level);
        for &s in grid.thin_sites() {
            if level == p0.level && s == p0.site {
                continue;
            }
            let x = grid.site_x(s);
            min_gap = min_gap.min(barrier(&x[..n1], 0.0, t) - spec.obstacle.value(&x[..n1], t));
        }
    }

    // (iii)
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i0 = grid.site_i(p0.site);
    let max_half = (0..n1).map(|a| i0[a].min(grid.nx() - 1 - i0[a])).min().unwrap_or(0);
    let mut out_boxes = Vec::with_capacity(boxes);
    if max_half >= 1 && p0.level >= 1 {
        for _ in 0..boxes {
            let a = rng.gen_range(1..=max_half);
            let b = rng.gen_range(1..grid.ny());
            let tau = rng.gen_range(1..=p0.level);
            let mut sup = f64::NEG_INFINITY;
            for level in p0.level - tau..=p0.level {
                let u = result.field.slice(level);
                let t = grid.time(level);
                for site in 0..grid.sites() {
                    let j = grid.site_j(site);
                    if j > b {
                        continue;
                    }
                    let i = grid.site_i(site);
                    let off = (0..n1).map(|c| i[c].abs_diff(i0[c])).max().unwrap_or(0);
                    if off > a {
                        continue;
                    }
                    let on_boundary = level == p0.level - tau || off == a || j == b;
                    if !on_boundary {
                        continue;
                    }
                    let x = grid.site_x(site);
                    sup = sup.max(u[site] - barrier(&x[..n1], grid.site_y(site), t));
                }
            }
            out_boxes.push(BarrierBox {
                half_width: a as f64 * grid.h(),
                height: b as f64 * grid.h(),
                duration: grid.time(p0.level) - grid.time(p0.level - tau),
                sup,
            });
        }
    }
    let conclusion_holds = out_boxes.iter().all(|b| b.sup >= -tol);
    Ok(BarrierReport {
        p0: p,
        threshold,
        c0,
        k0,
        supersolution_margin: margin,
        supersolution_holds: margin <= -k0 + tol,
        majorant_min_gap: min_gap,
        majorant_holds: min_gap > 0.0,
        boxes: out_boxes,
        conclusion_holds,
        tol,
    })
}

/// Thin nodes with `sigma > -gamma`.
pub fn omega_gamma_set(sigma: &SigmaField, gamma: f64) -> Result<Vec<Node>, AnalysisError> {
    if !(gamma > 0.0) {
        return Err(AnalysisError::BadGamma(gamma));
    }
    Ok(sigma.iter().filter(|&(_, v)| v > -gamma).map(|(n, _)| n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThinCylinderDiagnostic {
    pub center: ParabolicPoint,
    pub radius: f64,
}

/// Largest thin cylinder `Q_r^*(P')` inside `Omega*_gamma` among centres `P'`
/// within parabolic distance `search` of `near`. Diagnostic only.
pub fn largest_thin_cylinder(
    sigma: &SigmaField,
    gamma: f64,
    near: Node,
    search: f64,
) -> Result<Option<ThinCylinderDiagnostic>, AnalysisError> {
    if !(gamma > 0.0) {
        return Err(AnalysisError::BadGamma(gamma));
    }
    let grid = sigma.grid();
    let target = grid.point(near);
    let h = grid.h();
    let inside = |node: Node| {
        node.level >= 1 && grid.thin_index(node.site).is_some_and(|k| sigma.get(node.level, k) > -gamma)
    };
    let mut best: Option<ThinCylinderDiagnostic> = None;
    for level in 1..grid.levels() {
        for &s in grid.thin_sites() {
            let node = Node { level, site: s };
            let p = grid.point(node);
            if parabolic_distance(&p, &target) > search || !inside(node) {
                continue;
            }
            let mut r = h;
            loop {
                let next = r + h;
                let nodes = grid.cylinder_nodes(&p, next, CylinderKind::Thin);
                if next > 1.0 || !nodes.iter().all(|&q| inside(q)) {
                    break;
                }
                r = next;
            }
            if best.as_ref().is_none_or(|b| r > b.radius) {
                best = Some(ThinCylinderDiagnostic { center: p, radius: r });
            }
        }
    }
    Ok(best)
}

/// Widest band `1 - max|x_i| < rho` next to the edge ring on which a Neumann
/// solution stays strictly above the obstacle at every level; an empirical
/// stand-in for the margin `rho`.
pub fn empirical_margin(neumann: &SolveResult) -> f64 {
    let grid = neumann.grid();
    let n1 = grid.dim() - 1;
    let thin = grid.thin_sites();
    let depth_of = |s: usize| {
        let i = grid.site_i(s);
        (0..n1).map(|a| i[a].min(grid.nx() - 1 - i[a])).min().unwrap_or(0)
    };
    let mut worst_depth = usize::MAX;
    for level in 1..grid.levels() {
        for (k, &s) in thin.iter().enumerate() {
            if neumann.thin_value(level, k) <= neumann.obstacle_at(level, k) {
                worst_depth = worst_depth.min(depth_of(s));
            }
        }
    }
    if worst_depth == usize::MAX {
        return 1.0;
    }
    worst_depth as f64 * grid.h()
}

/// Aggregated verification results of one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RegularityReport {
    pub sigma_max: Option<f64>,
    pub sigma_tol: Option<f64>,
    pub complementarity_min_residual: Option<f64>,
    pub complementarity_product: Option<f64>,
    pub semiconcavity: Option<SemiconcavityExtrema>,
    pub u_fit: Option<DecayFit>,
    pub sigma_fit: Option<SigmaDecayFit>,
    pub fit_skipped: Option<String>,
    pub penalty_history: Vec<PenaltyRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenaltyRow {
    pub k: f64,
    pub sup_difference: f64,
    pub flux_sup: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    fn grid(h: f64) -> HalfCylinderGrid {
        HalfCylinderGrid::new(GridSpec::new(2, h, 0.25, -1.0, 0.0).unwrap()).unwrap()
    }

    #[test]
    fn sigma_stencil_examples() {
        let g = grid(0.1);
        let s = compute_sigma_field(&SpaceTimeField::from_fn(g.clone(), |_, y, _| -y)).unwrap();
        assert!(s.iter().all(|(_, v)| (v + 1.0).abs() < 1e-12));
        let s = compute_sigma_field(&SpaceTimeField::from_fn(g.clone(), |_, y, _| y * y)).unwrap();
        assert!(s.iter().all(|(_, v)| v.abs() < 1e-12));
        // (4h^3 - 8h^3) / 2h = -2h^2
        let s = compute_sigma_field(&SpaceTimeField::from_fn(g, |_, y, _| y * y * y)).unwrap();
        assert!(s.iter().all(|(_, v)| (v + 0.02).abs() < 1e-12));
        let s2 = compute_sigma_field(&SpaceTimeField::from_fn(grid(0.05), |_, y, _| y * y * y)).unwrap();
        assert!(s2.iter().all(|(_, v)| (v + 0.005).abs() < 1e-12));
    }

    #[test]
    fn sign_check_negative_control() {
        let g = grid(0.125);
        let s = compute_sigma_field(&SpaceTimeField::from_fn(g, |_, y, _| y)).unwrap();
        let c = check_sigma_nonpositive(&s, 5.0 * 0.125);
        assert!(!c.passes);
        assert!((c.max_sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn semiconcavity_exact_on_quadratics() {
        let g = grid(0.125);
        let e = semiconcavity_report_field(&SpaceTimeField::from_fn(g.clone(), |x, y, _| 0.3 * x[0] - 0.2 * y + 1.0), 0.25).unwrap();
        assert!(e.min_tangential_second.abs() < 1e-12 && e.max_normal_second.abs() < 1e-12);
        assert!(e.min_time_difference.abs() < 1e-12);
        let e = semiconcavity_report_field(&SpaceTimeField::from_fn(g, |x, _, _| -x[0] * x[0]), 0.25).unwrap();
        assert!((e.min_tangential_second + 2.0).abs() < 1e-12);
        assert!(matches!(
            semiconcavity_report_field(&SpaceTimeField::from_fn(grid(0.5), |_, _, _| 0.0), 0.75),
            Err(AnalysisError::BadDelta(_))
        ));
    }

    #[test]
    fn reflection_controls() {
        let g = grid(0.125);
        let op = EllipticOperator::trace(2);
        let good = reflection_check_field(&op, &SpaceTimeField::from_fn(g.clone(), |_, y, _| -y)).unwrap();
        assert!(good.passes);
        assert!((good.max_thin_defect + 2.0 / 0.125).abs() < 1e-9);
        let bad = reflection_check_field(&op, &SpaceTimeField::from_fn(g, |_, y, _| y)).unwrap();
        assert!(!bad.passes);
        assert!((bad.max_thin_defect - 2.0 / 0.125).abs() < 1e-9);
    }

    #[test]
    fn holder_examples() {
        let g = grid(0.125);
        let pts: Vec<ParabolicPoint> = g.thin_sites().iter().map(|&s| g.point(Node { level: 1, site: s })).collect();
        let xs: Vec<f64> = pts.iter().map(|p| p.x[0]).collect();
        assert!((holder_seminorm(&pts, &xs, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(holder_seminorm(&pts, &vec![3.0; pts.len()], 0.5).unwrap(), 0.0);
        assert_eq!(holder_seminorm(&pts[..1], &xs[..1], 0.5).unwrap(), 0.0);
        assert!(matches!(holder_seminorm(&pts, &xs, 1.5), Err(AnalysisError::BadExponent(_))));
    }

    #[test]
    fn planted_sigma_exponent() {
        let g = HalfCylinderGrid::new(GridSpec::new(2, 1.0 / 64.0, 1.0 / 64.0, -1.0, 0.0).unwrap()).unwrap();
        let s = SigmaField::from_fn(g.clone(), |x, _| -x[0].abs());
        let p0 = Node { level: g.levels() - 1, site: g.site_from_indices(&[64], 0) };
        let h = g.h();
        let fit = fit_sigma_decay(&s, p0, &[8.0 * h, 16.0 * h, 32.0 * h]).unwrap();
        assert!((fit.alpha.unwrap() - 1.0).abs() < 0.02, "{fit:?}");
        let zero = SigmaField::from_fn(g, |_, _| 0.0);
        assert_eq!(fit_sigma_decay(&zero, p0, &[8.0 * h, 16.0 * h, 32.0 * h]).unwrap().status, FitStatus::Unconstrained);
    }

    #[test]
    fn omega_gamma_nests() {
        let g = grid(0.125);
        let s = SigmaField::from_fn(g, |x, _| -x[0].abs());
        let a = omega_gamma_set(&s, 0.1).unwrap();
        let b = omega_gamma_set(&s, 0.2).unwrap();
        let c = omega_gamma_set(&s, 0.4).unwrap();
        assert!(a.iter().all(|n| b.contains(n)) && b.iter().all(|n| c.contains(n)));
        assert_eq!(omega_gamma_set(&s, 2.0).unwrap().len(), s.iter().count());
    }

    #[test]
    fn barrier_closed_form_margin() {
        // n=2, lambda=1, Lambda=2, K0=2, C0=7: M+(diag(4,-28), 1/2, 2) + 2 = 8 - 14 + 2
        let m = pucci_plus(&SymMatrix::diag(&[4.0, -28.0]), 0.5, 2.0) + 2.0;
        assert_eq!(m, -4.0);
        let op = EllipticOperator::pucci_plus(2, crate::operators::EllipticityPair::new(1.0, 2.0).unwrap());
        assert_eq!(barrier_threshold(&op), 6.0);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let (s, i, r2) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
