//! Built-in problem instances.
//!
//! * `P1`: heat operator, `phi = 0`, data from the 3/2-homogeneous profile;
//!   the free boundary is `{x_1 = 0}`.
//! * `P2`: Pucci maximal operator (1, 2) with the receding paraboloid
//!   `phi = 0.5 - |x|^2 - t/4`; a genuine free boundary forms.
//! * `P3`: max-linear operator with an obstacle above the data; every thin
//!   node ends in contact.
//! * `P4`: max-linear operator with `phi = -1`; contact never happens.

use std::sync::Arc;

use crate::geometry::GridSpec;
use crate::operators::{EllipticOperator, EllipticityPair};
use crate::problem::{
    CompatibilityPolicy, HeatMode, PolyBoundary, PolyObstacle, Polynomial, ProblemError, ProblemSpec,
    SignoriniProfile,
};
use crate::solvers::cfl_limit;

/// Default horizon `(-1, 0]`.
pub const DEFAULT_SPAN: (f64, f64) = (-1.0, 0.0);
/// Default CFL safety factor.
pub const DEFAULT_THETA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltIn {
    P1,
    P2,
    P3,
    P4,
}

impl BuiltIn {
    pub const ALL: [BuiltIn; 4] = [BuiltIn::P1, BuiltIn::P2, BuiltIn::P3, BuiltIn::P4];

    pub fn from_name(name: &str) -> Result<Self, ProblemError> {
        match name.to_ascii_uppercase().as_str() {
            "P1" => Ok(Self::P1),
            "P2" => Ok(Self::P2),
            "P3" => Ok(Self::P3),
            "P4" => Ok(Self::P4),
            _ => Err(ProblemError::UnknownProblem(name.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::P1 => "P1",
            Self::P2 => "P2",
            Self::P3 => "P3",
            Self::P4 => "P4",
        }
    }

    pub fn operator(self, n: usize) -> EllipticOperator {
        let pair = EllipticityPair::new(1.0, 2.0).expect("valid pair");
        match self {
            Self::P1 => EllipticOperator::trace(n),
            Self::P2 => EllipticOperator::pucci_plus(n, pair),
            Self::P3 | Self::P4 => {
                let mut family = vec![vec![1.0; n]];
                for a in 0..n {
                    let mut d = vec![1.0; n];
                    d[a] = 2.0;
                    family.push(d);
                }
                EllipticOperator::max_linear(pair, &family).expect("diagonal family within [1, 2]")
            }
        }
    }

    /// The problem on `(-1, 0]` with the largest fitted explicit step.
    pub fn spec(self, n: usize, h: f64) -> Result<ProblemSpec, ProblemError> {
        let op = self.operator(n);
        let grid = explicit_grid(&op, n, h, DEFAULT_SPAN.0, DEFAULT_SPAN.1, DEFAULT_THETA)?;
        self.spec_on(grid)
    }

    /// The problem on a given grid.
    pub fn spec_on(self, grid: GridSpec) -> Result<ProblemSpec, ProblemError> {
        let n = grid.n;
        let n1 = n - 1;
        let op = self.operator(n);
        // obstacle polynomials in (x_1..x_{n-1}, t), data in (x_1..x_{n-1}, y, t)
        let xt = |a: Option<usize>, pa: u32, pt: u32| {
            let mut p = vec![0u32; n];
            if let Some(a) = a {
                p[a] = pa;
            }
            p[n1] = pt;
            p
        };
        let xyt = |a: Option<usize>, pa: u32, py: u32| {
            let mut p = vec![0u32; n + 1];
            if let Some(a) = a {
                p[a] = pa;
            }
            p[n1] = py;
            p
        };
        let (obstacle, boundary, margin, policy, exact): (_, Arc<dyn crate::problem::BoundaryData>, _, _, _) =
            match self {
                Self::P1 => (
                    Polynomial::constant(n, 0.0),
                    Arc::new(SignoriniProfile),
                    0.25,
                    CompatibilityPolicy::Relaxed,
                    Some(Arc::new(SignoriniProfile) as Arc<dyn crate::problem::BoundaryData>),
                ),
                Self::P2 => {
                    let mut phi = vec![(xt(None, 0, 0), 0.5), (xt(None, 0, 1), -0.25)];
                    // 0.1 + (0.75 - |x|^2)(1 - 3y^2 + 2y^3): zero normal derivative at y = 0
                    let mut u0 = vec![
                        (xyt(None, 0, 0), 0.85),
                        (xyt(None, 0, 2), -2.25),
                        (xyt(None, 0, 3), 1.5),
                    ];
                    for a in 0..n1 {
                        phi.push((xt(Some(a), 2, 0), -1.0));
                        u0.push((xyt(Some(a), 2, 0), -1.0));
                        u0.push((xyt(Some(a), 2, 2), 3.0));
                        u0.push((xyt(Some(a), 2, 3), -2.0));
                    }
                    (
                        Polynomial::new(n, phi)?,
                        Arc::new(PolyBoundary(Polynomial::new(n + 1, u0)?)),
                        0.125,
                        CompatibilityPolicy::Strict,
                        None,
                    )
                }
                Self::P3 => {
                    // prod_a (1 - x_a^2) - 0.001, expanded over subsets of axes
                    let mut phi = Vec::new();
                    for mask in 0..(1u32 << n1) {
                        let mut p = vec![0u32; n];
                        for (a, slot) in p.iter_mut().enumerate().take(n1) {
                            if mask >> a & 1 == 1 {
                                *slot = 2;
                            }
                        }
                        let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                        phi.push((p, sign));
                    }
                    phi.push((vec![0; n], -0.001));
                    (
                        Polynomial::new(n, phi)?,
                        Arc::new(PolyBoundary(Polynomial::constant(n + 1, 0.0))),
                        0.0625,
                        CompatibilityPolicy::Strict,
                        None,
                    )
                }
                Self::P4 => {
                    let mut u0 = vec![(xyt(None, 0, 0), 0.25), (xyt(None, 0, 1), -0.5), (xyt(None, 0, 2), 0.25)];
                    for a in 0..n1 {
                        u0.push((xyt(Some(a), 2, 0), 0.5));
                    }
                    (
                        Polynomial::constant(n, -1.0),
                        Arc::new(PolyBoundary(Polynomial::new(n + 1, u0)?)),
                        0.5,
                        CompatibilityPolicy::Strict,
                        None,
                    )
                }
            };
        Ok(ProblemSpec {
            name: self.name().to_string(),
            operator: op,
            obstacle: Arc::new(PolyObstacle::new(obstacle)),
            boundary,
            grid,
            margin,
            compatibility: policy,
            exact,
        })
    }
}

/// Grid on `(t_start, t_end]` whose step is the largest stable explicit step
/// for `op` that also lets levels be stored at spacing close to `8 h^2`.
pub fn explicit_grid(
    op: &EllipticOperator,
    n: usize,
    h: f64,
    t_start: f64,
    t_end: f64,
    theta: f64,
) -> Result<GridSpec, ProblemError> {
    let dt_max = cfl_limit(op, h, theta);
    let block = ((8.0 * h * h / dt_max).floor() as usize).max(1);
    Ok(GridSpec::fitted(n, h, dt_max, t_start, t_end, block)?)
}

/// Heat operator with zero-flux data `e^{-pi^2 t} cos(pi y)`, which is also the
/// exact solution; the obstacle sits far below.
pub fn heat_mode_problem(grid: GridSpec) -> ProblemSpec {
    ProblemSpec {
        name: "heat-mode".into(),
        operator: EllipticOperator::trace(grid.n),
        obstacle: Arc::new(PolyObstacle::new(Polynomial::constant(grid.n, -1e3))),
        boundary: Arc::new(HeatMode),
        grid,
        margin: 0.5,
        compatibility: CompatibilityPolicy::Strict,
        exact: Some(Arc::new(HeatMode)),
    }
}
