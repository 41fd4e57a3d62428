//! Discretization of the unit half-cylinder and parabolic metric utilities.
//!
//! Space is the box `[-1, 1]^{n-1} x [0, 1]` with tangential coordinates `x`
//! and the normal coordinate `y`; time runs over `[t_start, t_end]`. The grid
//! is uniform with width `h` in every spatial axis and step `dt` in time.
//!
//! Sites are indexed with `y` fastest: `site = xflat * ny + j`, where
//! `xflat = i_0 + nx * i_1` enumerates the tangential lattice.

use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("spatial dimension n={0} is not supported (expected 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("mesh width h={0} must be positive and finite")]
    BadMeshWidth(f64),
    #[error("1/h must be an integer so that y=0 and the lateral faces are node-aligned (h={0}, 1/h={1})")]
    NonIntegerInverseWidth(f64, f64),
    #[error("time step dt={0} must be positive and finite")]
    BadTimeStep(f64),
    #[error("time span ({0}, {1}] is empty or not finite")]
    BadTimeSpan(f64, f64),
    #[error("horizon {horizon} is not an integer multiple of dt={dt}")]
    HorizonNotMultiple { horizon: f64, dt: f64 },
    #[error("point has y={0} < 0 or a non-finite coordinate")]
    BadPoint(f64),
}

/// A space-time point `P = (x, y, t)`. Unused tangential slots are zero.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ParabolicPoint {
    pub x: [f64; MAX_DIM - 1],
    pub y: f64,
    pub t: f64,
}

impl ParabolicPoint {
    pub fn new(x: &[f64], y: f64, t: f64) -> Result<Self, GeometryError> {
        if x.len() > MAX_DIM - 1 {
            return Err(GeometryError::UnsupportedDimension(x.len() + 1));
        }
        if !(y >= 0.0) || !y.is_finite() || !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::BadPoint(y));
        }
        let mut xs = [0.0; MAX_DIM - 1];
        xs[..x.len()].copy_from_slice(x);
        Ok(Self { x: xs, y, t })
    }

    /// Point on the thin face `y = 0`.
    pub fn thin(x: &[f64], t: f64) -> Result<Self, GeometryError> {
        Self::new(x, 0.0, t)
    }

    pub(crate) fn spatial_distance(&self, other: &Self) -> f64 {
        let mut s = (self.y - other.y).powi(2);
        for i in 0..MAX_DIM - 1 {
            s += (self.x[i] - other.x[i]).powi(2);
        }
        s.sqrt()
    }
}

/// Parabolic distance `max(|X - Y|, |t - s|^{1/2})`.
pub fn parabolic_distance(p1: &ParabolicPoint, p2: &ParabolicPoint) -> f64 {
    p1.spatial_distance(p2).max((p1.t - p2.t).abs().sqrt())
}

/// Discretization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl GridSpec {
    pub fn new(n: usize, h: f64, dt: f64, t_start: f64, t_end: f64) -> Result<Self, GeometryError> {
        let spec = Self { n, h, dt, t_start, t_end };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid whose step is the largest `dt <= dt_max` that divides the horizon
    /// into a multiple of `block` steps.
    pub fn fitted(
        n: usize,
        h: f64,
        dt_max: f64,
        t_start: f64,
        t_end: f64,
        block: usize,
    ) -> Result<Self, GeometryError> {
        if !(dt_max > 0.0) || !dt_max.is_finite() {
            return Err(GeometryError::BadTimeStep(dt_max));
        }
        let horizon = t_end - t_start;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(GeometryError::BadTimeSpan(t_start, t_end));
        }
        let block = block.max(1);
        let raw = (horizon / dt_max * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let steps = raw.div_ceil(block) * block;
        Self::new(n, h, horizon / steps as f64, t_start, t_end)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.n < 2 || self.n > MAX_DIM {
            return Err(GeometryError::UnsupportedDimension(self.n));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(GeometryError::BadMeshWidth(self.h));
        }
        let inv = 1.0 / self.h;
        if (inv - inv.round()).abs() > 1e-9 * inv.max(1.0) {
            return Err(GeometryError::NonIntegerInverseWidth(self.h, inv));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(GeometryError::BadTimeStep(self.dt));
        }
        let horizon = self.t_end - self.t_start;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(GeometryError::BadTimeSpan(self.t_start, self.t_end));
        }
        let ratio = horizon / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(GeometryError::HorizonNotMultiple { horizon, dt: self.dt });
        }
        Ok(())
    }

    /// Number of cells per unit length, `1/h`.
    pub fn cells(&self) -> usize {
        (1.0 / self.h).round() as usize
    }

    pub fn steps(&self) -> usize {
        ((self.t_end - self.t_start) / self.dt).round() as usize
    }
}

/// Node classes; every space-time node carries exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Interior,
    ThinBoundary,
    Lateral,
    Initial,
    EdgeRing,
}

/// A space-time node: time level and spatial site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node {
    pub level: usize,
    pub site: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CylinderKind {
    /// `Q_r^+`: nodes with `y > 0`.
    Half,
    /// `Q_r^*`: nodes on `y = 0`.
    Thin,
}

/// Uniform lattice over the half-cylinder, with node classification.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfCylinderGrid {
    spec: GridSpec,
    m: usize,
    nx: usize,
    ny: usize,
    tangential_sites: usize,
    levels: usize,
    thin_sites: Vec<usize>,
}

/// Build the grid for `spec`.
pub fn build_grid(spec: GridSpec) -> Result<HalfCylinderGrid, GeometryError> {
    HalfCylinderGrid::new(spec)
}

impl HalfCylinderGrid {
    pub fn new(spec: GridSpec) -> Result<Self, GeometryError> {
        spec.validate()?;
        let m = spec.cells();
        let nx = 2 * m + 1;
        let ny = m + 1;
        let tangential_sites = nx.pow((spec.n - 1) as u32);
        let mut grid = Self {
            spec,
            m,
            nx,
            ny,
            tangential_sites,
            levels: spec.steps() + 1,
            thin_sites: Vec::new(),
        };
        grid.thin_sites = (0..grid.sites())
            .filter(|&s| grid.site_j(s) == 0 && !grid.on_lateral_x(s))
            .collect();
        Ok(grid)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.n
    }

    pub fn h(&self) -> f64 {
        self.spec.h
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt
    }

    /// Nodes per tangential axis.
    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Nodes along the normal axis.
    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Cells per unit length.
    pub fn cells(&self) -> usize {
        self.m
    }

    /// Spatial sites per time level.
    pub fn sites(&self) -> usize {
        self.tangential_sites * self.ny
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn total_nodes(&self) -> usize {
        self.sites() * self.levels
    }

    pub fn time(&self, level: usize) -> f64 {
        if level + 1 == self.levels {
            self.spec.t_end
        } else {
            self.spec.t_start + level as f64 * self.spec.dt
        }
    }

    /// Sites on `y = 0` with `max |x_i| < 1`, in increasing site order.
    pub fn thin_sites(&self) -> &[usize] {
        &self.thin_sites
    }

    /// Position of `site` within [`Self::thin_sites`].
    pub fn thin_index(&self, site: usize) -> Option<usize> {
        self.thin_sites.binary_search(&site).ok()
    }

    /// Normal index `j` (`y = j h`).
    pub fn site_j(&self, site: usize) -> usize {
        site % self.ny
    }

    /// Tangential lattice indices `i_a` (`x_a = i_a h - 1`).
    pub fn site_i(&self, site: usize) -> [usize; MAX_DIM - 1] {
        let mut flat = site / self.ny;
        let mut out = [0; MAX_DIM - 1];
        for slot in out.iter_mut().take(self.spec.n - 1) {
            *slot = flat % self.nx;
            flat /= self.nx;
        }
        out
    }

    pub fn site_from_indices(&self, i: &[usize], j: usize) -> usize {
        let mut flat = 0;
        for a in (0..self.spec.n - 1).rev() {
            flat = flat * self.nx + i[a];
        }
        flat * self.ny + j
    }

    /// Site stride for a unit step along spatial axis `axis`
    /// (tangential axes first, the normal axis last).
    pub fn stride(&self, axis: usize) -> usize {
        if axis == self.spec.n - 1 {
            1
        } else {
            self.ny * self.nx.pow(axis as u32)
        }
    }

    pub fn coord(&self, index: usize) -> f64 {
        index as f64 * self.spec.h - 1.0
    }

    pub fn site_x(&self, site: usize) -> [f64; MAX_DIM - 1] {
        let i = self.site_i(site);
        let mut x = [0.0; MAX_DIM - 1];
        for a in 0..self.spec.n - 1 {
            x[a] = self.coord(i[a]);
        }
        x
    }

    pub fn site_y(&self, site: usize) -> f64 {
        self.site_j(site) as f64 * self.spec.h
    }

    pub fn point(&self, node: Node) -> ParabolicPoint {
        ParabolicPoint {
            x: self.site_x(node.site),
            y: self.site_y(node.site),
            t: self.time(node.level),
        }
    }

    fn on_lateral_x(&self, site: usize) -> bool {
        let i = self.site_i(site);
        (0..self.spec.n - 1).any(|a| i[a] == 0 || i[a] == self.nx - 1)
    }

    pub fn site_kind(&self, site: usize) -> NodeKind {
        let j = self.site_j(site);
        let lateral_x = self.on_lateral_x(site);
        match (j, lateral_x) {
            (0, false) => NodeKind::ThinBoundary,
            (0, true) => NodeKind::EdgeRing,
            (_, true) => NodeKind::Lateral,
            (j, false) if j == self.ny - 1 => NodeKind::Lateral,
            _ => NodeKind::Interior,
        }
    }

    pub fn kind(&self, node: Node) -> NodeKind {
        if node.level == 0 {
            NodeKind::Initial
        } else {
            self.site_kind(node.site)
        }
    }

    /// True for sites whose value is prescribed by boundary data at every
    /// level after the first.
    pub fn is_dirichlet_site(&self, site: usize) -> bool {
        matches!(self.site_kind(site), NodeKind::Lateral | NodeKind::EdgeRing)
    }

    pub fn nodes(&self) -> impl Iterator<Item = Node> + '_ {
        (0..self.levels).flat_map(move |level| (0..self.sites()).map(move |site| Node { level, site }))
    }

    pub fn node_index(&self, node: Node) -> usize {
        node.level * self.sites() + node.site
    }

    /// Grid with the same spatial lattice and every `stride`-th time level.
    pub fn coarsen_time(&self, stride: usize) -> Result<Self, GeometryError> {
        let spec = GridSpec {
            dt: self.spec.dt * stride as f64,
            ..self.spec
        };
        Self::new(spec)
    }

    /// Nodes inside `Q_r^+(center)` or `Q_r^*(center)`.
    pub fn cylinder_nodes(&self, center: &ParabolicPoint, r: f64, kind: CylinderKind) -> Vec<Node> {
        self.cylinder_nodes_with(center, r, kind, false)
    }

    /// As [`Self::cylinder_nodes`] with the closed ball `|X - X_0| <= r`, so
    /// that nodes at distance exactly `r` count; used for decay windows.
    pub fn window_nodes(&self, center: &ParabolicPoint, r: f64, kind: CylinderKind) -> Vec<Node> {
        self.cylinder_nodes_with(center, r, kind, true)
    }

    fn cylinder_nodes_with(&self, center: &ParabolicPoint, r: f64, kind: CylinderKind, closed: bool) -> Vec<Node> {
        let r2 = r * r;
        let ball = if closed { r2 * (1.0 + 1e-12) } else { r2 * (1.0 - 1e-12) };
        let mut out = Vec::new();
        let sites: Vec<usize> = (0..self.sites())
            .filter(|&s| {
                let j = self.site_j(s);
                let on_thin = j == 0;
                if on_thin != (kind == CylinderKind::Thin) {
                    return false;
                }
                let x = self.site_x(s);
                let y = self.site_y(s);
                let mut d2 = y * y;
                for a in 0..self.spec.n - 1 {
                    d2 += (x[a] - center.x[a]).powi(2);
                }
                d2 < ball
            })
            .collect();
        for level in 0..self.levels {
            let t = self.time(level);
            let lag = center.t - t;
            if lag < -1e-12 * self.spec.dt || lag >= r2 * (1.0 - 1e-12) {
                continue;
            }
            out.extend(sites.iter().map(|&site| Node { level, site }));
        }
        out
    }

    /// Level whose time is closest to `t`.
    pub fn nearest_level(&self, t: f64) -> usize {
        let k = ((t - self.spec.t_start) / self.spec.dt).round();
        (k.max(0.0) as usize).min(self.levels - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, h: f64) -> HalfCylinderGrid {
        build_grid(GridSpec::new(n, h, 0.25, -1.0, 0.0).unwrap()).unwrap()
    }

    fn thin_count(g: &HalfCylinderGrid, level: usize) -> usize {
        (0..g.sites())
            .filter(|&s| g.kind(Node { level, site: s }) == NodeKind::ThinBoundary)
            .count()
    }

    #[test]
    fn coarse_grids_enumerate_expected_thin_nodes() {
        let g = grid(2, 0.5);
        assert_eq!(g.nx(), 5);
        assert_eq!(g.ny(), 3);
        assert_eq!(thin_count(&g, 1), 3);
        let xs: Vec<f64> = g.thin_sites().iter().map(|&s| g.site_x(s)[0]).collect();
        assert_eq!(xs, vec![-0.5, 0.0, 0.5]);
        assert_eq!(g.total_nodes(), 5 * 3 * 5);

        assert_eq!(thin_count(&grid(2, 1.0), 1), 1);
        assert_eq!(thin_count(&grid(3, 0.5), 1), 9);
        assert_eq!(grid(3, 0.5).total_nodes(), 5 * 5 * 3 * 5);
    }

    #[test]
    fn non_integer_inverse_width_is_rejected() {
        let err = GridSpec::new(2, 0.3, 0.25, -1.0, 0.0).unwrap_err();
        assert!(matches!(err, GeometryError::NonIntegerInverseWidth(..)));
        assert!(matches!(
            GridSpec::new(4, 0.5, 0.25, -1.0, 0.0),
            Err(GeometryError::UnsupportedDimension(4))
        ));
        assert!(matches!(
            GridSpec::new(2, 0.5, 0.3, -1.0, 0.0),
            Err(GeometryError::HorizonNotMultiple { .. })
        ));
    }

    #[test]
    fn classification_is_a_partition_with_expected_locations() {
        for (n, h) in [(2, 0.25), (3, 0.5)] {
            let g = grid(n, h);
            let mut seen = 0;
            for node in g.nodes() {
                let p = g.point(node);
                let max_abs = p.x[..n - 1].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                match g.kind(node) {
                    NodeKind::ThinBoundary => assert!(p.y == 0.0 && max_abs < 1.0),
                    NodeKind::EdgeRing => assert!(p.y == 0.0 && (max_abs - 1.0).abs() < 1e-12),
                    NodeKind::Initial => assert_eq!(node.level, 0),
                    NodeKind::Lateral => assert!(p.y == 1.0 || (max_abs - 1.0).abs() < 1e-12),
                    NodeKind::Interior => assert!(p.y > 0.0 && p.y < 1.0 && max_abs < 1.0),
                }
                seen += 1;
            }
            assert_eq!(seen, g.total_nodes());
        }
    }

    #[test]
    fn parabolic_distance_examples() {
        let o = ParabolicPoint::new(&[0.0], 0.0, 0.0).unwrap();
        assert_eq!(parabolic_distance(&o, &o), 0.0);
        let a = ParabolicPoint::new(&[1.0], 0.0, -1.0).unwrap();
        assert_eq!(parabolic_distance(&o, &a), 1.0);
        let b = ParabolicPoint::new(&[0.1], 0.0, -0.09).unwrap();
        assert!((parabolic_distance(&o, &b) - 0.3).abs() < 1e-15);
        assert!(ParabolicPoint::new(&[0.0], -0.1, 0.0).is_err());
    }

    #[test]
    fn cylinder_saturates_and_cuts_off_below_mesh_width() {
        let g = grid(2, 0.25);
        let c = ParabolicPoint::thin(&[0.0], 0.0).unwrap();
        let half = g.cylinder_nodes(&c, 10.0, CylinderKind::Half);
        let thin = g.cylinder_nodes(&c, 10.0, CylinderKind::Thin);
        let all_half = g.nodes().filter(|n| g.site_j(n.site) > 0).count();
        let all_thin = g.nodes().filter(|n| g.site_j(n.site) == 0).count();
        assert_eq!(half.len(), all_half);
        assert_eq!(thin.len(), all_thin);

        // r < h: only the center's location, times in (t0 - r^2, t0]
        let small = g.cylinder_nodes(&c, 0.2, CylinderKind::Thin);
        assert!(!small.is_empty());
        for node in &small {
            let p = g.point(*node);
            assert_eq!(p.x[0], 0.0);
            assert!(p.t > -0.04 && p.t <= 0.0);
        }
        assert!(g.cylinder_nodes(&c, 0.2, CylinderKind::Half).is_empty());
    }

    #[test]
    fn nested_cylinders_are_included() {
        let g = build_grid(GridSpec::new(2, 1.0 / 16.0, 1.0 / 256.0, -1.0, 0.0).unwrap()).unwrap();
        let c = ParabolicPoint::thin(&[0.125], -0.25).unwrap();
        for kind in [CylinderKind::Half, CylinderKind::Thin] {
            let small: std::collections::HashSet<_> = g.cylinder_nodes(&c, 0.2, kind).into_iter().collect();
            let big: std::collections::HashSet<_> = g.cylinder_nodes(&c, 0.4, kind).into_iter().collect();
            assert!(!small.is_empty());
            assert!(small.is_subset(&big));
            assert!(big.len() > small.len());
        }
    }

    #[test]
    fn coarsened_grid_keeps_lattice() {
        let g = build_grid(GridSpec::new(2, 0.25, 0.0625, -1.0, 0.0).unwrap()).unwrap();
        let c = g.coarsen_time(4).unwrap();
        assert_eq!(c.sites(), g.sites());
        assert_eq!(c.levels(), 5);
        assert_eq!(c.time(4), 0.0);
    }

    #[test]
    fn fitted_grid_respects_bound_and_block() {
        let s = GridSpec::fitted(2, 1.0 / 32.0, 1e-4, -1.0, 0.0, 7).unwrap();
        assert!(s.dt <= 1e-4);
        assert_eq!(s.steps() % 7, 0);
    }
}
