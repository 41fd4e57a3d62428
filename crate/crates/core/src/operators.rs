//! Fully nonlinear uniformly elliptic operators on symmetric matrices.
//!
//! The normal direction is the last coordinate. Pucci operators are evaluated
//! from closed-form eigenvalues (n <= 3).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::MAX_DIM;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("ellipticity pair must satisfy 0 < lambda <= Lambda (got lambda={lambda}, Lambda={big_lambda})")]
    BadEllipticity { lambda: f64, big_lambda: f64 },
    #[error("dimension mismatch: operator acts on {expected}x{expected}, matrix is {got}x{got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported matrix dimension {0}")]
    UnsupportedDimension(usize),
    #[error("max-linear family must be nonempty")]
    EmptyFamily,
    #[error("max-linear member {index} has an off-diagonal entry {value} at ({row},{col})")]
    OffDiagonalMember { index: usize, row: usize, col: usize, value: f64 },
    #[error("max-linear member {index} has diagonal entry {value} outside [{lambda}, {big_lambda}]")]
    MemberOutOfRange { index: usize, value: f64, lambda: f64, big_lambda: f64 },
    #[error("max-linear member {index} has {got} diagonal entries, expected {expected}")]
    MemberDimension { index: usize, got: usize, expected: usize },
}

/// Symmetric `n x n` matrix, `n <= 3`, stored densely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMatrix {
    n: usize,
    m: [[f64; MAX_DIM]; MAX_DIM],
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "matrix dimension {n} unsupported");
        Self { n, m: [[0.0; MAX_DIM]; MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = Self::zeros(n);
        for i in 0..n {
            out.m[i][i] = 1.0;
        }
        out
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut out = Self::zeros(d.len());
        for (i, v) in d.iter().enumerate() {
            out.m[i][i] = *v;
        }
        out
    }

    /// Build from rows, symmetrizing as `(M + M^T)/2`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, OperatorError> {
        let n = rows.len();
        if !(1..=MAX_DIM).contains(&n) {
            return Err(OperatorError::UnsupportedDimension(n));
        }
        let mut out = Self::zeros(n);
        for i in 0..n {
            if rows[i].len() != n {
                return Err(OperatorError::DimensionMismatch { expected: n, got: rows[i].len() });
            }
            for j in 0..n {
                out.m[i][j] = 0.5 * (rows[i][j] + rows[j][i]);
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    /// Set `m_ij` and `m_ji`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.m[i][j] = v;
        self.m[j][i] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.m[i][i]).sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.m[i][j] *= c;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.m[i][j] += other.m[i][j];
            }
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.m[i][j] * self.m[i][j];
            }
        }
        s.sqrt()
    }

    /// `tr(A M)`.
    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.m[i][j] * other.m[i][j];
            }
        }
        s
    }

    /// Eigenvalues in nondecreasing order; only the first `n` slots are used.
    #[inline]
    pub(crate) fn eig(&self) -> [f64; MAX_DIM] {
        match self.n {
            1 => [self.m[0][0], 0.0, 0.0],
            2 => {
                let (a, b, c) = (self.m[0][0], self.m[0][1], self.m[1][1]);
                let mean = 0.5 * (a + c);
                let d = 0.5 * (a - c);
                let rad = (d * d + b * b).sqrt();
                [mean - rad, mean + rad, 0.0]
            }
            _ => eig3(&self.m),
        }
    }
}

/// Smith's trigonometric closed form for symmetric 3x3 matrices.
fn eig3(a: &[[f64; MAX_DIM]; MAX_DIM]) -> [f64; MAX_DIM] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    let tr = a[0][0] + a[1][1] + a[2][2];
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(f64::total_cmp);
        return d;
    }
    let q = tr / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = *a;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (0.5 * det).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let mid = tr - hi - lo;
    let mut out = [lo, mid, hi];
    out.sort_by(f64::total_cmp);
    out
}

/// All eigenvalues of `m` in nondecreasing order.
pub fn eigenvalues_sym(m: &SymMatrix) -> Vec<f64> {
    m.eig()[..m.dim()].to_vec()
}

/// Flip the sign of the tangential-normal entries `m_in`, `m_ni` (`i < n`).
pub fn reflect_matrix(m: &SymMatrix) -> SymMatrix {
    let mut out = *m;
    let last = m.dim() - 1;
    for i in 0..last {
        out.set(i, last, -m.get(i, last));
    }
    out
}

/// Ellipticity constants `0 < lambda <= Lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticityPair {
    lambda: f64,
    big_lambda: f64,
}

impl EllipticityPair {
    pub fn new(lambda: f64, big_lambda: f64) -> Result<Self, OperatorError> {
        if !(lambda > 0.0) || !(lambda <= big_lambda) || !big_lambda.is_finite() {
            return Err(OperatorError::BadEllipticity { lambda, big_lambda });
        }
        Ok(Self { lambda, big_lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn big_lambda(&self) -> f64 {
        self.big_lambda
    }
}

/// `M^-(m; lambda, Lambda) = lambda * sum(e > 0) + Lambda * sum(e < 0)`.
#[inline]
pub fn pucci_minus(m: &SymMatrix, lambda: f64, big_lambda: f64) -> f64 {
    let e = m.eig();
    let mut s = 0.0;
    for &v in &e[..m.dim()] {
        s += if v > 0.0 { lambda * v } else { big_lambda * v };
    }
    s
}

/// `M^+(m; lambda, Lambda) = Lambda * sum(e > 0) + lambda * sum(e < 0)`.
#[inline]
pub fn pucci_plus(m: &SymMatrix, lambda: f64, big_lambda: f64) -> f64 {
    let e = m.eig();
    let mut s = 0.0;
    for &v in &e[..m.dim()] {
        s += if v > 0.0 { big_lambda * v } else { lambda * v };
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    Trace,
    PucciMinus,
    PucciPlus,
    MaxLinear,
}

impl OperatorKind {
    pub fn is_convex(self) -> bool {
        !matches!(self, OperatorKind::PucciMinus)
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Trace => "trace",
            OperatorKind::PucciMinus => "pucci_minus",
            OperatorKind::PucciPlus => "pucci_plus",
            OperatorKind::MaxLinear => "max_linear",
        }
    }
}

/// An operator `F: S_n -> R` with `F(O) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticOperator {
    kind: OperatorKind,
    dim: usize,
    ellipticity: EllipticityPair,
    /// Diagonals of the max-linear family members.
    family: Vec<[f64; MAX_DIM]>,
}

impl EllipticOperator {
    /// `F(M) = tr M`.
    pub fn trace(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim));
        Self {
            kind: OperatorKind::Trace,
            dim,
            ellipticity: EllipticityPair { lambda: 1.0, big_lambda: 1.0 },
            family: Vec::new(),
        }
    }

    pub fn pucci_minus(dim: usize, pair: EllipticityPair) -> Self {
        Self { kind: OperatorKind::PucciMinus, dim, ellipticity: pair, family: Vec::new() }
    }

    pub fn pucci_plus(dim: usize, pair: EllipticityPair) -> Self {
        Self { kind: OperatorKind::PucciPlus, dim, ellipticity: pair, family: Vec::new() }
    }

    /// `F(M) = max_a tr(A_a M)` over diagonal `A_a` with entries in `[lambda, Lambda]`.
    pub fn max_linear(pair: EllipticityPair, diagonals: &[Vec<f64>]) -> Result<Self, OperatorError> {
        let first = diagonals.first().ok_or(OperatorError::EmptyFamily)?;
        let dim = first.len();
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(OperatorError::UnsupportedDimension(dim));
        }
        let mut family = Vec::with_capacity(diagonals.len());
        for (index, d) in diagonals.iter().enumerate() {
            if d.len() != dim {
                return Err(OperatorError::MemberDimension { index, got: d.len(), expected: dim });
            }
            let mut row = [0.0; MAX_DIM];
            for (i, &v) in d.iter().enumerate() {
                if !(v >= pair.lambda && v <= pair.big_lambda) {
                    return Err(OperatorError::MemberOutOfRange {
                        index,
                        value: v,
                        lambda: pair.lambda,
                        big_lambda: pair.big_lambda,
                    });
                }
                row[i] = v;
            }
            family.push(row);
        }
        Ok(Self { kind: OperatorKind::MaxLinear, dim, ellipticity: pair, family })
    }

    /// As [`Self::max_linear`], from full coefficient matrices; off-diagonal
    /// entries are rejected so that `F_in = 0` holds exactly.
    pub fn max_linear_from_matrices(pair: EllipticityPair, members: &[SymMatrix]) -> Result<Self, OperatorError> {
        let mut diagonals = Vec::with_capacity(members.len());
        for (index, a) in members.iter().enumerate() {
            for row in 0..a.dim() {
                for col in 0..a.dim() {
                    let value = a.get(row, col);
                    if row != col && value != 0.0 {
                        return Err(OperatorError::OffDiagonalMember { index, row, col, value });
                    }
                }
            }
            diagonals.push((0..a.dim()).map(|i| a.get(i, i)).collect::<Vec<_>>());
        }
        Self::max_linear(pair, &diagonals)
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ellipticity(&self) -> EllipticityPair {
        self.ellipticity
    }

    pub fn family(&self) -> Vec<Vec<f64>> {
        self.family.iter().map(|d| d[..self.dim].to_vec()).collect()
    }

    /// `F(m)`, checking dimensions.
    pub fn eval(&self, m: &SymMatrix) -> Result<f64, OperatorError> {
        if m.dim() != self.dim {
            return Err(OperatorError::DimensionMismatch { expected: self.dim, got: m.dim() });
        }
        Ok(self.apply(m))
    }

    /// `F(m)` without the dimension check.
    #[inline]
    pub fn apply(&self, m: &SymMatrix) -> f64 {
        let EllipticityPair { lambda, big_lambda } = self.ellipticity;
        match self.kind {
            OperatorKind::Trace => m.trace(),
            OperatorKind::PucciMinus => pucci_minus(m, lambda, big_lambda),
            OperatorKind::PucciPlus => pucci_plus(m, lambda, big_lambda),
            OperatorKind::MaxLinear => {
                let mut best = f64::NEG_INFINITY;
                for d in &self.family {
                    let mut s = 0.0;
                    for i in 0..self.dim {
                        s += d[i] * m.m[i][i];
                    }
                    best = best.max(s);
                }
                best
            }
        }
    }
}

/// `F(m)` for any implemented kind.
pub fn eval_operator(op: &EllipticOperator, m: &SymMatrix) -> Result<f64, OperatorError> {
    op.eval(m)
}

/// Worst-case violations of the structural assumptions found by sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralReport {
    pub samples: usize,
    pub seed: u64,
    /// `max (F((M+N)/2) - (F(M)+F(N))/2)^+`; `None` when skipped (concave kind).
    pub convexity_violation: Option<f64>,
    /// `max |F(reflect(M)) - F(M)|`.
    pub reflection_violation: f64,
    /// Largest breach of `lambda tr N <= F(M+N) - F(M) <= Lambda tr N`.
    pub ellipticity_violation: f64,
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let mut m = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            m.set(i, j, rng.gen_range(-2.0..2.0));
        }
    }
    m
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let mut out = SymMatrix::zeros(n);
    for _ in 0..n {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for i in 0..n {
            for j in i..n {
                out.set(i, j, out.get(i, j) + v[i] * v[j]);
            }
        }
    }
    out
}

/// Sample convexity, reflection invariance and uniform ellipticity.
pub fn check_structural_assumptions(op: &EllipticOperator, samples: usize, seed: u64) -> StructuralReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = op.dim();
    let pair = op.ellipticity();
    let mut convex = 0.0f64;
    let mut reflect = 0.0f64;
    let mut ellip = 0.0f64;
    for _ in 0..samples.max(1) {
        let m = random_sym(&mut rng, n);
        let other = random_sym(&mut rng, n);
        let psd = random_psd(&mut rng, n);
        let fm = op.apply(&m);
        if op.kind().is_convex() {
            let mid = op.apply(&m.add(&other).scale(0.5));
            convex = convex.max(mid - 0.5 * (fm + op.apply(&other)));
        }
        reflect = reflect.max((op.apply(&reflect_matrix(&m)) - fm).abs());
        let diff = op.apply(&m.add(&psd)) - fm;
        let tr = psd.trace();
        ellip = ellip.max(pair.lambda() * tr - diff).max(diff - pair.big_lambda() * tr);
    }
    StructuralReport {
        samples: samples.max(1),
        seed,
        convexity_violation: op.kind().is_convex().then_some(convex.max(0.0)),
        reflection_violation: reflect,
        ellipticity_violation: ellip.max(0.0),
    }
}

/// `a_ij = \int_0^1 F_ij(s M) ds` by the midpoint rule with central-difference
/// partials, `F_ij = dF/dm_ij` for the symmetric extension of `F`.
pub fn linearization_coeffs(op: &EllipticOperator, m: &SymMatrix, quad_points: usize) -> Result<SymMatrix, OperatorError> {
    if m.dim() != op.dim() {
        return Err(OperatorError::DimensionMismatch { expected: op.dim(), got: m.dim() });
    }
    let n = m.dim();
    let q = quad_points.max(1);
    let eps = 1e-5 * (1.0 + m.norm());
    let mut a = SymMatrix::zeros(n);
    for k in 0..q {
        let s = (k as f64 + 0.5) / q as f64;
        let base = m.scale(s);
        for i in 0..n {
            for j in i..n {
                // perturbing m_ij of a general matrix moves both symmetric slots by eps/2
                let half = if i == j { eps } else { 0.5 * eps };
                let mut plus = base;
                let mut minus = base;
                plus.set(i, j, base.get(i, j) + half);
                minus.set(i, j, base.get(i, j) - half);
                let d = (op.apply(&plus) - op.apply(&minus)) / (2.0 * eps);
                a.set(i, j, a.get(i, j) + d / q as f64);
            }
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(l: f64, u: f64) -> EllipticityPair {
        EllipticityPair::new(l, u).unwrap()
    }

    #[test]
    fn eigenvalue_examples() {
        assert_eq!(eigenvalues_sym(&SymMatrix::identity(2)), vec![1.0, 1.0]);
        assert_eq!(eigenvalues_sym(&SymMatrix::diag(&[3.0, -2.0])), vec![-2.0, 3.0]);
        let swap = SymMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        assert_eq!(eigenvalues_sym(&swap), vec![-1.0, 1.0]);
    }

    #[test]
    fn eigenvalues_3x3_match_characteristic_polynomial() {
        let m = SymMatrix::from_rows(&[&[2.0, -1.0, 0.0], &[-1.0, 2.0, -1.0], &[0.0, -1.0, 2.0]]).unwrap();
        let e = eigenvalues_sym(&m);
        let s2 = std::f64::consts::SQRT_2;
        for (got, want) in e.iter().zip([2.0 - s2, 2.0, 2.0 + s2]) {
            assert!((got - want).abs() < 1e-13, "{got} vs {want}");
        }
    }

    #[test]
    fn operator_examples() {
        let p = pair(1.0, 2.0);
        let minus = EllipticOperator::pucci_minus(2, p);
        let plus = EllipticOperator::pucci_plus(2, p);
        assert_eq!(minus.eval(&SymMatrix::diag(&[1.0, -1.0])).unwrap(), -1.0);
        assert_eq!(plus.eval(&SymMatrix::identity(2)).unwrap(), 4.0);
        let ml = EllipticOperator::max_linear(p, &[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(ml.eval(&SymMatrix::diag(&[1.0, -1.0])).unwrap(), 0.0);
        for op in [EllipticOperator::trace(2), minus, plus, ml] {
            assert_eq!(op.eval(&SymMatrix::zeros(2)).unwrap(), 0.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let op = EllipticOperator::trace(2);
        assert!(matches!(
            op.eval(&SymMatrix::identity(3)),
            Err(OperatorError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn max_linear_rejects_general_members() {
        let p = pair(1.0, 2.0);
        let full = SymMatrix::from_rows(&[&[1.5, 0.1], &[0.1, 1.5]]).unwrap();
        assert!(matches!(
            EllipticOperator::max_linear_from_matrices(p, &[full]),
            Err(OperatorError::OffDiagonalMember { .. })
        ));
        assert!(matches!(
            EllipticOperator::max_linear(p, &[vec![0.5, 1.0]]),
            Err(OperatorError::MemberOutOfRange { .. })
        ));
        assert!(matches!(EllipticOperator::max_linear(p, &[]), Err(OperatorError::EmptyFamily)));
        assert!(EllipticityPair::new(2.0, 1.0).is_err());
    }

    #[test]
    fn reflection_examples() {
        let (a, b, c) = (0.7, -0.3, 1.9);
        let m = SymMatrix::from_rows(&[&[a, b], &[b, c]]).unwrap();
        let r = reflect_matrix(&m);
        assert_eq!(r.get(0, 1), -b);
        assert_eq!(r.get(0, 0), a);
        let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
        let want = [(a + c - disc) / 2.0, (a + c + disc) / 2.0];
        for e in [eigenvalues_sym(&m), eigenvalues_sym(&r)] {
            assert!((e[0] - want[0]).abs() < 1e-14 && (e[1] - want[1]).abs() < 1e-14);
        }
        let d = SymMatrix::diag(&[1.0, 2.0, 3.0]);
        assert_eq!(reflect_matrix(&d), d);
        assert_eq!(reflect_matrix(&r), m);
    }

    #[test]
    fn structural_checks() {
        let t = check_structural_assumptions(&EllipticOperator::trace(2), 200, 3);
        assert_eq!(t.convexity_violation, Some(0.0));
        assert!(t.reflection_violation == 0.0);
        assert!(t.ellipticity_violation < 1e-14);

        let m = check_structural_assumptions(&EllipticOperator::pucci_minus(2, pair(1.0, 2.0)), 200, 3);
        assert_eq!(m.convexity_violation, None);
        assert!(m.reflection_violation < 1e-14);

        let p = check_structural_assumptions(&EllipticOperator::pucci_plus(2, pair(1.0, 2.0)), 1000, 0);
        assert!(p.convexity_violation.unwrap() <= 1e-10);
        assert!(p.ellipticity_violation <= 1e-12);
    }

    #[test]
    fn linearization_examples() {
        let m = SymMatrix::from_rows(&[&[0.3, -1.2], &[-1.2, 0.8]]).unwrap();
        let a = linearization_coeffs(&EllipticOperator::trace(2), &m, 8).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((a.get(i, j) - want).abs() < 1e-9);
            }
        }
        let lam = pair(1.5, 3.0);
        let single = EllipticOperator::max_linear(lam, &[vec![1.5, 1.5]]).unwrap();
        let a = linearization_coeffs(&single, &m, 4).unwrap();
        assert!((a.get(0, 0) - 1.5).abs() < 1e-9 && (a.get(1, 1) - 1.5).abs() < 1e-9);
        assert!(a.get(0, 1).abs() < 1e-9);

        let plus = EllipticOperator::pucci_plus(2, pair(1.0, 2.0));
        let d = SymMatrix::diag(&[1.0, -1.0]);
        let a = linearization_coeffs(&plus, &d, 64).unwrap();
        assert!((a.frobenius_dot(&d) - 1.0).abs() < 1e-6);
    }
}
