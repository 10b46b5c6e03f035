//! Univariate B-spline bases on [0,1] and symmetric tensor-product graphon
//! functions.
//!
//! A graphon here is `g(u,v) = b(u)' C b(v)` where `b` is a clamped B-spline
//! basis and `C` is a symmetric coefficient matrix stored by its upper
//! triangle. Evaluating through the symmetrized quadratic form makes
//! `g(u,v) == g(v,u)` bit-exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SplineError {
    #[error("basis size K must be at least degree + 1 (= {min}), got {got}")]
    TooFewBasisFunctions { min: usize, got: usize },
    #[error("argument {0} outside [0, 1]")]
    OutOfDomain(f64),
    #[error("knot vector malformed: {0}")]
    BadKnots(String),
    #[error("coefficient matrix is {got}x{got}, expected {expected}x{expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("coefficient matrix not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
}

/// Clamped B-spline basis configuration on [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    num_basis: usize,
    degree: usize,
    knots: Vec<f64>,
}

impl BasisConfig {
    /// Cubic basis with uniform interior knots.
    pub fn cubic(num_basis: usize) -> Result<Self, SplineError> {
        Self::uniform(num_basis, 3)
    }

    /// Basis of given degree with uniform interior knots and clamped ends.
    pub fn uniform(num_basis: usize, degree: usize) -> Result<Self, SplineError> {
        if num_basis < degree + 1 {
            return Err(SplineError::TooFewBasisFunctions {
                min: degree + 1,
                got: num_basis,
            });
        }
        let n_interior = num_basis - degree - 1;
        let mut knots = vec![0.0; degree + 1];
        for i in 1..=n_interior {
            knots.push(i as f64 / (n_interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(degree + 1));
        Ok(Self {
            num_basis,
            degree,
            knots,
        })
    }

    /// Basis from an explicit knot vector (must be clamped on [0,1]).
    pub fn with_knots(num_basis: usize, degree: usize, knots: Vec<f64>) -> Result<Self, SplineError> {
        if num_basis < degree + 1 {
            return Err(SplineError::TooFewBasisFunctions {
                min: degree + 1,
                got: num_basis,
            });
        }
        if knots.len() != num_basis + degree + 1 {
            return Err(SplineError::BadKnots(format!(
                "length {} != K + degree + 1 = {}",
                knots.len(),
                num_basis + degree + 1
            )));
        }
        if knots.windows(2).any(|w| w[0] > w[1]) {
            return Err(SplineError::BadKnots("not non-decreasing".into()));
        }
        if knots[..=degree].iter().any(|&t| t != 0.0) {
            return Err(SplineError::BadKnots("first degree+1 knots must be 0".into()));
        }
        if knots[num_basis..].iter().any(|&t| t != 1.0) {
            return Err(SplineError::BadKnots("last degree+1 knots must be 1".into()));
        }
        if knots[degree + 1..num_basis]
            .iter()
            .any(|&t| t <= 0.0 || t >= 1.0)
        {
            return Err(SplineError::BadKnots(
                "interior knots must lie strictly inside (0,1)".into(),
            ));
        }
        Ok(Self {
            num_basis,
            degree,
            knots,
        })
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index of the knot span containing `x` (rightmost span at x = 1).
    fn span(&self, x: f64) -> usize {
        let n = self.num_basis;
        if x >= 1.0 {
            return n - 1;
        }
        // knots[span] <= x < knots[span+1], degree <= span <= n-1
        let mut lo = self.degree;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// All K basis values at `x`.
    ///
    /// At most degree+1 entries are nonzero and the entries sum to one.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>, SplineError> {
        if !(0.0..=1.0).contains(&x) {
            return Err(SplineError::OutOfDomain(x));
        }
        let mut out = vec![0.0; self.num_basis];
        let span = self.span(x);
        let vals = self.nonzero_values(x, span);
        for (offset, v) in vals.iter().enumerate() {
            out[span - self.degree + offset] = *v;
        }
        Ok(out)
    }

    /// Basis values and first derivatives at `x`.
    pub fn eval_with_deriv(&self, x: f64) -> Result<(Vec<f64>, Vec<f64>), SplineError> {
        if !(0.0..=1.0).contains(&x) {
            return Err(SplineError::OutOfDomain(x));
        }
        let p = self.degree;
        let mut vals = vec![0.0; self.num_basis];
        let mut derivs = vec![0.0; self.num_basis];
        let span = self.span(x);
        let nz = self.nonzero_values(x, span);
        for (offset, v) in nz.iter().enumerate() {
            vals[span - p + offset] = *v;
        }
        if p == 0 {
            return Ok((vals, derivs));
        }
        // d/dx B_{m,p} = p [ B_{m,p-1}/(t_{m+p}-t_m) - B_{m+1,p-1}/(t_{m+p+1}-t_{m+1}) ]
        let lower = BasisLower {
            knots: &self.knots,
            degree: p - 1,
        };
        let nz_lower = lower.nonzero_values(x, span);
        // lower-degree nonzeros occupy indices span-p+1 ..= span (in the
        // degree-(p-1) numbering over the same knot vector).
        let t = &self.knots;
        for (offset, bl) in nz_lower.iter().enumerate() {
            let m = span - (p - 1) + offset; // lower-degree basis index
            // contributes +p*bl/(t[m+p]-t[m]) to derivs[m]
            let d1 = t[m + p] - t[m];
            if d1 > 0.0 {
                derivs[m] += p as f64 * bl / d1;
            }
            // contributes -p*bl/(t[m+p]-t[m]) to derivs[m-1]
            if m >= 1 {
                let d2 = t[m + p] - t[m];
                if d2 > 0.0 {
                    derivs[m - 1] -= p as f64 * bl / d2;
                }
            }
        }
        Ok((vals, derivs))
    }

    /// Nonzero basis values on the given span (Cox–de Boor, triangular scheme).
    fn nonzero_values(&self, x: f64, span: usize) -> Vec<f64> {
        cox_de_boor(&self.knots, self.degree, x, span)
    }
}

/// Helper view for evaluating the degree-(p-1) basis over the same knots.
struct BasisLower<'a> {
    knots: &'a [f64],
    degree: usize,
}

impl BasisLower<'_> {
    fn nonzero_values(&self, x: f64, span_p: usize) -> Vec<f64> {
        cox_de_boor(self.knots, self.degree, x, span_p)
    }
}

fn cox_de_boor(knots: &[f64], degree: usize, x: f64, span: usize) -> Vec<f64> {
    let p = degree;
    let mut vals = vec![0.0; p + 1];
    vals[0] = 1.0;
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    for j in 1..=p {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom > 0.0 { vals[r] / denom } else { 0.0 };
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
    vals
}

/// Symmetric K x K coefficient matrix stored by upper triangle, row-major
/// over pairs (m, m') with m <= m'.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricCoeffMatrix {
    dim: usize,
    upper: Vec<f64>,
}

/// Number of free coefficients of a symmetric K x K matrix.
pub fn triangle_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

impl SymmetricCoeffMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            upper: vec![0.0; triangle_len(dim)],
        }
    }

    pub fn from_upper(dim: usize, upper: Vec<f64>) -> Self {
        assert_eq!(upper.len(), triangle_len(dim));
        Self { dim, upper }
    }

    /// Build from a dense matrix, rejecting asymmetric input.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self, SplineError> {
        let dim = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(SplineError::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            for j in 0..i {
                if rows[i][j] != rows[j][i] {
                    return Err(SplineError::NotSymmetric(i, j));
                }
            }
        }
        let mut upper = Vec::with_capacity(triangle_len(dim));
        for m in 0..dim {
            for mp in m..dim {
                upper.push(rows[m][mp]);
            }
        }
        Ok(Self { dim, upper })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn upper_mut(&mut self) -> &mut [f64] {
        &mut self.upper
    }

    /// Flat index of the free coefficient (m, m'), m <= m'.
    pub fn tri_index(&self, m: usize, mp: usize) -> usize {
        debug_assert!(m <= mp && mp < self.dim);
        // row-major upper triangle
        m * self.dim - m * (m + 1) / 2 + mp
    }

    pub fn get(&self, m: usize, mp: usize) -> f64 {
        let (a, b) = if m <= mp { (m, mp) } else { (mp, m) };
        self.upper[self.tri_index(a, b)]
    }

    pub fn set(&mut self, m: usize, mp: usize, value: f64) {
        let (a, b) = if m <= mp { (m, mp) } else { (mp, m) };
        let idx = self.tri_index(a, b);
        self.upper[idx] = value;
    }

    /// Quadratic form b(u)' C b(v) evaluated over the free triangle so that
    /// swapping `bu` and `bv` is bit-identical.
    pub fn quad_form(&self, bu: &[f64], bv: &[f64]) -> f64 {
        debug_assert_eq!(bu.len(), self.dim);
        debug_assert_eq!(bv.len(), self.dim);
        let mut acc = 0.0;
        let mut idx = 0;
        for m in 0..self.dim {
            acc += self.upper[idx] * (bu[m] * bv[m]);
            idx += 1;
            for mp in m + 1..self.dim {
                acc += self.upper[idx] * (bu[m] * bv[mp] + bu[mp] * bv[m]);
                idx += 1;
            }
        }
        acc
    }

    /// Gradient of the quadratic form with respect to the free triangle:
    /// entry (m, m') with m < m' is bu_m bv_m' + bu_m' bv_m, diagonal is
    /// bu_m bv_m. Accumulates `weight * grad` into `out`.
    pub fn accumulate_quad_form_grad(dim: usize, bu: &[f64], bv: &[f64], weight: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), triangle_len(dim));
        let mut idx = 0;
        for m in 0..dim {
            out[idx] += weight * bu[m] * bv[m];
            idx += 1;
            for mp in m + 1..dim {
                out[idx] += weight * (bu[m] * bv[mp] + bu[mp] * bv[m]);
                idx += 1;
            }
        }
    }

    /// Directional value d(u) = db(u)' C b(v), used for latent gradients.
    pub fn quad_form_du(&self, dbu: &[f64], bv: &[f64]) -> f64 {
        // same symmetrized walk with the derivative basis on the u side
        let mut acc = 0.0;
        let mut idx = 0;
        for m in 0..self.dim {
            acc += self.upper[idx] * dbu[m] * bv[m];
            idx += 1;
            for mp in m + 1..self.dim {
                acc += self.upper[idx] * (dbu[m] * bv[mp] + dbu[mp] * bv[m]);
                idx += 1;
            }
        }
        acc
    }
}

/// Evaluate the graphon `b(u)' C b(v)`.
pub fn graphon_eval(
    coeffs: &SymmetricCoeffMatrix,
    u: f64,
    v: f64,
    cfg: &BasisConfig,
) -> Result<f64, SplineError> {
    if coeffs.dim() != cfg.num_basis() {
        return Err(SplineError::DimensionMismatch {
            expected: cfg.num_basis(),
            got: coeffs.dim(),
        });
    }
    let bu = cfg.eval(u)?;
    let bv = cfg.eval(v)?;
    Ok(coeffs.quad_form(&bu, &bv))
}

/// Gradient of the graphon at (u, v): partials with respect to each free
/// coefficient plus the partials in u and v.
pub struct GraphonGradient {
    /// Length K(K+1)/2, ordered like [`SymmetricCoeffMatrix::upper`].
    pub coeff: Vec<f64>,
    pub du: f64,
    pub dv: f64,
}

pub fn graphon_gradient(
    coeffs: &SymmetricCoeffMatrix,
    u: f64,
    v: f64,
    cfg: &BasisConfig,
) -> Result<GraphonGradient, SplineError> {
    if coeffs.dim() != cfg.num_basis() {
        return Err(SplineError::DimensionMismatch {
            expected: cfg.num_basis(),
            got: coeffs.dim(),
        });
    }
    let (bu, dbu) = cfg.eval_with_deriv(u)?;
    let (bv, dbv) = cfg.eval_with_deriv(v)?;
    let mut coeff = vec![0.0; triangle_len(coeffs.dim())];
    SymmetricCoeffMatrix::accumulate_quad_form_grad(coeffs.dim(), &bu, &bv, 1.0, &mut coeff);
    Ok(GraphonGradient {
        coeff,
        du: coeffs.quad_form_du(&dbu, &bv),
        dv: coeffs.quad_form_du(&dbv, &bu),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent Cox–de Boor oracle: direct recursive definition,
    /// evaluated per basis function. Deliberately naive.
    fn naive_basis(knots: &[f64], degree: usize, m: usize, x: f64) -> f64 {
        if degree == 0 {
            let last_span = knots.iter().rposition(|&t| t < 1.0).unwrap_or(0);
            if (knots[m] <= x && x < knots[m + 1]) || (x >= 1.0 && m == last_span) {
                return 1.0;
            }
            return 0.0;
        }
        let mut acc = 0.0;
        let d1 = knots[m + degree] - knots[m];
        if d1 > 0.0 {
            acc += (x - knots[m]) / d1 * naive_basis(knots, degree - 1, m, x);
        }
        let d2 = knots[m + degree + 1] - knots[m + 1];
        if d2 > 0.0 {
            acc += (knots[m + degree + 1] - x) / d2 * naive_basis(knots, degree - 1, m + 1, x);
        }
        acc
    }

    #[test]
    fn clamped_endpoints() {
        let cfg = BasisConfig::cubic(7).unwrap();
        let b0 = cfg.eval(0.0).unwrap();
        assert_eq!(b0[0], 1.0);
        assert!(b0[1..].iter().all(|&v| v == 0.0));
        let b1 = cfg.eval(1.0).unwrap();
        assert_eq!(b1[6], 1.0);
        assert!(b1[..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_recursion() {
        let cfg = BasisConfig::cubic(7).unwrap();
        let b = cfg.eval(0.5).unwrap();
        let sum: f64 = b.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for m in 0..7 {
            let expect = naive_basis(cfg.knots(), 3, m, 0.5);
            assert!(
                (b[m] - expect).abs() < 1e-10,
                "m={m}: {} vs {}",
                b[m],
                expect
            );
        }
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        for k in [7usize, 13, 20] {
            let cfg = BasisConfig::cubic(k).unwrap();
            for i in 0..1000 {
                let x = i as f64 / 999.0;
                let b = cfg.eval(x).unwrap();
                let sum: f64 = b.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "K={k} x={x}");
                let nonzero = b.iter().filter(|&&v| v != 0.0).count();
                assert!(nonzero <= cfg.degree() + 1, "K={k} x={x} nonzero={nonzero}");
            }
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let cfg = BasisConfig::cubic(7).unwrap();
        assert!(matches!(cfg.eval(-0.1), Err(SplineError::OutOfDomain(_))));
        assert!(matches!(cfg.eval(1.1), Err(SplineError::OutOfDomain(_))));
    }

    #[test]
    fn malformed_knots_rejected() {
        assert!(BasisConfig::with_knots(7, 3, vec![0.0; 11]).is_err());
        // non-monotone interior
        let knots = vec![0.0, 0.0, 0.0, 0.0, 0.6, 0.4, 0.8, 1.0, 1.0, 1.0, 1.0];
        assert!(BasisConfig::with_knots(7, 3, knots).is_err());
    }

    #[test]
    fn graphon_zero_coeffs() {
        let cfg = BasisConfig::cubic(7).unwrap();
        let c = SymmetricCoeffMatrix::zeros(7);
        assert_eq!(graphon_eval(&c, 0.3, 0.9, &cfg).unwrap(), 0.0);
        let g = graphon_gradient(&c, 0.3, 0.9, &cfg).unwrap();
        assert_eq!(g.du, 0.0);
        assert_eq!(g.dv, 0.0);
    }

    #[test]
    fn graphon_endpoint_collapse() {
        let cfg = BasisConfig::cubic(7).unwrap();
        let mut c = SymmetricCoeffMatrix::zeros(7);
        for m in 0..7 {
            c.set(m, m, 2.0);
        }
        // basis at 0 is (1,0,...,0), so only coefficient (0,0) survives
        assert_eq!(graphon_eval(&c, 0.0, 0.0, &cfg).unwrap(), 2.0);
        let g = graphon_gradient(&c, 0.0, 0.0, &cfg).unwrap();
        for m in 0..7 {
            for mp in m..7 {
                let idx = c.tri_index(m, mp);
                if (m, mp) == (0, 0) {
                    assert_eq!(g.coeff[idx], 1.0);
                } else {
                    assert_eq!(g.coeff[idx], 0.0);
                }
            }
        }
    }

    #[test]
    fn graphon_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = BasisConfig::cubic(7).unwrap();
        let mut c = SymmetricCoeffMatrix::zeros(7);
        for m in 0..7 {
            for mp in m..7 {
                c.set(m, mp, rng.gen_range(-2.0..2.0));
            }
        }
        let (u, v) = (0.3, 0.8);
        let bu = cfg.eval(u).unwrap();
        let bv = cfg.eval(v).unwrap();
        // naive O(K^2) double sum over the full matrix
        let mut oracle = 0.0;
        for m in 0..7 {
            for mp in 0..7 {
                oracle += c.get(m, mp) * bu[m] * bv[mp];
            }
        }
        let got = graphon_eval(&c, u, v, &cfg).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn graphon_symmetry_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = BasisConfig::cubic(9).unwrap();
        let mut c = SymmetricCoeffMatrix::zeros(9);
        for m in 0..9 {
            for mp in m..9 {
                c.set(m, mp, rng.gen_range(-3.0..3.0));
            }
        }
        for _ in 0..100 {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let a = graphon_eval(&c, u, v, &cfg).unwrap();
            let b = graphon_eval(&c, v, u, &cfg).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn asymmetric_dense_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert!(matches!(
            SymmetricCoeffMatrix::from_dense(&rows),
            Err(SplineError::NotSymmetric(1, 0))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let k = *[5usize, 7, 9].choose(&mut rng).unwrap();
            let cfg = BasisConfig::cubic(k).unwrap();
            let mut c = SymmetricCoeffMatrix::zeros(k);
            for m in 0..k {
                for mp in m..k {
                    c.set(m, mp, rng.gen_range(-2.0..2.0));
                }
            }
            let u = rng.gen_range(0.05..0.95);
            let v = rng.gen_range(0.05..0.95);
            let g = graphon_gradient(&c, u, v, &cfg).unwrap();
            let h = 1e-6;
            let fd_u = (graphon_eval(&c, u + h, v, &cfg).unwrap()
                - graphon_eval(&c, u - h, v, &cfg).unwrap())
                / (2.0 * h);
            let fd_v = (graphon_eval(&c, u, v + h, &cfg).unwrap()
                - graphon_eval(&c, u, v - h, &cfg).unwrap())
                / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
            assert!(rel(g.du, fd_u) < 1e-6, "trial {trial}: du {} vs {}", g.du, fd_u);
            assert!(rel(g.dv, fd_v) < 1e-6, "trial {trial}: dv {} vs {}", g.dv, fd_v);
            // coefficient partials against central differences
            for m in 0..k {
                for mp in m..k {
                    let mut cp = c.clone();
                    cp.set(m, mp, c.get(m, mp) + h);
                    let up = graphon_eval(&cp, u, v, &cfg).unwrap();
                    cp.set(m, mp, c.get(m, mp) - h);
                    let dn = graphon_eval(&cp, u, v, &cfg).unwrap();
                    let fd = (up - dn) / (2.0 * h);
                    let idx = c.tri_index(m, mp);
                    assert!(rel(g.coeff[idx], fd) < 1e-6);
                }
            }
        }
    }
}
