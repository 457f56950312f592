//! Polynomial activation machinery.
//!
//! SiLU is approximated by its L2-optimal polynomial on an interval [lo, hi]
//! via Legendre projection: a_n = (2n+1)/2 * integral of f(x(u)) P_n(u) over
//! u in [-1, 1], computed with Gauss-Legendre quadrature. The Legendre form
//! is converted to monomial coefficients in the original variable for
//! ciphertext evaluation, which uses the x^2 / x^4 power ladder so a
//! degree-5 polynomial costs exactly 3 multiplicative levels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{CtVec, EngineError, PtVec, SlotCtx};

#[derive(Debug, Error, PartialEq)]
pub enum ActError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("no ciphertext evaluation plan for degree {0} (supported: 0..=5)")]
    DegreeUnsupported(usize),
    #[error("invalid interval [{0}, {1}]")]
    InvalidInterval(f64, f64),
}

/// P_n(x) by the Bonnet three-term recurrence
/// (n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}.
pub fn legendre_eval(n: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = x;
    for k in 1..n {
        let next = ((2 * k + 1) as f64 * x * cur - k as f64 * prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

/// SiLU: x * sigmoid(x).
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Gauss-Legendre quadrature rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// Nodes are the roots of P_order, found by Newton iteration from the
    /// Chebyshev-like initial guess; weights are 2 / ((1-x^2) P'_order(x)^2).
    pub fn gauss_legendre(order: usize) -> Self {
        assert!(order >= 1);
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let p = legendre_eval(n, x);
                let dp = deriv(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let dp = deriv(n, x);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        Self { nodes, weights }
    }

    /// Integral of f over [-1, 1].
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Integral of f over [lo, hi] via the affine change of variable.
    pub fn integrate_on(&self, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        half * self.integrate(|u| f(mid + half * u))
    }
}

/// dP_n/dx from the identity (x^2 - 1) P'_n = n (x P_n - P_{n-1}).
fn deriv(n: usize, x: f64) -> f64 {
    n as f64 * (x * legendre_eval(n, x) - legendre_eval(n - 1, x)) / (x * x - 1.0)
}

/// Legendre coefficients a_0..a_degree of the L2-optimal approximation of f
/// on [lo, hi]; the coefficients live in the normalized variable
/// u = (2x - hi - lo) / (hi - lo).
pub fn legendre_coeffs(
    f: impl Fn(f64) -> f64,
    degree: usize,
    interval: (f64, f64),
    quad_order: usize,
) -> Result<Vec<f64>, ActError> {
    let (lo, hi) = interval;
    if !(lo < hi) {
        return Err(ActError::InvalidInterval(lo, hi));
    }
    let quad = Quadrature::gauss_legendre(quad_order);
    let mid = 0.5 * (hi + lo);
    let half = 0.5 * (hi - lo);
    Ok((0..=degree)
        .map(|n| {
            let integral = quad.integrate(|u| f(mid + half * u) * legendre_eval(n, u));
            (2 * n + 1) as f64 / 2.0 * integral
        })
        .collect())
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, &v) in a.iter().enumerate() {
        out[i] += v;
    }
    for (i, &v) in b.iter().enumerate() {
        out[i] += v;
    }
    out
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|&v| v * s).collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Monomial coefficients of P_0..P_degree (in the same variable).
fn legendre_basis_monomials(degree: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0]];
    if degree >= 1 {
        basis.push(vec![0.0, 1.0]);
    }
    for k in 1..degree {
        let a = poly_scale(&poly_mul(&[0.0, 1.0], &basis[k]), (2 * k + 1) as f64);
        let b = poly_scale(&basis[k - 1], -(k as f64));
        basis.push(poly_scale(&poly_add(&a, &b), 1.0 / (k + 1) as f64));
    }
    basis
}

/// Convert Legendre coefficients (in the normalized variable of the
/// interval) to monomial coefficients in the original variable x, by
/// substituting u = s x + t with s = 2/(hi-lo), t = -(hi+lo)/(hi-lo).
pub fn to_monomial(a: &[f64], interval: (f64, f64)) -> Result<Vec<f64>, ActError> {
    let (lo, hi) = interval;
    if !(lo < hi) {
        return Err(ActError::InvalidInterval(lo, hi));
    }
    let degree = a.len().saturating_sub(1);
    let basis = legendre_basis_monomials(degree);
    let mut in_u = vec![0.0; degree + 1];
    for (n, &an) in a.iter().enumerate() {
        in_u = poly_add(&in_u, &poly_scale(&basis[n], an));
    }
    // Horner substitution of the affine map into the u-polynomial
    let s = 2.0 / (hi - lo);
    let t = -(hi + lo) / (hi - lo);
    let affine = [t, s];
    let mut out = vec![0.0];
    for &c in in_u.iter().rev() {
        out = poly_add(&poly_mul(&out, &affine), &[c]);
    }
    out.resize(degree + 1, 0.0);
    Ok(out)
}

/// Horner evaluation, lowest coefficient first.
pub fn eval_monomial(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// (l2, linf) error of the monomial polynomial against f on the interval:
/// l2 is sqrt of the quadrature integral of the squared error, linf the
/// max over a dense grid.
pub fn approx_error(
    f: impl Fn(f64) -> f64,
    coeffs: &[f64],
    interval: (f64, f64),
    grid: usize,
) -> (f64, f64) {
    let (lo, hi) = interval;
    let quad = Quadrature::gauss_legendre(64);
    let l2sq = quad.integrate_on(lo, hi, |x| {
        let e = f(x) - eval_monomial(coeffs, x);
        e * e
    });
    let grid = grid.max(1000);
    let linf = (0..=grid)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / grid as f64;
            (f(x) - eval_monomial(coeffs, x)).abs()
        })
        .fold(0.0, f64::max);
    (l2sq.max(0.0).sqrt(), linf)
}

/// A polynomial approximation in both bases with its error statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyApprox {
    pub degree: usize,
    pub interval: (f64, f64),
    pub legendre_coeffs: Vec<f64>,
    pub monomial_coeffs: Vec<f64>,
    pub l2_error: f64,
    pub linf_error: f64,
}

impl PolyApprox {
    pub fn build(
        f: impl Fn(f64) -> f64 + Copy,
        degree: usize,
        interval: (f64, f64),
        quad_order: usize,
    ) -> Result<Self, ActError> {
        let legendre = legendre_coeffs(f, degree, interval, quad_order)?;
        let monomial = to_monomial(&legendre, interval)?;
        let (l2, linf) = approx_error(f, &monomial, interval, 2000);
        Ok(Self {
            degree,
            interval,
            legendre_coeffs: legendre,
            monomial_coeffs: monomial,
            l2_error: l2,
            linf_error: linf,
        })
    }

    pub fn silu_default(degree: usize, b: f64, quad_order: usize) -> Result<Self, ActError> {
        Self::build(silu, degree, (-b, b), quad_order)
    }
}

/// Multiplicative depth of the ciphertext evaluation plan by degree.
pub fn poly_depth(degree: usize) -> Result<u32, ActError> {
    match degree {
        0 => Ok(0),
        1 => Ok(1),
        2 => Ok(2),
        3..=5 => Ok(3),
        d => Err(ActError::DegreeUnsupported(d)),
    }
}

/// Slotwise evaluation of a monomial polynomial on a ciphertext. Depth is a
/// function of degree only: {0: 0, 1: 1, 2: 2, 3..5: 3}, using the power
/// ladder t = x^2, q = t^2 with per-term coefficient multiplies aligned by
/// cost-free level drops.
pub fn eval_poly_ct(ctx: &mut SlotCtx, ct: &CtVec, coeffs: &[f64]) -> Result<CtVec, ActError> {
    let degree = coeffs.len().saturating_sub(1);
    let depth = poly_depth(degree)?;
    if ct.level < depth {
        return Err(ActError::Engine(EngineError::DepthExhausted));
    }
    if degree == 0 {
        let c = coeffs.first().copied().unwrap_or(0.0);
        return Ok(ctx.encode_const_ct(c, ct.level));
    }
    let n = ctx.params.n_slots;
    let target = ct.level - depth;

    let t = if degree >= 2 { Some(ctx.mul_ct(ct, ct)?) } else { None };
    let q = if degree >= 4 {
        let t = t.as_ref().unwrap();
        Some(ctx.mul_ct(t, t)?)
    } else {
        None
    };

    let mut terms: Vec<CtVec> = Vec::new();
    // x^1
    if coeffs.len() > 1 {
        terms.push(ctx.mul_pt(ct, &PtVec::splat(n, coeffs[1]))?);
    }
    // x^2
    if coeffs.len() > 2 {
        terms.push(ctx.mul_pt(t.as_ref().unwrap(), &PtVec::splat(n, coeffs[2]))?);
    }
    // x^3 = (m3 x) * x^2
    if coeffs.len() > 3 {
        let v = ctx.mul_pt(ct, &PtVec::splat(n, coeffs[3]))?;
        terms.push(ctx.mul_ct(&v, t.as_ref().unwrap())?);
    }
    // x^4
    if coeffs.len() > 4 {
        terms.push(ctx.mul_pt(q.as_ref().unwrap(), &PtVec::splat(n, coeffs[4]))?);
    }
    // x^5 = (m5 x) * x^4
    if coeffs.len() > 5 {
        let u = ctx.mul_pt(ct, &PtVec::splat(n, coeffs[5]))?;
        let u = ctx.level_drop(&u, ct.level - 2)?;
        terms.push(ctx.mul_ct(&u, q.as_ref().unwrap())?);
    }

    let mut acc: Option<CtVec> = None;
    for term in terms {
        let term = if term.level > target { ctx.level_drop(&term, target)? } else { term };
        acc = Some(match acc {
            Some(a) => ctx.add_ct(&a, &term)?,
            None => term,
        });
    }
    let acc = acc.unwrap();
    Ok(ctx.add_pt(&acc, &PtVec::splat(n, coeffs[0]))?)
}
