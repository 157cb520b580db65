//! Scalar-generic evaluation backbone for the whole library.
//!
//! Every model quantity (constraints, forces, friction, the integrator
//! right-hand side) is written generically over the [`Scalar`] trait so that
//! a single code path serves three purposes:
//!
//! - `f64` — plain simulation,
//! - [`Dual<S>`] — forward-mode directional derivatives (Jacobian-vector
//!   products), nestable for second and third directional derivatives,
//! - [`CStep`] — complex-step evaluation used as a validation oracle,
//!   `df/dx ≈ Im(f(x + ih))/h` with no subtractive cancellation.
//!
//! Branch decisions (pivoting, error norms, convergence checks) always use
//! the leading value [`Scalar::re`], which keeps the control flow of a seeded
//! evaluation identical to the one of the underlying real evaluation.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Default complex-step size; small enough that the second-order term
/// underflows and the imaginary part is exact to machine precision.
pub const COMPLEX_STEP_H: f64 = 1e-30;

/// Arithmetic scalar for model evaluation.
///
/// Implemented by `f64`, [`CStep`], and [`Dual<S>`] for any `S: Scalar`,
/// which is what makes nested seeding (`Dual<Dual<f64>>`) possible.
pub trait Scalar:
    Copy
    + Clone
    + fmt::Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(x: f64) -> Self;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    /// Leading (value) part, used for branching, pivot selection and norms.
    fn re(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn powi(self, n: i32) -> Self {
        let mut out = Self::one();
        let mut base = if n < 0 { Self::one() / self } else { self };
        let mut k = n.unsigned_abs();
        while k > 0 {
            if k & 1 == 1 {
                out = out * base;
            }
            base = base * base;
            k >>= 1;
        }
        out
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

// ============================================================================
// Dual numbers (forward mode, one seed direction per evaluation pass)
// ============================================================================

/// First-order dual number `v + d·ε` over any scalar `S`.
///
/// One evaluation pass carries exactly one seed direction; Jacobians are
/// assembled column by column. Nesting `Dual<Dual<S>>` yields second
/// directional derivatives, which is how all constraint curvature products
/// are formed without materializing tensors.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Dual<S> {
    pub v: S,
    pub d: S,
}

impl<S: Scalar> Dual<S> {
    #[inline]
    pub fn new(v: S, d: S) -> Self {
        Dual { v, d }
    }
    /// Constant lift: derivative part is exactly zero.
    #[inline]
    pub fn constant(v: S) -> Self {
        Dual { v, d: S::zero() }
    }
    /// Seeded variable: derivative part one (times `seed`).
    #[inline]
    pub fn seeded(v: S, seed: S) -> Self {
        Dual { v, d: seed }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.v + rhs.v, self.d + rhs.d)
    }
}
impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.v - rhs.v, self.d - rhs.d)
    }
}
impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Dual::new(self.v * rhs.v, self.d * rhs.v + self.v * rhs.d)
    }
}
impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let v = self.v / rhs.v;
        Dual::new(v, (self.d - v * rhs.d) / rhs.v)
    }
}
impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.v, -self.d)
    }
}
impl<S: Scalar> AddAssign for Dual<S> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl<S: Scalar> SubAssign for Dual<S> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl<S: Scalar> MulAssign for Dual<S> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(S::from_f64(x))
    }
    #[inline]
    fn re(self) -> f64 {
        self.v.re()
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        Dual::new(r, self.d / (S::from_f64(2.0) * r))
    }
    #[inline]
    fn sin(self) -> Self {
        Dual::new(self.v.sin(), self.d * self.v.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        Dual::new(self.v.cos(), -self.d * self.v.sin())
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (S::one() - t * t))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
}

// ============================================================================
// Complex step
// ============================================================================

/// Complex number used for complex-step differentiation.
///
/// Only the operations needed by the model stack are provided; all of them
/// are holomorphic so the imaginary part transports the exact derivative.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CStep {
    pub re: f64,
    pub im: f64,
}

impl CStep {
    #[inline]
    pub fn new(re: f64, im: f64) -> Self {
        CStep { re, im }
    }
}

impl Add for CStep {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        CStep::new(self.re + rhs.re, self.im + rhs.im)
    }
}
impl Sub for CStep {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        CStep::new(self.re - rhs.re, self.im - rhs.im)
    }
}
impl Mul for CStep {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        CStep::new(
            self.re * rhs.re - self.im * rhs.im,
            self.re * rhs.im + self.im * rhs.re,
        )
    }
}
impl Div for CStep {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        // Smith's algorithm; robust for the tiny imaginary parts used here.
        if rhs.im.abs() <= rhs.re.abs() {
            let r = rhs.im / rhs.re;
            let den = rhs.re + rhs.im * r;
            CStep::new((self.re + self.im * r) / den, (self.im - self.re * r) / den)
        } else {
            let r = rhs.re / rhs.im;
            let den = rhs.re * r + rhs.im;
            CStep::new((self.re * r + self.im) / den, (self.im * r - self.re) / den)
        }
    }
}
impl Neg for CStep {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        CStep::new(-self.re, -self.im)
    }
}
impl AddAssign for CStep {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl SubAssign for CStep {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl MulAssign for CStep {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl Scalar for CStep {
    #[inline]
    fn from_f64(x: f64) -> Self {
        CStep::new(x, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        // Principal branch; the trajectories evaluated here keep re > 0
        // wherever sqrt appears (norms, cabs).
        let m = (self.re * self.re + self.im * self.im).sqrt();
        let r = ((m + self.re) * 0.5).sqrt();
        let i = if r == 0.0 {
            (-self.re).max(0.0).sqrt()
        } else {
            self.im / (2.0 * r)
        };
        CStep::new(r, i)
    }
    fn sin(self) -> Self {
        CStep::new(
            self.re.sin() * self.im.cosh(),
            self.re.cos() * self.im.sinh(),
        )
    }
    fn cos(self) -> Self {
        CStep::new(
            self.re.cos() * self.im.cosh(),
            -self.re.sin() * self.im.sinh(),
        )
    }
    fn tanh(self) -> Self {
        // tanh(a+bi) = (tanh a + i tan b) / (1 + i tanh a tan b)
        let ta = self.re.tanh();
        let tb = self.im.tan();
        CStep::new(ta, tb) / CStep::new(1.0, ta * tb)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        CStep::new(e * self.im.cos(), e * self.im.sin())
    }
}

// ============================================================================
// Directional derivatives and Jacobians
// ============================================================================

/// Value and directional derivative of a scalar-generic map in one direction.
///
/// `f` receives the seeded input and writes its outputs; the returned pair
/// is `(f(x), ∂f/∂x · v)` per output component.
pub fn dual_directional<S, F>(f: F, x: &[S], v: &[S], n_out: usize) -> (Vec<S>, Vec<S>)
where
    S: Scalar,
    F: FnOnce(&[Dual<S>], &mut Vec<Dual<S>>),
{
    debug_assert_eq!(x.len(), v.len());
    let seeded: Vec<Dual<S>> = x
        .iter()
        .zip(v.iter())
        .map(|(&xi, &vi)| Dual::seeded(xi, vi))
        .collect();
    let mut out = Vec::with_capacity(n_out);
    f(&seeded, &mut out);
    let value = out.iter().map(|o| o.v).collect();
    let deriv = out.iter().map(|o| o.d).collect();
    (value, deriv)
}

/// Dense Jacobian of a vector map by forward seeding, one column per input.
///
/// Column `j` equals `dual_directional` with `v = e_j`. Returned in
/// row-major order as a flat matrix of shape `n_out × x.len()`.
pub fn jacobian_forward<S, F>(mut f: F, x: &[S], n_out: usize) -> crate::linalg::Mat<S>
where
    S: Scalar,
    F: FnMut(&[Dual<S>], &mut Vec<Dual<S>>),
{
    let n = x.len();
    let mut jac = crate::linalg::Mat::zeros(n_out, n);
    let mut seeded: Vec<Dual<S>> = x.iter().map(|&xi| Dual::constant(xi)).collect();
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n {
        seeded[j].d = S::one();
        out.clear();
        f(&seeded, &mut out);
        debug_assert_eq!(out.len(), n_out);
        for i in 0..n_out {
            jac[(i, j)] = out[i].d;
        }
        seeded[j].d = S::zero();
    }
    jac
}

/// Complex-step derivative of one output w.r.t. coordinate `i`:
/// `Im(f(x + i·h·e_i)) / h`.
pub fn complex_step<F>(f: F, x: &[f64], i: usize, h: f64) -> f64
where
    F: FnOnce(&[CStep]) -> CStep,
{
    let mut seeded: Vec<CStep> = x.iter().map(|&xi| CStep::new(xi, 0.0)).collect();
    seeded[i].im = h;
    f(&seeded).im / h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<S: Scalar>(x: &[S]) -> S {
        // x0^2 * x1 + sin(x1)
        x[0] * x[0] * x[1] + x[1].sin()
    }

    #[test]
    fn dual_square_derivative() {
        let (val, der) = dual_directional(
            |x, out| out.push(x[0] * x[0]),
            &[3.0f64],
            &[1.0],
            1,
        );
        assert_eq!(val[0], 9.0);
        assert_eq!(der[0], 6.0);
    }

    #[test]
    fn dual_constant_has_zero_derivative() {
        let (_, der) = dual_directional(
            |_x, out| out.push(Dual::from_f64(4.25)),
            &[1.0f64, 2.0],
            &[1.0, 1.0],
            1,
        );
        assert_eq!(der[0], 0.0);
    }

    #[test]
    fn dual_product_partial() {
        // f(x,y) = x*y at (2,5), direction (1,0) -> (10, 5)
        let (val, der) = dual_directional(
            |x, out| out.push(x[0] * x[1]),
            &[2.0f64, 5.0],
            &[1.0, 0.0],
            1,
        );
        assert_eq!(val[0], 10.0);
        assert_eq!(der[0], 5.0);
    }

    #[test]
    fn complex_step_cubic() {
        let d = complex_step(|x| x[0] * x[0] * x[0], &[2.0], 0, COMPLEX_STEP_H);
        assert!((d - 12.0).abs() / 12.0 < 1e-12);
    }

    #[test]
    fn complex_step_sin_at_zero() {
        let d = complex_step(|x| x[0].sin(), &[0.0], 0, COMPLEX_STEP_H);
        assert!((d - 1.0).abs() < 1e-14);
    }

    #[test]
    fn complex_step_constant_is_exactly_zero() {
        let d = complex_step(|_| CStep::from_f64(7.5), &[1.0], 0, COMPLEX_STEP_H);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn jacobian_of_linear_map_is_exact() {
        // f(x) = M x with M = [[1,2],[3,4],[5,6]]
        let m = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let jac = jacobian_forward(
            |x, out| {
                for row in &m {
                    out.push(Dual::from_f64(row[0]) * x[0] + Dual::from_f64(row[1]) * x[1]);
                }
            },
            &[0.7f64, -1.3],
            3,
        );
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(jac[(i, j)], m[i][j]);
            }
        }
    }

    #[test]
    fn jacobian_of_identity() {
        let jac = jacobian_forward(
            |x, out| out.extend_from_slice(x),
            &[1.0f64, 2.0, 3.0],
            3,
        );
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(jac[(i, j)], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dual_and_complex_step_agree_on_smooth_function() {
        let x = [0.8, -0.4];
        for i in 0..2 {
            let mut v = [0.0; 2];
            v[i] = 1.0;
            let (_, der) = dual_directional(|xs, out| out.push(poly(xs)), &x, &v, 1);
            let cs = complex_step(|xs| poly(xs), &x, i, COMPLEX_STEP_H);
            assert!(
                (der[0] - cs).abs() <= 1e-10 * cs.abs().max(1.0),
                "dual {} vs cstep {}",
                der[0],
                cs
            );
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let f = |x: &[f64]| [x[0] * x[1].sin(), (x[0] * x[0] + x[1]).sqrt()];
        let x = [1.2, 0.7];
        let jac = jacobian_forward(
            |xs: &[Dual<f64>], out: &mut Vec<Dual<f64>>| {
                out.push(xs[0] * xs[1].sin());
                out.push((xs[0] * xs[0] + xs[1]).sqrt());
            },
            &x,
            2,
        );
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = f(&xp);
            let fm = f(&xm);
            for i in 0..2 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((jac[(i, j)] - fd).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn nested_duals_give_second_derivative() {
        // f(x) = x^3: f''(x) = 6x via Dual<Dual<f64>>
        type D2 = Dual<Dual<f64>>;
        let x = 1.7f64;
        let xd: D2 = Dual::seeded(Dual::seeded(x, 1.0), Dual::constant(1.0));
        let y = xd * xd * xd;
        assert!((y.v.v - x.powi(3)).abs() < 1e-14);
        assert!((y.v.d - 3.0 * x * x).abs() < 1e-13);
        assert!((y.d.v - 3.0 * x * x).abs() < 1e-13);
        assert!((y.d.d - 6.0 * x).abs() < 1e-13);
    }

    #[test]
    fn linearity_of_derivative() {
        // deriv(a f + b g) = a deriv(f) + b deriv(g)
        let x = [0.3f64];
        let v = [1.0f64];
        let (_, df) = dual_directional(|xs, out| out.push(xs[0].sin()), &x, &v, 1);
        let (_, dg) = dual_directional(|xs, out| out.push(xs[0] * xs[0]), &x, &v, 1);
        let (_, dc) = dual_directional(
            |xs, out| {
                out.push(Dual::from_f64(2.5) * xs[0].sin() + Dual::from_f64(-1.5) * xs[0] * xs[0])
            },
            &x,
            &v,
            1,
        );
        assert!((dc[0] - (2.5 * df[0] - 1.5 * dg[0])).abs() < 1e-14);
    }
}
