//! Bound-constrained limited-memory quasi-Newton driver (L-BFGS-B).
//!
//! Each iteration builds the quadratic model
//! `m(ρ) = ψ_k + ∇ψᵀ(ρ − ρ_k) + ½ (ρ − ρ_k)ᵀ B_k (ρ − ρ_k)`,
//! finds the generalized Cauchy point along the projected steepest-descent
//! path, minimizes the model over the free variables with the active set
//! fixed (truncating the step back into the box), and backtracks along the
//! resulting direction under the Armijo condition. Simulation failures
//! during the line search count as `ψ = +∞` so stiff parameter corners are
//! stepped around rather than aborting the run.
//!
//! The parameter dimension here is small (p ≤ 10 for every case study), so
//! `B_k` is materialized densely from the stored curvature pairs instead of
//! using the two-loop recursion; with memory `m = 0` the method reduces to
//! projected gradient descent.

use crate::error::{MbsError, Result};
use crate::linalg::{Lu, Mat};
use std::collections::VecDeque;

/// Componentwise box bounds (entries may be ±∞).
#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        for (l, u) in lower.iter().zip(upper.iter()) {
            assert!(l <= u, "lower bound exceeds upper bound");
        }
        Bounds { lower, upper }
    }

    pub fn unbounded(p: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; p],
            upper: vec![f64::INFINITY; p],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

/// Componentwise clamp `P(ρ) = max(ρ̲, min(ρ, ρ̄))`; idempotent.
pub fn project(rho: &[f64], bounds: &Bounds) -> Vec<f64> {
    rho.iter()
        .enumerate()
        .map(|(i, &x)| x.clamp(bounds.lower[i], bounds.upper[i]))
        .collect()
}

/// ‖P(ρ − ∇ψ) − ρ‖∞, the first-order optimality measure on the box.
pub fn projected_gradient_norm(rho: &[f64], grad: &[f64], bounds: &Bounds) -> f64 {
    rho.iter()
        .zip(grad.iter())
        .enumerate()
        .map(|(i, (&x, &g))| ((x - g).clamp(bounds.lower[i], bounds.upper[i]) - x).abs())
        .fold(0.0, f64::max)
}

// ============================================================================
// Limited-memory Hessian approximation
// ============================================================================

/// Stored curvature pairs with the positive-curvature guard; the Hessian
/// approximation is rebuilt densely from `B₀ = θI` via BFGS updates.
#[derive(Clone, Debug, Default)]
pub struct LbfgsMemory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    capacity: usize,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        LbfgsMemory {
            pairs: VecDeque::new(),
            capacity,
        }
    }

    /// Store (Δρ, Δ∇ψ); pairs with `ΔρᵀΔ∇ψ ≤ 1e-12 ‖Δρ‖‖Δ∇ψ‖` are skipped.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy: f64 = s.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let ns: f64 = s.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        if sy <= 1e-12 * ns * ny || self.capacity == 0 {
            return;
        }
        self.pairs.push_back((s, y));
        while self.pairs.len() > self.capacity {
            self.pairs.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Dense `B_k` from the stored pairs. θ follows the standard scaling
    /// `θ = (ΔψᵀΔ∇ψ)/(ΔρᵀΔ∇ψ)` of the newest pair.
    pub fn dense_b(&self, p: usize) -> Mat<f64> {
        let theta = match self.pairs.back() {
            Some((s, y)) => {
                let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
                let yy: f64 = y.iter().map(|a| a * a).sum();
                yy / sy
            }
            None => 1.0,
        };
        let mut b = Mat::zeros(p, p);
        for i in 0..p {
            b[(i, i)] = theta;
        }
        let mut bs = vec![0.0; p];
        for (s, y) in &self.pairs {
            b.matvec(s, &mut bs);
            let sbs: f64 = s.iter().zip(bs.iter()).map(|(a, c)| a * c).sum();
            let sy: f64 = s.iter().zip(y.iter()).map(|(a, c)| a * c).sum();
            for i in 0..p {
                for j in 0..p {
                    b[(i, j)] += -bs[i] * bs[j] / sbs + y[i] * y[j] / sy;
                }
            }
        }
        b
    }
}

// ============================================================================
// Cauchy point and subspace step
// ============================================================================

/// First local minimizer of the quadratic model along the projected
/// steepest-descent path; returns the point and the active bound set.
pub fn cauchy_point(
    rho: &[f64],
    grad: &[f64],
    b: &Mat<f64>,
    bounds: &Bounds,
) -> (Vec<f64>, Vec<bool>) {
    let p = rho.len();
    // breakpoints along ρ(t) = P(ρ − t g)
    let mut tbreak: Vec<f64> = (0..p)
        .map(|i| {
            if grad[i] < 0.0 && bounds.upper[i].is_finite() {
                (rho[i] - bounds.upper[i]) / grad[i]
            } else if grad[i] > 0.0 && bounds.lower[i].is_finite() {
                (rho[i] - bounds.lower[i]) / grad[i]
            } else if grad[i] == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    // coordinates already at their bound in the descent direction stay fixed
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| tbreak[a].total_cmp(&tbreak[b]));

    let mut x = rho.to_vec();
    let mut d: Vec<f64> = (0..p)
        .map(|i| if tbreak[i] > 0.0 { -grad[i] } else { 0.0 })
        .collect();
    for i in 0..p {
        if tbreak[i] == 0.0 {
            tbreak[i] = -1.0; // mark as consumed
        }
    }
    let mut t_cur = 0.0;
    let mut bx = vec![0.0; p];
    let mut bd = vec![0.0; p];
    loop {
        // next breakpoint ahead of t_cur
        let mut t_next = f64::INFINITY;
        for &i in &order {
            if tbreak[i] > t_cur && tbreak[i] < t_next {
                t_next = tbreak[i];
            }
        }
        // model derivative along d at x: q'(0) = (g + B(x−ρ))ᵀ d, q'' = dᵀBd
        let dx: Vec<f64> = x.iter().zip(rho.iter()).map(|(a, r)| a - r).collect();
        b.matvec(&dx, &mut bx);
        b.matvec(&d, &mut bd);
        let q1: f64 = (0..p).map(|i| (grad[i] + bx[i]) * d[i]).sum();
        let q2: f64 = (0..p).map(|i| d[i] * bd[i]).sum();
        if q1 >= -1e-300 {
            break; // minimizer at the segment start
        }
        let seg = t_next - t_cur;
        let dt_star = if q2 > 0.0 { -q1 / q2 } else { f64::INFINITY };
        if dt_star < seg {
            for i in 0..p {
                x[i] += dt_star * d[i];
            }
            break;
        }
        if !seg.is_finite() {
            // unbounded descent along the path (q2 == 0 can't happen for
            // SPD B unless d == 0)
            break;
        }
        // advance to the breakpoint, clamp the hit coordinates
        for i in 0..p {
            x[i] += seg * d[i];
        }
        t_cur = t_next;
        for i in 0..p {
            if tbreak[i] == t_cur {
                x[i] = if d[i] > 0.0 {
                    bounds.upper[i]
                } else {
                    bounds.lower[i]
                };
                d[i] = 0.0;
                tbreak[i] = -1.0;
            }
        }
        if d.iter().all(|&v| v == 0.0) {
            break;
        }
    }
    let x = project(&x, bounds);
    let active: Vec<bool> = (0..p)
        .map(|i| x[i] <= bounds.lower[i] || x[i] >= bounds.upper[i])
        .collect();
    (x, active)
}

/// Minimize the quadratic model over the free variables with the active set
/// held at the Cauchy values, then truncate the step back into the box.
pub fn subspace_minimize(
    rho: &[f64],
    x_cauchy: &[f64],
    active: &[bool],
    grad: &[f64],
    b: &Mat<f64>,
    bounds: &Bounds,
) -> Vec<f64> {
    let p = rho.len();
    let free: Vec<usize> = (0..p).filter(|&i| !active[i]).collect();
    if free.is_empty() {
        return x_cauchy.to_vec();
    }
    // reduced gradient of the model at the Cauchy point
    let dxc: Vec<f64> = x_cauchy.iter().zip(rho.iter()).map(|(a, r)| a - r).collect();
    let mut bxc = vec![0.0; p];
    b.matvec(&dxc, &mut bxc);
    let nf = free.len();
    let mut bff = Mat::zeros(nf, nf);
    let mut rf = vec![0.0; nf];
    for (a, &i) in free.iter().enumerate() {
        rf[a] = -(grad[i] + bxc[i]);
        for (c, &j) in free.iter().enumerate() {
            bff[(a, c)] = b[(i, j)];
        }
    }
    let step = match Lu::factor(&bff) {
        Ok(lu) => lu.solve(&rf),
        Err(_) => rf, // fall back to the reduced steepest descent
    };
    // truncate toward the solution so the bounds stay satisfied
    let mut alpha: f64 = 1.0;
    for (a, &i) in free.iter().enumerate() {
        if step[a] > 0.0 && bounds.upper[i].is_finite() {
            alpha = alpha.min((bounds.upper[i] - x_cauchy[i]) / step[a]);
        } else if step[a] < 0.0 && bounds.lower[i].is_finite() {
            alpha = alpha.min((bounds.lower[i] - x_cauchy[i]) / step[a]);
        }
    }
    alpha = alpha.clamp(0.0, 1.0);
    let mut out = x_cauchy.to_vec();
    for (a, &i) in free.iter().enumerate() {
        out[i] += alpha * step[a];
    }
    project(&out, bounds)
}

// ============================================================================
// Driver
// ============================================================================

/// Objective evaluation interface; gradient evaluations also return ψ.
pub trait ObjectiveOracle {
    fn value(&mut self, rho: &[f64]) -> Result<f64>;
    fn value_grad(&mut self, rho: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Closure-backed oracle for tests and analytic problems.
pub struct FnOracle<F, G>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    pub f: F,
    pub g: G,
}

impl<F, G> ObjectiveOracle for FnOracle<F, G>
where
    F: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn value(&mut self, rho: &[f64]) -> Result<f64> {
        (self.f)(rho)
    }
    fn value_grad(&mut self, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.g)(rho)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeConfig {
    pub max_iter: usize,
    /// Curvature-pair memory (default 10).
    pub memory: usize,
    /// Stop when ‖P(ρ − ∇ψ) − ρ‖∞ falls below this.
    pub pgtol: f64,
    /// Stop on relative ψ stagnation.
    pub psi_rel_tol: f64,
    /// Armijo constant.
    pub c1: f64,
    pub alpha_min: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            max_iter: 100,
            memory: 10,
            pgtol: 1e-6,
            psi_rel_tol: 1e-10,
            c1: 1e-4,
            alpha_min: 1e-12,
        }
    }
}

/// One optimizer iteration record.
#[derive(Clone, Debug)]
pub struct OptIterate {
    pub iter: usize,
    pub rho: Vec<f64>,
    pub psi: f64,
    pub proj_grad_inf: f64,
    pub alpha: f64,
    pub n_feval: usize,
    pub active: Vec<bool>,
}

/// Iterate history plus the final status.
#[derive(Clone, Debug)]
pub struct OptTrace {
    pub iterates: Vec<OptIterate>,
    pub converged: bool,
    pub message: String,
    pub n_feval: usize,
    pub n_geval: usize,
}

/// Backtracking Armijo search along `d` from `rho` (with projection).
/// Returns `(α, ρ⁺, ψ⁺, evals)`; failures to evaluate count as ψ = +∞.
fn line_search<O: ObjectiveOracle>(
    oracle: &mut O,
    rho: &[f64],
    psi0: f64,
    grad: &[f64],
    d: &[f64],
    bounds: &Bounds,
    cfg: &OptimizeConfig,
) -> Result<(f64, Vec<f64>, f64, usize)> {
    let gtd: f64 = grad.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
    if d.iter().all(|&v| v == 0.0) {
        return Ok((1.0, rho.to_vec(), psi0, 0));
    }
    let mut alpha = 1.0;
    let mut evals = 0;
    loop {
        let trial = project(
            &rho.iter()
                .zip(d.iter())
                .map(|(x, dd)| x + alpha * dd)
                .collect::<Vec<_>>(),
            bounds,
        );
        let psi = oracle.value(&trial).unwrap_or(f64::INFINITY);
        evals += 1;
        if psi.is_finite() && psi <= psi0 + cfg.c1 * alpha * gtd {
            return Ok((alpha, trial, psi, evals));
        }
        alpha *= 0.5;
        if alpha < cfg.alpha_min {
            return Err(MbsError::LineSearchFailed(format!(
                "no Armijo step above {:e} (ψ₀ = {:.6e}, ∇ψᵀd = {:.3e})",
                cfg.alpha_min, psi0, gtd
            )));
        }
    }
}

/// Bound-constrained minimization; returns the best iterate and the trace.
pub fn optimize<O: ObjectiveOracle>(
    oracle: &mut O,
    rho0: &[f64],
    bounds: &Bounds,
    cfg: &OptimizeConfig,
) -> Result<(Vec<f64>, OptTrace)> {
    let p = rho0.len();
    assert_eq!(bounds.len(), p);
    let mut x = project(rho0, bounds);
    let mut memory = LbfgsMemory::new(cfg.memory);
    let mut trace = OptTrace {
        iterates: Vec::new(),
        converged: false,
        message: "max iterations reached".into(),
        n_feval: 0,
        n_geval: 0,
    };

    let (mut psi, mut grad) = oracle.value_grad(&x)?;
    trace.n_geval += 1;
    trace.n_feval += 1;

    for iter in 0..cfg.max_iter {
        let pg = projected_gradient_norm(&x, &grad, bounds);
        let active: Vec<bool> = (0..p)
            .map(|i| x[i] <= bounds.lower[i] || x[i] >= bounds.upper[i])
            .collect();
        trace.iterates.push(OptIterate {
            iter,
            rho: x.clone(),
            psi,
            proj_grad_inf: pg,
            alpha: 0.0,
            n_feval: trace.n_feval,
            active,
        });
        if pg < cfg.pgtol {
            trace.converged = true;
            trace.message = "projected gradient within tolerance".into();
            break;
        }

        let b = memory.dense_b(p);
        let (xc, active) = cauchy_point(&x, &grad, &b, bounds);
        let xstar = subspace_minimize(&x, &xc, &active, &grad, &b, bounds);
        let mut d: Vec<f64> = xstar.iter().zip(x.iter()).map(|(a, c)| a - c).collect();
        let gtd: f64 = grad.iter().zip(d.iter()).map(|(a, c)| a * c).sum();
        if gtd >= 0.0 {
            // not a descent direction: reset to the projected gradient step
            d = project(
                &x.iter()
                    .zip(grad.iter())
                    .map(|(a, g)| a - g)
                    .collect::<Vec<_>>(),
                bounds,
            )
            .iter()
            .zip(x.iter())
            .map(|(a, c)| a - c)
            .collect();
            memory.clear();
        }

        let (alpha, x_new, psi_new, evals) =
            match line_search(oracle, &x, psi, &grad, &d, bounds, cfg) {
                Ok(r) => r,
                Err(e) => {
                    trace.message = format!("{}", e);
                    trace.n_feval += cfg.max_iter.min(64);
                    return Ok((x, trace));
                }
            };
        trace.n_feval += evals;
        if let Some(last) = trace.iterates.last_mut() {
            last.alpha = alpha;
        }

        let (psi_check, grad_new) = oracle.value_grad(&x_new)?;
        trace.n_geval += 1;
        trace.n_feval += 1;
        let psi_new = if psi_check.is_finite() { psi_check } else { psi_new };

        let s: Vec<f64> = x_new.iter().zip(x.iter()).map(|(a, c)| a - c).collect();
        let yv: Vec<f64> = grad_new.iter().zip(grad.iter()).map(|(a, c)| a - c).collect();
        memory.push(s, yv);

        let rel_drop = (psi - psi_new).abs() / psi.abs().max(1.0);
        x = x_new;
        grad = grad_new;
        psi = psi_new;
        if rel_drop < cfg.psi_rel_tol {
            let pg = projected_gradient_norm(&x, &grad, bounds);
            let active: Vec<bool> = (0..p)
                .map(|i| x[i] <= bounds.lower[i] || x[i] >= bounds.upper[i])
                .collect();
            trace.iterates.push(OptIterate {
                iter: iter + 1,
                rho: x.clone(),
                psi,
                proj_grad_inf: pg,
                alpha: 0.0,
                n_feval: trace.n_feval,
                active,
            });
            trace.converged = true;
            trace.message = "objective stagnated".into();
            break;
        }
    }
    if trace.converged && trace.iterates.last().map(|it| it.psi) != Some(psi) {
        // ensure the final iterate is recorded
        let pg = projected_gradient_norm(&x, &grad, bounds);
        let active: Vec<bool> = (0..p)
            .map(|i| x[i] <= bounds.lower[i] || x[i] >= bounds.upper[i])
            .collect();
        trace.iterates.push(OptIterate {
            iter: trace.iterates.len(),
            rho: x.clone(),
            psi,
            proj_grad_inf: pg,
            alpha: 0.0,
            n_feval: trace.n_feval,
            active,
        });
    }
    Ok((x, trace))
}
