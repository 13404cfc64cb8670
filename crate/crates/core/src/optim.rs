//! Augmented Lagrangian with a spectral projected gradient inner solver.
//!
//! Minimizes a smooth convex `f(x)` over a set with a cheap projection,
//! subject to linear equalities `A x = b`. The inner problem is solved by
//! projected gradient with Barzilai-Borwein steps and a nonmonotone Armijo
//! search; an optional diagonal preconditioner rescales the gradient (it must
//! commute with the projection, as a per-coordinate clamp does).
//!
//! Problems whose feasible set is a box of lower bounds and whose objective
//! has a diagonal Hessian can supply it; the inner solve then runs projected
//! Newton, inverting `diag(h) + rho A^T A` through the Woodbury identity
//! (cheap when there are few constraints), and falls back to the gradient
//! method if Newton stalls.

use crate::error::{Error, Result};

pub trait AlProblem {
    fn dim(&self) -> usize;
    fn n_constraints(&self) -> usize;
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], g: &mut [f64]);
    /// `A x - b`.
    fn residual(&self, x: &[f64], r: &mut [f64]);
    /// `A^T y`.
    fn adjoint(&self, y: &[f64], out: &mut [f64]);
    fn project(&self, x: &mut [f64]);
    /// Diagonal preconditioner `D` (search direction `-D g`), identity if `None`.
    fn preconditioner(&self) -> Option<Vec<f64>> {
        None
    }
    /// Writes the diagonal Hessian of `f` at `x`. Only valid when `project`
    /// clamps each coordinate at a lower bound. Returns false if unsupported.
    fn hessian_diagonal(&self, _x: &[f64], _h: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AlOptions {
    pub residual_tol: f64,
    pub objective_rtol: f64,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub min_inner_tol: f64,
}

impl Default for AlOptions {
    fn default() -> Self {
        AlOptions {
            residual_tol: 1e-8,
            objective_rtol: 1e-10,
            initial_penalty: 1.0,
            max_penalty: 1e10,
            max_outer: 400,
            max_inner: 20_000,
            min_inner_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlOutcome {
    pub x: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

struct Lagrangian<'a, P: AlProblem> {
    p: &'a P,
    lambda: &'a [f64],
    rho: f64,
    r: Vec<f64>,
    tmp: Vec<f64>,
}

impl<P: AlProblem> Lagrangian<'_, P> {
    fn value(&mut self, x: &[f64]) -> f64 {
        let f = self.p.objective(x);
        self.p.residual(x, &mut self.r);
        let mut acc = f;
        for (ri, li) in self.r.iter().zip(self.lambda) {
            acc += li * ri + 0.5 * self.rho * ri * ri;
        }
        acc
    }

    fn grad(&mut self, x: &[f64], g: &mut [f64]) {
        self.p.gradient(x, g);
        self.p.residual(x, &mut self.r);
        let y: Vec<f64> = self
            .r
            .iter()
            .zip(self.lambda)
            .map(|(ri, li)| li + self.rho * ri)
            .collect();
        self.p.adjoint(&y, &mut self.tmp);
        for (gi, ti) in g.iter_mut().zip(&self.tmp) {
            *gi += ti;
        }
    }
}

/// Projected-gradient stationarity measure `|P(x - D g) - x|_inf`.
fn stationarity<P: AlProblem>(p: &P, x: &[f64], dg: &[f64], work: &mut [f64]) -> f64 {
    for i in 0..x.len() {
        work[i] = x[i] - dg[i];
    }
    p.project(work);
    work.iter().zip(x).fold(0.0, |a, (w, xi)| a.max((w - xi).abs()))
}

const NONMONOTONE_MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;
/// Stationarity at which a stalled Newton line search counts as converged.
const NEWTON_ROUNDOFF: f64 = 1e-9;

/// Returns (iterations, converged).
fn spg<P: AlProblem>(lag: &mut Lagrangian<'_, P>, x: &mut [f64], tol: f64, max_iter: usize) -> (usize, bool) {
    let n = x.len();
    let p = lag.p;
    p.project(x);
    let mut g = vec![0.0; n];
    let mut dg = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let diag = p.preconditioner().unwrap_or_else(|| vec![1.0; n]);
    let scale = |g: &[f64], dg: &mut [f64]| {
        for i in 0..g.len() {
            dg[i] = diag[i] * g[i];
        }
    };
    let mut f = lag.value(x);
    lag.grad(x, &mut g);
    scale(&g, &mut dg);
    let mut history = vec![f; 1];
    let pg0 = stationarity(p, x, &dg, &mut work);
    if pg0 <= tol {
        return (0, true);
    }
    let mut alpha = (1.0 / pg0).clamp(STEP_MIN, STEP_MAX);
    for it in 0..max_iter {
        // trial direction
        for i in 0..n {
            work[i] = x[i] - alpha * dg[i];
        }
        p.project(&mut work);
        let mut gtd = 0.0;
        for i in 0..n {
            work[i] -= x[i];
            gtd += g[i] * work[i];
        }
        if gtd >= 0.0 {
            // no descent left at this step size: treat as stationary
            return (it, true);
        }
        let fmax = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut t = 1.0;
        let mut fnew;
        loop {
            for i in 0..n {
                xn[i] = x[i] + t * work[i];
            }
            fnew = lag.value(&xn);
            if fnew <= fmax + ARMIJO * t * gtd {
                break;
            }
            // safeguarded quadratic interpolation
            let tq = -0.5 * gtd * t * t / (fnew - f - t * gtd);
            t = if tq.is_finite() && tq >= 0.1 * t && tq <= 0.5 * t { tq } else { 0.5 * t };
            if t < 1e-20 {
                return (it, false);
            }
        }
        lag.grad(&xn, &mut gn);
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let s = xn[i] - x[i];
            let y = gn[i] - g[i];
            // BB step in the metric induced by the preconditioner
            ss += s * s / diag[i];
            sy += s * y;
        }
        x.copy_from_slice(&xn);
        g.copy_from_slice(&gn);
        f = fnew;
        history.push(f);
        if history.len() > NONMONOTONE_MEMORY {
            history.remove(0);
        }
        scale(&g, &mut dg);
        let pg = stationarity(p, x, &dg, &mut work);
        if pg <= tol {
            return (it + 1, true);
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(STEP_MIN, STEP_MAX) } else { STEP_MAX.min(1e3 * alpha) };
    }
    (max_iter, false)
}

/// Projected Newton (Bertsekas) on a lower-bound box. Returns `None` when the
/// problem has no diagonal Hessian, else (iterations, converged).
fn projected_newton<P: AlProblem>(
    lag: &mut Lagrangian<'_, P>,
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Option<(usize, bool)> {
    let p = lag.p;
    let (n, m) = (p.dim(), p.n_constraints());
    let mut h = vec![0.0; n];
    if !p.hessian_diagonal(x, &mut h) {
        return None;
    }
    let mut lb = vec![f64::NEG_INFINITY; n];
    p.project(&mut lb);
    // rows of A, recovered through the adjoint
    let mut a = vec![vec![0.0; n]; m];
    let mut e = vec![0.0; m];
    for (k, row) in a.iter_mut().enumerate() {
        e[k] = 1.0;
        p.adjoint(&e, row);
        e[k] = 0.0;
    }
    let diag = p.preconditioner().unwrap_or_else(|| vec![1.0; n]);
    let (mut g, mut dg, mut work, mut d, mut xt) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    p.project(x);
    for it in 0..max_iter {
        let f = lag.value(x);
        lag.grad(x, &mut g);
        for i in 0..n {
            dg[i] = diag[i] * g[i];
        }
        let pg = stationarity(p, x, &dg, &mut work);
        if pg <= tol {
            return Some((it, true));
        }
        p.hessian_diagonal(x, &mut h);
        let eps = pg.min(1e-3);
        let free: Vec<bool> = (0..n).map(|i| !(x[i] - lb[i] <= eps && g[i] > 0.0)).collect();
        let hinv: Vec<f64> = h
            .iter()
            .zip(&free)
            .map(|(hi, fr)| if *fr && hi.is_finite() && *hi > 0.0 { 1.0 / hi } else { 0.0 })
            .collect();
        // Woodbury: (H + rho A^T A)^{-1} g = H^{-1} g - H^{-1} A^T (I / rho + A H^{-1} A^T)^{-1} A H^{-1} g
        let mut mat = nalgebra::DMatrix::<f64>::zeros(m, m);
        let mut rhs = nalgebra::DVector::<f64>::zeros(m);
        for k in 0..m {
            mat[(k, k)] = 1.0 / lag.rho;
            rhs[k] = (0..n).map(|i| a[k][i] * hinv[i] * g[i]).sum();
            for l in 0..=k {
                let v: f64 = (0..n).map(|i| a[k][i] * hinv[i] * a[l][i]).sum();
                mat[(k, l)] += v;
                if l != k {
                    mat[(l, k)] += v;
                }
            }
        }
        let chol = mat.cholesky()?;
        let s = chol.solve(&rhs);
        for i in 0..n {
            d[i] = if free[i] {
                let at_s: f64 = (0..m).map(|k| a[k][i] * s[k]).sum();
                -hinv[i] * (g[i] - at_s)
            } else {
                -dg[i]
            };
        }
        let mut t = 1.0;
        loop {
            for i in 0..n {
                xt[i] = x[i] + t * d[i];
            }
            p.project(&mut xt);
            let decrease: f64 = (0..n).map(|i| g[i] * (xt[i] - x[i])).sum();
            if decrease >= 0.0 && t == 1.0 {
                return Some((it, pg <= NEWTON_ROUNDOFF));
            }
            // below roundoff in f the Armijo test is noise; take the full step
            let negligible = t == 1.0 && -decrease <= 1e-13 * (1.0 + f.abs());
            if negligible || lag.value(&xt) <= f + ARMIJO * decrease.min(0.0) {
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                // no representable decrease left
                return Some((it, pg <= NEWTON_ROUNDOFF));
            }
        }
        x.copy_from_slice(&xt);
    }
    Some((max_iter, false))
}

pub fn augmented_lagrangian<P: AlProblem>(problem: &P, x0: Vec<f64>, opts: &AlOptions) -> Result<AlOutcome> {
    let n = problem.dim();
    let m = problem.n_constraints();
    assert_eq!(x0.len(), n, "initial point has wrong dimension");
    let mut x = x0;
    problem.project(&mut x);
    let mut lambda = vec![0.0; m];
    let mut rho = opts.initial_penalty;
    let mut r = vec![0.0; m];
    problem.residual(&x, &mut r);
    let mut res = sup_norm(&r);
    let mut prev_res = res;
    let mut prev_obj = problem.objective(&x);
    let mut inner_total = 0;
    let mut inner_tol = (0.1 * res).clamp(opts.min_inner_tol, 1e-3);
    for outer in 0..opts.max_outer {
        let mut lag = Lagrangian {
            p: problem,
            lambda: &lambda,
            rho,
            r: vec![0.0; m],
            tmp: vec![0.0; n],
        };
        let (its, inner_ok) = match projected_newton(&mut lag, &mut x, inner_tol, opts.max_inner) {
            Some((its, true)) => (its, true),
            Some((its, false)) => {
                let (more, ok) = spg(&mut lag, &mut x, inner_tol, opts.max_inner);
                (its + more, ok)
            }
            None => spg(&mut lag, &mut x, inner_tol, opts.max_inner),
        };
        inner_total += its;
        problem.residual(&x, &mut r);
        res = sup_norm(&r);
        let obj = problem.objective(&x);
        for (li, ri) in lambda.iter_mut().zip(&r) {
            *li += rho * ri;
        }
        let obj_change = (obj - prev_obj).abs() / (1.0 + obj.abs());
        log::debug!(
            "AL outer {outer}: objective {obj:.12e} residual {res:.3e} penalty {rho:.1e} inner {its} ({inner_ok})"
        );
        if res <= opts.residual_tol && obj_change <= opts.objective_rtol && inner_ok {
            return Ok(AlOutcome {
                x,
                objective: obj,
                residual: res,
                multipliers: lambda,
                penalty: rho,
                outer_iterations: outer + 1,
                inner_iterations: inner_total,
            });
        }
        if res > 0.25 * prev_res && res > opts.residual_tol {
            rho *= 2.0;
            if rho > opts.max_penalty {
                return Err(Error::Infeasible(format!(
                    "penalty exceeded {:.1e} with constraint residual {res:.3e}",
                    opts.max_penalty
                )));
            }
        }
        prev_res = res;
        prev_obj = obj;
        inner_tol = (0.1 * res).clamp(opts.min_inner_tol, inner_tol);
        if res <= opts.residual_tol {
            inner_tol = (0.1 * inner_tol).max(opts.min_inner_tol);
        }
    }
    Err(Error::Unconverged {
        iterations: opts.max_outer,
        residual_initial: res,
        residual_terminal: res,
    })
}

/// Euclidean projection of `v` onto `{x >= 0, sum x = total}`.
pub fn project_simplex(v: &mut [f64], total: f64) {
    if total <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - total) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}
