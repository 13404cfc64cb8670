//! Dual potentials and optimal densities for the regularized bridge problem
//!
//! ```text
//! inf { E_Q[C(X_0, X_T)] + I_l(Q | P) : Q_0 = mu0, Q_T =_c muT }.
//! ```
//!
//! The optimizer has density `dQ/dP = rho(X_0) f(X_0, X_T)` with
//! `rho = dmu0/dnu0` and `f(x, y) = dl*(-Q_c phi(y) - C(x, y) - psi(x))`, where
//! the potentials solve the two marginal equations
//!
//! ```text
//! sum_y K^n(x, y) f(x, y)               = 1       for mu0(x) > 0,
//! sum_x mu0(x) K^n(x, y) f(x, y)        = muT(y)  for muT(y) > 0.
//! ```
//!
//! Outside the entropic case this density is optimal only when `mu0 = nu0`;
//! the solvers refuse other instances with [`Error::AssumptionViolated`].
//! Potentials are `+inf` off the supports (`phi` off `supp muT`, `psi` off
//! `supp mu0`), where the density vanishes.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::divergence::{conjugate_root, divergence_value, divergence_weights, oce_objective, DivergenceSpec};
use crate::error::{invalid, Error, Result};
use crate::measure::DiscreteMeasure;
use crate::ref_chain::{endpoint_kernel, reverse_chain, ReferenceChain};
use crate::weak_cost::{apply_qc_with_plan, check_weak_target, WeakCostSpec};

/// Sup-distance below which `mu0` and `nu0` count as equal.
pub const SAME_MEASURE_TOL: f64 = 1e-12;
const PARALLEL_MIN_STATES: usize = 64;

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub chain: ReferenceChain,
    pub divergence: DivergenceSpec,
    pub weak_cost: WeakCostSpec,
    pub mu0: DiscreteMeasure,
    pub mu_t: DiscreteMeasure,
    /// Endpoint cost `C(x0, xT)`.
    pub cost: Array2<f64>,
    kn: Array2<f64>,
    rho: Vec<f64>,
    points: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(
        chain: ReferenceChain,
        divergence: DivergenceSpec,
        weak_cost: WeakCostSpec,
        mu0: DiscreteMeasure,
        mu_t: DiscreteMeasure,
        cost: Option<Array2<f64>>,
    ) -> Result<Self> {
        divergence.validate()?;
        weak_cost.validate()?;
        let n = chain.n_states();
        if mu0.len() != n || mu_t.len() != n {
            return Err(invalid("mu0 and muT must live on the chain's grid"));
        }
        if !mu0.is_probability() || !mu_t.is_probability() {
            return Err(invalid("mu0 and muT must be probability measures"));
        }
        if !mu0.is_dominated_by(&chain.nu0) {
            return Err(invalid("mu0 is not absolutely continuous with respect to nu0"));
        }
        let cost = cost.unwrap_or_else(|| Array2::zeros((n, n)));
        if cost.dim() != (n, n) {
            return Err(invalid(format!("cost has shape {:?}, expected ({n}, {n})", cost.dim())));
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(invalid("endpoint cost must be finite"));
        }
        let rho = (0..n)
            .map(|x| if mu0[x] > 0.0 { mu0[x] / chain.nu0[x] } else { 0.0 })
            .collect();
        let kn = chain.endpoint_transition();
        let points = chain.grid.points();
        Ok(ProblemSpec {
            chain,
            divergence,
            weak_cost,
            mu0,
            mu_t,
            cost,
            kn,
            rho,
            points,
        })
    }

    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    /// `K^n(x, y)`.
    pub fn endpoint_transition(&self) -> &Array2<f64> {
        &self.kn
    }

    /// `dmu0/dnu0`, zero off `supp mu0`.
    pub fn initial_density(&self) -> &[f64] {
        &self.rho
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn mu0_equals_nu0(&self) -> bool {
        self.mu0.sup_distance(&self.chain.nu0) <= SAME_MEASURE_TOL
    }

    /// Same chain, divergence, cost and weak cost with new marginals.
    pub fn with_targets(&self, mu0: DiscreteMeasure, mu_t: DiscreteMeasure) -> Result<Self> {
        ProblemSpec::new(
            self.chain.clone(),
            self.divergence,
            self.weak_cost,
            mu0,
            mu_t,
            Some(self.cost.clone()),
        )
    }

    /// The assumption under which the generalized system characterizes the optimum.
    pub fn check_solver_assumptions(&self) -> Result<()> {
        if self.divergence != DivergenceSpec::Entropy && !self.mu0_equals_nu0() {
            return Err(Error::AssumptionViolated(format!(
                "{} divergence needs mu0 = nu0 (sup distance {:.3e})",
                self.divergence.name(),
                self.mu0.sup_distance(&self.chain.nu0)
            )));
        }
        Ok(())
    }
}

/// `phi` on terminal states, `psi` on initial states; `+inf` off the supports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialPair {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

/// `f(x0, xT)`; the path density is `rho(x0) f(x0, xT)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointDensity {
    pub f: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub primal_value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub residual_initial: f64,
    pub residual_terminal: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Relaxation weight in `(0, 1]` for the potential updates.
    pub damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-9,
            max_iters: 10_000,
            damping: 1.0,
        }
    }
}

impl SolveOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub potentials: PotentialPair,
    pub density: EndpointDensity,
    pub report: SolveReport,
}

fn map_states<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    if n >= PARALLEL_MIN_STATES {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// `f(x, y) = dl*(-qphi(y) - C(x, y) - psi(x))`, zero where a potential is `+inf`.
pub fn density_from_potentials(problem: &ProblemSpec, qphi: &[f64], psi: &[f64]) -> EndpointDensity {
    let n = problem.n_states();
    let spec = problem.divergence;
    let mut f = Array2::zeros((n, n));
    for x in 0..n {
        if !psi[x].is_finite() {
            continue;
        }
        for y in 0..n {
            if qphi[y].is_finite() {
                f[[x, y]] = spec.conjugate_derivative(-qphi[y] - problem.cost[[x, y]] - psi[x]);
            }
        }
    }
    EndpointDensity { f }
}

/// `psi(x)` solving the first marginal equation for a given transformed `phi`.
fn psi_sweep(problem: &ProblemSpec, qphi: &[f64]) -> Result<Vec<f64>> {
    let n = problem.n_states();
    let kn = &problem.kn;
    map_states(n, |x| {
        if problem.mu0[x] <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let xi: Vec<f64> = (0..n).map(|y| -qphi[y] - problem.cost[[x, y]]).collect();
        let w: Vec<f64> = kn.row(x).to_vec();
        conjugate_root(problem.divergence, &xi, &w, 1.0).map_err(|e| match e {
            Error::Infeasible(reason) => Error::DualInfeasible { state: x, reason },
            other => other,
        })
    })
}

fn phi_sweep(problem: &ProblemSpec, psi: &[f64]) -> Result<Vec<f64>> {
    let n = problem.n_states();
    let kn = &problem.kn;
    map_states(n, |y| {
        if problem.mu_t[y] <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let xi: Vec<f64> = (0..n)
            .map(|x| if psi[x].is_finite() { -problem.cost[[x, y]] - psi[x] } else { f64::NEG_INFINITY })
            .collect();
        let w: Vec<f64> = (0..n).map(|x| problem.mu0[x] * kn[[x, y]]).collect();
        conjugate_root(problem.divergence, &xi, &w, problem.mu_t[y])
    })
}

/// Terminal marginal `sum_x mu0(x) K^n(x, y) f(x, y)`.
pub fn terminal_marginal(problem: &ProblemSpec, density: &EndpointDensity) -> Vec<f64> {
    let n = problem.n_states();
    (0..n)
        .map(|y| (0..n).map(|x| problem.mu0[x] * problem.kn[[x, y]] * density.f[[x, y]]).sum())
        .collect()
}

/// Initial-equation defects `sum_y K^n(x, y) f(x, y) - 1` on `supp mu0`.
fn initial_defects(problem: &ProblemSpec, density: &EndpointDensity) -> Vec<f64> {
    let n = problem.n_states();
    (0..n)
        .map(|x| {
            if problem.mu0[x] > 0.0 {
                (0..n).map(|y| problem.kn[[x, y]] * density.f[[x, y]]).sum::<f64>() - 1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn sup(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn finite_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn gauge_fix(problem: &ProblemSpec, phi: &mut [f64], psi: &mut [f64]) {
    let a: f64 = phi
        .iter()
        .zip(problem.mu_t.weights())
        .filter(|(_, w)| **w > 0.0)
        .map(|(p, w)| p * w)
        .sum();
    phi.iter_mut().filter(|p| p.is_finite()).for_each(|p| *p -= a);
    psi.iter_mut().filter(|p| p.is_finite()).for_each(|p| *p += a);
}

fn check_reachability(problem: &ProblemSpec) -> Result<()> {
    let n = problem.n_states();
    for y in problem.mu_t.support() {
        let reach: f64 = (0..n).map(|x| problem.mu0[x] * problem.kn[[x, y]]).sum();
        if reach <= 0.0 {
            return Err(Error::Infeasible(format!(
                "terminal state {y} carries target mass but is unreachable from supp mu0"
            )));
        }
    }
    Ok(())
}

/// Dual objective at `phi` and the induced `psi = r*`.
pub fn dual_value(problem: &ProblemSpec, phi: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (v, psi, _) = dual_value_and_gradient(problem, phi)?;
    Ok((v, psi))
}

/// Dual value, induced `psi`, and supergradient in `phi`.
fn dual_value_and_gradient(problem: &ProblemSpec, phi: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = problem.n_states();
    if phi.len() != n {
        return Err(invalid(format!("phi has {} entries for {n} states", phi.len())));
    }
    if phi.iter().any(|p| p.is_nan()) {
        return Err(invalid("phi contains NaN"));
    }
    let transform = if problem.weak_cost.is_total_variation() {
        crate::weak_cost::QcTransform {
            values: phi.to_vec(),
            plan: (0..n).map(|y| vec![(y, 1.0)]).collect(),
        }
    } else {
        apply_qc_with_plan(&problem.weak_cost, &problem.points, phi)?
    };
    let qphi = &transform.values;
    let psi = psi_sweep(problem, qphi)?;
    let spec = problem.divergence;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for x in 0..n {
        let m = problem.mu0[x];
        if m <= 0.0 {
            continue;
        }
        let xi: Vec<f64> = (0..n).map(|y| -qphi[y] - problem.cost[[x, y]]).collect();
        let p: Vec<f64> = problem.kn.row(x).to_vec();
        value -= m * oce_objective(spec, &xi, &p, psi[x]);
        for z in 0..n {
            if p[z] > 0.0 && xi[z] > f64::NEG_INFINITY {
                let q = m * p[z] * spec.conjugate_derivative(xi[z] - psi[x]);
                for &(y, w) in &transform.plan[z] {
                    grad[y] += q * w;
                }
            }
        }
    }
    for y in 0..n {
        let t = problem.mu_t[y];
        if t > 0.0 {
            value -= phi[y] * t;
        }
        grad[y] -= t;
    }
    value += divergence_value(spec, &problem.mu0, &problem.chain.nu0)?;
    Ok((value, psi, grad))
}

/// `E_P[rho f C] + E_P[l(rho f)]`.
pub fn primal_value(problem: &ProblemSpec, density: &EndpointDensity) -> f64 {
    let n = problem.n_states();
    let spec = problem.divergence;
    let p01 = endpoint_kernel(&problem.chain);
    let mut acc = 0.0;
    for x in 0..n {
        for y in 0..n {
            let p = p01[[x, y]];
            if p <= 0.0 {
                continue;
            }
            let d = problem.rho[x] * density.f[[x, y]];
            if d < 0.0 || d.is_nan() {
                return f64::INFINITY;
            }
            acc += p * (d * problem.cost[[x, y]] + spec.ell(d));
        }
    }
    acc
}

/// Sup-norm residuals of the two marginal equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemResiduals {
    /// `max_x |E[f | X_0 = x] - 1|` over `supp mu0`.
    pub initial: f64,
    /// `max_y |Q_T(y) - muT(y)|` with `Q_T` from the forward kernel.
    pub terminal: f64,
    /// The same terminal defect computed from the Bayes-reversed chain.
    pub terminal_reversed: f64,
}

pub fn verify_schrodinger_system(problem: &ProblemSpec, pair: &PotentialPair) -> Result<SystemResiduals> {
    let n = problem.n_states();
    if pair.phi.len() != n || pair.psi.len() != n {
        return Err(invalid("potentials must live on the grid"));
    }
    let qphi = if problem.weak_cost.is_total_variation() {
        pair.phi.clone()
    } else {
        crate::weak_cost::apply_qc(&problem.weak_cost, &problem.points, &pair.phi)?
    };
    let density = density_from_potentials(problem, &qphi, &pair.psi);
    let initial = sup(initial_defects(problem, &density));
    let qt = terminal_marginal(problem, &density);
    let terminal = sup(qt.iter().zip(problem.mu_t.weights()).map(|(a, b)| a - b));

    // Reversed form: Q_T(y) = m_n(y) E_rev[rho(X_T) f(X_T, y) | X_0 = y].
    let rev = reverse_chain(&problem.chain)?;
    let back = rev.endpoint_transition();
    let mut terminal_reversed = 0.0f64;
    for y in 0..n {
        let my = rev.nu0[y];
        let e: f64 = (0..n).map(|x| back[[y, x]] * problem.rho[x] * density.f[[x, y]]).sum();
        terminal_reversed = terminal_reversed.max((my * e - problem.mu_t[y]).abs());
    }
    Ok(SystemResiduals {
        initial,
        terminal,
        terminal_reversed,
    })
}

fn finish(
    problem: &ProblemSpec,
    phi: Vec<f64>,
    psi: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> Result<Solution> {
    let qphi = if problem.weak_cost.is_total_variation() {
        phi.clone()
    } else {
        crate::weak_cost::apply_qc(&problem.weak_cost, &problem.points, &phi)?
    };
    let density = density_from_potentials(problem, &qphi, &psi);
    let primal = primal_value(problem, &density);
    let (dual, _) = dual_value(problem, &phi)?;
    let res = verify_schrodinger_system(problem, &PotentialPair { phi: phi.clone(), psi: psi.clone() })?;
    Ok(Solution {
        potentials: PotentialPair { phi, psi },
        density,
        report: SolveReport {
            primal_value: primal,
            dual_value: dual,
            gap: primal - dual,
            residual_initial: res.initial,
            residual_terminal: res.terminal,
            iterations,
            converged,
        },
    })
}

/// Alternating root-finding on the two marginal equations (TV targets).
pub fn solve_sinkhorn(problem: &ProblemSpec, opts: &SolveOptions) -> Result<Solution> {
    opts.validate()?;
    if !problem.weak_cost.is_total_variation() {
        return Err(invalid("solve_sinkhorn needs a total-variation (hard) terminal constraint"));
    }
    if problem.divergence == DivergenceSpec::Hellinger {
        return Err(invalid("Hellinger lacks the growth needed by the alternating solver"));
    }
    problem.check_solver_assumptions()?;
    check_reachability(problem)?;
    let n = problem.n_states();
    let mut phi: Vec<f64> = (0..n)
        .map(|y| if problem.mu_t[y] > 0.0 { 0.0 } else { f64::INFINITY })
        .collect();
    let mut psi = vec![f64::INFINITY; n];
    let damp = opts.damping;
    let mut last = (f64::INFINITY, f64::INFINITY);
    for it in 1..=opts.max_iters {
        let new_psi = psi_sweep(problem, &phi)?;
        let psi_prev = psi.clone();
        psi = relax(&psi, &new_psi, damp);
        let new_phi = phi_sweep(problem, &psi)?;
        let phi_prev = phi.clone();
        phi = relax(&phi, &new_phi, damp);
        gauge_fix(problem, &mut phi, &mut psi);

        let density = density_from_potentials(problem, &phi, &psi);
        let res0 = sup(initial_defects(problem, &density));
        let qt = terminal_marginal(problem, &density);
        let res_t = sup(qt.iter().zip(problem.mu_t.weights()).map(|(a, b)| a - b));
        let change = finite_change(&phi, &phi_prev).max(finite_change(&psi, &psi_prev));
        last = (res0, res_t);
        log::debug!("sinkhorn {it}: res0 {res0:.3e} resT {res_t:.3e} change {change:.3e}");
        if res0.max(res_t).max(change) <= opts.tol {
            return finish(problem, phi, psi, it, true);
        }
    }
    Err(Error::Unconverged {
        iterations: opts.max_iters,
        residual_initial: last.0,
        residual_terminal: last.1,
    })
}

fn relax(old: &[f64], new: &[f64], damp: f64) -> Vec<f64> {
    old.iter()
        .zip(new)
        .map(|(&o, &v)| if damp < 1.0 && o.is_finite() && v.is_finite() { (1.0 - damp) * o + damp * v } else { v })
        .collect()
}

/// Gradient size at which a failed line search counts as stationarity.
const STATIONARY_FLOOR: f64 = 1.5e-8;

/// Window and relative gain below which accepted steps count as a failed search.
const STALL_WINDOW: usize = 50;
const STALL_GAIN: f64 = 1e-10;

/// Tolerance on the weak OT value used to accept a non-smooth stop.
pub const WEAK_TARGET_TOL: f64 = 1e-6;

/// Preconditioned gradient ascent on the dual, for any weak cost.
pub fn solve_dual_ascent(problem: &ProblemSpec, opts: &SolveOptions, phi0: Option<&[f64]>) -> Result<Solution> {
    opts.validate()?;
    problem.check_solver_assumptions()?;
    let n = problem.n_states();
    let tv = problem.weak_cost.is_total_variation();
    if tv {
        check_reachability(problem)?;
    }
    // free coordinates: supp muT under TV, everything otherwise
    let free: Vec<bool> = (0..n).map(|y| !tv || problem.mu_t[y] > 0.0).collect();
    let mut phi: Vec<f64> = match phi0 {
        Some(p) => {
            if p.len() != n {
                return Err(invalid("initial phi has the wrong length"));
            }
            (0..n).map(|y| if free[y] { p[y] } else { f64::INFINITY }).collect()
        }
        None => (0..n).map(|y| if free[y] { 0.0 } else { f64::INFINITY }).collect(),
    };
    if phi.iter().zip(&free).any(|(p, f)| *f && !p.is_finite()) {
        return Err(invalid("initial phi must be finite on the free states"));
    }
    let precond: Vec<f64> = (0..n).map(|y| 1.0 / problem.mu_t[y].max(1e-3)).collect();
    let (mut value, mut psi, mut grad) = dual_value_and_gradient(problem, &phi)?;
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let gnorm = |g: &[f64]| sup((0..n).filter(|&y| free[y]).map(|y| g[y]));
    let mut history = vec![value];
    for it in 0..opts.max_iters {
        let gn = gnorm(&grad);
        log::debug!("dual ascent {it}: value {value:.12e} |g| {gn:.3e} step {step:.3e}");
        if gn <= opts.tol {
            let mut phi = phi;
            gauge_fix(problem, &mut phi, &mut psi);
            return finish(problem, phi, psi, it, true);
        }
        let dir: Vec<f64> = (0..n).map(|y| if free[y] { precond[y] * grad[y] } else { 0.0 }).collect();
        // Barzilai-Borwein guess, then Armijo backtracking
        if let Some((dphi, dgrad)) = &prev {
            let (mut ss, mut sy) = (0.0, 0.0);
            for y in (0..n).filter(|&y| free[y]) {
                ss += dphi[y] * dphi[y] / precond[y];
                sy += dphi[y] * dgrad[y];
            }
            if sy < 0.0 {
                step = (ss / -sy).clamp(1e-12, 1e12);
            } else {
                step *= 2.0;
            }
        }
        let slope: f64 = (0..n).map(|y| grad[y] * dir[y]).sum();
        let mut accepted = None;
        let mut s = step;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..n).map(|y| if free[y] { phi[y] + s * dir[y] } else { phi[y] }).collect();
            match dual_value_and_gradient(problem, &trial) {
                Ok((v, p, g)) if v >= value + 1e-4 * s * slope && v > value => {
                    accepted = Some((trial, v, p, g));
                    break;
                }
                Ok(_) | Err(Error::DualInfeasible { .. }) => s *= 0.5,
                Err(e) => return Err(e),
            }
        }
        // at a kink of the transform the search keeps accepting vanishing steps
        if let (false, Some((_, v, _, _))) = (tv, &accepted) {
            history.push(*v);
            if history.len() > STALL_WINDOW {
                let old = history.remove(0);
                if v - old <= STALL_GAIN * (1.0 + v.abs()) {
                    accepted = None;
                }
            }
        }
        match accepted {
            Some((trial, v, p, g)) => {
                let dphi: Vec<f64> = (0..n).map(|y| if free[y] { trial[y] - phi[y] } else { 0.0 }).collect();
                let dgrad: Vec<f64> = (0..n).map(|y| if free[y] { g[y] - grad[y] } else { 0.0 }).collect();
                prev = Some((dphi, dgrad));
                phi = trial;
                value = v;
                psi = p;
                grad = g;
                step = s;
            }
            None => {
                // No measurable ascent left. Either the dual is stationary to
                // machine precision, or (non-smooth transforms) the terminal
                // law already sits at the weak target.
                if gn <= STATIONARY_FLOOR {
                    let mut phi = phi;
                    gauge_fix(problem, &mut phi, &mut psi);
                    return finish(problem, phi, psi, it, true);
                }
                if !tv {
                    let qphi = apply_qc_with_plan(&problem.weak_cost, &problem.points, &phi)?.values;
                    let density = density_from_potentials(problem, &qphi, &psi);
                    let qt = DiscreteMeasure::normalized(terminal_marginal(problem, &density))?;
                    if check_weak_target(&problem.weak_cost, &problem.points, &qt, &problem.mu_t, WEAK_TARGET_TOL)? {
                        let mut phi = phi;
                        gauge_fix(problem, &mut phi, &mut psi);
                        return finish(problem, phi, psi, it, true);
                    }
                }
                let density = density_from_potentials(problem, &phi, &psi);
                return Err(Error::Unconverged {
                    iterations: it,
                    residual_initial: sup(initial_defects(problem, &density)),
                    residual_terminal: gn,
                });
            }
        }
    }
    let density = density_from_potentials(problem, &phi, &psi);
    Err(Error::Unconverged {
        iterations: opts.max_iters,
        residual_initial: sup(initial_defects(problem, &density)),
        residual_terminal: gnorm(&grad),
    })
}

/// `I(Q | P)` and `sum_x mu0(x) I(Q_x | P_x)`, computed separately.
pub fn tensorization_check(problem: &ProblemSpec, density: &EndpointDensity) -> Result<(f64, f64)> {
    if !problem.mu0_equals_nu0() {
        return Err(invalid("tensorization check needs mu0 = nu0"));
    }
    let n = problem.n_states();
    let spec = problem.divergence;
    let p01 = endpoint_kernel(&problem.chain);
    let mut q = Vec::with_capacity(n * n);
    let mut p = Vec::with_capacity(n * n);
    for x in 0..n {
        for y in 0..n {
            p.push(p01[[x, y]]);
            q.push(p01[[x, y]] * problem.rho[x] * density.f[[x, y]]);
        }
    }
    let lhs = divergence_weights(spec, &q, &p);
    let mut rhs = 0.0;
    for x in 0..n {
        let m = problem.mu0[x];
        if m <= 0.0 {
            continue;
        }
        let px: Vec<f64> = problem.kn.row(x).to_vec();
        let qx: Vec<f64> = (0..n).map(|y| px[y] * density.f[[x, y]]).collect();
        rhs += m * divergence_weights(spec, &qx, &px);
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ref_chain::{build_chain, gibbs_measure, ChainMode, GridSpec, TimeGridSpec};
    use crate::weak_cost::Theta;

    fn chain(n: usize, steps: usize, mode: ChainMode) -> ReferenceChain {
        let grid = GridSpec::new(-1.5, 1.5, n).unwrap();
        let time = TimeGridSpec::new(1.0, steps).unwrap();
        let u: Vec<f64> = grid.points().iter().map(|x| 0.5 * x * x).collect();
        let nu0 = gibbs_measure(&u).unwrap();
        build_chain(grid, time, u, nu0, mode).unwrap()
    }

    fn problem(div: DivergenceSpec, mu_t: Vec<f64>) -> ProblemSpec {
        let c = chain(4, 2, ChainMode::Euler);
        let mu0 = c.nu0.clone();
        ProblemSpec::new(c, div, WeakCostSpec::TotalVariation, mu0, DiscreteMeasure::normalized(mu_t).unwrap(), None)
            .unwrap()
    }

    #[test]
    fn reference_is_its_own_bridge() {
        let c = chain(4, 2, ChainMode::Euler);
        let mt = DiscreteMeasure::normalized(c.marginals()[2].clone()).unwrap();
        for div in [DivergenceSpec::Entropy, DivergenceSpec::ChiSquared, DivergenceSpec::Tsallis { q: 2.0 }] {
            let p = ProblemSpec::new(c.clone(), div, WeakCostSpec::TotalVariation, c.nu0.clone(), mt.clone(), None)
                .unwrap();
            let sol = solve_sinkhorn(&p, &SolveOptions::default()).unwrap();
            assert!(sol.density.f.iter().all(|v| (v - 1.0).abs() < 1e-9), "{div:?}");
            assert!(sol.report.primal_value.abs() < 1e-12);
            let phi_spread = sol.potentials.phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - sol.potentials.phi.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(phi_spread < 1e-9);
            assert!(sol.potentials.phi.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn dual_value_zero_potential() {
        let p = problem(DivergenceSpec::ChiSquared, vec![1.0, 2.0, 3.0, 4.0]);
        let (v, psi) = dual_value(&p, &[0.0; 4]).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(psi.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn entropic_dual_closed_form() {
        let p = problem(DivergenceSpec::Entropy, vec![1.0, 2.0, 3.0, 4.0]);
        let phi = [0.3, -0.2, 0.1, 0.5];
        let (v, _) = dual_value(&p, &phi).unwrap();
        let kn = p.endpoint_transition();
        let mut expect = 0.0;
        for x in 0..4 {
            let e: f64 = (0..4).map(|y| kn[[x, y]] * (-phi[y]).exp()).sum();
            expect -= p.mu0[x] * e.ln();
        }
        expect -= (0..4).map(|y| phi[y] * p.mu_t[y]).sum::<f64>();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn strong_duality_and_perturbations() {
        let p = problem(DivergenceSpec::ChiSquared, vec![1.0, 2.0, 3.0, 4.0]);
        let sol = solve_sinkhorn(&p, &SolveOptions::default()).unwrap();
        let r = sol.report;
        assert!(r.converged && r.residual_initial <= 1e-8 && r.residual_terminal <= 1e-8);
        assert!(r.gap.abs() <= 1e-8, "{r:?}");
        let scaled = EndpointDensity { f: sol.density.f.mapv(|v| 1.1 * v) };
        assert!(primal_value(&p, &scaled) > r.primal_value);

        let mut bad = sol.potentials.clone();
        bad.psi[1] += 0.1;
        let res = verify_schrodinger_system(&p, &bad).unwrap();
        assert!(res.initial >= 1e-3);
    }

    #[test]
    fn gauge_invariance() {
        let p = problem(DivergenceSpec::Tsallis { q: 2.0 }, vec![1.0, 2.0, 3.0, 4.0]);
        let sol = solve_sinkhorn(&p, &SolveOptions::default()).unwrap();
        let a = 0.37;
        let phi: Vec<f64> = sol.potentials.phi.iter().map(|v| v + a).collect();
        let psi: Vec<f64> = sol.potentials.psi.iter().map(|v| v - a).collect();
        let d2 = density_from_potentials(&p, &phi, &psi);
        let diff = (&d2.f - &sol.density.f).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(diff < 1e-12);
        assert!((primal_value(&p, &d2) - sol.report.primal_value).abs() < 1e-12);
        let (dv, _) = dual_value(&p, &phi).unwrap();
        assert!((dv - sol.report.dual_value).abs() < 1e-12);
    }

    #[test]
    fn entropic_density_closed_form() {
        let c = chain(4, 2, ChainMode::Euler);
        let mu0 = DiscreteMeasure::normalized(vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let mt = DiscreteMeasure::normalized(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = ProblemSpec::new(c, DivergenceSpec::Entropy, WeakCostSpec::TotalVariation, mu0, mt, None).unwrap();
        let sol = solve_sinkhorn(&p, &SolveOptions::default()).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                let closed = (-sol.potentials.phi[y] - sol.potentials.psi[x]).exp();
                assert!((closed - sol.density.f[[x, y]]).abs() < 1e-12);
            }
        }
        assert!(sol.report.gap.abs() < 1e-8);
    }

    #[test]
    fn reversed_residual_matches_forward() {
        let c = chain(5, 3, ChainMode::Metropolized);
        let mu0 = c.nu0.clone();
        let mt = DiscreteMeasure::normalized(vec![0.3, 0.1, 0.2, 0.1, 0.3]).unwrap();
        let p = ProblemSpec::new(c, DivergenceSpec::ChiSquared, WeakCostSpec::TotalVariation, mu0, mt, None).unwrap();
        let sol = solve_sinkhorn(&p, &SolveOptions::default()).unwrap();
        let res = verify_schrodinger_system(&p, &sol.potentials).unwrap();
        assert!((res.terminal - res.terminal_reversed).abs() <= 1e-10);
        let mut off = sol.potentials.clone();
        off.phi[2] += 0.05;
        let res = verify_schrodinger_system(&p, &off).unwrap();
        assert!(res.terminal > 1e-4);
        assert!((res.terminal - res.terminal_reversed).abs() <= 1e-10);
    }

    #[test]
    fn rejections() {
        let c = chain(4, 2, ChainMode::Euler);
        let mu0 = DiscreteMeasure::normalized(vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let mt = DiscreteMeasure::uniform(4).unwrap();
        let p = ProblemSpec::new(c.clone(), DivergenceSpec::ChiSquared, WeakCostSpec::TotalVariation, mu0, mt.clone(), None)
            .unwrap();
        assert!(matches!(solve_sinkhorn(&p, &SolveOptions::default()), Err(Error::AssumptionViolated(_))));
        assert!(tensorization_check(&p, &EndpointDensity { f: Array2::ones((4, 4)) }).is_err());
        let h = ProblemSpec::new(c.clone(), DivergenceSpec::Hellinger, WeakCostSpec::TotalVariation, c.nu0.clone(), mt.clone(), None)
            .unwrap();
        assert!(matches!(solve_sinkhorn(&h, &SolveOptions::default()), Err(Error::InvalidArgument(_))));
        let w = ProblemSpec::new(c.clone(), DivergenceSpec::Entropy, WeakCostSpec::Marton { p: 2.0 }, c.nu0.clone(), mt, None)
            .unwrap();
        assert!(solve_sinkhorn(&w, &SolveOptions::default()).is_err());
    }

    #[test]
    fn unreachable_target_is_infeasible() {
        let grid = GridSpec::new(0.0, 1.0, 3).unwrap();
        let time = TimeGridSpec::new(1.0, 1).unwrap();
        let k = ndarray::array![[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]];
        let nu0 = DiscreteMeasure::probability(vec![0.5, 0.5, 0.0]).unwrap();
        let c = ReferenceChain::from_kernel(grid, time, vec![0.0; 3], k, nu0.clone()).unwrap();
        let mt = DiscreteMeasure::probability(vec![0.5, 0.25, 0.25]).unwrap();
        let p = ProblemSpec::new(c, DivergenceSpec::Entropy, WeakCostSpec::TotalVariation, nu0, mt, None).unwrap();
        assert!(matches!(solve_sinkhorn(&p, &SolveOptions::default()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn dual_ascent_agrees_with_sinkhorn_on_tv() {
        let p = problem(DivergenceSpec::ChiSquared, vec![1.0, 2.0, 3.0, 4.0]);
        let sk = solve_sinkhorn(&p, &SolveOptions::default()).unwrap();
        let opts = SolveOptions { tol: 1e-10, ..SolveOptions::default() };
        let da = solve_dual_ascent(&p, &opts, None).unwrap();
        assert!((da.report.dual_value - sk.report.dual_value).abs() < 1e-6);
        let diff = (&da.density.f - &sk.density.f).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(diff < 1e-6);
        let warm = solve_dual_ascent(&p, &SolveOptions::default(), Some(&sk.potentials.phi)).unwrap();
        assert_eq!(warm.report.iterations, 0);
    }

    #[test]
    fn dual_ascent_barycentric_spread() {
        let c = chain(5, 2, ChainMode::Metropolized);
        let mu0 = c.nu0.clone();
        // the reference terminal law is nu0 (stationary); spread it symmetrically
        let m = c.marginals()[2].clone();
        let mut spread = vec![0.0; 5];
        spread[0] += 0.5 * m[1];
        spread[2] += 0.5 * m[1] + m[2];
        spread[2] += 0.5 * m[3];
        spread[4] += 0.5 * m[3];
        spread[0] += m[0];
        spread[4] += m[4];
        let mt = DiscreteMeasure::normalized(spread).unwrap();
        let spec = WeakCostSpec::Barycentric { theta: Theta::Power { exponent: 2.0 } };
        let p = ProblemSpec::new(c, DivergenceSpec::ChiSquared, spec, mu0, mt.clone(), None).unwrap();
        let sol = solve_dual_ascent(&p, &SolveOptions::default(), None).unwrap();
        let qt = DiscreteMeasure::normalized(terminal_marginal(&p, &sol.density)).unwrap();
        assert!(check_weak_target(&spec, p.points(), &qt, &mt, 1e-6).unwrap());
    }

    #[test]
    fn dual_ascent_stops_at_a_kink() {
        // target narrower than the reference terminal law: the convex-order
        // constraint binds and the transform is not differentiable at the optimum
        let grid = GridSpec::new(-2.0, 2.0, 15).unwrap();
        let xs = grid.points();
        let u: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        let lambda = gibbs_measure(&u).unwrap();
        let c = build_chain(grid, TimeGridSpec::new(1.0, 6).unwrap(), u, lambda, ChainMode::Metropolized).unwrap();
        let mu0 = DiscreteMeasure::normalized(xs.iter().map(|x| (-4.0 * x * x).exp()).collect()).unwrap();
        let mt = DiscreteMeasure::normalized(xs.iter().map(|x| (-1.6 * x * x).exp()).collect()).unwrap();
        let spec = WeakCostSpec::Barycentric { theta: Theta::Power { exponent: 2.0 } };
        let p = ProblemSpec::new(c, DivergenceSpec::Entropy, spec, mu0, mt, None).unwrap();
        match solve_dual_ascent(&p, &SolveOptions::default(), None) {
            Err(Error::Unconverged { iterations, .. }) => assert!(iterations < 1000, "{iterations}"),
            other => panic!("expected an early Unconverged, got {other:?}"),
        }
    }

    #[test]
    fn tensorization_trivial() {
        let p = problem(DivergenceSpec::Entropy, vec![1.0, 2.0, 3.0, 4.0]);
        let (l, r) = tensorization_check(&p, &EndpointDensity { f: Array2::ones((4, 4)) }).unwrap();
        assert!(l.abs() < 1e-15 && r.abs() < 1e-15);
    }
}
