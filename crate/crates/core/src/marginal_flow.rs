//! Time marginals of the optimal bridge for `C = 0`.
//!
//! Three routes are provided: exact marginals of the discrete optimizer
//! ([`chain_marginals`]), the entropic forward/backward HJB factorization
//! ([`entropic_flow`]), and a Monte-Carlo weak-form check of the chi-squared
//! drift identity ([`chisquared_flow_residual`]).

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::bridge_solver::{solve_sinkhorn, EndpointDensity, ProblemSpec, SolveOptions};
use crate::divergence::DivergenceSpec;
use crate::error::{invalid, Error, Result};
use crate::ref_chain::{reverse_chain, GridSpec, ReferenceChain, TimeGridSpec, KERNEL_TOL};

/// Crank-Nicolson weight.
pub const THETA: f64 = 0.5;
/// Floor on the simulated density process.
pub const Z_FLOOR: f64 = 1e-8;
/// Minimum effective sample size per test function and time.
pub const MIN_ESS: f64 = 100.0;
const BATCH: usize = 4096;
const KDE_BINS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalFlow {
    /// Row `t` is the law of `X_t`.
    pub densities: Array2<f64>,
    pub grid: GridSpec,
    pub time: TimeGridSpec,
}

impl MarginalFlow {
    fn from_unnormalized(mut densities: Array2<f64>, grid: GridSpec, time: TimeGridSpec) -> Result<Self> {
        for (t, mut row) in densities.rows_mut().into_iter().enumerate() {
            let s: f64 = row.sum();
            if !(s > 0.0 && s.is_finite()) || row.iter().any(|v| *v < 0.0) {
                return Err(Error::NumericalFailure {
                    context: format!("marginal row {t} is not a positive finite measure"),
                    residual: s,
                });
            }
            row.mapv_inplace(|v| v / s);
        }
        Ok(MarginalFlow { densities, grid, time })
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.densities.row(t).to_vec()
    }

    pub fn n_rows(&self) -> usize {
        self.densities.nrows()
    }

    /// Total-variation distance per time row.
    pub fn tv_distances(&self, other: &MarginalFlow) -> Result<Vec<f64>> {
        if self.densities.dim() != other.densities.dim() {
            return Err(invalid("flows live on different grids"));
        }
        Ok(self
            .densities
            .rows()
            .into_iter()
            .zip(other.densities.rows())
            .map(|(a, b)| 0.5 * a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .collect())
    }

    pub fn max_tv_distance(&self, other: &MarginalFlow) -> Result<f64> {
        Ok(self.tv_distances(other)?.into_iter().fold(0.0, f64::max))
    }

    /// The same flow read backwards in time.
    pub fn time_reversed(&self) -> MarginalFlow {
        let mut d = self.densities.clone();
        d.invert_axis(ndarray::Axis(0));
        MarginalFlow {
            densities: d,
            grid: self.grid,
            time: self.time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PDESolution {
    /// Row `t` holds `v(t dt, x)`.
    pub v: Array2<f64>,
    pub dt: f64,
    pub dx: f64,
    pub theta: f64,
}

impl PDESolution {
    /// Centered `d/dx` of row `t`, zero at the reflecting ends.
    pub fn gradient(&self, t: usize) -> Vec<f64> {
        let row = self.v.row(t);
        let n = row.len();
        (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    0.0
                } else {
                    (row[i + 1] - row[i - 1]) / (2.0 * self.dx)
                }
            })
            .collect()
    }
}

/// `m_t(z) = sum mu0(x0) K^{0,t}(x0, z) K^{t,n}(z, xT) f(x0, xT)`, one row per time.
pub fn chain_marginals(problem: &ProblemSpec, density: &EndpointDensity) -> Result<MarginalFlow> {
    let chain = &problem.chain;
    let n = chain.n_states();
    let steps = chain.n_steps();
    if density.f.dim() != (n, n) {
        return Err(invalid("density does not match the problem size"));
    }
    // g[t](z, x0) = sum_y K^{t,n}(z, y) f(x0, y)
    let mut g = vec![Array2::<f64>::zeros((n, n)); steps + 1];
    g[steps] = density.f.t().to_owned();
    for t in (0..steps).rev() {
        g[t] = chain.kernel(t).dot(&g[t + 1]);
    }
    // a(x0, z) = mu0(x0) K^{0,t}(x0, z)
    let mut a = Array2::<f64>::zeros((n, n));
    for x in 0..n {
        a[[x, x]] = problem.mu0[x];
    }
    let mut out = Array2::<f64>::zeros((steps + 1, n));
    for t in 0..=steps {
        if t > 0 {
            a = a.dot(chain.kernel(t - 1));
        }
        for z in 0..n {
            out[[t, z]] = (0..n).map(|x| a[[x, z]] * g[t][[z, x]]).sum();
        }
    }
    MarginalFlow::from_unnormalized(out, chain.grid, chain.time)
}

/// Tridiagonal generator of `1/2 d_xx - 1/2 U' d_x` in flux form.
///
/// Rates `i -> i+-1` are `exp((U_i - U_j)/2) / (2 dx^2)`; no flux leaves the grid.
struct Generator {
    up: Vec<f64>,
    down: Vec<f64>,
}

impl Generator {
    fn new(grid: &GridSpec, u: &[f64]) -> Self {
        let n = u.len();
        let c = 0.5 / (grid.dx() * grid.dx());
        let up = (0..n)
            .map(|i| if i + 1 < n { c * (0.5 * (u[i] - u[i + 1])).exp() } else { 0.0 })
            .collect();
        let down = (0..n)
            .map(|i| if i > 0 { c * (0.5 * (u[i] - u[i - 1])).exp() } else { 0.0 })
            .collect();
        Generator { up, down }
    }

    fn apply(&self, h: &[f64], i: usize) -> f64 {
        let mut acc = 0.0;
        if self.up[i] != 0.0 {
            acc += self.up[i] * (h[i + 1] - h[i]);
        }
        if self.down[i] != 0.0 {
            acc += self.down[i] * (h[i - 1] - h[i]);
        }
        acc
    }

    /// Solves `(I - c L) x = rhs` by the Thomas algorithm.
    fn solve_implicit(&self, c: f64, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut cp = vec![0.0; n];
        let mut dp = vec![0.0; n];
        for i in 0..n {
            let lower = -c * self.down[i];
            let diag = 1.0 + c * (self.up[i] + self.down[i]);
            let upper = -c * self.up[i];
            let m = if i == 0 { diag } else { diag - lower * cp[i - 1] };
            cp[i] = upper / m;
            dp[i] = if i == 0 { rhs[i] / m } else { (rhs[i] - lower * dp[i - 1]) / m };
        }
        let mut x = vec![0.0; n];
        x[n - 1] = dp[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = dp[i] - cp[i] * x[i + 1];
        }
        x
    }
}

/// Backward theta-scheme for `d_t w + L w + s = 0`, `w(T) = terminal`.
fn backward_linear(chain: &ReferenceChain, terminal: &[f64], source: Option<&Array2<f64>>) -> Array2<f64> {
    let n = chain.n_states();
    let steps = chain.n_steps();
    let dt = chain.time.dt();
    let gen = Generator::new(&chain.grid, &chain.potential);
    let mut w = Array2::<f64>::zeros((steps + 1, n));
    w.row_mut(steps).assign(&ndarray::ArrayView1::from(terminal));
    for t in (0..steps).rev() {
        let next = w.row(t + 1).to_vec();
        let rhs: Vec<f64> = (0..n)
            .map(|i| {
                let mut r = next[i] + (1.0 - THETA) * dt * gen.apply(&next, i);
                if let Some(s) = source {
                    r += dt * (THETA * s[[t, i]] + (1.0 - THETA) * s[[t + 1, i]]);
                }
                r
            })
            .collect();
        let cur = gen.solve_implicit(THETA * dt, &rhs);
        w.row_mut(t).assign(&ndarray::Array1::from(cur));
    }
    w
}

/// Entropic HJB `d_t v + L v - 1/2 |d_x v|^2 = 0`, `v(T) = terminal`, via `h = e^{-v}`.
///
/// `+inf` terminal entries are allowed (`h = 0` there).
pub fn solve_hjb_entropic(chain: &ReferenceChain, terminal: &[f64]) -> Result<PDESolution> {
    let n = chain.n_states();
    if terminal.len() != n {
        return Err(invalid("terminal condition does not match the grid"));
    }
    if terminal.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(invalid("terminal condition must be finite or +inf"));
    }
    let m = terminal
        .iter()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return Err(invalid("terminal condition is +inf everywhere"));
    }
    let h_t: Vec<f64> = terminal.iter().map(|v| (m - v).exp()).collect();
    let h = backward_linear(chain, &h_t, None);
    let steps = chain.n_steps();
    let mut v = Array2::<f64>::zeros((steps + 1, n));
    for t in 0..steps {
        for i in 0..n {
            let hv = h[[t, i]];
            if !(hv > 0.0 && hv.is_finite()) {
                return Err(Error::NumericalFailure {
                    context: format!("Cole-Hopf transform nonpositive at step {t}, state {i}; refine the grid"),
                    residual: hv,
                });
            }
            v[[t, i]] = m - hv.ln();
        }
    }
    v.row_mut(steps).assign(&ndarray::ArrayView1::from(terminal));
    Ok(PDESolution {
        v,
        dt: chain.time.dt(),
        dx: chain.grid.dx(),
        theta: THETA,
    })
}

/// `(v, v_tilde)`: `v_tilde` solves the linear equation from `terminal`, `v`
/// the equation with source `-1/2 |d_x v_tilde|^2` from zero.
pub fn solve_pde_chisquared(chain: &ReferenceChain, terminal: &[f64]) -> Result<(PDESolution, PDESolution)> {
    let n = chain.n_states();
    if terminal.len() != n {
        return Err(invalid("terminal condition does not match the grid"));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(invalid("terminal condition must be finite"));
    }
    let meta = |v| PDESolution {
        v,
        dt: chain.time.dt(),
        dx: chain.grid.dx(),
        theta: THETA,
    };
    let tilde = meta(backward_linear(chain, terminal, None));
    let steps = chain.n_steps();
    let mut source = Array2::<f64>::zeros((steps + 1, n));
    for t in 0..=steps {
        for (i, g) in tilde.gradient(t).into_iter().enumerate() {
            source[[t, i]] = -0.5 * g * g;
        }
    }
    let v = meta(backward_linear(chain, &vec![0.0; n], Some(&source)));
    if v.v.iter().chain(tilde.v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure {
            context: "chi-squared PDE produced non-finite values".into(),
            residual: f64::NAN,
        });
    }
    Ok((v, tilde))
}

fn require_stationary_reversible(chain: &ReferenceChain) -> Result<()> {
    if !chain.reversible {
        return Err(Error::AssumptionViolated("marginal flow needs a reversible reference chain".into()));
    }
    let d = chain.nu0.sup_distance(&chain.gibbs());
    if d > KERNEL_TOL {
        return Err(Error::AssumptionViolated(format!(
            "marginal flow needs nu0 equal to the Gibbs measure (sup distance {d:.3e})"
        )));
    }
    Ok(())
}

fn require_flow_problem(problem: &ProblemSpec, divergence: DivergenceSpec) -> Result<()> {
    if problem.divergence != divergence {
        return Err(invalid(format!(
            "this flow needs the {} divergence, got {}",
            divergence.name(),
            problem.divergence.name()
        )));
    }
    if !problem.weak_cost.is_total_variation() {
        return Err(invalid("marginal flow needs a hard terminal constraint"));
    }
    if problem.cost.iter().any(|c| *c != 0.0) {
        return Err(invalid("marginal flow is defined for zero endpoint cost"));
    }
    require_stationary_reversible(&problem.chain)
}

/// Entropic flow `Q_t ~ exp(-v(t) - v_rev(T - t) - U)` from the forward and reversed problems.
pub fn entropic_flow(problem: &ProblemSpec, opts: &SolveOptions) -> Result<MarginalFlow> {
    require_flow_problem(problem, DivergenceSpec::Entropy)?;
    let chain = &problem.chain;
    let forward = solve_sinkhorn(problem, opts)?;
    let reversed = ProblemSpec::new(
        reverse_chain(chain)?,
        DivergenceSpec::Entropy,
        problem.weak_cost,
        problem.mu_t.clone(),
        problem.mu0.clone(),
        None,
    )?;
    let backward = solve_sinkhorn(&reversed, opts)?;
    let v = solve_hjb_entropic(chain, &forward.potentials.phi)?;
    let v_rev = solve_hjb_entropic(chain, &backward.potentials.phi)?;
    let steps = chain.n_steps();
    let n = chain.n_states();
    let mut out = Array2::<f64>::zeros((steps + 1, n));
    for t in 0..=steps {
        let expo: Vec<f64> = (0..n)
            .map(|i| -v.v[[t, i]] - v_rev.v[[steps - t, i]] - chain.potential[i])
            .collect();
        let top = expo.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..n {
            out[[t, i]] = (expo[i] - top).exp();
        }
    }
    MarginalFlow::from_unnormalized(out, chain.grid, chain.time)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowCheckOptions {
    pub mc_paths: usize,
    /// KDE bandwidth; `None` picks 1.5 times Silverman's rule per time.
    pub bandwidth: Option<f64>,
    pub seed: u64,
    /// Euler-Maruyama substeps per chain step.
    pub substeps: usize,
    pub solve: SolveOptions,
}

impl Default for FlowCheckOptions {
    fn default() -> Self {
        FlowCheckOptions {
            mc_paths: 100_000,
            bandwidth: None,
            seed: 0,
            substeps: 8,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquaredFlowCheck {
    /// Mean over evaluation times of the relative weak-form residual.
    pub residual: f64,
    /// `(t, residual)` per evaluation time.
    pub per_time: Vec<(f64, f64)>,
    /// Mean KDE bandwidth used.
    pub bandwidth: f64,
    pub min_ess: f64,
    /// Fraction of simulation steps where `Z` hit the floor.
    pub floored_fraction: f64,
    /// Reference mass of endpoint pairs where the optimal density is clipped to zero.
    pub clipped_mass: f64,
}

/// Bump test functions `exp(-1 / (1 - r^2))` on `|x - c| < w`.
#[derive(Debug, Clone)]
struct Bumps {
    centers: Vec<f64>,
    radius: f64,
}

impl Bumps {
    fn around(mean: f64, sd: f64) -> Self {
        Bumps {
            centers: [-1.5, -0.9, -0.3, 0.3, 0.9, 1.5].iter().map(|k| mean + k * sd).collect(),
            radius: 0.8 * sd,
        }
    }

    fn eval(&self, k: usize, x: f64) -> f64 {
        let r = (x - self.centers[k]) / self.radius;
        if r.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - r * r)).exp()
        }
    }
}

/// Piecewise-linear interpolation of node values at `x`.
fn interp(grid: &GridSpec, vals: &[f64], x: f64) -> f64 {
    let s = ((x - grid.x_min) / grid.dx()).clamp(0.0, (vals.len() - 1) as f64);
    let i = (s.floor() as usize).min(vals.len() - 2);
    let w = s - i as f64;
    (1.0 - w) * vals[i] + w * vals[i + 1]
}

/// Gradients of a PDE solution at every row.
fn gradients(sol: &PDESolution) -> Vec<Vec<f64>> {
    (0..sol.v.nrows()).map(|t| sol.gradient(t)).collect()
}

#[derive(Clone)]
struct Accumulator {
    hist: Vec<Vec<f64>>,
    sum_x: Vec<f64>,
    sum_x2: Vec<f64>,
    drift_g: Vec<Vec<f64>>,
    g_sum: Vec<Vec<f64>>,
    g_sq: Vec<Vec<f64>>,
    floored: u64,
    steps: u64,
}

impl Accumulator {
    fn new(times: usize, tests: usize) -> Self {
        Accumulator {
            hist: vec![vec![0.0; KDE_BINS]; times],
            sum_x: vec![0.0; times],
            sum_x2: vec![0.0; times],
            drift_g: vec![vec![0.0; tests]; times],
            g_sum: vec![vec![0.0; tests]; times],
            g_sq: vec![vec![0.0; tests]; times],
            floored: 0,
            steps: 0,
        }
    }

    fn merge(mut self, o: Accumulator) -> Self {
        let add = |a: &mut Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            for (x, y) in a.iter_mut().zip(b) {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            }
        };
        add(&mut self.hist, &o.hist);
        add(&mut self.drift_g, &o.drift_g);
        add(&mut self.g_sum, &o.g_sum);
        add(&mut self.g_sq, &o.g_sq);
        self.sum_x.iter_mut().zip(&o.sum_x).for_each(|(p, q)| *p += q);
        self.sum_x2.iter_mut().zip(&o.sum_x2).for_each(|(p, q)| *p += q);
        self.floored += o.floored;
        self.steps += o.steps;
        self
    }
}

/// One simulated direction of the controlled pair `(X, Z)`.
struct Direction<'a> {
    grid: &'a GridSpec,
    /// `-U'/2` at the nodes.
    drift: &'a [f64],
    /// `d_x v_tilde` per chain row.
    grad: &'a [Vec<f64>],
    start: &'a WeightedIndex<f64>,
    /// `Z_0` per starting cell.
    z0: &'a [f64],
    /// Chain row recorded into accumulator slot `k`, as `(row, slot)`.
    record: &'a [(usize, usize)],
}

struct SimSetup<'a> {
    steps: usize,
    substeps: usize,
    dt: f64,
    lo: f64,
    hi: f64,
    bumps: &'a Bumps,
    n_times: usize,
}

fn simulate_batch(setup: &SimSetup, dir: &Direction, paths: usize, rng: &mut ChaCha8Rng) -> Accumulator {
    let tests = setup.bumps.centers.len();
    let mut acc = Accumulator::new(setup.n_times, tests);
    let h = setup.dt / setup.substeps as f64;
    let sq = h.sqrt();
    let bin_w = (setup.hi - setup.lo) / KDE_BINS as f64;
    let grid = dir.grid;
    for _ in 0..paths {
        let cell = dir.start.sample(rng);
        let mut x = grid.point(cell) + grid.dx() * (rng.random::<f64>() - 0.5);
        let mut z = dir.z0[cell];
        let mut rec = dir.record.iter().peekable();
        for row in 0..=setup.steps {
            if let Some(&&(r, slot)) = rec.peek() {
                if r == row {
                    rec.next();
                    let gv = interp(grid, &dir.grad[row], x);
                    let b = interp(grid, dir.drift, x) - gv / z;
                    let b_idx = (((x - setup.lo) / bin_w) as usize).min(KDE_BINS - 1);
                    acc.hist[slot][b_idx] += 1.0;
                    acc.sum_x[slot] += x;
                    acc.sum_x2[slot] += x * x;
                    for k in 0..tests {
                        let g = setup.bumps.eval(k, x);
                        if g > 0.0 {
                            acc.drift_g[slot][k] += b * g;
                            acc.g_sum[slot][k] += g;
                            acc.g_sq[slot][k] += g * g;
                        }
                    }
                }
            }
            if row == setup.steps {
                break;
            }
            for sub in 0..setup.substeps {
                let w = sub as f64 / setup.substeps as f64;
                let g0 = interp(grid, &dir.grad[row], x);
                let g1 = interp(grid, &dir.grad[row + 1], x);
                let gv = (1.0 - w) * g0 + w * g1;
                let dw: f64 = sq * rng.sample::<f64, _>(StandardNormal);
                let bx = interp(grid, dir.drift, x) - gv / z;
                x += bx * h + dw;
                z += gv * gv / z * h - gv * dw;
                if z < Z_FLOOR {
                    z = Z_FLOOR;
                    acc.floored += 1;
                }
                acc.steps += 1;
                if x < setup.lo {
                    x = 2.0 * setup.lo - x;
                }
                if x > setup.hi {
                    x = 2.0 * setup.hi - x;
                }
                x = x.clamp(setup.lo, setup.hi);
            }
        }
    }
    acc
}

fn run_direction(setup: &SimSetup, dir: &Direction, paths: usize, seed: u64, stream: u64) -> Accumulator {
    let batches = paths.div_ceil(BATCH);
    let parts: Vec<Accumulator> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * b as u64 + stream);
            let m = BATCH.min(paths - b * BATCH);
            simulate_batch(setup, dir, m, &mut rng)
        })
        .collect();
    let tests = setup.bumps.centers.len();
    parts
        .into_iter()
        .fold(Accumulator::new(setup.n_times, tests), Accumulator::merge)
}

/// Binned Gaussian KDE score `q'/q` at the bin centers.
fn kde_score(hist: &[f64], lo: f64, bin_w: f64, bw: f64) -> Vec<f64> {
    let centers: Vec<f64> = (0..hist.len()).map(|i| lo + (i as f64 + 0.5) * bin_w).collect();
    let reach = (8.0 * bw / bin_w).ceil() as usize;
    (0..hist.len())
        .map(|i| {
            let (mut q, mut dq) = (0.0, 0.0);
            let a = i.saturating_sub(reach);
            let b = (i + reach + 1).min(hist.len());
            for j in a..b {
                if hist[j] == 0.0 {
                    continue;
                }
                let d = centers[i] - centers[j];
                let k = (-0.5 * d * d / (bw * bw)).exp();
                q += hist[j] * k;
                dq -= hist[j] * k * d / (bw * bw);
            }
            if q > 0.0 {
                dq / q
            } else {
                0.0
            }
        })
        .collect()
}

/// Weak-form residual of the chi-squared drift identity in the `x` variable.
///
/// For every bump `g` and time `t` in the middle half of the horizon, compares
/// `E[b(t) g] + E[b_rev(T - t) g]` against `E[(log q_t)' g]`, where `b` and
/// `b_rev` are the controlled drifts `-U'/2 - v_tilde'/Z` of the forward and
/// time-reversed optimal processes and the score is a KDE estimate from the
/// forward sample.
pub fn chisquared_flow_residual(problem: &ProblemSpec, opts: &FlowCheckOptions) -> Result<ChiSquaredFlowCheck> {
    require_flow_problem(problem, DivergenceSpec::ChiSquared)?;
    if opts.mc_paths < 10_000 {
        return Err(invalid("chi-squared flow check needs at least 10^4 paths"));
    }
    if opts.substeps == 0 {
        return Err(invalid("substeps must be positive"));
    }
    if let Some(bw) = opts.bandwidth {
        if !(bw > 0.0 && bw.is_finite()) {
            return Err(invalid("bandwidth must be positive"));
        }
    }
    let n = problem.n_states();
    if problem.mu_t.support().count() < n {
        return Err(Error::Support("chi-squared flow check needs muT of full support".into()));
    }
    let chain = &problem.chain;
    let sol = solve_sinkhorn(problem, &opts.solve)?;
    let kn = problem.endpoint_transition();
    let mut clipped_mass = 0.0;
    for x in 0..n {
        for y in 0..n {
            if sol.density.f[[x, y]] <= 0.0 {
                clipped_mass += problem.mu0[x] * kn[[x, y]];
            }
        }
    }
    if clipped_mass > 0.0 {
        log::warn!("optimal density is clipped on reference mass {clipped_mass:.3e}; the PDE controls are approximate");
    }
    // The reversed optimizer has the same density; its terminal potential is psi.
    let (_, v_tilde) = solve_pde_chisquared(chain, &sol.potentials.phi)?;
    let (_, v_tilde_rev) = solve_pde_chisquared(chain, &sol.potentials.psi)?;
    let grad_f = gradients(&v_tilde);
    let grad_r = gradients(&v_tilde_rev);

    let steps = chain.n_steps();
    let horizon = chain.time.horizon;
    let eval: Vec<usize> = (0..=steps)
        .filter(|&t| {
            let s = t as f64 * chain.time.dt();
            s >= 0.25 * horizon - 1e-12 && s <= 0.75 * horizon + 1e-12
        })
        .collect();
    if eval.is_empty() {
        return Err(invalid("no chain time falls in the middle half of the horizon"));
    }
    let record_f: Vec<(usize, usize)> = eval.iter().enumerate().map(|(k, &t)| (t, k)).collect();
    let mut record_r: Vec<(usize, usize)> = eval.iter().enumerate().map(|(k, &t)| (steps - t, k)).collect();
    record_r.sort();

    let lambda = chain.gibbs();
    let mean: f64 = (0..n).map(|i| lambda[i] * chain.grid.point(i)).sum();
    let var: f64 = (0..n).map(|i| lambda[i] * (chain.grid.point(i) - mean).powi(2)).sum();
    let bumps = Bumps::around(mean, var.sqrt());
    let half = 0.5 * chain.grid.dx();
    let setup = SimSetup {
        steps,
        substeps: opts.substeps,
        dt: chain.time.dt(),
        lo: chain.grid.x_min - half,
        hi: chain.grid.x_max + half,
        bumps: &bumps,
        n_times: eval.len(),
    };
    let sampler = |w: &[f64]| WeightedIndex::new(w.to_vec()).map_err(|e| invalid(format!("cannot sample start law: {e}")));
    let start_f = sampler(problem.mu0.weights())?;
    let start_r = sampler(problem.mu_t.weights())?;
    let z0_f = vec![1.0; n];
    let z0_r: Vec<f64> = (0..n).map(|i| problem.mu_t[i] / lambda[i]).collect();
    let fwd = Direction {
        grid: &chain.grid,
        drift: &chain.drift,
        grad: &grad_f,
        start: &start_f,
        z0: &z0_f,
        record: &record_f,
    };
    let rev = Direction {
        grid: &chain.grid,
        drift: &chain.drift,
        grad: &grad_r,
        start: &start_r,
        z0: &z0_r,
        record: &record_r,
    };
    let acc_f = run_direction(&setup, &fwd, opts.mc_paths, opts.seed, 0);
    let acc_r = run_direction(&setup, &rev, opts.mc_paths, opts.seed, 1);

    let np = opts.mc_paths as f64;
    let bin_w = (setup.hi - setup.lo) / KDE_BINS as f64;
    let mut per_time = Vec::with_capacity(eval.len());
    let mut min_ess = f64::INFINITY;
    let mut bw_sum = 0.0;
    for (k, &t) in eval.iter().enumerate() {
        for a in [&acc_f, &acc_r] {
            for j in 0..bumps.centers.len() {
                let ess = if a.g_sq[k][j] > 0.0 { a.g_sum[k][j].powi(2) / a.g_sq[k][j] } else { 0.0 };
                min_ess = min_ess.min(ess);
                if ess < MIN_ESS {
                    return Err(Error::StatisticalFailure(format!(
                        "effective sample size {ess:.1} below {MIN_ESS} for test {j} at step {t}"
                    )));
                }
            }
        }
        let m = acc_f.sum_x[k] / np;
        let sd = (acc_f.sum_x2[k] / np - m * m).max(0.0).sqrt();
        let bw = opts.bandwidth.unwrap_or(1.5 * 1.06 * sd * np.powf(-0.2));
        bw_sum += bw;
        let score = kde_score(&acc_f.hist[k], setup.lo, bin_w, bw);
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..bumps.centers.len() {
            let lhs = (acc_f.drift_g[k][j] + acc_r.drift_g[k][j]) / np;
            let rhs: f64 = (0..KDE_BINS)
                .map(|i| {
                    let c = acc_f.hist[k][i];
                    if c == 0.0 {
                        0.0
                    } else {
                        c * score[i] * bumps.eval(j, setup.lo + (i as f64 + 0.5) * bin_w)
                    }
                })
                .sum::<f64>()
                / np;
            num += (lhs - rhs).abs();
            den += lhs.abs();
        }
        per_time.push((t as f64 * chain.time.dt(), num / den.max(f64::MIN_POSITIVE)));
    }
    let residual = per_time.iter().map(|p| p.1).sum::<f64>() / per_time.len() as f64;
    let total_steps = (acc_f.steps + acc_r.steps).max(1) as f64;
    Ok(ChiSquaredFlowCheck {
        residual,
        per_time,
        bandwidth: bw_sum / eval.len() as f64,
        min_ess,
        floored_fraction: (acc_f.floored + acc_r.floored) as f64 / total_steps,
        clipped_mass,
    })
}
