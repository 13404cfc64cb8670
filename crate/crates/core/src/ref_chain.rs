//! Discretized reference diffusion `dX = -U'(X)/2 dt + dW` on a 1-D grid.
//!
//! Two kernel constructions are available. `Euler` bins the one-step Gaussian
//! of the Euler scheme onto the grid and folds mass that leaves the grid into
//! the boundary states. `Metropolized` bins a centered Gaussian proposal and
//! accepts with `min(1, e^{U(x) - U(y)})`, which puts the kernel in exact
//! detailed balance with the grid Gibbs measure `lambda ~ e^{-U}`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, Error, Result};
use crate::measure::DiscreteMeasure;

/// Tolerance on row sums and on detailed balance.
pub const KERNEL_TOL: f64 = 1e-12;
/// Escaping Gaussian mass above which a warning is recorded.
pub const ESCAPE_WARN: f64 = 1e-3;
/// Upper bound on enumerated paths.
pub const MAX_PATHS: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_states: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, n_states: usize) -> Result<Self> {
        let g = GridSpec { x_min, x_max, n_states };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max) {
            return Err(invalid(format!(
                "grid bounds must satisfy x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if self.n_states < 2 {
            return Err(invalid("grid needs at least 2 states"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_states - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_states).map(|i| self.point(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGridSpec {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGridSpec {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        let t = TimeGridSpec { horizon, n_steps };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.n_steps == 0 {
            return Err(invalid("need at least one time step"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Binned Gaussian step `N(x + b(x) dt, dt)`, off-grid mass folded into the ends.
    Euler,
    /// Binned Langevin proposal `N(x + b(x) dt, dt)` with Metropolis correction for `lambda`.
    Metropolized,
    /// Binned symmetric proposal `N(x, dt)` with Metropolis correction for `lambda`.
    RandomWalkMetropolis,
}

/// Expected Gaussian mass (under `nu0`) that left the grid before folding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationWarning {
    pub escaped_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKernels {
    Homogeneous(Array2<f64>),
    /// One kernel per step; reversed chains are time-inhomogeneous.
    PerStep(Vec<Array2<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceChain {
    pub grid: GridSpec,
    pub time: TimeGridSpec,
    pub potential: Vec<f64>,
    pub drift: Vec<f64>,
    pub kernels: StepKernels,
    pub nu0: DiscreteMeasure,
    pub reversible: bool,
    pub mode: Option<ChainMode>,
    pub warning: Option<DiscretizationWarning>,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal mass of `[a, b]`, computed on the tail side to avoid cancellation.
fn cell_mass(a: f64, b: f64) -> f64 {
    let m = if a > 0.0 {
        normal_cdf(-a) - normal_cdf(-b)
    } else {
        normal_cdf(b) - normal_cdf(a)
    };
    m.max(0.0)
}

/// Centered-difference drift `-U'/2`, one-sided at the ends.
pub fn gradient_drift(grid: &GridSpec, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let dx = grid.dx();
    (0..n)
        .map(|i| {
            let du = if i == 0 {
                (u[1] - u[0]) / dx
            } else if i == n - 1 {
                (u[n - 1] - u[n - 2]) / dx
            } else {
                (u[i + 1] - u[i - 1]) / (2.0 * dx)
            };
            -0.5 * du
        })
        .collect()
}

/// Grid-normalized Gibbs measure `lambda ~ e^{-U}`.
pub fn gibbs_measure(u: &[f64]) -> Result<DiscreteMeasure> {
    if u.iter().any(|x| !x.is_finite()) {
        return Err(invalid("potential must be finite"));
    }
    let m = u.iter().cloned().fold(f64::INFINITY, f64::min);
    DiscreteMeasure::normalized(u.iter().map(|x| (m - x).exp()).collect())
}

fn check_stochastic(k: &Array2<f64>, n: usize) -> Result<()> {
    if k.dim() != (n, n) {
        return Err(invalid(format!("kernel has shape {:?}, expected ({n}, {n})", k.dim())));
    }
    for (i, row) in k.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("kernel row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > KERNEL_TOL {
            return Err(invalid(format!("kernel row {i} sums to {s}")));
        }
    }
    Ok(())
}

pub fn build_chain(
    grid: GridSpec,
    time: TimeGridSpec,
    u: Vec<f64>,
    nu0: DiscreteMeasure,
    mode: ChainMode,
) -> Result<ReferenceChain> {
    grid.validate()?;
    time.validate()?;
    let n = grid.n_states;
    if u.len() != n {
        return Err(invalid(format!("potential has {} values for {n} states", u.len())));
    }
    if u.iter().any(|x| !x.is_finite()) {
        return Err(invalid("potential must be finite"));
    }
    if nu0.len() != n || !nu0.is_probability() {
        return Err(invalid("nu0 must be a probability on the grid"));
    }
    let drift = gradient_drift(&grid, &u);
    let dx = grid.dx();
    let sd = time.dt().sqrt();
    let xs = grid.points();
    let mut k = Array2::<f64>::zeros((n, n));
    let mut escaped = 0.0f64;

    match mode {
        ChainMode::Euler => {
            let dt = time.dt();
            for i in 0..n {
                let mean = xs[i] + drift[i] * dt;
                // cumulative mass up to each cell's right edge
                let mut prev = 0.0;
                for j in 0..n {
                    let right = if j == n - 1 {
                        1.0
                    } else {
                        normal_cdf((xs[j] + 0.5 * dx - mean) / sd)
                    };
                    k[[i, j]] = (right - prev).max(0.0);
                    prev = right;
                }
                let lo = normal_cdf((grid.x_min - 0.5 * dx - mean) / sd);
                let hi = 1.0 - normal_cdf((grid.x_max + 0.5 * dx - mean) / sd);
                escaped += nu0[i] * (lo + hi);
                let s: f64 = k.row(i).sum();
                k.row_mut(i).mapv_inplace(|v| v / s);
            }
        }
        ChainMode::Metropolized | ChainMode::RandomWalkMetropolis => {
            let shift = mode == ChainMode::Metropolized;
            let mut q = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let mean = xs[i] + if shift { drift[i] * time.dt() } else { 0.0 };
                for j in 0..n {
                    q[[i, j]] = cell_mass((xs[j] - 0.5 * dx - mean) / sd, (xs[j] + 0.5 * dx - mean) / sd);
                }
            }
            // lambda_i K_ij = min(lambda_i q_ij, lambda_j q_ji); rejected and off-grid mass stays put.
            for i in 0..n {
                let mut off = 0.0;
                for j in 0..n {
                    if j != i {
                        k[[i, j]] = q[[i, j]].min((u[i] - u[j]).exp() * q[[j, i]]);
                        off += k[[i, j]];
                    }
                }
                k[[i, i]] = 1.0 - off;
            }
        }
    }
    check_stochastic(&k, n)?;
    // Rejected off-grid proposals keep the Metropolized kernel exact; only Euler folds.
    let warning = if escaped > ESCAPE_WARN {
        log::warn!("Euler kernel: {escaped:.3e} of the Gaussian mass folded into boundary states");
        Some(DiscretizationWarning {
            escaped_mass: escaped,
        })
    } else {
        None
    };
    Ok(ReferenceChain {
        grid,
        time,
        potential: u,
        drift,
        kernels: StepKernels::Homogeneous(k),
        nu0,
        reversible: mode != ChainMode::Euler,
        mode: Some(mode),
        warning,
    })
}

impl ReferenceChain {
    /// A chain from an explicit row-stochastic step kernel.
    pub fn from_kernel(
        grid: GridSpec,
        time: TimeGridSpec,
        u: Vec<f64>,
        kernel: Array2<f64>,
        nu0: DiscreteMeasure,
    ) -> Result<Self> {
        grid.validate()?;
        time.validate()?;
        let n = grid.n_states;
        if u.len() != n || nu0.len() != n || !nu0.is_probability() {
            return Err(invalid("potential and nu0 must live on the grid"));
        }
        check_stochastic(&kernel, n)?;
        let lambda = gibbs_measure(&u)?;
        let reversible = (0..n).all(|i| {
            (0..n).all(|j| {
                (lambda[i] * kernel[[i, j]] - lambda[j] * kernel[[j, i]]).abs() <= KERNEL_TOL
            })
        });
        Ok(ReferenceChain {
            drift: gradient_drift(&grid, &u),
            grid,
            time,
            potential: u,
            kernels: StepKernels::Homogeneous(kernel),
            nu0,
            reversible,
            mode: None,
            warning: None,
        })
    }

    pub fn n_states(&self) -> usize {
        self.grid.n_states
    }

    pub fn n_steps(&self) -> usize {
        self.time.n_steps
    }

    /// Kernel of step `t`, mapping time `t` to `t + 1`.
    pub fn kernel(&self, t: usize) -> &Array2<f64> {
        match &self.kernels {
            StepKernels::Homogeneous(k) => k,
            StepKernels::PerStep(ks) => &ks[t],
        }
    }

    /// Same kernels, different initial law.
    pub fn with_nu0(&self, nu0: DiscreteMeasure) -> Result<Self> {
        if nu0.len() != self.n_states() || !nu0.is_probability() {
            return Err(invalid("nu0 must be a probability on the grid"));
        }
        let mut c = self.clone();
        c.nu0 = nu0;
        Ok(c)
    }

    pub fn gibbs(&self) -> DiscreteMeasure {
        gibbs_measure(&self.potential).expect("potential validated at construction")
    }

    /// Product of the kernels of steps `s..t`.
    pub fn transition(&self, s: usize, t: usize) -> Array2<f64> {
        let n = self.n_states();
        let mut p = Array2::<f64>::eye(n);
        if let StepKernels::Homogeneous(k) = &self.kernels {
            for _ in s..t {
                p = p.dot(k);
            }
        } else {
            for step in s..t {
                p = p.dot(self.kernel(step));
            }
        }
        p
    }

    /// `K^{0,n}(x, y) = P(X_T = y | X_0 = x)`.
    pub fn endpoint_transition(&self) -> Array2<f64> {
        self.transition(0, self.n_steps())
    }

    /// Time marginals `m_0 = nu0, m_{s+1} = m_s K_s`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let mut out = Vec::with_capacity(self.n_steps() + 1);
        let mut m = self.nu0.weights().to_vec();
        out.push(m.clone());
        for t in 0..self.n_steps() {
            let k = self.kernel(t);
            let mut next = vec![0.0; n];
            for x in 0..n {
                if m[x] != 0.0 {
                    for y in 0..n {
                        next[y] += m[x] * k[[x, y]];
                    }
                }
            }
            m = next;
            out.push(m.clone());
        }
        out
    }

    /// Largest detailed-balance defect `|lambda(x)K(x,y) - lambda(y)K(y,x)|` over all steps.
    pub fn detailed_balance_defect(&self) -> f64 {
        let lambda = self.gibbs();
        let n = self.n_states();
        let mut worst = 0.0f64;
        for t in 0..self.n_steps() {
            let k = self.kernel(t);
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((lambda[i] * k[[i, j]] - lambda[j] * k[[j, i]]).abs());
                }
            }
            if matches!(self.kernels, StepKernels::Homogeneous(_)) {
                break;
            }
        }
        worst
    }
}

/// Joint law of `(X_0, X_T)`: `diag(nu0) K^{0,n}`.
pub fn endpoint_kernel(chain: &ReferenceChain) -> Array2<f64> {
    let mut p = chain.endpoint_transition();
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let w = chain.nu0[i];
        row.mapv_inplace(|v| w * v);
    }
    p
}

/// The time-reversed chain, by Bayes' rule on consecutive marginals.
///
/// Step `t` of the result is `K'_t(y, x) = m_{n-t-1}(x) K_{n-t-1}(x, y) / m_{n-t}(y)`.
/// States of zero marginal mass are never visited by the reversed chain; they
/// get a self-loop so that every row stays stochastic.
pub fn reverse_chain(chain: &ReferenceChain) -> Result<ReferenceChain> {
    let n = chain.n_states();
    let steps = chain.n_steps();
    let m = chain.marginals();
    let terminal = DiscreteMeasure::normalized(m[steps].clone())
        .map_err(|_| Error::Support("terminal marginal has no mass".into()))?;
    let mut ks = Vec::with_capacity(steps);
    for t in 0..steps {
        let s = steps - t - 1;
        let k = chain.kernel(s);
        let mut r = Array2::<f64>::zeros((n, n));
        for y in 0..n {
            let denom = m[s + 1][y];
            if denom > 0.0 {
                for x in 0..n {
                    r[[y, x]] = m[s][x] * k[[x, y]] / denom;
                }
                let rs: f64 = r.row(y).sum();
                r.row_mut(y).mapv_inplace(|v| v / rs);
            } else {
                r[[y, y]] = 1.0;
            }
        }
        ks.push(r);
    }
    let lambda = chain.gibbs();
    let stationary = chain.reversible && chain.nu0.sup_distance(&lambda) <= KERNEL_TOL;
    Ok(ReferenceChain {
        grid: chain.grid,
        time: chain.time,
        potential: chain.potential.clone(),
        drift: chain.drift.clone(),
        kernels: StepKernels::PerStep(ks),
        nu0: terminal,
        reversible: stationary,
        mode: chain.mode,
        warning: chain.warning,
    })
}

/// Visits every path `x0 -> ... -> xT` with its reference weight `prod K`.
pub(crate) fn for_each_bridge_path(
    chain: &ReferenceChain,
    x0: usize,
    xt: usize,
    mut visit: impl FnMut(&[usize], f64),
) -> Result<()> {
    let n = chain.n_states();
    let steps = chain.n_steps();
    let count = (n as u128).saturating_pow((steps - 1) as u32);
    if count > MAX_PATHS {
        return Err(Error::TooLarge {
            count,
            limit: MAX_PATHS,
        });
    }
    let mut path = vec![0usize; steps + 1];
    path[0] = x0;
    path[steps] = xt;
    let interior = steps - 1;
    let mut idx = vec![0usize; interior];
    loop {
        path[1..steps].copy_from_slice(&idx);
        let mut w = 1.0;
        for t in 0..steps {
            w *= chain.kernel(t)[[path[t], path[t + 1]]];
            if w == 0.0 {
                break;
            }
        }
        if w > 0.0 {
            visit(&path, w);
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == interior {
                return Ok(());
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// `E[f(X) | X_0 = x0, X_T = xT]` by exact enumeration of interior states.
pub fn bridge_expectation(
    chain: &ReferenceChain,
    f: impl Fn(&[usize]) -> f64,
    x0: usize,
    xt: usize,
) -> Result<f64> {
    let n = chain.n_states();
    if x0 >= n || xt >= n {
        return Err(invalid("endpoint outside the grid"));
    }
    if chain.nu0[x0] <= 0.0 {
        return Err(Error::Support(format!("initial state {x0} has no reference mass")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for_each_bridge_path(chain, x0, xt, |p, w| {
        num += w * f(p);
        den += w;
    })?;
    if den <= 0.0 {
        return Err(Error::Support(format!("endpoints ({x0}, {xt}) have zero reference probability")));
    }
    Ok(num / den)
}
