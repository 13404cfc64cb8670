//! Brute-force convex optimization over explicit path measures.
//!
//! Every path of the chain is enumerated with its reference probability, and
//! the regularized transport problem is solved directly in the path
//! likelihood ratio `u = q/p` by an augmented Lagrangian on the two marginal
//! constraints. Intended for instances with at most about `10^6` paths.

use ndarray::Array2;
use serde::Serialize;

use crate::divergence::DivergenceSpec;
use crate::error::{invalid, Error, Result};
use crate::measure::DiscreteMeasure;
use crate::optim::{augmented_lagrangian, AlOptions, AlProblem};
use crate::ref_chain::{ReferenceChain, MAX_PATHS};

/// Lower clamp on `u` for divergences with a singular derivative at 0.
pub const SINGULAR_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    pub n_states: usize,
    pub n_steps: usize,
    /// Flattened paths, `n_steps + 1` states each.
    pub paths: Vec<usize>,
    pub prob: Vec<f64>,
    pub cost: Vec<f64>,
}

/// `n_states^(n_steps + 1)`, saturating.
pub fn path_count(n_states: usize, n_steps: usize) -> u128 {
    (n_states as u128).saturating_pow((n_steps + 1) as u32)
}

impl PathTable {
    /// All positive-probability paths with a general path cost.
    pub fn from_chain(chain: &ReferenceChain, cost: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let n = chain.n_states();
        let steps = chain.n_steps();
        let count = path_count(n, steps);
        if count > MAX_PATHS {
            return Err(Error::TooLarge {
                count,
                limit: MAX_PATHS,
            });
        }
        let len = steps + 1;
        let mut paths = Vec::new();
        let mut prob = Vec::new();
        let mut costs = Vec::new();
        let mut idx = vec![0usize; len];
        loop {
            let mut w = chain.nu0[idx[0]];
            for t in 0..steps {
                if w == 0.0 {
                    break;
                }
                w *= chain.kernel(t)[[idx[t], idx[t + 1]]];
            }
            if w > 0.0 {
                let c = cost(&idx);
                if !c.is_finite() {
                    return Err(invalid("path cost must be finite"));
                }
                paths.extend_from_slice(&idx);
                prob.push(w);
                costs.push(c);
            }
            let mut k = len;
            loop {
                if k == 0 {
                    return Ok(PathTable {
                        n_states: n,
                        n_steps: steps,
                        paths,
                        prob,
                        cost: costs,
                    });
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    /// Paths with an endpoint cost `C(x0, xT)`.
    pub fn from_chain_endpoint(chain: &ReferenceChain, cost: &Array2<f64>) -> Result<Self> {
        let steps = chain.n_steps();
        PathTable::from_chain(chain, |p| cost[[p[0], p[steps]]])
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn path(&self, i: usize) -> &[usize] {
        let l = self.n_steps + 1;
        &self.paths[i * l..(i + 1) * l]
    }

    pub fn start(&self, i: usize) -> usize {
        self.paths[i * (self.n_steps + 1)]
    }

    pub fn end(&self, i: usize) -> usize {
        self.paths[i * (self.n_steps + 1) + self.n_steps]
    }

    /// Joint law of `(X_0, X_T)` under path weights `w`.
    pub fn endpoint_law(&self, w: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_states, self.n_states));
        for i in 0..self.len() {
            out[[self.start(i), self.end(i)]] += w[i];
        }
        out
    }

    /// Primal objective `sum c q + sum p l(q/p)`.
    pub fn objective(&self, divergence: DivergenceSpec, q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.len() {
            acc += self.cost[i] * q[i] + self.prob[i] * divergence.ell(q[i] / self.prob[i]);
        }
        acc
    }
}

struct PathProblem<'a> {
    table: &'a PathTable,
    divergence: DivergenceSpec,
    mu0: &'a [f64],
    mu_t: &'a [f64],
    floor: f64,
}

impl AlProblem for PathProblem<'_> {
    fn dim(&self) -> usize {
        self.table.len()
    }
    fn n_constraints(&self) -> usize {
        2 * self.table.n_states
    }
    fn objective(&self, u: &[f64]) -> f64 {
        let t = self.table;
        (0..t.len())
            .map(|i| t.prob[i] * (t.cost[i] * u[i] + self.divergence.ell(u[i])))
            .sum()
    }
    fn gradient(&self, u: &[f64], g: &mut [f64]) {
        let t = self.table;
        for i in 0..t.len() {
            g[i] = t.prob[i] * (t.cost[i] + self.divergence.derivative(u[i].max(self.floor)));
        }
    }
    fn residual(&self, u: &[f64], r: &mut [f64]) {
        let t = self.table;
        let n = t.n_states;
        for x in 0..n {
            r[x] = -self.mu0[x];
            r[n + x] = -self.mu_t[x];
        }
        for i in 0..t.len() {
            let q = t.prob[i] * u[i];
            r[t.start(i)] += q;
            r[n + t.end(i)] += q;
        }
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let t = self.table;
        let n = t.n_states;
        for i in 0..t.len() {
            out[i] = t.prob[i] * (y[t.start(i)] + y[n + t.end(i)]);
        }
    }
    fn project(&self, u: &mut [f64]) {
        u.iter_mut().for_each(|v| *v = v.max(self.floor));
    }
    fn preconditioner(&self) -> Option<Vec<f64>> {
        Some(self.table.prob.iter().map(|p| 1.0 / p).collect())
    }
    fn hessian_diagonal(&self, u: &[f64], h: &mut [f64]) -> bool {
        let t = self.table;
        for i in 0..t.len() {
            h[i] = t.prob[i] * self.divergence.second_derivative(u[i].max(self.floor));
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct PathSolution {
    /// Path weights `q`, aligned with the table.
    pub q: Vec<f64>,
    pub value: f64,
    pub residual: f64,
    pub outer_iterations: usize,
}

/// Minimizes the regularized path objective under both marginal constraints.
pub fn solve_paths(
    table: &PathTable,
    divergence: DivergenceSpec,
    mu0: &DiscreteMeasure,
    mu_t: &DiscreteMeasure,
) -> Result<PathSolution> {
    solve_paths_from(table, divergence, mu0, mu_t, None)
}

/// As [`solve_paths`], started from the likelihood ratios `u0` (default all ones).
pub fn solve_paths_from(
    table: &PathTable,
    divergence: DivergenceSpec,
    mu0: &DiscreteMeasure,
    mu_t: &DiscreteMeasure,
    u0: Option<&[f64]>,
) -> Result<PathSolution> {
    divergence.validate()?;
    let n = table.n_states;
    if mu0.len() != n || mu_t.len() != n {
        return Err(invalid("marginals must live on the table's state space"));
    }
    if table.is_empty() {
        return Err(Error::Infeasible("no path has positive probability".into()));
    }
    let floor = match divergence {
        DivergenceSpec::Entropy | DivergenceSpec::Hellinger => SINGULAR_FLOOR,
        _ => 0.0,
    };
    let problem = PathProblem {
        table,
        divergence,
        mu0: mu0.weights(),
        mu_t: mu_t.weights(),
        floor,
    };
    let start = match u0 {
        Some(u) if u.len() == table.len() => u.to_vec(),
        Some(_) => return Err(invalid("initial point has the wrong length")),
        None => vec![1.0; table.len()],
    };
    let out = augmented_lagrangian(&problem, start, &AlOptions::default())?;
    let q: Vec<f64> = out.x.iter().zip(&table.prob).map(|(u, p)| u * p).collect();
    Ok(PathSolution {
        value: table.objective(divergence, &q),
        q,
        residual: out.residual,
        outer_iterations: out.outer_iterations,
    })
}

/// Largest spread of `q/p` within an endpoint class `(x0, xT)`.
pub fn endpoint_factorization_defect(table: &PathTable, q: &[f64]) -> Result<f64> {
    if q.len() != table.len() {
        return Err(invalid("path weights do not match the table"));
    }
    let n = table.n_states;
    let mut lo = vec![f64::INFINITY; n * n];
    let mut hi = vec![f64::NEG_INFINITY; n * n];
    for i in 0..table.len() {
        let k = table.start(i) * n + table.end(i);
        let r = q[i] / table.prob[i];
        lo[k] = lo[k].min(r);
        hi[k] = hi[k].max(r);
    }
    Ok(lo
        .iter()
        .zip(&hi)
        .filter(|(a, _)| a.is_finite())
        .fold(0.0, |m, (a, b)| m.max(b - a)))
}

/// Both sides of the endpoint/bridge decomposition of a path divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DataProcessing {
    /// `I(Q | P)` over paths.
    pub lhs: f64,
    /// `I(Q_0T | P_0T) + sum P_0T(x, y) I(Q_xy | P_xy)`.
    pub rhs_reference_weighted: f64,
    /// `I(Q_0T | P_0T) + sum Q_0T(x, y) I(Q_xy | P_xy)`.
    pub rhs_target_weighted: f64,
    /// Reference mass of endpoint classes left out because `Q_0T` vanishes there.
    pub skipped_reference_mass: f64,
}

pub fn data_processing_decomposition(table: &PathTable, q: &[f64], divergence: DivergenceSpec) -> Result<DataProcessing> {
    divergence.validate()?;
    if q.len() != table.len() {
        return Err(invalid("path weights do not match the table"));
    }
    if q.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(invalid("path weights must be finite and nonnegative"));
    }
    let n = table.n_states;
    let lhs: f64 = q
        .iter()
        .zip(&table.prob)
        .map(|(a, p)| p * divergence.ell(a / p))
        .sum();
    let q0t = table.endpoint_law(q);
    let p0t = table.endpoint_law(&table.prob);
    let mut base = 0.0;
    for k in 0..n * n {
        let (x, y) = (k / n, k % n);
        if p0t[[x, y]] > 0.0 {
            base += p0t[[x, y]] * divergence.ell(q0t[[x, y]] / p0t[[x, y]]);
        }
    }
    let mut bridge = vec![0.0; n * n];
    for i in 0..table.len() {
        let (x, y) = (table.start(i), table.end(i));
        let (qc, pc) = (q0t[[x, y]], p0t[[x, y]]);
        if qc > 0.0 {
            let qb = q[i] / qc;
            let pb = table.prob[i] / pc;
            bridge[x * n + y] += pb * divergence.ell(qb / pb);
        }
    }
    let (mut rp, mut rq, mut skipped) = (base, base, 0.0);
    for k in 0..n * n {
        let (x, y) = (k / n, k % n);
        if q0t[[x, y]] > 0.0 {
            rp += p0t[[x, y]] * bridge[k];
            rq += q0t[[x, y]] * bridge[k];
        } else {
            skipped += p0t[[x, y]];
        }
    }
    Ok(DataProcessing {
        lhs,
        rhs_reference_weighted: rp,
        rhs_target_weighted: rq,
        skipped_reference_mass: skipped,
    })
}
