//! Weak transport costs, their `Q_c` transforms, and weak OT values.
//!
//! `Q_c phi(x) = inf_rho c(x, rho) + <phi, rho>` with every infimum restricted
//! to measures on the state grid.
//!
//! * `TotalVariation`: `c(x, rho) = 1 - rho({x})`. The transform is taken to be
//!   the identity, which is exact for potentials with oscillation at most 1
//!   (the general transform is `min(phi(x), 1 + min phi)`).
//! * `Marton { p }`: `c(x, rho) = int |x - y|^p rho(dy)`, a classical c-transform.
//! * `Barycentric { theta }`: `c(x, rho) = theta(x - mean(rho))`. The transform is
//!   `Q_theta` applied to the lower convex envelope of `phi` on the grid, so it
//!   depends on the grid near the boundary when `phi` is not convex there.
//! * `MoreauYosida { lambda }`: the transform is `min_y phi(y) + lambda/2 |x - y|^2`.
//!   `weak_ot_value` evaluates the variance-corrected cost
//!   `c(x, rho) = int |x - y|^2 rho(dy) - Var(rho) / lambda`, which can be
//!   negative when `lambda < 1`. The Moreau-Yosida transform is not the exact
//!   transform of that cost; it is exact for the linear cost `lambda/2 |x - y|^2`.
//!   Use [`robust_certificate`] for the Wasserstein-ball guarantee.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::DiscreteMeasure;
use crate::optim::{augmented_lagrangian, project_simplex, AlOptions, AlProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Theta {
    /// `theta(z) = |z|^exponent`, `exponent >= 1`.
    Power { exponent: f64 },
}

impl Theta {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Theta::Power { exponent } => z.abs().powf(exponent),
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Theta::Power { exponent } => {
                if z == 0.0 {
                    0.0
                } else {
                    exponent * z.abs().powf(exponent - 1.0) * z.signum()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum WeakCostSpec {
    TotalVariation,
    Marton { p: f64 },
    Barycentric { theta: Theta },
    MoreauYosida { lambda: f64 },
}

impl WeakCostSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeakCostSpec::Marton { p } if !(p >= 1.0 && p.is_finite()) => {
                Err(invalid(format!("Marton exponent must be >= 1, got {p}")))
            }
            WeakCostSpec::Barycentric {
                theta: Theta::Power { exponent },
            } if !(exponent >= 1.0 && exponent.is_finite()) => {
                Err(invalid(format!("barycentric exponent must be >= 1, got {exponent}")))
            }
            WeakCostSpec::MoreauYosida { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(invalid(format!("Moreau-Yosida lambda must be > 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_total_variation(&self) -> bool {
        matches!(self, WeakCostSpec::TotalVariation)
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeakCostSpec::TotalVariation => "total_variation",
            WeakCostSpec::Marton { .. } => "marton",
            WeakCostSpec::Barycentric { .. } => "barycentric",
            WeakCostSpec::MoreauYosida { .. } => "moreau_yosida",
        }
    }
}

/// Transform values together with the minimizing measures `rho_x`.
///
/// `plan[x]` lists `(y, weight)`; it is a supergradient of `phi -> Q_c phi(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QcTransform {
    pub values: Vec<f64>,
    pub plan: Vec<Vec<(usize, f64)>>,
}

fn check_args(points: &[f64], phi: &[f64]) -> Result<()> {
    if points.is_empty() {
        return Err(invalid("empty grid"));
    }
    if points.len() != phi.len() {
        return Err(invalid(format!(
            "potential has {} values on a grid of {}",
            phi.len(),
            points.len()
        )));
    }
    if phi.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(invalid("potential must be bounded below and not NaN"));
    }
    Ok(())
}

/// Hull vertices `(left, right, weight on left)` bracketing a grid point.
pub type Bracket = (usize, usize, f64);

/// Greatest convex minorant of the finite points `(x_i, phi_i)`, evaluated on
/// the grid, with the two hull vertices bracketing each grid point.
pub fn convex_envelope(points: &[f64], phi: &[f64]) -> Result<(Vec<f64>, Vec<Bracket>)> {
    check_args(points, phi)?;
    // Andrew's monotone chain, lower half; points are sorted by x.
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..points.len() {
        if !phi[i].is_finite() {
            continue;
        }
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (points[b] - points[a]) * (phi[i] - phi[a]) - (phi[b] - phi[a]) * (points[i] - points[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    if hull.is_empty() {
        return Err(invalid("potential is +inf everywhere"));
    }
    let mut env = vec![f64::INFINITY; points.len()];
    let mut brackets = vec![(0, 0, 1.0); points.len()];
    let mut seg = 0;
    for i in 0..points.len() {
        if i < hull[0] || i > hull[hull.len() - 1] {
            continue;
        }
        while seg + 1 < hull.len() && hull[seg + 1] < i {
            seg += 1;
        }
        if hull.contains(&i) {
            env[i] = phi[i];
            brackets[i] = (i, i, 1.0);
            continue;
        }
        let (a, b) = (hull[seg], hull[seg + 1]);
        let w = (points[b] - points[i]) / (points[b] - points[a]);
        env[i] = w * phi[a] + (1.0 - w) * phi[b];
        brackets[i] = (a, b, w);
    }
    Ok((env, brackets))
}

fn infimal_convolution(points: &[f64], psi: &[f64], kernel: impl Fn(f64) -> f64) -> Vec<(f64, usize)> {
    points
        .iter()
        .map(|&x| {
            let mut best = (f64::INFINITY, 0);
            for (j, (&y, &v)) in points.iter().zip(psi).enumerate() {
                if v.is_finite() {
                    let c = v + kernel(x - y);
                    if c < best.0 {
                        best = (c, j);
                    }
                }
            }
            best
        })
        .collect()
}

pub fn apply_qc_with_plan(spec: &WeakCostSpec, points: &[f64], phi: &[f64]) -> Result<QcTransform> {
    spec.validate()?;
    check_args(points, phi)?;
    let n = points.len();
    match *spec {
        WeakCostSpec::TotalVariation => Ok(QcTransform {
            values: phi.to_vec(),
            plan: (0..n).map(|x| vec![(x, 1.0)]).collect(),
        }),
        WeakCostSpec::Marton { p } => {
            let best = infimal_convolution(points, phi, |d| d.abs().powf(p));
            Ok(QcTransform {
                values: best.iter().map(|b| b.0).collect(),
                plan: best.iter().map(|b| vec![(b.1, 1.0)]).collect(),
            })
        }
        WeakCostSpec::MoreauYosida { lambda } => {
            let best = infimal_convolution(points, phi, |d| 0.5 * lambda * d * d);
            Ok(QcTransform {
                values: best.iter().map(|b| b.0).collect(),
                plan: best.iter().map(|b| vec![(b.1, 1.0)]).collect(),
            })
        }
        WeakCostSpec::Barycentric { theta } => {
            let (env, brackets) = convex_envelope(points, phi)?;
            let best = infimal_convolution(points, &env, |d| theta.eval(d));
            let plan = best
                .iter()
                .map(|&(_, z)| {
                    let (a, b, w) = brackets[z];
                    if a == b {
                        vec![(a, 1.0)]
                    } else {
                        vec![(a, w), (b, 1.0 - w)]
                    }
                })
                .collect();
            Ok(QcTransform {
                values: best.iter().map(|b| b.0).collect(),
                plan,
            })
        }
    }
}

pub fn apply_qc(spec: &WeakCostSpec, points: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
    Ok(apply_qc_with_plan(spec, points, phi)?.values)
}

/// `sum_x mu(x) c(x, pi_x)` for a joint coupling `pi` (row-major, rows sum to `mu`).
pub fn coupling_cost(spec: &WeakCostSpec, points: &[f64], mu: &[f64], pi: &[f64]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for x in 0..n {
        let row = &pi[x * n..(x + 1) * n];
        let mx = mu[x];
        match *spec {
            WeakCostSpec::TotalVariation => acc += mx - row[x],
            WeakCostSpec::Marton { p } => {
                for y in 0..n {
                    acc += row[y] * (points[x] - points[y]).abs().powf(p);
                }
            }
            WeakCostSpec::Barycentric { theta } => {
                if mx > 0.0 {
                    let m: f64 = (0..n).map(|y| row[y] * points[y]).sum();
                    acc += mx * theta.eval(points[x] - m / mx);
                }
            }
            WeakCostSpec::MoreauYosida { lambda } => {
                let mut m = 0.0;
                for y in 0..n {
                    let d = points[x] - points[y];
                    acc += row[y] * (d * d - points[y] * points[y] / lambda);
                    m += row[y] * points[y];
                }
                if mx > 0.0 {
                    acc += m * m / (lambda * mx);
                }
            }
        }
    }
    acc
}

struct WeakOtProblem<'a> {
    spec: WeakCostSpec,
    points: &'a [f64],
    mu: &'a [f64],
    nu: &'a [f64],
}

impl AlProblem for WeakOtProblem<'_> {
    fn dim(&self) -> usize {
        self.points.len() * self.points.len()
    }
    fn n_constraints(&self) -> usize {
        self.points.len()
    }
    fn objective(&self, x: &[f64]) -> f64 {
        coupling_cost(&self.spec, self.points, self.mu, x)
    }
    fn gradient(&self, pi: &[f64], g: &mut [f64]) {
        let n = self.points.len();
        let pts = self.points;
        for x in 0..n {
            let row = &pi[x * n..(x + 1) * n];
            let mx = self.mu[x];
            let gr = &mut g[x * n..(x + 1) * n];
            match self.spec {
                WeakCostSpec::TotalVariation => {
                    gr.iter_mut().for_each(|v| *v = 0.0);
                    gr[x] = -1.0;
                }
                WeakCostSpec::Marton { p } => {
                    for y in 0..n {
                        gr[y] = (pts[x] - pts[y]).abs().powf(p);
                    }
                }
                WeakCostSpec::Barycentric { theta } => {
                    let m: f64 = (0..n).map(|y| row[y] * pts[y]).sum();
                    let d = if mx > 0.0 { theta.derivative(pts[x] - m / mx) } else { 0.0 };
                    for y in 0..n {
                        gr[y] = -d * pts[y];
                    }
                }
                WeakCostSpec::MoreauYosida { lambda } => {
                    let m: f64 = (0..n).map(|y| row[y] * pts[y]).sum();
                    let s = if mx > 0.0 { 2.0 * m / (lambda * mx) } else { 0.0 };
                    for y in 0..n {
                        let d = pts[x] - pts[y];
                        gr[y] = d * d - pts[y] * pts[y] / lambda + s * pts[y];
                    }
                }
            }
        }
    }
    fn residual(&self, pi: &[f64], r: &mut [f64]) {
        let n = self.points.len();
        r.copy_from_slice(self.nu);
        r.iter_mut().for_each(|v| *v = -*v);
        for x in 0..n {
            for y in 0..n {
                r[y] += pi[x * n + y];
            }
        }
    }
    fn adjoint(&self, lam: &[f64], out: &mut [f64]) {
        let n = self.points.len();
        for x in 0..n {
            out[x * n..(x + 1) * n].copy_from_slice(lam);
        }
    }
    fn project(&self, pi: &mut [f64]) {
        let n = self.points.len();
        for x in 0..n {
            project_simplex(&mut pi[x * n..(x + 1) * n], self.mu[x]);
        }
    }
}

/// Optimal coupling and value of `inf_pi sum_x mu(x) c(x, pi_x)`.
pub fn weak_ot_coupling(
    spec: &WeakCostSpec,
    points: &[f64],
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    let n = points.len();
    if n == 0 {
        return Err(invalid("empty grid"));
    }
    if mu.len() != n || nu.len() != n {
        return Err(invalid("measures must live on the grid"));
    }
    if !mu.is_probability() || !nu.is_probability() {
        return Err(invalid("weak OT needs probability measures"));
    }
    let problem = WeakOtProblem {
        spec: *spec,
        points,
        mu: mu.weights(),
        nu: nu.weights(),
    };
    let mut x0 = vec![0.0; n * n];
    for x in 0..n {
        for y in 0..n {
            x0[x * n + y] = mu[x] * nu[y];
        }
    }
    let opts = AlOptions {
        objective_rtol: 1e-12,
        ..AlOptions::default()
    };
    match augmented_lagrangian(&problem, x0, &opts) {
        Ok(out) => Ok((out.objective, out.x)),
        Err(Error::Unconverged { residual_terminal, .. }) => Err(Error::NumericalFailure {
            context: "weak OT feasibility".into(),
            residual: residual_terminal,
        }),
        Err(Error::Infeasible(msg)) => Err(Error::NumericalFailure {
            context: format!("weak OT feasibility ({msg})"),
            residual: f64::NAN,
        }),
        Err(e) => Err(e),
    }
}

pub fn weak_ot_value(spec: &WeakCostSpec, points: &[f64], mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    Ok(weak_ot_coupling(spec, points, mu, nu)?.0)
}

/// `mu =_c nu` up to `tol`.
pub fn check_weak_target(
    spec: &WeakCostSpec,
    points: &[f64],
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    tol: f64,
) -> Result<bool> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    Ok(weak_ot_value(spec, points, mu, nu)? <= tol)
}

/// Squared quadratic Wasserstein distance between measures on a sorted 1-D grid.
pub fn wasserstein2_squared(points: &[f64], mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    // north-west corner rule on the sorted grid is the monotone coupling
    let (mut i, mut j) = (0, 0);
    let (mut a, mut b) = (mu[0], nu[0]);
    let mut acc = 0.0;
    let n = points.len();
    loop {
        let m = a.min(b);
        let d = points[i] - points[j];
        acc += m * d * d;
        a -= m;
        b -= m;
        if a <= 1e-15 {
            i += 1;
            if i == n {
                break;
            }
            a = mu[i];
        }
        if b <= 1e-15 {
            j += 1;
            if j == n {
                break;
            }
            b = nu[j];
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustCertificate {
    pub weak_value: f64,
    pub w2_squared: f64,
    /// `Var(nu) / lambda`; `weak_value + radius_squared >= w2_squared` always holds.
    pub radius_squared: f64,
}

/// Variance-corrected cost with its Wasserstein-2 ball certificate.
pub fn robust_certificate(
    lambda: f64,
    points: &[f64],
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<RobustCertificate> {
    let spec = WeakCostSpec::MoreauYosida { lambda };
    let weak_value = weak_ot_value(&spec, points, mu, nu)?;
    let mean: f64 = points.iter().zip(nu.weights()).map(|(x, w)| x * w).sum();
    let var: f64 = points.iter().zip(nu.weights()).map(|(x, w)| w * (x - mean) * (x - mean)).sum();
    Ok(RobustCertificate {
        weak_value,
        w2_squared: wasserstein2_squared(points, mu, nu),
        radius_squared: var / lambda,
    })
}
