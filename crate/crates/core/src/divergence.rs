//! Divergence families, their conjugates, and the optimized certainty equivalent.
//!
//! | family      | `l(x)`                     | `l*(y)`                                   | `dl*(y)`                    |
//! |-------------|----------------------------|-------------------------------------------|-----------------------------|
//! | Entropy     | `x ln x - x + 1`           | `e^y - 1`                                 | `e^y`                       |
//! | ChiSquared  | `(x - 1)^2 / 2`            | `y + y^2/2` (y >= -1), `-1/2` else        | `(1 + y)^+`                 |
//! | Tsallis(q)  | `(x^q - 1) / (q - 1)`      | `1/(q-1) + ((q-1) y / q)^(q/(q-1))`, y>=0 | `((q-1) y / q)^(1/(q-1))`   |
//! | Hellinger   | `(1 - sqrt x)^2`           | `y / (1 - y)` (y < 1), `+inf` else        | `1 / (1 - y)^2`             |
//!
//! All families live on `x >= 0` and are `+inf` elsewhere.
//!
//! The Tsallis family is used in its unshifted form. It differs from the
//! normalized `(x^q - 1 - q(x - 1)) / (q - 1)` by an affine term, which changes
//! neither divergences between probability measures nor OCE values, but it
//! moves the OCE root: for constant `xi = c` the root is `c - q/(q-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::DiscreteMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DivergenceSpec {
    Entropy,
    ChiSquared,
    Tsallis { q: f64 },
    Hellinger,
}

impl DivergenceSpec {
    pub fn tsallis(q: f64) -> Result<Self> {
        let s = DivergenceSpec::Tsallis { q };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DivergenceSpec::Tsallis { q } if !(q > 1.0 && q.is_finite()) => {
                Err(invalid(format!("Tsallis exponent must be > 1, got {q}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DivergenceSpec::Entropy => "entropy",
            DivergenceSpec::ChiSquared => "chi_squared",
            DivergenceSpec::Tsallis { .. } => "tsallis",
            DivergenceSpec::Hellinger => "hellinger",
        }
    }

    /// `l(x)`, `+inf` for `x < 0`. NaN propagates.
    pub fn ell(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x < 0.0 {
            return f64::INFINITY;
        }
        match *self {
            DivergenceSpec::Entropy => {
                if x == 0.0 {
                    1.0
                } else {
                    x * x.ln() - x + 1.0
                }
            }
            DivergenceSpec::ChiSquared => 0.5 * (x - 1.0) * (x - 1.0),
            DivergenceSpec::Tsallis { q } => (x.powf(q) - 1.0) / (q - 1.0),
            DivergenceSpec::Hellinger => {
                let s = 1.0 - x.sqrt();
                s * s
            }
        }
    }

    /// `l*(y) = sup_x (x y - l(x))`.
    pub fn conjugate(&self, y: f64) -> f64 {
        if y.is_nan() {
            return f64::NAN;
        }
        match *self {
            DivergenceSpec::Entropy => y.exp_m1(),
            DivergenceSpec::ChiSquared => {
                if y >= -1.0 {
                    y + 0.5 * y * y
                } else {
                    -0.5
                }
            }
            DivergenceSpec::Tsallis { q } => {
                let base = 1.0 / (q - 1.0);
                if y > 0.0 {
                    base + ((q - 1.0) * y / q).powf(q / (q - 1.0))
                } else {
                    base
                }
            }
            DivergenceSpec::Hellinger => {
                if y == f64::NEG_INFINITY {
                    -1.0
                } else if y < 1.0 {
                    y / (1.0 - y)
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `dl*(y)`, with `+inf` where `l*` is infinite (Hellinger, `y >= 1`).
    pub fn conjugate_derivative(&self, y: f64) -> f64 {
        if y.is_nan() {
            return f64::NAN;
        }
        match *self {
            DivergenceSpec::Entropy => y.exp(),
            DivergenceSpec::ChiSquared => (1.0 + y).max(0.0),
            DivergenceSpec::Tsallis { q } => {
                if y > 0.0 {
                    ((q - 1.0) * y / q).powf(1.0 / (q - 1.0))
                } else {
                    0.0
                }
            }
            DivergenceSpec::Hellinger => {
                if y < 1.0 {
                    let d = 1.0 - y;
                    1.0 / (d * d)
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `l''(x)` on `x > 0` (on `x >= 0` for ChiSquared).
    pub fn second_derivative(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x < 0.0 {
            return f64::INFINITY;
        }
        match *self {
            DivergenceSpec::Entropy => 1.0 / x,
            DivergenceSpec::ChiSquared => 1.0,
            DivergenceSpec::Tsallis { q } => q * x.powf(q - 2.0),
            DivergenceSpec::Hellinger => 0.5 * x.powf(-1.5),
        }
    }

    /// `l'(x)` on `x > 0`, the inverse of `dl*` on its range.
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            DivergenceSpec::Entropy => x.ln(),
            DivergenceSpec::ChiSquared => x - 1.0,
            DivergenceSpec::Tsallis { q } => q * x.powf(q - 1.0) / (q - 1.0),
            DivergenceSpec::Hellinger => 1.0 - 1.0 / x.sqrt(),
        }
    }
}

fn check_nan(what: &str, v: f64) -> Result<()> {
    if v.is_nan() {
        Err(invalid(format!("{what} is NaN")))
    } else {
        Ok(())
    }
}

pub fn eval_ell(spec: DivergenceSpec, x: f64) -> Result<f64> {
    spec.validate()?;
    check_nan("argument", x)?;
    Ok(spec.ell(x))
}

pub fn eval_conjugate(spec: DivergenceSpec, y: f64) -> Result<f64> {
    spec.validate()?;
    check_nan("argument", y)?;
    Ok(spec.conjugate(y))
}

pub fn eval_conjugate_derivative(spec: DivergenceSpec, y: f64) -> Result<f64> {
    spec.validate()?;
    check_nan("argument", y)?;
    if matches!(spec, DivergenceSpec::Hellinger) && y >= 1.0 {
        return Err(Error::Domain(format!(
            "Hellinger conjugate derivative needs y < 1, got {y}"
        )));
    }
    Ok(spec.conjugate_derivative(y))
}

pub fn eval_second_derivative(spec: DivergenceSpec, x: f64) -> Result<f64> {
    spec.validate()?;
    check_nan("argument", x)?;
    Ok(spec.second_derivative(x))
}

/// `sum_i p_i l(q_i / p_i)` over raw weight slices, `0 l(0/0) = 0`.
pub fn divergence_weights(spec: DivergenceSpec, q: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if pi > 0.0 {
            acc += pi * spec.ell(qi / pi);
        } else if qi > 0.0 {
            return f64::INFINITY;
        }
    }
    acc
}

pub fn divergence_value(spec: DivergenceSpec, q: &DiscreteMeasure, p: &DiscreteMeasure) -> Result<f64> {
    spec.validate()?;
    if q.len() != p.len() {
        return Err(invalid(format!(
            "divergence between measures on {} and {} atoms",
            q.len(),
            p.len()
        )));
    }
    Ok(divergence_weights(spec, q.weights(), p.weights()))
}

const BRACKET_PAD: f64 = 10.0;
const MAX_EXPANSIONS: usize = 64;
const MAX_BISECTIONS: usize = 200;
const ROOT_TOL: f64 = 1e-12;

/// Smallest `r` with `sum_i w_i dl*(xi_i - r) = target`.
///
/// Entries with `xi_i = -inf` or `w_i = 0` contribute nothing. The map is
/// nonincreasing in `r`, so bisection on a geometrically expanded bracket
/// always works once the bracket is found.
pub fn conjugate_root(spec: DivergenceSpec, xi: &[f64], w: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(invalid(format!("root target must be positive, got {target}")));
    }
    if xi.len() != w.len() {
        return Err(invalid("potential and weight lengths differ"));
    }
    let mut lo_x = f64::INFINITY;
    let mut hi_x = f64::NEG_INFINITY;
    for (&x, &wi) in xi.iter().zip(w) {
        if x.is_nan() {
            return Err(invalid("NaN in OCE argument"));
        }
        if wi > 0.0 {
            if x == f64::INFINITY {
                return Err(Error::Infeasible("OCE argument is +inf on the support".into()));
            }
            if x > f64::NEG_INFINITY {
                lo_x = lo_x.min(x);
                hi_x = hi_x.max(x);
            }
        }
    }
    if !lo_x.is_finite() {
        return Err(Error::Infeasible(
            "no finite argument carries mass, root not bracketable".into(),
        ));
    }

    if let DivergenceSpec::Entropy = spec {
        // r = log(sum w e^xi / target), evaluated stably.
        let mut s = 0.0;
        for (&x, &wi) in xi.iter().zip(w) {
            if wi > 0.0 && x > f64::NEG_INFINITY {
                s += wi * (x - hi_x).exp();
            }
        }
        return Ok(hi_x + s.ln() - target.ln());
    }

    let g = |r: f64| -> f64 {
        let mut acc = 0.0;
        for (&x, &wi) in xi.iter().zip(w) {
            if wi > 0.0 && x > f64::NEG_INFINITY {
                acc += wi * spec.conjugate_derivative(x - r);
            }
        }
        acc - target
    };
    bisect_decreasing(g, lo_x - BRACKET_PAD, hi_x + BRACKET_PAD)
}

/// Infimum of the zero set of a nonincreasing `g`.
pub(crate) fn bisect_decreasing(g: impl Fn(f64) -> f64, lo0: f64, hi0: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo0, hi0);
    let mut width = (hi - lo).max(1.0);
    let mut g_hi = g(hi);
    let mut k = 0;
    while g_hi > 0.0 {
        k += 1;
        if k > MAX_EXPANSIONS || !hi.is_finite() {
            return Err(Error::Infeasible(format!(
                "could not bracket root from above (g = {g_hi:.3e} at {hi:.3e})"
            )));
        }
        lo = hi;
        hi += width;
        width *= 2.0;
        g_hi = g(hi);
    }
    let mut g_lo = g(lo);
    width = (hi - lo).max(1.0);
    k = 0;
    while g_lo <= 0.0 {
        if g_lo == 0.0 && g(lo - ROOT_TOL) > 0.0 {
            return Ok(lo);
        }
        k += 1;
        if k > MAX_EXPANSIONS || !lo.is_finite() {
            return Err(Error::Infeasible(format!(
                "could not bracket root from below (g = {g_lo:.3e} at {lo:.3e})"
            )));
        }
        hi = lo;
        g_hi = g_lo;
        lo -= width;
        width *= 2.0;
        g_lo = g(lo);
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid);
        if gm > 0.0 {
            lo = mid;
            g_lo = gm;
        } else {
            hi = mid;
            g_hi = gm;
        }
    }
    let r = if g_lo.abs() < g_hi.abs() { lo } else { hi };
    let res = g_lo.abs().min(g_hi.abs());
    let scale = 1.0 + (g_lo - g_hi).abs();
    if !(res <= ROOT_TOL * scale.max(1.0) || hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0)) {
        return Err(Error::NumericalFailure {
            context: "root bisection".into(),
            residual: res,
        });
    }
    Ok(r)
}

fn check_oce_args(xi: &[f64], p: &DiscreteMeasure) -> Result<()> {
    if xi.len() != p.len() {
        return Err(invalid(format!(
            "OCE argument has {} entries, measure has {}",
            xi.len(),
            p.len()
        )));
    }
    if (p.total() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("OCE measure has mass {}", p.total())));
    }
    Ok(())
}

/// `Phi_p(xi) = inf_r E_p[l*(xi - r)] + r` and its minimizer `r*`.
pub fn oce_value(spec: DivergenceSpec, xi: &[f64], p: &DiscreteMeasure) -> Result<(f64, f64)> {
    spec.validate()?;
    check_oce_args(xi, p)?;
    let r = conjugate_root(spec, xi, p.weights(), 1.0)?;
    Ok((oce_objective(spec, xi, p.weights(), r), r))
}

/// `E_p[l*(xi - r)] + r`.
pub fn oce_objective(spec: DivergenceSpec, xi: &[f64], p: &[f64], r: f64) -> f64 {
    let mut acc = 0.0;
    for (&x, &w) in xi.iter().zip(p) {
        if w > 0.0 {
            acc += w * spec.conjugate(x - r);
        }
    }
    acc + r
}

/// The maximizing measure `q_i = p_i dl*(xi_i - r*)`.
pub fn oce_optimizer(spec: DivergenceSpec, xi: &[f64], p: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    let (_, r) = oce_value(spec, xi, p)?;
    let q = xi
        .iter()
        .zip(p.weights())
        .map(|(&x, &w)| {
            if w > 0.0 {
                w * spec.conjugate_derivative(x - r)
            } else {
                0.0
            }
        })
        .collect();
    DiscreteMeasure::new(q)
}
