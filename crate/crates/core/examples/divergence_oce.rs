//! Optimized certainty equivalents for the four supported divergences.
//!
//! For a payoff `xi` on six atoms, prints the OCE value, the optimal shift `r`,
//! and the tilted measure that attains it.

use nesb::divergence::{divergence_value, oce_optimizer, oce_value, DivergenceSpec};
use nesb::measure::DiscreteMeasure;

fn main() -> nesb::Result<()> {
    let p = DiscreteMeasure::uniform(6)?;
    let xi = [-1.0, -0.4, 0.0, 0.3, 0.8, 1.5];
    let mean: f64 = xi.iter().sum::<f64>() / 6.0;
    println!("E_p[xi] = {mean:.6}");

    for spec in [
        DivergenceSpec::Entropy,
        DivergenceSpec::ChiSquared,
        DivergenceSpec::tsallis(2.0)?,
        DivergenceSpec::Hellinger,
    ] {
        let (value, r) = oce_value(spec, &xi, &p)?;
        let q = oce_optimizer(spec, &xi, &p)?;
        let eq: f64 = q.weights().iter().zip(&xi).map(|(w, x)| w * x).sum();
        let penalty = divergence_value(spec, &q, &p)?;
        println!("\n{}: OCE {value:.6}  r* {r:.6}", spec.name());
        println!("  E_q[xi] - I(q|p) = {:.6}", eq - penalty);
        let w: Vec<String> = q.weights().iter().map(|w| format!("{w:.4}")).collect();
        println!("  q* = [{}]", w.join(", "));
    }
    Ok(())
}
