//! Weak transport costs and their Q_c transforms.
//!
//! Evaluates each cost family between two discrete laws and applies the
//! transform to a sample potential.

use nesb::measure::DiscreteMeasure;
use nesb::weak_cost::{apply_qc, robust_certificate, weak_ot_value, wasserstein2_squared, Theta, WeakCostSpec};

fn main() -> nesb::Result<()> {
    let points: Vec<f64> = (0..9).map(|i| -1.0 + 0.25 * i as f64).collect();
    let mu = DiscreteMeasure::normalized(points.iter().map(|x| (-(x + 0.3f64).powi(2) * 4.0).exp()).collect())?;
    let nu = DiscreteMeasure::normalized(points.iter().map(|x| (-(x - 0.2f64).powi(2) * 2.0).exp()).collect())?;
    let phi: Vec<f64> = points.iter().map(|x| (3.0 * x).sin()).collect();

    let specs = [
        WeakCostSpec::TotalVariation,
        WeakCostSpec::Marton { p: 2.0 },
        WeakCostSpec::Barycentric { theta: Theta::Power { exponent: 2.0 } },
        WeakCostSpec::MoreauYosida { lambda: 4.0 },
    ];
    for spec in specs {
        let value = weak_ot_value(&spec, &points, &mu, &nu)?;
        let q = apply_qc(&spec, &points, &phi)?;
        let q: Vec<String> = q.iter().map(|v| format!("{v:+.3}")).collect();
        println!("{:<16} value {value:.6}", spec.name());
        println!("{:<16} Q_c phi [{}]", "", q.join(" "));
    }

    println!("\nW2^2 = {:.6}", wasserstein2_squared(&points, &mu, &nu));
    let cert = robust_certificate(4.0, &points, &mu, &nu)?;
    println!(
        "variance-corrected cost {:.6} + radius^2 {:.6} >= W2^2 {:.6}",
        cert.weak_value, cert.radius_squared, cert.w2_squared
    );
    Ok(())
}
