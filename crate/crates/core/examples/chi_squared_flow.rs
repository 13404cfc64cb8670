//! Monte Carlo check of the chi-squared marginal flow.
//!
//! Simulates the controlled forward and backward processes and reports the
//! weak-form residual of the marginal identity for a few KDE bandwidths.

use nesb::bridge_solver::ProblemSpec;
use nesb::divergence::DivergenceSpec;
use nesb::marginal_flow::{chisquared_flow_residual, FlowCheckOptions};
use nesb::measure::DiscreteMeasure;
use nesb::ref_chain::{build_chain, gibbs_measure, ChainMode, GridSpec, TimeGridSpec};
use nesb::weak_cost::WeakCostSpec;

fn main() -> nesb::Result<()> {
    let grid = GridSpec::new(-4.0, 4.0, 31)?;
    let time = TimeGridSpec::new(1.0, 16)?;
    let xs = grid.points();
    let u: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
    let lambda = gibbs_measure(&u)?;
    let chain = build_chain(grid, time, u, lambda.clone(), ChainMode::Metropolized)?;
    let mu_t = DiscreteMeasure::normalized(
        xs.iter().zip(lambda.weights()).map(|(x, l)| l * (1.0 + 0.4 * x.tanh())).collect(),
    )?;
    let problem = ProblemSpec::new(chain, DivergenceSpec::ChiSquared, WeakCostSpec::TotalVariation, lambda, mu_t, None)?;

    let base = FlowCheckOptions {
        mc_paths: 50_000,
        seed: 1,
        ..FlowCheckOptions::default()
    };
    let auto = chisquared_flow_residual(&problem, &base)?;
    println!(
        "default bandwidth {:.3}: residual {:.4} (min ESS {:.0}, floored {:.1e})",
        auto.bandwidth, auto.residual, auto.min_ess, auto.floored_fraction
    );
    for factor in [0.5, 2.0, 4.0] {
        let opts = FlowCheckOptions {
            bandwidth: Some(factor * auto.bandwidth),
            ..base
        };
        let check = chisquared_flow_residual(&problem, &opts)?;
        println!("bandwidth {:.3}: residual {:.4}", factor * auto.bandwidth, check.residual);
    }
    for (t, r) in &auto.per_time {
        println!("  t = {t:.3}  residual {r:.4}");
    }
    Ok(())
}
