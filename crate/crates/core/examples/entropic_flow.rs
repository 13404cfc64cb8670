//! Marginal flow of an entropic bridge from the Cole-Hopf HJB solve.
//!
//! Compares the PDE flow with exact chain marginals on two resolutions.

use nesb::bridge_solver::{solve_sinkhorn, ProblemSpec, SolveOptions};
use nesb::divergence::DivergenceSpec;
use nesb::marginal_flow::{chain_marginals, entropic_flow};
use nesb::measure::DiscreteMeasure;
use nesb::ref_chain::{build_chain, gibbs_measure, ChainMode, GridSpec, TimeGridSpec};
use nesb::weak_cost::WeakCostSpec;

fn gaussian(xs: &[f64], m: f64, s: f64) -> nesb::Result<DiscreteMeasure> {
    DiscreteMeasure::normalized(xs.iter().map(|x| (-(x - m).powi(2) / (2.0 * s * s)).exp()).collect())
}

fn main() -> nesb::Result<()> {
    for (n, steps) in [(31, 16), (61, 32), (121, 64)] {
        let grid = GridSpec::new(-4.0, 4.0, n)?;
        let time = TimeGridSpec::new(1.0, steps)?;
        let xs = grid.points();
        let u: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        let chain = build_chain(grid, time, u.clone(), gibbs_measure(&u)?, ChainMode::Metropolized)?;
        let problem = ProblemSpec::new(
            chain,
            DivergenceSpec::Entropy,
            WeakCostSpec::TotalVariation,
            gaussian(&xs, -0.8, 0.8)?,
            gaussian(&xs, 0.8, 0.8)?,
            None,
        )?;
        let opts = SolveOptions::default();
        let sol = solve_sinkhorn(&problem, &opts)?;
        let exact = chain_marginals(&problem, &sol.density)?;
        let flow = entropic_flow(&problem, &opts)?;
        let mid = flow.row(steps / 2);
        let mean: f64 = mid.iter().zip(&xs).map(|(q, x)| q * x).sum();
        println!(
            "{n:>3} states {steps:>2} steps: max TV to chain marginals {:.4}, mean at T/2 {mean:+.4}",
            flow.max_tv_distance(&exact)?
        );
    }
    Ok(())
}
