//! Entropic bridge with a barycentric (convex order) terminal constraint.
//!
//! With `theta(z) = z^2` the terminal law only has to be dominated by the
//! target in convex order: the bridge may end less spread out than the target
//! as long as the means agree. Here the target is wider than the reference's
//! own terminal law, so the relaxed problem pays only for the initial law,
//! while the hard constraint must spread the paths.

use nesb::bridge_solver::{solve_dual_ascent, solve_sinkhorn, terminal_marginal, ProblemSpec, SolveOptions};
use nesb::divergence::DivergenceSpec;
use nesb::measure::DiscreteMeasure;
use nesb::ref_chain::{build_chain, gibbs_measure, ChainMode, GridSpec, TimeGridSpec};
use nesb::weak_cost::{weak_ot_value, Theta, WeakCostSpec};

fn main() -> nesb::Result<()> {
    let grid = GridSpec::new(-2.0, 2.0, 15)?;
    let time = TimeGridSpec::new(1.0, 6)?;
    let xs = grid.points();
    let u: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
    let lambda = gibbs_measure(&u)?;
    let chain = build_chain(grid, time, u, lambda, ChainMode::Metropolized)?;
    let mu0 = DiscreteMeasure::normalized(xs.iter().map(|x| (-x * x * 4.0).exp()).collect())?;
    let mu_t = DiscreteMeasure::normalized(xs.iter().map(|x| (-x * x * 0.6).exp()).collect())?;

    let hard = ProblemSpec::new(chain.clone(), DivergenceSpec::Entropy, WeakCostSpec::TotalVariation, mu0.clone(), mu_t.clone(), None)?;
    let hard_sol = solve_sinkhorn(&hard, &SolveOptions::default())?;
    println!("hard constraint:  value {:.6}", hard_sol.report.primal_value);

    let weak = WeakCostSpec::Barycentric { theta: Theta::Power { exponent: 2.0 } };
    let problem = ProblemSpec::new(chain, DivergenceSpec::Entropy, weak, mu0, mu_t.clone(), None)?;
    let sol = solve_dual_ascent(&problem, &SolveOptions { tol: 1e-8, ..SolveOptions::default() }, None)?;
    let reached = DiscreteMeasure::new(terminal_marginal(&problem, &sol.density))?;
    println!(
        "barycentric:      value {:.6} gap {:.1e} iterations {}",
        sol.report.primal_value, sol.report.gap, sol.report.iterations
    );
    println!(
        "weak cost of the reached law against the target: {:.2e}",
        weak_ot_value(&weak, &xs, &reached, &mu_t)?
    );
    Ok(())
}
