//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Expected values come from code written here, independently of the
//! library: a classical IPF, closed-form divergence functions, and exact
//! chain-rule identities.

#![allow(clippy::needless_range_loop)]

use std::panic;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use nesb::bridge_solver::{
    dual_value, primal_value, solve_sinkhorn, tensorization_check, verify_schrodinger_system, EndpointDensity,
    ProblemSpec, SolveOptions,
};
use nesb::divergence::{oce_value, DivergenceSpec};
use nesb::marginal_flow::{chain_marginals, chisquared_flow_residual, entropic_flow, FlowCheckOptions};
use nesb::measure::DiscreteMeasure;
use nesb::oracle::{data_processing_decomposition, endpoint_factorization_defect, solve_paths, PathTable};
use nesb::ref_chain::{build_chain, gibbs_measure, ChainMode, GridSpec, ReferenceChain, TimeGridSpec};
use nesb::weak_cost::WeakCostSpec;

const TV: WeakCostSpec = WeakCostSpec::TotalVariation;
const FOUR: [DivergenceSpec; 4] = [
    DivergenceSpec::Entropy,
    DivergenceSpec::ChiSquared,
    DivergenceSpec::Tsallis { q: 2.0 },
    DivergenceSpec::Hellinger,
];

// ---------- independent closed forms ----------

fn ell(d: DivergenceSpec, x: f64) -> f64 {
    assert!(x >= 0.0);
    match d {
        DivergenceSpec::Entropy => {
            if x == 0.0 {
                1.0
            } else {
                x * x.ln() - x + 1.0
            }
        }
        DivergenceSpec::ChiSquared => 0.5 * (x - 1.0).powi(2),
        DivergenceSpec::Tsallis { q } => (x.powf(q) - 1.0) / (q - 1.0),
        DivergenceSpec::Hellinger => (1.0 - x.sqrt()).powi(2),
    }
}

fn dconj(d: DivergenceSpec, y: f64) -> f64 {
    match d {
        DivergenceSpec::Entropy => y.exp(),
        DivergenceSpec::ChiSquared => (1.0 + y).max(0.0),
        DivergenceSpec::Tsallis { q } => {
            if y <= 0.0 {
                0.0
            } else {
                ((q - 1.0) * y / q).powf(1.0 / (q - 1.0))
            }
        }
        DivergenceSpec::Hellinger => {
            assert!(y < 1.0);
            1.0 / (1.0 - y).powi(2)
        }
    }
}

fn div(d: DivergenceSpec, q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(a, b)| if *b > 0.0 { b * ell(d, a / b) } else { 0.0 })
        .sum()
}

/// Classical IPF on a positive kernel: `diag(u) g diag(v)` with marginals `a`, `b`.
fn ipf(g: &Array2<f64>, a: &[f64], b: &[f64]) -> Array2<f64> {
    let n = a.len();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    for _ in 0..100_000 {
        for x in 0..n {
            let s: f64 = (0..n).map(|y| g[[x, y]] * v[y]).sum();
            u[x] = if a[x] > 0.0 { a[x] / s } else { 0.0 };
        }
        for y in 0..n {
            let s: f64 = (0..n).map(|x| g[[x, y]] * u[x]).sum();
            v[y] = if b[y] > 0.0 { b[y] / s } else { 0.0 };
        }
        let err = (0..n)
            .map(|x| ((0..n).map(|y| u[x] * g[[x, y]] * v[y]).sum::<f64>() - a[x]).abs())
            .fold(0.0, f64::max);
        if err < 1e-15 {
            break;
        }
    }
    Array2::from_shape_fn((n, n), |(x, y)| u[x] * g[[x, y]] * v[y])
}

fn kernel_power(chain: &ReferenceChain) -> Array2<f64> {
    let mut k = Array2::<f64>::eye(chain.n_states());
    for t in 0..chain.n_steps() {
        k = k.dot(chain.kernel(t));
    }
    k
}

// ---------- random instances ----------

fn random_prob(rng: &mut ChaCha8Rng, n: usize) -> DiscreteMeasure {
    DiscreteMeasure::normalized((0..n).map(|_| 0.05 + rng.random::<f64>()).collect()).unwrap()
}

fn random_chain(rng: &mut ChaCha8Rng, n: usize, steps: usize, nu0: Option<DiscreteMeasure>) -> ReferenceChain {
    let grid = GridSpec::new(-1.0, 1.0, n).unwrap();
    let time = TimeGridSpec::new(1.0, steps).unwrap();
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mode = if rng.random::<bool>() { ChainMode::Euler } else { ChainMode::Metropolized };
    let nu0 = nu0.unwrap_or_else(|| random_prob(rng, n));
    build_chain(grid, time, u, nu0, mode).unwrap()
}

fn random_problem(rng: &mut ChaCha8Rng, d: DivergenceSpec) -> ProblemSpec {
    let n = rng.random_range(2..=5);
    let steps = rng.random_range(1..=3);
    let chain = random_chain(rng, n, steps, None);
    let mu0 = if d == DivergenceSpec::Entropy { random_prob(rng, n) } else { chain.nu0.clone() };
    let mu_t = random_prob(rng, n);
    let cost = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
    ProblemSpec::new(chain, d, TV, mu0, mu_t, Some(cost)).unwrap()
}

fn tight() -> SolveOptions {
    SolveOptions {
        tol: 1e-12,
        max_iters: 100_000,
        ..SolveOptions::default()
    }
}

fn corpus() -> Vec<ProblemSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    for i in 0..24 {
        let d = [DivergenceSpec::Entropy, DivergenceSpec::ChiSquared, DivergenceSpec::Tsallis { q: 2.0 }][i % 3];
        out.push(random_problem(&mut rng, d));
    }
    out
}

fn reversible_chain(n: usize, steps: usize, half: f64) -> ReferenceChain {
    let grid = GridSpec::new(-half, half, n).unwrap();
    let time = TimeGridSpec::new(1.0, steps).unwrap();
    let u: Vec<f64> = grid.points().iter().map(|x| 0.5 * x * x).collect();
    let lambda = gibbs_measure(&u).unwrap();
    build_chain(grid, time, u, lambda, ChainMode::Metropolized).unwrap()
}

fn gaussian(grid: &GridSpec, m: f64, s: f64) -> DiscreteMeasure {
    DiscreteMeasure::normalized(grid.points().iter().map(|x| (-(x - m).powi(2) / (2.0 * s * s)).exp()).collect()).unwrap()
}

// ---------- criteria ----------

fn c1_oracle_equivalence() -> String {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let problems = corpus();
    for p in &problems {
        let sol = solve_sinkhorn(p, &tight()).unwrap();
        let table = PathTable::from_chain_endpoint(&p.chain, &p.cost).unwrap();
        let oracle = solve_paths(&table, p.divergence, &p.mu0, &p.mu_t).unwrap();
        let v = oracle.value;
        let rel = (sol.report.primal_value - v).abs() / (1.0 + v.abs());
        assert!(rel <= 1e-6, "{}: solver {} oracle {v}", p.divergence.name(), sol.report.primal_value);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "took {secs:.1}s");
    format!("{} instances, worst relative gap {worst:.2e}, {secs:.1}s", problems.len())
}

fn c2_entropic_reduction() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let p = random_problem(&mut rng, DivergenceSpec::Entropy);
        let n = p.n_states();
        let sol = solve_sinkhorn(&p, &tight()).unwrap();
        let kn = kernel_power(&p.chain);
        let g = Array2::from_shape_fn((n, n), |(x, y)| p.chain.nu0[x] * kn[[x, y]] * (-p.cost[[x, y]]).exp());
        let q = ipf(&g, p.mu0.weights(), p.mu_t.weights());
        for x in 0..n {
            for y in 0..n {
                if p.mu0[x] > 0.0 && kn[[x, y]] > 0.0 {
                    let f = q[[x, y]] / (p.mu0[x] * kn[[x, y]]);
                    worst = worst.max((f - sol.density.f[[x, y]]).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-8, "sup error {worst:.3e}");
    format!("10 instances, sup |f - f_ipf| = {worst:.2e}")
}

fn c3_schrodinger_residuals() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_res, mut worst_rev) = (0.0f64, 0.0f64);
    for i in 0..12 {
        let n = rng.random_range(3..=6);
        let steps = rng.random_range(1..=4);
        let grid = GridSpec::new(-1.0, 1.0, n).unwrap();
        let time = TimeGridSpec::new(1.0, steps).unwrap();
        let u: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>()).collect();
        let lambda = gibbs_measure(&u).unwrap();
        let chain = build_chain(grid, time, u, lambda.clone(), ChainMode::Metropolized).unwrap();
        let d = [DivergenceSpec::Entropy, DivergenceSpec::ChiSquared, DivergenceSpec::Tsallis { q: 2.0 }][i % 3];
        let mu0 = if d == DivergenceSpec::Entropy { random_prob(&mut rng, n) } else { lambda.clone() };
        let mu_t = random_prob(&mut rng, n);
        let cost = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let p = ProblemSpec::new(chain, d, TV, mu0, mu_t, Some(cost)).unwrap();
        let sol = solve_sinkhorn(&p, &tight()).unwrap();
        let r = verify_schrodinger_system(&p, &sol.potentials).unwrap();
        worst_res = worst_res.max(r.initial).max(r.terminal);
        // Reversed second equation via detailed balance: lambda(y) K^n(y, x) = lambda(x) K^n(x, y).
        let kn = kernel_power(&p.chain);
        let rho = p.initial_density();
        for y in 0..n {
            let fwd: f64 = (0..n).map(|x| p.mu0[x] * kn[[x, y]] * sol.density.f[[x, y]]).sum();
            let rev: f64 = lambda[y] * (0..n).map(|x| kn[[y, x]] * rho[x] * sol.density.f[[x, y]]).sum::<f64>();
            worst_rev = worst_rev.max((fwd - rev).abs());
        }
        worst_rev = worst_rev.max((r.terminal - r.terminal_reversed).abs());
    }
    assert!(worst_res <= 1e-8, "residual {worst_res:.3e}");
    assert!(worst_rev <= 1e-10, "forward/reversed mismatch {worst_rev:.3e}");
    format!("12 reversible instances, residual {worst_res:.2e}, forward vs reversed {worst_rev:.2e}")
}

fn c4_structure() -> String {
    let mut worst = 0.0f64;
    for p in corpus() {
        let table = PathTable::from_chain_endpoint(&p.chain, &p.cost).unwrap();
        let oracle = solve_paths(&table, p.divergence, &p.mu0, &p.mu_t).unwrap();
        worst = worst.max(endpoint_factorization_defect(&table, &oracle.q).unwrap());
    }
    assert!(worst <= 1e-6, "defect {worst:.3e}");
    // chi^2 with a concentrated target and a steep cost clips the density.
    let chain = reversible_chain(5, 2, 1.0);
    let lambda = chain.gibbs();
    let mu_t = DiscreteMeasure::probability(vec![0.02, 0.03, 0.05, 0.2, 0.7]).unwrap();
    let xs = chain.grid.points();
    let cost = Array2::from_shape_fn((5, 5), |(x, y)| 0.5 * (xs[x] - xs[y]).powi(2));
    let p = ProblemSpec::new(chain, DivergenceSpec::ChiSquared, TV, lambda, mu_t, Some(cost)).unwrap();
    let sol = solve_sinkhorn(&p, &tight()).unwrap();
    let zeros = sol.density.f.iter().filter(|v| **v == 0.0).count();
    let table = PathTable::from_chain_endpoint(&p.chain, &p.cost).unwrap();
    let oracle = solve_paths(&table, p.divergence, &p.mu0, &p.mu_t).unwrap();
    let oracle_zeros = oracle.q.iter().filter(|v| **v == 0.0).count();
    assert!(zeros >= 1, "no clipped entries");
    assert!(oracle_zeros >= 1, "oracle optimizer has no zero paths");
    assert!((oracle.value - sol.report.primal_value).abs() <= 1e-6);
    format!("worst defect {worst:.2e}; clipped chi^2 density has {zeros} zeros, oracle {oracle_zeros} zero paths")
}

fn c5_oce() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut root, mut attain, mut slack) = (0.0f64, 0.0f64, f64::INFINITY);
    for i in 0..200 {
        let d = FOUR[i % 4];
        let m = rng.random_range(2..=8);
        let xi: Vec<f64> = (0..m).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
        let p = random_prob(&mut rng, m);
        let (phi, r) = oce_value(d, &xi, &p).unwrap();
        let q: Vec<f64> = (0..m).map(|k| p[k] * dconj(d, xi[k] - r)).collect();
        root = root.max((q.iter().sum::<f64>() - 1.0).abs());
        let eq: f64 = q.iter().zip(&xi).map(|(a, b)| a * b).sum();
        attain = attain.max((phi - (eq - div(d, &q, p.weights()))).abs());
        for _ in 0..100 {
            let w = random_prob(&mut rng, m);
            let e: f64 = w.weights().iter().zip(&xi).map(|(a, b)| a * b).sum();
            slack = slack.min(phi - (e - div(d, w.weights(), p.weights())));
        }
    }
    assert!(root <= 1e-10, "root residual {root:.3e}");
    assert!(attain <= 1e-9, "attainment {attain:.3e}");
    assert!(slack >= -1e-10, "duality slack {slack:.3e}");
    format!("200 draws: root {root:.2e}, attainment {attain:.2e}, min slack {slack:.2e}")
}

fn c6_tensorization() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let d = FOUR[i % 4];
        let n = rng.random_range(2..=5);
        let steps = rng.random_range(1..=3);
        let chain = random_chain(&mut rng, n, steps, None);
        let mu_t = random_prob(&mut rng, n);
        let kn = kernel_power(&chain);
        let g = Array2::from_shape_fn((n, n), |(x, y)| chain.nu0[x] * kn[[x, y]] * (-2.0 * rng.random::<f64>()).exp());
        let q = ipf(&g, chain.nu0.weights(), mu_t.weights());
        let f = Array2::from_shape_fn((n, n), |(x, y)| q[[x, y]] / (chain.nu0[x] * kn[[x, y]]));
        let p = ProblemSpec::new(chain.clone(), d, TV, chain.nu0.clone(), mu_t, None).unwrap();
        let (lhs, rhs) = tensorization_check(&p, &EndpointDensity { f: f.clone() }).unwrap();
        let direct: f64 = (0..n)
            .flat_map(|x| (0..n).map(move |y| (x, y)))
            .map(|(x, y)| chain.nu0[x] * kn[[x, y]] * ell(d, f[[x, y]]))
            .sum();
        worst = worst.max((lhs - rhs).abs()).max((lhs - direct).abs());
    }
    assert!(worst <= 1e-12, "tensorization gap {worst:.3e}");
    format!("50 densities, four divergences, max gap {worst:.2e}")
}

fn c7_data_processing() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut slack = f64::INFINITY;
    for i in 0..100 {
        let d = FOUR[i % 4];
        let m = rng.random_range(2..=8);
        let k = rng.random_range(1..=m);
        let p = random_prob(&mut rng, m);
        let q = random_prob(&mut rng, m);
        let map: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let (pp, qp) = (p.pushforward(&map, k).unwrap(), q.pushforward(&map, k).unwrap());
        slack = slack.min(div(d, q.weights(), p.weights()) - div(d, qp.weights(), pp.weights()));
    }
    assert!(slack >= -1e-12, "slack {slack:.3e}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut chain_rule = 0.0f64;
    for _ in 0..10 {
        let chain = random_chain(&mut rng, 3, 2, None);
        let table = PathTable::from_chain(&chain, |_| 0.0).unwrap();
        let q = random_prob(&mut rng, table.len());
        let dp = data_processing_decomposition(&table, q.weights(), DivergenceSpec::Entropy).unwrap();
        chain_rule = chain_rule.max((dp.lhs - dp.rhs_target_weighted).abs());
    }
    assert!(chain_rule <= 1e-10, "entropy chain rule {chain_rule:.3e}");

    // Two states, two steps, every path has probability 1/8.
    let grid = GridSpec::new(0.0, 1.0, 2).unwrap();
    let time = TimeGridSpec::new(1.0, 2).unwrap();
    let k = Array2::from_elem((2, 2), 0.5);
    let chain = ReferenceChain::from_kernel(grid, time, vec![0.0; 2], k, DiscreteMeasure::uniform(2).unwrap()).unwrap();
    let table = PathTable::from_chain(&chain, |_| 0.0).unwrap();
    let mut q = vec![0.1; 8];
    for i in 0..8 {
        match table.path(i) {
            [0, 0, 0] => q[i] = 0.3,
            [0, 1, 0] => q[i] = 0.1,
            _ => {}
        }
    }
    let d = DivergenceSpec::ChiSquared;
    let dp = data_processing_decomposition(&table, &q, d).unwrap();
    let gap = (dp.lhs - dp.rhs_reference_weighted).abs();
    assert!(gap >= 1e-3, "chi^2 gap {gap:.3e}");
    // Exact chi^2 chain rule: bridge terms weighted by Q0T^2 / P0T.
    let q0t = table.endpoint_law(&q);
    let p0t = table.endpoint_law(&table.prob);
    let mut exact = div(d, q0t.as_slice().unwrap(), p0t.as_slice().unwrap());
    for x in 0..2 {
        for y in 0..2 {
            let (qb, pb): (Vec<f64>, Vec<f64>) = (0..8)
                .filter(|&i| table.start(i) == x && table.end(i) == y)
                .map(|i| (q[i] / q0t[[x, y]], table.prob[i] / p0t[[x, y]]))
                .unzip();
            exact += q0t[[x, y]].powi(2) / p0t[[x, y]] * div(d, &qb, &pb);
        }
    }
    assert!((exact - dp.lhs).abs() <= 1e-12);
    format!("min DPI slack {slack:.2e}, entropy chain rule {chain_rule:.2e}, chi^2 counterexample gap {gap:.3e}")
}

fn entropic_error(n: usize, steps: usize) -> f64 {
    let chain = reversible_chain(n, steps, 4.0);
    let mu0 = gaussian(&chain.grid, -0.8, 0.8);
    let mu_t = gaussian(&chain.grid, 0.8, 0.8);
    let p = ProblemSpec::new(chain, DivergenceSpec::Entropy, TV, mu0, mu_t, None).unwrap();
    let opts = SolveOptions::default();
    let sol = solve_sinkhorn(&p, &opts).unwrap();
    let exact = chain_marginals(&p, &sol.density).unwrap();
    let flow = entropic_flow(&p, &opts).unwrap();
    flow.max_tv_distance(&exact).unwrap()
}

fn c8_entropic_flow() -> String {
    let start = Instant::now();
    let coarse = entropic_error(31, 16);
    let fine = entropic_error(61, 32);
    let secs = start.elapsed().as_secs_f64();
    assert!(coarse <= 0.05, "TV {coarse:.4}");
    assert!(coarse / fine >= 1.5, "refinement ratio {:.3}", coarse / fine);
    assert!(secs < 60.0, "took {secs:.1}s");
    format!("TV {coarse:.4} -> {fine:.4}, ratio {:.2}, {secs:.1}s", coarse / fine)
}

fn c9_chisquared_flow() -> String {
    let start = Instant::now();
    let chain = reversible_chain(31, 16, 4.0);
    let lambda = chain.gibbs();
    let opts = FlowCheckOptions {
        mc_paths: 100_000,
        seed: 17,
        ..FlowCheckOptions::default()
    };
    let p0 = ProblemSpec::new(chain.clone(), DivergenceSpec::ChiSquared, TV, lambda.clone(), lambda.clone(), None).unwrap();
    let zero = chisquared_flow_residual(&p0, &opts).unwrap();
    let w: Vec<f64> = chain.grid.points().iter().enumerate().map(|(i, x)| lambda[i] * (1.0 + 0.4 * x.tanh())).collect();
    let mu_t = DiscreteMeasure::normalized(w).unwrap();
    let p1 = ProblemSpec::new(chain, DivergenceSpec::ChiSquared, TV, lambda, mu_t, None).unwrap();
    let moderate = chisquared_flow_residual(&p1, &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(zero.residual <= 0.05, "zero-control residual {:.4}", zero.residual);
    assert!(moderate.residual <= 0.15, "moderate residual {:.4}", moderate.residual);
    assert!(secs < 300.0, "took {secs:.1}s");
    format!(
        "zero control {:.4}, moderate {:.4} (bandwidth {:.3}, min ESS {:.0}), {secs:.1}s",
        zero.residual, moderate.residual, moderate.bandwidth, moderate.min_ess
    )
}

fn c10_convexity_duality() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut conv = f64::INFINITY;
    for i in 0..20 {
        let d = [DivergenceSpec::Entropy, DivergenceSpec::ChiSquared, DivergenceSpec::Tsallis { q: 2.0 }][i % 3];
        let a = random_problem(&mut rng, d);
        let n = a.n_states();
        let b = a
            .with_targets(
                if d == DivergenceSpec::Entropy { random_prob(&mut rng, n) } else { a.mu0.clone() },
                random_prob(&mut rng, n),
            )
            .unwrap();
        let t = rng.random::<f64>();
        let m = a.with_targets(a.mu0.mix(&b.mu0, t).unwrap(), a.mu_t.mix(&b.mu_t, t).unwrap()).unwrap();
        let v = |p: &ProblemSpec| solve_sinkhorn(p, &tight()).unwrap().report.primal_value;
        conv = conv.min(t * v(&a) + (1.0 - t) * v(&b) - v(&m));
    }
    assert!(conv >= -1e-8, "convexity slack {conv:.3e}");

    let mut slack = f64::INFINITY;
    let mut checked = 0;
    for p in corpus() {
        let n = p.n_states();
        let sol = solve_sinkhorn(&p, &tight()).unwrap();
        let kn = kernel_power(&p.chain);
        let g = Array2::from_shape_fn((n, n), |(x, y)| p.chain.nu0[x] * kn[[x, y]]);
        let q = ipf(&g, p.mu0.weights(), p.mu_t.weights());
        let feasible = EndpointDensity {
            f: Array2::from_shape_fn((n, n), |(x, y)| q[[x, y]] / (p.mu0[x] * kn[[x, y]])),
        };
        let feasible_value = primal_value(&p, &feasible);
        for _ in 0..20 {
            let phi: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let (dv, _) = dual_value(&p, &phi).unwrap();
            slack = slack.min(sol.report.primal_value - dv).min(feasible_value - dv);
            checked += 1;
        }
    }
    assert!(slack >= -1e-10, "weak duality slack {slack:.3e}");
    format!("min convexity slack {conv:.2e}; {checked} dual evaluations, min slack {slack:.2e}")
}

fn nesb(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_nesb"))
        .args(args)
        .env("NESB_LOG", "error")
        .status()
        .expect("binary runs")
        .code()
        .unwrap_or(-1)
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn strip_wall_time(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"wall_time\"")).collect::<Vec<_>>().join("\n")
}

fn c11_cli() -> String {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = r#""grid": {"x_min": -3.0, "x_max": 3.0, "n_states": 15},
        "time": {"horizon": 1.0, "n_steps": 8},
        "potential": {"family": "quadratic", "a": 0.5},"#;
    let entropic = format!(
        r#"{{ {base} "divergence": {{"name": "entropy"}},
        "mu0": {{"family": "gaussian", "mean": -0.5, "sd": 0.7}},
        "mu_t": {{"family": "gaussian", "mean": 0.5, "sd": 0.7}} }}"#
    );
    let chi = format!(
        r#"{{ {base} "divergence": {{"name": "chi_squared"}}, "seed": 3,
        "mu0": {{"family": "gibbs"}},
        "mu_t": {{"family": "tabulated", "weights": [1,1,1,1,1,1,1,1.2,1.2,1.2,1.2,1.2,1.2,1.2,1.2]}},
        "flow": {{"mc_paths": 10000}} }}"#
    );
    let small = r#"{ "grid": {"x_min": -1.0, "x_max": 1.0, "n_states": 3},
        "time": {"horizon": 1.0, "n_steps": 2}, "potential": {"family": "quadratic", "a": 0.5},
        "divergence": {"name": "chi_squared"}, "mu0": {"family": "gibbs"},
        "mu_t": {"family": "tabulated", "weights": [0.2, 0.3, 0.5]},
        "cost": {"family": "quadratic", "scale": 0.3} }"#;
    write(&d.join("entropic.json"), &entropic);
    write(&d.join("chi.json"), &chi);
    write(&d.join("small.json"), small);
    write(&d.join("tsallis.json"), &entropic.replace(r#"{"name": "entropy"}"#, r#"{"name": "tsallis", "q": 2.0}"#));
    write(&d.join("missing.json"), &entropic.replace(r#""divergence": {"name": "entropy"},"#, ""));
    write(&d.join("oversized.json"), &small.replace(r#""n_states": 3"#, r#""n_states": 20"#).replace(r#""n_steps": 2"#, r#""n_steps": 6"#));
    write(&d.join("unconverged.json"), &entropic.replace(r#""divergence""#, r#""max_iters": 1, "divergence""#));
    write(
        &d.join("unreachable.json"),
        r#"{ "grid": {"x_min": -100.0, "x_max": 100.0, "n_states": 5},
        "time": {"horizon": 0.01, "n_steps": 1}, "chain_mode": "euler",
        "divergence": {"name": "entropy"},
        "mu0": {"family": "dirac", "state": 2}, "mu_t": {"family": "dirac", "state": 4} }"#,
    );
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();

    let mut codes = Vec::new();
    for (cmd, cfg, expect) in [
        ("solve", "entropic.json", 0),
        ("flow", "entropic.json", 0),
        ("flow", "chi.json", 0),
        ("check", "small.json", 0),
        ("solve", "missing.json", 1),
        ("flow", "tsallis.json", 1),
        ("solve", "unconverged.json", 2),
        ("solve", "unreachable.json", 3),
        ("check", "oversized.json", 4),
    ] {
        let code = nesb(&[cmd, "--config", &p(cfg), "--out", &p(&format!("{cmd}-{cfg}-x"))]);
        assert_eq!(code, expect, "{cmd} {cfg}");
        codes.push(code);
    }
    let report = std::fs::read_to_string(d.join("solve-entropic.json-x/report.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    let gap = report["report"]["gap"].as_f64().unwrap().abs();
    assert!(gap <= 1e-6, "gap {gap}");

    let mut files = 0;
    for (cmd, cfg) in [("solve", "entropic.json"), ("flow", "entropic.json"), ("flow", "chi.json"), ("check", "small.json")] {
        let a = p(&format!("{cmd}-{cfg}-a"));
        let b = p(&format!("{cmd}-{cfg}-b"));
        for out in [&a, &b] {
            assert_eq!(nesb(&[cmd, "--config", &p(cfg), "--out", out, "--seed", "42"]), 0);
        }
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read_to_string(Path::new(&a).join(&name)).unwrap();
            let y = std::fs::read_to_string(Path::new(&b).join(&name)).unwrap();
            let hash = format!("{:?}", name);
            assert!(x.contains("config_sha256"), "{hash} lacks the config hash");
            if hash.ends_with(".json\"") {
                assert_eq!(strip_wall_time(&x), strip_wall_time(&y), "{hash} differs");
            } else {
                assert_eq!(x, y, "{hash} differs");
            }
            files += 1;
        }
    }
    format!("exit codes {codes:?} as specified; {files} output files reproduced byte for byte")
}

type Criterion = (&'static str, fn() -> String);

fn main() {
    let criteria: [Criterion; 11] = [
        ("oracle equivalence", c1_oracle_equivalence),
        ("entropic reduction", c2_entropic_reduction),
        ("Schrodinger system residuals", c3_schrodinger_residuals),
        ("endpoint structure", c4_structure),
        ("OCE layer", c5_oce),
        ("tensorization", c6_tensorization),
        ("data processing", c7_data_processing),
        ("entropic marginal flow", c8_entropic_flow),
        ("chi-squared flow", c9_chisquared_flow),
        ("convexity and weak duality", c10_convexity_duality),
        ("CLI determinism", c11_cli),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        match panic::catch_unwind(run) {
            Ok(detail) => println!(
                "criterion {:>2} {name}: PASS [{:.1}s] {detail}",
                i + 1,
                start.elapsed().as_secs_f64()
            ),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {:>2} {name}: FAIL {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
