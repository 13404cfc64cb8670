//! Batch front end: JSON run configuration in, CSV and JSON artifacts out.
//!
//! Exit codes: 0 success, 1 malformed input or unsupported request,
//! 2 unconverged (or a failed check), 3 infeasible, 4 instance too large.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::bridge_solver::{
    solve_dual_ascent, solve_sinkhorn, tensorization_check, ProblemSpec, Solution, SolveOptions,
};
use crate::divergence::DivergenceSpec;
use crate::error::{invalid, Error, Result};
use crate::marginal_flow::{chain_marginals, chisquared_flow_residual, entropic_flow, FlowCheckOptions};
use crate::measure::DiscreteMeasure;
use crate::oracle::{
    data_processing_decomposition, endpoint_factorization_defect, path_count, solve_paths, PathTable,
};
use crate::ref_chain::{build_chain, gibbs_measure, ChainMode, GridSpec, ReferenceChain, TimeGridSpec, MAX_PATHS};
use crate::weak_cost::WeakCostSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_UNCONVERGED: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_TOO_LARGE: i32 = 4;

/// Tolerances asserted by `check`.
pub const VALUE_RTOL: f64 = 1e-6;
pub const DEFECT_TOL: f64 = 1e-6;
pub const CHAIN_RULE_TOL: f64 = 1e-10;
pub const TENSORIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    #[default]
    Zero,
    /// `U(x) = a x^2`.
    Quadratic { a: f64 },
    /// `U(x) = a (x^2 - b^2)^2`.
    DoubleWell { a: f64, b: f64 },
    Tabulated { values: Vec<f64> },
}

impl PotentialSpec {
    pub fn evaluate(&self, grid: &GridSpec) -> Result<Vec<f64>> {
        let xs = grid.points();
        Ok(match self {
            PotentialSpec::Zero => vec![0.0; xs.len()],
            PotentialSpec::Quadratic { a } => xs.iter().map(|x| a * x * x).collect(),
            PotentialSpec::DoubleWell { a, b } => xs.iter().map(|x| a * (x * x - b * b).powi(2)).collect(),
            PotentialSpec::Tabulated { values } => {
                if values.len() != xs.len() {
                    return Err(invalid(format!(
                        "potential: tabulated values have length {}, grid has {} states",
                        values.len(),
                        xs.len()
                    )));
                }
                values.clone()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// `lambda ~ e^{-U}` on the grid.
    Gibbs,
    Uniform,
    /// Discretized normal density, renormalized on the grid.
    Gaussian { mean: f64, sd: f64 },
    Dirac { state: usize },
    /// Terminal marginal of the reference chain.
    ReferenceTerminal,
    /// Nonnegative weights, renormalized.
    Tabulated { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    #[default]
    Zero,
    /// `C(x, y) = scale (x - y)^2`.
    Quadratic { scale: f64 },
    Tabulated { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    #[default]
    Sinkhorn,
    DualAscent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSettings {
    #[serde(default = "default_mc_paths")]
    pub mc_paths: usize,
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_mc_paths() -> usize {
    100_000
}

fn default_substeps() -> usize {
    8
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            mc_paths: default_mc_paths(),
            bandwidth: None,
            substeps: default_substeps(),
        }
    }
}

fn default_mode() -> ChainMode {
    ChainMode::Metropolized
}

fn default_weak_cost() -> WeakCostSpec {
    WeakCostSpec::TotalVariation
}

fn default_tol() -> f64 {
    SolveOptions::default().tol
}

fn default_max_iters() -> usize {
    SolveOptions::default().max_iters
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub time: TimeGridSpec,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default = "default_mode")]
    pub chain_mode: ChainMode,
    /// Initial law of the reference; the Gibbs measure when absent.
    #[serde(default)]
    pub nu0: Option<MeasureSpec>,
    pub divergence: DivergenceSpec,
    #[serde(default = "default_weak_cost")]
    pub weak_cost: WeakCostSpec,
    pub mu0: MeasureSpec,
    pub mu_t: MeasureSpec,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub flow: FlowSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("malformed config: {e}")))
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canon.as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_iters: self.max_iters,
            ..SolveOptions::default()
        }
    }

    fn measure(&self, spec: &MeasureSpec, field: &str, u: &[f64], chain: Option<&ReferenceChain>) -> Result<DiscreteMeasure> {
        let n = self.grid.n_states;
        let tag = |e: Error| invalid(format!("{field}: {e}"));
        match spec {
            MeasureSpec::Gibbs => gibbs_measure(u).map_err(tag),
            MeasureSpec::Uniform => DiscreteMeasure::uniform(n).map_err(tag),
            MeasureSpec::Gaussian { mean, sd } => {
                if !(*sd > 0.0) {
                    return Err(invalid(format!("{field}: sd must be positive")));
                }
                let w = self.grid.points().iter().map(|x| (-(x - mean).powi(2) / (2.0 * sd * sd)).exp()).collect();
                DiscreteMeasure::normalized(w).map_err(tag)
            }
            MeasureSpec::Dirac { state } => DiscreteMeasure::dirac(n, *state).map_err(tag),
            MeasureSpec::ReferenceTerminal => {
                let chain = chain.ok_or_else(|| invalid(format!("{field}: reference_terminal is not available here")))?;
                let m = chain.marginals().pop().expect("at least one marginal");
                DiscreteMeasure::normalized(m).map_err(tag)
            }
            MeasureSpec::Tabulated { weights } => {
                if weights.len() != n {
                    return Err(invalid(format!("{field}: {} weights for {n} states", weights.len())));
                }
                DiscreteMeasure::normalized(weights.clone()).map_err(tag)
            }
        }
    }

    fn cost_matrix(&self) -> Result<Array2<f64>> {
        let n = self.grid.n_states;
        let xs = self.grid.points();
        match &self.cost {
            CostSpec::Zero => Ok(Array2::zeros((n, n))),
            CostSpec::Quadratic { scale } => Ok(Array2::from_shape_fn((n, n), |(i, j)| scale * (xs[i] - xs[j]).powi(2))),
            CostSpec::Tabulated { values } => {
                if values.len() != n || values.iter().any(|r| r.len() != n) {
                    return Err(invalid(format!("cost: tabulated values must be {n} x {n}")));
                }
                Ok(Array2::from_shape_fn((n, n), |(i, j)| values[i][j]))
            }
        }
    }

    pub fn build_chain(&self) -> Result<ReferenceChain> {
        self.grid.validate().map_err(|e| invalid(format!("grid: {e}")))?;
        self.time.validate().map_err(|e| invalid(format!("time: {e}")))?;
        let u = self.potential.evaluate(&self.grid)?;
        let nu0 = match &self.nu0 {
            None => gibbs_measure(&u).map_err(|e| invalid(format!("potential: {e}")))?,
            Some(spec) => self.measure(spec, "nu0", &u, None)?,
        };
        build_chain(self.grid, self.time, u, nu0, self.chain_mode)
    }

    pub fn build_problem(&self) -> Result<ProblemSpec> {
        let chain = self.build_chain()?;
        let u = chain.potential.clone();
        let mu0 = self.measure(&self.mu0, "mu0", &u, Some(&chain))?;
        let mu_t = self.measure(&self.mu_t, "mu_t", &u, Some(&chain))?;
        ProblemSpec::new(chain, self.divergence, self.weak_cost, mu0, mu_t, Some(self.cost_matrix()?))
    }

    pub fn solve(&self, problem: &ProblemSpec) -> Result<Solution> {
        match self.solver {
            SolverChoice::Sinkhorn => solve_sinkhorn(problem, &self.solve_options()),
            SolverChoice::DualAscent => solve_dual_ascent(problem, &self.solve_options(), None),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Unconverged { .. } | Error::NumericalFailure { .. } | Error::StatisticalFailure(_) => EXIT_UNCONVERGED,
        Error::Infeasible(_) | Error::DualInfeasible { .. } => EXIT_INFEASIBLE,
        Error::TooLarge { .. } => EXIT_TOO_LARGE,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Parser)]
#[command(name = "nesb", version, about = "Divergence-regularized Schrödinger bridges on a 1-D grid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the potentials and the optimal endpoint density.
    Solve(CommonArgs),
    /// Compute the flow of time marginals and its consistency checks.
    Flow(CommonArgs),
    /// Compare against brute-force path optimization on a small instance.
    Check(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// RNG seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

struct Outputs {
    dir: PathBuf,
    hash: String,
}

impl Outputs {
    fn csv(&self, name: &str, header: &str, body: &str) -> Result<()> {
        let text = format!("# config_sha256={}\n{header}\n{body}", self.hash);
        write_file(&self.dir.join(name), &text)
    }

    fn json(&self, name: &str, value: &serde_json::Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("json value serializes") + "\n";
        write_file(&self.dir.join(name), &text)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parses `args` (program name first), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("NESB_LOG")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let (name, common) = match &cli.command {
        Command::Solve(a) => ("solve", a),
        Command::Flow(a) => ("flow", a),
        Command::Check(a) => ("check", a),
    };
    if let Some(t) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let mut config = match fs::read_to_string(&common.config)
        .map_err(|e| invalid(format!("cannot read {}: {e}", common.config.display())))
        .and_then(|t| RunConfig::from_json(&t))
    {
        Ok(c) => c,
        Err(e) => {
            eprintln!("nesb {name}: {e}");
            return EXIT_INPUT;
        }
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let dir = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("nesb-out"));
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("nesb {name}: cannot create {}: {e}", dir.display());
        return EXIT_INPUT;
    }
    let out = Outputs {
        dir,
        hash: config.hash(),
    };
    let result = match cli.command {
        Command::Solve(_) => cmd_solve(&config, &out),
        Command::Flow(_) => cmd_flow(&config, &out),
        Command::Check(_) => cmd_check(&config, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("nesb {name}: {e}");
            let code = exit_code(&e);
            let _ = out.json(
                "error.json",
                &json!({
                    "config_sha256": out.hash,
                    "command": name,
                    "error": e.to_string(),
                    "exit_code": code,
                }),
            );
            code
        }
    }
}

fn cmd_solve(config: &RunConfig, out: &Outputs) -> Result<i32> {
    let start = Instant::now();
    let problem = config.build_problem()?;
    let sol = config.solve(&problem)?;
    let n = problem.n_states();
    let xs = problem.points();
    let mut body = String::new();
    for i in 0..n {
        let _ = writeln!(
            body,
            "{i},{},{},{}",
            num(xs[i]),
            num(sol.potentials.phi[i]),
            num(sol.potentials.psi[i])
        );
    }
    out.csv("potentials.csv", "state,x,phi,psi", &body)?;
    let mut body = String::new();
    for x in 0..n {
        for y in 0..n {
            let _ = writeln!(body, "{x},{y},{}", num(sol.density.f[[x, y]]));
        }
    }
    out.csv("density.csv", "x0,xT,f", &body)?;
    out.json(
        "report.json",
        &json!({
            "config_sha256": out.hash,
            "seed": config.seed,
            "report": sol.report,
            "config": config,
            "wall_time": start.elapsed().as_secs_f64(),
        }),
    )?;
    log::info!("solve: gap {:.3e} after {} iterations", sol.report.gap, sol.report.iterations);
    Ok(if sol.report.converged { EXIT_OK } else { EXIT_UNCONVERGED })
}

fn cmd_flow(config: &RunConfig, out: &Outputs) -> Result<i32> {
    let problem = config.build_problem()?;
    let opts = config.solve_options();
    let sol = solve_sinkhorn(&problem, &opts)?;
    let exact = chain_marginals(&problem, &sol.density)?;
    let (method, flow, extra) = match config.divergence {
        DivergenceSpec::Entropy => {
            let flow = entropic_flow(&problem, &opts)?;
            ("entropic_hjb", flow, serde_json::Value::Null)
        }
        DivergenceSpec::ChiSquared => {
            let check = chisquared_flow_residual(
                &problem,
                &FlowCheckOptions {
                    mc_paths: config.flow.mc_paths,
                    bandwidth: config.flow.bandwidth,
                    seed: config.seed,
                    substeps: config.flow.substeps,
                    solve: opts,
                },
            )?;
            ("chain_marginals", exact.clone(), serde_json::to_value(check).expect("check serializes"))
        }
        other => {
            return Err(invalid(format!("flow unsupported for the {} divergence", other.name())));
        }
    };
    let tv = flow.tv_distances(&exact)?;
    let dt = config.time.dt();
    let xs = problem.points();
    let mut body = String::new();
    for t in 0..flow.n_rows() {
        for (i, x) in xs.iter().enumerate() {
            let _ = writeln!(
                body,
                "{},{},{},{}",
                num(t as f64 * dt),
                num(*x),
                num(flow.densities[[t, i]]),
                num(exact.densities[[t, i]])
            );
        }
    }
    out.csv("flow.csv", "t,x,density,chain_density", &body)?;
    out.json(
        "consistency.json",
        &json!({
            "config_sha256": out.hash,
            "seed": config.seed,
            "method": method,
            "tv_per_row": tv,
            "max_tv": tv.iter().cloned().fold(0.0, f64::max),
            "chi_squared": extra,
        }),
    )?;
    Ok(EXIT_OK)
}

fn cmd_check(config: &RunConfig, out: &Outputs) -> Result<i32> {
    let count = path_count(config.grid.n_states, config.time.n_steps);
    if count > MAX_PATHS {
        return Err(Error::TooLarge { count, limit: MAX_PATHS });
    }
    if config.weak_cost != WeakCostSpec::TotalVariation {
        return Err(invalid("weak_cost: check compares against the hard terminal constraint (total_variation)"));
    }
    let problem = config.build_problem()?;
    let sol = config.solve(&problem)?;
    let table = PathTable::from_chain_endpoint(&problem.chain, &problem.cost)?;
    let oracle = solve_paths(&table, problem.divergence, &problem.mu0, &problem.mu_t)?;
    let solver_value = sol.report.primal_value;
    let value_gap = (solver_value - oracle.value).abs();
    let value_ok = value_gap <= VALUE_RTOL * (1.0 + oracle.value.abs());
    let defect = endpoint_factorization_defect(&table, &oracle.q)?;
    let defect_ok = defect <= DEFECT_TOL;
    let dp = data_processing_decomposition(&table, &oracle.q, problem.divergence)?;
    let chain_rule_ok = if problem.divergence == DivergenceSpec::Entropy {
        Some((dp.lhs - dp.rhs_target_weighted).abs() <= CHAIN_RULE_TOL)
    } else {
        None
    };
    let tensorization = if problem.mu0_equals_nu0() {
        let (lhs, rhs) = tensorization_check(&problem, &sol.density)?;
        Some((lhs, rhs, (lhs - rhs).abs() <= TENSORIZATION_TOL))
    } else {
        None
    };
    let passed = value_ok && defect_ok && chain_rule_ok.unwrap_or(true) && tensorization.is_none_or(|t| t.2);
    out.json(
        "check.json",
        &json!({
            "config_sha256": out.hash,
            "seed": config.seed,
            "paths": table.len(),
            "value": {
                "solver": solver_value,
                "oracle": oracle.value,
                "gap": value_gap,
                "ok": value_ok,
            },
            "factorization_defect": { "value": defect, "ok": defect_ok },
            "data_processing": {
                "lhs": dp.lhs,
                "rhs_reference_weighted": dp.rhs_reference_weighted,
                "rhs_target_weighted": dp.rhs_target_weighted,
                "skipped_reference_mass": dp.skipped_reference_mass,
                "entropy_chain_rule_ok": chain_rule_ok,
            },
            "tensorization": tensorization.map(|(l, r, ok)| json!({ "lhs": l, "rhs": r, "ok": ok })),
            "passed": passed,
        }),
    )?;
    Ok(if passed { EXIT_OK } else { EXIT_UNCONVERGED })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "grid": {"x_min": -1.0, "x_max": 1.0, "n_states": 3},
        "time": {"horizon": 1.0, "n_steps": 2},
        "potential": {"family": "quadratic", "a": 0.5},
        "divergence": {"name": "chi_squared"},
        "mu0": {"family": "gibbs"},
        "mu_t": {"family": "tabulated", "weights": [0.2, 0.3, 0.5]}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.weak_cost, WeakCostSpec::TotalVariation);
        assert_eq!(c.chain_mode, ChainMode::Metropolized);
        assert_eq!(c.solver, SolverChoice::Sinkhorn);
        let p = c.build_problem().unwrap();
        assert!(p.mu0_equals_nu0());
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace(r#""divergence": {"name": "chi_squared"},"#, "");
        let e = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(e.contains("divergence"), "{e}");
    }

    #[test]
    fn hash_ignores_whitespace_and_tracks_seed() {
        let a = RunConfig::from_json(MINIMAL).unwrap();
        let b = RunConfig::from_json(&MINIMAL.replace('\n', " ")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 7;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Infeasible("x".into())), EXIT_INFEASIBLE);
        assert_eq!(exit_code(&Error::TooLarge { count: 2, limit: 1 }), EXIT_TOO_LARGE);
        assert_eq!(
            exit_code(&Error::Unconverged {
                iterations: 1,
                residual_initial: 0.0,
                residual_terminal: 0.0
            }),
            EXIT_UNCONVERGED
        );
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), EXIT_INPUT);
    }
}
