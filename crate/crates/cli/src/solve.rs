//! `solve` and `oracle-check`.

use std::fmt::Write as _;
use std::path::PathBuf;

use brrl_core::analytic::{solve, solve_state};
use brrl_core::mdp::evaluate_policy;
use brrl_core::oracle::numeric_regularized_state;
use brrl_core::random::dirichlet_ones;
use brrl_core::seed::rng_for;
use brrl_core::{BrrlSolution, RatioBounds, TabularMdp, TabularPolicy};
use clap::Args;
use rand::Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};

const CHAIN5: &str = include_str!("../data/chain5.json");
const BANDIT10: &str = include_str!("../data/bandit10.json");

/// MDPs shipped with the binary.
pub fn builtin_mdp(name: &str) -> Option<&'static str> {
    match name {
        "chain5" => Some(CHAIN5),
        "bandit10" => Some(BANDIT10),
        _ => None,
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// MDP JSON file.
    #[arg(long, conflicts_with = "builtin", required_unless_present = "builtin")]
    pub mdp: Option<PathBuf>,
    /// Bundled MDP: chain5 or bandit10.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Behavior policy as a JSON array of rows; uniform when absent.
    #[arg(long, conflicts_with = "uniform")]
    pub pi0: Option<PathBuf>,
    #[arg(long)]
    pub uniform: bool,
    /// Symmetric bound `1 ± eps` (default 0.2 unless --c-l/--c-h are given).
    #[arg(long, conflicts_with_all = ["c_l", "c_h"])]
    pub eps: Option<f64>,
    #[arg(long, requires = "c_h")]
    pub c_l: Option<f64>,
    #[arg(long, requires = "c_l")]
    pub c_h: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    /// Also solve every state numerically and report the largest ratio gap.
    #[arg(long)]
    pub oracle: bool,
    /// Directory for solution.json and summary.txt; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct SolutionFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub bounds: RatioBounds,
    pub mu: Vec<f64>,
    pub ratio: Vec<Vec<f64>>,
    pub pi_star: Vec<Vec<f64>>,
    pub median_adv: Vec<Vec<f64>>,
    pub predicted_b: f64,
    pub predicted_improvement: f64,
    pub eta0: f64,
    pub eta_star: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_gap: Option<f64>,
}

fn rows(flat: &[f64], k: usize) -> Vec<Vec<f64>> {
    flat.chunks(k).map(<[f64]>::to_vec).collect()
}

pub fn parse_bounds(eps: Option<f64>, c_l: Option<f64>, c_h: Option<f64>, lambda: f64) -> CliResult<RatioBounds> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(CliError::Input(format!("--lambda must be positive, got {lambda}")));
    }
    let b = match (c_l, c_h) {
        (Some(l), Some(h)) => RatioBounds::asymmetric(l, h, lambda),
        _ => RatioBounds::symmetric(eps.unwrap_or(0.2), lambda),
    };
    b.map_err(|e| CliError::Infeasible(format!("infeasible ratio bounds: {e}")))
}

fn load_mdp(args: &SolveArgs) -> CliResult<TabularMdp> {
    let (src, name) = match (&args.mdp, &args.builtin) {
        (Some(path), _) => (std::fs::read_to_string(path).map_err(|e| CliError::input(&path.display().to_string(), e))?, path.display().to_string()),
        (None, Some(b)) => (
            builtin_mdp(b).ok_or_else(|| CliError::Input(format!("unknown builtin MDP {b:?}; expected chain5 or bandit10")))?.to_string(),
            b.clone(),
        ),
        (None, None) => return Err(CliError::Input("one of --mdp or --builtin is required".into())),
    };
    TabularMdp::from_json_str(&src).map_err(|e| CliError::input(&name, e))
}

fn load_policy(args: &SolveArgs, mdp: &TabularMdp) -> CliResult<TabularPolicy> {
    let Some(path) = &args.pi0 else {
        return Ok(TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()));
    };
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(&name, e))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| CliError::input(&name, e))?;
    let pi = TabularPolicy::from_rows(&rows).map_err(|e| CliError::input(&name, e))?;
    if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
        return Err(CliError::Input(format!(
            "{name}: policy is {}x{}, MDP is {}x{}",
            pi.n_states(),
            pi.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(pi)
}

/// Largest sup-norm gap between the closed form and the numeric optimizer over states.
pub fn oracle_gap(sol: &BrrlSolution, q: &[f64], pi0: &TabularPolicy) -> CliResult<f64> {
    let k = pi0.n_actions();
    let mut gap: f64 = 0.0;
    for s in 0..pi0.n_states() {
        let num = numeric_regularized_state(&q[s * k..(s + 1) * k], pi0.row(s), &sol.bounds)?;
        for (a, b) in sol.ratio_row(s).iter().zip(&num.ratio) {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(gap)
}

pub fn solution_file(mdp: &TabularMdp, pi0: &TabularPolicy, bounds: &RatioBounds, with_oracle: bool) -> CliResult<SolutionFile> {
    let eval = evaluate_policy(mdp, pi0)?;
    let sol = solve(mdp, &eval, pi0, bounds)?;
    let eta_star = evaluate_policy(mdp, &sol.pi_star)?.eta;
    let k = mdp.n_actions();
    let oracle = if with_oracle { Some(oracle_gap(&sol, &eval.q, pi0)?) } else { None };
    Ok(SolutionFile {
        n_states: mdp.n_states(),
        n_actions: k,
        bounds: *bounds,
        mu: sol.mu.clone(),
        ratio: rows(&sol.ratio, k),
        pi_star: sol.pi_star.rows(),
        median_adv: rows(&sol.median_adv, k),
        predicted_b: sol.predicted_b,
        predicted_improvement: sol.predicted_improvement(),
        eta0: eval.eta,
        eta_star,
        oracle_gap: oracle,
    })
}

fn summary(f: &SolutionFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "states {} actions {} bounds [{}, {}] lambda {}", f.n_states, f.n_actions, f.bounds.lower(), f.bounds.upper(), f.bounds.lambda);
    let _ = writeln!(s, "eta(pi0)  {:.10}", f.eta0);
    let _ = writeln!(s, "eta(pi*)  {:.10}", f.eta_star);
    let _ = writeln!(s, "predicted {:.10}", f.predicted_improvement);
    for (st, r) in f.ratio.iter().enumerate() {
        let cells: Vec<String> = r.iter().map(|x| format!("{x:.4}")).collect();
        let _ = writeln!(s, "s{st:<3} mu {:>10.5}  ratio [{}]", f.mu[st], cells.join(", "));
    }
    if let Some(g) = f.oracle_gap {
        let _ = writeln!(s, "oracle gap {g:.3e}");
    }
    s
}

pub fn cmd_solve(args: &SolveArgs) -> CliResult<()> {
    let bounds = parse_bounds(args.eps, args.c_l, args.c_h, args.lambda)?;
    let mdp = load_mdp(args)?;
    let pi0 = load_policy(args, &mdp)?;
    let file = solution_file(&mdp, &pi0, &bounds, args.oracle)?;
    let text = summary(&file);
    print!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&file).map_err(|e| CliError::Failure(e.to_string()))?;
        std::fs::write(dir.join("solution.json"), json + "\n")?;
        std::fs::write(dir.join("summary.txt"), text)?;
    }
    Ok(())
}

/// One random per-state problem.
#[derive(Debug, Clone, PartialEq)]
pub struct StateInstance {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

/// Instance `index` of the per-state generator: `2..=max_actions` actions,
/// `q ~ U(-1, 1)`, `p ~ Dirichlet(1)`.
pub fn state_instance(seed: u64, index: usize, max_actions: usize) -> StateInstance {
    let mut rng = rng_for(seed, &format!("oracle-check/{index}"));
    let n = rng.random_range(2..=max_actions.max(2));
    let q = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    StateInstance { q, p: dirichlet_ones(&mut rng, n) }
}

pub const ORACLE_LAMBDAS: [f64; 3] = [1e-1, 1e-2, 1e-3];
pub const ORACLE_EPS: [f64; 3] = [0.1, 0.2, 0.3];
pub const ORACLE_BOXES: [(f64, f64); 3] = [(0.0, 2.0), (0.5, 3.0), (0.8, 1.2)];

/// Bounds of instance `index`, cycling through every (λ, box) pair.
pub fn instance_bounds(index: usize, asymmetric: bool) -> RatioBounds {
    let lambda = ORACLE_LAMBDAS[index % 3];
    let j = (index / 3) % 3;
    if asymmetric {
        RatioBounds::asymmetric(ORACLE_BOXES[j].0, ORACLE_BOXES[j].1, lambda).expect("valid box")
    } else {
        RatioBounds::symmetric(ORACLE_EPS[j], lambda).expect("valid eps")
    }
}

/// Largest sup-norm gap between closed form and numeric optimizer, and the worst index.
pub fn oracle_sweep(seed: u64, instances: usize, max_actions: usize, asymmetric: bool) -> CliResult<(f64, usize)> {
    let mut worst = (0.0, 0);
    for i in 0..instances {
        let inst = state_instance(seed, i, max_actions);
        let b = instance_bounds(i, asymmetric);
        let closed = solve_state(&inst.q, &inst.p, &b)?;
        let num = numeric_regularized_state(&inst.q, &inst.p, &b)?;
        let gap = closed.ratio.iter().zip(&num.ratio).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > worst.0 || !gap.is_finite() {
            worst = (gap, i);
        }
    }
    Ok(worst)
}

#[derive(Debug, Args)]
pub struct OracleCheckArgs {
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 20)]
    pub max_actions: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

pub fn cmd_oracle_check(args: &OracleCheckArgs, seed: u64) -> CliResult<()> {
    if args.instances == 0 || args.max_actions < 2 {
        return Err(CliError::Input("need --instances >= 1 and --max-actions >= 2".into()));
    }
    let mut failed = false;
    for (label, asym) in [("symmetric", false), ("asymmetric", true)] {
        let (gap, idx) = oracle_sweep(seed, args.instances, args.max_actions, asym)?;
        let ok = gap <= args.tol;
        failed |= !ok;
        println!("{} {label:<10} instances {} max gap {gap:.3e} (worst index {idx})", if ok { "PASS" } else { "FAIL" }, args.instances);
    }
    if failed {
        return Err(CliError::Failure(format!("oracle gap above {}", args.tol)));
    }
    Ok(())
}
