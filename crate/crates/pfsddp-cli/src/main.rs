//! Command-line front end: instance generation, training, oracle
//! comparison, and policy simulation.
//!
//! Exit codes: 0 success (solve: converged), 2 bad flags or unreadable
//! input, 3 scenario tree too large for the extensive oracle, 4 iteration
//! limit reached without convergence, 5 structural infeasibility, 1 other
//! failures.

use clap::{Args, Parser, Subcommand, ValueEnum};
use pfsddp::cuts::Policy;
use pfsddp::engine::{self, EngineConfig, EngineError, RunReport, StopReason};
use pfsddp::hydro::{self, GenParams, HydroSystem};
use pfsddp::lp::{solve_hierarchical, Hierarchical, LpError};
use pfsddp::model::{load_instance, save_instance, Instance, SolveMode};
use pfsddp::stage::StageError;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "pfsddp", version, about = "Multistage stochastic LP solver with feasibility-cut recursion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a hydrothermal instance (seeded random or named fixture).
    Generate(GenerateArgs),
    /// Train a policy on an instance.
    Solve(SolveArgs),
    /// Run the extensive oracle, classic, and penalty-free training on one
    /// instance and tabulate costs and violations.
    Compare(CompareArgs),
    /// Replay a trained policy and report costs and violations.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Named fixture instead of a random system.
    #[arg(long, value_enum, conflicts_with_all = ["reservoirs", "stages", "thermals", "realizations", "tightness", "seed"])]
    fixture: Option<Fixture>,
    #[arg(long, default_value_t = 1)]
    reservoirs: usize,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, default_value_t = 1)]
    thermals: usize,
    /// Inflow scenarios per stage after the first.
    #[arg(long, default_value_t = 1)]
    realizations: usize,
    /// Minimum-outflow pressure in [0, 1]: 0 omits the rows, 1 provably
    /// exceeds any path's water.
    #[arg(long, default_value_t = 0.5)]
    tightness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instance file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the hydro system description.
    #[arg(long)]
    system_out: Option<PathBuf>,
    /// Solve the extensive oracle and print V*/C*.
    #[arg(long)]
    oracle: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    #[value(name = "toy_feasible")]
    ToyFeasible,
    #[value(name = "toy_infeasible")]
    ToyInfeasible,
    #[value(name = "toy_stochastic")]
    ToyStochastic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PenaltyFree,
    Classic,
}

impl From<ModeArg> for SolveMode {
    fn from(m: ModeArg) -> SolveMode {
        match m {
            ModeArg::PenaltyFree => SolveMode::PenaltyFree,
            ModeArg::Classic => SolveMode::Classic,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::PenaltyFree)]
    mode: ModeArg,
    /// Relative optimality-gap threshold.
    #[arg(long, default_value_t = 0.005)]
    gap: f64,
    /// 0 trains nothing and reports the untrained (myopic) policy.
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Forward paths per iteration (default: 1 deterministic, 20 stochastic;
    /// ignored when the tree is small enough to enumerate).
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace every relaxable row's classic penalty price.
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    policy_out: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Classic penalty price; repeat for several classic rows. Without it,
    /// classic runs at the instance's own prices.
    #[arg(long = "classic-penalty")]
    classic_penalty: Vec<f64>,
    #[arg(long, default_value_t = 0.005)]
    gap: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Comparison report file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    /// Sampled paths (ignored when the tree is small enough to enumerate).
    #[arg(long, default_value_t = 20)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulation report file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Failure {
        Failure { code, message: message.into() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("PFSDDP_LOG", "error"),
    )
    .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read_instance(path: &Path) -> Result<Instance, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::new(2, format!("cannot read {}: {}", path.display(), e)))?;
    load_instance(&bytes).map_err(|e| Failure::new(2, format!("{}: {}", path.display(), e)))
}

fn write_file(path: &Path, content: &str) -> Result<(), Failure> {
    std::fs::write(path, content)
        .map_err(|e| Failure::new(2, format!("cannot write {}: {}", path.display(), e)))
}

fn engine_failure(e: EngineError) -> Failure {
    let code = match &e {
        EngineError::Config(_) => 2,
        EngineError::Stage(StageError::Lp(
            LpError::TreeTooLarge { .. } | LpError::ExtensiveTooLarge { .. },
        )) => 3,
        _ => 1,
    };
    Failure::new(code, e.to_string())
}

fn oracle_failure(e: LpError) -> Failure {
    let code = match &e {
        LpError::TreeTooLarge { .. } | LpError::ExtensiveTooLarge { .. } => 3,
        LpError::ExtensiveInfeasible => 5,
        LpError::NumericalFailure(_) => 1,
    };
    Failure::new(code, e.to_string())
}

// ---------------------------------------------------------------------------

fn cmd_generate(args: GenerateArgs) -> Result<u8, Failure> {
    let system: HydroSystem = match args.fixture {
        Some(Fixture::ToyFeasible) => hydro::toy_feasible(),
        Some(Fixture::ToyInfeasible) => hydro::toy_infeasible(),
        Some(Fixture::ToyStochastic) => hydro::toy_stochastic(),
        None => hydro::generate(&GenParams {
            n_reservoirs: args.reservoirs,
            n_stages: args.stages,
            n_thermals: args.thermals,
            realizations_per_stage: args.realizations,
            hoc_tightness: args.tightness,
            seed: args.seed,
        })
        .map_err(|e| Failure::new(2, e.to_string()))?,
    };
    let instance = system.compile().map_err(|e| Failure::new(2, e.to_string()))?;
    write_file(&args.out, &save_instance(&instance))?;
    println!(
        "wrote {} ({} stages, {} state vars, {} scenario paths)",
        args.out.display(),
        instance.n_stages,
        instance.m,
        instance.leaf_count()
    );
    if let Some(sys_path) = &args.system_out {
        write_file(sys_path, &system.to_json())?;
        println!("wrote {}", sys_path.display());
    }
    if args.oracle {
        let h = solve_hierarchical(&instance).map_err(oracle_failure)?;
        println!("V* = {:.6} (minimum expected weighted violation)", h.v_star);
        println!("C* = {:.6} (minimum expected cost at that violation)", h.c_star);
    }
    Ok(0)
}

// ---------------------------------------------------------------------------

fn print_iteration_log(report: &RunReport) {
    for it in &report.iterations {
        println!(
            "iter {:>4}  z_low {:>14.6}  z_up {:>14.6}  stderr {:>9.2e}  new_feas {:>3}  new_opt {:>3}  fff_root {:>12.6}",
            it.iteration,
            it.z_low,
            it.z_up,
            it.z_up_stderr,
            it.new_feasibility_cuts,
            it.new_optimality_cuts,
            it.fff_at_root
        );
    }
}

fn print_run_summary(report: &RunReport) {
    match report.reason {
        StopReason::GapAndFeasStable => println!(
            "converged after {} iterations (gap {:.3e} within tolerance, no new feasibility cuts)",
            report.iterations.len(),
            report.gap
        ),
        StopReason::MaxIters => println!(
            "stopped at the iteration limit ({}) without convergence (gap {:.3e})",
            report.iterations.len(),
            report.gap
        ),
        StopReason::StructuralInfeasibility => {
            if let Some(d) = &report.structural {
                println!(
                    "structural infeasibility at stage {}, realization {}: {}",
                    d.stage + 1,
                    d.realization + 1,
                    d.hint
                );
                return;
            }
        }
    }
    println!(
        "z_low {:.6}   z_up {:.6} +- {:.6}   fff_at_root {:.6}",
        report.z_low, report.z_up, report.z_up_stderr, report.fff_at_root
    );
    println!(
        "operation cost {:.6}   penalty cost {:.6}   weighted violation {:.6}",
        report.operation_cost, report.penalty_cost, report.total_weighted_violation
    );
    if !report.violation_summary.is_empty() {
        println!("violations (expected / weighted):");
        for v in &report.violation_summary {
            println!(
                "  stage {:>2}  {:<24} {:>12.6} {:>12.6}",
                v.stage + 1,
                v.label,
                v.expected_slack,
                v.expected_weighted_slack
            );
        }
    }
    let fs: Vec<String> =
        report.first_stage_decision.iter().map(|x| format!("{:.6}", x)).collect();
    println!("first stage decision: [{}]", fs.join(", "));
}

fn cmd_solve(args: SolveArgs) -> Result<u8, Failure> {
    let mut instance = read_instance(&args.instance)?;
    if let Some(p) = args.penalty {
        if !(p.is_finite() && p >= 0.0) {
            return Err(Failure::new(2, format!("--penalty must be a nonnegative number, got {p}")));
        }
        instance = instance.with_penalty_override(p);
    }
    let mut config = EngineConfig::new(args.mode.into());
    config.gap_epsilon = args.gap;
    config.max_iters = args.max_iters;
    config.n_forward_paths = args.paths;
    config.seed = args.seed;
    config.threads = args.threads;

    let out = engine::run(&instance, &config).map_err(engine_failure)?;
    print_iteration_log(&out.report);
    println!("instance {}  mode {}", out.report.instance_name, out.report.mode);
    print_run_summary(&out.report);

    if let Some(path) = &args.policy_out {
        out.policy
            .save(path)
            .map_err(|e| Failure::new(2, format!("cannot write {}: {}", path.display(), e)))?;
        println!("wrote policy {}", path.display());
    }
    if let Some(path) = &args.report_out {
        write_file(path, &out.report.to_json())?;
        println!("wrote report {}", path.display());
    }
    Ok(match out.report.reason {
        StopReason::GapAndFeasStable => 0,
        StopReason::MaxIters => 4,
        StopReason::StructuralInfeasibility => 5,
    })
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct MethodRow {
    method: String,
    /// Expected cost in currency, penalties excluded.
    operation_cost: f64,
    /// Expected weighted slack, the violation measure shared by all methods.
    violation_cost: f64,
    /// Classic mode's penalty spend (0 elsewhere); reported, never folded
    /// into the cost column.
    penalty_cost: f64,
    iterations: usize,
    wall_time_ms: f64,
}

#[derive(Serialize)]
struct MethodViolation {
    method: String,
    stage: usize,
    label: String,
    expected_slack: f64,
    expected_weighted_slack: f64,
}

#[derive(Serialize)]
struct CompareReport {
    instance: String,
    gap: f64,
    seed: u64,
    rows: Vec<MethodRow>,
    violations: Vec<MethodViolation>,
}

/// Expected raw/weighted slack per (stage, label) from the oracle solution.
fn extensive_violations(instance: &Instance, h: &Hierarchical) -> Vec<(usize, String, f64, f64)> {
    let mut agg: std::collections::BTreeMap<(usize, String), (f64, f64)> =
        std::collections::BTreeMap::new();
    for (node, slacks) in h.nodes.iter().zip(&h.node_slacks) {
        let stage = &instance.stages[node.stage];
        let labels: Vec<(&String, f64)> = stage
            .rows
            .iter()
            .filter(|r| r.relaxable)
            .map(|r| (&r.label, r.slack_weight.unwrap_or(1.0)))
            .collect();
        for (slot, &s) in slacks.iter().enumerate() {
            let (label, w) = labels[slot];
            let e = agg.entry((node.stage, label.clone())).or_insert((0.0, 0.0));
            e.0 += node.probability * s;
            e.1 += node.probability * s * w;
        }
    }
    agg.into_iter().map(|((t, l), (raw, wtd))| (t, l, raw, wtd)).collect()
}

fn cmd_compare(args: CompareArgs) -> Result<u8, Failure> {
    let instance = read_instance(&args.instance)?;
    let mut rows = Vec::new();
    let mut violations = Vec::new();

    let started = Instant::now();
    let h = solve_hierarchical(&instance).map_err(oracle_failure)?;
    rows.push(MethodRow {
        method: "extensive".into(),
        operation_cost: h.c_star,
        violation_cost: h.v_star,
        penalty_cost: 0.0,
        iterations: 0,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    });
    for (stage, label, raw, wtd) in extensive_violations(&instance, &h) {
        violations.push(MethodViolation {
            method: "extensive".into(),
            stage,
            label,
            expected_slack: raw,
            expected_weighted_slack: wtd,
        });
    }

    let run_method = |method: String,
                          mode: SolveMode,
                          inst: &Instance,
                          rows: &mut Vec<MethodRow>,
                          violations: &mut Vec<MethodViolation>|
     -> Result<(), Failure> {
        let mut config = EngineConfig::new(mode);
        config.gap_epsilon = args.gap;
        config.max_iters = args.max_iters;
        config.n_forward_paths = args.paths;
        config.seed = args.seed;
        config.threads = args.threads;
        let out = engine::run(inst, &config).map_err(engine_failure)?;
        rows.push(MethodRow {
            method: method.clone(),
            operation_cost: out.report.operation_cost,
            violation_cost: out.report.total_weighted_violation,
            penalty_cost: out.report.penalty_cost,
            iterations: out.report.iterations.len(),
            wall_time_ms: out.report.total_wall_time_ms,
        });
        for v in &out.report.violation_summary {
            violations.push(MethodViolation {
                method: method.clone(),
                stage: v.stage,
                label: v.label.clone(),
                expected_slack: v.expected_slack,
                expected_weighted_slack: v.expected_weighted_slack,
            });
        }
        Ok(())
    };

    if args.classic_penalty.is_empty() {
        run_method("classic".into(), SolveMode::Classic, &instance, &mut rows, &mut violations)?;
    } else {
        for &p in &args.classic_penalty {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Failure::new(2, format!("--classic-penalty must be nonnegative, got {p}")));
            }
            let inst = instance.with_penalty_override(p);
            run_method(
                format!("classic(p={})", p),
                SolveMode::Classic,
                &inst,
                &mut rows,
                &mut violations,
            )?;
        }
    }
    run_method("penalty_free".into(), SolveMode::PenaltyFree, &instance, &mut rows, &mut violations)?;

    println!(
        "{:<18} {:>14} {:>14} {:>14} {:>6} {:>10}",
        "method", "op_cost", "violation", "penalty_cost", "iters", "ms"
    );
    for r in &rows {
        println!(
            "{:<18} {:>14.6} {:>14.6} {:>14.6} {:>6} {:>10.1}",
            r.method, r.operation_cost, r.violation_cost, r.penalty_cost, r.iterations, r.wall_time_ms
        );
    }
    // Text table only: hide rows below the feasibility tolerance (the
    // oracle's budget pass leaves ~1e-7 of phantom slack). The JSON report
    // keeps every row.
    let nonzero: Vec<&MethodViolation> =
        violations.iter().filter(|v| v.expected_weighted_slack.abs() > 1e-6).collect();
    if !nonzero.is_empty() {
        println!("violations (expected / weighted):");
        for v in nonzero {
            println!(
                "  {:<18} stage {:>2}  {:<24} {:>12.6} {:>12.6}",
                v.method,
                v.stage + 1,
                v.label,
                v.expected_slack,
                v.expected_weighted_slack
            );
        }
    }

    if let Some(path) = &args.out {
        let report = CompareReport {
            instance: instance.name.clone(),
            gap: args.gap,
            seed: args.seed,
            rows,
            violations,
        };
        let mut text = serde_json::to_string_pretty(&report)
            .map_err(|e| Failure::new(1, e.to_string()))?;
        text.push('\n');
        write_file(path, &text)?;
        println!("wrote comparison {}", path.display());
    }
    Ok(0)
}

// ---------------------------------------------------------------------------

fn cmd_simulate(args: SimulateArgs) -> Result<u8, Failure> {
    let instance = read_instance(&args.instance)?;
    let policy = Policy::load(&args.policy).map_err(|e| Failure::new(2, e.to_string()))?;
    if args.paths == 0 {
        return Err(Failure::new(2, "--paths must be at least 1"));
    }
    let sim = engine::simulate(&instance, &policy, args.paths, args.seed)
        .map_err(engine_failure)?;

    println!(
        "instance {}  policy mode {}  paths {}{}",
        instance.name,
        policy.mode,
        sim.n_paths,
        if sim.enumerated { " (enumerated)" } else { "" }
    );
    println!(
        "mean cost {:.6} +- {:.6}   operation {:.6}   penalties {:.6}",
        sim.mean_cost, sim.stderr, sim.mean_operation_cost, sim.mean_penalty_cost
    );
    println!("total weighted violation {:.6}", sim.total_weighted_violation);
    if !sim.violation_summary.is_empty() {
        println!("violations (expected / weighted):");
        for v in &sim.violation_summary {
            println!(
                "  stage {:>2}  {:<24} {:>12.6} {:>12.6}",
                v.stage + 1,
                v.label,
                v.expected_slack,
                v.expected_weighted_slack
            );
        }
    }
    let fs: Vec<String> = sim.first_stage_decision.iter().map(|x| format!("{:.6}", x)).collect();
    println!("first stage decision: [{}]", fs.join(", "));

    if let Some(path) = &args.out {
        let mut text =
            serde_json::to_string_pretty(&sim).map_err(|e| Failure::new(1, e.to_string()))?;
        text.push('\n');
        write_file(path, &text)?;
        println!("wrote simulation report {}", path.display());
    }
    Ok(0)
}
