//! Training loop: forward sampling, backward cut generation, bound
//! tracking, and the two-part stopping rule (optimality gap closed AND no
//! new feasibility cuts anywhere).
//!
//! Determinism contract: given the same instance and configuration, every
//! run produces an identical report and policy, regardless of thread count.
//! Parallel sections collect per-subproblem results in a fixed order and
//! apply all pool mutations sequentially, so concurrency never changes
//! arithmetic.

use crate::cuts::{expected_cut, Cut, CutError, CutOrigin, CutSource, Policy};
use crate::model::{Instance, SolveMode, StageData};
use crate::stage::{solve_classic, solve_feasibility, solve_optimality, StageError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

/// Scenario trees with at most this many leaves are enumerated exhaustively
/// in forward passes and simulations (probability-exact bounds, zero
/// standard error) instead of Monte Carlo sampling.
pub const MAX_ENUMERATED_PATHS: u64 = 64;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Cut(#[from] CutError),
}

/// Knobs of one training run.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub mode: SolveMode,
    pub max_iters: usize,
    /// Relative optimality-gap threshold `|Z_up - Z_low| / max(1, |Z_up|)`.
    pub gap_epsilon: f64,
    /// Cut novelty tolerance; also the scale for "no new feasibility cuts".
    pub feas_tol: f64,
    /// Forward paths per iteration when sampling. `None` resolves to 1 on
    /// deterministic instances and 20 otherwise; ignored when the tree is
    /// small enough to enumerate.
    pub n_forward_paths: Option<usize>,
    pub seed: u64,
    /// Floor for the future-cost epigraph while its pool is empty.
    pub theta_lower_bound: f64,
    /// Multiplier for the reported upper-bound confidence halfwidth.
    pub confidence_z: f64,
    /// 1 = fully sequential; larger values solve independent subproblems
    /// on a thread pool of that size (results are identical either way).
    pub threads: usize,
}

impl EngineConfig {
    pub fn new(mode: SolveMode) -> EngineConfig {
        EngineConfig {
            mode,
            max_iters: 200,
            gap_epsilon: 0.005,
            feas_tol: 1e-6,
            n_forward_paths: None,
            seed: 0,
            theta_lower_bound: 0.0,
            confidence_z: 1.96,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Gap closed and the backward pass generated no feasibility cut.
    GapAndFeasStable,
    MaxIters,
    StructuralInfeasibility,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub z_low: f64,
    pub z_up: f64,
    pub z_up_stderr: f64,
    pub new_feasibility_cuts: usize,
    pub new_optimality_cuts: usize,
    /// Violation-to-go approximation at the initial state after this
    /// iteration's cuts.
    pub fff_at_root: f64,
    pub wall_time_ms: f64,
}

/// Per (stage, row label) slack accounting from a simulation, in
/// probability-weighted units. `stage` is 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEntry {
    pub stage: usize,
    pub label: String,
    pub expected_slack: f64,
    pub expected_weighted_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralDiag {
    pub stage: usize,
    pub realization: usize,
    pub hint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub instance_name: String,
    pub mode: SolveMode,
    pub converged: bool,
    pub reason: StopReason,
    pub iterations: Vec<IterationStats>,
    /// Root-problem optimum under the final pools.
    pub z_low: f64,
    /// Final-policy simulation: expected operation cost, penalties included
    /// in classic mode only.
    pub z_up: f64,
    pub z_up_stderr: f64,
    pub gap: f64,
    pub first_stage_decision: Vec<f64>,
    pub fff_at_root: f64,
    /// Expected operation cost of the final simulation (never includes
    /// penalties or slack pricing).
    pub operation_cost: f64,
    /// Expected penalty spend of the final simulation (classic mode; 0
    /// in penalty-free mode).
    pub penalty_cost: f64,
    pub total_weighted_violation: f64,
    pub violation_summary: Vec<ViolationEntry>,
    pub fcf_cuts: usize,
    pub fff_cuts: usize,
    pub n_paths: usize,
    pub enumerated_paths: bool,
    pub structural: Option<StructuralDiag>,
    pub total_wall_time_ms: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Removes every wall-time field (keys containing `wall_time`) in place, so
/// reports from separate runs can be compared byte for byte.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !k.contains("wall_time"));
            for v in map.values_mut() {
                strip_timing(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items.iter_mut() {
                strip_timing(v);
            }
        }
        _ => {}
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub policy: Policy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSummary {
    pub realizations: Vec<usize>,
    /// Path probability under enumeration, `1/n` under sampling.
    pub weight: f64,
    pub op_cost: f64,
    pub penalty_cost: f64,
    /// Raw slack summed over all stages and relaxable rows of this path.
    pub total_slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub n_paths: usize,
    pub enumerated: bool,
    /// Expected operation cost (plus penalties in classic mode).
    pub mean_cost: f64,
    pub stderr: f64,
    pub mean_operation_cost: f64,
    pub mean_penalty_cost: f64,
    pub total_weighted_violation: f64,
    pub violation_summary: Vec<ViolationEntry>,
    pub per_path: Vec<PathSummary>,
    pub first_stage_decision: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Forward machinery.

#[derive(Debug, Clone)]
struct PathTrace {
    realizations: Vec<usize>,
    weight: f64,
    op_cost: f64,
    penalty_cost: f64,
    /// Raw slack per stage per relaxable row (row order).
    stage_slacks: Vec<Vec<f64>>,
    outgoing_states: Vec<Vec<f64>>,
    first_stage_decision: Vec<f64>,
}

fn relaxable_row_indices(stage: &StageData) -> Vec<usize> {
    stage.rows.iter().enumerate().filter(|(_, r)| r.relaxable).map(|(i, _)| i).collect()
}

/// All root-to-leaf realization paths with their probabilities.
fn enumerate_paths(instance: &Instance) -> Vec<(Vec<usize>, f64)> {
    let mut acc: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    for stage in &instance.stages {
        let mut next = Vec::with_capacity(acc.len() * stage.realizations.len());
        for (path, p) in &acc {
            for (k, real) in stage.realizations.iter().enumerate() {
                let mut q = path.clone();
                q.push(k);
                next.push((q, p * real.probability));
            }
        }
        acc = next;
    }
    acc
}

fn sample_realization(stage: &StageData, rng: &mut ChaCha8Rng) -> usize {
    if stage.realizations.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, real) in stage.realizations.iter().enumerate() {
        acc += real.probability;
        if u < acc {
            return k;
        }
    }
    stage.realizations.len() - 1
}

/// One sampled path per index, on independent, reproducible PRNG streams.
fn sample_paths(instance: &Instance, seed: u64, stream_base: u64, n: usize) -> Vec<(Vec<usize>, f64)> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base | i as u64);
            let ks = instance.stages.iter().map(|s| sample_realization(s, &mut rng)).collect();
            (ks, 1.0 / n as f64)
        })
        .collect()
}

/// Runs the policy down one realization path, solving the mode's stage
/// problems in sequence.
fn forward_one(
    instance: &Instance,
    policy: &Policy,
    mode: SolveMode,
    theta_lb: f64,
    iteration: usize,
    ks: &[usize],
    weight: f64,
) -> Result<PathTrace, StageError> {
    let n_stages = instance.n_stages;
    let mut x_prev = instance.initial_state.clone();
    let mut trace = PathTrace {
        realizations: ks.to_vec(),
        weight,
        op_cost: 0.0,
        penalty_cost: 0.0,
        stage_slacks: Vec::with_capacity(n_stages),
        outgoing_states: Vec::with_capacity(n_stages),
        first_stage_decision: Vec::new(),
    };
    for t in 0..n_stages {
        let k = ks[t];
        let origin = CutOrigin {
            stage: t,
            iteration,
            source: CutSource::Realization(k),
            trial_state_id: 0,
        };
        let fcf_next = policy.fcf.get(t + 1);
        let fff_next = policy.fff.get(t + 1);
        let o = match mode {
            SolveMode::PenaltyFree => {
                let f = solve_feasibility(instance, t, k, &x_prev, fff_next, origin)?;
                solve_optimality(
                    instance, t, k, &x_prev, fcf_next, fff_next, &f.s_star, f.beta_star, theta_lb,
                    origin,
                )?
            }
            SolveMode::Classic => {
                solve_classic(instance, t, k, &x_prev, fcf_next, theta_lb, origin)?
            }
        };
        trace.op_cost += o.stage_cost;
        if mode == SolveMode::Classic {
            let stage = &instance.stages[t];
            for (slot, &i) in relaxable_row_indices(stage).iter().enumerate() {
                trace.penalty_cost +=
                    o.slacks_used[slot] * stage.rows[i].penalty_weight.unwrap_or(0.0);
            }
        }
        if t == 0 {
            trace.first_stage_decision = o.x_t.clone();
        }
        trace.stage_slacks.push(o.slacks_used.clone());
        trace.outgoing_states.push(o.outgoing_state.clone());
        x_prev = o.outgoing_state;
    }
    Ok(trace)
}

fn run_forward(
    instance: &Instance,
    policy: &Policy,
    mode: SolveMode,
    theta_lb: f64,
    iteration: usize,
    paths: &[(Vec<usize>, f64)],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<PathTrace>, StageError> {
    let solve = |(ks, w): &(Vec<usize>, f64)| {
        forward_one(instance, policy, mode, theta_lb, iteration, ks, *w)
    };
    let results: Vec<Result<PathTrace, StageError>> = match pool {
        Some(p) => p.install(|| paths.par_iter().map(solve).collect()),
        None => paths.iter().map(solve).collect(),
    };
    // Surface the first error in path order so parallel runs fail
    // identically to sequential ones.
    results.into_iter().collect()
}

/// Path-cost mean and standard error. Enumerated paths carry exact
/// probabilities (stderr 0); sampled paths are equally weighted.
fn cost_stats(traces: &[PathTrace], enumerated: bool, include_penalty: bool) -> (f64, f64) {
    let totals: Vec<f64> = traces
        .iter()
        .map(|tr| tr.op_cost + if include_penalty { tr.penalty_cost } else { 0.0 })
        .collect();
    if enumerated {
        let mean = traces.iter().zip(&totals).map(|(tr, c)| tr.weight * c).sum();
        (mean, 0.0)
    } else {
        let n = totals.len();
        let mean = totals.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return (mean, 0.0);
        }
        let var = totals.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    }
}

fn dedup_push(states: &mut Vec<Vec<f64>>, candidate: &[f64]) {
    let close = states.iter().any(|s| {
        s.iter().zip(candidate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= 1e-18
    });
    if !close {
        states.push(candidate.to_vec());
    }
}

/// Incoming trial states per stage: `trials[0]` is the initial state, and
/// `trials[t]` collects the distinct outgoing states of stage `t - 1`.
fn collect_trials(instance: &Instance, traces: &[PathTrace]) -> Vec<Vec<Vec<f64>>> {
    let n_stages = instance.n_stages;
    let mut trials = vec![Vec::new(); n_stages];
    trials[0].push(instance.initial_state.clone());
    for tr in traces {
        for t in 1..n_stages {
            dedup_push(&mut trials[t], &tr.outgoing_states[t - 1]);
        }
    }
    trials
}

// ---------------------------------------------------------------------------
// Backward machinery.

struct SolveBundle {
    sid: usize,
    prob: f64,
    feas_cut: Option<Cut>,
    opt_cut: Cut,
    /// Root objective, captured for the lower bound at stage 0.
    objective: f64,
}

struct BackwardOutcome {
    n_new_feas: usize,
    n_new_opt: usize,
    z_low: f64,
    fff_at_root: f64,
}

/// One backward sweep, last stage to first. Per stage, every (trial state,
/// realization) subproblem is solved against the *downstream* pools, then
/// the resulting cuts are inserted into this stage's pools in a fixed
/// order; stage-t solves never read stage-t pools, so batching the solves
/// is exactly equivalent to the sequential reference.
fn backward_pass(
    instance: &Instance,
    policy: &mut Policy,
    trials: &[Vec<Vec<f64>>],
    iteration: usize,
    config: &EngineConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BackwardOutcome, EngineError> {
    let n_stages = instance.n_stages;
    let mut n_new_feas = 0;
    let mut n_new_opt = 0;
    let mut z_low = f64::NAN;

    for t in (0..n_stages).rev() {
        let nk = instance.stages[t].realizations.len();
        let pairs: Vec<(usize, usize)> =
            (0..trials[t].len()).flat_map(|sid| (0..nk).map(move |k| (sid, k))).collect();

        let solve_one = |&(sid, k): &(usize, usize)| -> Result<SolveBundle, StageError> {
            let x = &trials[t][sid];
            let fcf_next = policy.fcf.get(t + 1);
            let fff_next = policy.fff.get(t + 1);
            let prob = instance.stages[t].realizations[k].probability;
            match config.mode {
                SolveMode::PenaltyFree => {
                    let origin = CutOrigin {
                        stage: t,
                        iteration,
                        source: CutSource::Realization(k),
                        trial_state_id: sid,
                    };
                    let f = solve_feasibility(instance, t, k, x, fff_next, origin)?;
                    let o = solve_optimality(
                        instance,
                        t,
                        k,
                        x,
                        fcf_next,
                        fff_next,
                        &f.s_star,
                        f.beta_star,
                        config.theta_lower_bound,
                        origin,
                    )?;
                    Ok(SolveBundle {
                        sid,
                        prob,
                        feas_cut: Some(f.cut),
                        opt_cut: o.cut,
                        objective: o.objective_value,
                    })
                }
                SolveMode::Classic => {
                    let origin = CutOrigin {
                        stage: t,
                        iteration,
                        source: CutSource::Realization(k),
                        trial_state_id: sid,
                    };
                    let o = solve_classic(
                        instance,
                        t,
                        k,
                        x,
                        fcf_next,
                        config.theta_lower_bound,
                        origin,
                    )?;
                    Ok(SolveBundle {
                        sid,
                        prob,
                        feas_cut: None,
                        opt_cut: o.cut,
                        objective: o.objective_value,
                    })
                }
            }
        };

        let results: Vec<Result<SolveBundle, StageError>> = match pool {
            Some(p) => p.install(|| pairs.par_iter().map(solve_one).collect()),
            None => pairs.iter().map(solve_one).collect(),
        };

        // Insert cuts in (trial state, realization) order.
        let mut per_sid: Vec<Vec<(f64, Cut)>> = vec![Vec::with_capacity(nk); trials[t].len()];
        for res in results {
            let bundle = res?;
            if let Some(cut) = bundle.feas_cut {
                let x = &trials[t][bundle.sid];
                if policy.fff[t].add_if_novel(cut, x, config.feas_tol)? {
                    n_new_feas += 1;
                }
            }
            if t == 0 {
                z_low = bundle.objective;
            }
            per_sid[bundle.sid].push((bundle.prob, bundle.opt_cut));
        }
        for (sid, cuts) in per_sid.into_iter().enumerate() {
            let agg = expected_cut(&cuts)?;
            if policy.fcf[t].add_if_novel(agg, &trials[t][sid], config.feas_tol)? {
                n_new_opt += 1;
            }
        }
    }

    let fff_at_root = policy.fff[0].evaluate(&instance.initial_state)?;
    debug_assert!(z_low.is_finite(), "stage 0 must produce the lower bound");
    Ok(BackwardOutcome { n_new_feas, n_new_opt, z_low, fff_at_root })
}

// ---------------------------------------------------------------------------
// Public operations.

/// Root-problem optimum under the current pools: the lower bound `Z_low`.
pub fn lower_bound(instance: &Instance, policy: &Policy, theta_lb: f64) -> Result<f64, EngineError> {
    let origin =
        CutOrigin { stage: 0, iteration: 0, source: CutSource::Realization(0), trial_state_id: 0 };
    let x0 = &instance.initial_state;
    let o = match policy.mode {
        SolveMode::PenaltyFree => {
            let f = solve_feasibility(instance, 0, 0, x0, policy.fff.get(1), origin)?;
            solve_optimality(
                instance,
                0,
                0,
                x0,
                policy.fcf.get(1),
                policy.fff.get(1),
                &f.s_star,
                f.beta_star,
                theta_lb,
                origin,
            )?
        }
        SolveMode::Classic => {
            solve_classic(instance, 0, 0, x0, policy.fcf.get(1), theta_lb, origin)?
        }
    };
    Ok(o.objective_value)
}

/// Policy-cost estimate `Z_up`: exact (probability-weighted, stderr 0) when
/// the tree is enumerable, otherwise a sample mean over `n_paths` seeded
/// paths. Slack contributes no cost in penalty-free mode; classic mode
/// includes its penalty spend.
pub fn upper_bound(
    instance: &Instance,
    policy: &Policy,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64), EngineError> {
    let sim = simulate(instance, policy, n_paths, seed)?;
    Ok((sim.mean_cost, sim.stderr))
}

/// Replays the trained policy over enumerated or sampled paths and accounts
/// costs and violations separately.
pub fn simulate(
    instance: &Instance,
    policy: &Policy,
    n_paths: usize,
    seed: u64,
) -> Result<SimulationReport, EngineError> {
    if n_paths == 0 {
        return Err(EngineError::Config("n_paths must be at least 1".into()));
    }
    let enumerated = instance.leaf_count() <= MAX_ENUMERATED_PATHS;
    let paths = if enumerated {
        enumerate_paths(instance)
    } else {
        sample_paths(instance, seed, 0, n_paths)
    };
    let traces = run_forward(instance, policy, policy.mode, 0.0, 0, &paths, None)
        .map_err(EngineError::Stage)?;
    Ok(summarize_simulation(instance, policy.mode, &traces, enumerated))
}

fn summarize_simulation(
    instance: &Instance,
    mode: SolveMode,
    traces: &[PathTrace],
    enumerated: bool,
) -> SimulationReport {
    let include_penalty = mode == SolveMode::Classic;
    let (mean_cost, stderr) = cost_stats(traces, enumerated, include_penalty);
    let (mean_op, _) = cost_stats(traces, enumerated, false);
    let mean_penalty = if include_penalty { mean_cost - mean_op } else { 0.0 };

    // (stage, label) -> (expected raw slack, expected weighted slack).
    let mut agg: BTreeMap<(usize, String), (f64, f64)> = BTreeMap::new();
    for tr in traces {
        for (t, slacks) in tr.stage_slacks.iter().enumerate() {
            let stage = &instance.stages[t];
            for (slot, &i) in relaxable_row_indices(stage).iter().enumerate() {
                let row = &stage.rows[i];
                let e = agg.entry((t, row.label.clone())).or_insert((0.0, 0.0));
                e.0 += tr.weight * slacks[slot];
                e.1 += tr.weight * slacks[slot] * row.slack_weight.unwrap_or(1.0);
            }
        }
    }
    let violation_summary: Vec<ViolationEntry> = agg
        .into_iter()
        .map(|((stage, label), (raw, weighted))| ViolationEntry {
            stage,
            label,
            expected_slack: raw,
            expected_weighted_slack: weighted,
        })
        .collect();
    let total_weighted_violation =
        violation_summary.iter().map(|v| v.expected_weighted_slack).sum();

    let per_path = traces
        .iter()
        .map(|tr| PathSummary {
            realizations: tr.realizations.clone(),
            weight: tr.weight,
            op_cost: tr.op_cost,
            penalty_cost: tr.penalty_cost,
            total_slack: tr.stage_slacks.iter().flatten().sum(),
        })
        .collect();

    SimulationReport {
        n_paths: traces.len(),
        enumerated,
        mean_cost,
        stderr,
        mean_operation_cost: mean_op,
        mean_penalty_cost: mean_penalty,
        total_weighted_violation,
        violation_summary,
        per_path,
        first_stage_decision: traces
            .first()
            .map(|tr| tr.first_stage_decision.clone())
            .unwrap_or_default(),
    }
}

/// Trains a policy on `instance` under `config`.
///
/// Structural infeasibility (inconsistent non-relaxable rows) ends the run
/// with a diagnostic report rather than an error; genuine violations of
/// relaxable rows are a converging outcome, visible as `fff_at_root > 0`.
/// `max_iters` 0 is allowed and yields the untrained (myopic) policy with
/// its simulation report.
pub fn run(instance: &Instance, config: &EngineConfig) -> Result<RunOutcome, EngineError> {
    if config.gap_epsilon <= 0.0 {
        return Err(EngineError::Config("gap_epsilon must be positive".into()));
    }
    if config.n_forward_paths == Some(0) {
        return Err(EngineError::Config("n_forward_paths must be at least 1".into()));
    }
    if config.mode == SolveMode::Classic {
        for (t, stage) in instance.stages.iter().enumerate() {
            for row in &stage.rows {
                if row.relaxable && row.penalty_weight.is_none() {
                    return Err(EngineError::Config(format!(
                        "classic mode needs a penalty weight on relaxable row '{}' (stage {})",
                        row.label,
                        t + 1
                    )));
                }
            }
        }
    }

    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| EngineError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let pool = pool.as_ref();

    let n_paths = config
        .n_forward_paths
        .unwrap_or(if instance.is_deterministic() { 1 } else { 20 });
    let enumerated = instance.leaf_count() <= MAX_ENUMERATED_PATHS;
    let enum_paths = enumerated.then(|| enumerate_paths(instance));

    let mut policy = Policy::new(&instance.name, config.mode, instance.n_stages, instance.m);
    let mut iterations: Vec<IterationStats> = Vec::new();
    let mut converged = false;
    let mut reason = StopReason::MaxIters;
    let mut structural = None;
    let run_start = Instant::now();

    for iter in 1..=config.max_iters {
        let iter_start = Instant::now();
        let paths = match &enum_paths {
            Some(p) => p.clone(),
            None => sample_paths(instance, config.seed, (iter as u64) << 32, n_paths),
        };

        let traces = match run_forward(
            instance,
            &policy,
            config.mode,
            config.theta_lower_bound,
            iter,
            &paths,
            pool,
        ) {
            Ok(traces) => traces,
            Err(StageError::StructuralInfeasibility { stage, realization, hint }) => {
                structural = Some(StructuralDiag { stage, realization, hint });
                reason = StopReason::StructuralInfeasibility;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let (z_up, z_up_stderr) =
            cost_stats(&traces, enumerated, config.mode == SolveMode::Classic);

        let trials = collect_trials(instance, &traces);
        let back = match backward_pass(instance, &mut policy, &trials, iter, config, pool) {
            Ok(b) => b,
            Err(EngineError::Stage(StageError::StructuralInfeasibility {
                stage,
                realization,
                hint,
            })) => {
                structural = Some(StructuralDiag { stage, realization, hint });
                reason = StopReason::StructuralInfeasibility;
                break;
            }
            Err(e) => return Err(e),
        };

        let gap = relative_gap(z_up, back.z_low);
        iterations.push(IterationStats {
            iteration: iter,
            z_low: back.z_low,
            z_up,
            z_up_stderr,
            new_feasibility_cuts: back.n_new_feas,
            new_optimality_cuts: back.n_new_opt,
            fff_at_root: back.fff_at_root,
            wall_time_ms: iter_start.elapsed().as_secs_f64() * 1e3,
        });
        log::info!(
            "iter {:>3}: z_low {:.6} z_up {:.6} stderr {:.2e} gap {:.2e} new_feas {} new_opt {} fff_root {:.6}",
            iter,
            back.z_low,
            z_up,
            z_up_stderr,
            gap,
            back.n_new_feas,
            back.n_new_opt,
            back.fff_at_root
        );

        let feas_stable = config.mode == SolveMode::Classic || back.n_new_feas == 0;
        if feas_stable && gap <= config.gap_epsilon {
            converged = true;
            reason = StopReason::GapAndFeasStable;
            break;
        }
    }

    // Final-policy simulation for the reported bound and violations.
    let sim = if structural.is_none() {
        match simulate(instance, &policy, n_paths, config.seed) {
            Ok(sim) => Some(sim),
            Err(EngineError::Stage(StageError::StructuralInfeasibility {
                stage,
                realization,
                hint,
            })) => {
                structural = Some(StructuralDiag { stage, realization, hint });
                reason = StopReason::StructuralInfeasibility;
                converged = false;
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let z_low = match iterations.last() {
        Some(s) => s.z_low,
        // Untrained run: the root problem under empty pools is still a
        // valid lower bound.
        None if structural.is_none() => {
            lower_bound(instance, &policy, config.theta_lower_bound)?
        }
        None => 0.0,
    };
    let (z_up, z_up_stderr) = sim.as_ref().map_or((0.0, 0.0), |s| (s.mean_cost, s.stderr));
    let fff_at_root = policy.fff[0].evaluate(&instance.initial_state)?;
    let (fcf_cuts, fff_cuts) = policy.cut_counts();
    let report = RunReport {
        instance_name: instance.name.clone(),
        mode: config.mode,
        converged,
        reason,
        z_low,
        z_up,
        z_up_stderr,
        gap: if sim.is_some() { relative_gap(z_up, z_low) } else { 0.0 },
        first_stage_decision: sim
            .as_ref()
            .map(|s| s.first_stage_decision.clone())
            .unwrap_or_default(),
        fff_at_root,
        operation_cost: sim.as_ref().map_or(0.0, |s| s.mean_operation_cost),
        penalty_cost: sim.as_ref().map_or(0.0, |s| s.mean_penalty_cost),
        total_weighted_violation: sim.as_ref().map_or(0.0, |s| s.total_weighted_violation),
        violation_summary: sim.as_ref().map(|s| s.violation_summary.clone()).unwrap_or_default(),
        fcf_cuts,
        fff_cuts,
        n_paths: sim.as_ref().map_or(0, |s| s.n_paths),
        enumerated_paths: enumerated,
        structural,
        iterations,
        total_wall_time_ms: run_start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(RunOutcome { report, policy })
}

fn relative_gap(z_up: f64, z_low: f64) -> f64 {
    (z_up - z_low).abs() / 1f64.max(z_up.abs())
}
