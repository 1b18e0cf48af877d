//! Stage subproblem assembly and cut extraction.
//!
//! Three subproblem families share one assembler:
//! * the feasibility problem: minimize weighted slack plus the downstream
//!   violation epigraph `beta`, yielding the slack caps `s*`, `beta*` and a
//!   feasibility cut;
//! * the optimality problem: minimize stage cost plus the future-cost
//!   epigraph `theta`, with slacks capped at `s*` and `beta` capped at
//!   `beta*` — slack carries no objective term;
//! * the classic penalized problem: minimize stage cost plus penalty-priced
//!   slack plus `theta`, slacks unbounded.
//!
//! Cut gradients come from the duals of the stage rows through the state
//! coupling: for value `v(x_prev)` of an LP whose rows read
//! `A x >= b - D x_prev`, the subgradient is `-D^T lambda`.

use crate::cuts::{Cut, CutKind, CutOrigin, CutPool};
use crate::lp::{solve_lp, LinearProgram, LpError, LpRow, LpSense, LpSolution, LpStatus};
use crate::model::{effective_rhs, Instance, ModelError, RowSense};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StageError {
    /// The stage LP is infeasible even with every relaxable slack free:
    /// the non-relaxable rows are mutually inconsistent. A data error,
    /// fundamentally different from a positive minimum violation.
    #[error("stage {}, realization {}: non-relaxable rows are inconsistent ({hint})", .stage + 1, .realization + 1)]
    StructuralInfeasibility { stage: usize, realization: usize, hint: String },
    /// The capped optimality problem came back infeasible. The feasibility
    /// problem's own optimum satisfies its caps, so this can only mean an
    /// assembly or kernel defect.
    #[error("stage {}, realization {}: capped optimality problem infeasible: {context}", .stage + 1, .realization + 1)]
    DefensiveInfeasible { stage: usize, realization: usize, context: String },
    #[error("relaxable row '{label}' has no penalty weight; the classic formulation requires one")]
    MissingPenalty { label: String },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Column/row map of an assembled stage LP.
#[derive(Debug, Clone)]
pub struct StageLayout {
    /// Stage decision variables occupy columns `0..n_vars`.
    pub n_vars: usize,
    /// Stage rows occupy LP rows `0..n_stage_rows` in instance order.
    pub n_stage_rows: usize,
    /// Stage-row index of each relaxable row, in row order.
    pub slack_rows: Vec<usize>,
    /// LP column of each relaxable row's slack, parallel to `slack_rows`.
    pub slack_cols: Vec<usize>,
    pub beta_col: Option<usize>,
    pub theta_col: Option<usize>,
}

/// Output of the feasibility problem: minimal slack caps and the
/// feasibility cut in the incoming state.
#[derive(Debug, Clone)]
pub struct FeasibilityResult {
    /// Minimal slack per relaxable row (row order).
    pub s_star: Vec<f64>,
    /// Minimal downstream violation epigraph value.
    pub beta_star: f64,
    /// `w . s_star + beta_star`, the stage's violation-to-go.
    pub value: f64,
    /// Stage decision chosen by the feasibility problem.
    pub x_feas: Vec<f64>,
    pub cut: Cut,
}

/// Output of the optimality (or classic) problem.
#[derive(Debug, Clone)]
pub struct OptimalityResult {
    pub x_t: Vec<f64>,
    pub outgoing_state: Vec<f64>,
    /// Operation cost `c . x` only, penalties excluded.
    pub stage_cost: f64,
    /// Value of the future-cost epigraph variable; 0 at the last stage.
    pub theta: f64,
    /// Full LP objective: stage cost + theta, plus penalty terms in the
    /// classic problem.
    pub objective_value: f64,
    pub cut: Cut,
    /// Slack taken per relaxable row (row order).
    pub slacks_used: Vec<f64>,
}

enum ProblemKind<'a> {
    Feasibility {
        fff_next: Option<&'a CutPool>,
    },
    Optimality {
        fcf_next: Option<&'a CutPool>,
        fff_next: Option<&'a CutPool>,
        s_cap: &'a [f64],
        beta_cap: f64,
        theta_lb: f64,
    },
    Classic {
        fcf_next: Option<&'a CutPool>,
        theta_lb: f64,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assemble(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
    kind: &ProblemKind,
) -> Result<(LinearProgram, StageLayout), StageError> {
    let stage = &instance.stages[t];
    let terminal = t + 1 == instance.n_stages;
    debug_assert_eq!(x_prev.len(), instance.m);
    let rhs = effective_rhs(instance, t, k, x_prev)?;

    let slack_rows: Vec<usize> =
        stage.rows.iter().enumerate().filter(|(_, r)| r.relaxable).map(|(i, _)| i).collect();
    let n_slacks = slack_rows.len();
    if let ProblemKind::Optimality { s_cap, .. } = kind {
        debug_assert_eq!(s_cap.len(), n_slacks, "one cap per relaxable row");
    }

    let want_beta = !terminal && matches!(kind, ProblemKind::Feasibility { .. } | ProblemKind::Optimality { .. });
    let want_theta = !terminal && matches!(kind, ProblemKind::Optimality { .. } | ProblemKind::Classic { .. });
    let beta_col = want_beta.then(|| stage.n + n_slacks);
    let theta_col = want_theta.then(|| stage.n + n_slacks + beta_col.is_some() as usize);
    let n_cols = stage.n + n_slacks + beta_col.is_some() as usize + theta_col.is_some() as usize;

    let mut lp = LinearProgram {
        n_vars: n_cols,
        objective: vec![0.0; n_cols],
        var_bounds: vec![(0.0, f64::INFINITY); n_cols],
        rows: Vec::with_capacity(stage.rows.len()),
    };

    // Stage variable bounds and objective.
    if let Some(upper) = &stage.var_upper {
        for (j, hi) in upper.iter().enumerate() {
            if let Some(hi) = hi {
                lp.var_bounds[j].1 = *hi;
            }
        }
    }
    match kind {
        ProblemKind::Feasibility { .. } => {}
        ProblemKind::Optimality { .. } | ProblemKind::Classic { .. } => {
            lp.objective[..stage.n].copy_from_slice(&stage.cost);
        }
    }

    // Slack columns. The optimality problem caps them and prices them at
    // zero: violations are constrained, never bought.
    for (slot, &i) in slack_rows.iter().enumerate() {
        let col = stage.n + slot;
        let row = &stage.rows[i];
        match kind {
            ProblemKind::Feasibility { .. } => {
                lp.objective[col] = row.slack_weight.unwrap_or(1.0);
            }
            ProblemKind::Optimality { s_cap, .. } => {
                lp.var_bounds[col].1 = s_cap[slot].max(0.0);
            }
            ProblemKind::Classic { .. } => {
                lp.objective[col] = row
                    .penalty_weight
                    .ok_or_else(|| StageError::MissingPenalty { label: row.label.clone() })?;
            }
        }
    }

    if let Some(bc) = beta_col {
        match kind {
            ProblemKind::Feasibility { .. } => lp.objective[bc] = 1.0,
            ProblemKind::Optimality { beta_cap, .. } => {
                lp.var_bounds[bc].1 = beta_cap.max(0.0);
            }
            ProblemKind::Classic { .. } => unreachable!(),
        }
    }
    if let Some(tc) = theta_col {
        let lb = match kind {
            ProblemKind::Optimality { theta_lb, .. } | ProblemKind::Classic { theta_lb, .. } => *theta_lb,
            ProblemKind::Feasibility { .. } => unreachable!(),
        };
        lp.var_bounds[tc] = (lb, f64::INFINITY);
        lp.objective[tc] = 1.0;
    }

    // Stage rows, slack spliced into its relaxable row.
    for (i, row) in stage.rows.iter().enumerate() {
        let mut coeffs = row.coeffs.clone();
        if let Some(slot) = slack_rows.iter().position(|&r| r == i) {
            coeffs.push((stage.n + slot, 1.0));
        }
        let sense = match row.sense {
            RowSense::Ge => LpSense::Ge,
            RowSense::Eq => LpSense::Eq,
        };
        lp.rows.push(LpRow { coeffs, sense, rhs: rhs[i] });
    }

    // Epigraph rows: beta >= each downstream feasibility cut and theta >=
    // each downstream optimality cut, both in the outgoing state.
    let epigraph_rows = |lp: &mut LinearProgram, var_col: usize, pool: &CutPool| {
        for cut in &pool.cuts {
            let mut coeffs = vec![(var_col, 1.0)];
            for (s, &g) in cut.gradient.iter().enumerate() {
                if g != 0.0 {
                    coeffs.push((stage.state_indices[s], -g));
                }
            }
            lp.rows.push(LpRow { coeffs, sense: LpSense::Ge, rhs: cut.intercept });
        }
    };
    match kind {
        ProblemKind::Feasibility { fff_next } | ProblemKind::Optimality { fff_next, .. } => {
            if let Some(pool) = fff_next {
                debug_assert!(!terminal, "the last stage has no downstream pools");
                epigraph_rows(&mut lp, beta_col.expect("beta present when cuts are"), pool);
            }
        }
        ProblemKind::Classic { .. } => {}
    }
    match kind {
        ProblemKind::Optimality { fcf_next, .. } | ProblemKind::Classic { fcf_next, .. } => {
            if let Some(pool) = fcf_next {
                debug_assert!(!terminal);
                epigraph_rows(&mut lp, theta_col.expect("theta present when cuts are"), pool);
            }
        }
        ProblemKind::Feasibility { .. } => {}
    }

    let slack_cols = (0..n_slacks).map(|s| stage.n + s).collect();
    Ok((
        lp,
        StageLayout {
            n_vars: stage.n,
            n_stage_rows: stage.rows.len(),
            slack_rows,
            slack_cols,
            beta_col,
            theta_col,
        },
    ))
}

/// Gradient of the subproblem value in the incoming state: `-D^T lambda`
/// over the stage rows, assembled from the link triplets.
fn incoming_gradient(instance: &Instance, t: usize, sol: &LpSolution) -> Vec<f64> {
    let mut g = vec![0.0; instance.m];
    for &(row, s, val) in &instance.stages[t].link {
        g[s] -= val * sol.row_duals[row];
    }
    g
}

/// Describes the most-violated non-relaxable row at the solver's least
/// infeasible point, to direct the user at the offending data.
fn structural_hint(
    instance: &Instance,
    t: usize,
    lp: &LinearProgram,
    layout: &StageLayout,
    sol: &LpSolution,
) -> String {
    let stage = &instance.stages[t];
    let mut worst: Option<(f64, usize)> = None;
    for i in 0..layout.n_stage_rows {
        if stage.rows[i].relaxable {
            continue;
        }
        let row = &lp.rows[i];
        let act: f64 = row.coeffs.iter().map(|&(j, v)| v * sol.primal.get(j).copied().unwrap_or(0.0)).sum();
        let viol = match row.sense {
            LpSense::Ge => row.rhs - act,
            LpSense::Le => act - row.rhs,
            LpSense::Eq => (act - row.rhs).abs(),
        };
        if viol > worst.map_or(1e-9, |(v, _)| v) {
            worst = Some((viol, i));
        }
    }
    match worst {
        Some((viol, i)) => format!(
            "row '{}' unsatisfiable, short by {:.6} at the least-infeasible point",
            stage.rows[i].label, viol
        ),
        None => "no single stage row identifiable; bounds may conflict".to_string(),
    }
}

/// Builds the feasibility problem: minimize `w . s + beta` subject to the
/// stage rows (slack on relaxable ones) and `beta` above the downstream
/// feasibility cuts. Exposed for inspection and tests.
pub fn build_feasibility(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
    fff_next: Option<&CutPool>,
) -> Result<(LinearProgram, StageLayout), StageError> {
    assemble(instance, t, k, x_prev, &ProblemKind::Feasibility { fff_next })
}

/// Solves the feasibility problem and extracts the feasibility cut.
pub fn solve_feasibility(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
    fff_next: Option<&CutPool>,
    origin: CutOrigin,
) -> Result<FeasibilityResult, StageError> {
    let (lp, layout) = build_feasibility(instance, t, k, x_prev, fff_next)?;
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(StageError::StructuralInfeasibility {
                stage: t,
                realization: k,
                hint: structural_hint(instance, t, &lp, &layout, &sol),
            })
        }
        LpStatus::Unbounded => {
            return Err(StageError::Lp(LpError::NumericalFailure(
                "feasibility problem reported unbounded; its objective is nonnegative".into(),
            )))
        }
    }
    debug_assert!(crate::lp::dual_check(&lp, &sol), "feasibility LP failed its dual certificate");

    let s_star: Vec<f64> = layout.slack_cols.iter().map(|&c| sol.primal[c].max(0.0)).collect();
    let beta_star = layout.beta_col.map_or(0.0, |c| sol.primal[c].max(0.0));
    let value = sol.objective_value.max(0.0);
    let gradient = incoming_gradient(instance, t, &sol);
    let intercept = value - dot(&gradient, x_prev);
    Ok(FeasibilityResult {
        s_star,
        beta_star,
        value,
        x_feas: sol.primal[..layout.n_vars].to_vec(),
        cut: Cut { intercept, gradient, kind: CutKind::Feasibility, origin },
    })
}

/// Builds the optimality problem: minimize `c . x + theta` with slacks
/// capped at `s_cap`, `beta` capped at `beta_cap` and floored by the
/// downstream feasibility cuts, `theta` floored by `theta_lb` and the
/// downstream optimality cuts. Slack weights never enter the objective.
#[allow(clippy::too_many_arguments)]
pub fn build_optimality(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
    fcf_next: Option<&CutPool>,
    fff_next: Option<&CutPool>,
    s_cap: &[f64],
    beta_cap: f64,
    theta_lb: f64,
) -> Result<(LinearProgram, StageLayout), StageError> {
    assemble(
        instance,
        t,
        k,
        x_prev,
        &ProblemKind::Optimality { fcf_next, fff_next, s_cap, beta_cap, theta_lb },
    )
}

/// Solves the optimality problem and extracts the optimality cut. The caps
/// are data here, so the cut's gradient ignores their own dependence on the
/// incoming state; the cut bounds the capped stage value from below.
#[allow(clippy::too_many_arguments)]
pub fn solve_optimality(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
    fcf_next: Option<&CutPool>,
    fff_next: Option<&CutPool>,
    s_cap: &[f64],
    beta_cap: f64,
    theta_lb: f64,
    origin: CutOrigin,
) -> Result<OptimalityResult, StageError> {
    let (lp, layout) =
        build_optimality(instance, t, k, x_prev, fcf_next, fff_next, s_cap, beta_cap, theta_lb)?;
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            log::error!(
                "capped optimality LP infeasible at stage {}, realization {}; dump:\n{}",
                t + 1,
                k + 1,
                crate::lp::to_lp_text(&lp)
            );
            return Err(StageError::DefensiveInfeasible {
                stage: t,
                realization: k,
                context: "the feasibility optimum satisfies these caps, so this is a solver or assembly defect".into(),
            });
        }
        LpStatus::Unbounded => {
            return Err(StageError::Lp(LpError::NumericalFailure(format!(
                "optimality problem unbounded below at stage {}",
                t + 1
            ))))
        }
    }
    debug_assert!(crate::lp::dual_check(&lp, &sol), "optimality LP failed its dual certificate");
    Ok(extract_optimality(instance, t, &sol, &layout, origin, x_prev))
}

/// Builds the classic penalized problem: minimize
/// `c . x + sum penalty_r s_r + theta`, slacks unbounded above.
pub fn build_classic(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
    fcf_next: Option<&CutPool>,
    theta_lb: f64,
) -> Result<(LinearProgram, StageLayout), StageError> {
    assemble(instance, t, k, x_prev, &ProblemKind::Classic { fcf_next, theta_lb })
}

/// Solves the classic penalized problem. The cut bounds the penalized
/// cost-to-go (operation cost plus penalty terms).
pub fn solve_classic(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
    fcf_next: Option<&CutPool>,
    theta_lb: f64,
    origin: CutOrigin,
) -> Result<OptimalityResult, StageError> {
    let (lp, layout) = build_classic(instance, t, k, x_prev, fcf_next, theta_lb)?;
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(StageError::StructuralInfeasibility {
                stage: t,
                realization: k,
                hint: structural_hint(instance, t, &lp, &layout, &sol),
            })
        }
        LpStatus::Unbounded => {
            return Err(StageError::Lp(LpError::NumericalFailure(format!(
                "classic stage problem unbounded below at stage {}",
                t + 1
            ))))
        }
    }
    debug_assert!(crate::lp::dual_check(&lp, &sol), "classic LP failed its dual certificate");
    Ok(extract_optimality(instance, t, &sol, &layout, origin, x_prev))
}

fn extract_optimality(
    instance: &Instance,
    t: usize,
    sol: &LpSolution,
    layout: &StageLayout,
    origin: CutOrigin,
    x_prev: &[f64],
) -> OptimalityResult {
    let stage = &instance.stages[t];
    let x_t = sol.primal[..layout.n_vars].to_vec();
    let outgoing_state = stage.state_indices.iter().map(|&j| x_t[j]).collect();
    let stage_cost = dot(&stage.cost, &x_t);
    let theta = layout.theta_col.map_or(0.0, |c| sol.primal[c]);
    let slacks_used = layout.slack_cols.iter().map(|&c| sol.primal[c].max(0.0)).collect();
    let gradient = incoming_gradient(instance, t, sol);
    let intercept = sol.objective_value - dot(&gradient, x_prev);
    OptimalityResult {
        x_t,
        outgoing_state,
        stage_cost,
        theta,
        objective_value: sol.objective_value,
        cut: Cut { intercept, gradient, kind: CutKind::Optimality, origin },
        slacks_used,
    }
}
