//! Deterministic-equivalent ("extensive form") LP over the full scenario
//! tree. Exponential in the number of stages, so it is guarded by a node
//! budget; its role is to provide exact reference optima for small
//! instances, not to compete with the stagewise algorithm.

use super::{solve_lp, LinearProgram, LpError, LpRow, LpSense, LpStatus};
use crate::model::{Instance, RowSense};

/// Hard cap on scenario-tree nodes before [`build_extensive`] refuses.
pub const MAX_TREE_NODES: u64 = 100_000;

/// Hard cap on total LP rows across the tree. The simplex kernel keeps a
/// dense basis inverse of 8 * rows^2 bytes, so a tree can fit the node cap
/// and still demand tens of gigabytes; 10_000 rows tops out at 800 MB.
pub const MAX_EXTENSIVE_ROWS: u64 = 10_000;

/// Objective used by the extensive LP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtensiveMode {
    /// Expected operation cost plus expected penalized slack, the classic
    /// formulation. Requires `penalty_weight` on every relaxable row.
    Penalized,
    /// Expected weighted slack only; the optimum is the smallest achievable
    /// expected violation `V*`.
    MinViolation,
    /// Expected operation cost subject to expected weighted slack `<=` the
    /// given budget.
    CostWithViolationBudget(f64),
}

/// One scenario-tree node and where its variables live in the flat LP.
#[derive(Debug, Clone)]
pub struct NodeInfo {
    pub stage: usize,
    pub parent: Option<usize>,
    /// Realization index within the stage.
    pub realization: usize,
    /// Unconditional probability of reaching this node.
    pub probability: f64,
    /// First LP column of this node's stage variables.
    pub var_offset: usize,
    /// First LP column of this node's slacks (one per relaxable stage row).
    pub slack_offset: usize,
    pub n_slacks: usize,
    /// First LP row of this node's stage rows.
    pub row_offset: usize,
}

/// The assembled extensive LP plus the node layout needed to read the
/// solution back in scenario terms.
#[derive(Debug, Clone)]
pub struct ExtensiveBuild {
    pub lp: LinearProgram,
    pub nodes: Vec<NodeInfo>,
}

/// Exact reference optima from the two-level solve: first minimize expected
/// weighted violation, then minimize expected cost subject to staying within
/// that violation.
#[derive(Debug, Clone)]
pub struct Hierarchical {
    /// Minimum achievable expected weighted violation.
    pub v_star: f64,
    /// Minimum expected cost among plans attaining (up to a relative slack
    /// of 1e-7) the violation optimum.
    pub c_star: f64,
    /// Slack values per node (stage-row order over relaxable rows) at the
    /// cost-optimal plan.
    pub node_slacks: Vec<Vec<f64>>,
    pub nodes: Vec<NodeInfo>,
}

/// Builds the extensive LP for `instance` under `mode`.
///
/// Errors with [`LpError::TreeTooLarge`] when the tree exceeds
/// [`MAX_TREE_NODES`] nodes, with [`LpError::ExtensiveTooLarge`] when its LP
/// exceeds [`MAX_EXTENSIVE_ROWS`] rows, and with [`LpError::NumericalFailure`]
/// when `Penalized` is requested but a relaxable row has no penalty weight.
pub fn build_extensive(instance: &Instance, mode: ExtensiveMode) -> Result<ExtensiveBuild, LpError> {
    let mut total_nodes = 0u64;
    let mut total_rows = 0u64;
    let mut level = 1u64;
    for stage in &instance.stages {
        level = level.saturating_mul(stage.realizations.len() as u64);
        total_nodes = total_nodes.saturating_add(level);
        total_rows = total_rows.saturating_add(level.saturating_mul(stage.rows.len() as u64));
    }
    if total_nodes > MAX_TREE_NODES {
        return Err(LpError::TreeTooLarge { nodes: total_nodes, limit: MAX_TREE_NODES });
    }
    if total_rows > MAX_EXTENSIVE_ROWS {
        return Err(LpError::ExtensiveTooLarge { rows: total_rows, limit: MAX_EXTENSIVE_ROWS });
    }

    // Lay out the tree breadth-first; parents always precede children.
    let mut nodes: Vec<NodeInfo> = Vec::with_capacity(total_nodes as usize);
    let mut n_vars = 0usize;
    let mut n_rows = 0usize;
    let mut frontier: Vec<usize> = Vec::new();
    for (t, stage) in instance.stages.iter().enumerate() {
        let n_slacks = stage.rows.iter().filter(|r| r.relaxable).count();
        let parents: Vec<Option<usize>> = if t == 0 {
            vec![None]
        } else {
            frontier.iter().map(|&p| Some(p)).collect()
        };
        let mut next_frontier = Vec::new();
        for parent in parents {
            for (k, real) in stage.realizations.iter().enumerate() {
                let probability = match parent {
                    None => real.probability,
                    Some(p) => nodes[p].probability * real.probability,
                };
                let idx = nodes.len();
                nodes.push(NodeInfo {
                    stage: t,
                    parent,
                    realization: k,
                    probability,
                    var_offset: n_vars,
                    slack_offset: n_vars + stage.n,
                    n_slacks,
                    row_offset: n_rows,
                });
                n_vars += stage.n + n_slacks;
                n_rows += stage.rows.len();
                next_frontier.push(idx);
            }
        }
        frontier = next_frontier;
    }

    let mut lp = LinearProgram {
        n_vars,
        objective: vec![0.0; n_vars],
        var_bounds: vec![(0.0, f64::INFINITY); n_vars],
        rows: Vec::with_capacity(n_rows + 1),
    };

    for node in &nodes {
        let stage = &instance.stages[node.stage];
        if let Some(upper) = &stage.var_upper {
            for (j, hi) in upper.iter().enumerate() {
                if let Some(hi) = hi {
                    lp.var_bounds[node.var_offset + j].1 = *hi;
                }
            }
        }

        // Objective contribution by mode.
        let want_cost = !matches!(mode, ExtensiveMode::MinViolation);
        if want_cost {
            for (j, &c) in stage.cost.iter().enumerate() {
                lp.objective[node.var_offset + j] += node.probability * c;
            }
        }

        let rhs_base = &stage.realizations[node.realization].rhs;
        let mut slack_slot = 0usize;
        for (i, row) in stage.rows.iter().enumerate() {
            let mut coeffs: Vec<(usize, f64)> = row
                .coeffs
                .iter()
                .map(|&(j, v)| (node.var_offset + j, v))
                .collect();
            let mut rhs = rhs_base[i];
            // State coupling: A x + D x_parent >= b, with the root's
            // predecessor folded into the right-hand side.
            for &(li, s, val) in &stage.link {
                if li == i && val != 0.0 {
                    match node.parent {
                        Some(p) => {
                            let pstage = &instance.stages[nodes[p].stage];
                            coeffs.push((nodes[p].var_offset + pstage.state_indices[s], val));
                        }
                        None => rhs -= val * instance.initial_state[s],
                    }
                }
            }
            if row.relaxable {
                let col = node.slack_offset + slack_slot;
                coeffs.push((col, 1.0));
                let w = row.slack_weight.unwrap_or(1.0);
                match mode {
                    ExtensiveMode::Penalized => {
                        let p = row.penalty_weight.ok_or_else(|| {
                            LpError::NumericalFailure(format!(
                                "relaxable row '{}' has no penalty weight for the penalized form",
                                row.label
                            ))
                        })?;
                        lp.objective[col] += node.probability * p;
                    }
                    ExtensiveMode::MinViolation => {
                        lp.objective[col] += node.probability * w;
                    }
                    ExtensiveMode::CostWithViolationBudget(_) => {}
                }
                slack_slot += 1;
            }
            let sense = match row.sense {
                RowSense::Ge => LpSense::Ge,
                RowSense::Eq => LpSense::Eq,
            };
            lp.rows.push(LpRow { coeffs, sense, rhs });
        }
    }

    if let ExtensiveMode::CostWithViolationBudget(budget) = mode {
        let mut coeffs = Vec::new();
        for node in &nodes {
            let stage = &instance.stages[node.stage];
            let mut slack_slot = 0usize;
            for row in &stage.rows {
                if row.relaxable {
                    let w = row.slack_weight.unwrap_or(1.0);
                    coeffs.push((node.slack_offset + slack_slot, node.probability * w));
                    slack_slot += 1;
                }
            }
        }
        lp.rows.push(LpRow { coeffs, sense: LpSense::Le, rhs: budget });
    }

    Ok(ExtensiveBuild { lp, nodes })
}

/// Two-level exact solve: `V*` from the violation-minimizing LP, then `C*`
/// from the cost LP under a violation budget of `V* (1 + 1e-7)`-ish slack.
pub fn solve_hierarchical(instance: &Instance) -> Result<Hierarchical, LpError> {
    let viol = build_extensive(instance, ExtensiveMode::MinViolation)?;
    let vsol = solve_lp(&viol.lp)?;
    match vsol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(LpError::ExtensiveInfeasible),
        LpStatus::Unbounded => {
            return Err(LpError::NumericalFailure(
                "violation-minimizing LP reported unbounded, impossible for nonnegative slack costs"
                    .into(),
            ))
        }
    }
    let v_star = vsol.objective_value.max(0.0);

    let budget = v_star + 1e-7 * 1f64.max(v_star);
    let cost = build_extensive(instance, ExtensiveMode::CostWithViolationBudget(budget))?;
    let csol = solve_lp(&cost.lp)?;
    match csol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(LpError::NumericalFailure(
                "budgeted cost LP infeasible although the violation plan satisfies the budget"
                    .into(),
            ))
        }
        LpStatus::Unbounded => {
            return Err(LpError::NumericalFailure("budgeted cost LP is unbounded below".into()))
        }
    }

    let node_slacks = cost
        .nodes
        .iter()
        .map(|node| {
            (0..node.n_slacks)
                .map(|s| csol.primal[node.slack_offset + s])
                .collect()
        })
        .collect();

    Ok(Hierarchical { v_star, c_star: csol.objective_value, node_slacks, nodes: cost.nodes })
}
