//! Self-contained LP kernel and the extensive-form (scenario-tree) builder.
//!
//! The kernel is a bounded-variable revised simplex chosen for one property
//! the rest of the crate depends on: it returns exact *basic* dual solutions
//! (row duals plus reduced costs) under fixed sign conventions, so cut
//! gradients can be read straight off `row_duals`. Desk-scale problem sizes
//! make a dense basis inverse adequate; determinism is part of the contract
//! (identical input yields identical output, bit for bit).
//!
//! Any backend satisfying [`solve_lp`]'s postconditions may replace the
//! kernel; the test suite exercises the contract via [`dual_check`] and an
//! independent vertex-enumeration oracle, not the implementation.

mod extensive;
mod simplex;

pub use extensive::{
    build_extensive, solve_hierarchical, ExtensiveBuild, ExtensiveMode, Hierarchical, NodeInfo,
    MAX_EXTENSIVE_ROWS, MAX_TREE_NODES,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Comparison sense of a kernel row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpSense {
    Ge,
    Le,
    Eq,
}

/// One kernel row: sparse coefficients, sense, right-hand side.
#[derive(Debug, Clone)]
pub struct LpRow {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: LpSense,
    pub rhs: f64,
}

/// A linear program in minimize form with per-variable bounds.
/// `var_bounds[j] = (lo, hi)`; `lo = -inf` only for explicitly free
/// variables, `hi = +inf` for unbounded-above ones.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub var_bounds: Vec<(f64, f64)>,
    pub rows: Vec<LpRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Kernel output. When `status != Optimal` the dual fields are zeroed and
/// `primal` holds the point the solver stopped at (for `Infeasible`, the
/// least-infeasible point found — useful for diagnosing which rows conflict;
/// `objective_value` then holds the residual infeasibility).
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub objective_value: f64,
    /// One dual per row. Sign convention for minimization: GE rows `>= 0`,
    /// LE rows `<= 0`, EQ rows free.
    pub row_duals: Vec<f64>,
    /// Reduced costs of the structural variables at the final basis.
    pub reduced_costs: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum LpError {
    /// Cycling guard exhausted or basis conditioning broke down — distinct
    /// from a genuinely infeasible LP.
    #[error("numerical failure in LP solve: {0}")]
    NumericalFailure(String),
    #[error("scenario tree too large for the extensive form: {nodes} nodes (limit {limit})")]
    TreeTooLarge { nodes: u64, limit: u64 },
    /// The tree fits the node cap but its extensive LP would still be too
    /// big for the dense kernel (the basis inverse costs 8 * rows^2 bytes).
    #[error("extensive form too large: {rows} rows (limit {limit})")]
    ExtensiveTooLarge { rows: u64, limit: u64 },
    /// The extensive LP itself is infeasible, i.e. the non-relaxable rows
    /// are inconsistent even with all slacks free.
    #[error("extensive form infeasible: non-relaxable rows are inconsistent")]
    ExtensiveInfeasible,
}

/// Primal feasibility tolerance, absolute per row.
pub const TOL_FEAS_LP: f64 = 1e-8;
/// Relative tolerance for strong duality and complementary slackness.
pub const TOL_DUALITY: f64 = 1e-6;

/// Solves the LP. Postconditions when the result is `Ok`:
/// `status` correctly classifies the LP; when `Optimal`, the solution passes
/// [`dual_check`]; repeated calls on the same input return identical output.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    simplex::solve(lp)
}

/// Verifies every optimality certificate of `sol` against `lp` at the
/// documented tolerances: primal feasibility (rows and bounds), dual sign
/// conventions, dual feasibility w.r.t. unbounded directions, strong duality,
/// and complementary slackness on rows and bounds. Pure check; never panics.
pub fn dual_check(lp: &LinearProgram, sol: &LpSolution) -> bool {
    if sol.status != LpStatus::Optimal {
        return false;
    }
    if sol.primal.len() != lp.n_vars || sol.row_duals.len() != lp.rows.len() {
        return false;
    }

    // Primal feasibility, and row activities for later.
    let mut residuals = Vec::with_capacity(lp.rows.len());
    for row in &lp.rows {
        let act: f64 = row.coeffs.iter().map(|&(j, v)| v * sol.primal[j]).sum();
        let resid = act - row.rhs;
        let ok = match row.sense {
            LpSense::Ge => resid >= -TOL_FEAS_LP,
            LpSense::Le => resid <= TOL_FEAS_LP,
            LpSense::Eq => resid.abs() <= TOL_FEAS_LP,
        };
        if !ok {
            return false;
        }
        residuals.push(resid);
    }
    for (j, &(lo, hi)) in lp.var_bounds.iter().enumerate() {
        if sol.primal[j] < lo - TOL_FEAS_LP || sol.primal[j] > hi + TOL_FEAS_LP {
            return false;
        }
    }

    // Dual sign conventions.
    for (i, row) in lp.rows.iter().enumerate() {
        let lam = sol.row_duals[i];
        let ok = match row.sense {
            LpSense::Ge => lam >= -TOL_DUALITY,
            LpSense::Le => lam <= TOL_DUALITY,
            LpSense::Eq => true,
        };
        if !ok {
            return false;
        }
    }

    // Reduced costs implied by the stated duals.
    let mut reduced = lp.objective.clone();
    for (i, row) in lp.rows.iter().enumerate() {
        let lam = sol.row_duals[i];
        if lam != 0.0 {
            for &(j, v) in &row.coeffs {
                reduced[j] -= lam * v;
            }
        }
    }

    // Dual feasibility against unbounded directions, and the bound terms of
    // the dual objective: a positive reduced cost pins its variable to a
    // finite lower bound, a negative one to a finite upper bound.
    let mut dual_obj: f64 = lp
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| sol.row_duals[i] * row.rhs)
        .sum();
    for (j, &d) in reduced.iter().enumerate() {
        let (lo, hi) = lp.var_bounds[j];
        if d > TOL_DUALITY {
            if lo == f64::NEG_INFINITY {
                return false;
            }
            dual_obj += d * lo;
        } else if d < -TOL_DUALITY {
            if hi == f64::INFINITY {
                return false;
            }
            dual_obj += d * hi;
        }
    }

    // Strong duality, plus internal consistency of the reported objective.
    let scale = 1f64.max(sol.objective_value.abs());
    let primal_obj: f64 = lp
        .objective
        .iter()
        .zip(&sol.primal)
        .map(|(c, x)| c * x)
        .sum();
    if (primal_obj - sol.objective_value).abs() > TOL_DUALITY * scale {
        return false;
    }
    if (primal_obj - dual_obj).abs() > TOL_DUALITY * scale {
        return false;
    }

    // Complementary slackness: rows, then bounds. Normalized product form so
    // the test is meaningful at any magnitude.
    for (i, resid) in residuals.iter().enumerate() {
        let lam = sol.row_duals[i];
        if lam.abs() * resid.abs() > TOL_DUALITY * 1f64.max(lam.abs()).max(resid.abs()) {
            return false;
        }
    }
    for (j, &d) in reduced.iter().enumerate() {
        let (lo, hi) = lp.var_bounds[j];
        let gap = if d > 0.0 {
            if lo == f64::NEG_INFINITY {
                continue;
            }
            sol.primal[j] - lo
        } else {
            if hi == f64::INFINITY {
                continue;
            }
            hi - sol.primal[j]
        };
        if d.abs() * gap.abs() > TOL_DUALITY * 1f64.max(d.abs()).max(gap.abs()) {
            return false;
        }
    }
    true
}

/// Renders the LP in the conventional human-readable text interchange format
/// (minimize form), for cross-checking against external solvers.
pub fn to_lp_text(lp: &LinearProgram) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let term = |buf: &mut String, first: &mut bool, v: f64, j: usize| {
        if *first {
            let _ = write!(buf, "{} x{}", fmt_num(v), j);
            *first = false;
        } else if v >= 0.0 {
            let _ = write!(buf, " + {} x{}", fmt_num(v), j);
        } else {
            let _ = write!(buf, " - {} x{}", fmt_num(-v), j);
        }
    };
    out.push_str("Minimize\n obj:");
    let mut first = true;
    for (j, &c) in lp.objective.iter().enumerate() {
        if c != 0.0 {
            out.push(' ');
            let mut buf = String::new();
            term(&mut buf, &mut first, c, j);
            out.pop();
            out.push_str(&buf);
        }
    }
    if first {
        out.push_str(" 0 x0");
    }
    out.push_str("\nSubject To\n");
    for (i, row) in lp.rows.iter().enumerate() {
        let _ = write!(out, " r{}:", i);
        let mut first = true;
        let mut buf = String::new();
        for &(j, v) in &row.coeffs {
            if v != 0.0 {
                term(&mut buf, &mut first, v, j);
            }
        }
        if first {
            buf.push_str("0 x0");
        }
        let op = match row.sense {
            LpSense::Ge => ">=",
            LpSense::Le => "<=",
            LpSense::Eq => "=",
        };
        let _ = write!(out, " {} {} {}\n", buf, op, fmt_num(row.rhs));
    }
    out.push_str("Bounds\n");
    for (j, &(lo, hi)) in lp.var_bounds.iter().enumerate() {
        let _ = match (lo == f64::NEG_INFINITY, hi == f64::INFINITY) {
            (true, true) => writeln!(out, " x{} free", j),
            (true, false) => writeln!(out, " -inf <= x{} <= {}", j, fmt_num(hi)),
            (false, true) => writeln!(out, " {} <= x{}", fmt_num(lo), j),
            (false, false) => writeln!(out, " {} <= x{} <= {}", fmt_num(lo), j, fmt_num(hi)),
        };
    }
    out.push_str("End\n");
    out
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{}", v)
    }
}
