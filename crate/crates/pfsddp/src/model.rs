//! Problem data model and the on-disk instance format.
//!
//! An [`Instance`] is a staged linear program with right-hand-side noise:
//! per stage, a variable block `x_t >= 0` (optionally bounded above), rows
//! `A_t x_t {>=,=} b_t(xi) - D_t x_{t-1}`, and a finite set of equally
//! structured realizations differing only in `b_t`. The outgoing state is a
//! designated index subset of the stage variables, with fixed dimension `m`
//! across stages; `D_t` maps the incoming `m`-vector into row right-hand
//! sides. Rows marked `relaxable` are hard operating constraints that the
//! solver may violate at a cost tracked separately from the objective.
//!
//! Instances serialize as a single UTF-8 JSON document (see `docs` in the
//! README for the schema); all numeric fields round-trip bit-exactly.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Which stagewise formulation the solver runs: the penalty-free scheme
/// (feasibility problem caps the slacks, violations never priced) or the
/// classic penalized scheme (slacks bought at `penalty_weight` in the
/// objective).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    PenaltyFree,
    Classic,
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveMode::PenaltyFree => "penalty_free",
            SolveMode::Classic => "classic",
        })
    }
}

/// Row comparison sense. Relaxable rows must be `Ge` (the slack enters as
/// `A x + s >= rhs`); equality rows are reserved for balances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSense {
    #[serde(rename = "GE")]
    Ge,
    #[serde(rename = "EQ")]
    Eq,
}

/// One structural row of a stage: a sparse row of `A_t` plus its metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Row {
    /// Sparse coefficients over the stage variables: `(var_index, value)`.
    pub coeffs: Vec<(usize, f64)>,
    pub sense: RowSense,
    /// Whether the row may be violated via an explicit slack variable.
    pub relaxable: bool,
    /// Violation priority weight `w` (per unit of slack). Present iff relaxable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack_weight: Option<f64>,
    /// Penalty price `p` ($/unit of slack), used only by the classic mode.
    /// Present iff relaxable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_weight: Option<f64>,
    /// Stable human-readable identifier, e.g. `"min_outflow:2"`.
    pub label: String,
}

/// One noise realization: a probability and the full right-hand-side vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Realization {
    pub probability: f64,
    /// `b_t(xi)`, one entry per row of the stage.
    pub rhs: Vec<f64>,
}

/// Data of a single stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageData {
    /// Number of stage variables.
    pub n: usize,
    /// Objective coefficients `c_t` ($/unit), length `n`.
    pub cost: Vec<f64>,
    pub rows: Vec<Row>,
    /// Sparse `D_t` as `(row, state_col, value)` triplets; the effective
    /// right-hand side of row `i` is `b_t[i] - sum_j D[i,j] * x_prev[j]`.
    pub link: Vec<(usize, usize, f64)>,
    /// Indices of the `m` variables forming the outgoing state.
    pub state_indices: Vec<usize>,
    /// Optional upper bounds per variable (`None` entry = unbounded above).
    /// Lower bounds are fixed at 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_upper: Option<Vec<Option<f64>>>,
    pub realizations: Vec<Realization>,
}

/// A full multistage instance. Validated invariants: `stages.len() == n_stages`,
/// `initial_state.len() == m`, stage 0 deterministic (single realization of
/// probability 1), and the per-stage shape rules checked by [`validate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    pub name: String,
    /// Stage count, serialized as `T`.
    #[serde(rename = "T")]
    pub n_stages: usize,
    /// State dimension.
    pub m: usize,
    /// Incoming state of the first stage (`x_0`).
    pub initial_state: Vec<f64>,
    pub stages: Vec<StageData>,
}

/// A single validation finding. `stage`/`row` are 0-based indices into the
/// instance; messages render them 1-based for humans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub stage: Option<usize>,
    pub row: Option<usize>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.stage, self.row) {
            (Some(t), Some(r)) => write!(f, "stage {}, row {}: {}", t + 1, r, self.message),
            (Some(t), None) => write!(f, "stage {}: {}", t + 1, self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed instance file: {0}")]
    Parse(String),
    #[error("invalid instance: {}", format_issues(.0))]
    Validation(Vec<Issue>),
    #[error("{what} index {got} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },
}

fn format_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Instance {
    /// Number of scenario-tree leaves: the product of realization counts.
    /// Saturates at `u64::MAX` rather than overflowing.
    pub fn leaf_count(&self) -> u64 {
        self.stages
            .iter()
            .fold(1u64, |acc, s| acc.saturating_mul(s.realizations.len() as u64))
    }

    /// True when every stage has a single realization.
    pub fn is_deterministic(&self) -> bool {
        self.stages.iter().all(|s| s.realizations.len() == 1)
    }

    /// Copy of the instance with every relaxable row's `penalty_weight`
    /// replaced by `penalty`. Used to sweep classic-mode penalty levels
    /// without touching the instance file.
    pub fn with_penalty_override(&self, penalty: f64) -> Instance {
        let mut out = self.clone();
        for stage in &mut out.stages {
            for row in &mut stage.rows {
                if row.relaxable {
                    row.penalty_weight = Some(penalty);
                }
            }
        }
        out
    }
}

/// Parses and fully validates an instance file.
pub fn load_instance(bytes: &[u8]) -> Result<Instance, ModelError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ModelError::Parse(e.to_string()))?;
    let instance: Instance =
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    let issues = validate(&instance);
    if issues.is_empty() {
        Ok(instance)
    } else {
        Err(ModelError::Validation(issues))
    }
}

/// Serializes an instance to the on-disk format. Numbers are written with
/// full round-trip precision.
pub fn save_instance(instance: &Instance) -> String {
    let mut out = serde_json::to_string_pretty(instance).expect("instance serialization");
    out.push('\n');
    out
}

/// Checks every structural invariant and returns the findings (empty =
/// valid). An empty result guarantees every downstream module accepts the
/// instance without shape errors.
pub fn validate(instance: &Instance) -> Vec<Issue> {
    let mut issues = Vec::new();
    let top = |msg: String| Issue {
        stage: None,
        row: None,
        message: msg,
    };

    if instance.n_stages == 0 {
        issues.push(top("stage count must be at least 1".into()));
    }
    if instance.stages.len() != instance.n_stages {
        issues.push(top(format!(
            "declared T={} but {} stages present",
            instance.n_stages,
            instance.stages.len()
        )));
    }
    if instance.initial_state.len() != instance.m {
        issues.push(top(format!(
            "initial_state has length {} but m={}",
            instance.initial_state.len(),
            instance.m
        )));
    }
    if instance.initial_state.iter().any(|v| !v.is_finite()) {
        issues.push(top("initial_state contains a non-finite entry".into()));
    }

    for (t, stage) in instance.stages.iter().enumerate() {
        let at = |row: Option<usize>, msg: String| Issue {
            stage: Some(t),
            row,
            message: msg,
        };
        let mut stage_issues = Vec::new();

        if stage.cost.len() != stage.n {
            stage_issues.push(at(None, format!("cost has length {}, expected n={}", stage.cost.len(), stage.n)));
        }
        if stage.cost.iter().any(|c| !c.is_finite()) {
            stage_issues.push(at(None, "cost contains a non-finite entry".into()));
        }

        if stage.state_indices.len() != instance.m {
            stage_issues.push(at(None, format!(
                "state_indices has length {}, expected m={}",
                stage.state_indices.len(),
                instance.m
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &idx in &stage.state_indices {
            if idx >= stage.n {
                stage_issues.push(at(None, format!("state index {idx} out of range (n={})", stage.n)));
            } else if !seen.insert(idx) {
                stage_issues.push(at(None, format!("duplicate state index {idx}")));
            }
        }

        if let Some(upper) = &stage.var_upper {
            if upper.len() != stage.n {
                stage_issues.push(at(None, format!(
                    "var_upper has length {}, expected n={}",
                    upper.len(),
                    stage.n
                )));
            }
            for (j, ub) in upper.iter().enumerate() {
                if let Some(u) = ub {
                    if !u.is_finite() || *u < 0.0 {
                        stage_issues.push(at(None, format!("var_upper[{j}] = {u} must be finite and nonnegative")));
                    }
                }
            }
        }

        for (r, row) in stage.rows.iter().enumerate() {
            for &(j, v) in &row.coeffs {
                if j >= stage.n {
                    stage_issues.push(at(Some(r), format!("coefficient on variable {j} out of range (n={})", stage.n)));
                }
                if !v.is_finite() {
                    stage_issues.push(at(Some(r), "non-finite row coefficient".into()));
                }
            }
            if row.relaxable && row.sense != RowSense::Ge {
                stage_issues.push(at(Some(r), "relaxable row must be GE".into()));
            }
            match (row.relaxable, row.slack_weight) {
                (true, Some(w)) if !(w.is_finite() && w > 0.0) => {
                    stage_issues.push(at(Some(r), format!("slack_weight {w} must be positive")));
                }
                (true, None) => stage_issues.push(at(Some(r), "relaxable row missing slack_weight".into())),
                (false, Some(_)) => stage_issues.push(at(Some(r), "slack_weight on a non-relaxable row".into())),
                _ => {}
            }
            match (row.relaxable, row.penalty_weight) {
                (true, Some(p)) if !(p.is_finite() && p > 0.0) => {
                    stage_issues.push(at(Some(r), format!("penalty_weight {p} must be positive")));
                }
                (true, None) => stage_issues.push(at(Some(r), "relaxable row missing penalty_weight".into())),
                (false, Some(_)) => stage_issues.push(at(Some(r), "penalty_weight on a non-relaxable row".into())),
                _ => {}
            }
        }

        for &(row, col, val) in &stage.link {
            if row >= stage.rows.len() {
                stage_issues.push(at(None, format!("link row {row} out of range ({} rows)", stage.rows.len())));
            }
            if col >= instance.m {
                stage_issues.push(at(None, format!("link state column {col} out of range (m={})", instance.m)));
            }
            if !val.is_finite() {
                stage_issues.push(at(None, "non-finite link coefficient".into()));
            }
        }

        if stage.realizations.is_empty() {
            stage_issues.push(at(None, "stage has no realizations".into()));
        }
        let mut prob_sum = 0.0;
        for (k, real) in stage.realizations.iter().enumerate() {
            if !(real.probability.is_finite() && real.probability > 0.0) {
                stage_issues.push(at(None, format!("realization {k} probability {} must be positive", real.probability)));
            }
            prob_sum += real.probability;
            if real.rhs.len() != stage.rows.len() {
                stage_issues.push(at(None, format!(
                    "realization {k} rhs has length {}, expected {} rows",
                    real.rhs.len(),
                    stage.rows.len()
                )));
            }
            if real.rhs.iter().any(|v| !v.is_finite()) {
                stage_issues.push(at(None, format!("realization {k} rhs contains a non-finite entry")));
            }
        }
        if !stage.realizations.is_empty() && (prob_sum - 1.0).abs() > 1e-9 {
            stage_issues.push(at(None, format!("realization probabilities sum to {prob_sum}, expected 1")));
        }
        if t == 0 && stage.realizations.len() != 1 {
            stage_issues.push(at(None, format!(
                "stage 1 must be deterministic (one realization), found {}",
                stage.realizations.len()
            )));
        }

        issues.extend(stage_issues);
    }
    issues
}

/// Computes `b_t(xi_k) - D_t * x_prev` for stage `t`, realization `k`.
pub fn effective_rhs(
    instance: &Instance,
    t: usize,
    k: usize,
    x_prev: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let stage = instance.stages.get(t).ok_or(ModelError::IndexOutOfRange {
        what: "stage",
        got: t,
        limit: instance.stages.len(),
    })?;
    let real = stage.realizations.get(k).ok_or(ModelError::IndexOutOfRange {
        what: "realization",
        got: k,
        limit: stage.realizations.len(),
    })?;
    debug_assert_eq!(x_prev.len(), instance.m, "incoming state dimension");
    let mut rhs = real.rhs.clone();
    for &(row, col, val) in &stage.link {
        rhs[row] -= val * x_prev[col];
    }
    Ok(rhs)
}
