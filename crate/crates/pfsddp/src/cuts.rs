//! Cut pools: piecewise-linear lower approximations of the cost-to-go
//! (optimality cuts, "FCF") and the violation-to-go (feasibility cuts,
//! "FFF"), plus the novelty test that decides whether a candidate cut adds
//! information at the state that produced it.

use crate::model::SolveMode;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutKind {
    Optimality,
    Feasibility,
}

/// Where a cut came from: a single realization's subproblem, or the
/// probability-weighted aggregate across a stage's realizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutSource {
    Realization(usize),
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutOrigin {
    pub stage: usize,
    pub iteration: usize,
    pub source: CutSource,
    /// Index of the trial state (within the iteration's forward samples)
    /// the cut was generated at.
    pub trial_state_id: usize,
}

/// One affine minorant `x -> intercept + gradient . x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub intercept: f64,
    pub gradient: Vec<f64>,
    pub kind: CutKind,
    pub origin: CutOrigin,
}

impl Cut {
    pub fn value_at(&self, state: &[f64]) -> f64 {
        debug_assert_eq!(state.len(), self.gradient.len());
        self.intercept + self.gradient.iter().zip(state).map(|(g, x)| g * x).sum::<f64>()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CutError {
    #[error("cut gradient has dimension {got}, pool expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected_cut requires Optimality cuts only")]
    MixedKind,
    #[error("policy parse error: {0}")]
    ParseError(String),
}

/// Append-only pool of cuts of one kind for one stage. Feasibility pools
/// carry an implicit zero cut (violation-to-go is never negative), so they
/// evaluate to at least 0; an empty Optimality pool evaluates to the
/// negative-infinity sentinel and the engine substitutes its configured
/// lower bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutPool {
    pub stage: usize,
    pub kind: CutKind,
    pub cuts: Vec<Cut>,
    pub floor_at_zero: bool,
    state_dim: usize,
}

impl CutPool {
    pub fn new(stage: usize, kind: CutKind, state_dim: usize) -> CutPool {
        CutPool {
            stage,
            kind,
            cuts: Vec::new(),
            floor_at_zero: kind == CutKind::Feasibility,
            state_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    /// Max over cuts of `alpha + g . state`, floored at zero for
    /// Feasibility pools. Empty Optimality pools return `NEG_INFINITY`.
    pub fn evaluate(&self, state: &[f64]) -> Result<f64, CutError> {
        if state.len() != self.state_dim {
            return Err(CutError::DimensionMismatch { expected: self.state_dim, got: state.len() });
        }
        let mut best = if self.floor_at_zero { 0.0 } else { f64::NEG_INFINITY };
        for cut in &self.cuts {
            let v = cut.value_at(state);
            if v > best {
                best = v;
            }
        }
        Ok(best)
    }

    /// Appends `cut` iff it strictly improves the pool's value at
    /// `at_state` by more than `tol_feas` relative: convergence is declared
    /// when no feasibility cut passes this test anywhere.
    pub fn add_if_novel(&mut self, cut: Cut, at_state: &[f64], tol_feas: f64) -> Result<bool, CutError> {
        if cut.gradient.len() != self.state_dim {
            return Err(CutError::DimensionMismatch {
                expected: self.state_dim,
                got: cut.gradient.len(),
            });
        }
        let current = self.evaluate(at_state)?;
        let candidate = cut.value_at(at_state);
        let novel = if current == f64::NEG_INFINITY {
            true
        } else {
            candidate > current + tol_feas * 1f64.max(current.abs())
        };
        if novel {
            self.cuts.push(cut);
        }
        Ok(novel)
    }
}

/// Probability-weighted aggregate of per-realization optimality cuts:
/// `alpha = sum p_k alpha_k`, `g = sum p_k g_k`.
pub fn expected_cut(cuts_per_realization: &[(f64, Cut)]) -> Result<Cut, CutError> {
    debug_assert!(!cuts_per_realization.is_empty());
    debug_assert!(
        (cuts_per_realization.iter().map(|(p, _)| p).sum::<f64>() - 1.0).abs() < 1e-9,
        "realization probabilities must sum to 1"
    );
    let first = &cuts_per_realization[0].1;
    let dim = first.gradient.len();
    let mut intercept = 0.0;
    let mut gradient = vec![0.0; dim];
    for (p, cut) in cuts_per_realization {
        if cut.kind != CutKind::Optimality {
            return Err(CutError::MixedKind);
        }
        if cut.gradient.len() != dim {
            return Err(CutError::DimensionMismatch { expected: dim, got: cut.gradient.len() });
        }
        intercept += p * cut.intercept;
        for (acc, g) in gradient.iter_mut().zip(&cut.gradient) {
            *acc += p * g;
        }
    }
    Ok(Cut {
        intercept,
        gradient,
        kind: CutKind::Optimality,
        origin: CutOrigin {
            stage: first.origin.stage,
            iteration: first.origin.iteration,
            source: CutSource::Aggregated,
            trial_state_id: first.origin.trial_state_id,
        },
    })
}

/// The trained policy: per-stage cost-to-go and violation-to-go pools.
/// `fcf[t]` / `fff[t]` approximate stage `t`'s value as a function of its
/// incoming state, so stage `t`'s subproblems consume the pools of stage
/// `t + 1` and the root bound reads the pools of stage 0 at the initial
/// state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy {
    pub instance_name: String,
    /// Formulation the policy was trained under; simulation replays the
    /// same stage problems.
    pub mode: SolveMode,
    pub n_stages: usize,
    pub state_dim: usize,
    pub fcf: Vec<CutPool>,
    pub fff: Vec<CutPool>,
}

const POLICY_FORMAT: &str = "pfsddp-policy";
const POLICY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    policy: Policy,
}

impl Policy {
    pub fn new(instance_name: &str, mode: SolveMode, n_stages: usize, state_dim: usize) -> Policy {
        Policy {
            instance_name: instance_name.to_string(),
            mode,
            n_stages,
            state_dim,
            fcf: (0..n_stages).map(|t| CutPool::new(t, CutKind::Optimality, state_dim)).collect(),
            fff: (0..n_stages).map(|t| CutPool::new(t, CutKind::Feasibility, state_dim)).collect(),
        }
    }

    /// Versioned JSON serialization. JSON keeps `f64` exactly (shortest
    /// round-trip formatting), so save/load is lossless.
    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            format: POLICY_FORMAT.to_string(),
            version: POLICY_VERSION,
            policy: self.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("policy serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Policy, CutError> {
        let file: PolicyFile =
            serde_json::from_str(text).map_err(|e| CutError::ParseError(e.to_string()))?;
        if file.format != POLICY_FORMAT {
            return Err(CutError::ParseError(format!(
                "unrecognized policy format '{}'",
                file.format
            )));
        }
        if file.version != POLICY_VERSION {
            return Err(CutError::ParseError(format!(
                "unsupported policy version {} (expected {})",
                file.version, POLICY_VERSION
            )));
        }
        let p = file.policy;
        if p.fcf.len() != p.n_stages || p.fff.len() != p.n_stages {
            return Err(CutError::ParseError(format!(
                "policy declares {} stages but carries {} FCF / {} FFF pools",
                p.n_stages,
                p.fcf.len(),
                p.fff.len()
            )));
        }
        for pool in p.fcf.iter().chain(&p.fff) {
            if pool.state_dim != p.state_dim {
                return Err(CutError::ParseError(format!(
                    "stage {} pool has state dimension {}, policy says {}",
                    pool.stage, pool.state_dim, p.state_dim
                )));
            }
            for cut in &pool.cuts {
                if cut.gradient.len() != p.state_dim {
                    return Err(CutError::ParseError(format!(
                        "cut at stage {} has gradient length {}, expected {}",
                        pool.stage,
                        cut.gradient.len(),
                        p.state_dim
                    )));
                }
                if !cut.intercept.is_finite() || cut.gradient.iter().any(|g| !g.is_finite()) {
                    return Err(CutError::ParseError(format!(
                        "non-finite cut at stage {}",
                        pool.stage
                    )));
                }
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Policy, CutError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CutError::ParseError(format!("{}: {}", path.display(), e)))?;
        Policy::from_json(&text)
    }

    /// Total cuts across both families, for reporting.
    pub fn cut_counts(&self) -> (usize, usize) {
        (
            self.fcf.iter().map(|p| p.cuts.len()).sum(),
            self.fff.iter().map(|p| p.cuts.len()).sum(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> CutOrigin {
        CutOrigin { stage: 1, iteration: 0, source: CutSource::Realization(0), trial_state_id: 0 }
    }

    fn cut(alpha: f64, g: &[f64], kind: CutKind) -> Cut {
        Cut { intercept: alpha, gradient: g.to_vec(), kind, origin: origin() }
    }

    #[test]
    fn empty_feasibility_pool_floors_at_zero() {
        let pool = CutPool::new(1, CutKind::Feasibility, 1);
        assert_eq!(pool.evaluate(&[123.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_optimality_pool_is_unbounded_below() {
        let pool = CutPool::new(1, CutKind::Optimality, 2);
        assert_eq!(pool.evaluate(&[0.0, 0.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn affine_evaluation() {
        let mut pool = CutPool::new(1, CutKind::Feasibility, 1);
        pool.add_if_novel(cut(3.0, &[-1.0], CutKind::Feasibility), &[0.0], 1e-6).unwrap();
        assert_eq!(pool.evaluate(&[1.0]).unwrap(), 2.0);
        // Floor takes over once the cut goes negative.
        assert_eq!(pool.evaluate(&[5.0]).unwrap(), 0.0);
    }

    #[test]
    fn novelty_accepts_then_rejects_duplicate() {
        let mut pool = CutPool::new(1, CutKind::Feasibility, 1);
        let c = cut(3.0, &[-1.0], CutKind::Feasibility);
        assert!(pool.add_if_novel(c.clone(), &[0.0], 1e-6).unwrap());
        assert!(!pool.add_if_novel(c, &[0.0], 1e-6).unwrap());
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn dominated_cut_rejected_elsewhere() {
        let mut pool = CutPool::new(1, CutKind::Feasibility, 1);
        pool.add_if_novel(cut(3.0, &[-1.0], CutKind::Feasibility), &[0.0], 1e-6).unwrap();
        // Candidate value 2 - 0.5*4 = 0 vs pool max(0, 3-4) = 0: dominated.
        let weaker = cut(2.0, &[-0.5], CutKind::Feasibility);
        assert!(!pool.add_if_novel(weaker, &[4.0], 1e-6).unwrap());
    }

    #[test]
    fn empty_optimality_pool_accepts_any_cut() {
        let mut pool = CutPool::new(0, CutKind::Optimality, 1);
        assert!(pool.add_if_novel(cut(-100.0, &[0.0], CutKind::Optimality), &[0.0], 1e-6).unwrap());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let pool = CutPool::new(0, CutKind::Feasibility, 2);
        assert_eq!(
            pool.evaluate(&[1.0]),
            Err(CutError::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn expected_cut_is_convex_combination() {
        let cuts = vec![
            (0.5, cut(4.0, &[0.0], CutKind::Optimality)),
            (0.5, cut(0.0, &[2.0], CutKind::Optimality)),
        ];
        let agg = expected_cut(&cuts).unwrap();
        assert_eq!(agg.intercept, 2.0);
        assert_eq!(agg.gradient, vec![1.0]);
        assert_eq!(agg.origin.source, CutSource::Aggregated);
    }

    #[test]
    fn expected_cut_identity_for_single_realization() {
        let c = cut(5.0, &[2.0], CutKind::Optimality);
        let agg = expected_cut(&[(1.0, c.clone())]).unwrap();
        assert_eq!(agg.intercept, c.intercept);
        assert_eq!(agg.gradient, c.gradient);
    }

    #[test]
    fn expected_cut_rejects_feasibility_kind() {
        let cuts = vec![(1.0, cut(1.0, &[0.0], CutKind::Feasibility))];
        assert_eq!(expected_cut(&cuts), Err(CutError::MixedKind));
    }

    #[test]
    fn policy_round_trips_bit_exactly() {
        let mut policy = Policy::new("toy", SolveMode::PenaltyFree, 2, 1);
        policy.fff[1]
            .add_if_novel(cut(3.0000000001, &[-1.0 / 3.0], CutKind::Feasibility), &[0.0], 1e-6)
            .unwrap();
        policy.fcf[1]
            .add_if_novel(cut(0.1 + 0.2, &[f64::MIN_POSITIVE], CutKind::Optimality), &[0.0], 1e-6)
            .unwrap();
        let text = policy.to_json();
        let back = Policy::from_json(&text).unwrap();
        let states = [[-7.25], [0.0], [1e9]];
        for s in &states {
            assert_eq!(
                policy.fff[1].evaluate(s).unwrap().to_bits(),
                back.fff[1].evaluate(s).unwrap().to_bits()
            );
            assert_eq!(
                policy.fcf[1].evaluate(s).unwrap().to_bits(),
                back.fcf[1].evaluate(s).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn policy_version_checked() {
        let policy = Policy::new("toy", SolveMode::Classic, 1, 0);
        let text = policy.to_json().replace("\"version\": 1", "\"version\": 99");
        match Policy::from_json(&text) {
            Err(CutError::ParseError(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {:?}", other),
        }
    }

    #[test]
    fn policy_shape_checked() {
        let policy = Policy::new("toy", SolveMode::PenaltyFree, 2, 1);
        let mut file: serde_json::Value = serde_json::from_str(&policy.to_json()).unwrap();
        file["fcf"].as_array_mut().unwrap().pop();
        match Policy::from_json(&file.to_string()) {
            Err(CutError::ParseError(msg)) => assert!(msg.contains("pools")),
            other => panic!("expected shape error, got {:?}", other),
        }
    }
}
