//! Soundness of the generated cuts: every feasibility cut must minorize the
//! exact subproblem violation everywhere, touch it at its generating state,
//! and carry a gradient that matches finite differences of the subproblem
//! optimum away from kinks.

use pfsddp::cuts::{CutOrigin, CutSource, Policy};
use pfsddp::engine::{run, EngineConfig};
use pfsddp::hydro::{self, GenParams};
use pfsddp::model::{Instance, SolveMode};
use pfsddp::stage::{solve_feasibility, solve_optimality, StageError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;

fn trained(instance: &Instance) -> Policy {
    let mut config = EngineConfig::new(SolveMode::PenaltyFree);
    config.gap_epsilon = 1e-7;
    config.max_iters = 100;
    let out = run(instance, &config).unwrap();
    assert!(out.report.converged, "{} must converge first", instance.name);
    out.policy
}

/// Incoming-state sample box: the storage capacities, read off the previous
/// stage's outgoing-state bounds (the initial state at the root).
fn state_box(instance: &Instance, t: usize) -> Vec<f64> {
    if t == 0 {
        return instance.initial_state.iter().map(|&v| v.max(1.0) * 2.0).collect();
    }
    let prev = &instance.stages[t - 1];
    prev.state_indices
        .iter()
        .map(|&j| {
            prev.var_upper
                .as_ref()
                .and_then(|u| u[j])
                .unwrap_or(10.0)
        })
        .collect()
}

fn random_state(box_hi: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    box_hi.iter().map(|&hi| rng.random::<f64>() * hi).collect()
}

/// Exact violation-to-go of stage `t`, realization `k`, from incoming state
/// `x`, measured against the pools of a trained policy. Pools only grow
/// during training, so this value is >= the value any retained cut was cut
/// from, making it a valid upper reference for the minorant property.
fn feas_value(instance: &Instance, policy: &Policy, t: usize, k: usize, x: &[f64]) -> f64 {
    let origin = CutOrigin {
        stage: t,
        iteration: usize::MAX,
        source: CutSource::Realization(k),
        trial_state_id: 0,
    };
    solve_feasibility(instance, t, k, x, policy.fff.get(t + 1), origin).unwrap().value
}

#[test]
fn feasibility_cuts_minorize_the_exact_violation() {
    let instances = vec![
        hydro::toy_feasible().compile().unwrap(),
        hydro::toy_infeasible().compile().unwrap(),
        hydro::toy_stochastic().compile().unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut cuts_checked = 0;
    for instance in &instances {
        let policy = trained(instance);
        for (t, pool) in policy.fff.iter().enumerate() {
            let box_hi = state_box(instance, t);
            for cut in &pool.cuts {
                let k = match cut.origin.source {
                    CutSource::Realization(k) => k,
                    CutSource::Aggregated => panic!("feasibility cuts are per-realization"),
                };
                assert_eq!(cut.origin.stage, t, "cut filed under the wrong stage");
                for _ in 0..100 {
                    let x = random_state(&box_hi, &mut rng);
                    let exact = feas_value(instance, &policy, t, k, &x);
                    let val = cut.value_at(&x);
                    assert!(
                        val <= exact + 1e-6,
                        "{} stage {t} realization {k}: cut {val} above exact {exact} at {x:?}",
                        instance.name
                    );
                }
                cuts_checked += 1;
            }
        }
    }
    assert!(cuts_checked >= 5, "only {cuts_checked} cuts reached the check");
}

#[test]
fn fresh_cuts_touch_their_generating_state() {
    let instances = vec![
        hydro::toy_feasible().compile().unwrap(),
        hydro::toy_infeasible().compile().unwrap(),
        hydro::toy_stochastic().compile().unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for instance in &instances {
        let policy = trained(instance);
        for t in 0..instance.n_stages {
            let box_hi = state_box(instance, t);
            for k in 0..instance.stages[t].realizations.len() {
                for _ in 0..10 {
                    let x = random_state(&box_hi, &mut rng);
                    let origin = CutOrigin {
                        stage: t,
                        iteration: 0,
                        source: CutSource::Realization(k),
                        trial_state_id: 0,
                    };
                    let res =
                        solve_feasibility(instance, t, k, &x, policy.fff.get(t + 1), origin)
                            .unwrap();
                    // Tight at the state it was cut from...
                    assert!(
                        (res.cut.value_at(&x) - res.value).abs() <= 1e-8 * (1.0 + res.value),
                        "cut loose at its own state"
                    );
                    // ...and a minorant in a neighborhood around it.
                    for _ in 0..10 {
                        let y = random_state(&box_hi, &mut rng);
                        let exact = feas_value(instance, &policy, t, k, &y);
                        assert!(res.cut.value_at(&y) <= exact + 1e-6);
                    }
                }
            }
        }
    }
}

/// Central finite difference of `f` along coordinate `j`, with a one-sided
/// agreement guard: returns None at kinks, where the two one-sided slopes
/// disagree and no gradient comparison is meaningful. `f` may itself return
/// None when a probe leaves the subproblem's domain (a capped problem can
/// be infeasible just past its generating state); that also skips.
fn fd_gradient(
    f: &dyn Fn(&[f64]) -> Option<f64>,
    x: &[f64],
    j: usize,
) -> Option<f64> {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[j] += FD_STEP;
    xm[j] -= FD_STEP;
    let (fp, fm, f0) = (f(&xp)?, f(&xm)?, f(x)?);
    let forward = (fp - f0) / FD_STEP;
    let backward = (f0 - fm) / FD_STEP;
    if (forward - backward).abs() > FD_TOL * (1.0 + forward.abs().max(backward.abs())) {
        return None;
    }
    Some((fp - fm) / (2.0 * FD_STEP))
}

#[test]
fn feasibility_cut_gradients_match_finite_differences() {
    let instances = vec![
        hydro::toy_feasible().compile().unwrap(),
        hydro::toy_infeasible().compile().unwrap(),
        hydro::toy_stochastic().compile().unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut verified = 0;
    for instance in &instances {
        let policy = trained(instance);
        for t in 0..instance.n_stages {
            let box_hi = state_box(instance, t);
            for k in 0..instance.stages[t].realizations.len() {
                for _ in 0..20 {
                    let x = random_state(&box_hi, &mut rng);
                    let origin = CutOrigin {
                        stage: t,
                        iteration: 0,
                        source: CutSource::Realization(k),
                        trial_state_id: 0,
                    };
                    let res =
                        solve_feasibility(instance, t, k, &x, policy.fff.get(t + 1), origin)
                            .unwrap();
                    let value_fn =
                        |y: &[f64]| Some(feas_value(instance, &policy, t, k, y));
                    for j in 0..x.len() {
                        if let Some(fd) = fd_gradient(&value_fn, &x, j) {
                            assert!(
                                (res.cut.gradient[j] - fd).abs()
                                    <= FD_TOL * (1.0 + fd.abs()),
                                "{} stage {t}: dV/dx_{j} = {} but FD says {fd} at {x:?}",
                                instance.name,
                                res.cut.gradient[j]
                            );
                            verified += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(verified >= 50, "only {verified} gradient comparisons survived the kink guard");
}

#[test]
fn optimality_cut_gradients_match_the_capped_subproblem() {
    let instance = hydro::toy_infeasible().compile().unwrap();
    let policy = trained(&instance);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut verified = 0;
    for t in 0..instance.n_stages {
        let box_hi = state_box(&instance, t);
        for _ in 0..20 {
            let x = random_state(&box_hi, &mut rng);
            let origin = CutOrigin {
                stage: t,
                iteration: 0,
                source: CutSource::Realization(0),
                trial_state_id: 0,
            };
            // Derive the caps once at x; the cut differentiates the capped
            // problem, so finite differences must hold the caps fixed.
            let feas =
                solve_feasibility(&instance, t, 0, &x, policy.fff.get(t + 1), origin).unwrap();
            let solve_at = |y: &[f64]| {
                match solve_optimality(
                    &instance,
                    t,
                    0,
                    y,
                    policy.fcf.get(t + 1),
                    policy.fff.get(t + 1),
                    &feas.s_star,
                    feas.beta_star,
                    0.0,
                    origin,
                ) {
                    Ok(r) => Some(r),
                    // A probe state can fall outside the capped problem's
                    // domain: the caps were derived at x, not at y.
                    Err(StageError::DefensiveInfeasible { .. }) => None,
                    Err(e) => panic!("probe at {y:?}: {e}"),
                }
            };
            let res = solve_at(&x).expect("capped problem is feasible at its own state");
            assert!(
                (res.cut.value_at(&x) - res.objective_value).abs()
                    <= 1e-8 * (1.0 + res.objective_value.abs()),
                "optimality cut loose at its own state"
            );
            let value_fn = |y: &[f64]| solve_at(y).map(|r| r.objective_value);
            for j in 0..x.len() {
                if let Some(fd) = fd_gradient(&value_fn, &x, j) {
                    assert!(
                        (res.cut.gradient[j] - fd).abs() <= FD_TOL * (1.0 + fd.abs()),
                        "stage {t}: dC/dx_{j} = {} but FD says {fd} at {x:?}",
                        res.cut.gradient[j]
                    );
                    verified += 1;
                }
            }
        }
    }
    assert!(verified >= 20, "only {verified} comparisons survived the kink guard");
}

/// At convergence on a deterministic instance the root pool supports the
/// exact violation-to-go at the initial state.
#[test]
fn converged_root_pool_is_tight_at_the_initial_state() {
    let instance = hydro::toy_infeasible().compile().unwrap();
    let policy = trained(&instance);
    let supported = policy.fff[0].evaluate(&instance.initial_state).unwrap();
    let exact = feas_value(&instance, &policy, 0, 0, &instance.initial_state);
    assert!((supported - exact).abs() < 1e-6, "pool {supported} vs exact {exact}");
    assert!((supported - 2.0).abs() < 1e-6, "frozen minimum violation is 2");
}

/// Extra volume beyond the fixtures: a tight deterministic cascade whose
/// pools hold more varied cuts.
#[test]
fn generated_cascade_cuts_are_sound() {
    let system = hydro::generate(&GenParams {
        n_reservoirs: 3,
        n_stages: 4,
        n_thermals: 2,
        realizations_per_stage: 1,
        hoc_tightness: 1.0,
        seed: 44,
    })
    .unwrap();
    let instance = system.compile().unwrap();
    let policy = trained(&instance);
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut cuts_checked = 0;
    for (t, pool) in policy.fff.iter().enumerate() {
        let box_hi = state_box(&instance, t);
        for cut in &pool.cuts {
            let k = match cut.origin.source {
                CutSource::Realization(k) => k,
                CutSource::Aggregated => unreachable!(),
            };
            for _ in 0..100 {
                let x = random_state(&box_hi, &mut rng);
                let exact = feas_value(&instance, &policy, t, k, &x);
                assert!(cut.value_at(&x) <= exact + 1e-6);
            }
            cuts_checked += 1;
        }
    }
    assert!(cuts_checked >= 3);
}
