//! Kernel-level contract tests: random LPs must carry valid optimality
//! certificates, constructed cases must be classified correctly, and small
//! instances must agree with brute-force vertex enumeration.

use pfsddp::lp::{
    dual_check, solve_lp, LinearProgram, LpRow, LpSense, LpSolution, LpStatus,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INF: f64 = f64::INFINITY;

fn row(coeffs: Vec<(usize, f64)>, sense: LpSense, rhs: f64) -> LpRow {
    LpRow { coeffs, sense, rhs }
}

/// Draws a random LP. Most draws are anchored through a known interior
/// point (so they are feasible and exercise the dual certificate); a
/// quarter get fully random right-hand sides to also hit the Infeasible
/// and Unbounded classifications.
fn random_lp(seed: u64) -> LinearProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let n_rows = rng.random_range(0..=10);
    let anchored = rng.random::<f64>() < 0.75;
    let objective: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let var_bounds: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let lo = if rng.random::<f64>() < 0.15 {
                -INF
            } else {
                rng.random_range(-3.0..1.0)
            };
            let hi = if rng.random::<f64>() < 0.25 {
                INF
            } else {
                let base = if lo.is_finite() { lo } else { -3.0 };
                base + rng.random_range(0.5..6.0)
            };
            (lo, hi)
        })
        .collect();
    let anchor: Vec<f64> = var_bounds
        .iter()
        .map(|&(lo, hi)| {
            let a = if lo.is_finite() { lo } else { -2.0 };
            let b = if hi.is_finite() { hi } else { a + 4.0 };
            a + (b - a) * rng.random::<f64>()
        })
        .collect();
    let rows = (0..n_rows)
        .map(|_| {
            let mut coeffs = Vec::new();
            for j in 0..n {
                if rng.random::<f64>() < 0.6 {
                    coeffs.push((j, rng.random_range(-3.0..3.0)));
                }
            }
            if coeffs.is_empty() {
                coeffs.push((rng.random_range(0..n), rng.random_range(-3.0..3.0)));
            }
            let sense = match rng.random_range(0..10) {
                0..=4 => LpSense::Ge,
                5..=8 => LpSense::Le,
                _ => LpSense::Eq,
            };
            let rhs = if anchored {
                let at: f64 = coeffs.iter().map(|&(j, a)| a * anchor[j]).sum();
                match sense {
                    LpSense::Ge => at - rng.random_range(0.0..2.0),
                    LpSense::Le => at + rng.random_range(0.0..2.0),
                    LpSense::Eq => at,
                }
            } else {
                rng.random_range(-4.0..4.0)
            };
            row(coeffs, sense, rhs)
        })
        .collect();
    LinearProgram { n_vars: n, objective, var_bounds, rows }
}

/// Independent primal feasibility check, written against the raw data
/// rather than any kernel internals.
fn primal_feasible(lp: &LinearProgram, x: &[f64], tol: f64) -> bool {
    for (j, &(lo, hi)) in lp.var_bounds.iter().enumerate() {
        if x[j] < lo - tol || x[j] > hi + tol {
            return false;
        }
    }
    for r in &lp.rows {
        let lhs: f64 = r.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
        let ok = match r.sense {
            LpSense::Ge => lhs >= r.rhs - tol,
            LpSense::Le => lhs <= r.rhs + tol,
            LpSense::Eq => (lhs - r.rhs).abs() <= tol,
        };
        if !ok {
            return false;
        }
    }
    true
}

fn objective_of(lp: &LinearProgram, x: &[f64]) -> f64 {
    lp.objective.iter().zip(x).map(|(c, v)| c * v).sum()
}

#[test]
fn random_lps_carry_valid_certificates() {
    let mut optimal = 0;
    let mut infeasible = 0;
    let mut unbounded = 0;
    for seed in 0..200u64 {
        let lp = random_lp(seed);
        let sol = solve_lp(&lp).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        match sol.status {
            LpStatus::Optimal => {
                optimal += 1;
                assert!(
                    primal_feasible(&lp, &sol.primal, 1e-7),
                    "seed {seed}: optimal point violates the constraints"
                );
                let direct = objective_of(&lp, &sol.primal);
                assert!(
                    (direct - sol.objective_value).abs() <= 1e-7 * (1.0 + direct.abs()),
                    "seed {seed}: objective mismatch {direct} vs {}",
                    sol.objective_value
                );
                assert!(dual_check(&lp, &sol), "seed {seed}: dual certificate failed");
            }
            LpStatus::Infeasible => infeasible += 1,
            LpStatus::Unbounded => unbounded += 1,
        }
    }
    // The generator is tuned so most draws are solvable; a collapse into
    // one bucket would mean the test stopped exercising the kernel.
    assert!(optimal >= 80, "only {optimal} optimal LPs out of 200");
    assert!(infeasible + unbounded >= 10, "degenerate draw mix: {infeasible} infeasible, {unbounded} unbounded");
}

#[test]
fn constructed_infeasible_lps_are_classified() {
    // x >= 1 and x <= 0 on a nonnegative variable.
    let lp = LinearProgram {
        n_vars: 1,
        objective: vec![1.0],
        var_bounds: vec![(0.0, INF)],
        rows: vec![
            row(vec![(0, 1.0)], LpSense::Ge, 1.0),
            row(vec![(0, 1.0)], LpSense::Le, 0.0),
        ],
    };
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Infeasible);
    // The reported residual is the least total violation, here exactly 1.
    assert!((sol.objective_value - 1.0).abs() < 1e-7);

    // Conflicting equalities: x + y = 1, x + y = 3.
    let lp = LinearProgram {
        n_vars: 2,
        objective: vec![0.0, 0.0],
        var_bounds: vec![(0.0, INF), (0.0, INF)],
        rows: vec![
            row(vec![(0, 1.0), (1, 1.0)], LpSense::Eq, 1.0),
            row(vec![(0, 1.0), (1, 1.0)], LpSense::Eq, 3.0),
        ],
    };
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Infeasible);
    assert!((sol.objective_value - 2.0).abs() < 1e-7);

    // Feasible region empty only through the interaction of three rows.
    let lp = LinearProgram {
        n_vars: 2,
        objective: vec![1.0, 1.0],
        var_bounds: vec![(0.0, 5.0), (0.0, 5.0)],
        rows: vec![
            row(vec![(0, 1.0), (1, 1.0)], LpSense::Le, 2.0),
            row(vec![(0, 1.0)], LpSense::Ge, 1.5),
            row(vec![(1, 1.0)], LpSense::Ge, 1.5),
        ],
    };
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Infeasible);
    assert!((sol.objective_value - 1.0).abs() < 1e-7);
}

#[test]
fn constructed_unbounded_lps_are_classified() {
    // min -x with x unbounded above.
    let lp = LinearProgram {
        n_vars: 1,
        objective: vec![-1.0],
        var_bounds: vec![(0.0, INF)],
        rows: vec![row(vec![(0, 1.0)], LpSense::Ge, 1.0)],
    };
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Unbounded);

    // The improving ray needs two variables moving together:
    // min -x - y with x - y = 0.
    let lp = LinearProgram {
        n_vars: 2,
        objective: vec![-1.0, -1.0],
        var_bounds: vec![(0.0, INF), (0.0, INF)],
        rows: vec![row(vec![(0, 1.0), (1, -1.0)], LpSense::Eq, 0.0)],
    };
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Unbounded);

    // A free variable with negative cost and no rows at all.
    let lp = LinearProgram {
        n_vars: 1,
        objective: vec![1.0],
        var_bounds: vec![(-INF, INF)],
        rows: vec![],
    };
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Unbounded);
}

#[test]
fn repeated_solves_are_bit_identical() {
    for seed in [3u64, 17, 91] {
        let lp = random_lp(seed);
        let first = solve_lp(&lp).unwrap();
        for _ in 0..4 {
            let again = solve_lp(&lp).unwrap();
            assert_eq!(first.status, again.status);
            assert_eq!(first.primal, again.primal, "seed {seed}: primal drifted");
            assert_eq!(first.row_duals, again.row_duals, "seed {seed}: duals drifted");
        }
    }
}

/// Brute-force optimum of a 2-variable LP by enumerating all candidate
/// vertices: intersections of row/bound hyperplane pairs.
fn vertex_optimum(lp: &LinearProgram) -> Option<f64> {
    assert_eq!(lp.n_vars, 2);
    // Collect hyperplanes a.x = rhs from rows and finite bounds.
    let mut planes: Vec<([f64; 2], f64)> = Vec::new();
    for r in &lp.rows {
        let mut a = [0.0, 0.0];
        for &(j, v) in &r.coeffs {
            a[j] += v;
        }
        planes.push((a, r.rhs));
    }
    for j in 0..2 {
        let (lo, hi) = lp.var_bounds[j];
        let mut a = [0.0, 0.0];
        a[j] = 1.0;
        if lo.is_finite() {
            planes.push((a, lo));
        }
        if hi.is_finite() {
            planes.push((a, hi));
        }
    }
    let mut best: Option<f64> = None;
    let mut consider = |x: [f64; 2]| {
        if primal_feasible(lp, &x, 1e-9) {
            let v = objective_of(lp, &x);
            best = Some(best.map_or(v, |b: f64| b.min(v)));
        }
    };
    for i in 0..planes.len() {
        for j in (i + 1)..planes.len() {
            let (a, b) = (planes[i], planes[j]);
            let det = a.0[0] * b.0[1] - a.0[1] * b.0[0];
            if det.abs() < 1e-10 {
                continue;
            }
            let x0 = (a.1 * b.0[1] - b.1 * a.0[1]) / det;
            let x1 = (a.0[0] * b.1 - b.0[0] * a.1) / det;
            consider([x0, x1]);
        }
    }
    best
}

#[test]
fn two_variable_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut checked = 0;
    for _ in 0..60 {
        // Box-bounded so the LP is never unbounded and every optimum is a
        // vertex of the enumerated arrangement.
        let lp = LinearProgram {
            n_vars: 2,
            objective: vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
            var_bounds: vec![
                (rng.random_range(-2.0..0.0), rng.random_range(0.0..4.0)),
                (rng.random_range(-2.0..0.0), rng.random_range(0.0..4.0)),
            ],
            rows: (0..rng.random_range(1..=5))
                .map(|_| {
                    row(
                        vec![
                            (0, rng.random_range(-3.0..3.0)),
                            (1, rng.random_range(-3.0..3.0)),
                        ],
                        if rng.random::<bool>() { LpSense::Ge } else { LpSense::Le },
                        rng.random_range(-3.0..3.0),
                    )
                })
                .collect(),
        };
        let sol: LpSolution = solve_lp(&lp).unwrap();
        let reference = vertex_optimum(&lp);
        match sol.status {
            LpStatus::Optimal => {
                let v = reference.expect("kernel found an optimum where enumeration found nothing");
                assert!(
                    (sol.objective_value - v).abs() <= 1e-7 * (1.0 + v.abs()),
                    "kernel {} vs enumerated {v}",
                    sol.objective_value
                );
                checked += 1;
            }
            LpStatus::Infeasible => {
                assert!(reference.is_none(), "kernel says infeasible but a feasible vertex exists");
            }
            LpStatus::Unbounded => panic!("box-bounded LP reported unbounded"),
        }
    }
    assert!(checked >= 30, "too few optimal draws ({checked}) to be meaningful");
}
