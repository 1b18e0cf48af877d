//! Hydrothermal scheduling front end: cascaded reservoirs with minimum
//! outflow requirements, thermal plants, and per-stage demand, compiled to
//! the generic staged model. Also owns the seeded instance generator and
//! the canonical toy fixtures.
//!
//! Conversion is fixed at 1 hm3 of release = 1 MWh, so releases and
//! thermal generation add directly in the demand row.

use crate::model::{validate, Instance, ModelError, Realization, Row, RowSense, StageData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HydroError {
    #[error("reservoir {reservoir} is part of a downstream cycle")]
    Cycle { reservoir: usize },
    #[error("invalid hydro system: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reservoir {
    /// Storage capacity, hm3.
    pub capacity: f64,
    pub initial_storage: f64,
    /// Index of the reservoir receiving this one's outflow, if any.
    pub downstream: Option<usize>,
    /// Turbine limit, hm3 per stage.
    pub max_release: f64,
    /// Minimum total outflow (release + spill) per stage, hm3. Zero means
    /// no requirement.
    pub min_outflow: f64,
    /// Violation priority of the minimum-outflow row.
    pub hoc_weight: f64,
    /// First stage (0-based) at which the minimum-outflow row applies.
    #[serde(default)]
    pub hoc_start_stage: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Thermal {
    /// MWh per stage.
    pub capacity: f64,
    /// $ per MWh.
    pub unit_cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InflowCase {
    pub probability: f64,
    /// One entry per reservoir, hm3.
    pub inflow: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HydroSystem {
    pub name: String,
    pub n_stages: usize,
    pub reservoirs: Vec<Reservoir>,
    pub thermals: Vec<Thermal>,
    /// MWh per stage.
    pub demand: Vec<f64>,
    /// `inflows[t]` lists the stage-`t` scenarios.
    pub inflows: Vec<Vec<InflowCase>>,
}

/// Generator knobs. `hoc_tightness` interpolates the outflow requirement
/// from absent (0) to provably above any path's water availability (1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub n_reservoirs: usize,
    pub n_stages: usize,
    pub n_thermals: usize,
    /// Inflow scenarios per stage after the first (the first stage is
    /// always deterministic).
    pub realizations_per_stage: usize,
    pub hoc_tightness: f64,
    pub seed: u64,
}

impl HydroSystem {
    fn check(&self) -> Result<(), HydroError> {
        let r = self.reservoirs.len();
        if r == 0 {
            return Err(HydroError::Invalid("at least one reservoir is required".into()));
        }
        if self.n_stages == 0 {
            return Err(HydroError::Invalid("at least one stage is required".into()));
        }
        if self.demand.len() != self.n_stages {
            return Err(HydroError::Invalid(format!(
                "demand has {} entries for {} stages",
                self.demand.len(),
                self.n_stages
            )));
        }
        if self.inflows.len() != self.n_stages {
            return Err(HydroError::Invalid(format!(
                "inflows cover {} stages of {}",
                self.inflows.len(),
                self.n_stages
            )));
        }
        for (t, cases) in self.inflows.iter().enumerate() {
            if cases.is_empty() {
                return Err(HydroError::Invalid(format!("stage {} has no inflow case", t + 1)));
            }
            for case in cases {
                if case.inflow.len() != r {
                    return Err(HydroError::Invalid(format!(
                        "stage {} inflow vector has {} entries for {} reservoirs",
                        t + 1,
                        case.inflow.len(),
                        r
                    )));
                }
            }
        }
        for (i, res) in self.reservoirs.iter().enumerate() {
            if let Some(d) = res.downstream {
                if d >= r {
                    return Err(HydroError::Invalid(format!(
                        "reservoir {} drains to nonexistent reservoir {}",
                        i, d
                    )));
                }
                if d == i {
                    return Err(HydroError::Cycle { reservoir: i });
                }
            }
        }
        // Downstream chains must terminate: more hops than reservoirs
        // means some reservoir repeats.
        for start in 0..r {
            let mut at = start;
            let mut hops = 0;
            while let Some(d) = self.reservoirs[at].downstream {
                at = d;
                hops += 1;
                if hops > r {
                    return Err(HydroError::Cycle { reservoir: start });
                }
            }
        }
        Ok(())
    }

    /// Variable layout per stage: storages, releases, spills, thermals.
    /// Storage columns `0..R` are the state.
    pub fn compile(&self) -> Result<Instance, HydroError> {
        self.check()?;
        let nr = self.reservoirs.len();
        let nt = self.thermals.len();
        let n = 3 * nr + nt;
        let col_v = |r: usize| r;
        let col_u = |r: usize| nr + r;
        let col_s = |r: usize| 2 * nr + r;
        let col_g = |j: usize| 3 * nr + j;

        let mut cost = vec![0.0; n];
        for (j, th) in self.thermals.iter().enumerate() {
            cost[col_g(j)] = th.unit_cost;
        }
        let mut var_upper: Vec<Option<f64>> = vec![None; n];
        for (r, res) in self.reservoirs.iter().enumerate() {
            var_upper[col_v(r)] = Some(res.capacity);
            var_upper[col_u(r)] = Some(res.max_release);
        }
        for (j, th) in self.thermals.iter().enumerate() {
            var_upper[col_g(j)] = Some(th.capacity);
        }

        let mut stages = Vec::with_capacity(self.n_stages);
        for t in 0..self.n_stages {
            let mut rows = Vec::new();
            // Water balance: what a reservoir holds plus what it lets out
            // equals its carried storage, its inflow, and whatever its
            // upstream neighbors let out.
            for r in 0..nr {
                let mut coeffs = vec![(col_v(r), 1.0), (col_u(r), 1.0), (col_s(r), 1.0)];
                for (p, up) in self.reservoirs.iter().enumerate() {
                    if up.downstream == Some(r) {
                        coeffs.push((col_u(p), -1.0));
                        coeffs.push((col_s(p), -1.0));
                    }
                }
                rows.push(Row {
                    coeffs,
                    sense: RowSense::Eq,
                    relaxable: false,
                    slack_weight: None,
                    penalty_weight: None,
                    label: format!("balance:{}", r),
                });
            }
            let mut demand_coeffs: Vec<(usize, f64)> =
                (0..nr).map(|r| (col_u(r), 1.0)).collect();
            demand_coeffs.extend((0..nt).map(|j| (col_g(j), 1.0)));
            rows.push(Row {
                coeffs: demand_coeffs,
                sense: RowSense::Ge,
                relaxable: false,
                slack_weight: None,
                penalty_weight: None,
                label: "demand".into(),
            });
            let mut hoc: Vec<usize> = Vec::new();
            for (r, res) in self.reservoirs.iter().enumerate() {
                if res.min_outflow > 0.0 && t >= res.hoc_start_stage {
                    hoc.push(r);
                    // The classic-mode price defaults to the priority
                    // weight; solve-time overrides can re-price it.
                    rows.push(Row {
                        coeffs: vec![(col_u(r), 1.0), (col_s(r), 1.0)],
                        sense: RowSense::Ge,
                        relaxable: true,
                        slack_weight: Some(res.hoc_weight),
                        penalty_weight: Some(res.hoc_weight),
                        label: format!("min_outflow:{}", r),
                    });
                }
            }

            let realizations = self.inflows[t]
                .iter()
                .map(|case| {
                    let mut rhs = case.inflow.clone();
                    rhs.push(self.demand[t]);
                    rhs.extend(hoc.iter().map(|&r| self.reservoirs[r].min_outflow));
                    Realization { probability: case.probability, rhs }
                })
                .collect();

            stages.push(StageData {
                n,
                cost: cost.clone(),
                rows,
                // Carried storage enters the balance rhs: row r gains
                // v_prev[r].
                link: (0..nr).map(|r| (r, r, -1.0)).collect(),
                state_indices: (0..nr).collect(),
                var_upper: Some(var_upper.clone()),
                realizations,
            });
        }

        let instance = Instance {
            name: self.name.clone(),
            n_stages: self.n_stages,
            m: nr,
            initial_state: self.reservoirs.iter().map(|r| r.initial_storage).collect(),
            stages,
        };
        let issues = validate(&instance);
        if !issues.is_empty() {
            return Err(HydroError::Model(ModelError::Validation(issues)));
        }
        Ok(instance)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("system serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<HydroSystem, HydroError> {
        let sys: HydroSystem =
            serde_json::from_str(text).map_err(|e| HydroError::Invalid(e.to_string()))?;
        sys.check()?;
        Ok(sys)
    }
}

/// Expected water reaching each reservoir over the whole horizon: initial
/// storage, expected inflows, and everything its upstream neighbors can
/// pass down. Computed in topological order (cycles already excluded).
fn expected_water(sys: &HydroSystem) -> Vec<f64> {
    let nr = sys.reservoirs.len();
    let own: Vec<f64> = (0..nr)
        .map(|r| {
            let inflow: f64 = sys
                .inflows
                .iter()
                .map(|cases| cases.iter().map(|c| c.probability * c.inflow[r]).sum::<f64>())
                .sum();
            sys.reservoirs[r].initial_storage + inflow
        })
        .collect();
    fn walk(r: usize, sys: &HydroSystem, own: &[f64], memo: &mut [Option<f64>]) -> f64 {
        if let Some(v) = memo[r] {
            return v;
        }
        let mut v = own[r];
        for (p, up) in sys.reservoirs.iter().enumerate() {
            if up.downstream == Some(r) {
                v += walk(p, sys, own, memo);
            }
        }
        memo[r] = Some(v);
        v
    }
    let mut memo: Vec<Option<f64>> = vec![None; nr];
    (0..nr).map(|r| walk(r, sys, &own, &mut memo)).collect()
}

/// Builds a seeded random system. Guarantees, by construction:
/// thermal capacity covers demand at every stage; the first stage is
/// deterministic; inflow scenarios are symmetric around their mean with
/// multipliers within [0.6, 1.4]; and at `hoc_tightness` 1 the required
/// outflow (1.5x expected water) exceeds the water available on any path
/// (at most 1.4x), so some violation is unavoidable.
pub fn generate(params: &GenParams) -> Result<HydroSystem, HydroError> {
    if params.n_reservoirs == 0 || params.n_stages == 0 || params.n_thermals == 0 {
        return Err(HydroError::Invalid(
            "reservoir, stage, and thermal counts must be positive".into(),
        ));
    }
    if params.realizations_per_stage == 0 {
        return Err(HydroError::Invalid("realizations_per_stage must be positive".into()));
    }
    if !(0.0..=1.0).contains(&params.hoc_tightness) {
        return Err(HydroError::Invalid("hoc_tightness must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let nr = params.n_reservoirs;
    let t_stages = params.n_stages;

    let mut reservoirs: Vec<Reservoir> = (0..nr)
        .map(|r| {
            let capacity = 5.0 + 15.0 * rng.random::<f64>();
            let initial_storage = capacity * (0.2 + 0.6 * rng.random::<f64>());
            // Draining to a lower index only keeps the topology acyclic.
            let downstream = if r > 0 && rng.random::<f64>() < 0.5 {
                Some(rng.random_range(0..r))
            } else {
                None
            };
            Reservoir {
                capacity,
                initial_storage,
                downstream,
                max_release: 0.0,
                min_outflow: 0.0,
                hoc_weight: 0.5 + 1.5 * rng.random::<f64>(),
                hoc_start_stage: 0,
            }
        })
        .collect();

    let thermals: Vec<Thermal> = (0..params.n_thermals)
        .map(|_| Thermal {
            capacity: 3.0 + 7.0 * rng.random::<f64>(),
            unit_cost: 5.0 + 35.0 * rng.random::<f64>(),
        })
        .collect();
    let thermal_cap: f64 = thermals.iter().map(|t| t.capacity).sum();
    let demand: Vec<f64> =
        (0..t_stages).map(|_| thermal_cap * (0.4 + 0.4 * rng.random::<f64>())).collect();

    // Mean inflow per (stage, reservoir); scenarios scale the whole stage
    // vector by symmetric multipliers with uniform probabilities, so the
    // expectation is the mean exactly and no path strays beyond +-40%.
    let means: Vec<Vec<f64>> = (0..t_stages)
        .map(|_| (0..nr).map(|_| 1.0 + 5.0 * rng.random::<f64>()).collect())
        .collect();
    let mut inflows: Vec<Vec<InflowCase>> = Vec::with_capacity(t_stages);
    for (t, mean) in means.iter().enumerate() {
        let k = if t == 0 { 1 } else { params.realizations_per_stage };
        if k == 1 {
            inflows.push(vec![InflowCase { probability: 1.0, inflow: mean.clone() }]);
            continue;
        }
        let spread = 0.1 + 0.3 * rng.random::<f64>();
        let cases = (0..k)
            .map(|i| {
                let mult = 1.0 + spread * (2.0 * i as f64 / (k - 1) as f64 - 1.0);
                InflowCase {
                    probability: 1.0 / k as f64,
                    inflow: mean.iter().map(|a| a * mult).collect(),
                }
            })
            .collect();
        inflows.push(cases);
    }

    let mut sys = HydroSystem {
        name: format!(
            "hydro_r{}_t{}_k{}_s{}",
            nr, t_stages, params.realizations_per_stage, params.seed
        ),
        n_stages: t_stages,
        reservoirs: Vec::new(),
        thermals,
        demand,
        inflows,
    };
    sys.reservoirs = reservoirs.clone();

    let water = expected_water(&sys);
    for (r, res) in reservoirs.iter_mut().enumerate() {
        res.max_release = (0.8 + 0.8 * rng.random::<f64>()) * water[r] / t_stages as f64;
        res.min_outflow = params.hoc_tightness * 1.5 * water[r] / t_stages as f64;
    }
    sys.reservoirs = reservoirs;
    sys.check()?;
    Ok(sys)
}

/// The three hand-sized systems used throughout the tests: one with just
/// enough water to meet its outflow requirements, one short two units, and
/// a two-stage stochastic one whose requirement binds only at the end.
pub fn toy_feasible() -> HydroSystem {
    toy_base("toy_feasible", 7.0)
}

pub fn toy_infeasible() -> HydroSystem {
    toy_base("toy_infeasible", 5.0)
}

fn toy_base(name: &str, initial_storage: f64) -> HydroSystem {
    HydroSystem {
        name: name.into(),
        n_stages: 3,
        reservoirs: vec![Reservoir {
            capacity: 10.0,
            initial_storage,
            downstream: None,
            max_release: 10.0,
            min_outflow: 3.0,
            hoc_weight: 1.0,
            hoc_start_stage: 0,
        }],
        thermals: vec![Thermal { capacity: 10.0, unit_cost: 10.0 }],
        demand: vec![4.0, 4.0, 4.0],
        inflows: vec![
            vec![InflowCase { probability: 1.0, inflow: vec![2.0] }],
            vec![InflowCase { probability: 1.0, inflow: vec![0.0] }],
            vec![InflowCase { probability: 1.0, inflow: vec![0.0] }],
        ],
    }
}

pub fn toy_stochastic() -> HydroSystem {
    HydroSystem {
        name: "toy_stochastic".into(),
        n_stages: 2,
        reservoirs: vec![Reservoir {
            capacity: 10.0,
            initial_storage: 3.0,
            downstream: None,
            max_release: 10.0,
            min_outflow: 3.0,
            hoc_weight: 1.0,
            hoc_start_stage: 1,
        }],
        thermals: vec![Thermal { capacity: 10.0, unit_cost: 10.0 }],
        demand: vec![4.0, 4.0],
        inflows: vec![
            vec![InflowCase { probability: 1.0, inflow: vec![2.0] }],
            vec![
                InflowCase { probability: 0.5, inflow: vec![0.0] },
                InflowCase { probability: 0.5, inflow: vec![4.0] },
            ],
        ],
    }
}
