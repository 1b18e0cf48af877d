//! Multistage stochastic linear programming with hard operating constraints.
//!
//! The crate trains release policies for problems of the form
//!
//! ```text
//!   min  c_t'x_t + E[cost-to-go]
//!   s.t. A_t x_t  {>=,=}  b_t(xi_t) - D_t x_{t-1},    x_t >= 0,
//! ```
//!
//! where some `>=` rows are *relaxable*: physically hard constraints that a
//! policy may be forced to violate when the noise turns against it. Two
//! training modes are provided:
//!
//! * **penalty-free**: each stage first solves a minimum-violation problem
//!   (building a recursion of *feasibility cuts* that measure the violation
//!   still to come), then a cost problem in which slacks are capped at their
//!   minimal values instead of being priced. Costs stay in currency units and
//!   violations are reported separately.
//! * **classic**: slacks are penalized directly in the stage objective, the
//!   conventional formulation that requires calibrating penalty weights.
//!
//! An extensive-form (deterministic-equivalent) oracle over the full scenario
//! tree provides ground truth for both the minimal achievable violation and
//! the cheapest cost at that violation level.
//!
//! Modules mirror the pipeline: [`model`] (problem data + instance files),
//! [`lp`] (simplex kernel + extensive form), [`cuts`] (cut pools and trained
//! policies), [`stage`] (stage subproblems and cut extraction), [`engine`]
//! (forward/backward training loop), [`hydro`] (hydrothermal instance
//! generator and the canonical fixtures).
//!
//! Indexing convention: stages, rows, variables, and realizations are 0-based
//! throughout the API; human-facing messages and serialized reports number
//! stages from 1.

pub mod cuts;
pub mod engine;
pub mod hydro;
pub mod lp;
pub mod model;
pub mod stage;
