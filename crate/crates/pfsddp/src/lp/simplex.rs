//! Bounded-variable revised simplex with a dense basis inverse.
//!
//! Standard form: one logical variable per row turns `A x {>=,<=,=} b` into
//! `A x + y = b` with `y <= 0`, `y >= 0`, or `y = 0` respectively. Phase 1
//! starts from the all-logical basis and minimizes total bound violation by
//! temporarily widening the bounds of violated logicals (unit cost toward
//! the true bound); phase 2 restores true bounds and costs and continues
//! from the feasible basis. Pricing is Dantzig with smallest-index
//! tie-breaking, switching to Bland's rule after a long degenerate streak so
//! cycling is impossible. Every choice is deterministic.

use super::{LinearProgram, LpError, LpSense, LpSolution, LpStatus};

const PIVOT_TOL: f64 = 1e-9;
const ZERO_TOL: f64 = 1e-11;
const DJ_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
// Refactorize the basis inverse after this many product-form updates.
const REFACTOR_EVERY: u64 = 64;
// Consecutive degenerate pivots before switching to Bland's rule.
const BLAND_TRIGGER: u32 = 60;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic free variable parked at zero.
    Free,
}

enum LoopEnd {
    Optimal,
    Unbounded,
}

pub(super) fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    debug_assert_eq!(lp.objective.len(), lp.n_vars);
    debug_assert_eq!(lp.var_bounds.len(), lp.n_vars);
    // An empty bound box is infeasible regardless of the rows.
    for &(lo, hi) in &lp.var_bounds {
        if lo > hi {
            return Ok(infeasible_solution(lp, lo - hi));
        }
    }
    Simplex::new(lp).run()
}

fn infeasible_solution(lp: &LinearProgram, violation: f64) -> LpSolution {
    LpSolution {
        status: LpStatus::Infeasible,
        primal: vec![0.0; lp.n_vars],
        objective_value: violation,
        row_duals: vec![0.0; lp.rows.len()],
        reduced_costs: vec![0.0; lp.n_vars],
    }
}

struct Simplex<'a> {
    lp: &'a LinearProgram,
    m: usize,
    n: usize,
    /// Structural columns, row-index sorted, duplicates merged.
    cols: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    /// Working bounds; phase 1 relaxes some logical bounds temporarily.
    lo: Vec<f64>,
    hi: Vec<f64>,
    true_lo: Vec<f64>,
    true_hi: Vec<f64>,
    cost: Vec<f64>,
    x: Vec<f64>,
    state: Vec<VarState>,
    basis: Vec<usize>,
    /// Dense m x m basis inverse, row-major.
    binv: Vec<f64>,
    bland: bool,
    degen_streak: u32,
    updates_since_refactor: u64,
}

impl<'a> Simplex<'a> {
    fn new(lp: &'a LinearProgram) -> Self {
        let m = lp.rows.len();
        let n = lp.n_vars;
        let ncols = n + m;

        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut b = Vec::with_capacity(m);
        for (i, row) in lp.rows.iter().enumerate() {
            b.push(row.rhs);
            for &(j, v) in &row.coeffs {
                debug_assert!(j < n, "row {} references variable {} of {}", i, j, n);
                if v != 0.0 {
                    cols[j].push((i, v));
                }
            }
        }
        for col in &mut cols {
            col.sort_unstable_by_key(|&(i, _)| i);
            col.dedup_by(|later, kept| {
                if later.0 == kept.0 {
                    kept.1 += later.1;
                    true
                } else {
                    false
                }
            });
        }

        let mut true_lo = Vec::with_capacity(ncols);
        let mut true_hi = Vec::with_capacity(ncols);
        for &(l, h) in &lp.var_bounds {
            true_lo.push(l);
            true_hi.push(h);
        }
        for row in &lp.rows {
            let (l, h) = match row.sense {
                LpSense::Ge => (f64::NEG_INFINITY, 0.0),
                LpSense::Le => (0.0, f64::INFINITY),
                LpSense::Eq => (0.0, 0.0),
            };
            true_lo.push(l);
            true_hi.push(h);
        }

        // Structurals start at their natural anchor; logicals absorb b - A x.
        let mut x = vec![0.0; ncols];
        let mut state = vec![VarState::Free; ncols];
        for j in 0..n {
            if true_lo[j] > f64::NEG_INFINITY {
                x[j] = true_lo[j];
                state[j] = VarState::AtLower;
            } else if true_hi[j] < f64::INFINITY {
                x[j] = true_hi[j];
                state[j] = VarState::AtUpper;
            } else {
                x[j] = 0.0;
                state[j] = VarState::Free;
            }
        }
        let mut logical_vals = b.clone();
        for j in 0..n {
            if x[j] != 0.0 {
                for &(i, v) in &cols[j] {
                    logical_vals[i] -= v * x[j];
                }
            }
        }
        let mut basis = Vec::with_capacity(m);
        for i in 0..m {
            x[n + i] = logical_vals[i];
            state[n + i] = VarState::Basic;
            basis.push(n + i);
        }
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }

        Simplex {
            lp,
            m,
            n,
            cols,
            b,
            lo: true_lo.clone(),
            hi: true_hi.clone(),
            true_lo,
            true_hi,
            cost: vec![0.0; ncols],
            x,
            state,
            basis,
            binv,
            bland: false,
            degen_streak: 0,
            updates_since_refactor: 0,
        }
    }

    fn run(mut self) -> Result<LpSolution, LpError> {
        // Phase 1: relax violated logical bounds and price them back in.
        let mut needs_phase1 = false;
        for i in 0..self.m {
            let j = self.n + i;
            if self.x[j] > self.true_hi[j] + FEAS_TOL {
                self.lo[j] = self.true_hi[j];
                self.hi[j] = f64::INFINITY;
                self.cost[j] = 1.0;
                needs_phase1 = true;
            } else if self.x[j] < self.true_lo[j] - FEAS_TOL {
                self.lo[j] = f64::NEG_INFINITY;
                self.hi[j] = self.true_lo[j];
                self.cost[j] = -1.0;
                needs_phase1 = true;
            }
        }

        if needs_phase1 {
            match self.pivot_loop()? {
                LoopEnd::Optimal => {}
                LoopEnd::Unbounded => {
                    return Err(LpError::NumericalFailure(
                        "phase 1 reported an unbounded direction".into(),
                    ))
                }
            }
            self.recompute_basics();
            let violation = self.total_true_violation();
            if violation > 1e-7 {
                return Ok(infeasible_solution_from(&self, violation));
            }
            self.restore_true_bounds()?;
        }

        // Phase 2 with the real objective.
        for j in 0..self.n {
            self.cost[j] = self.lp.objective[j];
        }
        for i in 0..self.m {
            self.cost[self.n + i] = 0.0;
        }
        self.bland = false;
        self.degen_streak = 0;
        let end = self.pivot_loop()?;
        self.refactor()?;
        self.recompute_basics();

        match end {
            LoopEnd::Unbounded => Ok(LpSolution {
                status: LpStatus::Unbounded,
                primal: self.x[..self.n].to_vec(),
                objective_value: f64::NEG_INFINITY,
                row_duals: vec![0.0; self.m],
                reduced_costs: vec![0.0; self.n],
            }),
            LoopEnd::Optimal => {
                let violation = self.total_true_violation();
                if violation > 1e-7 {
                    return Err(LpError::NumericalFailure(format!(
                        "optimal basis violates bounds by {:.3e}",
                        violation
                    )));
                }
                let duals = self.row_duals();
                let mut reduced = Vec::with_capacity(self.n);
                for j in 0..self.n {
                    if self.state[j] == VarState::Basic {
                        reduced.push(0.0);
                    } else {
                        let mut d = self.lp.objective[j];
                        for &(i, v) in &self.cols[j] {
                            d -= duals[i] * v;
                        }
                        reduced.push(d);
                    }
                }
                let objective_value = self
                    .lp
                    .objective
                    .iter()
                    .zip(&self.x)
                    .map(|(c, x)| c * x)
                    .sum();
                Ok(LpSolution {
                    status: LpStatus::Optimal,
                    primal: self.x[..self.n].to_vec(),
                    objective_value,
                    row_duals: duals,
                    reduced_costs: reduced,
                })
            }
        }
    }

    /// Pivots until no eligible entering column remains (Optimal) or an
    /// entering direction is unblocked (Unbounded).
    fn pivot_loop(&mut self) -> Result<LoopEnd, LpError> {
        let max_iters = 50 * (self.m + self.n + 10) as u64 + 10_000;
        let mut iters = 0u64;
        loop {
            iters += 1;
            if iters > max_iters {
                return Err(LpError::NumericalFailure(format!(
                    "iteration limit {} exceeded",
                    max_iters
                )));
            }
            if self.updates_since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
                self.recompute_basics();
            }

            let duals = self.row_duals();
            let entering = self.price(&duals);
            let Some((q, dir)) = entering else {
                return Ok(LoopEnd::Optimal);
            };

            // Ratio test along x_q moving by `dir`.
            let w = self.ftran(q);
            let range = self.hi[q] - self.lo[q];
            let mut t_best = if range.is_finite() { range } else { f64::INFINITY };
            let mut leave: Option<usize> = None; // row index
            let mut leave_to_upper = false;
            let mut best_delta_abs = 0.0;
            for (i, &wi) in w.iter().enumerate() {
                let delta = -dir * wi; // d x_B[i] / d t
                if delta > PIVOT_TOL {
                    let room = self.hi[self.basis[i]] - self.x[self.basis[i]];
                    let t = (room / delta).max(0.0);
                    if self.ratio_prefers(t, delta, i, t_best, best_delta_abs, leave) {
                        t_best = t;
                        leave = Some(i);
                        leave_to_upper = true;
                        best_delta_abs = delta.abs();
                    }
                } else if delta < -PIVOT_TOL {
                    let room = self.x[self.basis[i]] - self.lo[self.basis[i]];
                    let t = (room / -delta).max(0.0);
                    if self.ratio_prefers(t, delta, i, t_best, best_delta_abs, leave) {
                        t_best = t;
                        leave = Some(i);
                        leave_to_upper = false;
                        best_delta_abs = delta.abs();
                    }
                }
            }

            if t_best == f64::INFINITY {
                return Ok(LoopEnd::Unbounded);
            }
            self.degen_streak = if t_best <= 1e-10 { self.degen_streak + 1 } else { 0 };
            if self.degen_streak >= BLAND_TRIGGER {
                self.bland = true;
            } else if self.degen_streak == 0 {
                self.bland = false;
            }

            match leave {
                None => {
                    // Bound flip: x_q runs to its opposite bound, basis unchanged.
                    let t = t_best * dir;
                    for (i, &wi) in w.iter().enumerate() {
                        if wi != 0.0 {
                            self.x[self.basis[i]] -= t * wi;
                        }
                    }
                    if dir > 0.0 {
                        self.x[q] = self.hi[q];
                        self.state[q] = VarState::AtUpper;
                    } else {
                        self.x[q] = self.lo[q];
                        self.state[q] = VarState::AtLower;
                    }
                }
                Some(r) => {
                    let pivot = w[r];
                    if pivot.abs() < ZERO_TOL {
                        self.refactor()?;
                        self.recompute_basics();
                        continue;
                    }
                    let t = t_best * dir;
                    for (i, &wi) in w.iter().enumerate() {
                        if i != r && wi != 0.0 {
                            self.x[self.basis[i]] -= t * wi;
                        }
                    }
                    let p = self.basis[r];
                    // Leaving variable lands exactly on its blocking bound.
                    if leave_to_upper {
                        self.x[p] = self.hi[p];
                        self.state[p] = VarState::AtUpper;
                    } else {
                        self.x[p] = self.lo[p];
                        self.state[p] = VarState::AtLower;
                    }
                    // A phase-1-relaxed variable can only exit at the edge
                    // of its true range (the shifted lower bound is the
                    // true upper, and vice versa). Restore it on the spot:
                    // it must be free to re-enter moving into its true
                    // range, and it no longer counts as infeasible.
                    if self.lo[p] != self.true_lo[p] || self.hi[p] != self.true_hi[p] {
                        self.lo[p] = self.true_lo[p];
                        self.hi[p] = self.true_hi[p];
                        self.cost[p] = 0.0;
                        self.state[p] = if leave_to_upper {
                            VarState::AtLower
                        } else {
                            VarState::AtUpper
                        };
                    }
                    self.x[q] += t;
                    self.state[q] = VarState::Basic;
                    self.basis[r] = q;
                    self.update_binv(r, &w);
                    self.updates_since_refactor += 1;
                }
            }
        }
    }

    /// Whether row `i` at ratio `t` (column step `delta`) displaces the
    /// current blocking candidate. Near-ties prefer the larger pivot for
    /// stability; under Bland's rule, the smallest basic variable index.
    fn ratio_prefers(
        &self,
        t: f64,
        delta: f64,
        i: usize,
        t_best: f64,
        best_delta_abs: f64,
        leave: Option<usize>,
    ) -> bool {
        let tie = (t - t_best).abs() <= 1e-9 * (1.0 + t_best.abs());
        if !tie {
            return t < t_best;
        }
        match leave {
            // Ties against the entering variable's own bound flip: a basis
            // change keeps the iteration count visible in the basis, but the
            // flip is cheaper; keep the flip unless a row strictly improves.
            None => t < t_best,
            Some(r) => {
                if self.bland {
                    self.basis[i] < self.basis[r]
                } else {
                    delta.abs() > best_delta_abs
                }
            }
        }
    }

    /// Entering column and direction, or `None` at optimality.
    fn price(&self, duals: &[f64]) -> Option<(usize, f64)> {
        let ncols = self.n + self.m;
        let mut best: Option<(usize, f64, f64)> = None; // (col, dir, score)
        for j in 0..ncols {
            match self.state[j] {
                VarState::Basic => continue,
                _ => {}
            }
            if self.lo[j] == self.hi[j] {
                continue; // fixed
            }
            let mut d = self.cost[j];
            if j < self.n {
                for &(i, v) in &self.cols[j] {
                    d -= duals[i] * v;
                }
            } else {
                d -= duals[j - self.n];
            }
            let dir = match self.state[j] {
                VarState::AtLower => {
                    if d < -DJ_TOL {
                        1.0
                    } else {
                        continue;
                    }
                }
                VarState::AtUpper => {
                    if d > DJ_TOL {
                        -1.0
                    } else {
                        continue;
                    }
                }
                VarState::Free => {
                    if d < -DJ_TOL {
                        1.0
                    } else if d > DJ_TOL {
                        -1.0
                    } else {
                        continue;
                    }
                }
                VarState::Basic => unreachable!(),
            };
            if self.bland {
                return Some((j, dir));
            }
            let score = d.abs();
            match best {
                Some((_, _, s)) if s >= score => {}
                _ => best = Some((j, dir, score)),
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    /// w = B^-1 a_q.
    fn ftran(&self, q: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.m];
        if q < self.n {
            for &(i, v) in &self.cols[q] {
                for k in 0..self.m {
                    w[k] += self.binv[k * self.m + i] * v;
                }
            }
        } else {
            let i = q - self.n;
            for k in 0..self.m {
                w[k] = self.binv[k * self.m + i];
            }
        }
        w
    }

    /// lambda = c_B^T B^-1 under the working costs.
    fn row_duals(&self) -> Vec<f64> {
        let mut lam = vec![0.0; self.m];
        for (k, &j) in self.basis.iter().enumerate() {
            let c = self.cost[j];
            if c != 0.0 {
                for i in 0..self.m {
                    lam[i] += c * self.binv[k * self.m + i];
                }
            }
        }
        lam
    }

    /// Product-form update of the dense inverse after column `q` (with
    /// ftran image `w`) replaced the basic variable of row `r`.
    fn update_binv(&mut self, r: usize, w: &[f64]) {
        let m = self.m;
        let pivot = w[r];
        let inv_pivot = 1.0 / pivot;
        for c in 0..m {
            self.binv[r * m + c] *= inv_pivot;
        }
        for i in 0..m {
            if i != r && w[i] != 0.0 {
                let f = w[i];
                for c in 0..m {
                    self.binv[i * m + c] -= f * self.binv[r * m + c];
                }
            }
        }
    }

    /// Rebuilds the inverse from the basis columns by Gauss-Jordan with
    /// partial pivoting.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        if m == 0 {
            return Ok(());
        }
        let mut a = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            if j < self.n {
                for &(i, v) in &self.cols[j] {
                    a[i * m + k] = v;
                }
            } else {
                a[(j - self.n) * m + k] = 1.0;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for col in 0..m {
            let mut piv_row = col;
            let mut piv_val = a[col * m + col].abs();
            for r in col + 1..m {
                let v = a[r * m + col].abs();
                if v > piv_val {
                    piv_val = v;
                    piv_row = r;
                }
            }
            if piv_val < 1e-12 {
                return Err(LpError::NumericalFailure("singular basis".into()));
            }
            if piv_row != col {
                for c in 0..m {
                    a.swap(col * m + c, piv_row * m + c);
                    inv.swap(col * m + c, piv_row * m + c);
                }
                // Row swap of [A|I] permutes equations, not the basis order;
                // the final inverse is unaffected.
            }
            let scale = 1.0 / a[col * m + col];
            for c in 0..m {
                a[col * m + c] *= scale;
                inv[col * m + c] *= scale;
            }
            for r in 0..m {
                if r != col {
                    let f = a[r * m + col];
                    if f != 0.0 {
                        for c in 0..m {
                            a[r * m + c] -= f * a[col * m + c];
                            inv[r * m + c] -= f * inv[col * m + c];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        self.updates_since_refactor = 0;
        Ok(())
    }

    /// x_B = B^-1 (b - N x_N), from scratch.
    fn recompute_basics(&mut self) {
        let m = self.m;
        let mut r = self.b.clone();
        for j in 0..self.n {
            if self.state[j] != VarState::Basic && self.x[j] != 0.0 {
                for &(i, v) in &self.cols[j] {
                    r[i] -= v * self.x[j];
                }
            }
        }
        for i in 0..m {
            let j = self.n + i;
            if self.state[j] != VarState::Basic && self.x[j] != 0.0 {
                r[i] -= self.x[j];
            }
        }
        for k in 0..m {
            let mut v = 0.0;
            for i in 0..m {
                v += self.binv[k * m + i] * r[i];
            }
            self.x[self.basis[k]] = v;
        }
    }

    /// Total violation of the *true* bounds at the current point.
    fn total_true_violation(&self) -> f64 {
        let mut total = 0.0;
        for j in 0..self.n + self.m {
            if self.x[j] > self.true_hi[j] {
                total += self.x[j] - self.true_hi[j];
            } else if self.x[j] < self.true_lo[j] {
                total += self.true_lo[j] - self.x[j];
            }
        }
        total
    }

    /// After a feasible phase 1: drop the temporary bounds and relabel
    /// nonbasic variables against the true bounds.
    fn restore_true_bounds(&mut self) -> Result<(), LpError> {
        for j in 0..self.n + self.m {
            self.lo[j] = self.true_lo[j];
            self.hi[j] = self.true_hi[j];
            if self.state[j] == VarState::Basic {
                continue;
            }
            let (lo, hi) = (self.true_lo[j], self.true_hi[j]);
            let v = self.x[j];
            if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
                self.state[j] = VarState::Free;
                continue;
            }
            let d_lo = (v - lo).abs();
            let d_hi = (v - hi).abs();
            if d_lo <= d_hi {
                if d_lo > 1e-7 {
                    return Err(LpError::NumericalFailure(format!(
                        "nonbasic variable {} strictly inside its bounds after phase 1",
                        j
                    )));
                }
                self.x[j] = lo;
                self.state[j] = VarState::AtLower;
            } else {
                if d_hi > 1e-7 {
                    return Err(LpError::NumericalFailure(format!(
                        "nonbasic variable {} strictly inside its bounds after phase 1",
                        j
                    )));
                }
                self.x[j] = hi;
                self.state[j] = VarState::AtUpper;
            }
        }
        self.recompute_basics();
        Ok(())
    }
}

fn infeasible_solution_from(s: &Simplex, violation: f64) -> LpSolution {
    LpSolution {
        status: LpStatus::Infeasible,
        primal: s.x[..s.n].to_vec(),
        objective_value: violation,
        row_duals: vec![0.0; s.m],
        reduced_costs: vec![0.0; s.n],
    }
}
