//! Entropic optimal transport between original crop patches (suppliers) and
//! predicted crop patches (demanders).
//!
//! Marginals are uniform `1/N`, so a plan carries unit total mass and the
//! transport loss is a weighted average of per-element squared errors.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON_REL: f64 = 0.1;
pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;
const EPSILON_FLOOR: f64 = 1e-9;

/// `c[i][j]` = mean over elements of `(target_i − prediction_j)²`.
pub fn cost_matrix(targets: ArrayView2<f64>, predictions: ArrayView2<f64>) -> Result<Array2<f64>> {
    if targets.dim() != predictions.dim() {
        return Err(Error::shape(format!(
            "targets {:?} vs predictions {:?}",
            targets.dim(),
            predictions.dim()
        )));
    }
    let (n, d) = targets.dim();
    if d == 0 {
        return Err(Error::shape("zero-length patches"));
    }
    // ‖r‖² + ‖r̂‖² − 2⟨r, r̂⟩ loses precision for near-equal patches, so sum directly
    let mut cost = Array2::zeros((n, n));
    for (i, t) in targets.outer_iter().enumerate() {
        for (j, p) in predictions.outer_iter().enumerate() {
            let s: f64 = t.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            cost[[i, j]] = s / d as f64;
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub cost: Array2<f64>,
    pub supply: Array1<f64>,
    pub demand: Array1<f64>,
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl TransportProblem {
    /// Uniform marginals with `ε = epsilon_rel · mean(cost)`, floored at 1e-9.
    pub fn uniform(cost: Array2<f64>, epsilon_rel: f64) -> Self {
        let n = cost.nrows();
        let mean = if cost.is_empty() { 0.0 } else { cost.mean().unwrap_or(0.0) };
        TransportProblem {
            supply: Array1::from_elem(n, 1.0 / n.max(1) as f64),
            demand: Array1::from_elem(cost.ncols(), 1.0 / cost.ncols().max(1) as f64),
            epsilon: (epsilon_rel * mean).max(EPSILON_FLOOR),
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            cost,
        }
    }

    pub fn with_limits(mut self, max_iters: usize, tol: f64) -> Self {
        self.max_iters = max_iters;
        self.tol = tol;
        self
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = self.cost.dim();
        if m == 0 || n == 0 || self.supply.len() != m || self.demand.len() != n {
            return Err(Error::shape(format!(
                "cost {:?} with marginals {} and {}",
                self.cost.dim(),
                self.supply.len(),
                self.demand.len()
            )));
        }
        if let Some(c) = self.cost.iter().find(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {c}")));
        }
        if self.cost.iter().any(|&c| c < 0.0) {
            return Err(Error::invalid("negative cost entry"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) || !(self.tol > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon {} and tol {} must be positive",
                self.epsilon, self.tol
            )));
        }
        let (su, sv) = (self.supply.sum(), self.demand.sum());
        if (su - 1.0).abs() > 1e-9 || (sv - 1.0).abs() > 1e-9 || self.supply.iter().chain(&self.demand).any(|&x| x <= 0.0) {
            return Err(Error::invalid(format!("marginals must be positive and sum to 1 (got {su}, {sv})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    /// The diagonal coupling `I/N`.
    pub fn diagonal(n: usize) -> Self {
        TransportPlan {
            plan: Array2::eye(n) / n as f64,
            iterations: 0,
            marginal_error: 0.0,
            converged: true,
        }
    }

    pub fn n(&self) -> usize {
        self.plan.nrows()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

const ANNEAL_FACTOR: f64 = 0.5;
const ANNEAL_SWEEPS: usize = 5;
/// Plain sweeps at the target epsilon before switching to Newton steps.
const SWEEPS_BEFORE_NEWTON: usize = 200;

fn marginal_violation(plan: &Array2<f64>, supply: &Array1<f64>, demand: &Array1<f64>) -> f64 {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let r = rows.iter().zip(supply).map(|(a, b)| (a - b).abs());
    let c = cols.iter().zip(demand).map(|(a, b)| (a - b).abs());
    r.chain(c).fold(0.0, f64::max)
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
/// Returns `None` when `A` is not numerically positive definite.
fn cholesky_solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    for k in 0..n {
        let mut d = a[[k, k]];
        for p in 0..k {
            d -= a[[k, p]] * a[[k, p]];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[[k, k]] = d;
        for i in k + 1..n {
            let mut v = a[[i, k]];
            for p in 0..k {
                v -= a[[i, p]] * a[[k, p]];
            }
            a[[i, k]] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for p in 0..i {
            v -= a[[i, p]] * b[p];
        }
        b[i] = v / a[[i, i]];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for p in i + 1..n {
            v -= a[[p, i]] * b[p];
        }
        b[i] = v / a[[i, i]];
    }
    Some(b)
}

struct Dual<'a> {
    c: &'a Array2<f64>,
    log_u: Array1<f64>,
    log_v: Array1<f64>,
    u: &'a Array1<f64>,
    v: &'a Array1<f64>,
    eps: f64,
}

impl Dual<'_> {
    fn plan(&self, f: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
        let (m, n) = self.c.dim();
        Array2::from_shape_fn((m, n), |(i, j)| ((f[i] + g[j] - self.c[[i, j]]) / self.eps).exp())
    }

    fn objective(&self, f: &Array1<f64>, g: &Array1<f64>) -> f64 {
        f.dot(self.u) + g.dot(self.v) - self.eps * self.plan(f, g).sum()
    }

    fn sweep(&self, f: &mut Array1<f64>, g: &mut Array1<f64>, eps: f64) {
        let (m, n) = self.c.dim();
        let c = self.c;
        for i in 0..m {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - c[[i, j]]) / eps));
            f[i] = eps * (self.log_u[i] - lse);
        }
        for j in 0..n {
            let lse = log_sum_exp((0..m).map(|i| (f[i] - c[[i, j]]) / eps));
            g[j] = eps * (self.log_v[j] - lse);
        }
    }

    /// One damped Newton ascent step on the concave dual, holding the last
    /// column potential fixed to remove the shift invariance. Returns false
    /// when no improving step is found.
    fn newton_step(&self, f: &mut Array1<f64>, g: &mut Array1<f64>) -> bool {
        let (m, n) = self.c.dim();
        let plan = self.plan(f, g);
        let rows = plan.sum_axis(Axis(1));
        let cols = plan.sum_axis(Axis(0));
        let k = m + n - 1;
        let mut h = Array2::zeros((k, k));
        let mut grad = Array1::zeros(k);
        for i in 0..m {
            h[[i, i]] = rows[i] / self.eps;
            grad[i] = self.u[i] - rows[i];
            for j in 0..n - 1 {
                h[[i, m + j]] = plan[[i, j]] / self.eps;
                h[[m + j, i]] = plan[[i, j]] / self.eps;
            }
        }
        for j in 0..n - 1 {
            h[[m + j, m + j]] = cols[j] / self.eps;
            grad[m + j] = self.v[j] - cols[j];
        }
        let scale = (0..k).map(|i| h[[i, i]]).fold(0.0, f64::max);
        let mut ridge = 0.0;
        let step = loop {
            let mut damped = h.clone();
            for i in 0..k {
                damped[[i, i]] += ridge;
            }
            if let Some(step) = cholesky_solve(damped, grad.clone()) {
                break step;
            }
            ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
            if ridge > scale {
                return false;
            }
        };
        let base = self.objective(f, g);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        while t > 1e-12 {
            let mut f2 = f.clone();
            let mut g2 = g.clone();
            f2.scaled_add(t, &step.slice(ndarray::s![..m]));
            for j in 0..n - 1 {
                g2[j] += t * step[m + j];
            }
            let value = self.objective(&f2, &g2);
            if value.is_finite() && value >= base + 1e-4 * t * slope {
                *f = f2;
                *g = g2;
                return true;
            }
            t *= 0.5;
        }
        false
    }
}

/// Moves a nearly feasible plan onto the exact marginals: shrink rows and
/// columns that carry too much mass, then spread the remaining deficit as a
/// rank-one correction. Entries stay nonnegative.
fn round_to_marginals(plan: &mut Array2<f64>, supply: &Array1<f64>, demand: &Array1<f64>) {
    let rows = plan.sum_axis(Axis(1));
    for (mut row, (&r, &u)) in plan.outer_iter_mut().zip(rows.iter().zip(supply)) {
        if r > u {
            row *= u / r;
        }
    }
    let cols = plan.sum_axis(Axis(0));
    for (mut col, (&c, &v)) in plan.columns_mut().into_iter().zip(cols.iter().zip(demand)) {
        if c > v {
            col *= v / c;
        }
    }
    let err_r = supply - &plan.sum_axis(Axis(1));
    let err_c = demand - &plan.sum_axis(Axis(0));
    let total = err_r.sum();
    if total > 0.0 {
        for ((i, j), w) in plan.indexed_iter_mut() {
            *w += err_r[i] * err_c[j] / total;
        }
    }
}

/// Log-domain Sinkhorn-Knopp on the dual potentials `(f, g)`.
///
/// The potentials are warm-started by annealing epsilon down from the cost
/// range. Instances whose optimal plan is close to a permutation contract
/// very slowly under plain sweeps; after a fixed number of sweeps those
/// switch to Newton steps on the same dual. The returned plan is rounded
/// onto the exact marginals; `marginal_error` is the violation before
/// rounding.
pub fn sinkhorn_solve(problem: &TransportProblem) -> Result<TransportPlan> {
    problem.validate()?;
    let c = &problem.cost;
    let (m, n) = c.dim();
    let dual = Dual {
        c,
        log_u: problem.supply.mapv(f64::ln),
        log_v: problem.demand.mapv(f64::ln),
        u: &problem.supply,
        v: &problem.demand,
        eps: problem.epsilon,
    };
    let mut f = Array1::<f64>::zeros(m);
    let mut g = Array1::<f64>::zeros(n);

    let mut iterations = 0;
    let c_max = c.iter().cloned().fold(0.0, f64::max);
    let mut stage_eps = c_max;
    while stage_eps > dual.eps && iterations < problem.max_iters {
        for _ in 0..ANNEAL_SWEEPS {
            dual.sweep(&mut f, &mut g, stage_eps);
        }
        iterations += ANNEAL_SWEEPS;
        stage_eps *= ANNEAL_FACTOR;
    }

    let mut plan = dual.plan(&f, &g);
    let mut error = marginal_violation(&plan, &problem.supply, &problem.demand);
    let mut sweeps = 0;
    let mut newton_ok = true;
    while error > problem.tol && iterations < problem.max_iters {
        if sweeps >= SWEEPS_BEFORE_NEWTON && newton_ok && n > 1 {
            newton_ok = dual.newton_step(&mut f, &mut g);
            // a sweep afterwards restores exact column sums
            dual.sweep(&mut f, &mut g, dual.eps);
        } else {
            dual.sweep(&mut f, &mut g, dual.eps);
            sweeps += 1;
        }
        iterations += 1;
        plan = dual.plan(&f, &g);
        error = marginal_violation(&plan, &problem.supply, &problem.demand);
    }
    if !plan.iter().all(|w| w.is_finite()) {
        return Err(Error::NonFinite("transport plan".into()));
    }
    round_to_marginals(&mut plan, &problem.supply, &problem.demand);
    Ok(TransportPlan {
        plan,
        iterations,
        marginal_error: error,
        converged: error <= problem.tol,
    })
}

/// `Σ_ij c_ij · ω_ij`.
pub fn ot_loss(cost: &Array2<f64>, plan: &TransportPlan) -> Result<f64> {
    if cost.dim() != plan.plan.dim() {
        return Err(Error::shape(format!(
            "cost {:?} vs plan {:?}",
            cost.dim(),
            plan.plan.dim()
        )));
    }
    Ok(Zip::from(cost).and(&plan.plan).fold(0.0, |acc, c, w| acc + c * w))
}

/// Gradient of the transport loss with respect to the predictions, holding
/// the plan fixed: `∂L/∂r̂_j = Σ_i ω_ij · 2(r̂_j − r_i) / D`.
pub fn ot_loss_grad(
    targets: ArrayView2<f64>,
    predictions: ArrayView2<f64>,
    plan: &TransportPlan,
) -> Result<Array2<f64>> {
    let (n, d) = predictions.dim();
    if targets.dim() != (n, d) || plan.plan.dim() != (n, n) {
        return Err(Error::shape(format!(
            "targets {:?}, predictions {:?}, plan {:?}",
            targets.dim(),
            predictions.dim(),
            plan.plan.dim()
        )));
    }
    let w = &plan.plan;
    let scale = 2.0 / d as f64;
    // Σ_i ω_ij (r̂_j − r_i) = (colsum_j) r̂_j − (Ωᵀ R)_j
    let col_mass = w.sum_axis(ndarray::Axis(0));
    let mut grad = w.t().dot(&targets);
    grad.mapv_inplace(|v| -v);
    for (j, mut row) in grad.outer_iter_mut().enumerate() {
        row.scaled_add(col_mass[j], &predictions.row(j));
    }
    grad.mapv_inplace(|v| v * scale);
    Ok(grad)
}

/// Exact transport value under uniform marginals: the minimum over all
/// permutations `σ` of `(1/N) Σ_i c[i][σ(i)]`. Enumerates every permutation.
pub fn exact_ot_oracle(cost: &Array2<f64>) -> Result<f64> {
    let (m, n) = cost.dim();
    if m != n || n == 0 {
        return Err(Error::shape(format!("square non-empty cost required, got {:?}", cost.dim())));
    }
    if n > 8 {
        return Err(Error::invalid(format!("N = {n} too large for enumeration (max 8)")));
    }
    // Heap's algorithm
    let mut perm: Vec<usize> = (0..n).collect();
    let value = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
    let mut best = value(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(value(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}
