//! Entropic optimal transport between feature clouds.
//!
//! The solver minimizes `<P, C> + eps * sum P (ln P - 1)` over couplings with
//! fixed marginals by Sinkhorn-Knopp scaling `u = r / (K v)`, `v = c / (K^T u)`
//! with `K = exp(-C / eps)`. Two code paths exist:
//!
//! - log domain (default): potentials are kept as logarithms and every kernel
//!   product is a log-sum-exp, so tiny `eps` cannot underflow;
//! - direct: plain scaling vectors, kept for cross-validation at moderate `eps`.
//!
//! The distance reported by [`sinkhorn_distance`] is the transport cost
//! `<P, C>` of the entropic plan. Its gradient with respect to the source
//! points is taken with the plan held fixed ([`sinkhorn_grad_features`]), which
//! is the exact gradient of the regularized objective
//! [`TransportPlan::regularized_cost`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Nonnegative ground-cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Data("cost matrix must be non-empty".into()));
        }
        if let Some(v) = values.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numerical(format!(
                "cost entries must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Squared Euclidean cost `C[i][j] = |x_i - y_j|^2`.
pub fn pairwise_cost(x: &Matrix, y: &Matrix) -> Result<CostMatrix> {
    if x.cols() != y.cols() {
        return Err(Error::shape(
            "feature cloud",
            format!("dimension {} vs {}", x.cols(), y.cols()),
        ));
    }
    if x.cols() == 0 {
        return Err(Error::Data("feature clouds need at least one dimension".into()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Numerical("feature cloud contains non-finite values".into()));
    }
    let mut cost = Matrix::zeros(x.rows(), y.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..y.rows() {
            let d: f64 = xi
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            cost.set(i, j, d);
        }
    }
    CostMatrix::new(cost)
}

/// Source (`r`) and target (`c`) probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    r: Vec<f64>,
    c: Vec<f64>,
}

impl Marginals {
    pub fn new(r: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        for (name, w) in [("r", &r), ("c", &c)] {
            if w.is_empty() {
                return Err(Error::Data(format!("marginal {name} is empty")));
            }
            if let Some(i) = w.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Data(format!(
                    "marginal {name} entry {i} must be positive, got {}",
                    w[i]
                )));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Data(format!("marginal {name} sums to {total}, not 1")));
            }
        }
        Ok(Self { r, c })
    }

    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Data("uniform marginals need n, m >= 1".into()));
        }
        Self::new(vec![1.0 / n as f64; n], vec![1.0 / m as f64; m])
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropy coefficient, in cost units.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the l1 row-marginal error falls to this value.
    pub tolerance: f64,
    pub log_domain: bool,
    /// Keep the per-iteration marginal error in [`TransportPlan::error_trace`].
    pub record_trace: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 500,
            tolerance: 1e-6,
            log_domain: true,
            record_trace: false,
        }
    }
}

impl SinkhornConfig {
    /// Configuration for the `1/lambda` entropy weighting, `lambda = 1 / epsilon`.
    pub fn from_lambda(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            epsilon: 1.0 / lambda,
            ..Self::default()
        })
    }

    pub fn lambda(&self) -> f64 {
        1.0 / self.epsilon
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(Error::Config(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scaling vectors of the solution `P = diag(u) K diag(v)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Potentials {
    Scaling { u: Vec<f64>, v: Vec<f64> },
    Log { log_u: Vec<f64>, log_v: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub potentials: Potentials,
    /// `<P, C>`.
    pub transport_cost: f64,
    /// `<P, C> + eps * sum P (ln P - 1)`; its gradient in `C` is `P`.
    pub regularized_cost: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest of the row and column l1 marginal errors of `plan`.
    pub marginal_error: f64,
    /// Row-marginal l1 error after each iteration, when requested.
    pub error_trace: Vec<f64>,
}

/// Runs Sinkhorn-Knopp scaling to the configured tolerance.
pub fn sinkhorn_plan(
    cost: &CostMatrix,
    marginals: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    if marginals.r.len() != cost.rows() || marginals.c.len() != cost.cols() {
        return Err(Error::shape(
            "marginals",
            format!(
                "{}x{} cost with marginals of length {} and {}",
                cost.rows(),
                cost.cols(),
                marginals.r.len(),
                marginals.c.len()
            ),
        ));
    }
    if cfg.log_domain {
        solve_log(cost, marginals, cfg)
    } else {
        solve_direct(cost, marginals, cfg)
    }
}

/// `ln sum_k exp(f(k))` for `k in 0..len`, shifted by the maximum term.
#[inline]
fn log_sum_exp_by(len: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for k in 0..len {
        max = max.max(f(k));
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = 0.0;
    for k in 0..len {
        sum += (f(k) - max).exp();
    }
    max + sum.ln()
}

fn solve_log(cost: &CostMatrix, marginals: &Marginals, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (n, m) = (cost.rows(), cost.cols());
    let inv_eps = 1.0 / cfg.epsilon;
    let log_r: Vec<f64> = marginals.r.iter().map(|v| v.ln()).collect();
    let log_c: Vec<f64> = marginals.c.iter().map(|v| v.ln()).collect();
    // Scaled kernel exponent -C/eps, computed once.
    let neg_scaled: Vec<f64> = cost.as_matrix().as_slice().iter().map(|c| -c * inv_eps).collect();

    let row_lse = |log_v: &[f64], out: &mut Vec<f64>| {
        out.clear();
        for i in 0..n {
            let row = &neg_scaled[i * m..(i + 1) * m];
            out.push(log_sum_exp_by(m, |j| row[j] + log_v[j]));
        }
    };

    let mut log_u = vec![0.0; n];
    let mut log_v = vec![0.0; m];
    let mut lse = Vec::with_capacity(n);
    row_lse(&log_v, &mut lse);

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        for i in 0..n {
            log_u[i] = log_r[i] - lse[i];
        }
        for j in 0..m {
            let col = log_sum_exp_by(n, |i| neg_scaled[i * m + j] + log_u[i]);
            log_v[j] = log_c[j] - col;
        }
        iterations += 1;
        row_lse(&log_v, &mut lse);
        let err: f64 = (0..n)
            .map(|i| ((log_u[i] + lse[i]).exp() - marginals.r[i]).abs())
            .sum();
        if !err.is_finite() {
            return Err(Error::Numerical(format!(
                "log-domain Sinkhorn diverged at iteration {iterations}"
            )));
        }
        if cfg.record_trace {
            trace.push(err);
        }
        if err <= cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut plan = Matrix::zeros(n, m);
    let mut transport_cost = 0.0;
    let mut entropy_term = 0.0;
    for i in 0..n {
        for j in 0..m {
            let log_p = log_u[i] + log_v[j] + neg_scaled[i * m + j];
            let p = log_p.exp();
            plan.set(i, j, p);
            transport_cost += p * cost.get(i, j);
            if p > 0.0 {
                entropy_term += p * (log_p - 1.0);
            }
        }
    }
    finish(
        plan,
        Potentials::Log { log_u, log_v },
        transport_cost,
        entropy_term,
        iterations,
        converged,
        trace,
        marginals,
        cfg,
    )
}

fn solve_direct(
    cost: &CostMatrix,
    marginals: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    let (n, m) = (cost.rows(), cost.cols());
    let kernel: Vec<f64> = cost
        .as_matrix()
        .as_slice()
        .iter()
        .map(|c| (-c / cfg.epsilon).exp())
        .collect();
    let underflow = || {
        Error::Numerical(format!(
            "kernel exp(-C/eps) underflows at eps = {}; retry with log_domain = true",
            cfg.epsilon
        ))
    };
    let row_empty = (0..n).any(|i| kernel[i * m..(i + 1) * m].iter().all(|k| *k == 0.0));
    let col_empty = (0..m).any(|j| (0..n).all(|i| kernel[i * m + j] == 0.0));
    if row_empty || col_empty || kernel.iter().any(|k| !k.is_finite()) {
        return Err(underflow());
    }

    let kv = |v: &[f64], out: &mut Vec<f64>| {
        out.clear();
        for i in 0..n {
            out.push(kernel[i * m..(i + 1) * m].iter().zip(v).map(|(k, x)| k * x).sum());
        }
    };

    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv_buf = Vec::with_capacity(n);
    kv(&v, &mut kv_buf);

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        for i in 0..n {
            u[i] = marginals.r[i] / kv_buf[i];
        }
        for j in 0..m {
            let ktu: f64 = (0..n).map(|i| kernel[i * m + j] * u[i]).sum();
            v[j] = marginals.c[j] / ktu;
        }
        iterations += 1;
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(underflow());
        }
        kv(&v, &mut kv_buf);
        let err: f64 = (0..n).map(|i| (u[i] * kv_buf[i] - marginals.r[i]).abs()).sum();
        if cfg.record_trace {
            trace.push(err);
        }
        if err <= cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut plan = Matrix::zeros(n, m);
    let mut transport_cost = 0.0;
    let mut entropy_term = 0.0;
    for i in 0..n {
        let log_ui = u[i].ln();
        for j in 0..m {
            let p = u[i] * kernel[i * m + j] * v[j];
            plan.set(i, j, p);
            transport_cost += p * cost.get(i, j);
            if p > 0.0 {
                let log_p = log_ui + v[j].ln() - cost.get(i, j) / cfg.epsilon;
                entropy_term += p * (log_p - 1.0);
            }
        }
    }
    if !plan.is_finite() {
        return Err(underflow());
    }
    finish(
        plan,
        Potentials::Scaling { u, v },
        transport_cost,
        entropy_term,
        iterations,
        converged,
        trace,
        marginals,
        cfg,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    plan: Matrix,
    potentials: Potentials,
    transport_cost: f64,
    entropy_term: f64,
    iterations_used: usize,
    converged: bool,
    error_trace: Vec<f64>,
    marginals: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    let (row_err, col_err) = marginal_errors(&plan, marginals);
    let regularized_cost = transport_cost + cfg.epsilon * entropy_term;
    if !transport_cost.is_finite() || !regularized_cost.is_finite() {
        return Err(Error::Numerical("transport cost is not finite".into()));
    }
    Ok(TransportPlan {
        plan,
        potentials,
        transport_cost,
        regularized_cost,
        iterations_used,
        converged,
        marginal_error: row_err.max(col_err),
        error_trace,
    })
}

/// l1 errors of the row and column sums of `plan` against the marginals.
pub fn marginal_errors(plan: &Matrix, marginals: &Marginals) -> (f64, f64) {
    let row: f64 = (0..plan.rows())
        .map(|i| (plan.row(i).iter().sum::<f64>() - marginals.r[i]).abs())
        .sum();
    let col: f64 = (0..plan.cols())
        .map(|j| ((0..plan.rows()).map(|i| plan.get(i, j)).sum::<f64>() - marginals.c[j]).abs())
        .sum();
    (row, col)
}

/// Entropic OT between two clouds under squared Euclidean cost and uniform
/// weights. Returns the transport cost `<P, C>` and the plan.
pub fn sinkhorn_distance(x: &Matrix, y: &Matrix, cfg: &SinkhornConfig) -> Result<(f64, TransportPlan)> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Data("feature clouds must be non-empty".into()));
    }
    let cost = pairwise_cost(x, y)?;
    let marginals = Marginals::uniform(x.rows(), y.rows())?;
    let plan = sinkhorn_plan(&cost, &marginals, cfg)?;
    Ok((plan.transport_cost, plan))
}

/// Gradient of `<P, C(x, y)>` in the source points with `P` held fixed:
/// `g_i = sum_j P_ij * 2 (x_i - y_j)`.
pub fn sinkhorn_grad_features(x: &Matrix, y: &Matrix, plan: &TransportPlan) -> Result<Matrix> {
    let p = &plan.plan;
    if p.rows() != x.rows() || p.cols() != y.rows() || x.cols() != y.cols() {
        return Err(Error::shape(
            "transport plan",
            format!(
                "{}x{} plan for clouds {}x{} and {}x{}",
                p.rows(),
                p.cols(),
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols()
            ),
        ));
    }
    let k = x.cols();
    let mut grad = Matrix::zeros(x.rows(), k);
    for i in 0..x.rows() {
        let xi = x.row(i);
        let gi = grad.row_mut(i);
        for j in 0..y.rows() {
            let pij = p.get(i, j);
            if pij == 0.0 {
                continue;
            }
            for (d, (xv, yv)) in xi.iter().zip(y.row(j)).enumerate() {
                gi[d] += pij * 2.0 * (xv - yv);
            }
        }
    }
    Ok(grad)
}

/// Largest square problem [`exact_ot_oracle`] will enumerate.
pub const ORACLE_MAX_N: usize = 8;

/// Exact OT cost under uniform marginals by enumerating permutations.
///
/// With equal uniform weights the transport polytope's vertices are scaled
/// permutation matrices, so `min_sigma (1/n) sum_i C[i][sigma(i)]` is optimal.
pub fn exact_ot_oracle(cost: &CostMatrix) -> Result<f64> {
    let n = cost.rows();
    if n != cost.cols() {
        return Err(Error::Data(format!(
            "exact oracle needs a square cost, got {}x{}",
            n,
            cost.cols()
        )));
    }
    if n > ORACLE_MAX_N {
        return Err(Error::Data(format!(
            "exact oracle limited to n <= {ORACLE_MAX_N}, got {n}"
        )));
    }
    // Heap's algorithm, iterative form.
    let mut perm: Vec<usize> = (0..n).collect();
    let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>();
    let mut best = score(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            let swap_with = if i % 2 == 0 { 0 } else { counters[i] };
            perm.swap(swap_with, i);
            best = best.min(score(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}
