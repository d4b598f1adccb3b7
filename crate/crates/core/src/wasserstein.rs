//! Exact optimal transport between empirical measures.
//!
//! Uniform measures of equal size are matched with a shortest augmenting
//! path assignment solver (Jonker–Volgenant style, with dual potentials).
//! General weights go through successive shortest paths on the bipartite
//! transportation network. In one dimension any cost that is a convex
//! function of `|x - y|` is minimized by the monotone (quantile) coupling,
//! which serves as an oracle and as the fast path for large samples.
//!
//! Two costs are supported: `ρ^p` and `ρ^p ∨ ρ`. Values are reported as the
//! `1/p`-th power of the optimal average cost in both cases.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Largest instance handed to the cubic-time exact solvers.
pub const MAX_EXACT_POINTS: usize = 4096;

const FLOW_EPS: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricContext {
    Euclidean,
    /// Distances scaled by `e^{log_scale}`.
    Conformal { log_scale: f64 },
}

impl MetricContext {
    fn factor(&self) -> f64 {
        match self {
            MetricContext::Euclidean => 1.0,
            MetricContext::Conformal { log_scale } => log_scale.exp(),
        }
    }
}

/// A weighted point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// Row-major points, `dim` coordinates each.
    points: Vec<f64>,
    weights: Vec<f64>,
    context: MetricContext,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::domain("points must form rows of the stated dimension"));
        }
        let n = points.len() / dim;
        if n == 0 {
            return Err(Error::domain("empirical measure needs at least one point"));
        }
        if weights.len() != n {
            return Err(Error::domain(format!("{n} points but {} weights", weights.len())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("points must be finite"));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::domain("weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            dim,
            points,
            weights,
            context: MetricContext::Euclidean,
        })
    }

    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        let w = if n == 0 { Vec::new() } else { vec![1.0 / n as f64; n] };
        let mut m = Self::new(dim, points, w)?;
        // exact uniform weights may not sum to 1 in floating point; keep them equal
        m.weights.iter_mut().for_each(|w| *w = 1.0 / n as f64);
        Ok(m)
    }

    pub fn from_1d(values: &[f64]) -> Result<Self> {
        Self::uniform(1, values.to_vec())
    }

    pub fn with_context(mut self, context: MetricContext) -> Self {
        self.context = context;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn context(&self) -> MetricContext {
        self.context
    }

    fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| *w == w0)
    }

    fn distance(&self, i: usize, other: &EmpiricalMeasure, j: usize) -> f64 {
        let d2: f64 = self.point(i).iter().zip(other.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        self.context.factor() * d2.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `ρ^p`
    RhoP,
    /// `ρ^p ∨ ρ`
    RhoPOrRho,
}

impl CostKind {
    #[inline]
    pub fn eval(self, d: f64, p: f64) -> f64 {
        let dp = if p == 1.0 {
            d
        } else if p == 2.0 {
            d * d
        } else {
            d.powf(p)
        };
        match self {
            CostKind::RhoP => dp,
            CostKind::RhoPOrRho => dp.max(d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMethod {
    Assignment,
    Flow,
    Quantile,
    Sinkhorn,
}

/// Optimal value with the plan as `(i, j, mass)` triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    pub value: f64,
    pub plan: Option<Vec<(usize, usize, f64)>>,
    pub method: TransportMethod,
    pub cost: CostKind,
    pub n: usize,
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::domain(format!("p must be >= 1, got {p}")));
    }
    if mu.dim != nu.dim {
        return Err(Error::domain(format!("dimensions differ: {} vs {}", mu.dim, nu.dim)));
    }
    if mu.context != nu.context {
        return Err(Error::domain("measures live in different metric contexts"));
    }
    Ok(())
}

fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cost: CostKind) -> Vec<f64> {
    let m = nu.len();
    let mut c = vec![0.0; mu.len() * m];
    c.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (j, cij) in row.iter_mut().enumerate() {
            *cij = cost.eval(mu.distance(i, nu, j), p);
        }
    });
    c
}

/// `W_p` with cost `ρ^p`, computed exactly.
pub fn wasserstein_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<TransportResult> {
    exact_transport(mu, nu, p, CostKind::RhoP)
}

/// `W̃_p` with cost `ρ^p ∨ ρ`, computed exactly.
pub fn wasserstein_tilde(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<TransportResult> {
    exact_transport(mu, nu, p, CostKind::RhoPOrRho)
}

/// Assignment for uniform measures of equal size, min-cost flow otherwise.
pub fn exact_transport(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cost: CostKind) -> Result<TransportResult> {
    check_pair(mu, nu, p)?;
    let n = mu.len();
    if n.max(nu.len()) > MAX_EXACT_POINTS {
        return Err(Error::domain(format!(
            "{n} x {} instance exceeds the exact solver limit {MAX_EXACT_POINTS}",
            nu.len()
        )));
    }
    let c = cost_matrix(mu, nu, p, cost);
    if n == nu.len() && mu.is_uniform() && nu.is_uniform() {
        let assign = solve_assignment(&c, n);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
        let mass = 1.0 / n as f64;
        return Ok(TransportResult {
            value: (total / n as f64).powf(1.0 / p),
            plan: Some(assign.iter().enumerate().map(|(i, &j)| (i, j, mass)).collect()),
            method: TransportMethod::Assignment,
            cost,
            n,
        });
    }
    let (total, plan) = solve_transportation(&c, &mu.weights, &nu.weights)?;
    Ok(TransportResult {
        value: total.max(0.0).powf(1.0 / p),
        plan: Some(plan),
        method: TransportMethod::Flow,
        cost,
        n,
    })
}

/// Minimum-cost perfect matching on an `n x n` cost matrix; returns the
/// column assigned to each row.
pub fn solve_assignment(c: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(c.len(), n * n);
    let inf = f64::INFINITY;
    // 1-based rows/columns; column 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = &c[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    assign
}

/// Successive shortest paths with Johnson potentials on the network
/// source → rows → columns → sink. Returns the optimal cost and the plan.
pub fn solve_transportation(c: &[f64], a: &[f64], b: &[f64]) -> Result<(f64, Vec<(usize, usize, f64)>)> {
    let (n, m) = (a.len(), b.len());
    assert_eq!(c.len(), n * m);
    // node layout: 0 = source, 1..=n rows, n+1..=n+m columns, n+m+1 = sink
    let nodes = n + m + 2;
    let sink = n + m + 1;
    let mut a_rem = a.to_vec();
    let mut b_rem = b.to_vec();
    let mut flow = vec![0.0; n * m];
    let mut pot = vec![0.0; nodes];
    let mut dist = vec![0.0; nodes];
    let mut prev = vec![usize::MAX; nodes];
    let mut done = vec![false; nodes];
    let mut shipped = 0.0;
    let target: f64 = a.iter().sum::<f64>().min(b.iter().sum());

    while target - shipped > FLOW_EPS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        dist[0] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (k, (&d, &fin)) in dist.iter().zip(&done).enumerate() {
                if !fin && d < best {
                    best = d;
                    u = k;
                }
            }
            if u == usize::MAX || u == sink {
                break;
            }
            done[u] = true;
            // settled nodes keep their label; rounding can make a reduced
            // cost slightly negative and would otherwise close a cycle in `prev`
            let settled = &done;
            let relax = |v: usize, w: f64, dist: &mut Vec<f64>, prev: &mut Vec<usize>| {
                if settled[v] {
                    return;
                }
                let nd = best + w + pot[u] - pot[v];
                if nd < dist[v] {
                    dist[v] = nd;
                    prev[v] = u;
                }
            };
            if u == 0 {
                for i in 0..n {
                    if a_rem[i] > FLOW_EPS {
                        relax(1 + i, 0.0, &mut dist, &mut prev);
                    }
                }
            } else if u <= n {
                let i = u - 1;
                if a[i] - a_rem[i] > FLOW_EPS {
                    relax(0, 0.0, &mut dist, &mut prev);
                }
                for j in 0..m {
                    relax(n + 1 + j, c[i * m + j], &mut dist, &mut prev);
                }
            } else {
                let j = u - n - 1;
                for i in 0..n {
                    if flow[i * m + j] > FLOW_EPS {
                        relax(1 + i, -c[i * m + j], &mut dist, &mut prev);
                    }
                }
                if b_rem[j] > FLOW_EPS {
                    relax(sink, 0.0, &mut dist, &mut prev);
                }
            }
        }
        if !dist[sink].is_finite() {
            return Err(Error::domain("transport network has no augmenting path"));
        }
        let cap_t = dist[sink];
        for k in 0..nodes {
            pot[k] += dist[k].min(cap_t);
        }

        // bottleneck along the path
        let mut delta = f64::INFINITY;
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            let cap = if u == 0 {
                a_rem[v - 1]
            } else if v == sink {
                b_rem[u - n - 1]
            } else if u <= n {
                f64::INFINITY
            } else {
                flow[(v - 1) * m + (u - n - 1)]
            };
            delta = delta.min(cap);
            v = u;
        }
        delta = delta.min(target - shipped);
        let mut v = sink;
        while v != 0 {
            let u = prev[v];
            if u == 0 {
                a_rem[v - 1] -= delta;
            } else if v == sink {
                b_rem[u - n - 1] -= delta;
            } else if u <= n {
                flow[(u - 1) * m + (v - n - 1)] += delta;
            } else {
                flow[(v - 1) * m + (u - n - 1)] -= delta;
            }
            v = u;
        }
        shipped += delta;
    }

    let mut total = 0.0;
    let mut plan = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let f = flow[i * m + j];
            if f > FLOW_EPS {
                total += f * c[i * m + j];
                plan.push((i, j, f));
            }
        }
    }
    Ok((total, plan))
}

fn sorted_with_weights(m: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = m.points.iter().copied().zip(m.weights.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn monotone_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cost: CostKind) -> f64 {
    let factor = mu.context.factor();
    if mu.len() == nu.len() && mu.is_uniform() && nu.is_uniform() {
        let mut xs = mu.points.clone();
        let mut ys = nu.points.clone();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let terms: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| cost.eval(factor * (x - y).abs(), p)).collect();
        return crate::stats::pairwise_sum(&terms) / xs.len() as f64;
    }
    let xs = sorted_with_weights(mu);
    let ys = sorted_with_weights(nu);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xs[0].1, ys[0].1);
    let mut total = 0.0;
    while i < xs.len() && j < ys.len() {
        let mass = ra.min(rb);
        total += mass * cost.eval(factor * (xs[i].0 - ys[j].0).abs(), p);
        ra -= mass;
        rb -= mass;
        if ra <= FLOW_EPS {
            i += 1;
            if i < xs.len() {
                ra = xs[i].1;
            }
        }
        if rb <= FLOW_EPS {
            j += 1;
            if j < ys.len() {
                rb = ys[j].1;
            }
        }
    }
    total
}

/// One-dimensional transport by monotone matching of sorted samples.
pub fn wasserstein_1d_quantile(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<TransportResult> {
    transport_1d(mu, nu, p, CostKind::RhoP)
}

/// As [`wasserstein_1d_quantile`] with either cost.
pub fn transport_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cost: CostKind) -> Result<TransportResult> {
    check_pair(mu, nu, p)?;
    if mu.dim != 1 {
        return Err(Error::domain(format!("quantile coupling needs dimension 1, got {}", mu.dim)));
    }
    Ok(TransportResult {
        value: monotone_cost(mu, nu, p, cost).powf(1.0 / p),
        plan: None,
        method: TransportMethod::Quantile,
        cost,
        n: mu.len(),
    })
}

/// Exact transport by the cheapest applicable method: the quantile coupling
/// in one dimension, the exact solvers otherwise.
pub fn transport(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cost: CostKind) -> Result<TransportResult> {
    if mu.dim == 1 {
        transport_1d(mu, nu, p, cost)
    } else {
        exact_transport(mu, nu, p, cost)
    }
}

/// Average cost of the pairing `i ↔ i`, raised to `1/p`: an upper bound on
/// the optimal value for uniform measures of equal size.
pub fn pairing_cost(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cost: CostKind) -> Result<f64> {
    check_pair(mu, nu, p)?;
    if mu.len() != nu.len() {
        return Err(Error::domain("pairing needs equal sample counts"));
    }
    let terms: Vec<f64> = (0..mu.len())
        .map(|i| mu.weights[i] * cost.eval(mu.distance(i, nu, i), p))
        .collect();
    Ok(crate::stats::pairwise_sum(&terms).powf(1.0 / p))
}

/// Entropic transport, for cross-checks only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// `(Σ π_ij c_ij)^{1/p}` for the entropic plan π.
    pub value: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Largest marginal error of the final plan.
    pub marginal_error: f64,
}

/// Log-domain Sinkhorn iterations with regularization `epsilon`.
pub fn sinkhorn(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    cost: CostKind,
    epsilon: f64,
    max_iter: usize,
) -> Result<SinkhornResult> {
    check_pair(mu, nu, p)?;
    if !(epsilon > 0.0) {
        return Err(Error::domain("Sinkhorn regularization must be positive"));
    }
    let (n, m) = (mu.len(), nu.len());
    let c = cost_matrix(mu, nu, p, cost);
    let log_a: Vec<f64> = mu.weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = nu.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return mx;
        }
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            f[i] = -epsilon * lse(&mut (0..m).map(|j| (g[j] - c[i * m + j]) / epsilon + log_b[j]));
        }
        for j in 0..m {
            g[j] = -epsilon * lse(&mut (0..n).map(|i| (f[i] - c[i * m + j]) / epsilon + log_a[i]));
        }
        // after the g-update columns are exact; measure the row error
        err = (0..n)
            .map(|i| {
                let row: f64 = (0..m)
                    .map(|j| ((f[i] + g[j] - c[i * m + j]) / epsilon + log_a[i] + log_b[j]).exp())
                    .sum();
                (row - mu.weights[i]).abs()
            })
            .fold(0.0, f64::max);
        if err < 1e-12 {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let pij = ((f[i] + g[j] - c[i * m + j]) / epsilon + log_a[i] + log_b[j]).exp();
            total += pij * c[i * m + j];
        }
    }
    Ok(SinkhornResult {
        value: total.powf(1.0 / p),
        epsilon,
        iterations,
        marginal_error: err,
    })
}

/// Percentile bootstrap interval for a transport value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    /// Standard deviation of the bootstrap replicates.
    pub std_error: f64,
    pub level: f64,
    pub replicates: usize,
}

/// Resamples both measures `replicates` times and reports the percentile
/// interval, widened if needed so that it contains the point estimate.
///
/// Uniform measures of equal size are resampled jointly (index `i` of both
/// at once), which keeps paired simulation output paired. Other inputs are
/// resampled independently according to their weights.
pub fn bootstrap_ci(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    cost: CostKind,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    if replicates < 100 {
        return Err(Error::domain(format!("bootstrap needs at least 100 replicates, got {replicates}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let point = transport(mu, nu, p, cost)?.value;
    let paired = mu.len() == nu.len() && mu.is_uniform() && nu.is_uniform();
    let values: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(crate::rng::path_seed(seed, b as u64));
            let (ra, rb) = if paired {
                let idx: Vec<usize> = (0..mu.len()).map(|_| rng.gen_range(0..mu.len())).collect();
                (resample(mu, &idx), resample(nu, &idx))
            } else {
                let ia = weighted_indices(mu, &mut rng);
                let ib = weighted_indices(nu, &mut rng);
                (resample(mu, &ia), resample(nu, &ib))
            };
            Ok(transport(&ra, &rb, p, cost)?.value)
        })
        .collect();
    let mut vals = Vec::with_capacity(replicates);
    for v in values {
        vals.push(v?);
    }
    let std_error = crate::stats::MeanEstimate::from_samples(&vals).se * (vals.len() as f64).sqrt();
    vals.sort_by(f64::total_cmp);
    let q = |prob: f64| {
        let pos = prob * (vals.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        vals[lo] + (pos - lo as f64) * (vals[hi] - vals[lo])
    };
    let alpha = 0.5 * (1.0 - level);
    Ok(BootstrapCi {
        point,
        lower: q(alpha).min(point),
        upper: q(1.0 - alpha).max(point),
        std_error,
        level,
        replicates,
    })
}

fn resample(m: &EmpiricalMeasure, idx: &[usize]) -> EmpiricalMeasure {
    let mut pts = Vec::with_capacity(idx.len() * m.dim);
    for &i in idx {
        pts.extend_from_slice(m.point(i));
    }
    EmpiricalMeasure::uniform(m.dim, pts)
        .expect("resampled points are finite")
        .with_context(m.context)
}

fn weighted_indices<R: Rng>(m: &EmpiricalMeasure, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(m.len());
    let mut acc = 0.0;
    for w in &m.weights {
        acc += w;
        cdf.push(acc);
    }
    (0..m.len())
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * acc;
            cdf.partition_point(|c| *c <= u).min(m.len() - 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_oneof, proptest, Just, ProptestConfig};

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_1d(v).unwrap()
    }

    fn brute_force(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cost: CostKind) -> f64 {
        let n = mu.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |perm| {
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.eval(mu.distance(i, nu, j), p)).sum();
            best = best.min(total / n as f64);
        });
        best.powf(1.0 / p)
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn exact_examples() {
        let a = m1(&[0.0, 2.0]);
        assert_eq!(wasserstein_exact(&a, &a, 1.0).unwrap().value, 0.0);
        assert_eq!(wasserstein_exact(&a, &m1(&[1.0, 3.0]), 1.0).unwrap().value, 1.0);
        let mu = EmpiricalMeasure::uniform(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let nu = EmpiricalMeasure::uniform(2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = wasserstein_exact(&mu, &nu, 2.0).unwrap();
        assert!((r.value - 1.0).abs() < 1e-15);
        assert_eq!(r.method, TransportMethod::Assignment);
    }

    #[test]
    fn quantile_examples() {
        for &p in &[1.0, 2.0, 3.5] {
            let r = wasserstein_1d_quantile(&m1(&[0.0, 0.0]), &m1(&[1.0, 1.0]), p).unwrap();
            assert!((r.value - 1.0).abs() < 1e-15);
        }
        assert_eq!(wasserstein_1d_quantile(&m1(&[0.0, 1.0]), &m1(&[0.0, 1.0]), 2.0).unwrap().value, 0.0);
        assert_eq!(wasserstein_1d_quantile(&m1(&[0.0, 2.0]), &m1(&[3.0, 1.0]), 2.0).unwrap().value, 1.0);
        let two_d = EmpiricalMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
        assert!(wasserstein_1d_quantile(&two_d, &two_d, 1.0).is_err());
    }

    #[test]
    fn tilde_examples() {
        let r = wasserstein_tilde(&m1(&[0.0]), &m1(&[0.5]), 2.0).unwrap();
        assert!((r.value - 0.5f64.sqrt()).abs() < 1e-15);
        let far = wasserstein_tilde(&m1(&[0.0, 5.0]), &m1(&[2.0, 9.0]), 2.0).unwrap();
        let plain = wasserstein_exact(&m1(&[0.0, 5.0]), &m1(&[2.0, 9.0]), 2.0).unwrap();
        assert_eq!(far.value, plain.value);
        assert_eq!(wasserstein_tilde(&m1(&[0.3, 0.1]), &m1(&[0.1, 0.3]), 3.0).unwrap().value, 0.0);
    }

    #[test]
    fn mismatched_contexts_are_rejected() {
        let a = m1(&[0.0]);
        let b = m1(&[1.0]).with_context(MetricContext::Conformal { log_scale: 0.3 });
        assert!(wasserstein_exact(&a, &b, 1.0).is_err());
        let c = m1(&[0.0]).with_context(MetricContext::Conformal { log_scale: 0.3 });
        let r = wasserstein_exact(&c, &b, 1.0).unwrap();
        assert!((r.value - 0.3f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn invalid_measures_are_rejected() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![0.0, f64::NAN], vec![0.5, 0.5]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
        assert!(EmpiricalMeasure::uniform(1, vec![]).is_err());
    }

    #[test]
    fn flow_matches_assignment_and_weighted_quantile() {
        let mut rng = stream(99);
        for _ in 0..20 {
            let n = rng.gen_range(1..12);
            let pts: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let qts: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mu = EmpiricalMeasure::uniform(2, pts).unwrap();
            let nu = EmpiricalMeasure::uniform(2, qts).unwrap();
            let c = cost_matrix(&mu, &nu, 2.0, CostKind::RhoP);
            let (flow, _) = solve_transportation(&c, mu.weights(), nu.weights()).unwrap();
            let assign = wasserstein_exact(&mu, &nu, 2.0).unwrap().value;
            assert!((flow.sqrt() - assign).abs() < 1e-12);

            // weighted 1D, different sizes
            let na = rng.gen_range(1..9);
            let nb = rng.gen_range(1..9);
            let wa = normalized((0..na).map(|_| rng.gen_range(0.1..1.0)).collect());
            let wb = normalized((0..nb).map(|_| rng.gen_range(0.1..1.0)).collect());
            let a = EmpiricalMeasure::new(1, (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect(), wa).unwrap();
            let b = EmpiricalMeasure::new(1, (0..nb).map(|_| rng.gen_range(-3.0..3.0)).collect(), wb).unwrap();
            for cost in [CostKind::RhoP, CostKind::RhoPOrRho] {
                let ex = exact_transport(&a, &b, 1.5, cost).unwrap();
                let q = transport_1d(&a, &b, 1.5, cost).unwrap();
                assert!((ex.value - q.value).abs() < 1e-10, "{ex:?} {q:?}");
                let shipped: f64 = ex.plan.unwrap().iter().map(|t| t.2).sum();
                assert!((shipped - 1.0).abs() < 1e-12);
            }
        }
    }

    fn normalized(w: Vec<f64>) -> Vec<f64> {
        let s: f64 = w.iter().sum();
        let mut out: Vec<f64> = w.iter().map(|x| x / s).collect();
        let fix: f64 = 1.0 - out.iter().sum::<f64>();
        out[0] += fix;
        out
    }

    #[test]
    fn assignment_matches_brute_force_in_2d() {
        let mut rng = stream(5);
        for _ in 0..30 {
            let n = rng.gen_range(1..=7);
            let mu = EmpiricalMeasure::uniform(2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let nu = EmpiricalMeasure::uniform(2, (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            for cost in [CostKind::RhoP, CostKind::RhoPOrRho] {
                let want = brute_force(&mu, &nu, 2.0, cost);
                let got = exact_transport(&mu, &nu, 2.0, cost).unwrap().value;
                assert!((want - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_approaches_exact_value_from_above() {
        let mu = m1(&[0.0, 0.4, 1.1, 2.0]);
        let nu = m1(&[0.3, 0.9, 1.0, 2.6]);
        let exact = wasserstein_exact(&mu, &nu, 2.0).unwrap().value;
        let coarse = sinkhorn(&mu, &nu, 2.0, CostKind::RhoP, 0.5, 5000).unwrap();
        let fine = sinkhorn(&mu, &nu, 2.0, CostKind::RhoP, 0.01, 20000).unwrap();
        assert!(coarse.value >= exact - 1e-9);
        assert!(fine.value >= exact - 1e-9);
        assert!(fine.value - exact < coarse.value - exact);
        assert!(fine.value - exact < 1e-2);
    }

    #[test]
    fn bootstrap_examples() {
        let a = m1(&[0.1, 0.5, 0.9, 1.3]);
        let ci = bootstrap_ci(&a, &a, 1.0, CostKind::RhoP, 200, 0.95, 1).unwrap();
        assert_eq!((ci.point, ci.lower, ci.upper), (0.0, 0.0, 0.0));
        let one = m1(&[0.0]);
        let two = m1(&[2.0]);
        let ci = bootstrap_ci(&one, &two, 1.0, CostKind::RhoP, 100, 0.9, 1).unwrap();
        assert_eq!((ci.lower, ci.upper), (2.0, 2.0));
        assert!(bootstrap_ci(&a, &a, 1.0, CostKind::RhoP, 50, 0.9, 1).is_err());
    }

    #[test]
    fn bootstrap_width_shrinks_with_sample_size() {
        let mut shrinks = 0;
        for seed in 0..5u64 {
            let width = |n: usize| {
                let mut rng = stream(seed * 1000 + n as u64);
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
                let ci = bootstrap_ci(&m1(&x), &m1(&y), 1.0, CostKind::RhoP, 200, 0.9, seed).unwrap();
                assert!(ci.lower <= ci.point && ci.point <= ci.upper);
                ci.upper - ci.lower
            };
            if width(1600) < width(400) {
                shrinks += 1;
            }
        }
        assert!(shrinks >= 4);
    }

    #[test]
    fn pairing_bounds_the_optimum() {
        let mut rng = stream(17);
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (m1(&x), m1(&y));
        for cost in [CostKind::RhoP, CostKind::RhoPOrRho] {
            assert!(transport(&a, &b, 2.0, cost).unwrap().value <= pairing_cost(&a, &b, 2.0, cost).unwrap() + 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn assignment_equals_quantile_in_1d(
            xs in proptest::collection::vec(-10.0f64..10.0, 1..40),
            shift in -3.0f64..3.0,
            p in prop_oneof![Just(1.0), Just(2.0), Just(3.0)],
            seed in 0u64..1000,
        ) {
            let mut rng = stream(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x + shift + rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (m1(&xs), m1(&ys));
            let ex = wasserstein_exact(&a, &b, p).unwrap().value;
            let q = wasserstein_1d_quantile(&a, &b, p).unwrap().value;
            prop_assert!((ex - q).abs() <= 1e-12 * ex.max(1.0));
        }

        #[test]
        fn metric_axioms(
            seed in 0u64..10_000,
            n in 1usize..8,
            p in 1.0f64..3.0,
        ) {
            let mut rng = stream(seed);
            let mut cloud = || EmpiricalMeasure::uniform(2, (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let (a, b, c) = (cloud(), cloud(), cloud());
            let ab = wasserstein_exact(&a, &b, p).unwrap().value;
            let ba = wasserstein_exact(&b, &a, p).unwrap().value;
            let bc = wasserstein_exact(&b, &c, p).unwrap().value;
            let ac = wasserstein_exact(&a, &c, p).unwrap().value;
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn scale_equivariance(
            xs in proptest::collection::vec(-5.0f64..5.0, 2..20),
            alpha in 0.1f64..10.0,
        ) {
            let n = xs.len() / 2;
            let pts: Vec<f64> = xs[..2 * n].to_vec();
            let mu = EmpiricalMeasure::uniform(1, pts[..n].to_vec()).unwrap();
            let nu = EmpiricalMeasure::uniform(1, pts[n..].to_vec()).unwrap();
            let base = wasserstein_exact(&mu, &nu, 2.0).unwrap().value;
            let smu = EmpiricalMeasure::uniform(1, pts[..n].iter().map(|v| v * alpha).collect()).unwrap();
            let snu = EmpiricalMeasure::uniform(1, pts[n..].iter().map(|v| v * alpha).collect()).unwrap();
            let scaled = wasserstein_exact(&smu, &snu, 2.0).unwrap().value;
            prop_assert!((scaled - alpha * base).abs() <= 1e-10 * scaled.max(1.0));
        }
    }
}
