//! One-sided numerical checks of the contraction, gradient, Harnack and
//! evolution-system statements.
//!
//! Every check first validates its hypothesis on a grid and refuses to run
//! when it fails. Monte Carlo estimates are compared through their upper
//! confidence limit: three standard errors plus a discretization allowance
//! taken from the difference between runs at `dt` and `dt / 2`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coupling::{
    evolve_ensemble, evolve_ensemble_refined, forcing_energy, simulate_marginal, CouplingSpec, EnsembleOptions, InitialPairs, PathEnsemble,
    Snapshot, CONTROL_WIDTH,
};
use crate::error::{Error, Result};
use crate::models::{
    validate_hypothesis, DriftModel, Hypothesis, IndexValidationReport, K1Function, ModelKind, Potential,
    ValidationGrid,
};
use crate::psi::{bound_constants, cor1_constants, AffineConstants};
use crate::rng::{derive_seed, stream};
use crate::stats::{control_variates_mean, ols, MeanEstimate};
use crate::wasserstein::{bootstrap_ci, pairing_cost, CostKind, EmpiricalMeasure, MetricContext, MAX_EXACT_POINTS};

/// Width of every confidence allowance, in standard errors.
pub const CI_SIGMAS: f64 = 3.0;
/// Fitted rates must reach `(1 - RATE_TOLERANCE) λ`.
pub const RATE_TOLERANCE: f64 = 0.1;
/// Slack of the hypothesis gate.
pub const VALIDATION_TOLERANCE: f64 = 1e-9;

const BOOTSTRAP_REPLICATES: usize = 200;
const BOOTSTRAP_LEVEL: f64 = 0.9973;
// largest sample for which the empirical transport distance is bootstrapped
// in more than one dimension
const BOOTSTRAP_MAX_MULTI_D: usize = 256;
const MAX_H_DOUBLINGS: usize = 6;

/// One compared quantity at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeCheck {
    pub t: f64,
    pub quantity: String,
    pub estimate: f64,
    /// `[lower, upper]`; `upper` already includes the discretization allowance.
    pub ci: [f64; 2],
    pub bound: f64,
    /// `bound - upper`.
    pub margin: f64,
    pub pass: bool,
}

impl TimeCheck {
    fn one_sided(t: f64, quantity: &str, estimate: f64, lower: f64, upper: f64, bound: f64) -> Self {
        let margin = bound - upper;
        Self {
            t,
            quantity: quantity.to_string(),
            estimate,
            ci: [lower, upper],
            bound,
            margin,
            pass: margin >= 0.0,
        }
    }
}

/// Common report shape shared by every check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub model: String,
    pub params: Value,
    pub times: Vec<TimeCheck>,
    pub overall_pass: bool,
    pub seed: u64,
    pub dt: f64,
}

/// Runs the grid validation and turns a failure into [`Error::Hypothesis`].
pub fn require_hypothesis(model: &DriftModel, hypothesis: &Hypothesis) -> Result<IndexValidationReport> {
    let grid = ValidationGrid::standard(model, hypothesis.radius());
    let report = validate_hypothesis(model, hypothesis, &grid, VALIDATION_TOLERANCE)?;
    if !report.pass {
        return Err(Error::Hypothesis(format!(
            "index bound fails for `{}`: grid violation {:e}, profile violation {:e}",
            model.label(),
            report.max_violation,
            report.profile_violation.max(0.0) + 0.0
        )));
    }
    Ok(report)
}

/// The coupling the contraction proof runs: reflection up to the profile's
/// radius, pure reflection when the radius is zero.
pub fn coupling_for(hypothesis: &Hypothesis) -> CouplingSpec {
    let r = hypothesis.radius();
    if r > 0.0 {
        CouplingSpec::reflection(r)
    } else {
        CouplingSpec::pure_reflection()
    }
}

/// `(k1, k2)` when the hypothesis reduces to `I^Z <= k1 - k2 ρ`.
pub fn affine_form(hypothesis: &Hypothesis) -> Option<(f64, f64)> {
    match hypothesis {
        Hypothesis::Affine { k1, k2 } => Some((*k1, *k2)),
        Hypothesis::Profile(p) => match p.k1 {
            K1Function::Constant { value } if p.theta == 0.0 => Some((value, p.k2)),
            _ => None,
        },
    }
}

/// Mean and variance of `X_t` started from `x` at time `s`, for the 1D
/// linear models.
pub fn gaussian_marginal(model: &DriftModel, x: f64, s: f64, t: f64) -> Option<(f64, f64)> {
    let tau = t - s;
    let (a, forcing) = match model.kind() {
        ModelKind::Ou { dim: 1, a } => (*a, 0.0),
        ModelKind::ForcedOu { a, amplitude } => (*a, *amplitude),
        _ => return None,
    };
    let decay = (-a * tau).exp();
    let var = if a == 0.0 { 2.0 * tau } else { -(-2.0 * a * tau).exp_m1() / a };
    let mut mean = x * decay;
    if forcing != 0.0 {
        let particular = |u: f64| forcing * (a * u.sin() - u.cos()) / (a * a + 1.0);
        mean += particular(t) - decay * particular(s);
    }
    Some((mean, var))
}

fn horizon(s: f64, times: &[f64], dt: f64) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::domain("no check times given"));
    }
    if times.iter().any(|t| !(t.is_finite() && *t >= s)) {
        return Err(Error::domain(format!("check times must be finite and >= s = {s}")));
    }
    let top = times.iter().copied().fold(s, f64::max);
    Ok(if top > s { top } else { s + dt })
}

/// The same ensemble at `dt` and `dt / 2`, driven by the same Brownian paths.
#[allow(clippy::too_many_arguments)]
fn ensemble_pair(
    model: &DriftModel,
    spec: &CouplingSpec,
    initial: &InitialPairs,
    s: f64,
    t: f64,
    dt: f64,
    n: usize,
    seed: u64,
    options: &EnsembleOptions,
) -> Result<(PathEnsemble, PathEnsemble)> {
    evolve_ensemble_refined(model, spec, initial, s, t, dt, n, seed, options)
}

/// Terminal first coordinates from `x` at `dt` and `dt / 2` on shared paths.
#[allow(clippy::too_many_arguments)]
fn marginal_pair(
    model: &DriftModel,
    x: &[f64],
    s: f64,
    t: f64,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let initial = InitialPairs::fixed(x.to_vec(), x.to_vec());
    let (a, b) = ensemble_pair(
        model,
        &CouplingSpec::Synchronous,
        &initial,
        s,
        t,
        dt,
        n,
        seed,
        &EnsembleOptions::default(),
    )?;
    let dim = model.dim();
    let take = |e: PathEnsemble| first_coordinates(e.snapshots.into_iter().last().expect("terminal").x, dim);
    Ok((take(a), take(b)))
}

fn snapshot(ens: &PathEnsemble, t: f64) -> &Snapshot {
    ens.snapshot_at(t).expect("checkpoint was requested")
}

/// `E[ρ^p]` with the distance martingale increments as control variates.
fn moment(snap: &Snapshot, p: f64) -> MeanEstimate {
    let v: Vec<f64> = snap.distance.iter().map(|d| if p == 1.0 { *d } else { d.powf(p) }).collect();
    control_variates_mean(&v, &snap.controls, CONTROL_WIDTH)
}

fn context_at(model: &DriftModel, t: f64) -> MetricContext {
    match model.kind() {
        ModelKind::ConformalOu { .. } => MetricContext::Conformal {
            log_scale: model.log_scale(t),
        },
        _ => MetricContext::Euclidean,
    }
}

fn measures(model: &DriftModel, snap: &Snapshot, dim: usize) -> Result<(EmpiricalMeasure, EmpiricalMeasure)> {
    let ctx = context_at(model, snap.t);
    let mu = EmpiricalMeasure::uniform(dim, snap.x.clone())?.with_context(ctx);
    let nu = EmpiricalMeasure::uniform(dim, snap.y.clone())?.with_context(ctx);
    Ok((mu, nu))
}

/// Inputs of [`check_contraction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSetup {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: f64,
    pub times: Vec<f64>,
    pub p: f64,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub model: String,
    pub hypothesis: Hypothesis,
    pub coupling: CouplingSpec,
    pub p: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: f64,
    pub rho_s: f64,
    pub c_1: f64,
    pub c_p: f64,
    pub lambda: f64,
    pub closed_form: Option<AffineConstants>,
    pub validation_max_violation: f64,
    pub entries: Vec<TimeCheck>,
    /// Rate of an OLS fit of `log E[ρ_t]`; `None` when fewer than two
    /// positive means are available.
    pub fitted_rate: Option<f64>,
    pub rate_r2: Option<f64>,
    pub rate_threshold: f64,
    pub rate_pass: bool,
    /// Every bound holds at every time.
    pub overall_pass: bool,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

impl ContractionReport {
    pub fn to_check_report(&self) -> CheckReport {
        CheckReport {
            check: "contraction".into(),
            model: self.model.clone(),
            params: json!({
                "hypothesis": self.hypothesis,
                "coupling": self.coupling,
                "p": self.p,
                "x": self.x,
                "y": self.y,
                "s": self.s,
                "rho_s": self.rho_s,
                "c_1": self.c_1,
                "c_p": self.c_p,
                "lambda": self.lambda,
                "closed_form": self.closed_form,
                "validation_max_violation": self.validation_max_violation,
                "fitted_rate": self.fitted_rate,
                "rate_r2": self.rate_r2,
                "rate_threshold": self.rate_threshold,
                "rate_pass": self.rate_pass,
                "n": self.n,
            }),
            times: self.entries.clone(),
            overall_pass: self.overall_pass && self.rate_pass,
            seed: self.seed,
            dt: self.dt,
        }
    }
}

/// Compares coupled-ensemble statistics with the contraction bounds.
///
/// At each time it checks `E[ρ_t] <= c_1 e^{-λ(t-s)} ρ_s`, then
/// `E[ρ_t^p]^{1/p}` and the empirical `W_p`, `W̃_p` against
/// `c_p e^{-λ(t-s)/p} (ρ_s ∨ ρ_s^{1/p})`, and for affine hypotheses the
/// closed-form bound as well.
pub fn check_contraction(
    model: &DriftModel,
    hypothesis: &Hypothesis,
    setup: &ContractionSetup,
) -> Result<ContractionReport> {
    let validation = require_hypothesis(model, hypothesis)?;
    let ContractionSetup {
        x,
        y,
        s,
        times,
        p,
        n,
        dt,
        seed,
    } = setup.clone();
    if n < 2 {
        return Err(Error::domain("contraction check needs at least two paths"));
    }
    let (c_p, lambda) = bound_constants(hypothesis, p)?;
    let (c_1, _) = bound_constants(hypothesis, 1.0)?;
    let closed_form = match affine_form(hypothesis) {
        Some((k1, k2)) => Some(cor1_constants(k1, k2, p)?),
        None => None,
    };
    let spec = coupling_for(hypothesis);
    let t_end = horizon(s, &times, dt)?;
    let options = EnsembleOptions {
        checkpoints: times.clone(),
        powers: vec![1.0, p],
    };
    let (fine, half) = ensemble_pair(model, &spec, &InitialPairs::fixed(x.clone(), y.clone()), s, t_end, dt, n, seed, &options)?;
    let rho_s = model.distance(s, &x, &y);
    let start_scale = rho_s.max(rho_s.powf(1.0 / p));
    let dim = model.dim();

    let mut entries = Vec::new();
    let mut fit_t = vec![s];
    let mut fit_log = vec![rho_s.ln()];
    for (ti, &t) in times.iter().enumerate() {
        let tau = t - s;
        let (a, b) = (snapshot(&fine, t), snapshot(&half, t));

        let m1 = moment(a, 1.0);
        let allow = (m1.mean - moment(b, 1.0).mean).abs();
        entries.push(TimeCheck::one_sided(
            t,
            "mean_distance",
            m1.mean,
            m1.lower(CI_SIGMAS),
            m1.upper(CI_SIGMAS) + allow,
            c_1 * (-lambda * tau).exp() * rho_s,
        ));
        if m1.mean > 0.0 && t > s {
            fit_t.push(t);
            fit_log.push(m1.mean.ln());
        }

        let bound_p = c_p * (-lambda * tau / p).exp() * start_scale;
        let mp = moment(a, p);
        let root = mp.mean.max(0.0).powf(1.0 / p);
        let allow_p = (root - moment(b, p).mean.max(0.0).powf(1.0 / p)).abs();
        let upper_p = mp.upper(CI_SIGMAS).max(0.0).powf(1.0 / p) + allow_p;
        let lower_p = mp.lower(CI_SIGMAS).max(0.0).powf(1.0 / p);
        entries.push(TimeCheck::one_sided(t, "moment_root", root, lower_p, upper_p, bound_p));

        if dim == 1 || n <= BOOTSTRAP_MAX_MULTI_D.min(MAX_EXACT_POINTS) {
            let (mu, nu) = measures(model, a, dim)?;
            let (mu_h, nu_h) = measures(model, b, dim)?;
            for (name, cost) in [("w_p", CostKind::RhoP), ("w_tilde_p", CostKind::RhoPOrRho)] {
                let bseed = derive_seed(seed, &format!("bootstrap-{name}-{ti}"));
                let ci = bootstrap_ci(&mu, &nu, p, cost, BOOTSTRAP_REPLICATES, BOOTSTRAP_LEVEL, bseed)?;
                // the empirical optimum never exceeds the simulated pairing
                let pairing = pairing_cost(&mu, &nu, p, cost)?;
                if ci.point > pairing * (1.0 + 1e-12) + 1e-300 {
                    return Err(Error::Simulation {
                        time: t,
                        detail: format!("transport value {} exceeds the pairing cost {pairing}", ci.point),
                    });
                }
                let other = crate::wasserstein::transport(&mu_h, &nu_h, p, cost)?.value;
                let allow_w = (ci.point - other).abs();
                entries.push(TimeCheck::one_sided(t, name, ci.point, ci.lower, ci.upper + allow_w, bound_p));
            }
        }

        if let Some(cf) = &closed_form {
            let bound_c = cf.prefactor * (-cf.rate * tau).exp() * start_scale;
            entries.push(TimeCheck::one_sided(t, "moment_root_closed_form", root, lower_p, upper_p, bound_c));
        }
    }

    let (fitted_rate, rate_r2) = match ols(&fit_t, &fit_log) {
        Some((_, slope, r2)) => (Some(-slope), Some(r2)),
        None => (None, None),
    };
    let rate_threshold = (1.0 - RATE_TOLERANCE) * lambda;
    let rate_pass = fitted_rate.is_none_or(|r| r >= rate_threshold);
    let overall_pass = entries.iter().all(|e| e.pass);
    Ok(ContractionReport {
        model: model.label().to_string(),
        hypothesis: hypothesis.clone(),
        coupling: spec,
        p,
        x,
        y,
        s,
        rho_s,
        c_1,
        c_p,
        lambda,
        closed_form,
        validation_max_violation: validation.max_violation,
        entries,
        fitted_rate,
        rate_r2,
        rate_threshold,
        rate_pass,
        overall_pass,
        n,
        dt: fine.dt,
        seed,
    })
}

/// Scalar test functions with analytic constants. Multivariate states are
/// fed through their first coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Sin,
    Tanh,
    /// `exp(rate · tanh v)`: smooth, positive and bounded.
    ExpClipped { rate: f64 },
    /// `exp(rate · v)`: unbounded, for Gaussian closed forms.
    Exp { rate: f64 },
    Constant { value: f64 },
}

impl TestFunction {
    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            TestFunction::Sin => v.sin(),
            TestFunction::Tanh => v.tanh(),
            TestFunction::ExpClipped { rate } => (rate * v.tanh()).exp(),
            TestFunction::Exp { rate } => (rate * v).exp(),
            TestFunction::Constant { value } => value,
        }
    }

    /// `sup |f'|`, if finite.
    pub fn lipschitz(&self) -> Option<f64> {
        match *self {
            TestFunction::Sin | TestFunction::Tanh => Some(1.0),
            TestFunction::ExpClipped { rate } => Some(rate.abs() * rate.abs().exp()),
            TestFunction::Exp { rate } => (rate == 0.0).then_some(0.0),
            TestFunction::Constant { .. } => Some(0.0),
        }
    }

    /// An upper bound on `sup |f'''|`, if finite.
    pub fn third_derivative_bound(&self) -> Option<f64> {
        match *self {
            TestFunction::Sin => Some(1.0),
            TestFunction::Tanh => Some(2.0),
            TestFunction::ExpClipped { rate } => {
                let r = rate.abs();
                // (g''' + 3 g' g'' + g'^3) e^g with g = r tanh
                Some((2.0 * r + 1.72 * r * r + r * r * r) * r.exp())
            }
            TestFunction::Exp { rate } => (rate == 0.0).then_some(0.0),
            TestFunction::Constant { .. } => Some(0.0),
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        match *self {
            TestFunction::Sin | TestFunction::Tanh => false,
            TestFunction::ExpClipped { .. } | TestFunction::Exp { .. } => true,
            TestFunction::Constant { value } => value >= 0.0,
        }
    }

    /// `E[f(X)^power]` for `X ~ N(mean, var)`, where a closed form is known.
    pub fn gaussian_expectation(&self, mean: f64, var: f64, power: f64) -> Option<f64> {
        match *self {
            TestFunction::Exp { rate } => {
                let c = power * rate;
                Some((c * mean + 0.5 * c * c * var).exp())
            }
            TestFunction::Sin if power == 1.0 => Some(mean.sin() * (-0.5 * var).exp()),
            TestFunction::Constant { value } => Some(value.powf(power)),
            _ => None,
        }
    }

    /// `E[f'(X)]` for `X ~ N(mean, var)`, where a closed form is known.
    pub fn gaussian_derivative_expectation(&self, mean: f64, var: f64) -> Option<f64> {
        match *self {
            TestFunction::Sin => Some(mean.cos() * (-0.5 * var).exp()),
            TestFunction::Exp { rate } => Some(rate * (rate * mean + 0.5 * rate * rate * var).exp()),
            TestFunction::Constant { .. } => Some(0.0),
            _ => None,
        }
    }
}

/// Inputs of [`check_gradient`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSetup {
    pub x: Vec<f64>,
    pub s: f64,
    pub times: Vec<f64>,
    /// Initial finite-difference half step.
    pub h: f64,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub model: String,
    pub hypothesis: Hypothesis,
    pub function: TestFunction,
    pub x: Vec<f64>,
    pub s: f64,
    /// Half step finally used.
    pub h: f64,
    /// How often `h` was doubled because the noise swamped the bound.
    pub h_doublings: usize,
    pub c_1: f64,
    pub lambda: f64,
    pub lipschitz: f64,
    pub entries: Vec<TimeCheck>,
    /// Closed-form `|∂_x P_{s,t} f|(x)` for linear Gaussian models.
    pub oracle: Vec<Option<f64>>,
    pub overall_pass: bool,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

impl GradientReport {
    pub fn to_check_report(&self) -> CheckReport {
        CheckReport {
            check: "gradient".into(),
            model: self.model.clone(),
            params: json!({
                "hypothesis": self.hypothesis,
                "function": self.function,
                "x": self.x,
                "s": self.s,
                "h": self.h,
                "h_doublings": self.h_doublings,
                "c_1": self.c_1,
                "lambda": self.lambda,
                "lipschitz": self.lipschitz,
                "oracle": self.oracle,
                "n": self.n,
            }),
            times: self.entries.clone(),
            overall_pass: self.overall_pass,
            seed: self.seed,
            dt: self.dt,
        }
    }
}

fn fd_quotients(snap: &Snapshot, dim: usize, f: TestFunction, h: f64) -> MeanEstimate {
    let q: Vec<f64> = (0..snap.distance.len())
        .map(|i| (f.eval(snap.y[i * dim]) - f.eval(snap.x[i * dim])) / (2.0 * h))
        .collect();
    MeanEstimate::from_samples(&q)
}

/// Central differences of `P_{s,t} f` along the first axis, with shared
/// noise on both sides, against `c_1 e^{-λ(t-s)} ‖∇f‖_∞`.
pub fn check_gradient(
    model: &DriftModel,
    hypothesis: &Hypothesis,
    f: TestFunction,
    setup: &GradientSetup,
) -> Result<GradientReport> {
    let lipschitz = f
        .lipschitz()
        .ok_or_else(|| Error::Hypothesis("gradient check needs a test function with bounded derivative".into()))?;
    let m3 = f.third_derivative_bound().unwrap_or(0.0);
    require_hypothesis(model, hypothesis)?;
    let (c_1, lambda) = bound_constants(hypothesis, 1.0)?;
    let GradientSetup {
        x,
        s,
        times,
        h,
        n,
        dt,
        seed,
    } = setup.clone();
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::domain(format!("finite-difference step must be positive, got {h}")));
    }
    if n < 2 {
        return Err(Error::domain("gradient check needs at least two paths"));
    }
    if x.len() != model.dim() {
        return Err(Error::domain("start point has the wrong dimension"));
    }
    let t_end = horizon(s, &times, dt)?;
    let dim = model.dim();
    let options = EnsembleOptions {
        checkpoints: times.clone(),
        powers: vec![1.0],
    };
    // ‖∇^t f‖ and |∇^s u| carry the metric scale at their own times
    let bound_at = |t: f64| c_1 * (-lambda * (t - s)).exp() * lipschitz * (-model.log_scale(t)).exp();
    let scale_s = (-model.log_scale(s)).exp();

    let mut step = h;
    let mut doublings = 0;
    loop {
        let mut lo = x.clone();
        let mut hi = x.clone();
        lo[0] -= step;
        hi[0] += step;
        let (fine, half) = ensemble_pair(
            model,
            &CouplingSpec::Synchronous,
            &InitialPairs::fixed(lo, hi),
            s,
            t_end,
            dt,
            n,
            seed,
            &options,
        )?;
        let estimates: Vec<(MeanEstimate, MeanEstimate)> = times
            .iter()
            .map(|&t| (fd_quotients(snapshot(&fine, t), dim, f, step), fd_quotients(snapshot(&half, t), dim, f, step)))
            .collect();
        let noisy = times
            .iter()
            .zip(&estimates)
            .any(|(&t, (e, _))| scale_s * e.se > 0.5 * bound_at(t));
        if noisy && doublings < MAX_H_DOUBLINGS {
            step *= 2.0;
            doublings += 1;
            continue;
        }

        let truncation = step * step * m3 / 6.0;
        let mut entries = Vec::new();
        let mut oracle = Vec::new();
        for (&t, (e, e_half)) in times.iter().zip(&estimates) {
            let allow = (e.mean - e_half.mean).abs();
            let est = scale_s * e.mean.abs();
            let upper = scale_s * (e.mean.abs() + CI_SIGMAS * e.se + truncation + allow);
            let lower = scale_s * (e.mean.abs() - CI_SIGMAS * e.se - truncation).max(0.0);
            entries.push(TimeCheck::one_sided(t, "gradient", est, lower, upper, bound_at(t)));
            oracle.push(gradient_oracle(model, f, x[0], s, t));
        }
        let overall_pass = entries.iter().all(|e| e.pass);
        return Ok(GradientReport {
            model: model.label().to_string(),
            hypothesis: hypothesis.clone(),
            function: f,
            x,
            s,
            h: step,
            h_doublings: doublings,
            c_1,
            lambda,
            lipschitz,
            entries,
            oracle,
            overall_pass,
            n,
            dt: fine.dt,
            seed,
        });
    }
}

fn gradient_oracle(model: &DriftModel, f: TestFunction, x: f64, s: f64, t: f64) -> Option<f64> {
    let a = match model.kind() {
        ModelKind::Ou { dim: 1, a } => *a,
        ModelKind::ForcedOu { a, .. } => *a,
        _ => return None,
    };
    let (m, v) = gaussian_marginal(model, x, s, t)?;
    Some(((-a * (t - s)).exp() * f.gaussian_derivative_expectation(m, v)?).abs())
}

/// Inputs of [`check_harnack`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnackSetup {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: f64,
    /// Final time `T`.
    pub horizon: f64,
    pub p: f64,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

/// A Monte Carlo value with its standard error and discretization allowance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub allowance: f64,
}

impl Estimate {
    pub fn upper(&self) -> f64 {
        self.value + CI_SIGMAS * self.se + self.allowance
    }

    pub fn lower(&self) -> f64 {
        self.value - CI_SIGMAS * self.se - self.allowance
    }
}

/// Both sides of the inequality in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarnackOracle {
    /// `(P f(x))^p`.
    pub lhs: f64,
    /// `factor · P f^p(y)`.
    pub rhs: f64,
    pub pass: bool,
    /// Monte Carlo sides agree with the closed forms within four standard
    /// errors plus allowance.
    pub lhs_consistent: bool,
    pub rhs_consistent: bool,
}

/// Replay of the change-of-measure step under the forced coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GirsanovReplay {
    pub n: usize,
    pub coupled_fraction: f64,
    /// `∫_s^T ξ_r² dr`.
    pub energy: f64,
    pub mean_r: MeanEstimate,
    /// `E[N]` with `N` the density raised to `q = p / (p - 1)` and renormalized.
    pub mean_n: MeanEstimate,
    /// `E[R^q]`.
    pub mean_rq: MeanEstimate,
    /// `exp(p / (4 (p-1)²) ∫ξ²)`.
    pub rq_bound: f64,
    pub r_pass: bool,
    pub n_pass: bool,
    pub rq_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnackReport {
    pub model: String,
    pub k1: f64,
    pub k2: f64,
    pub p: f64,
    pub function: TestFunction,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: f64,
    pub horizon: f64,
    pub rho_s: f64,
    pub factor_exponent: f64,
    pub factor: f64,
    /// `(P f(x))^p`.
    pub lhs: Estimate,
    /// `P f^p(y)`, without the factor.
    pub rhs: Estimate,
    pub entry: TimeCheck,
    pub oracle: Option<HarnackOracle>,
    pub girsanov: GirsanovReplay,
    pub overall_pass: bool,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

impl HarnackReport {
    pub fn to_check_report(&self) -> CheckReport {
        CheckReport {
            check: "harnack".into(),
            model: self.model.clone(),
            params: json!({
                "k1": self.k1,
                "k2": self.k2,
                "p": self.p,
                "function": self.function,
                "x": self.x,
                "y": self.y,
                "s": self.s,
                "horizon": self.horizon,
                "rho_s": self.rho_s,
                "factor_exponent": self.factor_exponent,
                "factor": self.factor,
                "lhs": self.lhs,
                "rhs": self.rhs,
                "oracle": self.oracle,
                "girsanov": self.girsanov,
                "n": self.n,
            }),
            times: vec![self.entry.clone()],
            overall_pass: self.overall_pass,
            seed: self.seed,
            dt: self.dt,
        }
    }
}

/// `p / (4 (p-1)) ∫ξ²`, the log of the Harnack factor.
pub fn harnack_exponent(k1: f64, k2: f64, p: f64, rho_s: f64, duration: f64) -> f64 {
    p / (4.0 * (p - 1.0)) * forcing_energy(k1, k2, rho_s, duration)
}

fn mean_of(values: &[f64], f: TestFunction, p: f64) -> MeanEstimate {
    let v: Vec<f64> = values.iter().map(|&u| f.eval(u).powf(p)).collect();
    MeanEstimate::from_samples(&v)
}

/// First coordinates of a flattened sample.
fn first_coordinates(flat: Vec<f64>, dim: usize) -> Vec<f64> {
    if dim == 1 {
        flat
    } else {
        flat.chunks(dim).map(|c| c[0]).collect()
    }
}

/// Checks `(P_{s,T} f(x))^p <= factor · P_{s,T} f^p(y)` from two independent
/// ensembles, and replays the density bound of the forced coupling.
pub fn check_harnack(
    model: &DriftModel,
    k1: f64,
    k2: f64,
    f: TestFunction,
    setup: &HarnackSetup,
) -> Result<HarnackReport> {
    let HarnackSetup {
        x,
        y,
        s,
        horizon,
        p,
        n,
        dt,
        seed,
    } = setup.clone();
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::Hypothesis(format!("Harnack inequality needs p > 1, got {p}")));
    }
    if !f.is_nonnegative() {
        return Err(Error::Hypothesis("Harnack inequality needs a non-negative test function".into()));
    }
    if !(horizon > s) {
        return Err(Error::domain(format!("horizon {horizon} must exceed s = {s}")));
    }
    if n < 2 {
        return Err(Error::domain("Harnack check needs at least two paths"));
    }
    require_hypothesis(model, &Hypothesis::Affine { k1, k2 })?;
    let dim = model.dim();
    let rho_s = model.distance(s, &x, &y);
    let duration = horizon - s;
    let factor_exponent = harnack_exponent(k1, k2, p, rho_s, duration);
    let factor = factor_exponent.exp();

    let seed_l = derive_seed(seed, "harnack-lhs");
    let seed_r = derive_seed(seed, "harnack-rhs");
    let (lx, lx_h) = marginal_pair(model, &x, s, horizon, dt, n, seed_l)?;
    let (ry, ry_h) = marginal_pair(model, &y, s, horizon, dt, n, seed_r)?;
    let (ml, ml_h) = (mean_of(&lx, f, 1.0), mean_of(&lx_h, f, 1.0));
    let (mr, mr_h) = (mean_of(&ry, f, p), mean_of(&ry_h, f, p));
    // delta method for the p-th power of a mean
    let lhs = Estimate {
        value: ml.mean.powf(p),
        se: p * ml.mean.abs().powf(p - 1.0) * ml.se,
        allowance: (ml.mean.powf(p) - ml_h.mean.powf(p)).abs(),
    };
    let rhs = Estimate {
        value: mr.mean,
        se: mr.se,
        allowance: (mr.mean - mr_h.mean).abs(),
    };
    let entry = TimeCheck::one_sided(
        horizon,
        "harnack",
        lhs.value,
        lhs.lower(),
        lhs.upper(),
        factor * rhs.lower(),
    );

    let oracle = match (
        dim,
        gaussian_marginal(model, x[0], s, horizon),
        gaussian_marginal(model, y[0], s, horizon),
    ) {
        (1, Some((mx, vx)), Some((my, vy))) => {
            match (f.gaussian_expectation(mx, vx, 1.0), f.gaussian_expectation(my, vy, p)) {
                (Some(el), Some(er)) => {
                    let ol = el.powf(p);
                    Some(HarnackOracle {
                        lhs: ol,
                        rhs: factor * er,
                        pass: ol <= factor * er,
                        lhs_consistent: (lhs.value - ol).abs() <= 4.0 * lhs.se + lhs.allowance,
                        rhs_consistent: (rhs.value - er).abs() <= 4.0 * rhs.se + rhs.allowance,
                    })
                }
                _ => None,
            }
        }
        _ => None,
    };

    let girsanov = girsanov_replay(model, k1, k2, p, &x, &y, s, horizon, n, dt, derive_seed(seed, "harnack-girsanov"))?;
    let oracle_ok = oracle.is_none_or(|o| o.pass && o.lhs_consistent && o.rhs_consistent);
    let overall_pass = entry.pass && oracle_ok && girsanov.r_pass && girsanov.n_pass && girsanov.rq_pass;
    Ok(HarnackReport {
        model: model.label().to_string(),
        k1,
        k2,
        p,
        function: f,
        x,
        y,
        s,
        horizon,
        rho_s,
        factor_exponent,
        factor,
        lhs,
        rhs,
        entry,
        oracle,
        girsanov,
        overall_pass,
        n,
        dt,
        seed,
    })
}

/// Simulates the forced coupling and checks the density moments the proof
/// relies on: `E[R] = 1`, `E[N] = 1` and `E[R^q] <= exp(p/(4(p-1)²) ∫ξ²)`.
#[allow(clippy::too_many_arguments)]
pub fn girsanov_replay(
    model: &DriftModel,
    k1: f64,
    k2: f64,
    p: f64,
    x: &[f64],
    y: &[f64],
    s: f64,
    horizon: f64,
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<GirsanovReplay> {
    let ens = evolve_ensemble(
        model,
        &CouplingSpec::Girsanov { k1, k2, horizon },
        &InitialPairs::fixed(x.to_vec(), y.to_vec()),
        s,
        horizon,
        dt,
        n,
        seed,
        &EnsembleOptions::default(),
    )?;
    let q = p / (p - 1.0);
    let rho_s = model.distance(s, x, y);
    let energy = forcing_energy(k1, k2, rho_s, horizon - s);
    let r: Vec<f64> = ens.girsanov.iter().map(|g| g.log_r().exp()).collect();
    let nn: Vec<f64> = ens.girsanov.iter().map(|g| g.log_n(p).exp()).collect();
    let rq: Vec<f64> = r.iter().map(|v| v.powf(q)).collect();
    let mean_r = MeanEstimate::from_samples(&r);
    let mean_n = MeanEstimate::from_samples(&nn);
    let mean_rq = MeanEstimate::from_samples(&rq);
    let rq_bound = (p / (4.0 * (p - 1.0) * (p - 1.0)) * energy).exp();
    let coupled = ens.coupled_at.iter().filter(|c| c.is_some()).count();
    Ok(GirsanovReplay {
        n,
        coupled_fraction: coupled as f64 / n as f64,
        energy,
        mean_r,
        mean_n,
        mean_rq,
        rq_bound,
        r_pass: (mean_r.mean - 1.0).abs() <= CI_SIGMAS * mean_r.se,
        n_pass: (mean_n.mean - 1.0).abs() <= CI_SIGMAS * mean_n.se,
        rq_pass: mean_rq.lower(CI_SIGMAS) <= rq_bound,
    })
}

/// Initial laws for the evolution-system estimate, sampled by inverse CDF
/// so that two laws share their uniforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    PointMass { x: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl InitialLaw {
    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            InitialLaw::PointMass { x } => x,
            InitialLaw::Uniform { lo, hi } => lo + (hi - lo) * u,
        }
    }

    /// `E[X²]` under the law.
    pub fn second_moment(&self) -> f64 {
        match *self {
            InitialLaw::PointMass { x } => x * x,
            InitialLaw::Uniform { lo, hi } => (lo * lo + lo * hi + hi * hi) / 3.0,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            InitialLaw::PointMass { x } => x.is_finite(),
            InitialLaw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid initial law {self:?}")))
        }
    }
}

/// `k2` with `I^Z <= -k2 ρ` for the 1D linear models.
pub fn linear_model_k2(model: &DriftModel) -> Result<f64> {
    let k2 = match model.kind() {
        ModelKind::Ou { dim: 1, a } | ModelKind::ForcedOu { a, .. } => *a,
        ModelKind::ConformalOu {
            a,
            amplitude,
            frequency,
        } => a - (amplitude * frequency).abs(),
        _ => {
            return Err(Error::UnsupportedModel(
                model.label().to_string(),
                "evolution-system checks need a 1D linear model".into(),
            ))
        }
    };
    if !(k2 > 0.0) {
        return Err(Error::Hypothesis(format!("model `{}` is not uniformly contractive", model.label())));
    }
    Ok(k2)
}

/// Mean of the evolution system at time `t`, where known in closed form.
pub fn esm_mean(model: &DriftModel, t: f64) -> Option<f64> {
    match model.kind() {
        ModelKind::Ou { dim: 1, .. } | ModelKind::ConformalOu { .. } => Some(0.0),
        ModelKind::ForcedOu { a, amplitude } => Some(amplitude * (a * t.sin() - t.cos()) / (a * a + 1.0)),
        _ => None,
    }
}

/// Inputs of [`estimate_esm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsmSetup {
    pub t: f64,
    /// Strictly decreasing start times below `t`.
    pub starts: Vec<f64>,
    pub law_a: InitialLaw,
    pub law_b: InitialLaw,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsmRow {
    pub s: f64,
    /// `W_1` between the two evolved samples.
    pub gap: f64,
    pub gap_se: f64,
    pub mean_a: MeanEstimate,
    pub mean_b: MeanEstimate,
    /// `E[ρ_t(0, X_t)²]` under law `a`.
    pub second_moment_a: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsmReport {
    pub model: String,
    pub t: f64,
    pub law_a: InitialLaw,
    pub law_b: InitialLaw,
    pub rows: Vec<EsmRow>,
    pub fitted_rate: Option<f64>,
    pub rate_r2: Option<f64>,
    pub lambda: f64,
    pub rate_threshold: f64,
    pub rate_pass: bool,
    /// First start whose gap differs from the previous one by less than two
    /// combined standard errors.
    pub converged_at: Option<f64>,
    pub target_mean: Option<f64>,
    /// Earliest-start mean within three standard errors of the target.
    pub mean_pass: Option<bool>,
    pub gaps_nonnegative: bool,
    pub overall_pass: bool,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

impl EsmReport {
    pub fn to_check_report(&self) -> CheckReport {
        let mut times: Vec<TimeCheck> = self
            .rows
            .iter()
            .map(|r| {
                TimeCheck::one_sided(
                    r.s,
                    "w1_gap",
                    r.gap,
                    (r.gap - CI_SIGMAS * r.gap_se).max(0.0),
                    r.gap + CI_SIGMAS * r.gap_se,
                    f64::INFINITY,
                )
            })
            .collect();
        if let (Some(target), Some(last)) = (self.target_mean, self.rows.last()) {
            let m = last.mean_a;
            let dev = (m.mean - target).abs();
            times.push(TimeCheck::one_sided(
                last.s,
                "mean_deviation",
                dev,
                (dev - CI_SIGMAS * m.se).max(0.0),
                dev,
                CI_SIGMAS * m.se,
            ));
        }
        CheckReport {
            check: "esm".into(),
            model: self.model.clone(),
            params: json!({
                "t": self.t,
                "law_a": self.law_a,
                "law_b": self.law_b,
                "rows": self.rows,
                "fitted_rate": self.fitted_rate,
                "rate_r2": self.rate_r2,
                "lambda": self.lambda,
                "rate_threshold": self.rate_threshold,
                "rate_pass": self.rate_pass,
                "converged_at": self.converged_at,
                "target_mean": self.target_mean,
                "mean_pass": self.mean_pass,
                "gaps_nonnegative": self.gaps_nonnegative,
                "n": self.n,
            }),
            times,
            overall_pass: self.overall_pass,
            seed: self.seed,
            dt: self.dt,
        }
    }
}

/// The second moments of law `a` in an evolution-system report against the
/// Lyapunov bound `e^{-C2 (t-s)} E[ρ_s(0, X_s)²] + C1 / C2`.
pub fn esm_second_moment_checks(model: &DriftModel, report: &EsmReport) -> Result<Vec<TimeCheck>> {
    let c = lyapunov_constants(model)?;
    let initial = report.law_a.second_moment();
    Ok(report
        .rows
        .iter()
        .map(|r| {
            let scale2 = (2.0 * model.log_scale(r.s)).exp();
            let bound = (-c.c2 * (report.t - r.s)).exp() * scale2 * initial + c.c1 / c.c2;
            let m = r.second_moment_a;
            TimeCheck::one_sided(r.s, "second_moment", m.mean, m.lower(CI_SIGMAS), m.upper(CI_SIGMAS), bound)
        })
        .collect())
}

fn check_starts(t: f64, starts: &[f64]) -> Result<()> {
    if starts.is_empty() {
        return Err(Error::domain("no start times given"));
    }
    if starts.iter().any(|s| !(s.is_finite() && *s < t)) {
        return Err(Error::domain(format!("start times must be finite and below t = {t}")));
    }
    if starts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::domain("start times must be strictly decreasing"));
    }
    Ok(())
}

/// Evolves two initial laws from each start to `t` and tracks their `W_1`
/// gap, which should vanish exponentially as the start recedes.
///
/// Both laws use the same uniforms and each path pair shares its noise, so
/// the gap is measured with common random numbers.
pub fn estimate_esm(model: &DriftModel, setup: &EsmSetup) -> Result<EsmReport> {
    let EsmSetup {
        t,
        starts,
        law_a,
        law_b,
        n,
        dt,
        seed,
    } = setup.clone();
    check_starts(t, &starts)?;
    law_a.check()?;
    law_b.check()?;
    if n < 2 {
        return Err(Error::domain("evolution-system estimate needs at least two paths"));
    }
    let k2 = linear_model_k2(model)?;
    require_hypothesis(model, &Hypothesis::Affine { k1: 0.0, k2 })?;
    let lambda = cor1_constants(0.0, k2, 1.0)?.lambda;

    let mut rng = stream(derive_seed(seed, "esm-law"));
    let uniforms: Vec<f64> = (0..n).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
    let xa: Vec<Vec<f64>> = uniforms.iter().map(|&u| vec![law_a.quantile(u)]).collect();
    let xb: Vec<Vec<f64>> = uniforms.iter().map(|&u| vec![law_b.quantile(u)]).collect();
    let initial = InitialPairs::Samples { x: xa, y: xb };
    let scale = model.log_scale(t).exp();
    let ctx = context_at(model, t);

    let mut rows = Vec::with_capacity(starts.len());
    let mut used_dt = dt;
    for (k, &s) in starts.iter().enumerate() {
        let ens = evolve_ensemble(
            model,
            &CouplingSpec::Synchronous,
            &initial,
            s,
            t,
            dt,
            n,
            derive_seed(seed, &format!("esm-start-{k}")),
            &EnsembleOptions::default(),
        )?;
        used_dt = ens.dt;
        let snap = ens.terminal();
        let mu = EmpiricalMeasure::from_1d(&snap.x)?.with_context(ctx);
        let nu = EmpiricalMeasure::from_1d(&snap.y)?.with_context(ctx);
        let ci = bootstrap_ci(
            &mu,
            &nu,
            1.0,
            CostKind::RhoP,
            BOOTSTRAP_REPLICATES,
            BOOTSTRAP_LEVEL,
            derive_seed(seed, &format!("esm-bootstrap-{k}")),
        )?;
        let sq: Vec<f64> = snap.x.iter().map(|v| (scale * v).powi(2)).collect();
        rows.push(EsmRow {
            s,
            gap: ci.point,
            gap_se: ci.std_error,
            mean_a: MeanEstimate::from_samples(&snap.x),
            mean_b: MeanEstimate::from_samples(&snap.y),
            second_moment_a: MeanEstimate::from_samples(&sq),
        });
    }

    let (fx, fy): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.gap > 0.0)
        .map(|r| (t - r.s, r.gap.ln()))
        .unzip();
    let (fitted_rate, rate_r2) = match ols(&fx, &fy) {
        Some((_, slope, r2)) => (Some(-slope), Some(r2)),
        None => (None, None),
    };
    let rate_threshold = (1.0 - RATE_TOLERANCE) * lambda;
    let rate_pass = fitted_rate.is_none_or(|r| r >= rate_threshold);
    let converged_at = rows.windows(2).find_map(|w| {
        let combined = (w[0].gap_se.powi(2) + w[1].gap_se.powi(2)).sqrt();
        ((w[1].gap - w[0].gap).abs() < 2.0 * combined).then_some(w[1].s)
    });
    let target_mean = esm_mean(model, t);
    let mean_pass = target_mean.map(|m| {
        let last = rows.last().expect("at least one start").mean_a;
        (last.mean - m).abs() <= CI_SIGMAS * last.se
    });
    let gaps_nonnegative = rows.iter().all(|r| r.gap >= 0.0);
    let overall_pass = rate_pass && gaps_nonnegative && mean_pass.unwrap_or(true);
    Ok(EsmReport {
        model: model.label().to_string(),
        t,
        law_a,
        law_b,
        rows,
        fitted_rate,
        rate_r2,
        lambda,
        rate_threshold,
        rate_pass,
        converged_at,
        target_mean,
        mean_pass,
        gaps_nonnegative,
        overall_pass,
        n,
        dt: used_dt,
        seed,
    })
}

/// Constants with `(L_t + ∂_t) ρ_t(0, ·)² <= C1 - C2 ρ_t(0, ·)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConstants {
    pub c1: f64,
    pub c2: f64,
}

/// Derived by hand for each linear family. For the forced model,
/// `2A|x| <= A²/a + a x²` gives `C1 = 2 + A²/a`, `C2 = a`.
pub fn lyapunov_constants(model: &DriftModel) -> Result<LyapunovConstants> {
    let (c1, c2) = match model.kind() {
        ModelKind::Ou { dim, a } => (2.0 * *dim as f64, 2.0 * a),
        ModelKind::ForcedOu { a, amplitude } => (2.0 + amplitude * amplitude / a, *a),
        ModelKind::ConformalOu {
            a,
            amplitude,
            frequency,
        } => (2.0, 2.0 * (a - (amplitude * frequency).abs())),
        ModelKind::Gradient { .. } => {
            return Err(Error::UnsupportedModel(
                model.label().to_string(),
                "no Lyapunov constants for general gradient drifts".into(),
            ))
        }
    };
    if !(c2 > 0.0) {
        return Err(Error::Hypothesis(format!("model `{}` has no confining Lyapunov bound", model.label())));
    }
    Ok(LyapunovConstants { c1, c2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRow {
    pub s: f64,
    pub moment: MeanEstimate,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub model: String,
    pub t: f64,
    pub constants: LyapunovConstants,
    /// `C1 / C2`.
    pub bound: f64,
    pub rows: Vec<LyapunovRow>,
    pub overall_pass: bool,
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
}

impl LyapunovReport {
    pub fn to_check_report(&self) -> CheckReport {
        CheckReport {
            check: "lyapunov".into(),
            model: self.model.clone(),
            params: json!({
                "t": self.t,
                "constants": self.constants,
                "bound": self.bound,
                "n": self.n,
            }),
            times: self
                .rows
                .iter()
                .map(|r| {
                    TimeCheck::one_sided(
                        r.s,
                        "second_moment",
                        r.moment.mean,
                        r.moment.lower(CI_SIGMAS),
                        r.moment.upper(CI_SIGMAS),
                        self.bound,
                    )
                })
                .collect(),
            overall_pass: self.overall_pass,
            seed: self.seed,
            dt: self.dt,
        }
    }
}

/// Second moment of `ρ_t(0, X_t)` started from `0` at each `s`, against
/// `C1 / C2`.
pub fn check_lyapunov_moment(
    model: &DriftModel,
    t: f64,
    starts: &[f64],
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<LyapunovReport> {
    check_starts(t, starts)?;
    if n < 2 {
        return Err(Error::domain("moment check needs at least two paths"));
    }
    let constants = lyapunov_constants(model)?;
    let bound = constants.c1 / constants.c2;
    let dim = model.dim();
    let origin = vec![0.0; dim];
    let scale = model.log_scale(t).exp();
    let mut rows = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let xs = simulate_marginal(model, &origin, s, t, dt, n, derive_seed(seed, &format!("lyapunov-{k}")))?;
        let sq: Vec<f64> = xs
            .chunks(dim)
            .map(|c| scale * scale * c.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let moment = MeanEstimate::from_samples(&sq);
        rows.push(LyapunovRow {
            s,
            moment,
            pass: moment.upper(CI_SIGMAS) <= bound,
        });
    }
    let overall_pass = rows.iter().all(|r| r.pass);
    let (_, h) = crate::coupling::step_plan(starts[0], t, dt)?;
    Ok(LyapunovReport {
        model: model.label().to_string(),
        t,
        constants,
        bound,
        rows,
        overall_pass,
        n,
        dt: h,
        seed,
    })
}

/// Finite-difference consistency of a user potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialCheck {
    pub points: usize,
    /// Largest `|FD - ∇U| / max(1, |∇U|)` over points and coordinates.
    pub max_gradient_error: f64,
    /// Same for `Hess U(v, v)` along coordinate and diagonal directions.
    pub max_hessian_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `∇U` and `Hess U` with central differences of `U` at `points`.
pub fn check_potential(
    potential: &dyn Potential,
    dim: usize,
    points: &[Vec<f64>],
    h: f64,
    tol: f64,
) -> Result<PotentialCheck> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::domain(format!("finite-difference step must be positive, got {h}")));
    }
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::domain("points have the wrong dimension"));
    }
    let mut directions: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            e
        })
        .collect();
    if dim > 1 {
        directions.push(vec![1.0 / (dim as f64).sqrt(); dim]);
    }
    let shifted = |x: &[f64], v: &[f64], k: f64| -> Vec<f64> { x.iter().zip(v).map(|(a, b)| a + k * b).collect() };
    let mut grad = vec![0.0; dim];
    let mut max_g = 0.0f64;
    let mut max_h = 0.0f64;
    for x in points {
        potential.gradient(x, &mut grad);
        let u0 = potential.value(x);
        for (i, v) in directions.iter().enumerate() {
            let up = potential.value(&shifted(x, v, h));
            let dn = potential.value(&shifted(x, v, -h));
            if i < dim {
                let fd = (up - dn) / (2.0 * h);
                max_g = max_g.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
            }
            let fd2 = (up - 2.0 * u0 + dn) / (h * h);
            let exact = potential.hessian_quadratic(x, v);
            max_h = max_h.max((fd2 - exact).abs() / exact.abs().max(1.0));
        }
    }
    Ok(PotentialCheck {
        points: points.len(),
        max_gradient_error: max_g,
        max_hessian_error: max_h,
        tolerance: tol,
        pass: max_g <= tol && max_h <= tol,
    })
}
