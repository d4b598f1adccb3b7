//! Euler–Maruyama simulation of coupled pairs.
//!
//! Three couplings are provided. The mixed coupling reflects the noise of
//! `Y` across the segment from `X` to `Y` with weight `σ(ρ)` and shares it
//! with weight `sqrt(1 - σ²)`. The Girsanov coupling shares the noise and
//! pushes `Y` toward `X` with an explicit drift `ξ_t` that forces the pair to
//! meet before a horizon. The synchronous coupling shares the noise without
//! extra drift and gives common random numbers for marginal comparisons.
//!
//! The reflected distance is a one-dimensional diffusion with noise
//! coefficient `2√2 σ`. A discrete path jumps over zero instead of hitting
//! it, so each step also tests whether the Brownian bridge between the two
//! endpoints reached zero; a crossing or a hit merges the pair.

use std::f64::consts::SQRT_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CurvatureProfile, DriftModel, ModelKind};
use crate::psi::sigma;
use crate::rng::{path_seed, CoarsenedNoise, GaussianNoise, NoiseSource};
use crate::stats::MeanEstimate;

/// Relative merge threshold: pairs closer than `1e-6 · max(1, ρ_s)` are coupled.
pub const COUPLING_THRESHOLD: f64 = 1e-6;

/// Attempts at `dt/2, dt/4, dt/8` after a missed Girsanov coupling.
pub const GIRSANOV_RETRIES: usize = 3;

// Bridge-hit probabilities below this are treated as zero without drawing.
const BRIDGE_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CouplingSpec {
    /// Reflection below `r0`, parallel from `r0 + 1` on, blended by σ between.
    ReflectionMixed { r0: f64 },
    /// Shared noise plus the forcing drift `ξ_t` toward `X`, meeting by `horizon`.
    Girsanov { k1: f64, k2: f64, horizon: f64 },
    /// Shared noise, no forcing.
    Synchronous,
}

impl CouplingSpec {
    pub fn reflection(r0: f64) -> Self {
        CouplingSpec::ReflectionMixed { r0 }
    }

    /// Reflection at every distance (σ ≡ 1).
    pub fn pure_reflection() -> Self {
        CouplingSpec::ReflectionMixed { r0: f64::MAX }
    }

    fn check(&self, model: &DriftModel, s: f64) -> Result<()> {
        match self {
            CouplingSpec::ReflectionMixed { r0 } => {
                if !(*r0 > 0.0) {
                    return Err(Error::domain(format!("cutoff radius must be positive, got {r0}")));
                }
            }
            CouplingSpec::Girsanov { k1, k2, horizon } => {
                if !(*k1 >= 0.0 && k1.is_finite() && *k2 > 0.0 && k2.is_finite()) {
                    return Err(Error::domain("forced coupling needs k1 >= 0 and k2 > 0"));
                }
                if !(*horizon > s) {
                    return Err(Error::domain(format!("horizon {horizon} must exceed the start time {s}")));
                }
                if matches!(model.kind(), ModelKind::ConformalOu { .. }) {
                    return Err(Error::UnsupportedModel(
                        model.label().to_string(),
                        "forced coupling is implemented for Euclidean models".into(),
                    ));
                }
            }
            CouplingSpec::Synchronous => {}
        }
        Ok(())
    }
}

/// Running sums behind the Girsanov densities: `S = Σ ξ ⟨n, ΔB⟩ / √2` and
/// `Q = Σ ξ² Δt`, so that `log R = S - Q/4`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GirsanovSums {
    pub stochastic: f64,
    pub quadratic: f64,
}

impl GirsanovSums {
    pub fn log_r(&self) -> f64 {
        self.stochastic - 0.25 * self.quadratic
    }

    /// `log N` with exponent `q = p / (p - 1)`.
    pub fn log_n(&self, p: f64) -> f64 {
        let q = p / (p - 1.0);
        q * self.stochastic - 0.25 * q * q * self.quadratic
    }
}

/// `∫_s^T ξ_t² dt` for the forcing drift, in closed form.
pub fn forcing_energy(k1: f64, k2: f64, rho_s: f64, duration: f64) -> f64 {
    k1 * k1 * duration
        + 4.0 * k1 * rho_s / ((k2 * duration).exp() + 1.0)
        + 2.0 * k2 * rho_s * rho_s / (2.0 * k2 * duration).exp_m1()
}

/// A recorded trajectory of a coupled pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPath {
    pub dim: usize,
    pub times: Vec<f64>,
    /// States of `X`, row-major with `dim` entries per time.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub distance: Vec<f64>,
    pub coupled_at: Option<f64>,
    /// Cumulative Girsanov sums per time, for the forced coupling.
    pub girsanov: Option<Vec<GirsanovSums>>,
}

impl CoupledPath {
    pub fn x_at(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_sums(&self) -> Option<GirsanovSums> {
        self.girsanov.as_ref().and_then(|g| g.last().copied())
    }
}

/// Number of steps and the exact step size covering `[s, t]`.
pub fn step_plan(s: f64, t: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::domain(format!("time step must be positive, got {dt}")));
    }
    if !(t >= s) || !(s.is_finite() && t.is_finite()) {
        return Err(Error::domain(format!("need s <= t, got s = {s}, t = {t}")));
    }
    if t == s {
        return Ok((0, dt));
    }
    let n = ((t - s) / dt).round().max(1.0) as usize;
    Ok((n, (t - s) / n as f64))
}

fn check_point(model: &DriftModel, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(Error::domain(format!(
            "point has dimension {}, model `{}` has {}",
            x.len(),
            model.label(),
            model.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("point has non-finite coordinates"));
    }
    Ok(())
}

struct PairKernel<'a> {
    model: &'a DriftModel,
    spec: &'a CouplingSpec,
    s: f64,
    h: f64,
    sqrt_h: f64,
    threshold: f64,
    forcing_amp: f64,
    /// Noise part of the distance increments so far, a martingale with mean 0.
    martingale: f64,
    zx: Vec<f64>,
    zy: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    e: Vec<f64>,
}

impl<'a> PairKernel<'a> {
    fn new(model: &'a DriftModel, spec: &'a CouplingSpec, s: f64, h: f64, rho_s: f64) -> Self {
        let d = model.dim();
        let forcing_amp = match spec {
            CouplingSpec::Girsanov { k2, horizon, .. } => 2.0 * k2 * rho_s / (2.0 * k2 * (horizon - s)).exp_m1(),
            _ => 0.0,
        };
        Self {
            model,
            spec,
            s,
            h,
            sqrt_h: h.sqrt(),
            threshold: COUPLING_THRESHOLD * rho_s.max(1.0),
            forcing_amp,
            martingale: 0.0,
            zx: vec![0.0; d],
            zy: vec![0.0; d],
            b1: vec![0.0; d],
            b2: vec![0.0; d],
            e: vec![0.0; d],
        }
    }

    /// Average of `ξ` over `[t, t + h]`.
    fn forcing(&self, t: f64) -> f64 {
        match self.spec {
            CouplingSpec::Girsanov { k1, k2, .. } => {
                let a = (k2 * (t - self.s)).exp();
                k1 + self.forcing_amp * a * (k2 * self.h).exp_m1() / (k2 * self.h)
            }
            _ => 0.0,
        }
    }

    /// Advances the pair from `t` to `t + h`; returns whether it coupled.
    fn step<N: NoiseSource + ?Sized>(
        &mut self,
        t: f64,
        x: &mut [f64],
        y: &mut [f64],
        coupled: bool,
        noise: &mut N,
        sums: &mut GirsanovSums,
    ) -> Result<bool> {
        let h = self.h;
        let d = x.len();
        let phi = self.model.log_scale(t);
        let scale = (-phi).exp();
        let amp = SQRT_2 * self.sqrt_h * scale;
        self.model.drift(t, x, &mut self.zx);

        if coupled {
            // same number of draws as an uncoupled step, so that refined
            // runs stay aligned; the first of each pair drives X
            let extra = matches!(self.spec, CouplingSpec::ReflectionMixed { .. });
            for i in 0..d {
                x[i] += self.zx[i] * h + amp * noise.next_normal();
                if extra {
                    noise.next_normal();
                }
            }
            y.copy_from_slice(x);
            return self.finite(t, x, y).map(|_| false);
        }

        self.model.drift(t, y, &mut self.zy);
        let mut dist = 0.0;
        for i in 0..d {
            self.e[i] = y[i] - x[i];
            dist += self.e[i] * self.e[i];
        }
        dist = dist.sqrt();
        for ei in self.e.iter_mut() {
            *ei /= dist;
        }

        let mut bridge_var = 0.0;
        match *self.spec {
            CouplingSpec::ReflectionMixed { r0 } => {
                let sg = sigma(r0, dist / scale);
                let par = (1.0 - sg * sg).max(0.0).sqrt();
                for i in 0..d {
                    self.b1[i] = noise.next_normal();
                    self.b2[i] = noise.next_normal();
                }
                let dot: f64 = self.b1.iter().zip(&self.e).map(|(b, e)| b * e).sum();
                for i in 0..d {
                    let common = par * self.b2[i];
                    x[i] += self.zx[i] * h + amp * (sg * self.b1[i] + common);
                    y[i] += self.zy[i] * h + amp * (sg * (self.b1[i] - 2.0 * dot * self.e[i]) + common);
                }
                bridge_var = 8.0 * sg * sg * h * scale * scale;
                // ⟨d(Y - X), e⟩ carries -2 √2 σ ⟨dB', e⟩ in the metric of time t
                self.martingale -= 2.0 * SQRT_2 * self.sqrt_h * sg * dot;
            }
            CouplingSpec::Synchronous => {
                for i in 0..d {
                    let b = amp * noise.next_normal();
                    x[i] += self.zx[i] * h + b;
                    y[i] += self.zy[i] * h + b;
                }
            }
            CouplingSpec::Girsanov { .. } => {
                let xi = self.forcing(t);
                let mut dot = 0.0;
                for i in 0..d {
                    let b = noise.next_normal();
                    dot += b * self.e[i];
                    x[i] += self.zx[i] * h + amp * b;
                    y[i] += (self.zy[i] - xi * self.e[i]) * h + amp * b;
                }
                sums.stochastic += xi * dot * self.sqrt_h / SQRT_2;
                sums.quadratic += xi * xi * h;
            }
        }
        self.finite(t, x, y)?;

        let mut along = 0.0;
        let mut new_dist = 0.0;
        for i in 0..d {
            let diff = y[i] - x[i];
            along += diff * self.e[i];
            new_dist += diff * diff;
        }
        new_dist = new_dist.sqrt();
        let hit = match self.spec {
            CouplingSpec::Synchronous => new_dist == 0.0,
            _ => {
                let rho_new = self.model.log_scale(t + h).exp() * new_dist;
                along <= 0.0
                    || rho_new < self.threshold
                    || (bridge_var > 0.0 && {
                        let p_hit = (-2.0 * dist * new_dist / bridge_var).exp();
                        p_hit > BRIDGE_CUTOFF && noise.next_uniform() < p_hit
                    })
            }
        };
        if hit {
            y.copy_from_slice(x);
        }
        Ok(hit)
    }

    fn finite(&self, t: f64, x: &[f64], y: &[f64]) -> Result<()> {
        if x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Simulation {
                time: t + self.h,
                detail: format!("non-finite state after step from t = {t} (drift blow-up?)"),
            })
        }
    }
}

struct PairOutcome {
    coupled_at: Option<f64>,
    sums: GirsanovSums,
}

/// Runs one pair for `n_steps` steps of size `h`, calling `observe(k, t_k,
/// x, y, ρ, sums, martingale)` at step 0 and after every step.
#[allow(clippy::too_many_arguments)]
fn run_pair<N, F>(
    model: &DriftModel,
    spec: &CouplingSpec,
    x: &mut [f64],
    y: &mut [f64],
    s: f64,
    n_steps: usize,
    h: f64,
    noise: &mut N,
    mut observe: F,
) -> Result<PairOutcome>
where
    N: NoiseSource + ?Sized,
    F: FnMut(usize, f64, &[f64], &[f64], f64, &GirsanovSums, f64),
{
    let rho_s = model.distance(s, x, y);
    let mut kernel = PairKernel::new(model, spec, s, h, rho_s);
    let mut sums = GirsanovSums::default();
    let mut coupled = x == y;
    let mut coupled_at = coupled.then_some(s);
    if coupled_at.is_none() && !matches!(spec, CouplingSpec::Synchronous) && rho_s < kernel.threshold {
        y.copy_from_slice(x);
        coupled = true;
        coupled_at = Some(s);
    }
    observe(0, s, x, y, if coupled { 0.0 } else { rho_s }, &sums, 0.0);
    for k in 0..n_steps {
        let t = s + k as f64 * h;
        let t_next = s + (k + 1) as f64 * h;
        if kernel.step(t, x, y, coupled, noise, &mut sums)? {
            coupled = true;
            coupled_at = Some(t_next);
        }
        let rho = if coupled { 0.0 } else { model.distance(t_next, x, y) };
        observe(k + 1, t_next, x, y, rho, &sums, kernel.martingale);
    }
    Ok(PairOutcome { coupled_at, sums })
}

/// Simulates one coupled pair from `(x, y)` at time `s` to time `t`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_pair(
    model: &DriftModel,
    spec: &CouplingSpec,
    x: &[f64],
    y: &[f64],
    s: f64,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<CoupledPath> {
    simulate_coupled_pair_with(model, spec, x, y, s, t, dt, &mut GaussianNoise::new(seed))
}

/// As [`simulate_coupled_pair`] with an explicit noise source.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled_pair_with(
    model: &DriftModel,
    spec: &CouplingSpec,
    x: &[f64],
    y: &[f64],
    s: f64,
    t: f64,
    dt: f64,
    noise: &mut dyn NoiseSource,
) -> Result<CoupledPath> {
    check_point(model, x)?;
    check_point(model, y)?;
    spec.check(model, s)?;
    let (n_steps, h) = step_plan(s, t, dt)?;
    let dim = model.dim();
    let mut path = CoupledPath {
        dim,
        times: Vec::with_capacity(n_steps + 1),
        x: Vec::with_capacity((n_steps + 1) * dim),
        y: Vec::with_capacity((n_steps + 1) * dim),
        distance: Vec::with_capacity(n_steps + 1),
        coupled_at: None,
        girsanov: None,
    };
    let forced = matches!(spec, CouplingSpec::Girsanov { .. });
    let mut sums_trace = Vec::new();
    let (mut xs, mut ys) = (x.to_vec(), y.to_vec());
    let outcome = run_pair(model, spec, &mut xs, &mut ys, s, n_steps, h, noise, |_, t, x, y, rho, sums, _| {
        path.times.push(t);
        path.x.extend_from_slice(x);
        path.y.extend_from_slice(y);
        path.distance.push(rho);
        if forced {
            sums_trace.push(*sums);
        }
    })?;
    path.coupled_at = outcome.coupled_at;
    if forced {
        path.girsanov = Some(sums_trace);
    }
    Ok(path)
}

/// Simulates the forced pair to `horizon` and insists that it couples.
///
/// A pair that misses is resimulated with the step halved, at most
/// [`GIRSANOV_RETRIES`] times.
#[allow(clippy::too_many_arguments)]
pub fn simulate_girsanov_pair(
    model: &DriftModel,
    k1: f64,
    k2: f64,
    x: &[f64],
    y: &[f64],
    s: f64,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<CoupledPath> {
    let spec = CouplingSpec::Girsanov { k1, k2, horizon };
    let mut step = dt;
    let mut last = None;
    for attempt in 0..=GIRSANOV_RETRIES {
        let noise_seed = if attempt == 0 { seed } else { path_seed(seed, attempt as u64) };
        let path = simulate_coupled_pair(model, &spec, x, y, s, horizon, step, noise_seed)?;
        if path.coupled_at.is_some() {
            return Ok(path);
        }
        last = path.distance.last().copied();
        step *= 0.5;
    }
    Err(Error::CouplingMissed {
        horizon,
        distance: last.unwrap_or(f64::NAN),
        attempts: GIRSANOV_RETRIES + 1,
    })
}

/// Starting points of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialPairs {
    /// Every path starts at the same `(x, y)`.
    Fixed { x: Vec<f64>, y: Vec<f64> },
    /// Path `i` starts at `(x[i], y[i])`.
    Samples { x: Vec<Vec<f64>>, y: Vec<Vec<f64>> },
}

impl InitialPairs {
    pub fn fixed(x: Vec<f64>, y: Vec<f64>) -> Self {
        InitialPairs::Fixed { x, y }
    }

    fn get(&self, i: usize) -> (&[f64], &[f64]) {
        match self {
            InitialPairs::Fixed { x, y } => (x, y),
            InitialPairs::Samples { x, y } => (&x[i], &y[i]),
        }
    }
}

/// Which snapshots and moments an ensemble records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    /// Times in `[s, t]` at which samples are kept; `t` is always added.
    pub checkpoints: Vec<f64>,
    /// Exponents `p` for the moment summaries `E[ρ^p]`.
    pub powers: Vec<f64>,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            powers: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub p: f64,
    pub estimate: MeanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub t: f64,
    pub mean_distance: MeanEstimate,
    pub moments: Vec<MomentSummary>,
    pub coupled_fraction: f64,
}

/// Samples of the ensemble at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    /// `X` states, row-major, `dim` entries per path.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub distance: Vec<f64>,
    /// Accumulated noise part of each path's distance: mean zero, usable as
    /// a control variate for distance statistics.
    pub martingale: Vec<f64>,
    /// Increments of the martingale over a partition of `[s, t]`, row-major,
    /// [`CONTROL_WIDTH`] entries per path; each row sums to `martingale`.
    /// Every column has mean zero, so they serve as joint control variates.
    pub controls: Vec<f64>,
    pub summary: SnapshotSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub model: String,
    pub spec: CouplingSpec,
    pub dim: usize,
    pub n: usize,
    pub master_seed: u64,
    pub s: f64,
    pub t: f64,
    pub dt: f64,
    pub snapshots: Vec<Snapshot>,
    pub coupled_at: Vec<Option<f64>>,
    /// Final Girsanov sums per path; empty unless the coupling is forced.
    pub girsanov: Vec<GirsanovSums>,
}

impl PathEnsemble {
    pub fn path_seed(&self, index: usize) -> u64 {
        path_seed(self.master_seed, index as u64)
    }

    pub fn terminal(&self) -> &Snapshot {
        self.snapshots.last().expect("ensemble has a terminal snapshot")
    }

    pub fn snapshot_at(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| (s.t - t).abs() <= 1e-9 * t.abs().max(1.0))
    }

    pub fn summaries(&self) -> Vec<SnapshotSummary> {
        self.snapshots.iter().map(|s| s.summary.clone()).collect()
    }
}

/// Uniform cells of the control partition.
const CONTROL_CELLS: usize = 16;
/// Control increments per path and snapshot: the uniform cells plus the
/// partial cell ending at the checkpoint.
pub const CONTROL_WIDTH: usize = CONTROL_CELLS + 1;

struct PathRecord {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    distance: Vec<f64>,
    martingale: Vec<f64>,
    controls: Vec<[f64; CONTROL_WIDTH]>,
    coupled_at: Option<f64>,
    sums: GirsanovSums,
}

fn checkpoint_steps(checkpoints: &[f64], s: f64, n_steps: usize, h: f64) -> Result<Vec<usize>> {
    checkpoints
        .iter()
        .map(|&c| {
            let k = ((c - s) / h).round();
            if !(k >= 0.0 && k as usize <= n_steps) || (s + k * h - c).abs() > 1e-9 * (c - s).abs().max(1.0) {
                return Err(Error::domain(format!("checkpoint {c} is not on the time grid of step {h}")));
            }
            Ok(k as usize)
        })
        .collect()
}

/// Normals drawn by every step of a pair under `spec`.
fn normals_per_step(spec: &CouplingSpec, dim: usize) -> usize {
    match spec {
        CouplingSpec::ReflectionMixed { .. } => 2 * dim,
        _ => dim,
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_record(
    model: &DriftModel,
    spec: &CouplingSpec,
    x0: &[f64],
    y0: &[f64],
    s: f64,
    t: f64,
    dt: f64,
    checkpoints: &[f64],
    seed: u64,
    coarse: bool,
) -> Result<PathRecord> {
    let forced = matches!(spec, CouplingSpec::Girsanov { .. });
    let attempts = if forced { GIRSANOV_RETRIES + 1 } else { 1 };
    let mut step = dt;
    let mut last_distance = f64::NAN;
    for attempt in 0..attempts {
        let (n_steps, h) = step_plan(s, t, step)?;
        let steps = checkpoint_steps(checkpoints, s, n_steps, h)?;
        let mut rec = PathRecord {
            x: Vec::with_capacity(steps.len()),
            y: Vec::with_capacity(steps.len()),
            distance: Vec::with_capacity(steps.len()),
            martingale: Vec::with_capacity(steps.len()),
            controls: Vec::with_capacity(steps.len()),
            coupled_at: None,
            sums: GirsanovSums::default(),
        };
        let noise_seed = if attempt == 0 { seed } else { path_seed(seed, attempt as u64) };
        let mut noise: Box<dyn NoiseSource> = if coarse {
            Box::new(CoarsenedNoise::new(GaussianNoise::new(noise_seed), normals_per_step(spec, x0.len())))
        } else {
            Box::new(GaussianNoise::new(noise_seed))
        };
        let (mut x, mut y) = (x0.to_vec(), y0.to_vec());
        let grid: Vec<usize> = (1..=CONTROL_CELLS)
            .map(|j| (j as f64 * n_steps as f64 / CONTROL_CELLS as f64).round() as usize)
            .collect();
        let mut grid_m: Vec<f64> = Vec::with_capacity(CONTROL_CELLS);
        let mut next = 0;
        let outcome = run_pair(model, spec, &mut x, &mut y, s, n_steps, h, &mut *noise, |k, _, x, y, rho, _, m| {
            while next < steps.len() && steps[next] == k {
                rec.x.push(x.to_vec());
                rec.y.push(y.to_vec());
                rec.distance.push(rho);
                rec.martingale.push(m);
                let mut row = [0.0; CONTROL_WIDTH];
                let mut prev = 0.0;
                for (j, &mj) in grid_m.iter().enumerate() {
                    row[j] = mj - prev;
                    prev = mj;
                }
                row[CONTROL_CELLS] = m - prev;
                rec.controls.push(row);
                next += 1;
            }
            while grid_m.len() < CONTROL_CELLS && grid[grid_m.len()] <= k {
                grid_m.push(m);
            }
        })?;
        rec.coupled_at = outcome.coupled_at;
        rec.sums = outcome.sums;
        if !forced || rec.coupled_at.is_some() {
            return Ok(rec);
        }
        last_distance = rec.distance.last().copied().unwrap_or(f64::NAN);
        step *= 0.5;
    }
    let horizon = match spec {
        CouplingSpec::Girsanov { horizon, .. } => *horizon,
        _ => t,
    };
    Err(Error::CouplingMissed {
        horizon,
        distance: last_distance,
        attempts,
    })
}

/// Simulates `n` independent coupled pairs with per-path seeds derived
/// from `master_seed`, keeping samples at the requested checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn evolve_ensemble(
    model: &DriftModel,
    spec: &CouplingSpec,
    initial: &InitialPairs,
    s: f64,
    t: f64,
    dt: f64,
    n: usize,
    master_seed: u64,
    options: &EnsembleOptions,
) -> Result<PathEnsemble> {
    evolve(model, spec, initial, s, t, dt, n, master_seed, options, false)
}

/// The ensemble at step `h` and at `h / 2` on the same Brownian paths, where
/// `h` is the step [`step_plan`] derives from `dt`: every coarse increment is
/// the sum of two fine ones. Returns `(coarse, fine)`; their difference
/// isolates the discretization error from the Monte Carlo noise.
#[allow(clippy::too_many_arguments)]
pub fn evolve_ensemble_refined(
    model: &DriftModel,
    spec: &CouplingSpec,
    initial: &InitialPairs,
    s: f64,
    t: f64,
    dt: f64,
    n: usize,
    master_seed: u64,
    options: &EnsembleOptions,
) -> Result<(PathEnsemble, PathEnsemble)> {
    let (_, h) = step_plan(s, t, dt)?;
    let coarse = evolve(model, spec, initial, s, t, h, n, master_seed, options, true)?;
    let fine = evolve(model, spec, initial, s, t, 0.5 * h, n, master_seed, options, false)?;
    Ok((coarse, fine))
}

#[allow(clippy::too_many_arguments)]
fn evolve(
    model: &DriftModel,
    spec: &CouplingSpec,
    initial: &InitialPairs,
    s: f64,
    t: f64,
    dt: f64,
    n: usize,
    master_seed: u64,
    options: &EnsembleOptions,
    coarse: bool,
) -> Result<PathEnsemble> {
    if n == 0 {
        return Err(Error::domain("ensemble needs at least one path"));
    }
    if let InitialPairs::Samples { x, y } = initial {
        if x.len() != n || y.len() != n {
            return Err(Error::domain(format!(
                "initial samples have {} and {} points for {n} paths",
                x.len(),
                y.len()
            )));
        }
    }
    for i in 0..if matches!(initial, InitialPairs::Fixed { .. }) { 1 } else { n } {
        let (x, y) = initial.get(i);
        check_point(model, x)?;
        check_point(model, y)?;
    }
    spec.check(model, s)?;
    let (_, h) = step_plan(s, t, dt)?;
    let mut checkpoints: Vec<f64> = options.checkpoints.clone();
    checkpoints.push(t);
    checkpoints.sort_by(f64::total_cmp);
    checkpoints.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
    if checkpoints.iter().any(|&c| c < s || c > t) {
        return Err(Error::domain("checkpoints must lie in [s, t]"));
    }

    let records: Vec<Result<PathRecord>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x0, y0) = initial.get(i);
            simulate_record(model, spec, x0, y0, s, t, dt, &checkpoints, path_seed(master_seed, i as u64), coarse)
                .map_err(|e| e.at_path(i))
        })
        .collect();
    let mut paths = Vec::with_capacity(n);
    for r in records {
        paths.push(r?);
    }

    let dim = model.dim();
    let snapshots = checkpoints
        .iter()
        .enumerate()
        .map(|(ci, &tc)| {
            let mut x = Vec::with_capacity(n * dim);
            let mut y = Vec::with_capacity(n * dim);
            let mut distance = Vec::with_capacity(n);
            let mut martingale = Vec::with_capacity(n);
            let mut controls = Vec::with_capacity(n * CONTROL_WIDTH);
            for p in &paths {
                controls.extend_from_slice(&p.controls[ci]);
                x.extend_from_slice(&p.x[ci]);
                y.extend_from_slice(&p.y[ci]);
                distance.push(p.distance[ci]);
                martingale.push(p.martingale[ci]);
            }
            let summary = summarize(tc, &distance, &options.powers);
            Snapshot {
                t: tc,
                x,
                y,
                distance,
                martingale,
                controls,
                summary,
            }
        })
        .collect();
    let forced = matches!(spec, CouplingSpec::Girsanov { .. });
    Ok(PathEnsemble {
        model: model.label().to_string(),
        spec: spec.clone(),
        dim,
        n,
        master_seed,
        s,
        t,
        dt: h,
        snapshots,
        coupled_at: paths.iter().map(|p| p.coupled_at).collect(),
        girsanov: if forced { paths.iter().map(|p| p.sums).collect() } else { Vec::new() },
    })
}

fn summarize(t: f64, distance: &[f64], powers: &[f64]) -> SnapshotSummary {
    let coupled = distance.iter().filter(|d| **d == 0.0).count();
    SnapshotSummary {
        t,
        mean_distance: MeanEstimate::from_samples(distance),
        moments: powers
            .iter()
            .map(|&p| {
                let v: Vec<f64> = distance.iter().map(|d| d.powf(p)).collect();
                MomentSummary {
                    p,
                    estimate: MeanEstimate::from_samples(&v),
                }
            })
            .collect(),
        coupled_fraction: coupled as f64 / distance.len() as f64,
    }
}

/// Terminal samples of `n` independent copies of the diffusion started at `x`.
pub fn simulate_marginal(
    model: &DriftModel,
    x: &[f64],
    s: f64,
    t: f64,
    dt: f64,
    n: usize,
    master_seed: u64,
) -> Result<Vec<f64>> {
    let ens = evolve_ensemble(
        model,
        &CouplingSpec::Synchronous,
        &InitialPairs::fixed(x.to_vec(), x.to_vec()),
        s,
        t,
        dt,
        n,
        master_seed,
        &EnsembleOptions::default(),
    )?;
    Ok(ens.snapshots.into_iter().last().expect("terminal snapshot").x)
}

/// A path of the scalar dominating process
/// `dr = 2√2 σ(r) db + (k1(r) - k2 r^{1+θ}) dt`, absorbed at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialPath {
    pub times: Vec<f64>,
    pub r: Vec<f64>,
    pub absorbed_at: Option<f64>,
}

pub fn simulate_radial_dominant(
    profile: &CurvatureProfile,
    r_init: f64,
    t: f64,
    dt: f64,
    seed: u64,
) -> Result<RadialPath> {
    simulate_radial_dominant_with(profile, r_init, t, dt, &mut GaussianNoise::new(seed))
}

pub fn simulate_radial_dominant_with(
    profile: &CurvatureProfile,
    r_init: f64,
    t: f64,
    dt: f64,
    noise: &mut dyn NoiseSource,
) -> Result<RadialPath> {
    let mut path = RadialPath {
        times: Vec::new(),
        r: Vec::new(),
        absorbed_at: None,
    };
    let absorbed = run_radial(profile, r_init, t, dt, noise, |_, time, r| {
        path.times.push(time);
        path.r.push(r);
    })?;
    path.absorbed_at = absorbed;
    Ok(path)
}

fn run_radial<N, F>(profile: &CurvatureProfile, r_init: f64, t: f64, dt: f64, noise: &mut N, mut observe: F) -> Result<Option<f64>>
where
    N: NoiseSource + ?Sized,
    F: FnMut(usize, f64, f64),
{
    if !(r_init > 0.0 && r_init.is_finite()) {
        return Err(Error::domain(format!("initial radius must be positive, got {r_init}")));
    }
    let (n_steps, h) = step_plan(0.0, t, dt)?;
    let amp = 2.0 * SQRT_2 * h.sqrt();
    let threshold = COUPLING_THRESHOLD * r_init.max(1.0);
    let mut r = r_init;
    let mut absorbed = None;
    if r < threshold {
        r = 0.0;
        absorbed = Some(0.0);
    }
    observe(0, 0.0, r);
    for k in 0..n_steps {
        let t_next = (k + 1) as f64 * h;
        if absorbed.is_none() {
            let sg = sigma(profile.r0, r);
            let next = r + profile.bound(r) * h + amp * sg * noise.next_normal();
            if !next.is_finite() {
                return Err(Error::Simulation {
                    time: t_next,
                    detail: format!("radial process left the finite range from r = {r}"),
                });
            }
            let var = 8.0 * sg * sg * h;
            let hit = next < threshold
                || (var > 0.0 && {
                    let p_hit = (-2.0 * r * next / var).exp();
                    p_hit > BRIDGE_CUTOFF && noise.next_uniform() < p_hit
                });
            if hit {
                r = 0.0;
                absorbed = Some(t_next);
            } else {
                r = next;
            }
        }
        observe(k + 1, t_next, r);
    }
    Ok(absorbed)
}

/// Samples of the radial process at each checkpoint, `n` paths.
pub fn radial_ensemble(
    profile: &CurvatureProfile,
    r_init: f64,
    t: f64,
    dt: f64,
    n: usize,
    master_seed: u64,
    checkpoints: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let (n_steps, h) = step_plan(0.0, t, dt)?;
    let steps = checkpoint_steps(checkpoints, 0.0, n_steps, h)?;
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut noise = GaussianNoise::new(path_seed(master_seed, i as u64));
            let mut out = vec![0.0; steps.len()];
            run_radial(profile, r_init, t, dt, &mut noise, |k, _, r| {
                for (slot, &sk) in out.iter_mut().zip(&steps) {
                    if sk == k {
                        *slot = r;
                    }
                }
            })
            .map_err(|e| e.at_path(i))?;
            Ok(out)
        })
        .collect();
    let mut by_checkpoint = vec![Vec::with_capacity(n); steps.len()];
    for row in rows {
        for (col, v) in by_checkpoint.iter_mut().zip(row?) {
            col.push(v);
        }
    }
    Ok(by_checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::K1Function;
    use crate::psi::{build_psi, contraction_constants};
    use crate::rng::{FrozenNoise, ReplayNoise};

    fn ou() -> DriftModel {
        DriftModel::ou(1, 1.0).unwrap()
    }

    #[test]
    fn equal_start_is_coupled_immediately() {
        let p = simulate_coupled_pair(&ou(), &CouplingSpec::reflection(1.0), &[0.3], &[0.3], 0.0, 0.5, 1e-2, 1).unwrap();
        assert_eq!(p.coupled_at, Some(0.0));
        assert!(p.distance.iter().all(|d| *d == 0.0));
        let g = simulate_girsanov_pair(&ou(), 0.0, 1.0, &[0.3], &[0.3], 0.0, 1.0, 1e-2, 1).unwrap();
        let sums = g.final_sums().unwrap();
        assert_eq!(sums.log_r(), 0.0);
        assert_eq!(sums.log_n(2.0), 0.0);
    }

    #[test]
    fn frozen_noise_follows_the_drift_ode() {
        for &dt in &[1e-2, 5e-3] {
            let p = simulate_coupled_pair_with(&ou(), &CouplingSpec::reflection(1.0), &[0.0], &[1.0], 0.0, 1.0, dt, &mut FrozenNoise).unwrap();
            let last = *p.distance.last().unwrap();
            assert!((last - (-1.0f64).exp()).abs() < dt, "dt={dt} {last}");
            assert!(p.coupled_at.is_none());
        }
        let prof = CurvatureProfile::new(K1Function::constant(0.0), 2.0, 0.0, 1.0, 1.0).unwrap();
        let r = simulate_radial_dominant_with(&prof, 1.5, 1.0, 1e-3, &mut FrozenNoise).unwrap();
        assert!((r.r.last().unwrap() - 1.5 * (-2.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn radial_start_at_zero_is_absorbed() {
        let prof = CurvatureProfile::new(K1Function::constant(0.0), 2.0, 0.0, 1.0, 1.0).unwrap();
        let r = simulate_radial_dominant(&prof, 1e-9, 1.0, 1e-2, 3).unwrap();
        assert_eq!(r.absorbed_at, Some(0.0));
        assert!(r.r.iter().all(|v| *v == 0.0));
        assert!(simulate_radial_dominant(&prof, 0.0, 1.0, 1e-2, 3).is_err());
    }

    #[test]
    fn paths_merge_after_coupling() {
        for seed in 0..20 {
            let p = simulate_coupled_pair(&ou(), &CouplingSpec::reflection(0.5), &[0.0], &[0.5], 0.0, 2.0, 1e-3, seed).unwrap();
            let tc = p.coupled_at.expect("small start distance couples quickly");
            for (i, &t) in p.times.iter().enumerate() {
                if t >= tc {
                    assert_eq!(p.x_at(i), p.y_at(i));
                    assert_eq!(p.distance[i], 0.0);
                }
                assert!(p.distance[i] >= 0.0);
            }
        }
    }

    #[test]
    fn multidimensional_reflection_preserves_dimension() {
        let model = DriftModel::ou(3, 1.0).unwrap();
        let p = simulate_coupled_pair(&model, &CouplingSpec::reflection(1.0), &[0.0, 0.0, 0.0], &[0.5, 0.5, 0.0], 0.0, 1.0, 1e-3, 9).unwrap();
        assert_eq!(p.x.len(), p.times.len() * 3);
        assert!(simulate_coupled_pair(&model, &CouplingSpec::reflection(1.0), &[0.0], &[0.5], 0.0, 1.0, 1e-3, 9).is_err());
    }

    #[test]
    fn ou_mean_distance_matches_exact_contraction() {
        let ens = evolve_ensemble(
            &ou(),
            &CouplingSpec::pure_reflection(),
            &InitialPairs::fixed(vec![0.0], vec![1.0]),
            0.0,
            1.0,
            1e-3,
            10_000,
            2024,
            &EnsembleOptions { checkpoints: vec![0.5], powers: vec![1.0, 2.0] },
        )
        .unwrap();
        for snap in &ens.snapshots {
            let m = snap.summary.mean_distance;
            let exact = (-snap.t).exp();
            assert!((m.mean - exact).abs() <= 3.0 * m.se, "t={} {m:?} exact {exact}", snap.t);
        }
    }

    #[test]
    fn coupled_distance_matches_scalar_sde() {
        // fine-step simulation of dρ = 2√2 db - ρ dt, absorbed at 0
        let prof = CurvatureProfile::new(K1Function::constant(0.0), 1.0, 0.0, f64::MAX / 4.0, 1.0).unwrap();
        let radial = radial_ensemble(&prof, 1.0, 1.0, 2.5e-4, 10_000, 77, &[1.0]).unwrap();
        let r = MeanEstimate::from_samples(&radial[0]);
        let ens = evolve_ensemble(
            &ou(),
            &CouplingSpec::pure_reflection(),
            &InitialPairs::fixed(vec![0.0], vec![1.0]),
            0.0,
            1.0,
            1e-3,
            10_000,
            78,
            &EnsembleOptions::default(),
        )
        .unwrap();
        let c = ens.terminal().summary.mean_distance;
        assert!((r.mean - c.mean).abs() <= 3.0 * (r.se * r.se + c.se * c.se).sqrt(), "{r:?} {c:?}");
    }

    #[test]
    fn radial_process_is_a_psi_supermartingale() {
        let prof = CurvatureProfile::new(K1Function::constant(1.0), 2.0, 0.0, 1.0, 1.0).unwrap();
        let p = 2.0;
        let table = build_psi(&prof, p, 1e-9).unwrap();
        let lambda = contraction_constants(&prof, p).unwrap().lambda;
        let times = [0.5, 1.0, 2.0];
        let samples = radial_ensemble(&prof, 1.0, 2.0, 1e-3, 10_000, 31, &times).unwrap();
        let start = table.eval(1.0);
        for (t, col) in times.iter().zip(&samples) {
            let vals: Vec<f64> = col.iter().map(|r| table.eval(r.powf(p))).collect();
            let m = MeanEstimate::from_samples(&vals);
            assert!(m.mean <= (-lambda * t).exp() * start + 3.0 * m.se, "t={t} {m:?}");
        }
    }

    fn shared_noise_violation(model: &DriftModel, prof: &CurvatureProfile, x: f64, y: f64, fine: &[f64], coarse: bool) -> f64 {
        // fine holds (b1, b2) pairs at step dt/2; coarse sums consecutive pairs
        let dt_fine = 1e-3;
        let (dt, pairs): (f64, Vec<(f64, f64)>) = if coarse {
            let v = fine
                .chunks(4)
                .map(|c| ((c[0] + c[2]) / SQRT_2, (c[1] + c[3]) / SQRT_2))
                .collect();
            (2.0 * dt_fine, v)
        } else {
            (dt_fine, fine.chunks(2).map(|c| (c[0], c[1])).collect())
        };
        let sign = (y - x).signum();
        let pair_noise: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let radial_noise: Vec<f64> = pairs.iter().map(|&(a, _)| -sign * a).collect();
        let horizon = 2.0;
        let path = simulate_coupled_pair_with(model, &CouplingSpec::reflection(prof.r0), &[x], &[y], 0.0, horizon, dt, &mut ReplayNoise::new(pair_noise)).unwrap();
        let radial = simulate_radial_dominant_with(prof, (y - x).abs(), horizon, dt, &mut ReplayNoise::new(radial_noise)).unwrap();
        path.distance.iter().zip(&radial.r).map(|(a, b)| a - b).fold(0.0, f64::max)
    }

    #[test]
    fn radial_process_dominates_the_coupled_distance() {
        let model = DriftModel::double_well();
        let prof = CurvatureProfile::new(K1Function::linear(1.0), 0.25, 2.0, 2.0 * 2f64.sqrt(), 0.125).unwrap();
        for seed in 0..10 {
            let mut g = GaussianNoise::new(seed);
            let fine: Vec<f64> = (0..8000).map(|_| g.next_normal()).collect();
            let v1 = shared_noise_violation(&model, &prof, -1.0, 1.0, &fine, true);
            let v2 = shared_noise_violation(&model, &prof, -1.0, 1.0, &fine, false);
            assert!(v1 <= 1e-9 && v2 <= 1e-9, "seed {seed}: {v1} {v2}");
        }
    }

    #[test]
    fn girsanov_density_is_mean_one_and_pair_couples() {
        let n = 10_000;
        let spec = CouplingSpec::Girsanov { k1: 0.0, k2: 1.0, horizon: 1.0 };
        let ens = evolve_ensemble(&ou(), &spec, &InitialPairs::fixed(vec![0.0], vec![1.0]), 0.0, 1.0, 1e-3, n, 5, &EnsembleOptions::default()).unwrap();
        assert!(ens.coupled_at.iter().all(|c| c.is_some_and(|t| t <= 1.0)));
        let r: Vec<f64> = ens.girsanov.iter().map(|g| g.log_r().exp()).collect();
        let m = MeanEstimate::from_samples(&r);
        assert!((m.mean - 1.0).abs() <= 3.0 * m.se, "{m:?}");
        let nn: Vec<f64> = ens.girsanov.iter().map(|g| g.log_n(2.0).exp()).collect();
        let mn = MeanEstimate::from_samples(&nn);
        assert!((mn.mean - 1.0).abs() <= 3.0 * mn.se, "{mn:?}");
        let r2: Vec<f64> = r.iter().map(|v| v * v).collect();
        let m2 = MeanEstimate::from_samples(&r2);
        let bound = (2.0 / (4.0 * 1.0) * forcing_energy(0.0, 1.0, 1.0, 1.0)).exp();
        assert!((bound - (1.0 / (std::f64::consts::E.powi(2) - 1.0)).exp()).abs() < 1e-14);
        assert!(m2.mean <= bound + 3.0 * m2.se, "{m2:?} vs {bound}");
    }

    #[test]
    fn forcing_energy_matches_quadrature() {
        let (k1, k2, rho, tau): (f64, f64, f64, f64) = (0.7, 1.3, 0.9, 1.7);
        let amp = 2.0 * k2 * rho / (2.0 * k2 * tau).exp_m1();
        let rule = crate::quadrature::GaussLegendre::new(32);
        let want = rule.integrate(|t| (k1 + amp * (k2 * t).exp()).powi(2), 0.0, tau);
        assert!((forcing_energy(k1, k2, rho, tau) - want).abs() < 1e-12);
    }

    #[test]
    fn ensembles_are_deterministic() {
        let run = |seed| {
            evolve_ensemble(&ou(), &CouplingSpec::reflection(1.0), &InitialPairs::fixed(vec![0.0], vec![1.0]), 0.0, 0.5, 1e-2, 200, seed, &EnsembleOptions::default()).unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a, b);
        assert_ne!(a.terminal().x, run(4).terminal().x);

        let single = evolve_ensemble(&ou(), &CouplingSpec::reflection(1.0), &InitialPairs::fixed(vec![0.0], vec![1.0]), 0.0, 0.5, 1e-2, 1, 3, &EnsembleOptions::default()).unwrap();
        let path = simulate_coupled_pair(&ou(), &CouplingSpec::reflection(1.0), &[0.0], &[1.0], 0.0, 0.5, 1e-2, single.path_seed(0)).unwrap();
        assert_eq!(single.terminal().distance[0], *path.distance.last().unwrap());
        assert_eq!(single.terminal().x, path.x_at(path.times.len() - 1));
    }

    #[test]
    fn blow_up_is_reported_with_path_index() {
        let model = DriftModel::ou(1, -1e200).unwrap();
        let err = evolve_ensemble(&model, &CouplingSpec::reflection(1.0), &InitialPairs::fixed(vec![1.0], vec![2.0]), 0.0, 1.0, 1e-2, 4, 1, &EnsembleOptions::default()).unwrap_err();
        match err {
            Error::Path { index, source } => {
                assert_eq!(index, 0);
                assert!(matches!(*source, Error::Simulation { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let spec = CouplingSpec::reflection(1.0);
        assert!(simulate_coupled_pair(&ou(), &spec, &[0.0], &[1.0], 1.0, 0.5, 1e-2, 1).is_err());
        assert!(simulate_coupled_pair(&ou(), &spec, &[0.0], &[1.0], 0.0, 0.5, 0.0, 1).is_err());
        let bad = CouplingSpec::Girsanov { k1: 0.0, k2: 1.0, horizon: 0.0 };
        assert!(simulate_coupled_pair(&ou(), &bad, &[0.0], &[1.0], 0.0, 0.5, 1e-2, 1).is_err());
        let conformal = DriftModel::conformal_ou(1.0, 0.2, 1.0).unwrap();
        let g = CouplingSpec::Girsanov { k1: 0.0, k2: 1.0, horizon: 1.0 };
        assert!(matches!(
            simulate_coupled_pair(&conformal, &g, &[0.0], &[1.0], 0.0, 0.5, 1e-2, 1),
            Err(Error::UnsupportedModel(..))
        ));
        assert!(evolve_ensemble(&ou(), &spec, &InitialPairs::fixed(vec![0.0], vec![1.0]), 0.0, 1.0, 1e-2, 0, 1, &EnsembleOptions::default()).is_err());
        let opts = EnsembleOptions { checkpoints: vec![0.123_45], powers: vec![1.0] };
        assert!(evolve_ensemble(&ou(), &spec, &InitialPairs::fixed(vec![0.0], vec![1.0]), 0.0, 1.0, 1e-2, 2, 1, &opts).is_err());
    }

    #[test]
    fn step_plan_covers_interval_exactly() {
        let (n, h) = step_plan(0.0, 1.0, 3e-3).unwrap();
        assert_eq!(n, 333);
        assert!((n as f64 * h - 1.0).abs() < 1e-15);
        assert_eq!(step_plan(2.0, 2.0, 1e-3).unwrap().0, 0);
    }

    #[test]
    fn refined_runs_share_brownian_paths() {
        // Euler on OU has strong order one under additive noise: on shared
        // paths the coarse and fine endpoints differ by O(h)
        let initial = InitialPairs::fixed(vec![1.0], vec![-1.0]);
        let gap = |dt: f64| {
            let (c, f) = evolve_ensemble_refined(&ou(), &CouplingSpec::Synchronous, &initial, 0.0, 1.0, dt, 400, 17, &EnsembleOptions::default()).unwrap();
            let (c, f) = (c.terminal(), f.terminal());
            c.x.iter().zip(&f.x).map(|(a, b)| (a - b).abs()).sum::<f64>() / c.x.len() as f64
        };
        let (g1, g2) = (gap(0.02), gap(0.01));
        assert!(g1 < 0.05, "{g1}");
        let ratio = g1 / g2;
        assert!((1.5..2.5).contains(&ratio), "ratio {ratio}");

        // the martingale increments of each path add up to its martingale
        let (c, _) = evolve_ensemble_refined(
            &ou(),
            &CouplingSpec::pure_reflection(),
            &initial,
            0.0,
            1.0,
            0.01,
            50,
            3,
            &EnsembleOptions {
                checkpoints: vec![0.37],
                powers: vec![1.0],
            },
        )
        .unwrap();
        for snap in &c.snapshots {
            for (row, m) in snap.controls.chunks(CONTROL_WIDTH).zip(&snap.martingale) {
                assert!((row.iter().sum::<f64>() - m).abs() < 1e-12);
            }
        }
    }
}
