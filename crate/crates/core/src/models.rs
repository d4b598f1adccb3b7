//! Model diffusions, curvature profiles and the index bound check.
//!
//! A diffusion `L = Δ + Z` on a model space is described by a [`DriftModel`].
//! Its index `I^Z(t, x, y)` is the drift of the distance process under the
//! reflection coupling; a [`CurvatureProfile`] bounds it from above by
//! `k1(ρ) - k2 ρ^{1+θ}`. [`validate_profile`] checks such a bound on a grid
//! of endpoint pairs.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{composite_gauss_legendre, GaussLegendre};
use crate::rng::{path_seed, stream};

/// The radial function `k1` of a curvature profile.
///
/// Restricted to a declarative family so that configurations are
/// reproducible; all members have a closed-form antiderivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum K1Function {
    /// `k1(r) = c`
    Constant { value: f64 },
    /// `k1(r) = slope * r`
    Linear { slope: f64 },
    /// Piecewise-linear interpolation through `(r[i], v[i])`, held constant
    /// outside the table.
    Table { r: Vec<f64>, v: Vec<f64> },
}

impl K1Function {
    pub fn constant(value: f64) -> Self {
        K1Function::Constant { value }
    }

    pub fn linear(slope: f64) -> Self {
        K1Function::Linear { slope }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            K1Function::Constant { value } => *value,
            K1Function::Linear { slope } => slope * r,
            K1Function::Table { r: rs, v } => {
                if r <= rs[0] {
                    return v[0];
                }
                let last = rs.len() - 1;
                if r >= rs[last] {
                    return v[last];
                }
                let i = rs.partition_point(|&ri| ri <= r) - 1;
                let w = (r - rs[i]) / (rs[i + 1] - rs[i]);
                v[i] + w * (v[i + 1] - v[i])
            }
        }
    }

    /// `∫_0^r k1(v) dv`.
    pub fn integral(&self, r: f64) -> f64 {
        match self {
            K1Function::Constant { value } => value * r,
            K1Function::Linear { slope } => 0.5 * slope * r * r,
            K1Function::Table { r: rs, v } => {
                if r <= rs[0] {
                    return v[0] * r;
                }
                let mut acc = v[0] * rs[0];
                for i in 0..rs.len() - 1 {
                    let (a, b) = (rs[i], rs[i + 1]);
                    if r <= a {
                        return acc;
                    }
                    let hi = r.min(b);
                    let va = v[i];
                    let vh = self.eval(hi);
                    acc += 0.5 * (va + vh) * (hi - a);
                    if r <= b {
                        return acc;
                    }
                }
                acc + v[v.len() - 1] * (r - rs[rs.len() - 1])
            }
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            K1Function::Constant { value } if !(value.is_finite() && *value >= 0.0) => {
                Err(Error::domain(format!("k1 constant must be finite and >= 0, got {value}")))
            }
            K1Function::Linear { slope } if !(slope.is_finite() && *slope >= 0.0) => {
                Err(Error::domain(format!("k1 slope must be finite and >= 0, got {slope}")))
            }
            K1Function::Table { r, v } => {
                if r.is_empty() || r.len() != v.len() {
                    return Err(Error::domain("k1 table needs equal, non-empty r and v columns"));
                }
                if r[0] < 0.0 || r.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::domain("k1 table radii must be non-negative and increasing"));
                }
                if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(Error::domain("k1 table values must be finite and >= 0"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// The data `(k1, k2, θ, r0, k3)` bounding the index of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProfile {
    pub k1: K1Function,
    pub k2: f64,
    pub theta: f64,
    pub r0: f64,
    pub k3: f64,
}

impl CurvatureProfile {
    /// Builds a profile, checking the scalar constraints.
    ///
    /// `k3 = k2` is accepted: the contraction rate only uses `min(k2, k3)`.
    pub fn new(k1: K1Function, k2: f64, theta: f64, r0: f64, k3: f64) -> Result<Self> {
        k1.check()?;
        if !(k2.is_finite() && k2 > 0.0) {
            return Err(Error::domain(format!("k2 must be positive, got {k2}")));
        }
        if !(theta.is_finite() && theta >= 0.0) {
            return Err(Error::domain(format!("theta must be >= 0, got {theta}")));
        }
        if !(r0.is_finite() && r0 > 0.0) {
            return Err(Error::domain(format!("r0 must be positive, got {r0}")));
        }
        if !(k3.is_finite() && k3 > 0.0 && k3 <= k2) {
            return Err(Error::domain(format!("k3 must lie in (0, k2], got {k3}")));
        }
        Ok(Self { k1, k2, theta, r0, k3 })
    }

    /// The profile induced by `I^Z <= k1 - k2 ρ`: `θ = 0`, `r0 = 2 k1 / k2`,
    /// `k3 = k2 / 2`. Needs `k1 > 0` so that `r0 > 0`.
    pub fn affine(k1: f64, k2: f64) -> Result<Self> {
        if !(k1 > 0.0) {
            return Err(Error::domain("affine profile needs k1 > 0 (r0 = 2 k1 / k2)"));
        }
        Self::new(K1Function::constant(k1), k2, 0.0, 2.0 * k1 / k2, 0.5 * k2)
    }

    pub fn k1(&self, r: f64) -> f64 {
        self.k1.eval(r)
    }

    pub fn k1_integral(&self, r: f64) -> f64 {
        self.k1.integral(r)
    }

    /// `k1(r) - k2 r^{1+θ}` without domain checks.
    #[inline]
    pub fn bound(&self, r: f64) -> f64 {
        self.k1.eval(r) - self.k2 * r.powf(1.0 + self.theta)
    }

    /// Largest violation of the profile's own constraints on `radii`:
    /// `k1 >= 0`, and `k1(r) - k2 r^{1+θ} <= -k3 r^{1+θ}` for `r >= r0`.
    pub fn invariant_violation(&self, radii: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for &r in radii {
            worst = worst.max(-self.k1(r));
            if r >= self.r0 {
                let rt = r.powf(1.0 + self.theta);
                worst = worst.max(self.k1(r) - self.k2 * rt + self.k3 * rt);
            }
        }
        worst
    }
}

/// `k1(r) - k2 r^{1+θ}`: the upper bound on the index at distance `r`.
pub fn index_bound(profile: &CurvatureProfile, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::domain(format!("index bound needs r > 0, got {r}")));
    }
    Ok(profile.bound(r))
}

/// A potential `U` for a gradient drift `Z = -∇U` on `R^d`.
pub trait Potential: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// `Hess U(x)(v, v)`.
    fn hessian_quadratic(&self, x: &[f64], v: &[f64]) -> f64;
}

/// `U(x) = Σ_i (quartic x_i^4 / 4 + quadratic x_i^2 / 2)`.
///
/// `quartic = 1, quadratic = -1` is the double well `(x^2 - 1)^2 / 4` up to a
/// constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableQuartic {
    pub quartic: f64,
    pub quadratic: f64,
}

impl Potential for SeparableQuartic {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .map(|v| 0.25 * self.quartic * v.powi(4) + 0.5 * self.quadratic * v * v)
            .sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = self.quartic * v * v * v + self.quadratic * v;
        }
    }

    fn hessian_quadratic(&self, x: &[f64], v: &[f64]) -> f64 {
        x.iter()
            .zip(v)
            .map(|(xi, vi)| (3.0 * self.quartic * xi * xi + self.quadratic) * vi * vi)
            .sum()
    }
}

/// The built-in model families.
#[derive(Debug, Clone)]
pub enum ModelKind {
    /// `Z(x) = -a x` on `R^d`.
    Ou { dim: usize, a: f64 },
    /// `Z = -∇U` on `R^d`.
    Gradient {
        dim: usize,
        potential: Arc<dyn Potential>,
    },
    /// `Z_t(x) = amplitude * sin(t) - a x` on `R`.
    ForcedOu { a: f64, amplitude: f64 },
    /// `Z_t(x) = -a x` on `R` with metric `g_t = e^{2φ(t)} dx²`,
    /// `φ(t) = amplitude * sin(frequency * t)`.
    ConformalOu {
        a: f64,
        amplitude: f64,
        frequency: f64,
    },
}

/// A concrete diffusion `L_t = Δ_t + Z_t` with its metric scale.
#[derive(Debug, Clone)]
pub struct DriftModel {
    label: String,
    kind: ModelKind,
}

impl DriftModel {
    pub fn new(label: impl Into<String>, kind: ModelKind) -> Result<Self> {
        let dim = match &kind {
            ModelKind::Ou { dim, a } => {
                if !a.is_finite() {
                    return Err(Error::domain("OU rate must be finite"));
                }
                *dim
            }
            ModelKind::Gradient { dim, .. } => *dim,
            ModelKind::ForcedOu { a, amplitude } => {
                if !(a.is_finite() && amplitude.is_finite()) {
                    return Err(Error::domain("forced OU parameters must be finite"));
                }
                1
            }
            ModelKind::ConformalOu {
                a,
                amplitude,
                frequency,
            } => {
                if !(a.is_finite() && amplitude.is_finite() && frequency.is_finite()) {
                    return Err(Error::domain("conformal OU parameters must be finite"));
                }
                1
            }
        };
        if dim == 0 {
            return Err(Error::domain("model dimension must be positive"));
        }
        Ok(Self {
            label: label.into(),
            kind,
        })
    }

    pub fn ou(dim: usize, a: f64) -> Result<Self> {
        Self::new(format!("ou-{dim}d"), ModelKind::Ou { dim, a })
    }

    pub fn double_well() -> Self {
        Self::new(
            "double-well",
            ModelKind::Gradient {
                dim: 1,
                potential: Arc::new(SeparableQuartic {
                    quartic: 1.0,
                    quadratic: -1.0,
                }),
            },
        )
        .expect("double well is well formed")
    }

    pub fn gradient(label: impl Into<String>, dim: usize, potential: Arc<dyn Potential>) -> Result<Self> {
        Self::new(label, ModelKind::Gradient { dim, potential })
    }

    pub fn forced_ou(a: f64, amplitude: f64) -> Result<Self> {
        Self::new("forced-ou", ModelKind::ForcedOu { a, amplitude })
    }

    pub fn conformal_ou(a: f64, amplitude: f64, frequency: f64) -> Result<Self> {
        Self::new(
            "conformal-ou",
            ModelKind::ConformalOu {
                a,
                amplitude,
                frequency,
            },
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ModelKind::Ou { dim, .. } | ModelKind::Gradient { dim, .. } => *dim,
            _ => 1,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::ForcedOu { .. } | ModelKind::ConformalOu { .. }
        )
    }

    /// Writes `Z_t(x)` (in coordinates) into `out`.
    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Ou { a, .. } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -a * v;
                }
            }
            ModelKind::Gradient { potential, .. } => {
                potential.gradient(x, out);
                for o in out.iter_mut() {
                    *o = -*o;
                }
            }
            ModelKind::ForcedOu { a, amplitude } => out[0] = amplitude * t.sin() - a * x[0],
            ModelKind::ConformalOu { a, .. } => out[0] = -a * x[0],
        }
    }

    /// Log of the metric scale, `φ(t)`; zero for static Euclidean models.
    #[inline]
    pub fn log_scale(&self, t: f64) -> f64 {
        match &self.kind {
            ModelKind::ConformalOu {
                amplitude,
                frequency,
                ..
            } => amplitude * (frequency * t).sin(),
            _ => 0.0,
        }
    }

    /// `φ'(t)`.
    pub fn log_scale_rate(&self, t: f64) -> f64 {
        match &self.kind {
            ModelKind::ConformalOu {
                amplitude,
                frequency,
                ..
            } => amplitude * frequency * (frequency * t).cos(),
            _ => 0.0,
        }
    }

    /// Riemannian distance `ρ_t(x, y) = e^{φ(t)} |x - y|`.
    #[inline]
    pub fn distance(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        let d = euclidean(x, y);
        match self.kind {
            ModelKind::ConformalOu { .. } => self.log_scale(t).exp() * d,
            _ => d,
        }
    }

    /// The index `I^Z(t, x, y)`: the drift of `dρ_t(X_t, Y_t)` under the
    /// reflection coupling, including the metric-evolution term
    /// `½ ∫ ∂_t g_t(γ̇, γ̇) ds` for evolving metrics.
    pub fn exact_index(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        let rho = euclidean(x, y);
        if rho == 0.0 {
            return Err(Error::domain("index is undefined on the diagonal x = y"));
        }
        match &self.kind {
            ModelKind::Ou { a, .. } => Ok(-a * rho),
            ModelKind::ForcedOu { a, .. } => Ok(-a * rho),
            ModelKind::ConformalOu { a, .. } => {
                Ok((self.log_scale_rate(t) - a) * self.distance(t, x, y))
            }
            ModelKind::Gradient { dim: 1, potential } => {
                let mut gx = [0.0];
                let mut gy = [0.0];
                potential.gradient(x, &mut gx);
                potential.gradient(y, &mut gy);
                Ok(-(gy[0] - gx[0]) * (y[0] - x[0]).signum())
            }
            ModelKind::Gradient { .. } => self.index_by_quadrature(x, y),
        }
    }

    /// `-∫_0^ρ Hess U(γ̇, γ̇) ds` along the segment from `x` to `y`.
    pub fn index_by_quadrature(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let ModelKind::Gradient { potential, .. } = &self.kind else {
            return Err(Error::UnsupportedModel(
                self.label.clone(),
                "segment quadrature needs a gradient drift".into(),
            ));
        };
        self.check_point(x)?;
        self.check_point(y)?;
        let rho = euclidean(x, y);
        if rho == 0.0 {
            return Err(Error::domain("index is undefined on the diagonal x = y"));
        }
        let e: Vec<f64> = x.iter().zip(y).map(|(a, b)| (b - a) / rho).collect();
        let mut point = vec![0.0; x.len()];
        let rule = GaussLegendre::new(32);
        let scale = potential.hessian_quadratic(x, &e).abs().max(1.0) * rho;
        let integral = composite_gauss_legendre(
            &rule,
            |s| {
                for ((p, xi), ei) in point.iter_mut().zip(x).zip(&e) {
                    *p = xi + s * ei;
                }
                potential.hessian_quadratic(&point, &e)
            },
            0.0,
            rho,
            1e-10 * scale,
        )?;
        Ok(-integral)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::domain(format!(
                "point has dimension {}, model `{}` has {}",
                x.len(),
                self.label,
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("point has non-finite coordinates"));
        }
        Ok(())
    }
}

pub(crate) fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
}

/// An upper bound `I^Z(t, x, y) <= f(ρ_t(x, y))` to be checked on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hypothesis {
    /// Assumption with a full curvature profile.
    Profile(CurvatureProfile),
    /// `I^Z <= k1 - k2 ρ` with constants `k1 >= 0`, `k2 > 0`.
    Affine { k1: f64, k2: f64 },
}

impl Hypothesis {
    pub fn bound(&self, r: f64) -> f64 {
        match self {
            Hypothesis::Profile(p) => p.bound(r),
            Hypothesis::Affine { k1, k2 } => k1 - k2 * r,
        }
    }

    /// Characteristic radius: `r0` of the profile, `2 k1 / k2` otherwise.
    pub fn radius(&self) -> f64 {
        match self {
            Hypothesis::Profile(p) => p.r0,
            Hypothesis::Affine { k1, k2 } => 2.0 * k1 / k2,
        }
    }

    fn check(&self) -> Result<()> {
        if let Hypothesis::Affine { k1, k2 } = self {
            if !(k1.is_finite() && *k1 >= 0.0) {
                return Err(Error::domain(format!("k1 must be >= 0, got {k1}")));
            }
            if !(k2.is_finite() && *k2 > 0.0) {
                return Err(Error::domain(format!("k2 must be > 0, got {k2}")));
            }
        }
        Ok(())
    }
}

/// Where the index inequality is sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationGrid {
    pub radii: Vec<f64>,
    pub times: Vec<f64>,
    pub pairs_per_radius: usize,
    /// Half width of the box the first endpoint is drawn from.
    pub box_half_width: f64,
    pub seed: u64,
}

impl ValidationGrid {
    /// 200 logarithmic radii on `[1e-3, 10 r]`, 50 random pairs per radius,
    /// and 16 times over one period for time-dependent models.
    pub fn standard(model: &DriftModel, radius: f64) -> Self {
        let top = 10.0 * radius.max(1.0);
        let radii = log_grid(1e-3, top, 200);
        let times = if model.is_time_dependent() {
            (0..16).map(|k| TAU * k as f64 / 16.0).collect()
        } else {
            vec![0.0]
        };
        Self {
            radii,
            times,
            pairs_per_radius: 50,
            box_half_width: top,
            seed: 0x5EED,
        }
    }
}

/// `n` logarithmically spaced points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub radii: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub pairs_per_radius: usize,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub index: f64,
    pub bound: f64,
}

/// Outcome of checking `I^Z <= bound` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexValidationReport {
    pub model: String,
    pub grid: GridSummary,
    /// `max(0, max(index - bound))` over the grid.
    pub max_violation: f64,
    pub worst_pair: Option<WorstPair>,
    /// Largest violation of the profile's own tail/sign constraints.
    pub profile_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks `exact_index(model, t, x, y) <= index_bound(profile, ρ_t(x, y)) + tol`
/// on the grid, together with the profile's own constraints.
pub fn validate_profile(
    model: &DriftModel,
    profile: &CurvatureProfile,
    grid: &ValidationGrid,
    tol: f64,
) -> Result<IndexValidationReport> {
    validate_hypothesis(model, &Hypothesis::Profile(profile.clone()), grid, tol)
}

/// As [`validate_profile`] for either form of hypothesis.
pub fn validate_hypothesis(
    model: &DriftModel,
    hypothesis: &Hypothesis,
    grid: &ValidationGrid,
    tol: f64,
) -> Result<IndexValidationReport> {
    hypothesis.check()?;
    if grid.radii.is_empty() || grid.times.is_empty() || grid.pairs_per_radius == 0 {
        return Err(Error::domain("validation grid is empty"));
    }
    if grid.radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::domain("validation radii must be positive"));
    }
    let dim = model.dim();

    let per_radius: Vec<Result<(f64, Option<WorstPair>)>> = grid
        .radii
        .par_iter()
        .enumerate()
        .map(|(ri, &r)| {
            let mut rng = stream(path_seed(grid.seed, ri as u64));
            let mut worst = (f64::NEG_INFINITY, None);
            let mut x = vec![0.0; dim];
            let mut y = vec![0.0; dim];
            let mut dir = vec![0.0; dim];
            for &t in &grid.times {
                let coord_len = r / model.log_scale(t).exp();
                for _ in 0..grid.pairs_per_radius {
                    for xi in x.iter_mut() {
                        *xi = rng.gen_range(-grid.box_half_width..=grid.box_half_width);
                    }
                    random_direction(&mut rng, &mut dir);
                    for ((yi, xi), di) in y.iter_mut().zip(&x).zip(&dir) {
                        *yi = xi + coord_len * di;
                    }
                    let rho = model.distance(t, &x, &y);
                    if rho == 0.0 {
                        continue;
                    }
                    let index = model.exact_index(t, &x, &y)?;
                    let bound = hypothesis.bound(rho);
                    let excess = index - bound;
                    if excess > worst.0 {
                        worst = (
                            excess,
                            Some(WorstPair {
                                x: x.clone(),
                                y: y.clone(),
                                t,
                                index,
                                bound,
                            }),
                        );
                    }
                }
            }
            Ok(worst)
        })
        .collect();

    let mut max_excess = f64::NEG_INFINITY;
    let mut worst_pair = None;
    for item in per_radius {
        let (excess, pair) = item?;
        if excess > max_excess {
            max_excess = excess;
            worst_pair = pair;
        }
    }
    let max_violation = max_excess.max(0.0);
    let profile_violation = match hypothesis {
        Hypothesis::Profile(p) => p.invariant_violation(&grid.radii),
        Hypothesis::Affine { .. } => 0.0,
    };
    let pass = max_violation <= tol && profile_violation <= tol;
    Ok(IndexValidationReport {
        model: model.label().to_string(),
        grid: GridSummary {
            radii: grid.radii.len(),
            r_min: grid.radii.iter().copied().fold(f64::INFINITY, f64::min),
            r_max: grid.radii.iter().copied().fold(0.0, f64::max),
            pairs_per_radius: grid.pairs_per_radius,
            times: grid.times.clone(),
        },
        max_violation,
        worst_pair,
        profile_violation,
        tolerance: tol,
        pass,
    })
}

fn random_direction<R: Rng>(rng: &mut R, dir: &mut [f64]) {
    if dir.len() == 1 {
        dir[0] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        return;
    }
    loop {
        let mut norm = 0.0;
        for d in dir.iter_mut() {
            *d = rng.sample::<f64, _>(rand_distr::StandardNormal);
            norm += *d * *d;
        }
        if norm > 1e-12 {
            let norm = norm.sqrt();
            dir.iter_mut().for_each(|d| *d /= norm);
            return;
        }
    }
}
