//! The distance-distortion function ψ and the explicit contraction constants.
//!
//! With the cutoff σ and the coefficient functions
//!
//! ```text
//! ℓ0(r) = 4 p² r^{2(p-1)/p} σ(r^{1/p})²
//! ℓ1(r) = p r^{1-1/p} k1(r^{1/p}) - p k2 r^{1+θ/p} + 4 p (p-1) r^{1-2/p} σ(r^{1/p})²
//! ℓ(r)  = p k2 r0^θ r                    for r <  r0^p
//!       = (p-1)/p · ℓ0(r)/r - ℓ1(r)      for r >= r0^p
//! ```
//!
//! ψ is defined by `ψ(0) = 0` and `ψ'(u) = exp(-∫_{r0^p}^u (ℓ1 + ℓ)/ℓ0)`. It
//! solves `ℓ1 ψ' + ℓ0 ψ'' = -ℓ ψ'`, is pinched between `c̃1 r^{1/p}` and
//! `c̃2 r^{1/p}`, and satisfies `ℓ ψ' >= λ ψ`.
//!
//! On `(0, r0^p)` the integrand `(ℓ1 + ℓ)/ℓ0` behaves like `(p-1)/(p v)`
//! near 0. The table is built in the variable `w = v^{1/p}`, where that part
//! integrates to an explicit power and the remainder is bounded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{log_grid, CurvatureProfile, Hypothesis};
use crate::quadrature::adaptive_gauss_kronrod;

/// Number of nodes in a ψ table.
pub const PSI_GRID_NODES: usize = 400;

/// The C¹ cutoff: 1 on `[0, r0]`, `1 - s(r - r0)` on `(r0, r0 + 1)` with
/// `s(u) = 3u² - 2u³`, and 0 from `r0 + 1` on.
#[inline]
pub(crate) fn sigma(r0: f64, r: f64) -> f64 {
    let u = r - r0;
    if u <= 0.0 {
        1.0
    } else if u >= 1.0 {
        0.0
    } else {
        1.0 - u * u * (3.0 - 2.0 * u)
    }
}

#[inline]
fn sigma_derivative(r0: f64, r: f64) -> f64 {
    let u = r - r0;
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        -6.0 * u * (1.0 - u)
    }
}

/// Value and derivative of the cutoff at `r`.
pub fn cutoff_sigma(r0: f64, r: f64) -> Result<(f64, f64)> {
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::domain(format!("cutoff needs r0 > 0, got {r0}")));
    }
    if !(r >= 0.0) {
        return Err(Error::domain(format!("cutoff needs r >= 0, got {r}")));
    }
    Ok((sigma(r0, r), sigma_derivative(r0, r)))
}

/// The cutoff as a value with its radius attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffFunction {
    pub r0: f64,
}

impl CutoffFunction {
    pub fn new(r0: f64) -> Result<Self> {
        cutoff_sigma(r0, 0.0)?;
        Ok(Self { r0 })
    }

    pub fn value(&self, r: f64) -> f64 {
        sigma(self.r0, r)
    }

    pub fn derivative(&self, r: f64) -> f64 {
        sigma_derivative(self.r0, r)
    }
}

/// `(ℓ0, ℓ1, ℓ)` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllValues {
    pub l0: f64,
    pub l1: f64,
    pub l: f64,
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::domain(format!("p must be finite and >= 1, got {p}")));
    }
    Ok(())
}

pub fn ell_functions(profile: &CurvatureProfile, p: f64, r: f64) -> Result<EllValues> {
    check_exponent(p)?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain(format!("ℓ functions need r > 0, got {r}")));
    }
    Ok(ell_unchecked(profile, p, r))
}

#[inline]
fn ell_unchecked(profile: &CurvatureProfile, p: f64, r: f64) -> EllValues {
    let rho = r.powf(1.0 / p);
    let s = sigma(profile.r0, rho);
    let s2 = s * s;
    let l0 = 4.0 * p * p * r.powf(2.0 * (p - 1.0) / p) * s2;
    let l1 = p * r.powf(1.0 - 1.0 / p) * profile.k1(rho) - p * profile.k2 * r.powf(1.0 + profile.theta / p)
        + 4.0 * p * (p - 1.0) * r.powf(1.0 - 2.0 / p) * s2;
    let l = if r < profile.r0.powf(p) {
        p * profile.k2 * profile.r0.powf(profile.theta) * r
    } else {
        (p - 1.0) / p * l0 / r - l1
    };
    EllValues { l0, l1, l }
}

/// The constants attached to ψ and to the contraction bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionConstants {
    pub p: f64,
    /// Lower pinching constant `p r0^{p-1}`.
    pub c_tilde_1: f64,
    /// Upper pinching constant `c̃1 · E`.
    pub c_tilde_2: f64,
    /// `k3 r0^θ / E`, independent of `p`.
    pub lambda: f64,
    /// `(1 + r0)^{(p-1)/p} E^{1/p}`.
    pub c_p: f64,
    /// `(1 + r0) E`, a majorant of `c_p` for every `p`.
    pub c_p_uniform: f64,
}

/// `E = exp(¼ ∫_0^{r0} k1 + k2 r0^{2+θ} / 8)`.
fn excess_factor(profile: &CurvatureProfile) -> f64 {
    (0.25 * profile.k1_integral(profile.r0) + profile.k2 / 8.0 * profile.r0.powf(2.0 + profile.theta)).exp()
}

pub fn contraction_constants(profile: &CurvatureProfile, p: f64) -> Result<ContractionConstants> {
    check_exponent(p)?;
    let e = excess_factor(profile);
    let r0 = profile.r0;
    let c_tilde_1 = p * r0.powf(p - 1.0);
    Ok(ContractionConstants {
        p,
        c_tilde_1,
        c_tilde_2: c_tilde_1 * e,
        lambda: profile.k3 * r0.powf(profile.theta) / e,
        c_p: (1.0 + r0).powf((p - 1.0) / p) * e.powf(1.0 / p),
        c_p_uniform: (1.0 + r0) * e,
    })
}

/// Closed-form constants for `I^Z <= k1 - k2 ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineConstants {
    /// `(1 + 2k1/k2)^{(p-1)/p} exp(k1² / (p k2))`
    pub prefactor: f64,
    /// `λ / p`
    pub rate: f64,
    /// `(k2/2) exp(-k1²/k2)`
    pub lambda: f64,
}

pub fn cor1_constants(k1: f64, k2: f64, p: f64) -> Result<AffineConstants> {
    check_exponent(p)?;
    if !(k1 >= 0.0 && k1.is_finite()) {
        return Err(Error::domain(format!("k1 must be >= 0, got {k1}")));
    }
    if !(k2 > 0.0 && k2.is_finite()) {
        return Err(Error::domain(format!("k2 must be > 0, got {k2}")));
    }
    let q = k1 * k1 / k2;
    let lambda = 0.5 * k2 * (-q).exp();
    Ok(AffineConstants {
        prefactor: (1.0 + 2.0 * k1 / k2).powf((p - 1.0) / p) * (q / p).exp(),
        rate: lambda / p,
        lambda,
    })
}

/// `(c_p, λ)` for either form of hypothesis: the profile formulas, or the
/// closed-form affine constants.
pub fn bound_constants(hypothesis: &Hypothesis, p: f64) -> Result<(f64, f64)> {
    match hypothesis {
        Hypothesis::Profile(profile) => {
            let c = contraction_constants(profile, p)?;
            Ok((c.c_p, c.lambda))
        }
        Hypothesis::Affine { k1, k2 } => {
            let c = cor1_constants(*k1, *k2, p)?;
            Ok((c.prefactor, c.lambda))
        }
    }
}

/// Tabulated ψ, ψ', ψ'' with the closed-form tail beyond `r0^p`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiTable {
    pub p: f64,
    pub profile: CurvatureProfile,
    pub tolerance: f64,
    pub grid: Vec<f64>,
    pub psi: Vec<f64>,
    pub psi_prime: Vec<f64>,
    pub psi_double_prime: Vec<f64>,
    pub constants: ContractionConstants,
    /// `ψ(r0^p)`, the anchor of the tail `ψ(r0^p) + p (r^{1/p} r0^{p-1} - r0^p)`.
    pub psi_at_r0p: f64,
    // Hermite data for Ψ(w) = ψ(w^p) on [0, r0]: nodes w, Ψ(w), Ψ'(w).
    w_nodes: Vec<f64>,
    w_values: Vec<f64>,
    w_slopes: Vec<f64>,
}

/// Inner integrand in `w = v^{1/p}` with the `(p-1)/w` part removed.
fn reduced_integrand(profile: &CurvatureProfile, p: f64, w: f64) -> f64 {
    if w <= 0.0 {
        // limit w -> 0: the reduced integrand tends to (k1(0+) + 0)/4
        return 0.25 * profile.k1(0.0);
    }
    let v = w.powf(p);
    let e = ell_unchecked(profile, p, v);
    p * w.powf(p - 1.0) * (e.l1 + e.l) / e.l0 - (p - 1.0) / w
}

/// Builds the ψ table on 400 logarithmic nodes over `[1e-6 r0^p, (r0+2)^p]`.
pub fn build_psi(profile: &CurvatureProfile, p: f64, tol: f64) -> Result<PsiTable> {
    let grid = log_grid(1e-6 * profile.r0.powf(p), (profile.r0 + 2.0).powf(p), PSI_GRID_NODES);
    build_psi_on(profile, p, tol, grid)
}

/// As [`build_psi`] on a caller-supplied increasing grid of positive nodes.
pub fn build_psi_on(profile: &CurvatureProfile, p: f64, tol: f64, grid: Vec<f64>) -> Result<PsiTable> {
    check_exponent(p)?;
    if !(tol > 0.0) {
        return Err(Error::domain(format!("tolerance must be positive, got {tol}")));
    }
    if grid.is_empty() || grid.iter().any(|r| !(*r > 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("ψ grid must be positive and strictly increasing"));
    }
    let r0 = profile.r0;
    let r0p = r0.powf(p);
    let constants = contraction_constants(profile, p)?;
    let slope_scale = p * r0.powf(p - 1.0);
    let g = |w: f64| reduced_integrand(profile, p, w);

    // w-nodes: 0, the interior grid nodes mapped to w, and r0.
    let mut w_nodes = vec![0.0];
    w_nodes.extend(grid.iter().filter(|&&r| r < r0p).map(|&r| r.powf(1.0 / p)));
    if *w_nodes.last().unwrap() < r0 {
        w_nodes.push(r0);
    }
    let n = w_nodes.len();

    // log_tail[i] = ∫_{w_i}^{r0} g, accumulated downward from r0
    let mut log_tail = vec![0.0; n];
    for i in (0..n - 1).rev() {
        let seg = adaptive_gauss_kronrod(g, w_nodes[i], w_nodes[i + 1], 0.1 * tol)?;
        log_tail[i] = log_tail[i + 1] + seg.value;
    }

    // Ψ(w) = ∫_0^w p r0^{p-1} exp(∫_u^{r0} g) du, accumulated upward.
    let mut w_values = vec![0.0; n];
    for i in 0..n - 1 {
        let (lo, hi) = (w_nodes[i], w_nodes[i + 1]);
        let anchor = log_tail[i + 1];
        let mut inner_err = None;
        let outer = adaptive_gauss_kronrod(
            |u| {
                if u >= hi {
                    return slope_scale * anchor.exp();
                }
                match adaptive_gauss_kronrod(g, u, hi, 0.1 * tol) {
                    Ok(inner) => slope_scale * (anchor + inner.value).exp(),
                    Err(e) => {
                        inner_err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            lo,
            hi,
            tol,
        );
        if let Some(e) = inner_err {
            return Err(e);
        }
        w_values[i + 1] = w_values[i] + outer?.value;
    }
    let w_slopes: Vec<f64> = log_tail.iter().map(|lt| slope_scale * lt.exp()).collect();
    let psi_at_r0p = w_values[n - 1];

    let mut psi = Vec::with_capacity(grid.len());
    let mut psi_prime = Vec::with_capacity(grid.len());
    let mut psi_double_prime = Vec::with_capacity(grid.len());
    let mut k = 1; // index into w_nodes of the current interior node
    for &r in &grid {
        if r < r0p {
            let lt = log_tail[k];
            let d1 = (r0p / r).powf((p - 1.0) / p) * lt.exp();
            let e = ell_unchecked(profile, p, r);
            psi.push(w_values[k]);
            psi_prime.push(d1);
            psi_double_prime.push(-(e.l1 + e.l) / e.l0 * d1);
            k += 1;
        } else {
            let (v, d1, d2) = tail(profile, p, psi_at_r0p, r);
            psi.push(v);
            psi_prime.push(d1);
            psi_double_prime.push(d2);
        }
    }

    Ok(PsiTable {
        p,
        profile: profile.clone(),
        tolerance: tol,
        grid,
        psi,
        psi_prime,
        psi_double_prime,
        constants,
        psi_at_r0p,
        w_nodes,
        w_values,
        w_slopes,
    })
}

/// Closed form `(ψ, ψ', ψ'')` for `r >= r0^p`.
fn tail(profile: &CurvatureProfile, p: f64, psi_at_r0p: f64, r: f64) -> (f64, f64, f64) {
    let r0 = profile.r0;
    let scale = r0.powf(p - 1.0);
    let v = psi_at_r0p + p * (r.powf(1.0 / p) * scale - r0.powf(p));
    let d1 = scale * r.powf((1.0 - p) / p);
    let d2 = (1.0 - p) / p * scale * r.powf((1.0 - 2.0 * p) / p);
    (v, d1, d2)
}

impl PsiTable {
    /// ψ at an arbitrary `r >= 0`: cubic Hermite interpolation in `w = r^{1/p}`
    /// below `r0^p`, closed form above.
    pub fn eval(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let r0p = self.profile.r0.powf(self.p);
        if r >= r0p {
            return tail(&self.profile, self.p, self.psi_at_r0p, r).0;
        }
        let w = r.powf(1.0 / self.p);
        let i = (self.w_nodes.partition_point(|&x| x <= w) - 1).min(self.w_nodes.len() - 2);
        let (x0, x1) = (self.w_nodes[i], self.w_nodes[i + 1]);
        let h = x1 - x0;
        let s = (w - x0) / h;
        let (y0, y1) = (self.w_values[i], self.w_values[i + 1]);
        let (m0, m1) = (self.w_slopes[i] * h, self.w_slopes[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * m1
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// Residuals of the three properties of ψ on the table grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaResiduals {
    /// `max |ℓ1 ψ' + ℓ0 ψ'' + ℓ ψ'|`.
    pub ode_residual: f64,
    /// `max (c̃1 r^{1/p} - ψ) / (c̃1 r^{1/p})`; `<= 0` when the lower bound holds.
    pub pinching_lower: f64,
    /// `max (ψ - c̃2 r^{1/p}) / (c̃2 r^{1/p})`; `<= 0` when the upper bound holds.
    pub pinching_upper: f64,
    /// `min (ℓ ψ' - λ ψ)`.
    pub drift_margin: f64,
    /// `min ψ'` and `max ψ''` over the grid.
    pub min_psi_prime: f64,
    pub max_psi_double_prime: f64,
    pub nodes: usize,
}

/// Largest accepted ODE residual.
pub const ODE_TOLERANCE: f64 = 1e-6;
/// Relative slack of the pinching bounds.
pub const PINCHING_SLACK: f64 = 1e-12;
/// Largest accepted shortfall of `ℓ ψ' - λ ψ` below zero.
pub const DRIFT_TOLERANCE: f64 = 1e-8;

impl LemmaResiduals {
    /// All three properties hold within the tolerances above, and ψ is
    /// increasing.
    pub fn pass(&self) -> bool {
        self.ode_residual <= ODE_TOLERANCE
            && self.pinching_lower <= PINCHING_SLACK
            && self.pinching_upper <= PINCHING_SLACK
            && self.drift_margin >= -DRIFT_TOLERANCE
            && self.min_psi_prime > 0.0
    }
}

pub fn lemma1_residuals(table: &PsiTable) -> LemmaResiduals {
    let c = &table.constants;
    let p = table.p;
    let mut out = LemmaResiduals {
        ode_residual: 0.0,
        pinching_lower: f64::NEG_INFINITY,
        pinching_upper: f64::NEG_INFINITY,
        drift_margin: f64::INFINITY,
        min_psi_prime: f64::INFINITY,
        max_psi_double_prime: f64::NEG_INFINITY,
        nodes: table.len(),
    };
    for i in 0..table.len() {
        let r = table.grid[i];
        let (v, d1, d2) = (table.psi[i], table.psi_prime[i], table.psi_double_prime[i]);
        let e = ell_unchecked(&table.profile, p, r);
        out.ode_residual = out.ode_residual.max((e.l1 * d1 + e.l0 * d2 + e.l * d1).abs());
        let root = r.powf(1.0 / p);
        let lower = c.c_tilde_1 * root;
        let upper = c.c_tilde_2 * root;
        out.pinching_lower = out.pinching_lower.max((lower - v) / lower);
        out.pinching_upper = out.pinching_upper.max((v - upper) / upper);
        out.drift_margin = out.drift_margin.min(e.l * d1 - c.lambda * v);
        out.min_psi_prime = out.min_psi_prime.min(d1);
        out.max_psi_double_prime = out.max_psi_double_prime.max(d2);
    }
    out
}
