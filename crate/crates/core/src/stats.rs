//! Deterministic reductions for Monte Carlo summaries.

use serde::{Deserialize, Serialize};

/// Pairwise (cascade) summation in a fixed order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let se = if n > 1 {
            let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }

    /// `mean + k * se`.
    pub fn upper(&self, k: f64) -> f64 {
        self.mean + k * self.se
    }

    pub fn lower(&self, k: f64) -> f64 {
        self.mean - k * self.se
    }
}

/// Mean of `y` with control variates of known mean zero: the average of
/// `y - Σ_j β_j c_j` with `β` from the least-squares regression of `y` on the
/// controls. `controls` is row-major, `width` entries per sample.
///
/// Controls that are constant or linearly dependent on earlier ones are
/// dropped. The standard error accounts for the fitted coefficients.
pub fn control_variates_mean(y: &[f64], controls: &[f64], width: usize) -> MeanEstimate {
    let n = y.len();
    assert_eq!(controls.len(), n * width, "controls must have `width` entries per sample");
    if width == 0 || n <= width + 2 {
        return MeanEstimate::from_samples(y);
    }
    let nf = n as f64;
    let my = pairwise_sum(y) / nf;
    let mut mc = vec![0.0; width];
    for row in controls.chunks(width) {
        for (m, c) in mc.iter_mut().zip(row) {
            *m += c;
        }
    }
    mc.iter_mut().for_each(|m| *m /= nf);
    let mut gram = vec![0.0; width * width];
    let mut rhs = vec![0.0; width];
    let mut dev = vec![0.0; width];
    for (row, yi) in controls.chunks(width).zip(y) {
        for j in 0..width {
            dev[j] = row[j] - mc[j];
        }
        for j in 0..width {
            rhs[j] += dev[j] * (yi - my);
            for k in 0..=j {
                gram[j * width + k] += dev[j] * dev[k];
            }
        }
    }
    let beta = solve_gram(&mut gram, &rhs, width);
    let used = beta.iter().filter(|b| **b != 0.0).count();
    let adjusted: Vec<f64> = controls
        .chunks(width)
        .zip(y)
        .map(|(row, yi)| yi - row.iter().zip(&beta).map(|(c, b)| c * b).sum::<f64>())
        .collect();
    let mut est = MeanEstimate::from_samples(&adjusted);
    est.se *= ((nf - 1.0) / (nf - 1.0 - used as f64)).sqrt();
    est
}

/// Solves `G β = r` for the symmetric positive semi-definite `G` (lower
/// triangle filled) by Cholesky, setting `β_j = 0` for columns whose pivot
/// collapses.
fn solve_gram(g: &mut [f64], r: &[f64], w: usize) -> Vec<f64> {
    let diag: Vec<f64> = (0..w).map(|j| g[j * w + j]).collect();
    let mut active = vec![false; w];
    for j in 0..w {
        let mut d = g[j * w + j];
        for k in 0..j {
            d -= g[j * w + k] * g[j * w + k];
        }
        if !(d > 1e-10 * diag[j]) || diag[j] == 0.0 {
            for i in j..w {
                g[i * w + j] = 0.0;
            }
            continue;
        }
        active[j] = true;
        let d = d.sqrt();
        g[j * w + j] = d;
        for i in j + 1..w {
            let mut v = g[i * w + j];
            for k in 0..j {
                v -= g[i * w + k] * g[j * w + k];
            }
            g[i * w + j] = v / d;
        }
    }
    let mut z = vec![0.0; w];
    for j in 0..w {
        if active[j] {
            let v: f64 = (0..j).map(|k| g[j * w + k] * z[k]).sum();
            z[j] = (r[j] - v) / g[j * w + j];
        }
    }
    let mut beta = vec![0.0; w];
    for j in (0..w).rev() {
        if active[j] {
            let v: f64 = (j + 1..w).map(|i| g[i * w + j] * beta[i]).sum();
            beta[j] = (z[j] - v) / g[j * w + j];
        }
    }
    beta
}

/// Ordinary least squares `y = a + b x`, returning `(a, b, R²)`.
pub fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let nf = n as f64;
    let mx = pairwise_sum(x) / nf;
    let my = pairwise_sum(y) / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((my - slope * mx, slope, r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_exact_sum() {
        let xs: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn mean_and_standard_error() {
        let m = MeanEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanEstimate::from_samples(&[7.0]).se, 0.0);
    }

    #[test]
    fn ols_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 0.25 * v).collect();
        let (a, b, r2) = ols(&x, &y).unwrap();
        assert!((a - 1.5).abs() < 1e-14 && (b + 0.25).abs() < 1e-14 && (r2 - 1.0).abs() < 1e-14);
        assert!(ols(&[1.0], &[1.0]).is_none());
        assert!(ols(&[1.0, 1.0], &[0.0, 2.0]).is_none());
    }

    #[test]
    fn control_variates_remove_shared_noise() {
        let mut rng = crate::rng::stream(4);
        let mut draw = |lo: f64, hi: f64| rand::Rng::gen_range(&mut rng, lo..hi);
        let n = 4000;
        let c: Vec<f64> = (0..2 * n).map(|_| draw(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 + 3.0 * c[2 * i] - 0.5 * c[2 * i + 1] + draw(-0.01, 0.01))
            .collect();
        let plain = MeanEstimate::from_samples(&y);
        let cv = control_variates_mean(&y, &c, 2);
        assert!(cv.se < plain.se / 100.0);
        assert!((cv.mean - 2.0).abs() < 4.0 * cv.se);

        // constant and duplicated controls are dropped, not fatal
        let mut padded = Vec::new();
        for i in 0..n {
            padded.extend_from_slice(&[c[2 * i], 0.0, c[2 * i], c[2 * i + 1]]);
        }
        let cv2 = control_variates_mean(&y, &padded, 4);
        assert!((cv2.mean - cv.mean).abs() < 1e-9 && (cv2.se - cv.se).abs() < 1e-3 * cv.se);
        assert_eq!(control_variates_mean(&y, &vec![0.0; n], 1).mean, plain.mean);
    }
}
