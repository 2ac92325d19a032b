//! Numerical checks of the dithered quantizer's statistics: Monte Carlo error
//! moments, the probability of a zero output, Laplace fits and 1/N slopes.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::quant::{nsd_quantize, nsd_scalar, NsdConfig};
use crate::tensor::{Matrix, Rng};

/// A scalar quantizer `(x, Δ, rng) → Q(x)`; swappable so the checks can be
/// run against deliberately broken implementations.
pub type ScalarQuantizer = fn(f64, f64, &mut Rng) -> f64;

/// Monte Carlo estimate of the error moments of one `(x, Δ)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub x: f64,
    pub delta: f64,
    pub mean_error: f64,
    pub second_moment: f64,
    /// `Δ²/4`.
    pub bound: f64,
    pub n_samples: u64,
    /// Standard error of `mean_error`: sample std over `√n`.
    pub standard_error: f64,
    pub max_abs_error: f64,
}

impl MomentReport {
    pub fn mean_within(&self, k_se: f64) -> bool {
        self.mean_error.abs() <= k_se * self.standard_error
    }
}

pub const MIN_MOMENT_SAMPLES: u64 = 10_000;

/// Moments of `ε = Q(x + ν) − x` for the built-in dithered quantizer.
pub fn estimate_error_moments(x: f64, delta: f64, n: u64, rng: &mut Rng) -> Result<MomentReport> {
    estimate_error_moments_with(nsd_scalar, x, delta, n, rng)
}

pub fn estimate_error_moments_with(
    q: ScalarQuantizer,
    x: f64,
    delta: f64,
    n: u64,
    rng: &mut Rng,
) -> Result<MomentReport> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(config_err(format!("delta must be > 0, got {delta}")));
    }
    if n < MIN_MOMENT_SAMPLES {
        return Err(config_err(format!("need at least {MIN_MOMENT_SAMPLES} samples, got {n}")));
    }
    // Welford for the mean and variance of ε; plain sum for E[ε²].
    let (mut mean, mut m2, mut sq, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    for i in 0..n {
        let e = q(x, delta, rng) - x;
        let d = e - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (e - mean);
        sq += e * e;
        max_abs = max_abs.max(e.abs());
    }
    let var = m2 / (n - 1) as f64;
    Ok(MomentReport {
        x,
        delta,
        mean_error: mean,
        second_moment: sq / n as f64,
        bound: delta * delta / 4.0,
        n_samples: n,
        standard_error: (var / n as f64).sqrt(),
        max_abs_error: max_abs,
    })
}

/// Zero-mean input distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum InputPdf {
    Gaussian { sigma: f64 },
    Laplace { b: f64 },
}

impl InputPdf {
    pub fn std_dev(&self) -> f64 {
        match *self {
            InputPdf::Gaussian { sigma } => sigma,
            InputPdf::Laplace { b } => b * std::f64::consts::SQRT_2,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            InputPdf::Gaussian { sigma } => 0.5 * libm::erfc(-x / (sigma * std::f64::consts::SQRT_2)),
            InputPdf::Laplace { b } => {
                if x < 0.0 {
                    0.5 * (x / b).exp()
                } else {
                    1.0 - 0.5 * (-x / b).exp()
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let p = match *self {
            InputPdf::Gaussian { sigma } => sigma,
            InputPdf::Laplace { b } => b,
        };
        if p > 0.0 && p.is_finite() {
            Ok(())
        } else {
            Err(config_err(format!("input pdf parameter must be > 0, got {self:?}")))
        }
    }
}

/// Density of `x + ν` with `ν ~ U(−Δ/2, Δ/2)`:
/// `(F(t + Δ/2) − F(t − Δ/2)) / Δ`.
pub fn dithered_pdf(pdf: &InputPdf, delta: f64, t: f64) -> f64 {
    (pdf.cdf(t + 0.5 * delta) - pdf.cdf(t - 0.5 * delta)) / delta
}

pub const QUADRATURE_TOL: f64 = 1e-8;

/// Probability that the dithered quantizer outputs zero when `Δ = s·std`.
pub fn predict_sparsity(pdf: &InputPdf, s: f64) -> Result<f64> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(config_err(format!("scale factor must be > 0, got {s}")));
    }
    pdf.validate()?;
    predict_sparsity_delta(pdf, s * pdf.std_dev())
}

/// Probability of a zero output for an explicit step `Δ`: the mass of the
/// dithered density on the dead zone `[−Δ/2, Δ/2]`.
pub fn predict_sparsity_delta(pdf: &InputPdf, delta: f64) -> Result<f64> {
    pdf.validate()?;
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(config_err(format!("delta must be > 0, got {delta}")));
    }
    let f = |t: f64| dithered_pdf(pdf, delta, t);
    let h = 0.5 * delta;
    // the density kinks at the dead-zone edges and peaks at 0
    let p = adaptive_simpson(&f, -h, 0.0, QUADRATURE_TOL / 2.0) + adaptive_simpson(&f, 0.0, h, QUADRATURE_TOL / 2.0);
    Ok(p.clamp(0.0, 1.0))
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, m) = (f(a), f(b), 0.5 * (a + b));
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Predicted against measured zero probability at one scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPrediction {
    pub scale: f64,
    pub predicted_p0: f64,
    pub empirical_p0: f64,
}

/// Quantizes `n` i.i.d. samples of `pdf` with `Δ = s·std(sample)` and
/// compares the zero fraction with [`predict_sparsity`].
pub fn sparsity_check(pdf: &InputPdf, s: f64, n: usize, rng: &mut Rng) -> Result<SparsityPrediction> {
    let predicted_p0 = predict_sparsity(pdf, s)?;
    let g = sample_matrix(pdf, n, rng)?;
    let (q, _) = nsd_quantize(&g, &NsdConfig::new(s)?, rng)?;
    Ok(SparsityPrediction {
        scale: s,
        predicted_p0,
        empirical_p0: q.sparsity(),
    })
}

/// `n` i.i.d. draws from `pdf` as a `1 × n` matrix.
pub fn sample_matrix(pdf: &InputPdf, n: usize, rng: &mut Rng) -> Result<Matrix> {
    pdf.validate()?;
    let data = (0..n)
        .map(|_| match *pdf {
            InputPdf::Gaussian { sigma } => sigma * rng.normal(),
            InputPdf::Laplace { b } => {
                let u = rng.open01() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        })
        .collect();
    Matrix::from_vec(1, n, data)
}

/// Zero-centred Laplace fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceFit {
    pub b: f64,
    /// All samples were zero.
    pub degenerate: bool,
}

pub const MIN_FIT_SAMPLES: usize = 100;

/// Maximum-likelihood scale of a Laplace law with location 0: `mean|x|`.
pub fn fit_laplace(samples: &[f64]) -> Result<LaplaceFit> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(config_err(format!(
            "need at least {MIN_FIT_SAMPLES} samples for a Laplace fit, got {}",
            samples.len()
        )));
    }
    let b = samples.iter().map(|x| x.abs()).sum::<f64>() / samples.len() as f64;
    Ok(LaplaceFit {
        b,
        degenerate: b == 0.0,
    })
}

/// Least-squares slope of `log(variance)` against `log(N)`.
pub fn variance_slope(n_values: &[usize], variances: &[f64]) -> Result<f64> {
    if n_values.len() != variances.len() {
        return Err(config_err("n_values and variances differ in length"));
    }
    let mut distinct = n_values.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 || distinct[0] == 0 {
        return Err(config_err("variance slope needs at least 3 distinct positive N"));
    }
    if let Some(v) = variances.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(config_err(format!("variances must be positive, got {v}")));
    }
    let xs: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Sample correlation of the errors of two inputs quantized with
/// successive dither draws, and its standard error `1/√n`.
pub fn error_correlation(q: ScalarQuantizer, x1: f64, x2: f64, delta: f64, n: u64, rng: &mut Rng) -> (f64, f64) {
    let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let e1 = q(x1, delta, rng) - x1;
        let e2 = q(x2, delta, rng) - x2;
        s1 += e1;
        s2 += e2;
        s11 += e1 * e1;
        s22 += e2 * e2;
        s12 += e1 * e2;
    }
    let nf = n as f64;
    let cov = s12 / nf - (s1 / nf) * (s2 / nf);
    let v1 = s11 / nf - (s1 / nf).powi(2);
    let v2 = s22 / nf - (s2 / nf).powi(2);
    let corr = if v1 > 0.0 && v2 > 0.0 { cov / (v1 * v2).sqrt() } else { 0.0 };
    (corr, 1.0 / nf.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    // closed forms of P(zero) = E[(1 − |x|/Δ)+]
    fn gaussian_p0(s: f64) -> f64 {
        libm::erf(s / 2f64.sqrt()) - 2.0 / (s * (2.0 * PI).sqrt()) * (1.0 - (-s * s / 2.0).exp())
    }

    fn laplace_p0(b: f64, delta: f64) -> f64 {
        let r = delta / b;
        (1.0 - (-r).exp()) - (1.0 - (-r).exp() * (1.0 + r)) / r
    }

    #[test]
    fn gaussian_prediction_matches_closed_form() {
        for s in [0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0] {
            let p = predict_sparsity(&InputPdf::Gaussian { sigma: 1.0 }, s).unwrap();
            assert!((p - gaussian_p0(s)).abs() < 1e-8, "s={s}: {p} vs {}", gaussian_p0(s));
            let p2 = predict_sparsity(&InputPdf::Gaussian { sigma: 3.7 }, s).unwrap();
            assert!((p - p2).abs() < 1e-8);
        }
    }

    #[test]
    fn laplace_prediction_matches_closed_form() {
        for b in [0.3, 1.0, 2.0] {
            for s in [0.5, 1.0, 3.0, 8.0] {
                let pdf = InputPdf::Laplace { b };
                let delta = s * b * 2f64.sqrt();
                let p = predict_sparsity(&pdf, s).unwrap();
                assert!((p - laplace_p0(b, delta)).abs() < 1e-8, "b={b} s={s}");
            }
        }
    }

    #[test]
    fn prediction_matches_brute_double_integral() {
        // midpoint rule over the unconvolved density and the dither
        let (sigma, s) = (1.0, 2.5);
        let delta = s * sigma;
        let pdf = |x: f64| (-x * x / 2.0).exp() / (2.0 * PI).sqrt();
        let (nx, nn) = (4000, 400);
        let (lo, hi) = (-9.0, 9.0);
        let dx = (hi - lo) / nx as f64;
        let mut p = 0.0;
        for i in 0..nx {
            let x = lo + (i as f64 + 0.5) * dx;
            let mut zero = 0.0;
            for j in 0..nn {
                let nu = -delta / 2.0 + (j as f64 + 0.5) * delta / nn as f64;
                if (x + nu).abs() < delta / 2.0 {
                    zero += 1.0 / nn as f64;
                }
            }
            p += pdf(x) * zero * dx;
        }
        let q = predict_sparsity(&InputPdf::Gaussian { sigma }, s).unwrap();
        assert!((p - q).abs() < 1e-3, "{p} vs {q}");
    }

    #[test]
    fn prediction_limits_and_monotonicity() {
        let g = InputPdf::Gaussian { sigma: 1.0 };
        assert!(predict_sparsity(&g, 1e-6).unwrap() < 1e-5);
        let grid: Vec<f64> = (0..=95).map(|i| 0.5 + 0.1 * i as f64).collect();
        let ps: Vec<f64> = grid.iter().map(|&s| predict_sparsity(&g, s).unwrap()).collect();
        assert!(ps.windows(2).all(|w| w[1] > w[0]));
        assert!(predict_sparsity(&g, 0.0).is_err());
        assert!(predict_sparsity(&InputPdf::Laplace { b: 0.0 }, 1.0).is_err());
    }

    #[test]
    fn simpson_integrates_polynomials_and_exp() {
        assert!((adaptive_simpson(&|x| x * x * x, 0.0, 2.0, 1e-12) - 4.0).abs() < 1e-12);
        assert!((adaptive_simpson(&|x: f64| x.exp(), 0.0, 1.0, 1e-10) - (1f64.exp() - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn moments_at_symmetric_point() {
        let r = estimate_error_moments(0.0, 1.0, 200_000, &mut Rng::new(1)).unwrap();
        assert!(r.mean_within(5.0));
        assert!(r.second_moment <= r.bound * 1.01);
        assert!(r.max_abs_error <= 1.0);
    }

    #[test]
    fn worst_case_point_has_exact_second_moment() {
        let r = estimate_error_moments(0.5, 1.0, 100_000, &mut Rng::new(2)).unwrap();
        assert!((r.second_moment - 0.25).abs() < 1e-12);
        assert!(r.mean_within(5.0));
    }

    #[test]
    fn moments_are_periodic_in_delta() {
        let delta = 0.5;
        let a = estimate_error_moments(0.0, delta, 50_000, &mut Rng::new(3)).unwrap();
        for k in [-3.0, 1.0, 4.0] {
            let b = estimate_error_moments(k * delta, delta, 50_000, &mut Rng::new(3)).unwrap();
            assert!((a.mean_error - b.mean_error).abs() < 1e-12);
            assert!((a.second_moment - b.second_moment).abs() < 1e-12);
        }
    }

    #[test]
    fn undithered_rounding_is_biased() {
        fn round_only(x: f64, d: f64, _: &mut Rng) -> f64 {
            d * (x / d + 0.5).floor()
        }
        let r = estimate_error_moments_with(round_only, 0.25, 1.0, 10_000, &mut Rng::new(0)).unwrap();
        assert!(!r.mean_within(5.0));
    }

    #[test]
    fn moment_preconditions() {
        assert!(estimate_error_moments(0.0, 0.0, 10_000, &mut Rng::new(0)).is_err());
        assert!(estimate_error_moments(0.0, 1.0, 9_999, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn gaussian_empirical_sparsity_tracks_prediction() {
        let mut rng = Rng::new(7);
        let r = sparsity_check(&InputPdf::Gaussian { sigma: 1.0 }, 3.0, 200_000, &mut rng).unwrap();
        assert!((r.empirical_p0 - r.predicted_p0).abs() < 0.01, "{r:?}");
    }

    #[test]
    fn laplace_fit_cases() {
        let mut rng = Rng::new(8);
        let x = sample_matrix(&InputPdf::Laplace { b: 2.0 }, 100_000, &mut rng).unwrap();
        let f = fit_laplace(x.data()).unwrap();
        assert!((f.b - 2.0).abs() < 0.04, "{f:?}");
        assert!(!f.degenerate);
        assert!(fit_laplace(&[0.0; 100]).unwrap().degenerate);
        let two: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.5 } else { -1.5 }).collect();
        assert_eq!(fit_laplace(&two).unwrap().b, 1.5);
        assert!(fit_laplace(&[1.0; 99]).is_err());
    }

    #[test]
    fn slope_cases() {
        let n = [1, 2, 4, 8, 16];
        let inv: Vec<f64> = n.iter().map(|&k| 3.0 / k as f64).collect();
        assert!((variance_slope(&n, &inv).unwrap() + 1.0).abs() < 1e-12);
        assert!(variance_slope(&n, &[2.0; 5]).unwrap().abs() < 1e-12);
        assert!(variance_slope(&[1, 2], &[1.0, 0.5]).is_err());
        assert!(variance_slope(&[1, 1, 2, 2], &[1.0; 4]).is_err());
        assert!(variance_slope(&[1, 2, 4], &[1.0, 0.0, 0.5]).is_err());
    }

    #[test]
    fn dither_errors_decorrelate() {
        let (c, se) = error_correlation(nsd_scalar, 0.3, 0.3, 1.0, 100_000, &mut Rng::new(11));
        assert!(c.abs() <= 5.0 * se, "corr {c}");
    }
}
