//! The oracle suite behind `ditherprop verify`.

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::data::synthetic_gaussian_task;
use crate::distributed::measure_variance_scaling;
use crate::error::Result;
use crate::model::{softmax_xent, BackpropMode, DitherKey, ModelSpec, Network};
use crate::quant::nsd_scalar;
use crate::tensor::Rng;
use crate::theory::{
    error_correlation, estimate_error_moments_with, fit_laplace, predict_sparsity, sample_matrix, sparsity_check,
    variance_slope, InputPdf, ScalarQuantizer,
};
use crate::train::full_batch;

/// One line of the report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    /// Human-readable bound, e.g. `<= 0.0050`.
    pub bound: String,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<52} measured {:>14.6e}  bound {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound
        )
    }
}

fn le(name: String, measured: f64, bound: f64) -> Check {
    Check {
        name,
        measured,
        bound: format!("<= {bound:.6e}"),
        passed: measured <= bound,
    }
}

fn within(name: String, measured: f64, lo: f64, hi: f64) -> Check {
    Check {
        name,
        measured,
        bound: format!("in [{lo}, {hi}]"),
        passed: (lo..=hi).contains(&measured),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub quantizer: ScalarQuantizer,
    pub moment_samples: u64,
    pub sparsity_samples: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            quantizer: nsd_scalar,
            moment_samples: 1_000_000,
            sparsity_samples: 1_000_000,
            seed: 2024,
        }
    }
}

pub const MOMENT_DELTAS: [f64; 3] = [0.5, 1.0, 2.0];
/// Test points as multiples of Δ.
pub const MOMENT_POINTS: [f64; 9] = [0.0, 0.25, -0.25, 0.5, -0.5, 0.73, -0.73, 3.0, -3.0];
pub const SPARSITY_SCALES: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0];

/// Error-moment checks over the `(x, Δ)` grid.
pub fn moment_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (di, &delta) in MOMENT_DELTAS.iter().enumerate() {
        for (xi, &m) in MOMENT_POINTS.iter().enumerate() {
            let x = m * delta;
            let mut rng = Rng::stream(opts.seed, (di * 16 + xi) as u64);
            let r = estimate_error_moments_with(opts.quantizer, x, delta, opts.moment_samples, &mut rng)?;
            let tag = format!("x={m:+.2}D D={delta}");
            out.push(le(format!("unbiased mean error |E[e]| {tag}"), r.mean_error.abs(), 5.0 * r.standard_error));
            out.push(le(format!("second moment E[e^2] {tag}"), r.second_moment, r.bound * 1.01));
            out.push(le(format!("hard bound max|e| {tag}"), r.max_abs_error, delta));
        }
    }
    // Q(x + kΔ) − (x + kΔ) has the law of Q(x) − x; same dither stream
    let delta = 0.5;
    let base = estimate_error_moments_with(opts.quantizer, 0.1, delta, 100_000, &mut Rng::new(opts.seed))?;
    for k in [1.0, -2.0, 5.0] {
        let r = estimate_error_moments_with(opts.quantizer, 0.1 + k * delta, delta, 100_000, &mut Rng::new(opts.seed))?;
        let diff = (r.mean_error - base.mean_error).abs() + (r.second_moment - base.second_moment).abs();
        out.push(le(format!("periodicity x+{k}D vs x"), diff, 1e-9));
    }
    Ok(out)
}

/// Gaussian sparsity prediction against the quantizer, plus monotonicity.
pub fn sparsity_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let pdf = InputPdf::Gaussian { sigma: 1.0 };
    let mut out = Vec::new();
    let mut empirical = Vec::new();
    for (i, &s) in SPARSITY_SCALES.iter().enumerate() {
        let mut rng = Rng::stream(opts.seed, 0x5000 + i as u64);
        let r = sparsity_check(&pdf, s, opts.sparsity_samples, &mut rng)?;
        out.push(le(
            format!("gaussian p0 |empirical - predicted| s={s}"),
            (r.empirical_p0 - r.predicted_p0).abs(),
            0.005,
        ));
        empirical.push(r.empirical_p0);
    }
    let min_step = empirical.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    out.push(Check {
        name: "empirical p0 strictly increasing in s".into(),
        measured: min_step,
        bound: "> 0".into(),
        passed: min_step > 0.0,
    });
    let grid: Vec<f64> = (0..=95).map(|i| 0.5 + 0.1 * i as f64).collect();
    let pred = grid.iter().map(|&s| predict_sparsity(&pdf, s)).collect::<Result<Vec<_>>>()?;
    let min_step = pred.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    out.push(Check {
        name: "predicted p0 strictly increasing on s in [0.5, 10]".into(),
        measured: min_step,
        bound: "> 0".into(),
        passed: min_step > 0.0,
    });
    let small = predict_sparsity(&pdf, 1e-6)?;
    out.push(le("predicted p0 as s -> 0+".into(), small, 1e-5));

    let lap = InputPdf::Laplace { b: 1.0 };
    let r = sparsity_check(&lap, 2.0, opts.sparsity_samples, &mut Rng::stream(opts.seed, 0x5100))?;
    out.push(le(
        "laplace p0 |empirical - predicted| s=2".into(),
        (r.empirical_p0 - r.predicted_p0).abs(),
        0.005,
    ));
    Ok(out)
}

/// Laplace fit, error decorrelation and the 1/N slope oracle.
pub fn misc_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let x = sample_matrix(&InputPdf::Laplace { b: 2.0 }, 100_000, &mut Rng::stream(opts.seed, 0x6000))?;
    let fit = fit_laplace(x.data())?;
    out.push(le("laplace fit relative error, b=2".into(), (fit.b - 2.0).abs() / 2.0, 0.02));
    out.push(Check {
        name: "laplace fit of zeros is degenerate".into(),
        measured: fit_laplace(&[0.0; 128])?.b,
        bound: "degenerate".into(),
        passed: fit_laplace(&[0.0; 128])?.degenerate,
    });

    for (i, (a, b)) in [(0.3, 0.3), (0.1, -0.45), (0.0, 0.5)].into_iter().enumerate() {
        let (c, se) = error_correlation(opts.quantizer, a, b, 1.0, 200_000, &mut Rng::stream(opts.seed, 0x6100 + i as u64));
        out.push(le(format!("error correlation x=({a}, {b})"), c.abs(), 5.0 * se));
    }

    let n = [1usize, 2, 4, 8, 16];
    let inv: Vec<f64> = n.iter().map(|&k| 1.0 / k as f64).collect();
    out.push(le(
        "variance_slope of exact 1/N".into(),
        (variance_slope(&n, &inv)? + 1.0).abs(),
        1e-12,
    ));
    Ok(out)
}

/// Weight-update unbiasedness and averaged-noise scaling on a small synthetic net.
pub fn model_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let ds = synthetic_gaussian_task(32, 8, 4, 3.0, opts.seed)?;
    let spec = ModelSpec::mlp(&[8, 16, 12, 4]);
    let mut net = Network::new(&spec, opts.seed)?;
    let mode = BackpropMode::Dithered { scale: 2.0 };
    let (x, l) = full_batch(&ds);
    let logits = net.forward(&x, &mode)?;
    let (_, dl) = softmax_xent(&logits, &l)?;
    let exact = net.backward(&dl, &BackpropMode::Exact, DitherKey::new(0, 0, 0))?;
    let reps = 2000;
    let mut sum: Vec<Vec<f64>> = exact.params.iter().map(|p| vec![0.0; p.w.len()]).collect();
    let mut sq = sum.clone();
    for r in 0..reps {
        let g = net.backward(&dl, &mode, DitherKey::new(opts.seed, 0, r))?;
        for ((s, q), p) in sum.iter_mut().zip(sq.iter_mut()).zip(&g.params) {
            for ((s, q), &v) in s.iter_mut().zip(q.iter_mut()).zip(p.w.data()) {
                *s += v;
                *q += v * v;
            }
        }
    }
    let (mut ok, mut total) = (0usize, 0usize);
    let rf = reps as f64;
    for ((s, q), e) in sum.iter().zip(&sq).zip(&exact.params) {
        for ((s, q), &ev) in s.iter().zip(q).zip(e.w.data()) {
            let mean = s / rf;
            let var = ((q - s * s / rf) / (rf - 1.0)).max(0.0);
            let se = (var / rf).sqrt();
            total += 1;
            ok += ((mean - ev).abs() <= 5.0 * se + 1e-12 * (1.0 + ev.abs())) as usize;
        }
    }
    out.push(Check {
        name: "weight update unbiased: entries within 5 SE".into(),
        measured: ok as f64 / total as f64,
        bound: ">= 0.999".into(),
        passed: ok as f64 / total as f64 >= 0.999,
    });

    let fresh = Network::new(&spec, opts.seed)?;
    let v = measure_variance_scaling(&fresh, &ds.head(16), &mode, &[1, 2, 4, 8, 16], 500, opts.seed)?;
    out.push(within("averaged noise variance slope vs N".into(), v.slope, -1.15, -0.85));
    out.push(within(
        "variance ratio N=8 / N=1".into(),
        v.variances[3] / v.variances[0],
        0.7 / 8.0,
        1.4 / 8.0,
    ));
    Ok(out)
}

/// Runs the full suite.
pub fn run_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut all = moment_checks(opts)?;
    all.extend(sparsity_checks(opts)?);
    all.extend(misc_checks(opts)?);
    all.extend(model_checks(opts)?);
    log::info!("verify suite finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            moment_samples: 20_000,
            sparsity_samples: 200_000,
            ..Default::default()
        }
    }

    fn round_only(x: f64, d: f64, _: &mut Rng) -> f64 {
        d * (x / d + 0.5).floor()
    }

    #[test]
    fn moment_grid_passes_with_real_quantizer() {
        let checks = moment_checks(&quick()).unwrap();
        assert_eq!(checks.len(), 3 * 27 + 3);
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn undithered_quantizer_fails_unbiasedness() {
        let opts = VerifyOptions {
            quantizer: round_only,
            ..quick()
        };
        let checks = moment_checks(&opts).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(failed.iter().any(|n| n.starts_with("unbiased")), "{failed:?}");
    }

    #[test]
    fn lines_show_measured_and_bound() {
        let c = le("x".into(), 0.5, 1.0);
        let s = c.to_string();
        assert!(s.starts_with("PASS"));
        assert!(s.contains("measured") && s.contains("bound <= 1.000000e0"));
        assert!(le("y".into(), 2.0, 1.0).to_string().starts_with("FAIL"));
    }
}
