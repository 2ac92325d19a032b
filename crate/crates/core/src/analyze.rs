//! Sparsity predictions for recorded preactivation gradients.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{config_err, Error, Result};
use crate::model::{softmax_xent, DitherKey, ModelSpec, Network};
use crate::tensor::{Matrix, Rng};
use crate::theory::{fit_laplace, predict_sparsity, predict_sparsity_delta, sparsity_check, InputPdf, SparsityPrediction};
use crate::train::{epoch_rng, Sgd, TrainConfig};

/// One layer's gradient at one captured iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub iteration: u64,
    pub layer: usize,
    pub elements: usize,
    /// Fraction of exact zeros before quantization (inactive units).
    pub zero_fraction: f64,
    pub sigma: f64,
    pub delta: f64,
    /// Laplace scale fitted to all entries.
    pub laplace_b: f64,
    pub degenerate: bool,
    /// Laplace prediction of the zero fraction after quantization.
    pub predicted_p0: f64,
    /// Point mass at zero plus a Laplace fit of the nonzero entries.
    pub predicted_p0_zero_inflated: f64,
    pub empirical_p0: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub scale: f64,
    pub layers: Vec<LayerAnalysis>,
    pub gaussian: Vec<SparsityPrediction>,
}

pub const ANALYSIS_HEADER: [&str; 9] = [
    "iteration",
    "layer",
    "zero_fraction",
    "sigma",
    "delta",
    "laplace_b",
    "predicted_p0",
    "predicted_p0_zero_inflated",
    "empirical_p0",
];

impl AnalysisReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ANALYSIS_HEADER)?;
        for l in &self.layers {
            out.write_record(&[
                l.iteration.to_string(),
                l.layer.to_string(),
                l.zero_fraction.to_string(),
                l.sigma.to_string(),
                l.delta.to_string(),
                l.laplace_b.to_string(),
                l.predicted_p0.to_string(),
                l.predicted_p0_zero_inflated.to_string(),
                l.empirical_p0.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Largest absolute gap between the plain Laplace prediction and the
    /// measured sparsity over non-degenerate captures.
    pub fn worst_laplace_gap(&self) -> f64 {
        self.layers
            .iter()
            .filter(|l| !l.degenerate && l.delta > 0.0)
            .map(|l| (l.predicted_p0 - l.empirical_p0).abs())
            .fold(0.0, f64::max)
    }
}

/// Analyses one preactivation gradient quantized with step `delta`.
pub fn analyse_gradient(dz: &Matrix, delta: f64, empirical_p0: f64, iteration: u64, layer: usize) -> Result<LayerAnalysis> {
    let n = dz.len();
    let zeros = dz.count_zeros();
    let fit = fit_laplace(dz.data())?;
    let nonzero: Vec<f64> = dz.data().iter().copied().filter(|&v| v != 0.0).collect();
    let zero_fraction = zeros as f64 / n as f64;
    let (predicted_p0, predicted_p0_zero_inflated) = if fit.degenerate || delta <= 0.0 {
        (empirical_p0, empirical_p0)
    } else {
        let plain = predict_sparsity_delta(&InputPdf::Laplace { b: fit.b }, delta)?;
        let b_nz = nonzero.iter().map(|v| v.abs()).sum::<f64>() / nonzero.len() as f64;
        let nz = predict_sparsity_delta(&InputPdf::Laplace { b: b_nz }, delta)?;
        (plain, zero_fraction + (1.0 - zero_fraction) * nz)
    };
    Ok(LayerAnalysis {
        iteration,
        layer,
        elements: n,
        zero_fraction,
        sigma: dz.std_dev(),
        delta,
        laplace_b: fit.b,
        degenerate: fit.degenerate,
        predicted_p0,
        predicted_p0_zero_inflated,
        empirical_p0,
    })
}

/// Trains with `cfg` (a dithered mode) and analyses every weighted layer's
/// preactivation gradient every `capture_every` iterations; also tabulates
/// the Gaussian prediction over `scales`.
pub fn analyze_dither(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    capture_every: u64,
    scales: &[f64],
) -> Result<AnalysisReport> {
    cfg.validate()?;
    let scale = cfg
        .mode
        .nsd()
        .map(|c| c.scale)
        .ok_or_else(|| config_err("analyze-dither needs a dithered mode"))?;
    if capture_every == 0 {
        return Err(config_err("capture_every must be >= 1"));
    }
    let mut net = Network::new(spec, cfg.seed)?;
    let sgd = Sgd::from_config(cfg);
    let mut layers = Vec::new();
    let mut iteration = 0u64;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        for (x, labels) in batches(data, cfg.batch_size, &mut rng)? {
            let key = DitherKey::new(cfg.seed, 0, iteration);
            let logits = net.forward(&x, &cfg.mode)?;
            let (loss, dl) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration, loss });
            }
            let grads = if iteration.is_multiple_of(capture_every) {
                let (g, dz) = net.backward_capturing(&dl, &cfg.mode, key)?;
                for (l, (z, st)) in dz.iter().zip(&g.stats).enumerate() {
                    if z.len() >= crate::theory::MIN_FIT_SAMPLES {
                        layers.push(analyse_gradient(z, st.delta, st.sparsity, iteration, l)?);
                    }
                }
                g
            } else {
                net.backward(&dl, &cfg.mode, key)?
            };
            sgd.step(&mut net, &grads.params, cfg.lr_at(epoch))?;
            iteration += 1;
        }
    }
    let pdf = InputPdf::Gaussian { sigma: 1.0 };
    let gaussian = scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut rng = Rng::stream(cfg.seed, 0xa0 + i as u64);
            sparsity_check(&pdf, s, 200_000, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(gaussian.iter().all(|g| predict_sparsity(&pdf, g.scale).is_ok()));
    Ok(AnalysisReport { scale, layers, gaussian })
}
