//! Matched-sparsity comparison of dithered backprop against top-k.
//!
//! For every target sparsity both modes are calibrated by bisection on a
//! one-epoch pilot run: the scale factor `s` for the dithered mode and the
//! keep fraction for top-k. Full runs then train with the calibrated
//! settings over several seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::model::{BackpropMode, ModelSpec, Network, TopK};
use crate::train::{train, NullSink, TrainConfig, TrainReport};

/// Which knob a calibration turned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    Dithered,
    Meprop,
}

impl CompareMode {
    pub fn name(&self) -> &'static str {
        match self {
            CompareMode::Dithered => "dithered",
            CompareMode::Meprop => "meprop",
        }
    }

    /// The backprop mode for knob value `v` (scale or keep fraction).
    pub fn at(&self, v: f64) -> BackpropMode {
        match self {
            CompareMode::Dithered => BackpropMode::Dithered { scale: v },
            CompareMode::Meprop => BackpropMode::Meprop { k: TopK::Fraction(v) },
        }
    }

    /// Knob range; sparsity rises with the scale and falls with the fraction.
    fn bracket(&self) -> (f64, f64) {
        match self {
            CompareMode::Dithered => (1e-3, 256.0),
            CompareMode::Meprop => (1e-3, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    /// Training samples used by each pilot epoch (`None` = all).
    pub pilot_samples: Option<usize>,
    /// Stop once the pilot sparsity is this close to the target.
    pub tolerance: f64,
    /// Calibrations ending farther than this from the target are failures.
    pub max_miss: f64,
    pub max_steps: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            pilot_samples: None,
            tolerance: 0.002,
            max_miss: 0.02,
            max_steps: 14,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mode: CompareMode,
    pub target: f64,
    pub value: f64,
    pub pilot_sparsity: f64,
    pub steps: usize,
    /// The target lies at or below the sparsity of the least sparse setting;
    /// that setting (full top-k, or the smallest scale) is used as is.
    pub degenerate: bool,
}

impl Calibration {
    pub fn succeeded(&self, settings: &CalibrationSettings) -> bool {
        self.degenerate || (self.pilot_sparsity - self.target).abs() <= settings.max_miss
    }
}

fn pilot(spec: &ModelSpec, data: &Dataset, base: &TrainConfig, mode: BackpropMode) -> Result<f64> {
    let cfg = TrainConfig {
        epochs: 1,
        mode,
        lr_decay: None,
        ..*base
    };
    let mut net = Network::new(spec, base.seed)?;
    Ok(train(&mut net, data, None, &cfg, &mut NullSink)?.sparsity.global)
}

/// Bisects the knob of `mode` until the pilot sparsity hits `target`.
/// The scale is bisected geometrically, the keep fraction linearly.
pub fn calibrate(
    spec: &ModelSpec,
    data: &Dataset,
    base: &TrainConfig,
    mode: CompareMode,
    target: f64,
    settings: &CalibrationSettings,
) -> Result<Calibration> {
    if !(0.0..1.0).contains(&target) {
        return Err(config_err(format!("target sparsity must lie in [0, 1), got {target}")));
    }
    let pilot_data = match settings.pilot_samples {
        Some(n) => data.head(n),
        None => data.clone(),
    };
    let (mut lo, mut hi) = mode.bracket();
    // least sparse end of the bracket
    let loose = match mode {
        CompareMode::Dithered => lo,
        CompareMode::Meprop => hi,
    };
    let loose_sparsity = pilot(spec, &pilot_data, base, mode.at(loose))?;
    if target <= loose_sparsity {
        return Ok(Calibration {
            mode,
            target,
            value: loose,
            pilot_sparsity: loose_sparsity,
            steps: 1,
            degenerate: true,
        });
    }
    let mut best = (loose, loose_sparsity);
    let mut steps = 1;
    while steps < settings.max_steps {
        let mid = match mode {
            CompareMode::Dithered => (lo * hi).sqrt(),
            CompareMode::Meprop => 0.5 * (lo + hi),
        };
        let sp = pilot(spec, &pilot_data, base, mode.at(mid))?;
        steps += 1;
        log::info!("calibrate {} target {target}: knob {mid:.5} -> sparsity {sp:.4}", mode.name());
        if (sp - target).abs() < (best.1 - target).abs() {
            best = (mid, sp);
        }
        if (sp - target).abs() <= settings.tolerance {
            break;
        }
        let too_sparse = sp > target;
        match (mode, too_sparse) {
            (CompareMode::Dithered, true) | (CompareMode::Meprop, false) => hi = mid,
            _ => lo = mid,
        }
    }
    Ok(Calibration {
        mode,
        target,
        value: best.0,
        pilot_sparsity: best.1,
        steps,
        degenerate: false,
    })
}

/// One row of `comparison.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub accuracy: f64,
    pub seed: u64,
}

pub const COMPARISON_HEADER: [&str; 5] = ["mode", "target_sparsity", "achieved_sparsity", "accuracy", "seed"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub calibrations: Vec<Calibration>,
    /// Calibrations that missed their target and were skipped.
    pub skipped: Vec<Calibration>,
}

impl ComparisonReport {
    /// Mean accuracy and achieved sparsity of `mode` at `target`.
    pub fn mean(&self, mode: CompareMode, target: f64) -> Option<(f64, f64)> {
        let rows: Vec<&ComparisonRow> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode.name() && r.target_sparsity == target)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
            rows.iter().map(|r| r.achieved_sparsity).sum::<f64>() / n,
        ))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(COMPARISON_HEADER)?;
        for r in &self.rows {
            out.write_record(&[
                r.mode.clone(),
                r.target_sparsity.to_string(),
                r.achieved_sparsity.to_string(),
                r.accuracy.to_string(),
                r.seed.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Calibrates each mode per target (with `base.seed`), then trains every
/// calibrated setting once per seed.
#[allow(clippy::too_many_arguments)]
pub fn compare_meprop(
    spec: &ModelSpec,
    data: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
    settings: &CalibrationSettings,
    mut on_run: impl FnMut(&ComparisonRow, &TrainReport),
) -> Result<ComparisonReport> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(config_err("comparison needs a nonempty grid and seed list"));
    }
    let mut report = ComparisonReport {
        rows: Vec::new(),
        calibrations: Vec::new(),
        skipped: Vec::new(),
    };
    for &target in grid {
        for mode in [CompareMode::Dithered, CompareMode::Meprop] {
            let cal = calibrate(spec, data, base, mode, target, settings)?;
            if !cal.succeeded(settings) {
                log::warn!(
                    "{} cannot reach sparsity {target} (best pilot {:.4}); skipped",
                    mode.name(),
                    cal.pilot_sparsity
                );
                report.skipped.push(cal);
                continue;
            }
            report.calibrations.push(cal);
            for &seed in seeds {
                let cfg = TrainConfig {
                    mode: mode.at(cal.value),
                    seed,
                    ..*base
                };
                let mut net = Network::new(spec, seed)?;
                let rep = train(&mut net, data, Some(test), &cfg, &mut NullSink)?;
                let row = ComparisonRow {
                    mode: mode.name().into(),
                    target_sparsity: target,
                    achieved_sparsity: rep.sparsity.global,
                    accuracy: rep.final_accuracy.unwrap_or(f64::NAN),
                    seed,
                };
                on_run(&row, &rep);
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}
