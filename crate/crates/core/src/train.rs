//! Momentum SGD training loop, evaluation and per-iteration metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{config_err, Error, Result};
use crate::model::{argmax_columns, BackpropMode, DitherKey, LayerGradStats, Network, ParamGrad};
use crate::sparse::MacCounter;
use crate::tensor::{stream_key, Matrix, Rng};

/// Step decay: multiply the learning rate by `factor` every `every_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: BackpropMode,
    pub seed: u64,
    pub lr_decay: Option<LrDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 20,
            mode: BackpropMode::Exact,
            seed: 0,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be >= 1"));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) || d.every_epochs == 0 {
                return Err(config_err("lr_decay needs factor in (0, 1] and every_epochs >= 1"));
            }
        }
        self.mode.validate()
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.factor.powi((epoch / d.every_epochs) as i32),
            None => self.lr,
        }
    }
}

/// Momentum SGD with coupled weight decay on the weights:
/// `v ← μv + (g + λW)`, `W ← W − lr·v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&self, net: &mut Network, grads: &[ParamGrad], lr: f64) -> Result<()> {
        if grads.len() != net.num_weighted() {
            return Err(config_err(format!(
                "expected {} gradients, got {}",
                net.num_weighted(),
                grads.len()
            )));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (layer, g) in net.weighted_mut().zip(grads) {
            if g.w.shape() != layer.weights.shape() || g.b.len() != layer.bias.len() {
                return Err(Error::Shape {
                    op: "sgd step",
                    lhs: layer.weights.shape(),
                    rhs: g.w.shape(),
                });
            }
            let w = layer.weights.data_mut();
            let v = layer.vel_w.data_mut();
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g.w.data()) {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            }
            for ((b, v), &g) in layer.bias.iter_mut().zip(layer.vel_b.iter_mut()).zip(&g.b) {
                *v = mu * *v + g;
                *b -= lr * *v;
            }
        }
        Ok(())
    }
}

/// One training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
    pub layers: Vec<LayerGradStats>,
    /// Cumulative over the run.
    pub macs_performed: u64,
    pub macs_dense_equivalent: u64,
    pub nsd_overhead_ops: u64,
    /// Set on the last iteration of each epoch.
    pub test_accuracy: Option<f64>,
}

/// Receives metrics as they are produced.
pub trait MetricsSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 6] = ["iteration", "epoch", "layer", "sparsity", "bitwidth", "loss"];

/// One CSV row per layer per iteration, flushed after every iteration.
pub struct CsvMetrics<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> CsvMetrics<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(METRICS_HEADER)?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> Result<W> {
        self.out.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

impl<W: Write> MetricsSink for CsvMetrics<W> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        for (l, s) in rec.layers.iter().enumerate() {
            self.out.write_record(&[
                rec.iteration.to_string(),
                rec.epoch.to_string(),
                l.to_string(),
                s.sparsity.to_string(),
                s.nonzero_bitwidth.to_string(),
                rec.loss.to_string(),
            ])?;
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Sparsity averaged over iterations per layer, and over layers and
/// iterations globally (each layer-iteration pair weighs the same).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySummary {
    pub per_layer: Vec<f64>,
    pub global: f64,
}

pub fn sparsity_summary(records: &[MetricsRecord]) -> Result<SparsitySummary> {
    let mut acc = SparsityAccumulator::default();
    records.iter().for_each(|r| acc.add(&r.layers));
    acc.summary()
}

#[derive(Clone, Debug, Default)]
pub(crate) struct SparsityAccumulator {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl SparsityAccumulator {
    pub(crate) fn add(&mut self, layers: &[LayerGradStats]) {
        if self.sums.len() < layers.len() {
            self.sums.resize(layers.len(), 0.0);
            self.counts.resize(layers.len(), 0);
        }
        for (i, s) in layers.iter().enumerate() {
            self.sums[i] += s.sparsity;
            self.counts[i] += 1;
        }
    }

    pub(crate) fn merge(&mut self, other: &SparsityAccumulator) {
        if self.sums.len() < other.sums.len() {
            self.sums.resize(other.sums.len(), 0.0);
            self.counts.resize(other.sums.len(), 0);
        }
        for (i, (s, c)) in other.sums.iter().zip(&other.counts).enumerate() {
            self.sums[i] += s;
            self.counts[i] += c;
        }
    }

    pub(crate) fn summary(&self) -> Result<SparsitySummary> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(config_err("sparsity summary needs at least one record"));
        }
        Ok(SparsitySummary {
            per_layer: self.sums.iter().zip(&self.counts).map(|(s, &c)| s / c.max(1) as f64).collect(),
            global: self.sums.iter().sum::<f64>() / total as f64,
        })
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_accuracy: Option<f64>,
    pub epoch_accuracies: Vec<f64>,
    /// Mean sparsity over layers and iterations within each epoch.
    pub epoch_sparsity: Vec<f64>,
    pub sparsity: SparsitySummary,
    pub iterations: u64,
    pub macs_performed: u64,
    pub macs_dense_equivalent: u64,
    pub savings_ratio: f64,
    pub nsd_overhead_ops: u64,
    /// Largest nonzero bitwidth over all layers and iterations.
    pub worst_bitwidth: u32,
    /// Layer-iterations whose nonzero bitwidth exceeded 8.
    pub bitwidth_over_8: u64,
    pub final_loss: f64,
}

/// Stream that orders samples in `epoch`; shared with the distributed
/// simulator so both visit data identically.
pub fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::stream(seed, stream_key(&[0x5a4f, epoch as u64]))
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate(net: &Network, ds: &Dataset, quantize_forward: bool) -> Result<f64> {
    if ds.is_empty() {
        return Err(config_err("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(1000) {
        let (x, labels) = ds.gather(chunk);
        let logits = net.predict(&x, quantize_forward)?;
        correct += argmax_columns(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains `net` in place.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(config_err("training set is empty"));
    }
    if data.features() != net.input_features() {
        return Err(config_err(format!(
            "dataset has {} features, model expects {}",
            data.features(),
            net.input_features()
        )));
    }
    let sgd = Sgd::from_config(cfg);
    let mut macs = MacCounter::new();
    let mut nsd_ops = 0u64;
    let mut iteration = 0u64;
    let mut acc = SparsityAccumulator::default();
    let mut epoch_accuracies = Vec::new();
    let mut epoch_sparsity = Vec::new();
    let mut worst_bitwidth = 0;
    let mut bitwidth_over_8 = 0;
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut it = batches(data, cfg.batch_size, &mut rng)?.peekable();
        let (mut ep_sum, mut ep_n) = (0.0, 0u64);
        while let Some((x, labels)) = it.next() {
            let key = DitherKey::new(cfg.seed, 0, iteration);
            let (loss, grads) = net.loss_and_grad(&x, &labels, &cfg.mode, key)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration, loss });
            }
            sgd.step(net, &grads.params, lr)?;
            macs.merge(&grads.macs);
            nsd_ops += grads.nsd_ops;
            acc.add(&grads.stats);
            for s in &grads.stats {
                ep_sum += s.sparsity;
                ep_n += 1;
                worst_bitwidth = worst_bitwidth.max(s.nonzero_bitwidth);
                bitwidth_over_8 += (s.nonzero_bitwidth > 8) as u64;
            }
            let test_accuracy = match (it.peek(), test) {
                (None, Some(t)) => {
                    let a = evaluate(net, t, cfg.mode.quantizes_forward())?;
                    epoch_accuracies.push(a);
                    log::info!("epoch {epoch}: loss {loss:.4} test accuracy {a:.4}");
                    Some(a)
                }
                _ => None,
            };
            sink.record(&MetricsRecord {
                iteration,
                epoch,
                loss,
                layers: grads.stats,
                macs_performed: macs.macs_performed,
                macs_dense_equivalent: macs.macs_dense_equivalent,
                nsd_overhead_ops: nsd_ops,
                test_accuracy,
            })?;
            final_loss = loss;
            iteration += 1;
        }
        epoch_sparsity.push(ep_sum / ep_n.max(1) as f64);
    }
    net.clear_caches();
    let sparsity = if iteration == 0 {
        SparsitySummary {
            per_layer: vec![0.0; net.num_weighted()],
            global: 0.0,
        }
    } else {
        acc.summary()?
    };
    Ok(TrainReport {
        final_accuracy: epoch_accuracies.last().copied(),
        epoch_accuracies,
        epoch_sparsity,
        sparsity,
        iterations: iteration,
        macs_performed: macs.macs_performed,
        macs_dense_equivalent: macs.macs_dense_equivalent,
        savings_ratio: macs.savings_ratio().unwrap_or(1.0),
        nsd_overhead_ops: nsd_ops,
        worst_bitwidth,
        bitwidth_over_8,
        final_loss,
    })
}

/// Matrix whose column `j` is sample `j` of `ds`; convenience for tests.
pub fn full_batch(ds: &Dataset) -> (Matrix, Vec<usize>) {
    let idx: Vec<usize> = (0..ds.len()).collect();
    ds.gather(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_gaussian_task;
    use crate::model::{LayerKind, ModelSpec};
    use crate::tensor::Rng;

    fn stats(s: f64) -> LayerGradStats {
        LayerGradStats {
            sparsity: s,
            nonzero_bitwidth: 1,
            max_abs_level: 0,
            delta: 0.0,
            elements: 1,
            nonzero_rows: 0,
        }
    }

    fn rec(layers: &[f64]) -> MetricsRecord {
        MetricsRecord {
            iteration: 0,
            epoch: 0,
            loss: 0.0,
            layers: layers.iter().map(|&s| stats(s)).collect(),
            macs_performed: 0,
            macs_dense_equivalent: 0,
            nsd_overhead_ops: 0,
            test_accuracy: None,
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..ok },
            TrainConfig { momentum: 1.0, ..ok },
            TrainConfig { weight_decay: -1.0, ..ok },
            TrainConfig { batch_size: 0, ..ok },
            TrainConfig {
                mode: BackpropMode::Dithered { scale: 0.0 },
                ..ok
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_decay: Some(LrDecay {
                factor: 0.5,
                every_epochs: 2,
            }),
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..5).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn sparsity_summary_cases() {
        assert_eq!(sparsity_summary(&[rec(&[0.5]), rec(&[0.5])]).unwrap().global, 0.5);
        let s = sparsity_summary(&[rec(&[0.2, 0.8])]).unwrap();
        assert_eq!(s.global, 0.5);
        assert_eq!(s.per_layer, vec![0.2, 0.8]);
        assert!(sparsity_summary(&[]).is_err());
    }

    #[test]
    fn sparsity_summary_matches_flat_average() {
        let mut rng = Rng::new(4);
        let records: Vec<MetricsRecord> = (0..37)
            .map(|_| rec(&[rng.open01(), rng.open01(), rng.open01()]))
            .collect();
        // flatten every (iteration, layer) cell and average them
        let cells: Vec<f64> = records.iter().flat_map(|r| r.layers.iter().map(|s| s.sparsity)).collect();
        let flat = cells.iter().sum::<f64>() / cells.len() as f64;
        let col0 = records.iter().map(|r| r.layers[0].sparsity).sum::<f64>() / 37.0;
        let s = sparsity_summary(&records).unwrap();
        assert!((s.global - flat).abs() < 1e-12);
        assert!((s.per_layer[0] - col0).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_step_leaves_weights() {
        let ds = synthetic_gaussian_task(64, 5, 3, 4.0, 1).unwrap();
        let mut net = Network::new(&ModelSpec::mlp(&[5, 8, 3]), 2).unwrap();
        let before = net.param_hash();
        let sgd = Sgd {
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        let (x, l) = full_batch(&ds);
        for i in 0..10 {
            let (_, g) = net
                .loss_and_grad(&x, &l, &BackpropMode::Dithered { scale: 2.0 }, DitherKey::new(0, 0, i))
                .unwrap();
            sgd.step(&mut net, &g.params, 0.0).unwrap();
        }
        assert_eq!(net.param_hash(), before);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = ½(w − 3)²; grad = w − 3; momentum SGD must reach 3 within 1e-4
        let mut net = Network::new(&ModelSpec::mlp(&[1, 1]), 0).unwrap();
        let sgd = Sgd {
            momentum: 0.5,
            weight_decay: 0.0,
        };
        for _ in 0..200 {
            let w = net.weighted().next().unwrap().weights[(0, 0)];
            let g = ParamGrad {
                w: Matrix::filled(1, 1, w - 3.0),
                b: vec![0.0],
            };
            sgd.step(&mut net, &[g], 0.1).unwrap();
        }
        let w = net.weighted().next().unwrap().weights[(0, 0)];
        assert!((w - 3.0).abs() < 1e-4, "w = {w}");
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut net = Network::new(&ModelSpec::mlp(&[2, 1]), 0).unwrap();
        let w0 = net.weighted().next().unwrap().weights.clone();
        let b0 = net.weighted().next().unwrap().bias[0];
        let g = ParamGrad {
            w: Matrix::from_rows(&[[1.0, -2.0]]),
            b: vec![0.5],
        };
        let sgd = Sgd {
            momentum: 0.9,
            weight_decay: 0.1,
        };
        sgd.step(&mut net, std::slice::from_ref(&g), 0.01).unwrap();
        sgd.step(&mut net, &[g], 0.01).unwrap();
        let l = net.weighted().next().unwrap();
        for j in 0..2 {
            let gj = [1.0, -2.0][j];
            let v1 = gj + 0.1 * w0[(0, j)];
            let w1 = w0[(0, j)] - 0.01 * v1;
            let v2 = 0.9 * v1 + gj + 0.1 * w1;
            let w2 = w1 - 0.01 * v2;
            assert!((l.weights[(0, j)] - w2).abs() < 1e-15);
        }
        let b2 = b0 - 0.01 * 0.5 - 0.01 * (0.9 * 0.5 + 0.5);
        assert!((l.bias[0] - b2).abs() < 1e-15);
    }

    #[test]
    fn evaluate_counts_matches() {
        let ds = synthetic_gaussian_task(20, 4, 10, 1.0, 9).unwrap();
        let net = Network::new(&ModelSpec::mlp(&[4, 6, 10]), 3).unwrap();
        let (x, l) = full_batch(&ds);
        let logits = net.predict(&x, false).unwrap();
        let mut hand = 0;
        for b in 0..20 {
            let mut best = 0;
            for c in 0..10 {
                if logits[(c, b)] > logits[(best, b)] {
                    best = c;
                }
            }
            hand += (best == l[b]) as usize;
        }
        assert_eq!(evaluate(&net, &ds, false).unwrap(), hand as f64 / 20.0);
        let empty = Dataset {
            labels: Vec::new(),
            ..ds.head(1)
        };
        assert!(evaluate(&net, &empty, false).is_err());
    }

    #[test]
    fn constant_logits_give_chance_accuracy() {
        let ds = synthetic_gaussian_task(100, 4, 10, 1.0, 9).unwrap();
        let mut net = Network::new(&ModelSpec::mlp(&[4, 10]), 3).unwrap();
        for l in net.weighted_mut() {
            l.weights = Matrix::zeros(l.weights.rows(), l.weights.cols());
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        // ties resolve to class 0, which holds a tenth of the round-robin labels
        assert_eq!(evaluate(&net, &ds, false).unwrap(), 0.1);
    }

    #[test]
    fn memorises_one_sample() {
        let ds = synthetic_gaussian_task(1, 4, 3, 1.0, 5).unwrap();
        let mut net = Network::new(&ModelSpec::mlp(&[4, 3]), 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            batch_size: 1,
            epochs: 50,
            ..Default::default()
        };
        train(&mut net, &ds, Some(&ds), &cfg, &mut NullSink).unwrap();
        assert_eq!(evaluate(&net, &ds, false).unwrap(), 1.0);
    }

    #[test]
    fn training_is_bit_reproducible_and_metrics_monotone() {
        let ds = synthetic_gaussian_task(96, 6, 3, 5.0, 1).unwrap();
        let spec = ModelSpec::mlp(&[6, 10, 3]);
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 16,
            epochs: 3,
            mode: BackpropMode::Dithered { scale: 2.0 },
            seed: 4,
            ..Default::default()
        };
        let run = || {
            let mut net = Network::new(&spec, cfg.seed).unwrap();
            let mut recs = Vec::new();
            let rep = train(&mut net, &ds, Some(&ds), &cfg, &mut recs).unwrap();
            (net.param_hash(), recs, rep)
        };
        let (h1, r1, rep) = run();
        let (h2, r2, _) = run();
        assert_eq!(h1, h2);
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 18);
        assert_eq!(rep.epoch_accuracies.len(), 3);
        assert_eq!(r1.iter().filter(|r| r.test_accuracy.is_some()).count(), 3);
        for w in r1.windows(2) {
            assert!(w[1].macs_performed >= w[0].macs_performed);
            assert!(w[1].macs_dense_equivalent >= w[0].macs_dense_equivalent);
            assert!(w[1].nsd_overhead_ops >= w[0].nsd_overhead_ops);
        }
        assert!(r1.iter().all(|r| r.layers.iter().all(|s| (0.0..=1.0).contains(&s.sparsity))));
        let s = sparsity_summary(&r1).unwrap();
        assert!((s.global - rep.sparsity.global).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = synthetic_gaussian_task(32, 4, 2, 3.0, 1).unwrap();
        let mut net = Network::new(&ModelSpec::mlp(&[4, 8, 2]), 0).unwrap();
        let cfg = TrainConfig {
            lr: 1e6,
            momentum: 0.0,
            batch_size: 8,
            epochs: 50,
            ..Default::default()
        };
        assert!(matches!(
            train(&mut net, &ds, None, &cfg, &mut NullSink),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn csv_header_and_rows() {
        let mut sink = CsvMetrics::new(Vec::new()).unwrap();
        sink.record(&rec(&[0.25, 0.5])).unwrap();
        let text = String::from_utf8(sink.into_inner().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,epoch,layer,sparsity,bitwidth,loss");
        assert_eq!(lines[1], "0,0,0,0.25,1,0");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn rejects_feature_mismatch() {
        let ds = synthetic_gaussian_task(8, 3, 2, 1.0, 0).unwrap();
        let mut net = Network::new(&ModelSpec::mlp(&[4, 2]), 0).unwrap();
        assert!(train(&mut net, &ds, None, &TrainConfig::default(), &mut NullSink).is_err());
        assert!(matches!(
            net.weighted().next().unwrap().kind,
            LayerKind::FullyConnected { inputs: 4, .. }
        ));
    }
}
