//! In-process synchronous data-parallel SGD: N replicas each run one
//! batch-1 forward/backward pass per round, a parameter server averages the
//! uploads in node order, updates its master copy and broadcasts the
//! averaged gradient so every replica applies the identical step.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::model::{BackpropMode, DitherKey, Gradients, LayerGradStats, ModelSpec, Network, ParamGrad};
use crate::sparse::MacCounter;
use crate::tensor::Matrix;
use crate::theory::variance_slope;
use crate::train::{epoch_rng, evaluate, Sgd, SparsityAccumulator, TrainConfig};

/// Gradient message from a node to the server.
#[derive(Clone, Debug)]
pub struct GradientUpload {
    pub node_id: usize,
    pub round: u64,
    pub loss: f64,
    pub grads: Vec<ParamGrad>,
    pub stats: Vec<LayerGradStats>,
    pub macs: MacCounter,
    /// Nonzero weight and bias gradient scalars in this upload.
    pub nonzero_scalars: u64,
}

/// Averaged gradient sent back to every node.
#[derive(Clone, Debug)]
pub struct ParameterBroadcast {
    pub round: u64,
    pub lr: f64,
    pub grads: Vec<ParamGrad>,
    /// Hash of the server's parameters after applying `grads`.
    pub param_hash: u64,
}

/// One worker with its own model replica.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub node_id: usize,
    pub model: Network,
    sparsity: SparsityAccumulator,
    pub worst_bitwidth: u32,
    pub bitwidth_over_8: u64,
    pub macs: MacCounter,
    pub nsd_ops: u64,
}

impl NodeState {
    pub fn new(node_id: usize, model: Network) -> Self {
        Self {
            node_id,
            model,
            sparsity: SparsityAccumulator::default(),
            worst_bitwidth: 0,
            bitwidth_over_8: 0,
            macs: MacCounter::new(),
            nsd_ops: 0,
        }
    }

    /// Forward and backward on one sample with this node's dither substream.
    pub fn compute(&mut self, x: &Matrix, labels: &[usize], mode: &BackpropMode, seed: u64, round: u64) -> Result<GradientUpload> {
        let key = DitherKey::new(seed, self.node_id as u64, round);
        let (loss, g) = self.model.loss_and_grad(x, labels, mode, key)?;
        self.absorb(&g);
        Ok(GradientUpload {
            node_id: self.node_id,
            round,
            loss,
            nonzero_scalars: g.nonzero_scalars(),
            grads: g.params,
            stats: g.stats,
            macs: g.macs,
        })
    }

    fn absorb(&mut self, g: &Gradients) {
        self.sparsity.add(&g.stats);
        for s in &g.stats {
            self.worst_bitwidth = self.worst_bitwidth.max(s.nonzero_bitwidth);
            self.bitwidth_over_8 += (s.nonzero_bitwidth > 8) as u64;
        }
        self.macs.merge(&g.macs);
        self.nsd_ops += g.nsd_ops;
    }

    /// Applies a broadcast and checks the replica against the server hash.
    pub fn apply(&mut self, sgd: &Sgd, msg: &ParameterBroadcast) -> Result<()> {
        sgd.step(&mut self.model, &msg.grads, msg.lr)?;
        let got = self.model.param_hash();
        if got != msg.param_hash {
            return Err(Error::ReplicaMismatch {
                round: msg.round,
                node: self.node_id,
                got,
                expected: msg.param_hash,
            });
        }
        Ok(())
    }
}

/// The parameter server.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub master: Network,
    pub sgd: Sgd,
    pub round: u64,
    pub comm_scalars_sent: u64,
}

impl ServerState {
    pub fn new(master: Network, sgd: Sgd) -> Self {
        Self {
            master,
            sgd,
            round: 0,
            comm_scalars_sent: 0,
        }
    }

    /// Elementwise mean of the uploads: a pairwise tree sum over the uploads
    /// sorted by `node_id`, divided by N.
    pub fn average(uploads: &[GradientUpload]) -> Result<Vec<ParamGrad>> {
        let first = uploads.first().ok_or_else(|| config_err("no gradient uploads to average"))?;
        let mut order: Vec<&GradientUpload> = uploads.iter().collect();
        order.sort_by_key(|u| u.node_id);
        for u in &order {
            if u.grads.len() != first.grads.len() {
                return Err(config_err(format!("node {} uploaded {} layers", u.node_id, u.grads.len())));
            }
            for (a, g) in first.grads.iter().zip(&u.grads) {
                if a.w.shape() != g.w.shape() || a.b.len() != g.b.len() {
                    return Err(Error::Shape {
                        op: "gradient average",
                        lhs: a.w.shape(),
                        rhs: g.w.shape(),
                    });
                }
            }
        }
        let grads: Vec<&[ParamGrad]> = order.iter().map(|u| u.grads.as_slice()).collect();
        let mut acc = pairwise_sum(&grads);
        let n = uploads.len() as f64;
        for a in &mut acc {
            a.w.data_mut().iter_mut().for_each(|v| *v /= n);
            a.b.iter_mut().for_each(|v| *v /= n);
        }
        Ok(acc)
    }

    /// Averages, updates the master copy and returns the broadcast.
    pub fn aggregate(&mut self, uploads: &[GradientUpload], lr: f64) -> Result<ParameterBroadcast> {
        let grads = Self::average(uploads)?;
        self.sgd.step(&mut self.master, &grads, lr)?;
        self.comm_scalars_sent += uploads.iter().map(|u| u.nonzero_scalars).sum::<u64>();
        let msg = ParameterBroadcast {
            round: self.round,
            lr,
            grads,
            param_hash: self.master.param_hash(),
        };
        self.round += 1;
        Ok(msg)
    }
}

fn pairwise_sum(grads: &[&[ParamGrad]]) -> Vec<ParamGrad> {
    if grads.len() == 1 {
        return grads[0].to_vec();
    }
    let (l, r) = grads.split_at(grads.len() / 2);
    let mut left = pairwise_sum(l);
    let right = pairwise_sum(r);
    for (a, b) in left.iter_mut().zip(&right) {
        a.w.data_mut().iter_mut().zip(b.w.data()).for_each(|(s, v)| *s += v);
        a.b.iter_mut().zip(&b.b).for_each(|(s, v)| *s += v);
    }
    left
}

/// Summary of one synchronous round.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub mean_loss: f64,
    pub uploads: Vec<GradientUpload>,
}

/// One synchronous round: `samples[i]` goes to `nodes[i]`.
pub fn run_round(
    nodes: &mut [NodeState],
    server: &mut ServerState,
    samples: &[(Matrix, Vec<usize>)],
    mode: &BackpropMode,
    seed: u64,
    lr: f64,
) -> Result<RoundOutcome> {
    if nodes.is_empty() {
        return Err(config_err("need at least one node"));
    }
    if samples.len() != nodes.len() {
        return Err(config_err(format!("{} samples for {} nodes", samples.len(), nodes.len())));
    }
    let round = server.round;
    let uploads = nodes
        .iter_mut()
        .zip(samples)
        .map(|(node, (x, l))| node.compute(x, l, mode, seed, round))
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = uploads.iter().map(|u| u.loss).sum::<f64>() / uploads.len() as f64;
    if !mean_loss.is_finite() {
        return Err(Error::Diverged {
            iteration: round,
            loss: mean_loss,
        });
    }
    let msg = server.aggregate(&uploads, lr)?;
    for node in nodes.iter_mut() {
        node.apply(&server.sgd, &msg)?;
    }
    Ok(RoundOutcome { mean_loss, uploads })
}

/// How the scale factor grows with the node count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SSchedule {
    /// `s(N) = s₀`.
    Constant,
    /// `s(N) = s₀·√N`.
    Sqrt,
}

impl SSchedule {
    pub fn scale(&self, s0: f64, nodes: usize) -> f64 {
        match self {
            SSchedule::Constant => s0,
            SSchedule::Sqrt => s0 * (nodes as f64).sqrt(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SSchedule::Constant),
            "sqrt" => Ok(SSchedule::Sqrt),
            _ => Err(config_err(format!("unknown s schedule '{s}' (expected constant or sqrt)"))),
        }
    }
}

/// `mode` with its scale factor replaced; top-k and exact modes are returned as-is.
pub fn with_scale(mode: &BackpropMode, scale: f64) -> BackpropMode {
    match *mode {
        BackpropMode::Dithered { .. } => BackpropMode::Dithered { scale },
        BackpropMode::Dithered8Bit { .. } => BackpropMode::Dithered8Bit { scale },
        m => m,
    }
}

/// Outcome of one distributed training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub nodes: usize,
    pub scale: Option<f64>,
    pub lr: f64,
    pub accuracy: f64,
    /// Mean over nodes, layers and rounds.
    pub mean_sparsity: f64,
    pub worst_bitwidth: u32,
    pub comm_scalars: u64,
    pub macs: u64,
    pub macs_dense_equivalent: u64,
    pub rounds: u64,
    pub final_param_hash: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schedule: SSchedule,
    pub entries: Vec<SweepEntry>,
}

/// Trains `spec` on `data` with `nodes` replicas.
///
/// Each epoch visits the same shuffled order as the single-node trainer;
/// round `r` feeds node `i` with sample `order[r·N + i]`, and a tail shorter
/// than `N` is dropped. `cfg.lr` is used unchanged and `cfg.batch_size` is
/// ignored.
pub fn train_distributed(
    spec: &ModelSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    nodes: usize,
) -> Result<(SweepEntry, Network)> {
    cfg.validate()?;
    if nodes == 0 {
        return Err(config_err("need at least one node"));
    }
    if data.len() < nodes {
        return Err(config_err(format!("{} samples cannot feed {nodes} nodes", data.len())));
    }
    let master = Network::new(spec, cfg.seed)?;
    let mut replicas: Vec<NodeState> = (0..nodes).map(|i| NodeState::new(i, master.clone())).collect();
    let mut server = ServerState::new(master, Sgd::from_config(cfg));
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        epoch_rng(cfg.seed, epoch).shuffle(&mut order);
        for chunk in order.chunks_exact(nodes) {
            let samples: Vec<(Matrix, Vec<usize>)> = chunk.iter().map(|&i| data.gather(&[i])).collect();
            run_round(&mut replicas, &mut server, &samples, &cfg.mode, cfg.seed, lr)?;
        }
        log::info!("distributed N={nodes}: epoch {epoch} done after {} rounds", server.round);
    }
    let mut sparsity = SparsityAccumulator::default();
    let mut macs = MacCounter::new();
    let mut worst_bitwidth = 0;
    for n in &replicas {
        sparsity.merge(&n.sparsity);
        macs.merge(&n.macs);
        worst_bitwidth = worst_bitwidth.max(n.worst_bitwidth);
    }
    let mut master = server.master;
    master.clear_caches();
    let accuracy = match test {
        Some(t) => evaluate(&master, t, cfg.mode.quantizes_forward())?,
        None => f64::NAN,
    };
    let entry = SweepEntry {
        nodes,
        scale: cfg.mode.nsd().map(|c| c.scale),
        lr: cfg.lr,
        accuracy,
        mean_sparsity: sparsity.summary().map(|s| s.global).unwrap_or(0.0),
        worst_bitwidth,
        comm_scalars: server.comm_scalars_sent,
        macs: macs.macs_performed,
        macs_dense_equivalent: macs.macs_dense_equivalent,
        rounds: server.round,
        final_param_hash: master.param_hash(),
    };
    Ok((entry, master))
}

/// How the learning rate follows the node count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    Constant,
    /// `lr(N) = N·lr`.
    Linear,
}

/// Runs [`train_distributed`] for every `N`, with `s(N)` taken from
/// `schedule` applied to the scale factor of `base.mode`.
pub fn scaling_sweep(
    spec: &ModelSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    base: &TrainConfig,
    n_values: &[usize],
    schedule: SSchedule,
    lr_scaling: LrScaling,
) -> Result<SweepReport> {
    if n_values.is_empty() {
        return Err(config_err("n_values must be nonempty"));
    }
    let s0 = base.mode.nsd().map(|c| c.scale);
    let mut entries = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut cfg = *base;
        if let Some(s0) = s0 {
            cfg.mode = with_scale(&base.mode, schedule.scale(s0, n));
        }
        if lr_scaling == LrScaling::Linear {
            cfg.lr = base.lr * n as f64;
        }
        let (entry, _) = train_distributed(spec, data, test, &cfg, n)?;
        log::info!("sweep N={n}: accuracy {:.4} sparsity {:.4}", entry.accuracy, entry.mean_sparsity);
        entries.push(entry);
    }
    Ok(SweepReport { schedule, entries })
}

/// Per-entry noise variance of the averaged dithered weight gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceScaling {
    pub n_values: Vec<usize>,
    /// Mean over all weight entries of the per-entry noise variance.
    pub variances: Vec<f64>,
    pub slope: f64,
    pub reps: usize,
}

/// Measures how the noise of the server's averaged gradient shrinks with N.
///
/// The parameters of `net` stay fixed. In repetition `r`, node `i` receives
/// sample `(r·N + i) mod n` of `samples` and draws dither from its own
/// substream; the noise is the averaged dithered gradient minus the averaged
/// exact gradient of the same samples.
pub fn measure_variance_scaling(
    net: &Network,
    samples: &Dataset,
    mode: &BackpropMode,
    n_values: &[usize],
    reps: usize,
    seed: u64,
) -> Result<VarianceScaling> {
    if mode.nsd().is_none() {
        return Err(config_err("variance scaling needs a dithered mode"));
    }
    if reps < 2 {
        return Err(config_err("need at least 2 repetitions"));
    }
    // one forward per sample, reused by every backward pass
    let mut primed = Vec::with_capacity(samples.len());
    let mut exact = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let (x, l) = samples.gather(&[i]);
        let mut m = net.clone();
        let logits = m.forward(&x, mode)?;
        let (_, dlogits) = crate::model::softmax_xent(&logits, &l)?;
        exact.push(flatten(&m.backward(&dlogits, &BackpropMode::Exact, DitherKey::new(seed, 0, 0))?.params));
        primed.push((m, dlogits));
    }
    let len = exact[0].len();
    let mut variances = Vec::with_capacity(n_values.len());
    for &n in n_values {
        if n == 0 {
            return Err(config_err("node counts must be >= 1"));
        }
        let (mut sum, mut sumsq) = (vec![0.0; len], vec![0.0; len]);
        let mut noise = vec![0.0; len];
        for r in 0..reps {
            noise.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let k = (r * n + i) % samples.len();
                let (m, dl) = &primed[k];
                let g = m.backward(dl, mode, DitherKey::new(seed, i as u64, r as u64))?;
                let mut off = 0;
                for p in &g.params {
                    for &v in p.w.data() {
                        noise[off] += v;
                        off += 1;
                    }
                }
                noise.iter_mut().zip(&exact[k]).for_each(|(a, e)| *a -= e);
            }
            let inv = 1.0 / n as f64;
            for ((s, q), v) in sum.iter_mut().zip(sumsq.iter_mut()).zip(&noise) {
                let v = v * inv;
                *s += v;
                *q += v * v;
            }
        }
        let r = reps as f64;
        let var = sum
            .iter()
            .zip(&sumsq)
            .map(|(s, q)| ((q - s * s / r) / (r - 1.0)).max(0.0))
            .sum::<f64>()
            / len as f64;
        log::info!("variance N={n}: {var:.6e}");
        variances.push(var);
    }
    let slope = if n_values.len() >= 3 {
        variance_slope(n_values, &variances)?
    } else {
        f64::NAN
    };
    Ok(VarianceScaling {
        n_values: n_values.to_vec(),
        variances,
        slope,
        reps,
    })
}

fn flatten(params: &[ParamGrad]) -> Vec<f64> {
    params.iter().flat_map(|p| p.w.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_gaussian_task;
    use crate::train::{train, NullSink};

    fn task() -> (ModelSpec, Dataset) {
        (ModelSpec::mlp(&[6, 12, 3]), synthetic_gaussian_task(48, 6, 3, 4.0, 2).unwrap())
    }

    fn cfg(mode: BackpropMode) -> TrainConfig {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 1,
            epochs: 2,
            mode,
            seed: 9,
            lr_decay: None,
        }
    }

    #[test]
    fn single_node_matches_trainer() {
        let (spec, ds) = task();
        let c = cfg(BackpropMode::Dithered { scale: 2.0 });
        let mut net = Network::new(&spec, c.seed).unwrap();
        let rep = train(&mut net, &ds, Some(&ds), &c, &mut NullSink).unwrap();
        let (entry, master) = train_distributed(&spec, &ds, Some(&ds), &c, 1).unwrap();
        assert_eq!(master.param_hash(), net.param_hash());
        assert_eq!(entry.accuracy, rep.final_accuracy.unwrap());
        assert_eq!(entry.mean_sparsity, rep.sparsity.global);
        assert_eq!(entry.rounds, rep.iterations);
    }

    #[test]
    fn identical_samples_average_to_single_gradient() {
        let (spec, ds) = task();
        let net = Network::new(&spec, 1).unwrap();
        let sample = ds.gather(&[5]);
        for n in [2, 4, 8] {
            let mut nodes: Vec<NodeState> = (0..n).map(|i| NodeState::new(i, net.clone())).collect();
            let ups: Vec<GradientUpload> = nodes
                .iter_mut()
                .map(|nd| nd.compute(&sample.0, &sample.1, &BackpropMode::Exact, 0, 0).unwrap())
                .collect();
            let avg = ServerState::average(&ups).unwrap();
            assert_eq!(avg, ups[0].grads);
        }
    }

    #[test]
    fn round_matches_batch_step_without_dither() {
        let (spec, ds) = task();
        let net = Network::new(&spec, 3).unwrap();
        let idx = [0, 7, 11, 20];
        let mut nodes: Vec<NodeState> = (0..4).map(|i| NodeState::new(i, net.clone())).collect();
        let mut server = ServerState::new(net.clone(), Sgd { momentum: 0.9, weight_decay: 0.0 });
        let samples: Vec<_> = idx.iter().map(|&i| ds.gather(&[i])).collect();
        run_round(&mut nodes, &mut server, &samples, &BackpropMode::Exact, 0, 0.1).unwrap();

        let mut single = net.clone();
        let (x, l) = ds.gather(&idx);
        let (_, g) = single.loss_and_grad(&x, &l, &BackpropMode::Exact, DitherKey::new(0, 0, 0)).unwrap();
        server.sgd.step(&mut single, &g.params, 0.1).unwrap();
        for (a, b) in server.master.weighted().zip(single.weighted()) {
            for (u, v) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn replicas_stay_identical_and_comm_is_counted() {
        let (spec, ds) = task();
        let net = Network::new(&spec, 3).unwrap();
        let mode = BackpropMode::Dithered { scale: 3.0 };
        let mut nodes: Vec<NodeState> = (0..3).map(|i| NodeState::new(i, net.clone())).collect();
        let mut server = ServerState::new(net, Sgd { momentum: 0.9, weight_decay: 5e-4 });
        for r in 0..5 {
            let before = server.comm_scalars_sent;
            let samples: Vec<_> = (0..3).map(|i| ds.gather(&[3 * r + i])).collect();
            let out = run_round(&mut nodes, &mut server, &samples, &mode, 1, 0.05).unwrap();
            let mut expect = 0;
            for u in &out.uploads {
                for p in &u.grads {
                    expect += (p.w.len() - p.w.count_zeros()) as u64;
                    expect += p.b.iter().filter(|&&v| v != 0.0).count() as u64;
                }
                // batch 1: δW rows with an all-zero δz̃ row are all-zero
                for (p, s) in u.grads.iter().zip(&u.stats) {
                    let nz_rows = (0..p.w.rows()).filter(|&i| p.w.row(i).iter().any(|&v| v != 0.0)).count() as u64;
                    assert!(nz_rows <= s.nonzero_rows);
                }
            }
            assert_eq!(server.comm_scalars_sent - before, expect);
            let h = server.master.param_hash();
            assert!(nodes.iter().all(|n| n.model.param_hash() == h));
        }
    }

    #[test]
    fn tampered_replica_is_detected() {
        let (spec, ds) = task();
        let net = Network::new(&spec, 3).unwrap();
        let mut nodes: Vec<NodeState> = (0..2).map(|i| NodeState::new(i, net.clone())).collect();
        let mut server = ServerState::new(net, Sgd { momentum: 0.0, weight_decay: 0.0 });
        nodes[1].model.weighted_mut().next().unwrap().bias[0] += 1.0;
        let samples: Vec<_> = (0..2).map(|i| ds.gather(&[i])).collect();
        let err = run_round(&mut nodes, &mut server, &samples, &BackpropMode::Exact, 0, 0.1).unwrap_err();
        assert!(matches!(err, Error::ReplicaMismatch { node: 1, round: 0, .. }));
    }

    #[test]
    fn sweep_is_deterministic_and_schedules_scale() {
        let (spec, ds) = task();
        let c = cfg(BackpropMode::Dithered { scale: 1.0 });
        let a = scaling_sweep(&spec, &ds, Some(&ds), &c, &[1, 4], SSchedule::Sqrt, LrScaling::Linear).unwrap();
        let b = scaling_sweep(&spec, &ds, Some(&ds), &c, &[1, 4], SSchedule::Sqrt, LrScaling::Linear).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries[1].scale, Some(2.0));
        assert_eq!(a.entries[1].lr, 0.08);
        assert_eq!(a.entries[1].rounds, 2 * 12);
        assert!(scaling_sweep(&spec, &ds, None, &c, &[], SSchedule::Sqrt, LrScaling::Linear).is_err());
        assert!(SSchedule::parse("cubic").is_err());
    }

    #[test]
    fn noise_variance_falls_as_one_over_n() {
        let (spec, ds) = task();
        let net = Network::new(&spec, 5).unwrap();
        let samples = ds.head(16);
        let v = measure_variance_scaling(&net, &samples, &BackpropMode::Dithered { scale: 2.0 }, &[1, 2, 4, 8], 500, 3).unwrap();
        let ratio = v.variances[3] / v.variances[0];
        assert!((0.7 / 8.0..=1.4 / 8.0).contains(&ratio), "{v:?}");
        assert!((-1.15..=-0.85).contains(&v.slope), "{v:?}");
    }
}
