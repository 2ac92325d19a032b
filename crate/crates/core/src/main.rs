use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ditherprop::analyze::analyze_dither;
use ditherprop::compare::compare_meprop;
use ditherprop::config::{parse_topk, ModeName, RunConfig};
use ditherprop::distributed::{measure_variance_scaling, scaling_sweep, SSchedule};
use ditherprop::model::Network;
use ditherprop::train::{train, CsvMetrics};
use ditherprop::verify::{run_suite, VerifyOptions};
use ditherprop::Error;

#[derive(Parser)]
#[command(name = "ditherprop", version, about = "Dithered backpropagation training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv and summary.json.
    Train(Common),
    /// Calibrate dithered and top-k runs to matched sparsity and compare them.
    CompareMeprop(Common),
    /// Synchronous data-parallel scaling sweep; writes sweep.json.
    Distributed(Common),
    /// Fit Laplace laws to recorded gradients and predict their sparsity.
    AnalyzeDither(Common),
    /// Run the statistical oracle suite.
    Verify(VerifyArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeName>,
    /// Scale factor of the dithered modes.
    #[arg(long = "s")]
    scale: Option<f64>,
    /// Top-k count (>= 1) or keep fraction (< 1).
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated node counts.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
    /// constant or sqrt.
    #[arg(long)]
    s_schedule: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Also write verify.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, command: &str) -> Result<(RunConfig, PathBuf), Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        if let Some(m) = self.mode {
            t.mode = m;
        }
        if let Some(s) = self.scale {
            t.scale = Some(s);
        }
        if let Some(k) = self.k {
            parse_topk(k)?;
            t.k = Some(k);
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(b) = self.batch {
            t.batch_size = b;
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if let Some(d) = &self.data_dir {
            cfg.data.dir = Some(d.clone());
        }
        if let Some(n) = &self.nodes {
            cfg.distributed.nodes = n.clone();
        }
        if let Some(s) = &self.s_schedule {
            cfg.distributed.s_schedule = SSchedule::parse(s)?;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
        cfg.out = Some(out.clone());
        Ok((cfg, out))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn cmd_train(args: &Common) -> Result<(), Error> {
    let (cfg, out) = args.resolve("train")?;
    let tc = cfg.train.to_train_config()?;
    let spec = cfg.model_spec()?;
    let mut net = Network::new(&spec, tc.seed)?;
    let (data, test) = cfg.load_data()?;
    fs::create_dir_all(&out)?;
    let mut sink = CsvMetrics::new(BufWriter::new(File::create(out.join("metrics.csv"))?))?;
    let rep = train(&mut net, &data, Some(&test), &tc, &mut sink)?;
    sink.into_inner()?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "train",
            "config": cfg,
            "final_accuracy": rep.final_accuracy,
            "epoch_accuracies": rep.epoch_accuracies,
            "mean_sparsity": rep.sparsity.global,
            "per_layer_sparsity": rep.sparsity.per_layer,
            "epoch_sparsity": rep.epoch_sparsity,
            "total_macs": rep.macs_performed,
            "macs_dense_equivalent": rep.macs_dense_equivalent,
            "savings_ratio": rep.savings_ratio,
            "nsd_overhead_ops": rep.nsd_overhead_ops,
            "worst_bitwidth": rep.worst_bitwidth,
            "bitwidth_over_8": rep.bitwidth_over_8,
            "iterations": rep.iterations,
            "final_loss": rep.final_loss,
        }),
    )?;
    println!(
        "accuracy {:.4}  mean sparsity {:.4}  savings ratio {:.4}",
        rep.final_accuracy.unwrap_or(f64::NAN),
        rep.sparsity.global,
        rep.savings_ratio
    );
    Ok(())
}

fn cmd_compare(args: &Common) -> Result<(), Error> {
    let (cfg, out) = args.resolve("compare-meprop")?;
    let tc = cfg.train.to_train_config()?;
    let spec = cfg.model_spec()?;
    Network::new(&spec, tc.seed)?;
    let grid = cfg.compare.grid.clone();
    if grid.iter().any(|t| !(0.0..1.0).contains(t)) || grid.is_empty() || cfg.compare.seeds.is_empty() {
        return Err(Error::Config("compare: grid values must lie in [0, 1) and seeds must be nonempty".into()));
    }
    let (data, test) = cfg.load_data()?;
    fs::create_dir_all(&out)?;
    let rep = compare_meprop(&spec, &data, &test, &tc, &grid, &cfg.compare.seeds, &cfg.compare.calibration, |row, _| {
        log::info!(
            "{} target {} seed {}: sparsity {:.4} accuracy {:.4}",
            row.mode,
            row.target_sparsity,
            row.seed,
            row.achieved_sparsity,
            row.accuracy
        )
    })?;
    rep.write_csv(File::create(out.join("comparison.csv"))?)?;
    write_json(
        &out.join("comparison.json"),
        &json!({ "config": cfg, "calibrations": rep.calibrations, "skipped": rep.skipped, "rows": rep.rows }),
    )?;
    for s in &rep.skipped {
        eprintln!(
            "warning: {} could not reach sparsity {} (best {:.4}); skipped",
            s.mode.name(),
            s.target,
            s.pilot_sparsity
        );
    }
    Ok(())
}

fn cmd_distributed(args: &Common) -> Result<(), Error> {
    let (mut cfg, out) = args.resolve("distributed")?;
    if args.mode.is_none() && cfg.train.mode == ModeName::Exact {
        cfg.train.mode = ModeName::Dithered;
    }
    let tc = cfg.train.to_train_config()?;
    let spec = cfg.model_spec()?;
    let net = Network::new(&spec, tc.seed)?;
    let d = cfg.distributed.clone();
    if d.nodes.is_empty() || d.nodes.contains(&0) {
        return Err(Error::Config("distributed: nodes must be a nonempty list of positive counts".into()));
    }
    let (data, test) = cfg.load_data()?;
    fs::create_dir_all(&out)?;
    let sweep = scaling_sweep(&spec, &data, Some(&test), &tc, &d.nodes, d.s_schedule, d.lr_scaling)?;
    let variance = if d.variance_reps > 0 && tc.mode.nsd().is_some() {
        Some(measure_variance_scaling(
            &net,
            &data.head(d.variance_samples),
            &tc.mode,
            &d.nodes,
            d.variance_reps,
            tc.seed,
        )?)
    } else {
        None
    };
    let per_n: Vec<_> = sweep
        .entries
        .iter()
        .map(|e| {
            json!({
                "nodes": e.nodes,
                "s": e.scale,
                "lr": e.lr,
                "accuracy": e.accuracy,
                "mean_sparsity": e.mean_sparsity,
                "worst_bitwidth": e.worst_bitwidth,
                "comm_scalars": e.comm_scalars,
                "macs": e.macs,
                "rounds": e.rounds,
            })
        })
        .collect();
    write_json(
        &out.join("sweep.json"),
        &json!({ "config": cfg, "schedule": sweep.schedule, "results": per_n, "noise_variance": variance }),
    )?;
    for e in &sweep.entries {
        println!(
            "N={:<3} accuracy {:.4}  sparsity {:.4}  worst bitwidth {}",
            e.nodes, e.accuracy, e.mean_sparsity, e.worst_bitwidth
        );
    }
    Ok(())
}

fn cmd_analyze(args: &Common) -> Result<(), Error> {
    let (mut cfg, out) = args.resolve("analyze-dither")?;
    if args.mode.is_none() && cfg.train.mode == ModeName::Exact {
        cfg.train.mode = ModeName::Dithered;
    }
    let tc = cfg.train.to_train_config()?;
    let spec = cfg.model_spec()?;
    Network::new(&spec, tc.seed)?;
    let (data, _) = cfg.load_data()?;
    fs::create_dir_all(&out)?;
    let rep = analyze_dither(&spec, &data, &tc, cfg.analyze.capture_every, &cfg.analyze.scales)?;
    rep.write_csv(File::create(out.join("analysis.csv"))?)?;
    write_json(
        &out.join("analysis.json"),
        &json!({
            "config": cfg,
            "scale": rep.scale,
            "worst_laplace_gap": rep.worst_laplace_gap(),
            "layers": rep.layers,
            "gaussian": rep.gaussian,
        }),
    )?;
    println!("worst |predicted - empirical| sparsity: {:.4}", rep.worst_laplace_gap());
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool, Error> {
    let mut opts = VerifyOptions::default();
    if let Some(s) = args.seed {
        opts.seed = s;
    }
    let checks = run_suite(&opts)?;
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    println!("{} checks, {} failed", checks.len(), failed.len());
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("verify.json"), &json!({ "seed": opts.seed, "checks": checks }))?;
    }
    for c in &failed {
        eprintln!("failed: {}", c.name);
    }
    Ok(failed.is_empty())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::CompareMeprop(a) => cmd_compare(a).map(|_| true),
        Command::Distributed(a) => cmd_distributed(a).map(|_| true),
        Command::AnalyzeDither(a) => cmd_analyze(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
