//! `metaloss`: search, train with, benchmark and inspect learned losses.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 when a
//! run fails.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaloss_core::evolution::{run, write_filter_stats};
use metaloss_core::learner::HiddenActivation;
use metaloss_core::smoothing::{bench_complexity, delta_row, write_bench_csv, write_delta_csv, BenchConfig, Regime};
use metaloss_core::{
    train_at_meta_test, Activation, BuiltinLoss, DatasetSpec, Error, LearnerSpec, MetaLossNetwork, PredictionLoss,
    RunConfig, RunManifest, SmoothingLoss, SmoothingParams, TrainConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "metaloss",
    version,
    about = "Symbolic loss-function search and label-smoothing tools"
)]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "METALOSS_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a loss function and write the best one with a run manifest.
    MetaTrain(MetaTrainArgs),
    /// Train a base learner with a loss document or a built-in loss.
    Train(TrainArgs),
    /// Time smoothing-loss kernels across class counts.
    BenchSmoothing(BenchArgs),
    /// Report the gradient behavior δ of smoothing losses.
    DeltaReport(DeltaArgs),
    /// Print a loss document as an infix expression with its weights.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct MetaTrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Path of the best loss document; the manifest goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Manifest path (default: `<out>.manifest.json`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Per-generation filter statistics as CSV.
    #[arg(long)]
    filter_stats: Option<PathBuf>,
    /// Skip loss-weight optimization (purely symbolic search).
    #[arg(long)]
    no_local_search: bool,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("loss_source").required(true).args(["loss", "builtin"]))]
struct TrainArgs {
    /// Loss document to train with.
    #[arg(long)]
    loss: Option<PathBuf>,
    /// Built-in loss: squared-error or cross-entropy.
    #[arg(long)]
    builtin: Option<BuiltinLoss>,
    /// e.g. `blobs:classes=2,dim=2,separation=4,n=500` or
    /// `csv:path=data.csv,target=4,kind=classification,header=true`.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden layer sizes, comma separated; empty for a linear model.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    hidden: Vec<usize>,
    #[arg(long, default_value = "relu")]
    activation: HiddenActivation,
    /// JSON report with the per-step losses and final metrics.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "ce,lsr,sparse-lsr,focal,focal-sparse-lsr,ace"
    )]
    losses: Vec<SmoothingLoss>,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000,10000")]
    classes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 15)]
    reps: usize,
    /// Include the log-softmax in the timed region.
    #[arg(long)]
    with_logsoftmax: bool,
    #[arg(long, default_value_t = 0.1)]
    xi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Null,
    Zero,
}

#[derive(Args)]
struct DeltaArgs {
    /// Comma-separated loss names.
    #[arg(long, value_delimiter = ',', required = true)]
    loss: Vec<SmoothingLoss>,
    #[arg(long, value_enum)]
    regime: RegimeArg,
    /// Smoothing parameters, e.g. `classes=10,xi=0.1,gamma=2,phi0=1,phi1=1.5`.
    #[arg(long, default_value = "")]
    params: String,
    /// Distance of the non-target probabilities from zero in the zero-error regime.
    #[arg(long, default_value_t = 1e-4)]
    offset: f64,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    loss: PathBuf,
}

/// Command failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) | Error::Config { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

type CmdResult = Result<(), Failure>;

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_failure(p, e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn meta_train(args: MetaTrainArgs, workers: Option<usize>) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.no_local_search {
        cfg.local_search = false;
    }
    let tasks = cfg.load_tasks()?;
    let evo = cfg.evolution_config();
    let threads = workers.unwrap_or(cfg.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure {
            code: 2,
            message: e.to_string(),
        })?;
    let start = Instant::now();
    let out = pool.install(|| run(&evo, &tasks, cfg.seed))?;
    let elapsed = start.elapsed().as_secs_f64();

    let config = serde_json::to_value(&cfg).expect("config serializes");
    let manifest = RunManifest::new(&out, config, cfg.seed, elapsed);
    let net = out
        .best
        .net
        .clone()
        .unwrap_or_else(|| MetaLossNetwork::unit(out.best.tree.clone(), evo.activation));
    let meta = json!({
        "mode": manifest.mode,
        "seed": cfg.seed,
        "fitness": out.best.fitness.value(),
        "infix": out.best.tree.to_infix(),
    });
    net.save(&args.out, meta)?;
    let manifest_path = args.manifest.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".manifest.json");
        p.into()
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| io_failure(&manifest_path, e))?;
    if let Some(path) = &args.filter_stats {
        let file = File::create(path).map_err(|e| io_failure(path, e))?;
        write_filter_stats(&out.history, BufWriter::new(file))?;
    }
    println!(
        "best {} fitness {} ({} evaluations, {:.1}s)",
        out.best.tree.to_infix(),
        out.best.fitness,
        out.evaluations.len(),
        elapsed
    );
    Ok(())
}

fn train(args: TrainArgs) -> CmdResult {
    let task = DatasetSpec::parse(&args.dataset)?.load()?;
    let (loss, name): (Box<dyn PredictionLoss>, String) = match (&args.loss, args.builtin) {
        (Some(path), _) => {
            let (net, _) = MetaLossNetwork::load(path)?;
            let name = net.tree().to_infix();
            (Box::new(net), name)
        }
        (None, Some(b)) => (Box::new(b), b.name().to_string()),
        (None, None) => unreachable!("clap requires a loss source"),
    };
    let learner = LearnerSpec {
        hidden: args.hidden.clone(),
        activation: args.activation,
    };
    learner.validate()?;
    let model = learner.build(task.features(), task.kind());
    let cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        momentum: args.momentum,
        batch_size: args.batch,
        seed: args.seed,
    };
    let report = train_at_meta_test(loss.as_ref(), &model, &task, &cfg)?;
    let metric = if task.kind().is_classification() {
        "error rate"
    } else {
        "mse"
    };
    match report.diverged_at {
        Some(step) => println!("{name}: diverged at step {step}"),
        None => println!(
            "{name}: val {metric} {:.6}, test {metric} {:.6}",
            report.val_metric, report.test_metric
        ),
    }
    if let Some(path) = &args.out {
        let doc = json!({
            "loss": name,
            "dataset": args.dataset,
            "config": cfg,
            "report": report,
        });
        let text = serde_json::to_string_pretty(&doc).expect("report serializes");
        std::fs::write(path, text).map_err(|e| io_failure(path, e))?;
    }
    if report.diverged() {
        return Err(Failure {
            code: 2,
            message: "training diverged".into(),
        });
    }
    Ok(())
}

fn bench_smoothing(args: BenchArgs) -> CmdResult {
    let cfg = BenchConfig {
        classes: args.classes,
        batch: args.batch,
        reps: args.reps,
        with_logsoftmax: args.with_logsoftmax,
        seed: args.seed,
        ..BenchConfig::default()
    };
    let p = SmoothingParams {
        xi: args.xi,
        ..SmoothingParams::default()
    };
    let rows = bench_complexity(&args.losses, &cfg, &p)?;
    write_bench_csv(&rows, output(args.out.as_deref())?)?;
    Ok(())
}

fn delta_report(args: DeltaArgs) -> CmdResult {
    let p = SmoothingParams::parse(&args.params)?;
    let regime = match args.regime {
        RegimeArg::Null => Regime::NullEpoch,
        RegimeArg::Zero => Regime::ZeroError { eps: args.offset },
    };
    let rows = args
        .loss
        .iter()
        .map(|&l| delta_row(l, regime, &p))
        .collect::<Result<Vec<_>, _>>()?;
    write_delta_csv(&rows, output(args.out.as_deref())?)?;
    Ok(())
}

fn inspect(args: InspectArgs) -> CmdResult {
    let (net, meta) = MetaLossNetwork::load(&args.loss)?;
    let tree = net.tree();
    let mut out = io::stdout().lock();
    let infix = tree.to_infix();
    let wrapped = match net.activation() {
        Activation::Identity => infix,
        Activation::Softplus => format!("softplus({infix})"),
    };
    let weights: Vec<String> = net.weights().iter().map(|w| format!("{w}")).collect();
    let _ = writeln!(out, "{wrapped}");
    let _ = writeln!(out, "expression: {tree}");
    let _ = writeln!(out, "weights: [{}]", weights.join(", "));
    if !meta.is_null() {
        let _ = writeln!(out, "meta: {meta}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MetaTrain(a) => meta_train(a, cli.workers),
        Command::Train(a) => train(a),
        Command::BenchSmoothing(a) => bench_smoothing(a),
        Command::DeltaReport(a) => delta_report(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
