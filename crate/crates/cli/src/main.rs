use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ghostrnn::backprop::{grad_check, FinalStateCrossEntropy, FinalStateMse, SequenceLoss};
use ghostrnn::complexity::{count_report, CellDims};
use ghostrnn::io::{self, export_csv, export_csv_with_header};
use ghostrnn::metrics::MetricKind;
use ghostrnn::redundancy::{
    collect_feature_map, pca_contribution, similarity_matrix, suggest_ratio, DEFAULT_MAX_STEPS,
};
use ghostrnn::tasks::{TaskKind, TaskSpec};
use ghostrnn::trainer::{evaluate, train, worker_pool, TrainConfig};
use ghostrnn::rng::derive_seed;
use ghostrnn::{
    Activation, CellKind, CellParams, Error, GhostParams, GruParams, Parameters, RngState, Vector,
};

const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;
const THREADS_ENV: &str = "GHOSTRNN_THREADS";
const CSV_DIGITS: usize = 9;

#[derive(Parser)]
#[command(name = "ghostrnn", version, about = "GhostRNN and GRU cells: training, analysis and complexity counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a synthetic task.
    #[command(after_help = "Environment:\n  GHOSTRNN_THREADS  worker threads for per-sample passes; overrides the config (results do not depend on it)")]
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly generated task data.
    Eval(EvalArgs),
    /// PCA contribution and cosine-similarity analysis of hidden states.
    Analyze(AnalyzeArgs),
    /// Print weight and MAC counts for a cell configuration as JSON.
    Count(CountArgs),
    /// Compare BPTT gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Export checkpoint tensors to CSV or dump a generated dataset.
    Export(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration; flags given here override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for config.json, metrics.jsonl, best.ckpt and final.ckpt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Task: adding, order or denoise [default: adding]
    #[arg(long)]
    task: Option<TaskKind>,
    /// Cell: gru or ghost [default: ghost]
    #[arg(long)]
    cell: Option<CellKind>,
    /// Full state dimension [default: 32]
    #[arg(long)]
    state_dim: Option<usize>,
    /// Full-to-intrinsic state ratio; must divide the state dimension [default: 2, 1 for gru]
    #[arg(long)]
    ratio: Option<usize>,
    /// Activation of the cheap operation: tanh, sigmoid or identity [default: tanh]
    #[arg(long)]
    activation: Option<Activation>,
    /// Seed for data, initialization and shuffling [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum number of epochs [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps [default: unlimited]
    #[arg(long)]
    max_iterations: Option<u64>,
    /// Mini-batch size [default: 100]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial Adam learning rate [default: 5e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Iterations at which the learning rate is multiplied by 0.1 [default: 10000,20000]
    #[arg(long, value_delimiter = ',')]
    lr_steps: Option<Vec<u64>>,
    /// Decoupled weight decay [default: 1e-5]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping [default: 5]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Epochs without validation improvement before stopping [default: 5]
    #[arg(long)]
    patience: Option<usize>,
    /// Training sequences [default: 10000]
    #[arg(long)]
    train_count: Option<usize>,
    /// Validation sequences [default: 1000]
    #[arg(long)]
    val_count: Option<usize>,
    /// Sequence length in steps, or samples for denoise [default: 50]
    #[arg(long)]
    length: Option<usize>,
    /// Number of classes for the order task [default: 4]
    #[arg(long)]
    classes: Option<usize>,
    /// Independent runs with seeds seed, seed+1, ...; reports the mean and per-run values
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Args)]
struct DataArgs {
    /// Task: adding, order or denoise
    #[arg(long)]
    task: TaskKind,
    /// Data seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of sequences
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Sequence length in steps, or samples for denoise
    #[arg(long, default_value_t = 50)]
    length: usize,
    /// Number of classes for the order task
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

impl DataArgs {
    fn spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            train_count: self.count,
            val_count: 0,
            length: self.length,
            n_classes: self.classes,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated metrics: accuracy, mse, sdr, sdri, si_sdr, si_sdri
    /// [default: accuracy for order, mse for adding, si_sdri for denoise]
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint whose cell is analyzed
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Maximum number of state columns in the feature map
    #[arg(long, default_value_t = DEFAULT_MAX_STEPS)]
    max_steps: usize,
    /// PCA contribution threshold
    #[arg(long, default_value_t = 0.99)]
    threshold: f64,
}

#[derive(Args)]
struct CountArgs {
    /// Cell: gru or ghost
    #[arg(long)]
    cell: CellKind,
    /// Input feature dimension
    #[arg(long)]
    feature_dim: usize,
    /// Full state dimension
    #[arg(long)]
    state_dim: usize,
    /// Full-to-intrinsic state ratio (ghost only)
    #[arg(long, default_value_t = 2)]
    ratio: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Cell: gru or ghost
    #[arg(long, default_value = "ghost")]
    cell: CellKind,
    /// Input feature dimension
    #[arg(long, default_value_t = 3)]
    feature_dim: usize,
    /// Full state dimension
    #[arg(long, default_value_t = 6)]
    state_dim: usize,
    /// Full-to-intrinsic state ratio (ghost only)
    #[arg(long, default_value_t = 2)]
    ratio: usize,
    /// Activation of the cheap operation
    #[arg(long, default_value = "tanh")]
    activation: Activation,
    /// Sequence length
    #[arg(long, default_value_t = 5)]
    length: usize,
    /// Loss on the final state: mse or ce
    #[arg(long, default_value = "mse")]
    loss: String,
    /// Seed for weights, inputs and targets
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct ExportArgs {
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
    /// Write every tensor of this checkpoint as <name>.csv
    #[arg(long, conflicts_with = "task")]
    checkpoint: Option<PathBuf>,
    /// Dump a generated dataset (inputs.f64, targets.f64, dataset.json)
    #[arg(long, requires = "count")]
    task: Option<TaskKind>,
    /// Data seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of sequences to dump
    #[arg(long)]
    count: Option<usize>,
    /// Sequence length in steps, or samples for denoise
    #[arg(long, default_value_t = 50)]
    length: usize,
    /// Number of classes for the order task
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged(_) => EXIT_DIVERGED,
            Error::Json(_) | Error::Io { .. } => 1,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = Result<u8, Failure>;

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 1,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn load_checkpoint(path: &Path) -> Result<ghostrnn::Model, Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(io::load(path)?)
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.task {
        c.task.kind = v;
    }
    if let Some(v) = a.cell {
        c.cell = v;
        if v == CellKind::Gru && a.ratio.is_none() {
            c.ratio = 1;
        }
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { c.$($field).+ = v; })*
        };
    }
    set!(
        state_dim => state_dim,
        ratio => ratio,
        activation => activation,
        seed => seed,
        epochs => max_epochs,
        batch_size => batch_size,
        lr => initial_lr,
        weight_decay => weight_decay,
        patience => early_stop_patience,
        train_count => task.train_count,
        val_count => task.val_count,
        length => task.length,
        classes => task.n_classes,
    );
    if a.max_iterations.is_some() {
        c.max_iterations = a.max_iterations;
    }
    if let Some(steps) = &a.lr_steps {
        c.lr_steps = steps
            .iter()
            .map(|&iteration| ghostrnn::trainer::LrStep {
                iteration,
                multiplier: 0.1,
            })
            .collect();
    }
    if let Some(v) = a.clip_norm {
        c.clip_norm = if v == 0.0 { None } else { Some(v) };
    }
    if let Some(t) = threads_from_env()? {
        c.threads = t;
    }
    c.validate()?;
    Ok(c)
}

/// Trains once into `dir` and returns the summary object.
fn train_into(config: &TrainConfig, dir: &Path) -> Result<serde_json::Value, Failure> {
    create_dir(dir)?;
    let echoed = serde_json::to_string_pretty(config).map_err(Error::from)?;
    write_file(&dir.join("config.json"), echoed + "\n")?;

    let outcome = match train(config) {
        Ok(o) => o,
        Err(Error::Diverged(run)) => {
            io::write_metrics_jsonl(&run.history.records, dir.join("metrics.jsonl"))?;
            io::save(&run.last_good, dir.join("best.ckpt"))?;
            return Err(Failure {
                code: EXIT_DIVERGED,
                message: format!(
                    "training diverged at epoch {}; last good parameters kept in {}",
                    run.epoch,
                    dir.join("best.ckpt").display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    io::write_metrics_jsonl(&outcome.history.records, dir.join("metrics.jsonl"))?;
    io::save(&outcome.best, dir.join("best.ckpt"))?;
    io::save(&outcome.last, dir.join("final.ckpt"))?;
    for (r, secs) in outcome.history.records.iter().zip(&outcome.history.wall_times) {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  {} {:.6}  lr {:.1e}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.val_metric_name, r.val_metric, r.lr, secs
        );
    }

    let dims = CellDims {
        kind: config.cell,
        feature_dim: config.task.feature_dim(),
        state_dim: config.state_dim,
        ratio: config.ratio,
    };
    let counts = count_report(&dims)?;
    let best = outcome.history.best();
    Ok(json!({
        "cell": config.cell,
        "feature_dim": dims.feature_dim,
        "state_dim": config.state_dim,
        "ratio": config.ratio,
        "seed": config.seed,
        "weights_only": counts.weights_only,
        "with_biases": counts.with_biases,
        "epochs": outcome.history.records.len(),
        "best_epoch": best.map(|b| b.epoch),
        "best_val_loss": best.map(|b| b.val_loss),
        "metric": best.map(|b| b.val_metric_name.clone()),
        "best_val_metric": best.map(|b| b.val_metric),
    }))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let config = build_config(&a)?;
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    if a.repeats == 1 {
        println!("{}", train_into(&config, &a.out_dir)?);
        return Ok(0);
    }
    // Run i uses seed + i and writes into run_<i+1>/.
    let mut runs = Vec::with_capacity(a.repeats);
    for i in 0..a.repeats {
        let c = TrainConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        runs.push(train_into(&c, &a.out_dir.join(format!("run_{}", i + 1)))?);
    }
    let values: Vec<f64> = runs
        .iter()
        .filter_map(|r| r["best_val_metric"].as_f64())
        .collect();
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let summary = json!({
        "repeats": a.repeats,
        "metric": runs[0]["metric"],
        "mean_best_val_metric": mean,
        "runs": runs,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    write_file(&a.out_dir.join("summary.json"), text + "\n")?;
    println!("{summary}");
    Ok(0)
}

fn default_metric(kind: TaskKind) -> MetricKind {
    match kind {
        TaskKind::Adding => MetricKind::Mse,
        TaskKind::Order => MetricKind::Accuracy,
        TaskKind::Denoise => MetricKind::SiSdri,
    }
}

fn parse_metric(name: &str) -> Result<MetricKind, Failure> {
    serde_json::from_value(json!(name)).map_err(|_| usage(format!("unknown metric {name:?}")))
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let model = load_checkpoint(&a.checkpoint)?;
    let metrics = match &a.metrics {
        Some(names) => names.iter().map(|n| parse_metric(n)).collect::<Result<Vec<_>, _>>()?,
        None => vec![default_metric(a.data.task)],
    };
    let dataset = a.data.spec().generate(a.data.seed, a.data.count)?;
    let pool = worker_pool(threads_from_env()?.unwrap_or(0))?;
    let values = evaluate(&model, &dataset, &metrics, pool.as_ref())?;
    let mut out = serde_json::Map::new();
    for v in values {
        out.insert(v.kind.name().into(), json!(v.value));
    }
    println!("{}", serde_json::Value::Object(out));
    Ok(0)
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let model = load_checkpoint(&a.checkpoint)?;
    let dataset = a.data.spec().generate(a.data.seed, a.data.count)?;
    let sequences: Vec<Vec<Vector>> = dataset.samples.into_iter().map(|s| s.inputs).collect();
    let fm = collect_feature_map(&model.cell, &sequences, a.max_steps)?;
    let report = pca_contribution(&fm, a.threshold)?;
    let sim = similarity_matrix(&fm);
    create_dir(&a.out_dir)?;

    let sv: Vec<[f64; 2]> = report
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &v)| [(i + 1) as f64, v])
        .collect();
    export_csv_with_header("index,value", &sv, a.out_dir.join("singular_values.csv"), CSV_DIGITS)?;
    let contrib: Vec<[f64; 2]> = report
        .contribution
        .iter()
        .enumerate()
        .map(|(i, &v)| [(i + 1) as f64, v])
        .collect();
    export_csv_with_header(
        "k,cumulative_fraction",
        &contrib,
        a.out_dir.join("contribution.csv"),
        CSV_DIGITS,
    )?;
    let rows: Vec<&[f64]> = (0..sim.values.rows()).map(|i| sim.values.row(i)).collect();
    export_csv(&rows, a.out_dir.join("similarity.csv"), CSV_DIGITS)?;

    let pca = json!({
        "m": fm.m(),
        "n": fm.n(),
        "centered": report.centered,
        "squared": report.squared,
        "threshold": report.threshold,
        "k_at_threshold": report.k_at_threshold,
        "suggested_r": suggest_ratio(&report, fm.m()),
        "degenerate": report.degenerate,
        "contribution": report.contribution,
    });
    let text = serde_json::to_string_pretty(&pca).map_err(Error::from)?;
    write_file(&a.out_dir.join("pca_report.json"), text + "\n")?;
    println!(
        "m {}  n {}  k_at_threshold {}  suggested_r {}",
        fm.m(),
        fm.n(),
        report.k_at_threshold,
        suggest_ratio(&report, fm.m())
    );
    Ok(0)
}

fn cmd_count(a: CountArgs) -> CmdResult {
    let dims = CellDims {
        kind: a.cell,
        feature_dim: a.feature_dim,
        state_dim: a.state_dim,
        ratio: a.ratio,
    };
    let report = count_report(&dims)?;
    println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut wrng = RngState::new(derive_seed(a.seed, 1));
    // Biases start at zero; randomize everything so every path is exercised.
    // A ratio-1 ghost cell is built from the same random GRU so the two
    // report the same error.
    let cell = if a.cell == CellKind::Gru || a.ratio == 1 {
        let mut gru = GruParams::init(a.feature_dim, a.state_dim, &mut wrng);
        gru.fill_uniform(&mut wrng, -0.5, 0.5);
        gru.validate()?;
        match a.cell {
            CellKind::Gru => CellParams::Gru(gru),
            CellKind::Ghost => CellParams::Ghost(GhostParams::from_gru(&gru)),
        }
    } else {
        let mut c =
            CellParams::init(a.cell, a.feature_dim, a.state_dim, a.ratio, a.activation, &mut wrng)?;
        c.fill_uniform(&mut wrng, -0.5, 0.5);
        c
    };
    let mut rng = RngState::new(derive_seed(a.seed, 2));
    let mut xs = Vec::with_capacity(a.length);
    for _ in 0..a.length {
        let x: Result<Vec<f64>, Error> = (0..a.feature_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        xs.push(Vector::from_vec(x?));
    }
    let loss: Box<dyn SequenceLoss> = match a.loss.as_str() {
        "mse" => {
            let t: Result<Vec<f64>, Error> = (0..a.state_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            Box::new(FinalStateMse {
                target: Vector::from_vec(t?),
            })
        }
        "ce" => Box::new(FinalStateCrossEntropy {
            class: rng.below(a.state_dim),
        }),
        other => return Err(usage(format!("unknown loss {other:?}; expected mse or ce"))),
    };
    let err = grad_check(&cell, &xs, loss.as_ref(), a.eps)?;
    println!("max_rel_error {}", io::format_sig(err, 3));
    Ok(if err < a.tol { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_export(a: ExportArgs) -> CmdResult {
    match (&a.checkpoint, a.task) {
        (Some(path), None) => {
            let model = load_checkpoint(path)?;
            create_dir(&a.out_dir)?;
            for t in model.tensors() {
                let dims = t.shape.dims();
                let cols = *dims.last().unwrap_or(&0);
                if cols == 0 {
                    continue;
                }
                let rows: Vec<&[f64]> = t.values.chunks(cols).collect();
                export_csv(&rows, a.out_dir.join(format!("{}.csv", t.name)), CSV_DIGITS)?;
            }
            Ok(0)
        }
        (None, Some(kind)) => {
            let spec = TaskSpec {
                kind,
                train_count: 0,
                val_count: 0,
                length: a.length,
                n_classes: a.classes,
            };
            let dataset = spec.generate(a.seed, a.count.unwrap_or(0))?;
            io::dump_dataset(&dataset, &a.out_dir)?;
            Ok(0)
        }
        _ => Err(usage("export needs exactly one of --checkpoint or --task")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Count(a) => cmd_count(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
