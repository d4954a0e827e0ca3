//! Command-line benchmark runner.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pcc::dataset::{
    inject_label_noise, sample_labeled_subset, Dataset, LabelColumn, LabelConfig, SplitFile,
};
use pcc::engine::Engine;
use pcc::graph::{build_graph, GraphPolicy};
use pcc::harness::{
    beta_sweep, run_experiment, DatasetSource, EngineParams, ExperimentSpec, Method, MetricMode,
    ResultTable,
};
use pcc::Result;

#[derive(Parser)]
#[command(name = "pcc", about = "Particle competition and cooperation benchmark harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a noise-sweep experiment and emit a result table.
    Run(RunArgs),
    /// Sweep the reset count of the label-noise-robust variant.
    BetaSweep(BetaSweepArgs),
    /// Tune one method on a single trial and print the chosen parameter.
    Tune(TuneArgs),
    /// Run one classifier once and emit the label assignment as JSON.
    Classify(ClassifyArgs),
    /// Sample a labeled subset (with optional noise) and save it as JSON.
    Split(SplitArgs),
    /// Build a graph and export it as an edge list.
    ExportGraph(ExportGraphArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV dataset path.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Label column: index or header name.
    #[arg(long, default_value = "0")]
    label_column: LabelColumn,
    /// Synthetic Gaussians instead of a file: classes,per_class,dims,spacing.
    #[arg(long, value_parser = parse_synthetic)]
    synthetic: Option<SyntheticSpec>,
    /// Disable z-score feature normalization.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Clone, Debug)]
struct SyntheticSpec {
    classes: usize,
    per_class: usize,
    dims: usize,
    spacing: f64,
}

fn parse_synthetic(s: &str) -> std::result::Result<SyntheticSpec, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return Err("expected classes,per_class,dims,spacing".into());
    }
    Ok(SyntheticSpec {
        classes: parts[0].trim().parse().map_err(|e| format!("classes: {e}"))?,
        per_class: parts[1].trim().parse().map_err(|e| format!("per_class: {e}"))?,
        dims: parts[2].trim().parse().map_err(|e| format!("dims: {e}"))?,
        spacing: parts[3].trim().parse().map_err(|e| format!("spacing: {e}"))?,
    })
}

impl DataArgs {
    fn source(&self) -> std::result::Result<DatasetSource, String> {
        match (&self.data, &self.synthetic) {
            (Some(path), None) => Ok(DatasetSource::Csv {
                path: path.clone(),
                label_column: self.label_column.clone(),
            }),
            (None, Some(s)) => Ok(DatasetSource::Synthetic {
                classes: s.classes,
                per_class: s.per_class,
                dims: s.dims,
                spacing: s.spacing,
            }),
            _ => Err("exactly one of --data or --synthetic is required".into()),
        }
    }
}

#[derive(Args, Clone)]
struct SpecArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Methods to run, comma separated (pcc1,pcc2,pcc3,lnr,lgc,lp).
    #[arg(long, value_delimiter = ',', default_value = "lnr")]
    methods: Vec<Method>,
    /// Labeled subset size l.
    #[arg(long, default_value_t = 40)]
    labeled: usize,
    /// Noise fractions q/l, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.0")]
    noise: Vec<f64>,
    /// Trials (independent labeled/noise subsets) per noise fraction.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Evaluation runs per trial for particle methods.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Runs averaged per grid candidate while tuning particle methods.
    #[arg(long, default_value_t = 1)]
    tune_repeats: usize,
    /// k grid for particle methods, comma separated.
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    /// Sigma grid for the diffusion baselines, comma separated.
    #[arg(long, value_delimiter = ',')]
    sigma_grid: Option<Vec<f64>>,
    /// Master seed; everything else derives from it.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Count every node in the error, not just initially-unlabeled ones.
    #[arg(long)]
    all_nodes_metric: bool,
    /// Reset count for the label-noise-robust variant.
    #[arg(long, default_value_t = 10)]
    beta: u32,
    /// External labeled-subset JSON files, one per trial.
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<PathBuf>>,
    /// Trace the first particle run's movements to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl SpecArgs {
    fn spec(&self) -> std::result::Result<ExperimentSpec, String> {
        let mut engine = EngineParams::default();
        engine.beta = self.beta;
        Ok(ExperimentSpec {
            source: self.data.source()?,
            methods: self.methods.clone(),
            labeled: self.labeled,
            noise_fractions: self.noise.clone(),
            trials: self.trials,
            repeats: self.repeats,
            tune_repeats: self.tune_repeats,
            k_grid: self.k_grid.clone().unwrap_or_else(pcc::harness::default_k_grid),
            sigma_grid: self.sigma_grid.clone().unwrap_or_else(pcc::harness::default_sigma_grid),
            seed: self.seed,
            metric: if self.all_nodes_metric { MetricMode::All } else { MetricMode::Unlabeled },
            normalize: !self.data.no_normalize,
            engine,
            splits: self.splits.clone().unwrap_or_default(),
            trace: self.trace.clone(),
        })
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment spec; replaces all spec flags.
    #[arg(long, conflicts_with_all = ["data", "synthetic", "methods", "labeled", "noise",
        "trials", "repeats", "tune_repeats", "k_grid", "sigma_grid", "seed",
        "all_nodes_metric", "beta", "splits", "trace"])]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    /// Write the wide error table as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Write the full table (stds, tuned parameters, seeds) as JSON.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct BetaSweepArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Beta values to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    betas: Vec<u32>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Method to tune.
    #[arg(long)]
    method: Method,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    method: Method,
    /// k (particle methods) or sigma (baselines).
    #[arg(long)]
    param: f64,
    #[arg(long, default_value_t = 40)]
    labeled: usize,
    /// Noise fraction q/l.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    beta: u32,
    /// Replay a persisted split instead of sampling one.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Output path for the label-assignment JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace particle movements to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 40)]
    labeled: usize,
    /// Noise fraction q/l.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportGraphArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Policy: epsilon, knn-or, knn-pcc3, knn-lnr.
    #[arg(long, default_value = "knn-or")]
    policy: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Distance threshold for the epsilon policy.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Labeled subset size (label-aware policies need one).
    #[arg(long, default_value_t = 40)]
    labeled: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Ok(workers) = std::env::var("PCC_WORKERS") {
        if let Ok(count) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(count).build_global();
        }
    }
    if let Err(err) = dispatch(Cli::parse()) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::BetaSweep(args) => cmd_beta_sweep(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Split(args) => cmd_split(args),
        Command::ExportGraph(args) => cmd_export_graph(args),
    }
}

fn load_spec(args: &RunArgs) -> Result<ExperimentSpec> {
    match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Ok(serde_json::from_str(&text)?)
        }
        None => args.spec.spec().map_err(pcc::Error::InvalidSpec),
    }
}

fn emit_table(table: &ResultTable, csv: Option<&PathBuf>, json: Option<&PathBuf>) -> Result<()> {
    table.write_csv(std::io::stdout().lock())?;
    println!("chance-level error for this dataset: {:.4}", table.chance_error);
    if let Some(path) = csv {
        table.write_csv(BufWriter::new(File::create(path)?))?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = json {
        table.write_json(BufWriter::new(File::create(path)?))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let spec = load_spec(&args)?;
    let table = run_experiment(&spec)?;
    emit_table(&table, args.out_csv.as_ref(), args.out_json.as_ref())
}

fn cmd_beta_sweep(args: BetaSweepArgs) -> Result<()> {
    let mut spec = args.spec.spec().map_err(pcc::Error::InvalidSpec)?;
    spec.methods = vec![Method::Lnr];
    let table = beta_sweep(&spec, &args.betas)?;
    emit_table(&table, args.out_csv.as_ref(), args.out_json.as_ref())
}

fn cmd_tune(args: TuneArgs) -> Result<()> {
    let mut spec = args.spec.spec().map_err(pcc::Error::InvalidSpec)?;
    spec.methods = vec![args.method];
    spec.repeats = 1;
    let table = run_experiment(&spec)?;
    for row in &table.rows {
        println!(
            "{} at q/l = {}: tuned {:?}, mean error {:.4}",
            row.method,
            row.key,
            row.tuned_params,
            row.mean_error
        );
    }
    Ok(())
}

/// Build dataset + label config shared by the single-run subcommands.
fn prepare_single(
    data: &DataArgs,
    labeled: usize,
    noise: f64,
    seed: u64,
    split: Option<&PathBuf>,
) -> Result<(Dataset, LabelConfig)> {
    use rand::SeedableRng;
    let source = data.source().map_err(pcc::Error::InvalidSpec)?;
    let spec_like = ExperimentSpec {
        source,
        methods: vec![Method::Lnr],
        labeled,
        noise_fractions: vec![noise],
        trials: 1,
        repeats: 1,
        tune_repeats: 1,
        k_grid: vec![3],
        sigma_grid: vec![1.0],
        seed,
        metric: MetricMode::Unlabeled,
        normalize: !data.no_normalize,
        engine: EngineParams::default(),
        splits: vec![],
        trace: None,
    };
    let dataset = spec_like.load_dataset()?;
    let cfg = match split {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let file: SplitFile = serde_json::from_str(&text)?;
            file.into_config(&dataset)?
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let clean = sample_labeled_subset(&dataset, labeled, &mut rng)?;
            let q = (noise * clean.l() as f64).round() as usize;
            inject_label_noise(&clean, q, dataset.c(), &mut rng)?
        }
    };
    Ok((dataset, cfg))
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let (dataset, cfg) =
        prepare_single(&args.data, args.labeled, args.noise, args.seed, args.split.as_ref())?;
    let assignment = match args.method {
        Method::Lgc => pcc::baselines::lgc_classify(
            &dataset,
            &cfg,
            &pcc::baselines::AffinityConfig::with_sigma(args.param),
        )?,
        Method::Lp => pcc::baselines::lp_classify(
            &dataset,
            &cfg,
            &pcc::baselines::AffinityConfig::with_sigma(args.param),
        )?,
        m => {
            let k = args.param as usize;
            let policy = match m {
                Method::Pcc1 | Method::Pcc2 => GraphPolicy::KnnOr { k },
                Method::Pcc3 => GraphPolicy::KnnPcc3 { k },
                _ => GraphPolicy::KnnLnr { k },
            };
            let graph = build_graph(&dataset, &cfg, &policy)?;
            let mut vc = EngineParams::default().variant_config(m.variant().unwrap());
            vc.beta = args.beta;
            let mut engine =
                Engine::new(&graph, &cfg, dataset.c(), vc, args.seed)?.with_dataset(&dataset);
            if let Some(path) = &args.trace {
                engine = engine.with_trace(Box::new(BufWriter::new(File::create(path)?)));
            }
            engine.run_to_completion()
        }
    };
    let json = serde_json::to_string_pretty(&assignment)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, json)?;
            println!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let (_, cfg) = prepare_single(&args.data, args.labeled, args.noise, args.seed, None)?;
    let file = SplitFile::from_config(&cfg, Some(args.seed));
    std::fs::write(&args.out, serde_json::to_string_pretty(&file)?)?;
    println!("wrote {} (l = {}, q = {})", args.out.display(), cfg.l(), cfg.q());
    Ok(())
}

fn cmd_export_graph(args: ExportGraphArgs) -> Result<()> {
    let (dataset, cfg) = prepare_single(&args.data, args.labeled, 0.0, args.seed, None)?;
    let policy = match args.policy.as_str() {
        "epsilon" => GraphPolicy::Epsilon { sigma: args.sigma },
        "knn-or" => GraphPolicy::KnnOr { k: args.k },
        "knn-pcc3" => GraphPolicy::KnnPcc3 { k: args.k },
        "knn-lnr" => GraphPolicy::KnnLnr { k: args.k },
        other => return Err(pcc::Error::InvalidSpec(format!("unknown policy {other:?}"))),
    };
    let graph = build_graph(&dataset, &cfg, &policy)?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    graph.write_edge_list(&mut out)?;
    out.flush()?;
    println!("wrote {} ({} nodes, {} edges)", args.out.display(), graph.n(), graph.edge_count());
    Ok(())
}
