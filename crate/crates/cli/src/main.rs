use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use monotta::baselines::PolicyKind;
use monotta::corruption::{materialize, CorruptionKind, CorruptionSpec};
use monotta::detector::{save_checkpoint, train_detector, TrainConfig};
use monotta::harness::{run_experiment, DataSource, ExperimentConfig, ExperimentReport, StreamSpec, OUTPUT_ROOT_ENV};
use monotta::imageio::write_labeled_dir;

const EXIT_CELL_FAILED: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "monotta", version, about = "Test-time adaptation for a toy center-point detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy detector on synthetic scenes and write a checkpoint.
    TrainToy(TrainArgs),
    /// Write a corrupted copy of an image directory plus manifest.csv.
    Corrupt(CorruptArgs),
    /// Run one adaptation policy (default: monotta) over corrupted streams.
    Adapt(RunArgs),
    /// Evaluate without adaptation (default policy: source_only).
    Evaluate(RunArgs),
    /// Run several policies and print the comparison table.
    Compare(RunArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the validation scenes as a labeled image directory.
    #[arg(long)]
    export_val: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kind: String,
    #[arg(long)]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (relative paths go under $MONOTTA_OUTPUT_ROOT if set).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Policy names; repeat or comma-separate.
    #[arg(long = "policy", value_delimiter = ',')]
    policies: Vec<String>,
    /// `kind@severity` or `clean`; repeat or comma-separate.
    #[arg(long = "corruption", value_delimiter = ',')]
    corruptions: Vec<String>,
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Evaluate a labeled image directory instead of the checkpoint's validation split.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Run cells one at a time.
    #[arg(long)]
    serial: bool,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Adapt,
    Evaluate,
    Compare,
}

fn parse_stream(s: &str) -> anyhow::Result<StreamSpec> {
    if s == "clean" {
        return Ok(StreamSpec::clean());
    }
    let (kind, severity) = s.split_once('@').with_context(|| format!("{s:?}: expected kind@severity or clean"))?;
    let kind: CorruptionKind = kind.parse()?;
    let severity: u8 = severity.parse().with_context(|| format!("{s:?}: bad severity"))?;
    let spec = StreamSpec::corrupted(kind, severity);
    spec.validate()?;
    Ok(spec)
}

fn build_config(args: &RunArgs, mode: Mode) -> anyhow::Result<ExperimentConfig> {
    let output_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let (Some(checkpoint), Some(out)) = (&args.checkpoint, &args.out) else {
                bail!("either --config or both --checkpoint and --out are required");
            };
            let mut config = ExperimentConfig::new(checkpoint, out);
            config.policies = match mode {
                Mode::Adapt => vec![PolicyKind::Monotta],
                Mode::Evaluate => vec![PolicyKind::SourceOnly],
                Mode::Compare => config.policies,
            };
            config
        }
    };
    let cwd = Path::new(".");
    let resolve = |p: &Path, root: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
    if let Some(p) = &args.checkpoint {
        config.checkpoint = resolve(p, cwd);
    }
    if let Some(p) = &args.out {
        config.output_dir = resolve(p, output_root.as_deref().unwrap_or(cwd));
    }
    if !args.policies.is_empty() {
        config.policies = args.policies.iter().map(|p| PolicyKind::parse(p)).collect::<Result<_, _>>()?;
    }
    if !args.corruptions.is_empty() {
        config.corruptions = args.corruptions.iter().map(|s| parse_stream(s)).collect::<Result<_, _>>()?;
    }
    if !args.seeds.is_empty() {
        config.seeds = args.seeds.clone();
    }
    if let Some(p) = &args.data_dir {
        config.data = DataSource::Directory { path: resolve(p, cwd) };
    }
    if let Some(b) = args.batch_size {
        config.tta.batch_size = b;
    }
    if let Some(lr) = args.lr {
        config.tta.learning_rate = lr;
    }
    if let Some(l) = args.lambda {
        config.tta.lambda_balance = l;
    }
    if args.serial {
        config.parallel = false;
    }
    if mode == Mode::Adapt && config.policies.len() != 1 {
        bail!("adapt runs exactly one policy, got {}", config.policies.len());
    }
    config.validate()?;
    if !config.checkpoint.is_file() {
        bail!("checkpoint {} not found", config.checkpoint.display());
    }
    Ok(config)
}

fn print_cells(report: &ExperimentReport) {
    for o in &report.outcomes {
        let k = &o.key;
        match &o.result {
            Ok(r) => {
                let map = r.record.map.map(|m| format!("{:.2}", m * 100.0)).unwrap_or_else(|| "-".into());
                let alpha = r.record.alpha.as_ref().map(|a| format!("{:.4}", a.last)).unwrap_or_else(|| "-".into());
                println!("{:<24} {:<12} seed {:<4} mAP {map:>6}  final alpha {alpha}", k.stream, k.policy, k.seed);
            }
            Err(e) => println!("{:<24} {:<12} seed {:<4} FAILED: {e}", k.stream, k.policy, k.seed),
        }
    }
}

fn run(args: &RunArgs, mode: Mode) -> anyhow::Result<u8> {
    let config = build_config(args, mode).context(BadConfigMarker)?;
    let report = run_experiment(&config)?;
    match mode {
        Mode::Compare => {
            let records: Vec<_> = report.records().into_iter().cloned().collect();
            print!("{}", monotta::harness::render_report(&records).text);
        }
        Mode::Adapt | Mode::Evaluate => print_cells(&report),
    }
    println!("outputs written to {}", config.output_dir.display());
    let failures = report.failures();
    if failures.is_empty() {
        Ok(0)
    } else {
        for (k, e) in failures {
            eprintln!("cell {} / {} / seed {} failed: {e}", k.stream, k.policy, k.seed);
        }
        Ok(EXIT_CELL_FAILED)
    }
}

/// Context attached to errors caused by an unusable configuration.
#[derive(Debug)]
struct BadConfigMarker;

impl std::fmt::Display for BadConfigMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("invalid configuration")
    }
}

fn train(args: &TrainArgs) -> anyhow::Result<u8> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .context(BadConfigMarker)?
        }
        None => TrainConfig::default(),
    };
    if let Some(n) = args.n_train {
        config.n_train = n;
    }
    if let Some(n) = args.n_val {
        config.n_val = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    let (model, record) = train_detector(&config)?;
    save_checkpoint(&model, Some(&record), &args.out)?;
    println!("clean validation mAP {:.2}; checkpoint written to {}", record.clean_map * 100.0, args.out.display());
    if let Some(dir) = &args.export_val {
        let val = config.validation_scenes()?;
        let images: Vec<_> = val.scenes.iter().map(|s| s.image.clone()).collect();
        write_labeled_dir(dir, &images, &val.ground_truth())?;
        println!("{} validation scenes written to {}", images.len(), dir.display());
    }
    Ok(0)
}

fn corrupt(args: &CorruptArgs) -> anyhow::Result<u8> {
    let spec = args
        .kind
        .parse::<CorruptionKind>()
        .and_then(|kind| CorruptionSpec::new(kind, args.severity, args.seed))
        .context(BadConfigMarker)?;
    let manifest = materialize(&args.input, &args.out, spec)?;
    let skipped = manifest.skipped().count();
    println!(
        "{} images corrupted with {}@{} into {}; {skipped} skipped",
        manifest.rows.len() - skipped,
        spec.kind,
        spec.severity,
        args.out.display()
    );
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainToy(a) => train(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Adapt(a) => run(a, Mode::Adapt),
        Command::Evaluate(a) => run(a, Mode::Evaluate),
        Command::Compare(a) => run(a, Mode::Compare),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let bad_config = e.downcast_ref::<BadConfigMarker>().is_some()
                || matches!(e.downcast_ref::<monotta::Error>(), Some(monotta::Error::Config(_)));
            ExitCode::from(if bad_config { EXIT_BAD_CONFIG } else { EXIT_CELL_FAILED })
        }
    }
}
