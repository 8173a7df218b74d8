use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use drc_core::config::RESOLVED_CONFIG_FILE;
use drc_core::dataset::Family;
use drc_core::model::Variant;
use drc_core::pipeline::{Pipeline, TableAxis};
use drc_core::preprocess::Representation;
use drc_core::{Error, ExperimentConfig, FeatureSource};
use serde_json::Value;

const CACHE_ENV: &str = "DRCBENCH_CACHE";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("invalid config at `{path}`: {message}")]
    Override { path: String, message: String },

    #[error("thread pool: {0}")]
    Pool(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Override { .. } => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(
                Error::Config { .. }
                | Error::MissingInput(_)
                | Error::Protocol(_)
                | Error::Json { .. },
            ) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "drcbench",
    version,
    about = "Compressor parameter estimation experiments"
)]
struct Cli {
    /// JSON experiment config; absent fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Single worker thread, for byte-identical reruns.
    #[arg(long, global = true)]
    strict_deterministic: bool,

    /// Override any config field: `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    sets: Vec<String>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    family: Option<String>,
    #[arg(long, global = true)]
    loops: Option<usize>,
    #[arg(long, global = true)]
    thin: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    width: Option<f64>,
    #[arg(long, global = true)]
    representation: Option<String>,
    #[arg(long, global = true)]
    frame_len: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// `embedding` or `baseline`.
    #[arg(long, global = true)]
    features: Option<String>,
    #[arg(long, global = true)]
    splits: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize loops and render the compressed dataset.
    Generate,
    /// Train the siamese model on the generated dataset.
    Train,
    /// Write merge embeddings for every dataset entry.
    Embed,
    /// Fit one forest per parameter on all entries.
    Fit,
    /// Run the repeated 80/20 evaluation.
    Evaluate,
    /// Run a sweep and write the table as .txt, .csv and .json.
    ReproduceTable {
        /// representation | frame-size | kernel-shape | large-scale
        #[arg(long)]
        axis: String,
    },
    /// Print the resolved config.
    ShowConfig,
}

fn bad(path: &str, message: impl Into<String>) -> CliError {
    CliError::Override {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Sets a dotted path in `root`, which must already exist in the schema.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| bad(path, "not an object"))?;
        if !obj.contains_key(*k) {
            return Err(bad(path, "unknown field"));
        }
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*k).expect("checked");
    }
    Ok(())
}

fn parse_set(s: &str) -> Result<(String, Value), CliError> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| bad(s, "expected PATH=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut v = serde_json::to_value(&base).expect("config serializes");
    for s in &cli.sets {
        let (path, value) = parse_set(s)?;
        set_path(&mut v, &path, value)?;
    }
    let o = &cli.overrides;
    if let Some(f) = &o.family {
        let f = Family::from_str(f)
            .map_err(|_| bad("dataset.family", format!("unknown family `{f}`")))?;
        set_path(&mut v, "dataset.family", Value::String(f.to_string()))?;
    }
    if let Some(n) = o.loops {
        set_path(&mut v, "dataset.n_loops", n.into())?;
    }
    if let Some(n) = o.thin {
        set_path(&mut v, "dataset.thin", n.into())?;
    }
    if let Some(n) = o.seed {
        set_path(&mut v, "seed", n.into())?;
    }
    if let Some(p) = &o.out {
        set_path(&mut v, "output_dir", Value::String(p.display().to_string()))?;
    }
    if let Some(s) = &o.variant {
        let m = Variant::parse(s)
            .ok_or_else(|| bad("model.variant", format!("unknown variant `{s}`")))?;
        set_path(&mut v, "model.variant", Value::String(m.key().into()))?;
    }
    if let Some(w) = o.width {
        set_path(&mut v, "model.width", w.into())?;
    }
    if let Some(s) = &o.representation {
        let r = Representation::parse(s).ok_or_else(|| {
            bad(
                "preprocess.representation",
                format!("unknown representation `{s}`"),
            )
        })?;
        set_path(
            &mut v,
            "preprocess.representation",
            serde_json::to_value(r).expect("serializes"),
        )?;
    }
    if let Some(n) = o.frame_len {
        set_path(&mut v, "preprocess.frame_len", n.into())?;
    }
    if let Some(n) = o.epochs {
        set_path(&mut v, "train.max_epochs", n.into())?;
    }
    if let Some(s) = &o.features {
        let f = FeatureSource::parse(s)
            .ok_or_else(|| bad("features", format!("unknown feature source `{s}`")))?;
        set_path(&mut v, "features", Value::String(f.key().into()))?;
    }
    if let Some(n) = o.splits {
        set_path(&mut v, "eval.n_splits", n.into())?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(v).map_err(|e| bad("<config>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads(cli: &Cli) -> Result<(), CliError> {
    let threads = if cli.strict_deterministic {
        Some(1)
    } else {
        cli.jobs
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(bad("--jobs", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Pool(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(&cli)?;
    let cfg = resolve(&cli)?;
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    let pipeline = Pipeline::new(cfg, cache)?.with_progress(Arc::new(|m: &str| eprintln!("{m}")));
    let source = pipeline.cfg.features;
    match cli.command {
        Command::Generate => {
            let ds = pipeline.generate()?;
            println!(
                "{} entries, {} loops in {}",
                ds.manifest.entries.len(),
                ds.manifest.loops.len(),
                ds.dir.display()
            );
        }
        Command::Train => {
            let log = pipeline.train(|r| match r.val_mse {
                Some(v) => eprintln!(
                    "epoch {:>4}  train {:.6}  val {:.6}",
                    r.epoch, r.train_mse, v
                ),
                None => eprintln!("epoch {:>4}  train {:.6}", r.epoch, r.train_mse),
            })?;
            println!(
                "best epoch {} of {}; checkpoint in {}",
                log.best_epoch,
                log.records.len(),
                pipeline.model_dir().display()
            );
        }
        Command::Embed => {
            let m = pipeline.embed()?;
            println!(
                "{}×{} embedding matrix in {}",
                m.rows,
                m.cols,
                pipeline.features_path(FeatureSource::Embedding).display()
            );
        }
        Command::Fit => {
            let f = pipeline.fit(source)?;
            println!(
                "{} forests in {}",
                f.forests.len(),
                pipeline.forest_path(source).display()
            );
        }
        Command::Evaluate => {
            let report = pipeline.evaluate(source)?;
            print!("{}", report.to_text());
        }
        Command::ReproduceTable { axis } => {
            let axis = TableAxis::parse(&axis).ok_or_else(|| {
                let keys: Vec<&str> = TableAxis::ALL.iter().map(|a| a.key()).collect();
                bad(
                    "--axis",
                    format!("`{axis}` is not one of {}", keys.join(", ")),
                )
            })?;
            let table = pipeline.reproduce_table(axis)?;
            print!("{}", table.to_text());
        }
        Command::ShowConfig => {
            println!("{}", pipeline.cfg.to_json());
            eprintln!("(written next to every artifact as {RESOLVED_CONFIG_FILE})");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
