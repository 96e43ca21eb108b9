use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use upcl_core::geometry::MheParams;
use upcl_core::{gradcheck, harness, report, Error, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "upcl",
    version,
    about = "Class-incremental learning with uniform prototypes"
)]
struct Cli {
    /// Output root; falls back to $UPCL_OUT_DIR, then ./runs
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one configuration
    Run(ConfigArgs),
    /// Run the six head/margin variants over several seeds
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed replicates per variant
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Minimum cosine distance of each prototype generator
    Protos {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long = "C", value_delimiter = ',', default_values_t = [4, 8, 16, 32])]
        classes: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        mhe_iters: Option<usize>,
        #[arg(long)]
        mhe_step: Option<f64>,
    },
    /// Finite-difference check of every loss and the encoder
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
    },
}

/// Config file plus per-key overrides; flags win over the file.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    run_seed: Option<u64>,
    #[arg(long)]
    class_order_seed: Option<u64>,
    /// uniform_prototype | cosine_classifier
    #[arg(long)]
    head: Option<String>,
    /// none | fixed | dynamic
    #[arg(long)]
    margin_mode: Option<String>,
    /// gram_schmidt | simplex_etf | muller | mhe
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    feat_weight_base: Option<f64>,
    #[arg(long)]
    ema_factor: Option<f64>,
    /// fixed_total | fixed_per_class
    #[arg(long)]
    memory_strategy: Option<String>,
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs_base: Option<usize>,
    #[arg(long)]
    epochs_increment: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn set_path(root: &mut Value, path: &[&str], value: Value) {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        let obj = node.as_object_mut().expect("object");
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
    }
    node.as_object_mut()
        .expect("object")
        .insert(path[path.len() - 1].to_string(), value);
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigFailure> {
        let mut doc = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    ConfigFailure(format!("config: cannot read {}: {e}", path.display()))
                })?;
                if text.trim().is_empty() {
                    json!({})
                } else {
                    serde_json::from_str(&text).map_err(|e| {
                        ConfigFailure(format!("config: {} is not valid JSON: {e}", path.display()))
                    })?
                }
            }
            None => json!({}),
        };
        if !doc.is_object() {
            return Err(ConfigFailure(
                "config: top level must be a JSON object".into(),
            ));
        }
        let overrides: [(&[&str], Option<Value>); 15] = [
            (&["tau"], self.tau.map(Value::from)),
            (&["tasks"], self.tasks.map(Value::from)),
            (&["run_seed"], self.run_seed.map(Value::from)),
            (
                &["class_order_seed"],
                self.class_order_seed.map(Value::from),
            ),
            (&["head"], self.head.clone().map(Value::from)),
            (&["margin_mode"], self.margin_mode.clone().map(Value::from)),
            (&["generator"], self.generator.clone().map(Value::from)),
            (
                &["feat_weight_base"],
                self.feat_weight_base.map(Value::from),
            ),
            (&["ema_factor"], self.ema_factor.map(Value::from)),
            (
                &["memory", "strategy"],
                self.memory_strategy.clone().map(Value::from),
            ),
            (&["memory", "size"], self.memory_size.map(Value::from)),
            (&["optimizer", "lr"], self.lr.map(Value::from)),
            (&["epochs", "base"], self.epochs_base.map(Value::from)),
            (
                &["epochs", "increment"],
                self.epochs_increment.map(Value::from),
            ),
            (&["batch_size"], self.batch_size.map(Value::from)),
        ];
        for (path, value) in overrides {
            if let Some(v) = value {
                set_path(&mut doc, path, v);
            }
        }
        RunConfig::from_json_str(&doc.to_string()).map_err(|e| match e {
            Error::Config { key, reason } => ConfigFailure(format!("config key `{key}`: {reason}")),
            other => ConfigFailure(format!("config: {other}")),
        })
    }
}

#[derive(Debug)]
struct ConfigFailure(String);

fn out_root(cli: &Cli) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os("UPCL_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<timestamp>-<label>`, suffixed until it does not exist yet.
fn fresh_dir(root: &Path, label: &str) -> anyhow::Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{label}");
    let mut candidate = root.join(&base);
    let mut n = 1;
    while candidate.exists() {
        candidate = root.join(format!("{base}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&candidate)
        .with_context(|| format!("creating {}", candidate.display()))?;
    Ok(candidate)
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigFailure> for Failure {
    fn from(e: ConfigFailure) -> Self {
        Failure::Config(e.0)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let out = harness::run_experiment(&cfg).context("run failed")?;
            let dir = fresh_dir(&out_root(cli), &format!("seed{}", cfg.run_seed))?;
            report::write_run(&dir, &out).context("writing outputs")?;
            println!(
                "{} A_last={:.4} A_avg={:.4} -> {}",
                out.run_id,
                out.metrics.a_last,
                out.metrics.a_avg,
                dir.display()
            );
        }
        Command::Ablate { config, seeds } => {
            let cfg = config.resolve()?;
            if *seeds == 0 {
                return Err(Failure::Config(
                    "config key `seeds`: must be at least 1".into(),
                ));
            }
            let (runs, summary) = harness::run_ablation(&cfg, *seeds).context("ablation failed")?;
            let dir = fresh_dir(&out_root(cli), &format!("ablate-seed{}", cfg.run_seed))?;
            report::write_ablation(&dir, &runs, &summary).context("writing outputs")?;
            print!("{}", report::summary_table(&summary));
            println!("-> {}", dir.display());
        }
        Command::Protos {
            d,
            classes,
            seeds,
            mhe_iters,
            mhe_step,
        } => {
            let mut mhe = MheParams::default();
            if let Some(iters) = mhe_iters {
                mhe.iters = *iters;
            }
            if let Some(step) = mhe_step {
                if !(*step > 0.0) {
                    return Err(Failure::Config(
                        "config key `mhe_step`: must be positive".into(),
                    ));
                }
                mhe.step = *step;
            }
            let rows =
                report::proto_study(*d, classes, *seeds, mhe).context("prototype study failed")?;
            let dir = fresh_dir(&out_root(cli), &format!("protos-d{d}"))?;
            let path = dir.join("protos.csv");
            std::fs::write(&path, report::protos_csv(&rows)).context("writing protos.csv")?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Gradcheck {
            instances,
            seed,
            step,
        } => {
            let rep =
                gradcheck::run_suite(*instances, *seed, *step).context("gradient check failed")?;
            println!(
                "{}",
                serde_json::to_string_pretty(&rep).context("serialising report")?
            );
            if !rep.passed() {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "gradient check exceeded threshold {}",
                    rep.threshold
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, including unknown subcommands.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
