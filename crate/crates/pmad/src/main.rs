use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmad::config::{parse_assignment, parse_pairs, RunConfig};
use pmad::error::{Error, Result};
use pmad::io::{load_corpus, write_corpus};
use pmad::report;
use pmad::runs::{self, ModelSet};
use pmad_core::network::MemoryStrategy;
use pmad_core::synth::default_suite;

#[derive(Parser)]
#[command(name = "pmad", version, about = "Memory-augmented patch reconstruction for time-series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic three-domain corpus.
    Synth(Common),
    /// Train one multi-domain model or one model per series.
    Train(Common),
    /// Train without memory; the checkpoint can seed `--encoder-init`.
    Pretrain(Common),
    /// Score a corpus with trained checkpoints.
    Eval {
        /// A `.pmad` file or a directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and score a grid of encoder × memory-strategy cells.
    Ablate {
        /// Comma-separated `encoder:strategy` cells; the encoder is
        /// `scratch`, `pretrained` (the `--encoder-init` checkpoint), or a path.
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep training-data ratio and K.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        #[arg(long = "k-values", value_delimiter = ',', required = true)]
        k_values: Vec<usize>,
        /// Defaults to the configured strategy.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<MemoryStrategy>,
        #[command(flatten)]
        common: Common,
    },
    /// Hold out each domain in turn and score it.
    Loo {
        /// Repeat every fold without memory.
        #[arg(long)]
        compare_baseline: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Training, reload, inference time, and size with and without memory
    /// and multi-domain training.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `multi_domain` or `per_dataset`.
    #[arg(long)]
    mode: Option<String>,
    /// `none`, `frozen`, `own_domain`, or `data_driven`.
    #[arg(long)]
    strategy: Option<String>,
    /// Fraction of each training split to keep.
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    encoder_init: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    k: Option<String>,
    /// Any configuration key, as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    /// Config-file pairs followed by flag pairs, so later entries win.
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                parse_pairs(&text, path)?
            }
            None => Vec::new(),
        };
        let flags = [
            ("data", &self.data),
            ("out", &self.out),
            ("seed", &self.seed),
            ("mode", &self.mode),
            ("memory_strategy", &self.strategy),
            ("train_ratio", &self.ratio),
            ("encoder_init", &self.encoder_init),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("k", &self.k),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        }
        for s in &self.set {
            pairs.push(parse_assignment(s)?);
        }
        Ok(pairs)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in self.overrides()? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = common.resolve()?;
            let out = required(&cfg.out, "out")?;
            let records = default_suite(cfg.train.seed)?;
            std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
            let files = write_corpus(&records, out)?;
            cfg.write_resolved(out)?;
            println!("wrote {} series to {}", files.len(), out.display());
        }
        Command::Train(common) => train(common.resolve()?)?,
        Command::Pretrain(common) => {
            let mut cfg = common.resolve()?;
            cfg.train.memory_strategy = MemoryStrategy::None;
            cfg.train.mode = pmad_core::training::TrainMode::MultiDomain;
            train(cfg)?;
        }
        Command::Eval { checkpoint, common } => {
            let overrides = common.overrides()?;
            let models = ModelSet::load(&checkpoint)?;
            let mut cfg = None;
            for ck in models.checkpoints() {
                let resolved = ck.config.for_checkpoint(&overrides)?;
                cfg.get_or_insert(resolved);
            }
            let cfg = cfg.expect("at least one checkpoint");
            let corpus = load_corpus(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            let result = runs::evaluate_models(&models, &corpus, &cfg)?;
            runs::write_eval(&result, &cfg, out)?;
            let p = result.report.corpus.percent();
            println!(
                "{} series: AUC-PR {:.2} AUC-ROC {:.2} VUS-PR {:.2} VUS-ROC {:.2}",
                result.report.series.len(),
                p[0],
                p[1],
                p[2],
                p[3]
            );
        }
        Command::Ablate { grid, common } => {
            let cfg = common.resolve()?;
            let cells = runs::parse_grid(&grid, cfg.encoder_init.as_deref())?;
            let corpus = load_corpus(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            let rows = runs::ablate(&cfg, &corpus, &cells)?;
            write_table(&cfg, out, "ablation.csv", |p| report::write_ablation(&rows, p))?;
        }
        Command::Sweep { ratios, k_values, strategies, common } => {
            let cfg = common.resolve()?;
            let strategies = if strategies.is_empty() { vec![cfg.train.memory_strategy] } else { strategies };
            let corpus = load_corpus(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            let rows = runs::sweep(&cfg, &corpus, &ratios, &k_values, &strategies)?;
            write_table(&cfg, out, "sweep.csv", |p| report::write_sweep(&rows, p))?;
        }
        Command::Loo { compare_baseline, common } => {
            let cfg = common.resolve()?;
            let corpus = load_corpus(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            let rows = runs::leave_one_out(&cfg, &corpus, compare_baseline)?;
            write_table(&cfg, out, "loo.csv", |p| report::write_loo(&rows, p))?;
        }
        Command::Bench(common) => {
            let cfg = common.resolve()?;
            let corpus = load_corpus(required(&cfg.data, "data")?)?;
            let out = required(&cfg.out, "out")?;
            let rows = runs::bench(&cfg, &corpus, out)?;
            write_table(&cfg, out, "bench.csv", |p| report::write_bench(&rows, p))?;
        }
    }
    Ok(())
}

fn train(cfg: RunConfig) -> Result<()> {
    let corpus = load_corpus(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?;
    let models = runs::train_models(&cfg, &corpus)?;
    let written = runs::write_trained(&models, &cfg, out)?;
    println!("wrote {} checkpoint(s), {} bytes, to {}", written.checkpoints.len(), written.bytes, out.display());
    Ok(())
}

fn write_table(cfg: &RunConfig, out: &Path, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let path = out.join(name);
    write(&path)?;
    cfg.write_resolved(out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
