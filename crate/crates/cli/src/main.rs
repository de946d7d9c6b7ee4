//! `misalign`: command-line driver for the quantization experiments.
//!
//! Exit status is 0 on success, 2 on usage or configuration errors and 1 on
//! any runtime fault.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use misalign_core::harness::{Method, Pipeline, ReportKind, RunConfig};
use misalign_core::lm::synthesize_corpus;
use misalign_core::quant::QuantFormat;

#[derive(Parser)]
#[command(
    name = "misalign",
    version,
    about = "Quantization misalignment experiments on a toy byte-level transformer"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum QuantizeMethod {
    Rtn,
    Gptq,
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus into blocks and record the split sizes.
    PrepData {
        /// Write a synthetic corpus of this many bytes to the configured path first.
        #[arg(long, value_name = "BYTES")]
        generate: Option<usize>,
    },
    /// Pretrain the full-precision base model.
    TrainBase,
    /// Post-training quantization of the base model.
    Quantize {
        #[arg(long, value_enum)]
        method: QuantizeMethod,
        #[arg(long, value_parser = parse_format)]
        format: QuantFormat,
    },
    /// Quantization-aware fine-tuning from the base model.
    Qaft {
        #[arg(long, value_parser = parse_format)]
        format: QuantFormat,
    },
    /// Test NLL, weight size and per-layer MSE for every configured format and method.
    Eval,
    /// Radial and segment loss profiles plus the basin estimate.
    Landscape,
    /// Emit CSV reports, computing missing stages first.
    Report {
        #[arg(default_value = "all", value_parser = ["misalignment", "tradeoff", "landscape", "qaft-trace", "gptq-damp", "all"])]
        kind: String,
    },
    /// Every stage followed by every report.
    All,
}

fn parse_format(s: &str) -> Result<QuantFormat, String> {
    s.parse::<QuantFormat>().map_err(|e| e.to_string())
}

impl Command {
    /// `(module, operation)` named in diagnostics.
    fn site(&self) -> (&'static str, &'static str) {
        match self {
            Command::PrepData { .. } => ("lm", "ingest_corpus"),
            Command::TrainBase => ("lm", "pretrain_base"),
            Command::Quantize {
                method: QuantizeMethod::Rtn,
                ..
            } => ("quant", "quantize_model_rtn"),
            Command::Quantize {
                method: QuantizeMethod::Gptq,
                ..
            } => ("gptq", "gptq_quantize_model"),
            Command::Qaft { .. } => ("qaft", "qaft_train"),
            Command::Eval => ("harness", "evaluate"),
            Command::Landscape => ("landscape", "landscape"),
            Command::Report { .. } => ("harness", "emit_reports"),
            Command::All => ("harness", "run_all"),
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let path = common.config.as_ref().context("--config PATH is required")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cfg: RunConfig, command: &Command) -> anyhow::Result<()> {
    if let Command::PrepData { generate: Some(n) } = command {
        if let Some(dir) = cfg.corpus.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&cfg.corpus, synthesize_corpus(*n, cfg.seed))
            .with_context(|| format!("writing {}", cfg.corpus.display()))?;
        log::info!("wrote {n} synthetic bytes to {}", cfg.corpus.display());
    }
    let p = Pipeline::open(cfg)?;
    match command {
        Command::PrepData { .. } => {
            let s = p.prep_data()?;
            println!(
                "corpus {} : {} pretrain / {} train / {} val / {} test blocks of {}",
                s.corpus_sha256, s.pretrain_blocks, s.train_blocks, s.val_blocks, s.test_blocks, s.seq_len
            );
        }
        Command::TrainBase => {
            p.base()?;
            if let Some(r) = p.pretrain_report()? {
                println!("best val nll {:.4} at step {}", r.best_val_nll, r.best_step);
            }
        }
        Command::Quantize { method, format } => {
            let method = match method {
                QuantizeMethod::Rtn => Method::Rtn,
                QuantizeMethod::Gptq => Method::Gptq,
            };
            p.quantized(method, *format)?;
            println!(
                "{}",
                p.checkpoint_stem(&misalign_core::harness::anchor_name(method, *format))
                    .display()
            );
        }
        Command::Qaft { format } => {
            let (_, rec) = p.qaft(*format)?;
            println!(
                "best lr {} epoch {} val nll {:.4}",
                rec.best_lr, rec.best_epoch, rec.best_val_nll
            );
        }
        Command::Eval => {
            let e = p.evaluate()?;
            println!("fp32 test nll {:.4}", e.full_precision_test_nll);
            for m in &e.entries {
                println!("{} {} test nll {:.4}", m.format, m.method, m.test_nll);
            }
        }
        Command::Landscape => {
            let l = p.landscape()?;
            match (&l.basin, &l.basin_refusal) {
                (Some(b), _) => println!("basin radius {:.4}", b.radius),
                (None, Some(why)) => println!("basin estimate refused: {why}"),
                (None, None) => {}
            }
        }
        Command::Report { kind } => {
            let kind: ReportKind = kind.parse()?;
            for path in p.write_reports(kind)? {
                println!("{}", path.display());
            }
        }
        Command::All => {
            for path in p.run_all()? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: harness::load_config: {e:#}");
            return ExitCode::from(2);
        }
    };
    let (module, op) = cli.command.site();
    match run(cfg, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {module}::{op}: {e:#}");
            ExitCode::from(1)
        }
    }
}
