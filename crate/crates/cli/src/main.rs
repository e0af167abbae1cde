use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dmad_cli::config::{resolve_output_dir, ExperimentConfig};
use dmad_cli::runner::{
    exit_code, run_eval, run_gen_data, run_grid, run_metrics_file, run_protocol, run_train,
    DataSource,
};
use dmad_core::dataset::ImageFormat;

/// Differential morphing-attack detection at desk scale.
#[derive(Parser)]
#[command(name = "dmad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment config file (TOML); defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides config; falls back to
    /// $DMAD_OUTPUT_ROOT/<command>).
    #[arg(long)]
    out: Option<String>,
    /// Experiment seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct TrainOverrides {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// LoRA rank.
    #[arg(long)]
    rank: Option<usize>,
    /// LoRA alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// LoRA dropout.
    #[arg(long)]
    dropout: Option<f64>,
    /// Detector mode: differential | single_image.
    #[arg(long)]
    mode: Option<String>,
    /// Artefact model for generated data: landmark_like | diffusion_like.
    #[arg(long)]
    artefact: Option<String>,
    /// Identities in the generated dataset.
    #[arg(long)]
    identities: Option<usize>,
    /// Dataset seed (generator).
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and write checkpoint + loss trace.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Load training pairs from a gen-data directory instead of
        /// generating them.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Score a test set with a checkpoint and emit metrics artifacts.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Model checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate pairs from a gen-data directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Also write a DET plot (det.svg).
        #[arg(long)]
        svg: bool,
    },
    /// Train/evaluate every (rank, alpha, dropout) grid cell.
    Grid {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Run up to N grid cells on worker threads.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Multi-run protocols: known_attack_cross, unknown_attack_loo,
    /// ablation_smad.
    Protocol {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Protocol kind (overrides config).
        #[arg(long)]
        kind: Option<String>,
    },
    /// Generate a synthetic dataset directory (manifest + images).
    GenData {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Image container: bin (lossless f64) or pgm (8-bit).
        #[arg(long, default_value = "bin")]
        format: String,
    },
    /// Metrics-only mode: evaluate an existing score CSV.
    Metrics {
        #[command(flatten)]
        common: CommonOpts,
        /// Score CSV (pair_id,label,score,tool_tag).
        #[arg(long)]
        scores: PathBuf,
        /// Also write a DET plot (det.svg).
        #[arg(long)]
        svg: bool,
    },
}

fn load_config(common: &CommonOpts, overrides: Option<&TrainOverrides>) -> dmad_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::benchmark_default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(o) = overrides {
        if let Some(v) = o.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = o.rank {
            cfg.lora.rank = v;
        }
        if let Some(v) = o.alpha {
            cfg.lora.alpha = v;
        }
        if let Some(v) = o.dropout {
            cfg.lora.dropout = v;
        }
        if let Some(v) = &o.mode {
            cfg.model.mode = v.clone();
        }
        if let Some(v) = &o.artefact {
            cfg.data.artefact = v.clone();
        }
        if let Some(v) = o.identities {
            cfg.data.num_identities = v;
        }
        if let Some(v) = o.data_seed {
            cfg.data.seed = v;
        }
    }
    Ok(cfg)
}

fn source_from(data_dir: &Option<PathBuf>) -> DataSource {
    match data_dir {
        Some(d) => DataSource::Dir(d.clone()),
        None => DataSource::Synth,
    }
}

fn run() -> dmad_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            common,
            overrides,
            data_dir,
        } => {
            let cfg = load_config(&common, Some(&overrides))?;
            let out = resolve_output_dir(common.out.as_deref(), cfg.output_dir.as_deref(), "train");
            let outcome = run_train(&cfg, &source_from(&data_dir), &out)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("loss trace: {}", outcome.loss_csv.display());
            println!("final mean loss: {}", outcome.final_loss);
        }
        Command::Eval {
            common,
            overrides,
            checkpoint,
            data_dir,
            svg,
        } => {
            let cfg = load_config(&common, Some(&overrides))?;
            let out = resolve_output_dir(common.out.as_deref(), cfg.output_dir.as_deref(), "eval");
            let outcome = run_eval(&checkpoint, &cfg, &source_from(&data_dir), &out, svg)?;
            println!("scores: {}", outcome.scores_csv.display());
            println!("report: {}", outcome.report_txt.display());
            println!("d_eer_percent={}", outcome.report.d_eer);
            for b in &outcome.report.bscer_at {
                println!("bscer_at_macer_{}_percent={}", b.macer_target as u32, b.bscer);
            }
        }
        Command::Grid {
            common,
            overrides,
            parallel,
        } => {
            let cfg = load_config(&common, Some(&overrides))?;
            let out = resolve_output_dir(common.out.as_deref(), cfg.output_dir.as_deref(), "grid");
            let rows = run_grid(&cfg, &out, parallel)?;
            println!("grid table: {}", out.join("grid.csv").display());
            if let Some(best) = rows.iter().find(|r| r.best) {
                println!(
                    "best: r={} alpha={} dropout={} mean_d_eer={}",
                    best.rank, best.alpha, best.dropout, best.mean[0]
                );
            }
        }
        Command::Protocol {
            common,
            overrides,
            kind,
        } => {
            let mut cfg = load_config(&common, Some(&overrides))?;
            if let Some(k) = kind {
                cfg.protocol.kind = k;
            }
            let out = resolve_output_dir(common.out.as_deref(), cfg.output_dir.as_deref(), "protocol");
            let outcome = run_protocol(&cfg, &out)?;
            for row in &outcome.rows {
                println!(
                    "{} {} d_eer={} bscer10={} bscer20={} bscer100={}",
                    row.label,
                    row.direction,
                    row.metrics[0],
                    row.metrics[1],
                    row.metrics[2],
                    row.metrics[3]
                );
            }
        }
        Command::GenData {
            common,
            overrides,
            format,
        } => {
            let cfg = load_config(&common, Some(&overrides))?;
            let out = resolve_output_dir(common.out.as_deref(), cfg.output_dir.as_deref(), "dataset");
            let fmt = match format.as_str() {
                "bin" => ImageFormat::Bin,
                "pgm" => ImageFormat::Pgm,
                other => {
                    return Err(dmad_core::Error::Config(format!(
                        "unknown image format {other:?} (bin|pgm)"
                    )))
                }
            };
            run_gen_data(&cfg, &out, fmt)?;
            println!("dataset: {}", out.display());
        }
        Command::Metrics { common, scores, svg } => {
            let out = resolve_output_dir(common.out.as_deref(), None, "metrics");
            let outcome = run_metrics_file(&scores, &out, svg)?;
            println!("report: {}", outcome.report_txt.display());
            println!("d_eer_percent={}", outcome.report.d_eer);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
