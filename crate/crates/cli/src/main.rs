use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use for_core::config::RunConfig;
use for_core::par::Exec;
use for_core::pipeline::{self, EvalJob, PseudoLabelJob, TrainJob};
use for_core::training::DataSplit;
use for_core::Error;

#[derive(Parser)]
#[command(name = "for-retrieval", version, about = "Object-centric open-vocabulary image retrieval pipeline")]
struct Cli {
    /// Worker threads for data-parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (`section.key = value` lines). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => {
                let mut cfg = RunConfig::default();
                cfg.apply_env()?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: features, labels, text table and manifest per split.
    GenSynth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Only generate this split (`train` or `eval`).
        #[arg(long)]
        split: Option<DataSplit>,
    },
    /// Assign pseudo-labels with the frozen Cluster-CLIP branch.
    PseudoLabel {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        text_table: PathBuf,
        /// Manifest holding the reference attention weights.
        #[arg(long)]
        reference: PathBuf,
        /// Overrides `pseudo.threshold` (default 5e-4).
        #[arg(long)]
        threshold: Option<f64>,
        /// Overrides `cluster.n_clusters` (default 50).
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the SUM-CLIP head.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        text_table: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Where the final (or interrupted) checkpoint is written.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch metrics log (JSON lines); appended to when resuming.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint and exit once this many epochs are complete.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Embed a feature file with a trained head.
    Embed {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a flat index from an embeddings file.
    BuildIndex {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank images for one category.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text_table: PathBuf,
        #[arg(long)]
        category: String,
        #[arg(long, default_value_t = 50)]
        topk: usize,
    },
    /// Compute AP@k per category and mean AP per split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text_table: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Overrides `eval.k` (default 50).
        #[arg(long)]
        topk: Option<usize>,
        /// Checkpoint whose digest is recorded in the report.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn require(path: &Path) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        })
    }
}

fn fmt_ap(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let exec = if cli.threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    match cli.command {
        Command::GenSynth { config, out_dir, split } => {
            let cfg = config.load()?;
            for p in pipeline::gen_synth(&cfg, &out_dir, split)? {
                for f in [&p.features, &p.labels, &p.text_table, &p.manifest] {
                    println!("{}", f.display());
                }
            }
        }
        Command::PseudoLabel {
            config,
            features,
            text_table,
            reference,
            threshold,
            clusters,
            out,
        } => {
            for p in [&features, &text_table, &reference] {
                require(p)?;
            }
            let mut cfg = config.load()?;
            if let Some(t) = threshold {
                cfg.pseudo.threshold = t;
            }
            if let Some(c) = clusters {
                cfg.cluster.n_clusters = c;
            }
            let records = pipeline::pseudo_label(
                &PseudoLabelJob {
                    features: &features,
                    text_table: &text_table,
                    reference: &reference,
                    cluster: cfg.cluster,
                    pseudo: cfg.pseudo,
                    out: &out,
                },
                exec,
            )?;
            let total: usize = records.iter().map(|r| r.labels.len()).sum();
            println!("{} images, {total} pseudo-labels -> {}", records.len(), out.display());
        }
        Command::Train {
            config,
            features,
            labels,
            pseudo,
            text_table,
            reference,
            checkpoint,
            metrics,
            resume,
            stop_after_epoch,
        } => {
            for p in [&features, &labels, &pseudo, &text_table, &reference] {
                require(p)?;
            }
            let cfg = config.load()?;
            let ckpt = pipeline::train(
                &cfg,
                &TrainJob {
                    features: &features,
                    labels: &labels,
                    pseudo: &pseudo,
                    text_table: &text_table,
                    reference: &reference,
                    checkpoint: &checkpoint,
                    metrics: &metrics,
                    resume: resume.as_deref(),
                    stop_after: stop_after_epoch,
                },
                exec,
            )?;
            println!("epoch {} -> {}", ckpt.next_epoch, checkpoint.display());
        }
        Command::Embed { features, checkpoint, out } => {
            let rows = pipeline::embed(&features, &checkpoint, &out, exec)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::BuildIndex { embeddings, out } => {
            let index = pipeline::build_index(&embeddings, &out)?;
            println!("{} images, {} rows -> {}", index.n_images(), index.n_rows(), out.display());
        }
        Command::Query {
            index,
            text_table,
            category,
            topk,
        } => {
            if topk == 0 {
                return Err(Error::Config("--topk must be at least 1".into()));
            }
            for (id, score) in pipeline::query(&index, &text_table, &category, topk)? {
                println!("{id}\t{score:.6}");
            }
        }
        Command::Eval {
            config,
            index,
            text_table,
            labels,
            topk,
            checkpoint,
            out,
        } => {
            let cfg = config.load()?;
            let report = pipeline::eval(
                &EvalJob {
                    index: &index,
                    text_table: &text_table,
                    labels: &labels,
                    k: topk.unwrap_or(cfg.eval.k),
                    checkpoint: checkpoint.as_deref(),
                    out: out.as_deref(),
                },
                exec,
            )?;
            println!(
                "mAP@{} base {} novel {} all {}",
                report.k,
                fmt_ap(report.map_base),
                fmt_ap(report.map_novel),
                fmt_ap(report.map_all)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.is_input_error() { "input" } else { "internal" };
            let line = serde_json::json!({ "level": "error", "kind": kind, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
