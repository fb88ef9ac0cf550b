//! `tailrec` command-line tool: ingest an interaction log, pre-train a
//! sequential recommender, fit the tail-embedding inference function and
//! evaluate, all inside one run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tailrec::dataset::{write_csv, Format};
use tailrec::model::Variant;
use tailrec::pipeline::{self, BaselineKind, PipelineConfig, PipelineError, RunManifest, SweepParam};
use tailrec::synthetic::{generate, SyntheticConfig};

#[derive(Parser, Debug)]
#[command(name = "tailrec", version, about = "Sequential recommendation with inferred tail-item embeddings")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured run directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the configured encoder
    #[arg(long, global = true)]
    variant: Option<Variant>,

    /// More log output (repeat for debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read the interaction log and store the catalog and split
    Ingest {
        /// Overrides the configured data path
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        format: Option<Format>,
    },
    /// Pre-train the recommender
    Pretrain {
        /// Continue from the last epoch snapshot of the same run
        #[arg(long)]
        resume: bool,
    },
    /// Fit the inference function on head items
    TrainCities {
        /// Recommender checkpoint (default: latest in the run directory)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Replace tail embeddings and report metrics before and after
    ApplyEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Inference checkpoint (default: latest in the run directory)
        #[arg(long)]
        inference: Option<PathBuf>,
    },
    /// Evaluate POP, S-POP, FOMC or popularity re-ranking
    Baseline {
        kind: BaselineKind,
        /// Base recommender for `rerank`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// HR@10 over all items as a function of tau or kappa
    Sweep {
        param: SweepParam,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// For kappa sweeps; fitted at the configured tau when omitted
        #[arg(long)]
        inference: Option<PathBuf>,
    },
    /// Infer embeddings for items absent from training
    NewItem {
        /// JSON file listing each new item's context windows
        #[arg(long)]
        context: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        inference: Option<PathBuf>,
    },
    /// Write the item embedding table as CSV
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also replace tail rows with inferred embeddings
        #[arg(long)]
        inference: Option<PathBuf>,
    },
    /// Write a synthetic long-tail interaction log
    Generate {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 1.2)]
        zipf: f64,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(v) = cli.variant {
        cfg.model.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Explicit path, or the newest artifact of `kind` in the run directory.
fn artifact(given: &Option<PathBuf>, dir: &Path, kind: &str) -> Result<PathBuf, PipelineError> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    let mp = dir.join("manifest.json");
    let manifest: RunManifest = match std::fs::read(&mp) {
        Ok(b) => serde_json::from_slice(&b).map_err(|e| PipelineError::Data(format!("{}: {e}", mp.display())))?,
        Err(_) => RunManifest::default(),
    };
    manifest
        .artifacts
        .iter()
        .rev()
        .find(|a| a.kind == kind)
        .map(|a| dir.join(&a.path))
        .ok_or_else(|| PipelineError::Data(format!("no {kind} artifact in {}; pass it explicitly", dir.display())))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Command::Generate { output, users, items, zipf } = &cli.command {
        let cfg = SyntheticConfig {
            users: *users,
            items: *items,
            zipf_s: *zipf,
            seed: cli.seed.unwrap_or(SyntheticConfig::default().seed),
            ..SyntheticConfig::default()
        };
        let corpus = generate(&cfg)?;
        let f = std::fs::File::create(output).map_err(|e| PipelineError::io(output, e))?;
        write_csv(f, &corpus.interactions)?;
        println!("wrote {} interactions to {}", corpus.interactions.len(), output.display());
        return Ok(());
    }

    let mut cfg = config(&cli)?;
    let dir = cfg.out_dir.clone();
    match &cli.command {
        Command::Ingest { data, format } => {
            if let Some(d) = data {
                cfg.data.path = d.clone();
            }
            if let Some(f) = format {
                cfg.data.format = *f;
            }
            let (path, store) = pipeline::ingest(&cfg)?;
            println!("{}", pipeline::format_stats(&store.stats));
            println!("dataset hash {}", store.dataset_hash);
            println!("store {}", path.display());
        }
        Command::Pretrain { resume } => {
            let out = pipeline::pretrain(&cfg, *resume)?;
            if let Some(best) = out.metrics.iter().max_by(|a, b| a.val_mrr.total_cmp(&b.val_mrr)) {
                println!("best epoch {}: val HR@10 {:.4} MRR {:.4}", best.epoch, best.val_hr10, best.val_mrr);
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::TrainCities { checkpoint } => {
            let ck = artifact(checkpoint, &dir, "recommender")?;
            let out = pipeline::train_inference(&cfg, &ck)?;
            if let Some(last) = out.report.curve.last() {
                println!("final mean squared distance {last:.5} over {} targets", out.report.targets.len());
            }
            println!("inference {}", out.inference.display());
        }
        Command::ApplyEval { checkpoint, inference } => {
            let ck = artifact(checkpoint, &dir, "recommender")?;
            let inf = artifact(inference, &dir, "inference")?;
            let out = pipeline::apply_eval(&cfg, &ck, &inf)?;
            println!("group  HR@10 before  after");
            for (g, b, a) in [
                ("head", out.before.head.hr10, out.after.head.hr10),
                ("tail", out.before.tail.hr10, out.after.tail.hr10),
                ("all", out.before.all.hr10, out.after.all.hr10),
            ] {
                println!("{g:<6} {b:>12.4} {a:>6.4}");
            }
            println!("before {}", out.before_path.display());
            println!("after  {}", out.after_path.display());
            println!("delta  {}", out.delta_path.display());
        }
        Command::Baseline { kind, checkpoint } => {
            let ck = match (kind, checkpoint) {
                (BaselineKind::Rerank, _) => Some(artifact(checkpoint, &dir, "recommender")?),
                (_, c) => c.clone(),
            };
            let (path, r) = pipeline::baseline(&cfg, *kind, ck.as_deref())?;
            println!("HR@10 head {:.4} tail {:.4} all {:.4}", r.head.hr10, r.tail.hr10, r.all.hr10);
            println!("report {}", path.display());
        }
        Command::Sweep { param, values, checkpoint, inference } => {
            let ck = artifact(checkpoint, &dir, "recommender")?;
            let (path, curve) = pipeline::sweep(&cfg, *param, values, &ck, inference.as_deref())?;
            for (v, h) in curve {
                println!("{v}\t{h:.4}");
            }
            println!("curve {}", path.display());
        }
        Command::NewItem { context, checkpoint, inference } => {
            let ck = artifact(checkpoint, &dir, "recommender")?;
            let inf = artifact(inference, &dir, "inference")?;
            let out = pipeline::new_item(&cfg, &ck, &inf, context)?;
            for (name, e) in &out.embeddings {
                println!("{name} -> index {}", e.item);
            }
            if let Some(r) = &out.report {
                println!("new-item HR@10 {:.4} MRR {:.4} over {} cases", r.tail.hr10, r.tail.mrr, r.tail.support);
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::ExportEmbeddings { checkpoint, inference } => {
            let ck = artifact(checkpoint, &dir, "recommender")?;
            let path = pipeline::export_embeddings(&cfg, &ck, inference.as_deref())?;
            println!("embeddings {}", path.display());
        }
        Command::Generate { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
