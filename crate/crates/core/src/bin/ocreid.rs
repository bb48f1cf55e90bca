use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ocreid::data::synth::{generate_synthetic_dataset, SynthSpec};
use ocreid::data::Layout;
use ocreid::eval::Protocol;
use ocreid::train::{self, EvalRequest, SweepParam, SweepSpec, TrainConfig};
use ocreid::{Error, Result};

#[derive(Parser, Debug)]
#[command(version, about = "Occluded cloth-changing re-identification: train, evaluate, sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a JSON config; outputs go to a fresh run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score a checkpoint on the query/gallery splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "prcc_cc")]
        protocol: Protocol,
        #[arg(long, default_value_t = 0.35)]
        lambda: f64,
        /// Dataset root; defaults to the one in the run's config.json.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        layout: Option<Layout>,
        /// Take queries from another root (e.g. clean queries, occluded gallery).
        #[arg(long)]
        query_root: Option<PathBuf>,
        /// Directory for eval_report.json; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the raw distance matrix here.
        #[arg(long)]
        distmat: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        max_rank: usize,
    },
    /// Sensitivity sweep over lambda or k; writes sweep.csv and sweep.svg.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
        /// Base training config; defaults to the config.json beside --ckpt.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reuse a trained model for lambda sweeps instead of training one.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render a synthetic dataset with parsing maps and a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        ids: usize,
        #[arg(long, default_value_t = 2)]
        clothes: usize,
        #[arg(long, default_value_t = 10)]
        images: usize,
        #[arg(long, default_value_t = 0.0)]
        occluder_prob: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Summarise a train_log.csv into summary.json beside it.
    ExportMetrics {
        #[arg(long)]
        log: PathBuf,
    },
}

fn config_beside(ckpt: &Path) -> Result<TrainConfig> {
    let path = ckpt.parent().unwrap_or(Path::new(".")).join(train::CONFIG_FILE);
    TrainConfig::from_json_file(&path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, epochs, output_dir } => {
            let mut cfg = TrainConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.total_epochs = e;
                cfg.lr_decay_epochs.retain(|&d| d < e);
            }
            if let Some(o) = output_dir {
                cfg.output_dir = o;
            }
            let outcome = train::train(&cfg)?;
            println!("run directory: {}", outcome.run_dir.display());
            if let Some(r) = outcome.report {
                println!("{}: rank1 {:.4}  mAP {:.4}", r.protocol, r.rank1, r.map);
            }
        }
        Command::Eval { ckpt, protocol, lambda, data, layout, query_root, out, distmat, max_rank } => {
            let (dataset_root, default_layout) = match data {
                Some(d) => (d, Layout::Manifest),
                None => {
                    let cfg = config_beside(&ckpt)?;
                    (cfg.dataset_root, cfg.layout)
                }
            };
            let req = EvalRequest {
                checkpoint: ckpt.clone(),
                dataset_root,
                layout: layout.unwrap_or(default_layout),
                query_root,
                protocol,
                lambda,
                max_rank,
            };
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
            let r = train::evaluate(&req, &out, distmat.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Sweep { param, from, to, step, config, ckpt, out, epochs } => {
            let mut cfg = match (&config, &ckpt) {
                (Some(c), _) => TrainConfig::from_json_file(c)?,
                (None, Some(k)) => config_beside(k)?,
                (None, None) => return Err(Error::Config("sweep needs --config or --ckpt".into())),
            };
            if let Some(e) = epochs {
                cfg.total_epochs = e;
                cfg.lr_decay_epochs.retain(|&d| d < e);
            }
            let out_dir = match out {
                Some(o) => o,
                None => train::make_run_dir(&cfg.output_dir, cfg.seed)?,
            };
            let spec = SweepSpec { parameter: param, values: train::grid(from, to, step)?, out_dir };
            let rows = train::sweep(&spec, &cfg, ckpt.as_deref())?;
            for r in &rows {
                match (&r.rank1, &r.map, &r.error) {
                    (Some(a), Some(b), _) => println!("{}={:<6} rank1 {a:.4}  mAP {b:.4}", r.param, r.value),
                    (_, _, e) => println!("{}={:<6} error: {}", r.param, r.value, e.as_deref().unwrap_or("?")),
                }
            }
            println!("wrote {}", spec.out_dir.join(train::SWEEP_CSV).display());
        }
        Command::SynthData { out, ids, clothes, images, occluder_prob, seed } => {
            let spec = SynthSpec { occluder_prob, ..SynthSpec::new(ids, clothes, images) };
            let report = generate_synthetic_dataset(&spec, seed, &out)?;
            println!("{} records written to {}", report.index.records.len(), out.display());
        }
        Command::ExportMetrics { log } => {
            let s = train::export_metrics(&log)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ocreid: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
