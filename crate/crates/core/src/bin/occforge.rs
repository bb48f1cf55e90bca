//! Builds an occluded copy of a dataset from its human-parsing maps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ocreid::data::{load_dataset, Layout};
use ocreid::occlusion::{build_occluded_dataset, LabelTable, OcclusionConfig};

#[derive(Parser, Debug)]
#[command(version, about = "Synthesise an occluded dataset from parsing maps")]
struct Args {
    /// Source dataset root.
    #[arg(long)]
    src: PathBuf,
    /// Root holding `parsing/<rel>.png`; defaults to the source root.
    #[arg(long)]
    parsing: Option<PathBuf>,
    /// Output root; receives images, manifest.csv and stats.json.
    #[arg(long)]
    dst: PathBuf,
    #[arg(long, default_value_t = 4)]
    pool_size: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// manifest, prcc_like, ltcc_like or synthetic.
    #[arg(long, default_value = "manifest")]
    layout: Layout,
    /// `pascal`, `lip`, or a JSON file mapping raw labels to components.
    #[arg(long, default_value = "pascal")]
    label_table: String,
    /// Fill colour as r,g,b in [0,1].
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    fill: Vec<f32>,
}

fn run(args: Args) -> ocreid::Result<()> {
    let index = load_dataset(&args.src, args.layout)?;
    let cfg = OcclusionConfig {
        pool_size: args.pool_size,
        binarize_threshold: args.threshold,
        fill_value: [args.fill[0], args.fill[1], args.fill[2]],
        seed: args.seed,
        label_table: LabelTable::resolve(&args.label_table)?,
    };
    let parsing = args.parsing.unwrap_or_else(|| args.src.clone());
    let stats = build_occluded_dataset(&index, &parsing, &args.dst, &cfg)?;
    log::info!(
        "{} occluded, {} copied unchanged; stats in {}",
        stats.num_processed,
        stats.num_skipped,
        args.dst.join("stats.json").display()
    );
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("occforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
