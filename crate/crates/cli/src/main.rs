use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refground::config::CassetteMode;
use refground::eval::coco::convert_coco_refs;
use refground::eval::dataset::write_dataset;
use refground::eval::recall::{recall_csv, recall_curve, Sweep};
use refground::eval::runner::{run_bench, select_split, BenchOptions};
use refground::eval::{load_dataset, DEFAULT_RECALL_IOU};
use refground::gateway::cassette::scan_for_secrets;
use refground::scene::{generate_scenes, write_scene_set, GenOptions, SCENES_SUBDIR};
use refground::{normalize, AblationMode, ImagePayload, RunConfig};

#[derive(Parser)]
#[command(name = "refground", version, about = "Training-free referring-expression grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground one query in one image.
    Ground {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
    },
    /// Run the pipeline over a dataset and write a report.
    Bench(BenchArgs),
    /// Candidate-generation recall under a threshold or box-count sweep.
    Recall {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `confidence=0.1,0.3,0.5` or `max_boxes=5,10,20`.
        #[arg(long)]
        sweep: Sweep,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = DEFAULT_RECALL_IOU)]
        recall_iou: f64,
    },
    /// Generate synthetic scenes, datasets and an oracle config.
    GenScenes {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n", default_value_t = 10)]
        n_scenes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        width: u32,
        #[arg(long, default_value_t = 192)]
        height: u32,
        #[arg(long, default_value_t = 0.0)]
        small_target_fraction: f64,
        #[arg(long, default_value_t = 0.15)]
        small_distractor_prob: f64,
    },
    /// Bench while recording every model interaction to a cassette.
    Record(CassetteArgs),
    /// Bench strictly from a cassette; no backend is contacted.
    Replay(CassetteArgs),
    /// Convert a COCO-style referring-expression export to a dataset file.
    ConvertCoco {
        #[arg(long)]
        input: PathBuf,
        /// Prefix for image file names in the output.
        #[arg(long, default_value = "")]
        image_dir: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Report path; `.csv` writes CSV, anything else JSON lines.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "caption")]
    mode: AblationMode,
    #[arg(long)]
    split: Option<String>,
    /// Skip samples already in the checkpoint of an interrupted run.
    #[arg(long)]
    resume: bool,
    /// Keep per-stage wall-clock timings in the report.
    #[arg(long)]
    timings: bool,
    /// Abort on the first failing sample.
    #[arg(long)]
    fail_fast: bool,
    #[arg(long, default_value_t = DEFAULT_RECALL_IOU)]
    recall_iou: f64,
}

#[derive(Args)]
struct CassetteArgs {
    #[command(flatten)]
    bench: BenchArgs,
    /// Cassette file; defaults to `<report>.cassette.jsonl`.
    #[arg(long)]
    cassette: Option<PathBuf>,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    init_threads(cfg.runtime.threads);
    Ok(cfg)
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn cmd_ground(config: &Path, image: &Path, query: &str) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let agent = cfg.build_agent()?;
    let payload = ImagePayload::load(image).with_context(|| format!("image {}", image.display()))?;
    let result = agent
        .ground(&payload, query)
        .map_err(|e| anyhow::anyhow!("{} stage: {e}", e.stage()))?;
    match result.predicted_box {
        Some(b) => {
            println!("box: {b}");
            println!("normalized: {}", normalize(&b, payload.dims()));
        }
        None => {
            println!("box: none");
            println!("normalized: none");
        }
    }
    println!("rejected: {}", result.rejected);
    if let Some(reason) = result.rejection_reason {
        println!("rejection_reason: {}", reason.as_str());
    }
    println!("concepts: {}", result.concepts.as_slice().join(", "));
    println!("candidates: {}", result.candidate_set.candidates.len());
    println!("trace:");
    println!("{}", result.trace.raw_text);
    Ok(if result.rejected { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn bench_with(cfg: &RunConfig, args: &BenchArgs, fail_fast: bool) -> Result<()> {
    let agent = cfg.build_agent()?;
    let records = load_dataset(&args.dataset)?;
    let (split, records) = select_split(records, args.split.as_deref())?;
    let opts = BenchOptions {
        mode: args.mode,
        recall_iou: args.recall_iou,
        include_timings: args.timings,
        resume: args.resume,
        fail_fast,
    };
    let (report, _) = run_bench(&agent, &records, &split, &args.report, &opts)?;
    println!(
        "accuracy={} recall={} rejection={}",
        report.accuracy, report.generation_recall, report.rejection_rate
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    bench_with(&cfg, args, args.fail_fast)
}

fn cassette_path(args: &CassetteArgs) -> PathBuf {
    args.cassette.clone().unwrap_or_else(|| {
        let mut name = args.bench.report.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".cassette.jsonl");
        args.bench.report.with_file_name(name)
    })
}

fn cmd_record(args: &CassetteArgs) -> Result<()> {
    let mut cfg = load_config(&args.bench.config)?;
    let path = cassette_path(args);
    cfg.cassette.mode = CassetteMode::Record;
    cfg.cassette.path = Some(path.clone());
    bench_with(&cfg, &args.bench, args.bench.fail_fast)?;
    let leaked = scan_for_secrets(&path, &cfg.secret_env_names())?;
    if !leaked.is_empty() {
        bail!("cassette {} contains the value of {}", path.display(), leaked.join(", "));
    }
    eprintln!("cassette: {}", path.display());
    Ok(())
}

fn cmd_replay(args: &CassetteArgs) -> Result<()> {
    let mut cfg = load_config(&args.bench.config)?;
    cfg.cassette.mode = CassetteMode::Replay;
    cfg.cassette.path = Some(cassette_path(args));
    // A cassette miss must surface rather than be scored as a miss.
    bench_with(&cfg, &args.bench, true)
}

fn cmd_recall(
    config: &Path,
    dataset: &Path,
    sweep: &Sweep,
    out: Option<&Path>,
    split: Option<&str>,
    recall_iou: f64,
) -> Result<()> {
    let cfg = load_config(config)?;
    let agent = cfg.build_agent()?;
    let (_, records) = select_split(load_dataset(dataset)?, split)?;
    let rows = recall_curve(&agent, &records, sweep, recall_iou)?;
    let table = recall_csv(&rows)?;
    match out {
        Some(p) => fs::write(p, table).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_gen_scenes(opts: &GenOptions, out: &Path) -> Result<()> {
    if opts.width < 64 || opts.height < 64 {
        bail!("scenes must be at least 64x64 pixels");
    }
    for (name, v) in [
        ("small-target-fraction", opts.small_target_fraction),
        ("small-distractor-prob", opts.small_distractor_prob),
    ] {
        if !(0.0..=1.0).contains(&v) {
            bail!("--{name} must be in [0, 1], got {v}");
        }
    }
    let scenes = generate_scenes(opts);
    write_scene_set(out, &scenes)?;
    let path = out.join("config.toml");
    let text = format!(
        "seed = {}\n\n\
         [backends.llm]\nbackend = \"oracle\"\n\n\
         [backends.mllm]\nbackend = \"oracle\"\n\n\
         [backends.detector]\nbackend = \"oracle\"\n\n\
         [oracle]\nscenes_dir = \"{SCENES_SUBDIR}\"\ncorruption_rate = 0.0\n",
        opts.seed
    );
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    RunConfig::load(&path)?;
    let small = scenes.iter().filter(|s| !s.manifest.metadata.small_object_ids.is_empty()).count();
    eprintln!("wrote {} scenes ({small} with sub-threshold objects) to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_convert_coco(input: &Path, image_dir: &str, out: &Path) -> Result<()> {
    let json = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let records = convert_coco_refs(&json, image_dir)?;
    write_dataset(out, &records)?;
    eprintln!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ground { config, image, query } => return cmd_ground(&config, &image, &query),
        Command::Bench(args) => cmd_bench(&args)?,
        Command::Recall {
            config,
            dataset,
            sweep,
            out,
            split,
            recall_iou,
        } => cmd_recall(&config, &dataset, &sweep, out.as_deref(), split.as_deref(), recall_iou)?,
        Command::GenScenes {
            seed,
            n_scenes,
            out,
            width,
            height,
            small_target_fraction,
            small_distractor_prob,
        } => {
            let opts = GenOptions {
                seed,
                n_scenes,
                width,
                height,
                small_target_fraction,
                small_distractor_prob,
            };
            cmd_gen_scenes(&opts, &out)?
        }
        Command::Record(args) => cmd_record(&args)?,
        Command::Replay(args) => cmd_replay(&args)?,
        Command::ConvertCoco { input, image_dir, out } => cmd_convert_coco(&input, &image_dir, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
