use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reid_core::eval::{ablation_grid, Axis};
use reid_core::linalg::Scalar;
use reid_core::pipeline::stages::{read_eval_output, run_stage};
use reid_core::pipeline::{run_pipeline, PipelineConfig, Precision, Stage, Workspace};
use reid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "reid", version, about = "Unsupervised person re-identification on synthetic multi-camera streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML config; defaults are used for anything it omits
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Single worker, sequential execution
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads (0 = one per core)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,

    /// Replace existing artifacts
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval streams
    Simulate,
    /// Train the encoder with instance discrimination
    TrainCid,
    /// Embed the training stream
    Extract,
    /// Link detections into tracklets
    Trackletize,
    /// Fine-tune on tracklet pairs
    TrainTsd,
    /// Fit the camera classifier and its projector
    FitCcr,
    /// Evaluate with and without the projector
    Eval,
    /// Sweep one axis and print a table
    Ablate {
        /// steps, min_len, data_fraction or model_size
        #[arg(long)]
        axis: String,
        /// Comma-separated grid overriding the default (model_size: widths joined by 'x')
        #[arg(long)]
        values: Option<String>,
    },
    /// All stages in order
    Run,
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(p) = &g.precision {
        cfg.precision = p.parse()?;
    }
    cfg.deterministic |= g.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn init_workers(cfg: &PipelineConfig) {
    let threads = if cfg.deterministic { 1 } else { cfg.workers };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("worker pool already configured: {e}");
    }
}

fn parse_list<V: std::str::FromStr>(s: &str) -> Result<Vec<V>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse grid value {v:?}")))
        })
        .collect()
}

fn parse_axis(name: &str, values: Option<&str>) -> Result<Axis> {
    let axis = match (name, values) {
        (_, None) | ("steps", _) => name.parse()?,
        ("min_len", Some(v)) => Axis::MinLen(parse_list(v)?),
        ("data_fraction", Some(v)) => Axis::DataFraction(parse_list(v)?),
        ("model_size", Some(v)) => Axis::ModelSize(
            v.split(',')
                .map(|h| parse_list(&h.replace('x', ",")))
                .collect::<Result<_>>()?,
        ),
        (other, _) => other.parse()?,
    };
    axis.validate()?;
    Ok(axis)
}

/// Prints to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

fn write_new(path: &Path, text: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ablate<T: Scalar>(cfg: &PipelineConfig, axis: &Axis, out: &Path, force: bool) -> Result<()> {
    let table = ablation_grid::<T>(cfg, axis)?;
    let dir = out.join(format!("ablate_{}", axis.name()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_new(&dir.join("table.txt"), &table.to_text(), force)?;
    write_new(&dir.join("table.jsonl"), &table.to_jsonl(), force)?;
    write_new(&dir.join("series.tsv"), &table.to_series(), force)?;
    write_new(&dir.join("config.toml"), &cfg.to_toml(), force)?;
    emit(&table.to_text());
    Ok(())
}

fn dispatch<T: Scalar>(cmd: &Command, cfg: &PipelineConfig, ws: &Workspace) -> Result<()> {
    let stage = match cmd {
        Command::Simulate => Stage::Simulate,
        Command::TrainCid => Stage::TrainCid,
        Command::Extract => Stage::Extract,
        Command::Trackletize => Stage::Trackletize,
        Command::TrainTsd => Stage::TrainTsd,
        Command::FitCcr => Stage::FitCcr,
        Command::Eval => Stage::Eval,
        Command::Ablate { axis, values } => {
            let axis = parse_axis(axis, values.as_deref())?;
            return ablate::<T>(cfg, &axis, &ws.root, ws.force);
        }
        Command::Run => {
            let out = run_pipeline::<T>(ws, cfg)?;
            emit(&(serde_json::to_string(&out)? + "\n"));
            return Ok(());
        }
    };
    let status = run_stage::<T>(ws, cfg, stage)?;
    let mut record = serde_json::json!({
        "stage": stage.dir_name(),
        "status": format!("{status:?}").to_lowercase(),
        "dir": ws.stage_dir(stage),
    });
    if stage == Stage::Eval {
        record["report"] = serde_json::to_value(read_eval_output(ws)?)?;
    }
    emit(&format!("{record}\n"));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    init_workers(&cfg);
    let ws = Workspace::new(&cli.global.out, cli.global.force);
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(&cli.command, &cfg, &ws),
        Precision::F64 => dispatch::<f64>(&cli.command, &cfg, &ws),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
