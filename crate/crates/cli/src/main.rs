use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pseudoloop::backend::BackendDescriptor;
use pseudoloop::coco::{parse_dataset_unchecked, validate};
use pseudoloop::eval::evaluate_at;
use pseudoloop::merge::merge_pseudo_summarized;
use pseudoloop::pipeline::SweepParam;
use pseudoloop::sim::{SimulatorConfig, WorldParams, RNG_SCHEME};
use pseudoloop::{
    class_wise_nms, filter_by_score, merge_datasets, run_pipeline, sweep, to_pseudo_annotations, Dataset,
    Error, MergePolicy, PipelineConfig, PredictionSet, Result,
};

#[derive(Parser, Debug)]
#[command(name = "pseudoloop", version, about = "Pseudo-label self-training for few-shot detection")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Check a COCO annotation file and list every problem found
    Validate { file: PathBuf },
    /// Keep detections with score >= tau_s
    Filter {
        #[arg(long)]
        tau_s: f64,
        #[command(flatten)]
        io: PredIo,
    },
    /// Class-wise greedy non-maximum suppression
    Nms {
        #[arg(long)]
        tau_n: f64,
        #[command(flatten)]
        io: PredIo,
    },
    /// Merge predictions into a dataset as pseudo-labels, or merge two datasets
    Merge(MergeArgs),
    /// Evaluate predictions against ground truth (mAP@IoU)
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Emit the full JSON report (with PR curves) instead of a table
        #[arg(long)]
        json: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the self-training loop described by a TOML file
    Iterate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep one parameter over values and seeds on the simulator
    Sweep {
        /// tau_s, tau_n or rounds_T
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Base configuration; defaults apply when absent
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV destination (stdout when absent)
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic world directory
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        n_images: usize,
        #[arg(long, default_value_t = 3)]
        n_classes: usize,
        #[arg(long, default_value_t = 3)]
        min_instances: usize,
        #[arg(long, default_value_t = 8)]
        max_instances: usize,
        #[arg(long, default_value_t = 1)]
        k_shot: usize,
    },
}

#[derive(Args, Debug)]
struct PredIo {
    /// Prediction file (bare array or {round, detections})
    input: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    /// Dataset receiving the new annotations
    #[arg(long)]
    base: PathBuf,
    /// Predictions to add as pseudo-labels
    #[arg(long, conflicts_with = "with", required_unless_present = "with")]
    pseudo: Option<PathBuf>,
    /// Second dataset to append (external annotations)
    #[arg(long)]
    with: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    gt_suppression_iou: f64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// `iterate` configuration: data locations plus every pipeline setting at
/// the top level.
#[derive(Debug, Deserialize)]
struct RunSpec {
    /// Few-shot training set; with a simulator backend, the world's visible
    /// set is used when absent.
    train: Option<PathBuf>,
    /// Held-out set evaluated each round.
    query: Option<PathBuf>,
    run_dir: PathBuf,
    #[serde(flatten)]
    pipeline: PipelineConfig,
}

#[derive(Serialize)]
struct WorldManifest<'a> {
    rng_scheme: &'a str,
    world: &'a WorldParams,
    simulator: SimulatorConfig,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            let newline: &[u8] = if bytes.ends_with(b"\n") { b"" } else { b"\n" };
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.write_all(newline))
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn cmd_validate(file: &Path) -> Result<()> {
    let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
    let d = parse_dataset_unchecked(&bytes)?;
    let violations = validate(&d);
    for v in &violations {
        println!("{v}");
    }
    // Re-derive the categorized error so the exit reason is specific.
    d.check()?;
    println!(
        "ok: {} images, {} categories, {} annotations",
        d.images.len(),
        d.categories.len(),
        d.annotations.len()
    );
    Ok(())
}

fn cmd_merge(args: &MergeArgs) -> Result<()> {
    let base = Dataset::read(&args.base)?;
    let (merged, summary) = match (&args.pseudo, &args.with) {
        (Some(pred), _) => {
            let policy = MergePolicy { gt_suppression_iou: args.gt_suppression_iou, ..Default::default() };
            policy.check()?;
            let p = PredictionSet::read(pred)?;
            let pseudo = to_pseudo_annotations(&p, &base)?;
            let (merged, s) = merge_pseudo_summarized(&base, &pseudo, &policy)?;
            (merged, serde_json::to_value(s).expect("summary serializes"))
        }
        (None, Some(other)) => {
            let other = Dataset::read(other)?;
            let merged = merge_datasets(&base, &other)?;
            let s = serde_json::json!({
                "images": merged.images.len(),
                "categories": merged.categories.len(),
                "annotations": merged.annotations.len(),
            });
            (merged, s)
        }
        (None, None) => unreachable!("clap requires --pseudo or --with"),
    };
    emit(args.out.as_deref(), &merged.to_json())?;
    eprintln!("{summary}");
    Ok(())
}

fn cmd_iterate(config: &Path) -> Result<()> {
    let spec: RunSpec = read_config(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    let cfg = PipelineConfig { backend: anchor(&spec.pipeline.backend, base), ..spec.pipeline };
    cfg.check()?;

    let world = match &cfg.backend {
        BackendDescriptor::Simulator(s) => Some(Arc::new(s.load_world()?)),
        _ => None,
    };
    let d_fs = match (&spec.train, &world) {
        (Some(p), _) => Dataset::read(&resolve(p))?,
        (None, Some(w)) => w.visible_train.clone(),
        (None, None) => return Err(Error::InvalidConfig("`train` is required for this backend".into())),
    };
    let query = match (&spec.query, &world) {
        (Some(p), _) => Some(Dataset::read(&resolve(p))?),
        (None, Some(w)) => Some(w.query_gt.clone()),
        (None, None) => None,
    };
    let mut backend = cfg.backend.build(world, cfg.seed)?;
    let outcome = run_pipeline(
        &d_fs,
        &d_fs.image_ids(),
        &cfg,
        query.as_ref(),
        backend.as_mut(),
        Some(&resolve(&spec.run_dir)),
    )?;

    println!("{:>5} {:>6} {:>6} {:>6} {:>6} {:>7}", "round", "raw", "kept", "pseudo", "merged", "mAP@50");
    for r in &outcome.rounds {
        let c = r.counts;
        let map = r.eval.as_ref().map(|e| format!("{:.4}", e.map_50)).unwrap_or_else(|| "-".into());
        println!("{:>5} {:>6} {:>6} {:>6} {:>6} {:>7}", r.round, c.raw, c.after_nms, c.pseudo_kept, c.merged_total, map);
    }
    if let Some(f) = outcome.final_map() {
        println!("final mAP@50: {f:.4}");
    }
    Ok(())
}

/// Relative paths inside a config file are taken from the file's directory.
fn anchor(desc: &BackendDescriptor, base: &Path) -> BackendDescriptor {
    let join = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
    let mut desc = desc.clone();
    match &mut desc {
        BackendDescriptor::File { pattern } => *pattern = join(Path::new(pattern.as_str())).display().to_string(),
        BackendDescriptor::Command(c) => c.workdir = c.workdir.as_deref().map(join),
        BackendDescriptor::Simulator(s) => s.world_dir = s.world_dir.as_deref().map(join),
    }
    desc
}

fn cmd_sweep(param: &str, values: &[f64], seeds: u64, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let base_cfg = match config {
        Some(p) => {
            let cfg: PipelineConfig = read_config(p)?;
            PipelineConfig { backend: anchor(&cfg.backend, p.parent().unwrap_or(Path::new("."))), ..cfg }
        }
        None => PipelineConfig::default(),
    };
    let world = match &base_cfg.backend {
        BackendDescriptor::Simulator(s) => s.load_world()?,
        _ => return Err(Error::InvalidConfig("sweeps run on the simulator backend only".into())),
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let table = sweep(&base_cfg, param, values, &world, &seeds)?;
    emit(out, table.to_csv().as_bytes())?;
    eprint!("{}", table.summary_csv());
    Ok(())
}

fn cmd_simulate(out: &Path, params: WorldParams) -> Result<()> {
    let world = params.build()?;
    world.save(out)?;
    let manifest = WorldManifest {
        rng_scheme: RNG_SCHEME,
        world: &params,
        simulator: SimulatorConfig { seed: params.seed, ..Default::default() },
    };
    let path = out.join("config.json");
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {}: {} train images, {} query images, {} hidden / {} visible annotations",
        out.display(),
        world.hidden_gt.images.len(),
        world.query_gt.images.len(),
        world.hidden_gt.annotations.len(),
        world.visible_train.annotations.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Validate { file } => cmd_validate(&file),
        Cmd::Filter { tau_s, io } => {
            if !(0.0..=1.0).contains(&tau_s) {
                return Err(Error::InvalidConfig(format!("tau_s = {tau_s} outside [0, 1]")));
            }
            let p = PredictionSet::read(&io.input)?;
            emit(io.out.as_deref(), &filter_by_score(&p, tau_s).to_json())
        }
        Cmd::Nms { tau_n, io } => {
            if !(0.0..=1.0).contains(&tau_n) {
                return Err(Error::InvalidConfig(format!("tau_n = {tau_n} outside [0, 1]")));
            }
            let p = PredictionSet::read(&io.input)?;
            emit(io.out.as_deref(), &class_wise_nms(&p, tau_n).to_json())
        }
        Cmd::Merge(args) => cmd_merge(&args),
        Cmd::Eval { gt, pred, iou, json, out } => {
            if !(0.0..=1.0).contains(&iou) {
                return Err(Error::InvalidConfig(format!("iou = {iou} outside [0, 1]")));
            }
            let report = evaluate_at(&Dataset::read(&gt)?, &PredictionSet::read(&pred)?, iou)?;
            if json {
                emit(out.as_deref(), &report.to_json())
            } else {
                emit(out.as_deref(), report.to_table().as_bytes())
            }
        }
        Cmd::Iterate { config } => cmd_iterate(&config),
        Cmd::Sweep { param, values, seeds, config, out } => {
            cmd_sweep(&param, &values, seeds, config.as_deref(), out.as_deref())
        }
        Cmd::Simulate { out, seed, n_images, n_classes, min_instances, max_instances, k_shot } => cmd_simulate(
            &out,
            WorldParams { n_images, n_classes, min_instances, max_instances, k_shot, seed },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(3);
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
