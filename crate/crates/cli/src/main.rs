use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use posegrid::anchors::{cluster_anchors_with_history, AnchorGrid, AnchorSet, DEFAULT_NUM_ANCHORS};
use posegrid::decode::{read_detections, write_detections, DetectionRecord};
use posegrid::metrics::{evaluate, render_tables, EvalReport, PCK_THRESHOLD_MM};
use posegrid::synthdata::{generate_dataset, load_dataset, save_dataset, Camera, SceneConfig, SceneSample, Skeleton};
use posegrid::train::{
    checkpoint_path, infer_dataset, load_history, save_history, Checkpoint, DirectPredictor, TrainConfig, Trainer,
};

mod plot;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Anchor-based multi-person 2D/3D pose estimation on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "posegrid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cluster box sizes of a dataset into anchor priors.
    GenAnchors(GenAnchorsArgs),
    /// Generate a synthetic multi-person dataset.
    SynthData(SynthDataArgs),
    /// Fit a per-scene predictor table to a dataset.
    Train(TrainArgs),
    /// Decode and NMS-filter a trained table into detections.
    Infer(InferArgs),
    /// Score detections against a dataset (AP, MPJPE, 3DPCK).
    Eval(EvalArgs),
    /// Render a training history or an evaluation report as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenAnchorsArgs {
    /// Dataset JSONL file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NUM_ANCHORS)]
    n_anchors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Output anchor JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 2)]
    people_min: usize,
    #[arg(long, default_value_t = 8)]
    people_max: usize,
    /// Nearest root depth, meters.
    #[arg(long, default_value_t = 3.0)]
    depth_min: f64,
    /// Farthest root depth, meters.
    #[arg(long, default_value_t = 45.0)]
    depth_max: f64,
    /// Probability that a joint inside a nearer person's extent is hidden.
    #[arg(long, default_value_t = 0.3)]
    occlusion: f64,
    #[arg(long, default_value_t = 640)]
    width: u32,
    #[arg(long, default_value_t = 384)]
    height: u32,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 560.0)]
    focal: f64,
    /// Output dataset JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Anchor JSON file; clustered from the dataset when omitted.
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its stored config is used).
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Directory for checkpoints, history.jsonl, anchors.json and config.txt.
    #[arg(long)]
    out_dir: PathBuf,
    /// Total steps, also the decay horizon [default: 5000]
    #[arg(long)]
    steps: Option<u64>,
    /// Initial learning rate [default: 0.005]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Polynomial decay power [default: 0.9]
    #[arg(long)]
    power: Option<f64>,
    /// Scenes per step [default: 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Shuffling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Grid stride in pixels [default: 8]
    #[arg(long)]
    stride: Option<usize>,
    /// Anchors to cluster when --anchors is omitted [default: 10]
    #[arg(long)]
    n_anchors: Option<usize>,
    /// Initial detection probability of every anchor [default: 0.01]
    #[arg(long)]
    cls_prior: Option<f64>,
    /// Checkpoint interval in steps, 0 for final only [default: 0]
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Log interval in steps, 0 for silent [default: 100]
    #[arg(long)]
    log_every: Option<u64>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("steps", self.steps.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("momentum", self.momentum.map(|v| v.to_string()));
        put("power", self.power.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("stride", self.stride.map(|v| v.to_string()));
        put("n_anchors", self.n_anchors.map(|v| v.to_string()));
        put("cls_prior", self.cls_prior.map(|v| v.to_string()));
        put("checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        put("log_every", self.log_every.map(|v| v.to_string()));
        out
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The dataset the checkpoint was trained on.
    #[arg(long)]
    dataset: PathBuf,
    /// Anchor JSON file used in training.
    #[arg(long)]
    anchors: PathBuf,
    /// Overrides the checkpoint's score threshold [default: 0.3]
    #[arg(long)]
    score_threshold: Option<f64>,
    /// Overrides the checkpoint's NMS IoU threshold [default: 0.5]
    #[arg(long)]
    nms_threshold: Option<f64>,
    /// Output detections JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = PCK_THRESHOLD_MM)]
    pck_threshold: f64,
    /// Output report JSON file; tables go to stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).args(["history", "report"])))]
struct PlotArgs {
    /// Training history JSONL; renders loss curves.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Evaluation report JSON; renders 3DPCK by distance.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<posegrid::Error> for CliError {
    fn from(e: posegrid::Error) -> Self {
        use posegrid::Error as E;
        let (code, kind) = match &e {
            E::Io { .. } => (EXIT_IO, "io"),
            E::Parse { .. } | E::SchemaVersion { .. } | E::Json(_) => (EXIT_IO, "format"),
            E::Numeric(_) | E::Degenerate(_) => (EXIT_NUMERIC, "numeric"),
            E::InvalidInput(_) | E::ShapeMismatch(_) | E::OutOfRange(_) => (EXIT_USAGE, "invalid"),
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError {
        code: EXIT_IO,
        kind: "io",
        message: format!("{}: {e}", path.display()),
    })
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_IO,
        kind: "io",
        message: format!("{}: {e}", path.display()),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail(CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

/// Prints the error as one JSON line on stderr.
fn fail(e: CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind, "exit_code": e.code, "message": e.message });
    eprintln!("{line}");
    ExitCode::from(e.code)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenAnchors(a) => gen_anchors(a),
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn dataset_boxes(data: &[SceneSample]) -> Vec<posegrid::geometry::Box2D> {
    data.iter().flat_map(|s| s.people.iter().map(|p| p.bbox)).collect()
}

fn gen_anchors(a: GenAnchorsArgs) -> CliResult<()> {
    let data = load_dataset(&a.dataset)?;
    let boxes = dataset_boxes(&data);
    if boxes.is_empty() {
        return Err(CliError::usage(format!("{} contains no people", a.dataset.display())));
    }
    let c = cluster_anchors_with_history(&boxes, a.n_anchors, a.max_iters, a.seed)?;
    c.anchors.save(&a.out)?;
    println!("anchors={} boxes={} mean_best_iou={:.6}", c.anchors.len(), boxes.len(), c.mean_iou());
    Ok(())
}

fn synth_data(a: SynthDataArgs) -> CliResult<()> {
    let camera = Camera {
        fx: a.focal,
        fy: a.focal,
        cx: a.width as f64 / 2.0,
        cy: a.height as f64 / 2.0,
        width: a.width,
        height: a.height,
    };
    let cfg = SceneConfig {
        people_min: a.people_min,
        people_max: a.people_max,
        depth_min: a.depth_min,
        depth_max: a.depth_max,
        occlusion_rate: a.occlusion,
        camera,
        ..SceneConfig::default()
    };
    let data = generate_dataset(a.seed, a.images, &cfg, &Skeleton::human15())?;
    save_dataset(&a.out, &data)?;
    let people: usize = data.iter().map(|s| s.people.len()).sum();
    println!("images={} people={}", data.len(), people);
    Ok(())
}

/// Grid over the dataset's common image size.
fn grid_for(data: &[SceneSample], stride: usize, priors: AnchorSet) -> CliResult<AnchorGrid> {
    let first = data
        .first()
        .ok_or_else(|| CliError::usage("dataset is empty"))?
        .camera;
    if data
        .iter()
        .any(|s| s.camera.width != first.width || s.camera.height != first.height)
    {
        return Err(CliError::usage("all images of a dataset must share one size"));
    }
    Ok(AnchorGrid::for_image(first.width, first.height, stride, priors)?)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let sk = Skeleton::human15();
    let data = load_dataset(&a.dataset)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError {
        code: EXIT_IO,
        kind: "io",
        message: format!("{}: {e}", a.out_dir.display()),
    })?;
    let overrides = a.overrides();

    let (config, resume) = match &a.resume {
        Some(path) => {
            if !overrides.is_empty() {
                return Err(CliError::usage("--resume uses the checkpoint's settings; drop the training flags"));
            }
            let ckpt = Checkpoint::<DirectPredictor>::load(path)?;
            (ckpt.config.clone(), Some(ckpt))
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for (k, v) in &overrides {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            (cfg, None)
        }
    };

    let priors = match &a.anchors {
        Some(p) => AnchorSet::load(p)?,
        None => {
            let boxes = dataset_boxes(&data);
            if boxes.is_empty() {
                return Err(CliError::usage("dataset contains no people to cluster anchors from"));
            }
            posegrid::anchors::cluster_anchors(&boxes, config.n_anchors, 100, config.seed)?
        }
    };
    priors.save(a.out_dir.join("anchors.json"))?;
    write_file(&a.out_dir.join("config.txt"), &config.to_text())?;
    let grid = grid_for(&data, config.stride, priors)?;

    let history_path = a.out_dir.join("history.jsonl");
    let (mut trainer, mut history) = match resume {
        Some(ckpt) => {
            let step = ckpt.optimizer.step;
            let previous = if history_path.exists() {
                load_history(&history_path)?
                    .into_iter()
                    .filter(|h| h.step < step)
                    .collect()
            } else {
                Vec::new()
            };
            (Trainer::from_checkpoint(ckpt, &data, grid, &sk)?, previous)
        }
        None => {
            let pred = DirectPredictor::new(&grid, sk.n_joints(), data.len(), config.cls_prior)?;
            (Trainer::new(config.clone(), pred, &data, grid, &sk)?, Vec::new())
        }
    };
    let outcome = trainer.run_until(u64::MAX, Some(&a.out_dir));
    history.extend(trainer.history.iter().cloned());
    save_history(&history_path, &history)?;
    outcome?;
    let last = history.last().map(|h| h.loss.total).unwrap_or(f64::NAN);
    println!(
        "steps={} final_total={last:.6} checkpoint={}",
        trainer.step_count(),
        checkpoint_path(&a.out_dir, trainer.step_count()).display()
    );
    Ok(())
}

fn infer(a: InferArgs) -> CliResult<()> {
    let ckpt = Checkpoint::<DirectPredictor>::load(&a.checkpoint)?;
    let data = load_dataset(&a.dataset)?;
    let grid = grid_for(&data, ckpt.config.stride, AnchorSet::load(&a.anchors)?)?;
    let p = &ckpt.predictor;
    if (p.height, p.width, p.n_anchors, p.n_scenes) != (grid.height(), grid.width(), grid.n_anchors(), data.len()) {
        return Err(CliError::usage(format!(
            "checkpoint holds {} scenes on a {}x{}x{} grid; dataset and anchors give {} scenes on {}x{}x{}",
            p.n_scenes,
            p.height,
            p.width,
            p.n_anchors,
            data.len(),
            grid.height(),
            grid.width(),
            grid.n_anchors()
        )));
    }
    let score = a.score_threshold.unwrap_or(ckpt.config.score_threshold);
    let nms = a.nms_threshold.unwrap_or(ckpt.config.nms_threshold);
    let records: Vec<DetectionRecord> = infer_dataset(p, &data, &grid, score, nms)?
        .iter()
        .flat_map(|(id, dets)| dets.iter().map(move |d| DetectionRecord::from_detection(*id, d)))
        .collect();
    write_detections(&a.out, &records)?;
    println!("images={} detections={}", data.len(), records.len());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let dets = read_detections(&a.detections)?;
    let data = load_dataset(&a.dataset)?;
    let report = evaluate(&dets, &data, &Skeleton::human15(), a.pck_threshold)?;
    let json = serde_json::to_string_pretty(&report).map_err(posegrid::Error::from)?;
    write_file(&a.out, &json)?;
    print!("{}", render_tables(&report));
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> CliResult<()> {
    let svg = if let Some(h) = &a.history {
        let history = load_history(h)?;
        if history.is_empty() {
            return Err(CliError::usage(format!("{} holds no history entries", h.display())));
        }
        plot::loss_curves(&history)
    } else {
        let path = a.report.as_ref().expect("clap enforces one input");
        let report: EvalReport = serde_json::from_str(&read_file(path)?).map_err(|e| CliError {
            code: EXIT_IO,
            kind: "format",
            message: format!("{}: {e}", path.display()),
        })?;
        plot::pck_by_distance(&report)
    };
    write_file(&a.out, &svg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
