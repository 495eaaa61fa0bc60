//! The `pgmfuse` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::evaluate::ConfusionMatrix;
use crate::geometry::{backproject_predictions, grid_cell, scatter_to_points, FovSpec, PgmFrame};
use crate::kitti_io::{
    read_labels, write_file, write_label_words, write_pgm, Dataset, Split, SplitManifest,
};
use crate::labels::{
    class_frequencies, format_class_values, loss_weights, read_class_values, ClassMap, ClassSpec,
    LabelSource, CLASS_NAMES, DEFAULT_EPS,
};
use crate::models::{
    decode_checkpoint, encode_checkpoint, evaluate_frames, frame_weights, train, Model, ModelKind,
    TrainConfig, CKPT_MAGIC,
};
use crate::pipeline::{FrameSpec, L1Source, Sample};
use crate::quantize::{
    calibrate, decode_quantized, layer_errors, quantize_model, time_runs, write_quantized,
    QuantizedModel, SizeReport,
};
use crate::synth::{self, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "pgmfuse", version, about = "LiDAR/camera fusion on polar grid maps")]
pub struct Cli {
    /// Flat `key = value` file; its keys provide defaults for flags of the same name.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = all available cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Project scans into 5-channel PGM files.
    Project(ProjectArgs),
    /// Project and colorize scans into 8-channel PGM files with the camera grid.
    Colorize(ProjectArgs),
    /// Class frequencies and loss weights of a split.
    Stats(StatsArgs),
    /// Train a model; writes the best checkpoint and a metric log.
    Train(TrainArgs),
    /// Write per-point predictions in the label file format.
    Infer(InferArgs),
    /// Score predictions or a checkpoint.
    Eval(EvalArgs),
    /// Post-training INT8 quantization of a checkpoint.
    Quantize(QuantizeArgs),
    /// Forward-pass latency per model kind.
    Bench(BenchArgs),
    /// Write a synthetic dataset in the SemanticKITTI layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset root containing `sequences/<NN>/`.
    #[arg(long, value_name = "DIR")]
    pub root: Option<PathBuf>,
    /// Comma-separated sequence IDs; overrides --split.
    #[arg(long, value_delimiter = ',', value_name = "NN")]
    pub seq: Vec<String>,
    /// Split of the default manifest (train, val, test).
    #[arg(long)]
    pub split: Option<String>,
    /// Use at most this many scans (in sequence order).
    #[arg(long)]
    pub max_frames: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct GridArgs {
    /// Grid rows.
    #[arg(long, default_value_t = 64)]
    pub h: usize,
    /// Grid columns (multiple of 16).
    #[arg(long, default_value_t = 512)]
    pub w: usize,
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    pub yaw_left: f64,
    #[arg(long, default_value_t = -40.0, allow_negative_numbers = true)]
    pub yaw_right: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub pitch_up: f64,
    #[arg(long, default_value_t = -18.0, allow_negative_numbers = true)]
    pub pitch_down: f64,
    /// Depth (m) at which empty cells sample the camera image.
    #[arg(long, default_value_t = 20.0)]
    pub ray_depth: f64,
    /// SemanticKITTI raw-ID table (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub kitti_map: Option<PathBuf>,
    /// CityScapes raw-ID table (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub cityscapes_map: Option<PathBuf>,
    /// Calibration key of the camera projection matrix.
    #[arg(long, default_value = "P2")]
    pub calib_key: String,
}

#[derive(Args, Debug, Clone)]
pub struct LateArgs {
    /// LiDAR checkpoint producing the l2 map (late fusion).
    #[arg(long, value_name = "PATH")]
    pub lidar_ckpt: Option<PathBuf>,
    /// Directory of camera label maps (`<dir>/<seq>/<id>.png` or `<dir>/<id>.png`) for l1.
    #[arg(long, value_name = "DIR")]
    pub image_labels: Option<PathBuf>,
    /// Image-only checkpoint producing l1 instead of --image-labels.
    #[arg(long, value_name = "PATH")]
    pub image_ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Output directory; frames go to `<out>/<seq>/<id>.pgm`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "PATH")]
    pub kitti_map: Option<PathBuf>,
    /// Smoothing constant of the class weights.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Directory for `frequencies.txt` and `weights.txt`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub late: LateArgs,
    /// Model kind: lidar, early, mid, late or image.
    #[arg(long)]
    pub kind: ModelKind,
    /// Validation sequences (default: the val split, when present).
    #[arg(long, value_delimiter = ',', value_name = "NN")]
    pub val_seq: Vec<String>,
    #[arg(long, default_value_t = 350)]
    pub epochs: usize,
    /// Minibatch size [default: 64, or 32 for mid].
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Class weights file (`name value` lines) instead of weights from the training frames.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Validate every N epochs (the last epoch always validates).
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Stop once validation mIoU reaches this value.
    #[arg(long)]
    pub target_miou: Option<f64>,
    /// Output directory for `<kind>.ckpt` and `<kind>.log`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub late: LateArgs,
    /// Float or quantized checkpoint.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Output directory; predictions go to `<out>/<seq>/<id>.label`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub late: LateArgs,
    /// Prediction directory written by `infer` (`<pred>/<seq>/<id>.label`).
    #[arg(long, value_name = "DIR", conflicts_with = "ckpt")]
    pub pred: Option<PathBuf>,
    /// Checkpoint to run instead of reading predictions.
    #[arg(long, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    /// Score back-projected points instead of grid cells (checkpoint mode).
    #[arg(long)]
    pub points: bool,
    /// Report file (table followed by `name<TAB>value` lines).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub late: LateArgs,
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Calibration frames drawn from the selected scans.
    #[arg(long, default_value_t = 100)]
    pub calib_frames: usize,
    /// Quantized checkpoint; the size report goes to `<out>.size.txt`, layer errors to `<out>.layers.tsv`.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Kinds to time [default: lidar,early,mid,late].
    #[arg(long, value_delimiter = ',')]
    pub kind: Vec<ModelKind>,
    /// Time this checkpoint instead of freshly initialized models.
    #[arg(long, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 64)]
    pub h: usize,
    #[arg(long, default_value_t = 512)]
    pub w: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also time the INT8 path.
    #[arg(long)]
    pub quantized: bool,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset root to create.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "00", value_name = "NN")]
    pub seq: Vec<String>,
    /// Scans per sequence.
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coarser firing and a half-size camera.
    #[arg(long)]
    pub small: bool,
}

/// Parses `args` (including the program name), applies `--config` and runs
/// the command. Returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let cli = match parse(args) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Splices config-file values in as flags placed before the user's own, so
/// explicit flags win.
fn parse(mut args: Vec<OsString>) -> Result<std::result::Result<Cli, clap::Error>> {
    let text: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let config_path = text.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            text.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    if let Some(path) = config_path {
        let config = Config::load(&path)?;
        let mut cmd = Cli::command();
        cmd.build();
        let sub_pos = text.iter().skip(1).position(|a| cmd.find_subcommand(a).is_some()).map(|p| p + 1);
        let Some(sub_pos) = sub_pos else {
            return Ok(Cli::try_parse_from(args));
        };
        let sub = cmd.find_subcommand(&text[sub_pos]).expect("found above");
        let mut extra = Vec::new();
        for (key, value) in &config.entries {
            if key == "config" {
                continue;
            }
            let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
                if cmd.get_subcommands().any(|s| s.get_arguments().any(|a| a.get_long() == Some(key.as_str()))) {
                    continue;
                }
                return Err(Error::Usage(format!("{path}: unknown key `{key}`")));
            };
            let flag = format!("--{key}");
            if text.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}="))) {
                continue;
            }
            let takes_value = arg.get_num_args().is_some_and(|n| n.takes_values());
            if takes_value {
                extra.push(OsString::from(format!("{flag}={value}")));
            } else if value.parse::<bool>().map_err(|_| {
                Error::Usage(format!("{path}: `{key}` expects true or false, got `{value}`"))
            })? {
                extra.push(OsString::from(flag));
            }
        }
        args.splice(sub_pos + 1..sub_pos + 1, extra);
    }
    Ok(Cli::try_parse_from(args))
}

fn execute(cli: Cli) -> Result<()> {
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cli.threads
    };
    // a second call in the same process (tests) keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Project(a) => project(a, false),
        Command::Colorize(a) => project(a, true),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Quantize(a) => quantize(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

impl GridArgs {
    fn spec(&self) -> Result<FrameSpec> {
        let classes = ClassSpec {
            kitti_map: match &self.kitti_map {
                Some(p) => ClassMap::load(p)?,
                None => ClassMap::semantickitti(),
            },
            cityscapes_map: match &self.cityscapes_map {
                Some(p) => ClassMap::load(p)?,
                None => ClassMap::cityscapes(),
            },
        };
        let spec = FrameSpec {
            fov: FovSpec {
                yaw_left: self.yaw_left,
                yaw_right: self.yaw_right,
                pitch_up: self.pitch_up,
                pitch_down: self.pitch_down,
            },
            h: self.h,
            w: self.w,
            ray_depth: self.ray_depth,
            classes,
            calib_key: self.calib_key.clone(),
        };
        spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(spec)
    }
}

impl DataArgs {
    fn dataset(&self) -> Result<Dataset> {
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Usage("--root is required (flag or config key)".into()))?;
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
            ));
        }
        Ok(Dataset::new(root))
    }

    /// `(sequence, scan id)` pairs selected by --seq or --split.
    fn scans(&self, dataset: &Dataset, default_split: Split) -> Result<Vec<(String, String)>> {
        let explicit = !self.seq.is_empty();
        let seqs: Vec<String> = if explicit {
            self.seq.clone()
        } else {
            let split = match &self.split {
                Some(s) => s.parse()?,
                None => default_split,
            };
            SplitManifest::default().sequences(split).to_vec()
        };
        let mut out = Vec::new();
        for seq in seqs {
            if !explicit && !dataset.sequence_dir(&seq).is_dir() {
                log::warn!("sequence {seq} not present under {}", dataset.root.display());
                continue;
            }
            for id in dataset.scan_ids(&seq)? {
                out.push((seq.clone(), id));
            }
        }
        if let Some(n) = self.max_frames {
            out.truncate(n);
        }
        if out.is_empty() {
            return Err(Error::Consistency("no scans selected".into()));
        }
        Ok(out)
    }
}

enum AnyModel {
    Float(Model),
    Quant(QuantizedModel),
}

impl AnyModel {
    fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Float(m) => m.kind,
            AnyModel::Quant(q) => q.kind,
        }
    }

    fn infer(&self, frame: &PgmFrame) -> Result<Vec<u32>> {
        match self {
            AnyModel::Float(m) => m.infer(frame),
            AnyModel::Quant(q) => q.infer(frame),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_any(path: &Path) -> Result<AnyModel> {
    let bytes = read_bytes(path)?;
    if bytes.len() > 6 && &bytes[..4] == CKPT_MAGIC && bytes[6] & 0x80 != 0 {
        Ok(AnyModel::Quant(decode_quantized(&bytes, path)?))
    } else {
        Ok(AnyModel::Float(decode_checkpoint(&bytes, path)?))
    }
}

fn load_float(path: &Path) -> Result<Model> {
    decode_checkpoint(&read_bytes(path)?, path)
}

/// Upstream models and label source for late-fusion frames.
struct LateCtx {
    lidar: Model,
    image: Option<Model>,
    labels_dir: Option<PathBuf>,
}

impl LateArgs {
    fn context(&self, kind: ModelKind) -> Result<Option<LateCtx>> {
        if kind != ModelKind::Late {
            return Ok(None);
        }
        let lidar = self
            .lidar_ckpt
            .as_ref()
            .ok_or_else(|| Error::Usage("late fusion needs --lidar-ckpt".into()))?;
        let image = self.image_ckpt.as_deref().map(load_float).transpose()?;
        if image.is_none() && self.image_labels.is_none() {
            return Err(Error::Usage("late fusion needs --image-labels or --image-ckpt".into()));
        }
        Ok(Some(LateCtx {
            lidar: load_float(lidar)?,
            image,
            labels_dir: self.image_labels.clone(),
        }))
    }
}

fn load_sample(
    spec: &FrameSpec,
    dataset: &Dataset,
    seq: &str,
    id: &str,
    kind: ModelKind,
    late: Option<&LateCtx>,
) -> Result<Sample> {
    let labels_dir = late.filter(|l| l.image.is_none()).and_then(|l| l.labels_dir.as_deref());
    spec.load_sample(dataset, seq, id, kind != ModelKind::Lidar, labels_dir)
}

fn make_frame(spec: &FrameSpec, sample: &Sample, kind: ModelKind, late: Option<&LateCtx>) -> Result<PgmFrame> {
    match late {
        Some(ctx) => {
            let src = match &ctx.image {
                Some(m) => L1Source::ImageModel(m),
                None => L1Source::Raster,
            };
            spec.late_frame(sample, &ctx.lidar, src)
        }
        None => spec.frame(sample, kind),
    }
}

fn prepare(
    spec: &FrameSpec,
    dataset: &Dataset,
    scans: &[(String, String)],
    kind: ModelKind,
    late: Option<&LateCtx>,
) -> Result<Vec<PgmFrame>> {
    scans
        .par_iter()
        .map(|(seq, id)| {
            let sample = load_sample(spec, dataset, seq, id, kind, late)?;
            make_frame(spec, &sample, kind, late)
        })
        .collect()
}

fn project(a: ProjectArgs, color: bool) -> Result<()> {
    let spec = a.grid.spec()?;
    let dataset = a.data.dataset()?;
    let scans = a.data.scans(&dataset, Split::Train)?;
    scans.par_iter().try_for_each(|(seq, id)| -> Result<()> {
        let sample = spec.load_sample(&dataset, seq, id, color, None)?;
        let frame = if color {
            spec.attach_image(spec.color_frame(&sample)?, &sample)?
        } else {
            spec.lidar_frame(&sample)
        };
        let dir = a.out.join(seq);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_pgm(&frame, dir.join(format!("{id}.pgm")))
    })?;
    println!("wrote {} frames to {}", scans.len(), a.out.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let dataset = a.data.dataset()?;
    let spec = ClassSpec {
        kitti_map: match &a.kitti_map {
            Some(p) => ClassMap::load(p)?,
            None => ClassMap::semantickitti(),
        },
        ..ClassSpec::default()
    };
    let scans = a.data.scans(&dataset, Split::Train)?;
    let mut seqs: Vec<String> = scans.iter().map(|(s, _)| s.clone()).collect();
    seqs.dedup();
    let counts = if a.data.max_frames.is_some() {
        let mut c = crate::labels::ClassCounts::default();
        for (seq, id) in &scans {
            let raw: Vec<u16> = read_labels(dataset.label_path(seq, id))?.iter().map(|l| l.semantic).collect();
            c.add_labels(&spec.remap(&raw, LabelSource::SemanticKitti).0);
        }
        c
    } else {
        class_frequencies(&dataset, &seqs, &spec)?
    };
    let f = counts.fractions();
    let w = loss_weights(&f, a.eps)?;
    println!("{:<14} {:>12} {:>10} {:>10}", "class", "points", "fraction", "weight");
    for c in 0..CLASS_NAMES.len() {
        println!("{:<14} {:>12} {:>10.6} {:>10.4}", CLASS_NAMES[c], counts.counts[c], f[c], w[c]);
    }
    println!("total {} points in {} scans", counts.total(), scans.len());
    if let Some(out) = &a.out {
        write_file(&out.join("frequencies.txt"), format_class_values(&f).as_bytes())?;
        write_file(&out.join("weights.txt"), format_class_values(&w).as_bytes())?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let spec = a.grid.spec()?;
    let dataset = a.data.dataset()?;
    let late = a.late.context(a.kind)?;
    let scans = a.data.scans(&dataset, Split::Train)?;
    let val_data = DataArgs {
        seq: a.val_seq.clone(),
        split: Some("val".into()),
        max_frames: a.data.max_frames,
        ..a.data.clone()
    };
    let val_scans = match val_data.scans(&dataset, Split::Val) {
        Ok(s) => s,
        Err(Error::Consistency(_)) if a.val_seq.is_empty() => {
            log::warn!("no validation scans; selecting on the training frames");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let frames = prepare(&spec, &dataset, &scans, a.kind, late.as_ref())?;
    let val = prepare(&spec, &dataset, &val_scans, a.kind, late.as_ref())?;
    let weights = match &a.weights {
        Some(p) => read_class_values(p)?,
        None => frame_weights(&frames, a.eps)?,
    };
    let mut cfg = TrainConfig::new(weights);
    cfg.epochs = a.epochs;
    cfg.batch = a.batch.unwrap_or(if a.kind == ModelKind::Mid { 32 } else { 64 });
    cfg.lr = a.lr;
    cfg.momentum = a.momentum;
    cfg.seed = a.seed;
    cfg.eval_every = a.eval_every;
    cfg.target_miou = a.target_miou;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ckpt = a.out.join(format!("{}.ckpt", a.kind));
    let log_path = a.out.join(format!("{}.log", a.kind));
    let mut log = String::new();
    let outcome = train(a.kind, &frames, &val, &cfg, |rec, improved| {
        println!("{rec}");
        writeln!(log, "{rec}").expect("string write");
        write_file(&log_path, log.as_bytes())?;
        if let Some(m) = improved {
            write_file(&ckpt, &encode_checkpoint(m))?;
        }
        Ok(())
    })?;
    println!(
        "best val mIoU {:.4} at epoch {}; checkpoint {}",
        outcome.best_miou,
        outcome.best.meta.epoch,
        ckpt.display()
    );
    Ok(())
}

fn check_kind(model: &AnyModel, late: &LateArgs) -> Result<Option<LateCtx>> {
    late.context(model.kind())
}

fn infer(a: InferArgs) -> Result<()> {
    let spec = a.grid.spec()?;
    let dataset = a.data.dataset()?;
    let model = load_any(&a.ckpt)?;
    let late = check_kind(&model, &a.late)?;
    let scans = a.data.scans(&dataset, Split::Test)?;
    scans.par_iter().try_for_each(|(seq, id)| -> Result<()> {
        let sample = load_sample(&spec, &dataset, seq, id, model.kind(), late.as_ref())?;
        let frame = make_frame(&spec, &sample, model.kind(), late.as_ref())?;
        let pred = model.infer(&frame)?;
        let pairs = backproject_predictions(&frame, &pred)?;
        let words = scatter_to_points(sample.cloud.source_len, &pairs);
        let path = a.out.join(seq).join(format!("{id}.label"));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_label_words(&path, &words)
    })?;
    println!("wrote {} prediction files to {}", scans.len(), a.out.display());
    Ok(())
}

/// Scores points that fall inside the grid's field of view.
fn score_points(cm: &mut ConfusionMatrix, sample: &Sample, pred: &[u32], spec: &FrameSpec) -> Result<()> {
    let truth = sample
        .cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::Consistency("ground-truth labels missing".into()))?;
    let mut t = Vec::new();
    let mut p = Vec::new();
    for (i, point) in sample.cloud.points.iter().enumerate() {
        if grid_cell(point, &spec.fov, spec.h, spec.w).is_some() {
            let src = sample.cloud.source_index.get(i).copied().unwrap_or(i as u32) as usize;
            t.push(truth[i] as u32);
            p.push(*pred.get(src).ok_or_else(|| {
                Error::Consistency(format!("prediction has {} entries, scan has {}", pred.len(), sample.cloud.source_len))
            })?);
        }
    }
    cm.accumulate(&t, &p, None)
}

fn eval(a: EvalArgs) -> Result<()> {
    let spec = a.grid.spec()?;
    let dataset = a.data.dataset()?;
    let scans = a.data.scans(&dataset, Split::Val)?;
    let mut cm = ConfusionMatrix::default();
    let title;
    if let Some(pred_dir) = &a.pred {
        title = "predictions".to_string();
        for (seq, id) in &scans {
            let sample = spec.load_sample(&dataset, seq, id, false, None)?;
            let path = pred_dir.join(seq).join(format!("{id}.label"));
            let pred: Vec<u32> = read_labels(&path)?.iter().map(|l| l.semantic as u32).collect();
            if pred.len() != sample.cloud.source_len {
                return Err(Error::Consistency(format!(
                    "{} has {} labels but the scan has {} points",
                    path.display(),
                    pred.len(),
                    sample.cloud.source_len
                )));
            }
            score_points(&mut cm, &sample, &pred, &spec)?;
        }
    } else {
        let ckpt = a
            .ckpt
            .as_ref()
            .ok_or_else(|| Error::Usage("eval needs --pred or --ckpt".into()))?;
        let model = load_any(ckpt)?;
        let late = check_kind(&model, &a.late)?;
        title = model.kind().to_string();
        let parts: Vec<ConfusionMatrix> = scans
            .par_iter()
            .map(|(seq, id)| -> Result<ConfusionMatrix> {
                let sample = load_sample(&spec, &dataset, seq, id, model.kind(), late.as_ref())?;
                let frame = make_frame(&spec, &sample, model.kind(), late.as_ref())?;
                let pred = model.infer(&frame)?;
                let mut cm = ConfusionMatrix::default();
                if a.points {
                    let pairs = backproject_predictions(&frame, &pred)?;
                    let words = scatter_to_points(sample.cloud.source_len, &pairs);
                    score_points(&mut cm, &sample, &words, &spec)?;
                } else {
                    cm.accumulate(&frame.labels, &pred, Some(&frame.mask))?;
                }
                Ok(cm)
            })
            .collect::<Result<_>>()?;
        for p in &parts {
            cm.merge(p);
        }
    }
    let report = cm.miou();
    let text = format!("{}{}", report.to_table(&title), report.to_tsv());
    print!("{}", report.to_table(&title));
    println!("mIoU {:.4}", report.miou);
    if let Some(out) = &a.out {
        write_file(out, text.as_bytes())?;
    }
    Ok(())
}

fn agreement(a: &[u32], b: &[u32]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let spec = a.grid.spec()?;
    let dataset = a.data.dataset()?;
    let model = load_float(&a.ckpt)?;
    let late = a.late.context(model.kind)?;
    let mut scans = a.data.scans(&dataset, Split::Train)?;
    scans.truncate(a.calib_frames.max(1));
    let frames = prepare(&spec, &dataset, &scans, model.kind, late.as_ref())?;
    let obs = calibrate(&model, &frames)?;
    let q = quantize_model(&model, &obs)?;
    write_quantized(&q, &a.out)?;
    let size = SizeReport::new(&model, &q);
    let mut report = size.to_string();
    let float_cm = evaluate_frames(&model, &frames)?;
    let mut qcm = ConfusionMatrix::default();
    let mut agree = 0.0;
    for f in &frames {
        let pq = q.infer(f)?;
        agree += agreement(&model.infer(f)?, &pq);
        qcm.accumulate(&f.labels, &pq, Some(&f.mask))?;
    }
    let qm = qcm.miou();
    writeln!(report, "calibration_frames\t{}", frames.len()).expect("string write");
    writeln!(report, "float_miou\t{:.6}", float_cm.miou).expect("string write");
    writeln!(report, "int8_miou\t{:.6}", qm.miou).expect("string write");
    writeln!(report, "argmax_agreement\t{:.6}", agree / frames.len() as f64).expect("string write");
    print!("{report}");
    write_file(&PathBuf::from(format!("{}.size.txt", a.out.display())), report.as_bytes())?;
    let mut layers = String::from("site\trel_rmse\tmax_abs\n");
    for e in layer_errors(&model, &q, &frames[0])? {
        writeln!(layers, "{}\t{:.6}\t{:.6}", e.site, e.rel_rmse, e.max_abs).expect("string write");
    }
    write_file(&PathBuf::from(format!("{}.layers.tsv", a.out.display())), layers.as_bytes())?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let spec = FrameSpec { h: a.h, w: a.w, ..FrameSpec::default() };
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let scene = synth::generate(a.seed, &SynthConfig::small())?;
    let sample = spec.sample_from_scene(&scene)?;
    let loaded = a.ckpt.as_deref().map(load_any).transpose()?;
    let kinds = match &loaded {
        Some(m) => vec![m.kind()],
        None if a.kind.is_empty() => ModelKind::FUSION.to_vec(),
        None => a.kind.clone(),
    };
    let mut out = format!("{:<6} {:>10} {:>28} {:>28}\n", "kind", "params", "float", "int8");
    print!("{out}");
    for kind in kinds {
        let frame = if kind == ModelKind::Late {
            let lidar = Model::build(ModelKind::Lidar, a.seed)?;
            spec.late_frame(&sample, &lidar, L1Source::Raster)?
        } else {
            spec.frame(&sample, kind)?
        };
        let (params, float_t, quant) = match &loaded {
            Some(AnyModel::Quant(q)) => {
                let t = time_runs(a.runs, || q.infer(&frame).map(drop))?;
                ("-".to_string(), "-".to_string(), t.to_string())
            }
            other => {
                let model = match other {
                    Some(AnyModel::Float(m)) => m.clone(),
                    _ => Model::build(kind, a.seed)?,
                };
                let ft = time_runs(a.runs, || model.infer(&frame).map(drop))?;
                let qt = if a.quantized {
                    let q = quantize_model(&model, &calibrate(&model, std::slice::from_ref(&frame))?)?;
                    time_runs(a.runs, || q.infer(&frame).map(drop))?.to_string()
                } else {
                    "-".to_string()
                };
                (model.param_count().to_string(), ft.to_string(), qt)
            }
        };
        let line = format!("{:<6} {:>10} {:>28} {:>28}\n", kind, params, float_t, quant);
        print!("{line}");
        out += &line;
    }
    if let Some(path) = &a.out {
        write_file(path, out.as_bytes())?;
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let cfg = if a.small { SynthConfig::small() } else { SynthConfig::default() };
    for seq in &a.seq {
        synth::write_sequence(&a.out, seq, a.frames, a.seed, &cfg)?;
    }
    println!("wrote {} sequences of {} scans to {}", a.seq.len(), a.frames, a.out.display());
    Ok(())
}
