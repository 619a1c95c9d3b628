//! The `floodseg` command line.
//!
//! Every command accepts `--config <file>` with `key=value` lines whose keys
//! are flag names. File values are inserted ahead of the real flags, so flags
//! given on the command line win.
//!
//! Exit codes: 0 success, 1 usage or other error, 2 missing file, 3 undecodable
//! input, 4 checkpoint or configuration mismatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, DatasetManifest, Split};
use crate::error::Error;
use crate::metrics::{binarize, flood_capacity};
use crate::model::{parse_kv, Checkpoint, FloodTransformer, ModelConfig, Segmenter};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MISSING: i32 = 2;
pub const EXIT_DECODE: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "floodseg", version, about = "Flood-water segmentation and Flood Capacity", args_override_self = true)]
pub struct Cli {
    /// File of key=value defaults; keys are flag names without dashes.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a manifest with a fresh train/test split of an existing one.
    Split(SplitArgs),
    /// Generate synthetic scenes, masks and a manifest.
    Synth(SynthArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on one split and write a report.
    Eval(EvalArgs),
    /// Predict the water mask of one image and print its Flood Capacity.
    Infer(InferArgs),
    /// Print the Flood Capacity of mask images.
    Fc(FcArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of items held out for testing.
    #[arg(long, default_value_t = data::DEFAULT_TEST_RATIO)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Each scene gets between 1 and this many water blobs.
    #[arg(long, default_value_t = 3)]
    pub max_blobs: usize,
    #[arg(long, default_value_t = data::DEFAULT_TEST_RATIO)]
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 32×32 input, patch 8, 2 encoder blocks, width 32.
    Toy,
    /// 256×256 input, patch 16, 4 encoder blocks, width 64.
    Base,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Seed for parameter initialisation.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

impl ModelArgs {
    pub fn config(&self) -> ModelConfig {
        let mut c = match self.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::Base => ModelConfig::default(),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.image_height, self.height);
        set(&mut c.image_width, self.width);
        set(&mut c.patch_size, self.patch_size);
        set(&mut c.depth, self.depth);
        set(&mut c.heads, self.heads);
        set(&mut c.embed_dim, self.embed_dim);
        set(&mut c.mlp_hidden, self.mlp_hidden);
        if let Some(s) = self.model_seed {
            c.seed = s;
        }
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the best checkpoint is written.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Append per-step statistics to this file.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_bce: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_iou: f64,
    #[arg(long, default_value_t = 25)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random flips of training samples.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub augment: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report file (one line per image plus an AGGREGATE line).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct FcArgs {
    /// Grayscale mask images; levels of 128 and above count as water.
    #[arg(long, required = true, num_args = 1..)]
    pub mask: Vec<PathBuf>,
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_MISSING,
        Error::Decode { .. } | Error::Format { .. } | Error::DimensionMismatch(_) => EXIT_DECODE,
        Error::ConfigMismatch(_) | Error::ShapeMismatch { .. } => EXIT_MISMATCH,
        _ => EXIT_USAGE,
    }
}

const COMMANDS: [&str; 6] = ["split", "synth", "train", "eval", "infer", "fc"];

/// Splices `--key=value` flags from the `--config` file right after the
/// command name. Returns the argument list unchanged when there is no file.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_kv(&text)?;
    let at = args
        .iter()
        .position(|a| a.to_str().is_some_and(|s| COMMANDS.contains(&s)))
        .map_or(args.len(), |i| i + 1);
    let mut out = args[..at].to_vec();
    out.extend(kv.iter().map(|(k, v)| OsString::from(format!("--{}={v}", k.replace('_', "-")))));
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString>>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: config file: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{text}");
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        EXIT_USAGE
                    } else {
                        EXIT_OK
                    }
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> crate::Result<()> {
    match command {
        Command::Split(a) => cmd_split(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Infer(a) => cmd_infer(&a, out),
        Command::Fc(a) => cmd_fc(&a, out),
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) {
    let _ = writeln!(out, "{line}");
}

fn create_dir(path: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_split(a: &SplitArgs, out: &mut dyn Write) -> crate::Result<()> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let same_dir = a.manifest.parent() == a.out.parent();
    // Keep paths as written when the new manifest sits next to the old one.
    let source = if same_dir {
        DatasetManifest::parse(&text)?
    } else {
        DatasetManifest::load(&a.manifest)?
    };
    let manifest = source.resplit(a.ratio, a.seed)?;
    manifest.save(&a.out)?;
    say(out, format_args!("train={} test={}", manifest.count(Split::Train), manifest.count(Split::Test)));
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> crate::Result<()> {
    if a.count == 0 || a.max_blobs == 0 {
        return Err(Error::InvalidParam("--count and --max-blobs must be positive".into()));
    }
    let (images, masks) = (a.out_dir.join("images"), a.out_dir.join("masks"));
    create_dir(&images)?;
    create_dir(&masks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut items = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let (scene_seed, blobs) = (rng.gen::<u64>(), rng.gen_range(1..=a.max_blobs));
        let sample = data::synthesize_scene(scene_seed, (a.height, a.width), blobs)?;
        let id = format!("scene{i:04}");
        let (img, mask) = (format!("images/{id}.png"), format!("masks/{id}.png"));
        data::save_rgb(&a.out_dir.join(&img), &sample.image)?;
        data::save_mask(&a.out_dir.join(&mask), &sample.mask)?;
        items.push((id, img.into(), mask.into()));
    }
    let manifest = data::split(items, a.ratio, a.seed)?;
    manifest.save(&a.out_dir.join("manifest.tsv"))?;
    say(out, format_args!("wrote {} scenes to {}", a.count, a.out_dir.display()));
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> crate::Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (mut model, state) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let model = FloodTransformer::from_checkpoint(&ck)?;
            let state = TrainState::from_checkpoint(&ck, &model)?;
            (model, Some(state))
        }
        None => (FloodTransformer::new(a.model.config())?, None),
    };
    let size = model.input_size();
    let train_set = data::load_split(&manifest, Split::Train, size)?;
    let test_set = data::load_split(&manifest, Split::Test, size)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        max_steps: a.steps,
        learning_rate: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        w_bce: a.w_bce,
        w_iou: a.w_iou,
        eval_every: a.eval_every,
        checkpoint_path: Some(a.checkpoint.clone()),
        seed: a.seed,
        augment: a.augment,
        threshold: a.threshold,
        ..TrainConfig::default()
    };
    say(
        out,
        format_args!(
            "training on {} images, testing on {}, {} parameters",
            train_set.len(),
            test_set.len(),
            model.params().numel()
        ),
    );
    let outcome = train::fit(&mut model, &train_set, &test_set, &cfg, state)?;
    for e in &outcome.evals {
        let agg = &e.report.aggregate;
        say(
            out,
            format_args!(
                "step {:>5}  test mIoU {:.4} ± {:.4}  PA {:.4}{}",
                e.step,
                agg.miou_mean,
                agg.miou_std,
                agg.pa_mean,
                if e.improved { "  (saved)" } else { "" }
            ),
        );
    }
    if let Some(path) = &a.history {
        outcome.history.append_to(path)?;
    }
    if let Some(last) = outcome.history.last() {
        say(
            out,
            format_args!("final step {}  loss {:.4}  train mIoU {:.4}  PA {:.4}", last.step, last.loss, last.miou, last.pa),
        );
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> crate::Result<()> {
    let model = FloodTransformer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let which = match a.split {
        SplitChoice::Train => Split::Train,
        SplitChoice::Test => Split::Test,
    };
    let samples = data::load_split(&manifest, which, model.input_size())?;
    eval_to_report(&model, &samples, a.threshold, &a.out, out)
}

/// Evaluates `model`, writes the report file and prints the aggregate line.
pub fn eval_to_report(
    model: &dyn Segmenter,
    samples: &[data::Sample],
    threshold: f64,
    path: &Path,
    out: &mut dyn Write,
) -> crate::Result<()> {
    let report = train::evaluate(model, samples, threshold)?;
    report.save(path)?;
    let agg = &report.aggregate;
    say(
        out,
        format_args!(
            "images={} mIoU={:.4}±{:.4} PA={:.4}±{:.4}",
            report.per_image.len(),
            agg.miou_mean,
            agg.miou_std,
            agg.pa_mean,
            agg.pa_std
        ),
    );
    Ok(())
}

/// Runs the model at its own resolution and maps probabilities back to the image size.
pub fn predict_full_size(model: &dyn Segmenter, image: &Tensor, threshold: f64) -> crate::Result<crate::metrics::BinaryMask> {
    let (_, h, w) = image.chw()?;
    let resized = data::resize_bilinear(image, model.input_size())?;
    let probs = model.probabilities(&resized)?;
    let probs = data::resize_bilinear(&probs, (h, w))?;
    binarize(&probs, threshold)
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> crate::Result<()> {
    let model = FloodTransformer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let (image, _) = data::load_rgb(&a.image)?;
    let mask = predict_full_size(&model, &image, a.threshold)?;
    data::save_mask(&a.out_mask, &mask)?;
    say(out, format_args!("FC={:.4}", flood_capacity(&mask)?));
    Ok(())
}

pub fn cmd_fc(a: &FcArgs, out: &mut dyn Write) -> crate::Result<()> {
    for path in &a.mask {
        let mask = data::load_mask(path)?;
        say(out, format_args!("{}\t{:.4}", path.display(), flood_capacity(&mask)?));
    }
    Ok(())
}
