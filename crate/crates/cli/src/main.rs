//! `layergan` command-line tool.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layergan::checkpoint::load_checkpoint;
use layergan::error::{Error, Result};
use layergan::eval::{evaluate, EvalMode};
use layergan::image::Image;
use layergan::infer::{
    classify, export, order_classes, run_pipeline, Classifier, InferenceOptions, OracleOperators, OverlapMode,
};
use layergan::manifest::{generate_dataset, read_dataset, DatasetManifest};
use layergan::metrics::dl_distance;
use layergan::nets::Model;
use layergan::scene::SceneConfig;
use layergan::train::{train, TrainConfig};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "layergan",
    version,
    about = "Layered scene generation, training, decomposition and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic layered-scene dataset.
    Gen(GenArgs),
    /// Train the operator pairs and the discriminator.
    Train(TrainArgs),
    /// Decompose one image with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint (or the ground-truth oracle) on a dataset.
    Eval(EvalArgs),
    /// Order the layers of every dataset scene from its ground-truth masks.
    Order(OrderArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene configuration (JSON); defaults to the built-in desk setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of classes for the built-in setup.
    #[arg(long, conflicts_with = "config")]
    classes: Option<usize>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Split name recorded in the manifest.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides the configuration's `data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; overrides the configuration's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Copy)]
struct InferenceFlags {
    /// Classification threshold.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Measure overlap on masks binarized at this level instead of the soft masks.
    #[arg(long)]
    overlap_threshold: Option<f32>,
}

impl InferenceFlags {
    fn options(self) -> Result<InferenceOptions> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} must lie in [0, 1]", self.tau)));
        }
        let overlap = match self.overlap_threshold {
            None => OverlapMode::Soft,
            Some(t) if (0.0..=1.0).contains(&t) => OverlapMode::Thresholded(t),
            Some(t) => return Err(Error::Config(format!("overlap threshold {t} must lie in [0, 1]"))),
        };
        Ok(InferenceOptions { tau: self.tau, overlap })
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: InferenceFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use operators derived from each scene's ground truth.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate; defaults to `test` when present, else every entry.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: InferenceFlags,
}

#[derive(Args, Debug)]
struct OrderArgs {
    /// Dataset directory with scene files and masks.
    #[arg(long)]
    masks: PathBuf,
    /// Write the summary here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overlap_threshold: Option<f32>,
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e))
        }
        None => writeln!(std::io::stdout().lock(), "{text}").map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_model(dir: &Path) -> Result<Model<f32>> {
    let mut model = load_checkpoint(dir)?.model;
    model.freeze();
    Ok(model)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = match (&a.config, a.classes) {
        (Some(p), _) => SceneConfig::load(p)?,
        (None, Some(k)) => SceneConfig::desk(k),
        (None, None) => SceneConfig::default(),
    };
    cfg.validate()?;
    let m = generate_dataset(&cfg, a.n, a.seed, &a.out, &a.split)?;
    println!("wrote {} scenes to {}", m.split(&a.split).len(), a.out.display());
    Ok(())
}

/// Catches configuration/data mismatches before hours of training.
fn check_training_data(cfg: &TrainConfig, data: &DatasetManifest) -> Result<()> {
    let entries = if data.split("train").is_empty() {
        data.clone()
    } else {
        data.split("train")
    };
    let first = entries
        .entries
        .first()
        .ok_or_else(|| Error::Config("dataset has no entries".into()))?;
    let k = cfg.arch.num_classes;
    if let Some(e) = entries.entries.iter().find(|e| e.labels.len() != k) {
        return Err(Error::Config(format!(
            "{} has {} labels but the model has {k} classes",
            e.id,
            e.labels.len()
        )));
    }
    let img = data.load_image(first)?;
    let s = cfg.arch.image_size;
    if img.height() != s || img.width() != s {
        return Err(Error::Config(format!(
            "images are {}x{} but the model expects {s}x{s}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if a.data.is_some() {
        cfg.data = a.data;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    cfg.validate()?;
    let data_dir = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (--data)".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no run directory given (--out)".into()))?;
    let data = read_dataset(&data_dir)?;
    check_training_data(&cfg, &data)?;
    let state = train(&cfg, &data, &out)?;
    println!(
        "trained {} epochs ({} steps) into {}",
        state.epoch,
        state.step,
        out.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let opts = a.flags.options()?;
    let model = load_model(&a.checkpoint)?;
    let image = Image::load_png(&a.image)?;
    let s = model.arch.image_size;
    if image.height() != s || image.width() != s {
        return Err(Error::Config(format!(
            "{} is {}x{} but the model expects {s}x{s}",
            a.image.display(),
            image.height(),
            image.width()
        )));
    }
    let inf = run_pipeline(&model, &model, &image, opts)?;
    export(&inf, &a.out)?;
    println!("order (top first): {:?}; wrote {}", inf.ordering.order, a.out.display());
    Ok(())
}

fn select_split(data: &DatasetManifest, split: Option<&str>) -> Result<DatasetManifest> {
    let m = match split {
        Some(s) => data.split(s),
        None if !data.split("test").is_empty() => data.split("test"),
        None => data.clone(),
    };
    if m.is_empty() {
        return Err(Error::Config(format!(
            "no entries in split {}",
            split.unwrap_or("test")
        )));
    }
    Ok(m)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let opts = a.flags.options()?;
    let data = select_split(&read_dataset(&a.data)?, a.split.as_deref())?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let (mode, k) = match &model {
        Some(m) => (EvalMode::Model(m), m.num_classes()),
        None => (EvalMode::Oracle, data.entries[0].labels.len()),
    };
    let report = evaluate(&data, k, mode, opts)?;
    write_json(&report, Some(&a.out))?;
    println!(
        "mAP {:.4}, {} images; report in {}",
        report.map,
        report.n_images,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct OrderRecord {
    id: String,
    /// Top first.
    order: Vec<usize>,
    gt_order: Vec<usize>,
    dl: Option<f64>,
}

#[derive(Serialize)]
struct OrderSummary {
    n_images: usize,
    mean_dl: Option<f64>,
    exact_match_rate: Option<f64>,
    images: Vec<OrderRecord>,
}

fn cmd_order(a: OrderArgs) -> Result<()> {
    let overlap = InferenceFlags {
        tau: 0.5,
        overlap_threshold: a.overlap_threshold,
    }
    .options()?
    .overlap;
    let data = read_dataset(&a.masks)?;
    let images = data.entries.iter().map(|e| {
        let image = data.load_image(e)?;
        let scene = data.load_scene(e)?;
        let ops = OracleOperators::new(&scene);
        let present = classify(&ops.class_probs(&image)?, 0.5);
        let order = order_classes(&ops, &image, &present, overlap)?.order;
        let gt_order = scene.top_to_bottom();
        let dl = if gt_order.is_empty() {
            None
        } else {
            Some(dl_distance(&gt_order, &order)?)
        };
        Ok(OrderRecord {
            id: e.id.clone(),
            order,
            gt_order,
            dl,
        })
    });
    let images = images.collect::<Result<Vec<_>>>()?;
    let dls: Vec<f64> = images.iter().filter_map(|r| r.dl).collect();
    let summary = OrderSummary {
        n_images: images.len(),
        mean_dl: (!dls.is_empty()).then(|| dls.iter().sum::<f64>() / dls.len() as f64),
        exact_match_rate: (!dls.is_empty())
            .then(|| dls.iter().filter(|&&d| d == 0.0).count() as f64 / dls.len() as f64),
        images,
    };
    write_json(&summary, a.out.as_deref())
}

/// Parses `argv` (program name first) and runs the subcommand. Returns 0 on
/// success, 2 on a usage error and 1 on a runtime error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Order(a) => cmd_order(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run_cli(std::env::args_os()) as u8)
}
