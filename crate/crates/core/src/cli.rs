//! The `casgan` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::checkpoint::{load_bundle, load_network, save_networks, MANIFEST};
use crate::config::{load_config_with, RunConfig};
use crate::cycles::run_forward;
use crate::data::{
    build_synthetic_dataset, list_pngs, load_dir, load_seg_samples, load_unpaired, save_png, DatasetSpec, Split,
    DEFAULT_IMPRINT,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_features, extract_features, extractor_fingerprint, train_extractor};
use crate::nets::{init_networks, NetKind};
use crate::plot::{parse_log, plot_log};
use crate::segsem::{train_segmenter, SegSample};
use crate::tensor::Tensor;
use crate::trainer::{load_state, train, TrainOutputs, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "casgan",
    version,
    about = "Unpaired background-to-angiography translation: data synthesis, training, inference and evaluation",
    propagate_version = true
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching config
/// field; the config file in turn overrides the built-in defaults.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base RNG seed (config `seed`).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Checkpoint directory to read (config `checkpoint_dir`).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset root or input directory (config `dataset_root`).
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Output directory; every artifact is written below it (config `output_dir`).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Override any config field, e.g. `--set lambda2=5`. Values parse as
    /// JSON, falling back to a plain string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural dataset (trainA, trainB, testA, testB, seg) with a manifest.
    SynthData(SynthArgs),
    /// Train the vessel segmenter and the evaluation feature extractor.
    TrainSeg(TrainSegArgs),
    /// Train the translation networks; needs a segmenter checkpoint.
    Train(TrainArgs),
    /// Translate every image of an input directory.
    Infer,
    /// FID and MMD between translated testA and real testB.
    Evaluate(EvalArgs),
    /// Static SVG figures of a loss log.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Background images in trainA.
    #[arg(long, default_value_t = 16)]
    pub n_background: usize,
    /// Angiography images in trainB.
    #[arg(long, default_value_t = 16)]
    pub n_angio: usize,
    /// Annotated angiographies for the segmenter.
    #[arg(long, default_value_t = 64)]
    pub n_annotated: usize,
    /// Images in each of testA and testB.
    #[arg(long, default_value_t = 16)]
    pub n_test: usize,
    /// Image side in pixels (default: config `image_size`).
    #[arg(long)]
    pub size: Option<usize>,
    /// Strength of the faint vessel imprint left in backgrounds.
    #[arg(long, default_value_t = DEFAULT_IMPRINT)]
    pub imprint: f64,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    /// Segmenter optimizer steps (config `seg_steps`).
    #[arg(long)]
    pub seg_steps: Option<u64>,
    /// Extractor optimizer steps (config `extractor_steps`).
    #[arg(long)]
    pub extractor_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stop after this many steps (config `max_steps`).
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Total epochs (config `epochs_total`).
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Continue from the training checkpoint given by --checkpoint instead
    /// of reading a segmenter from it.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint holding the feature extractor (default: --checkpoint).
    #[arg(long, value_name = "PATH")]
    pub extractor: Option<PathBuf>,
    /// Debug: compare testB with itself instead of translating testA.
    #[arg(long)]
    pub self_compare: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Loss log CSV (default: `<data>/loss_log.csv` when --data is given,
    /// else `loss_log.csv` in the config output directory).
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                2
            } else {
                1
            }
        }
    }
}

fn overrides(common: &Common) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Precondition(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        m.insert(k.trim().to_string(), val);
    }
    if let Some(s) = common.seed {
        m.insert("seed".into(), json!(s));
    }
    let path = |p: &Path| Value::String(p.to_string_lossy().into_owned());
    if let Some(p) = &common.checkpoint {
        m.insert("checkpoint_dir".into(), path(p));
    }
    if let Some(p) = &common.data {
        m.insert("dataset_root".into(), path(p));
    }
    if let Some(p) = &common.out {
        m.insert("output_dir".into(), path(p));
    }
    Ok(m)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut ov = overrides(&cli.common)?;
    match &cli.command {
        Command::TrainSeg(a) => {
            if let Some(s) = a.seg_steps {
                ov.insert("seg_steps".into(), json!(s));
            }
            if let Some(s) = a.extractor_steps {
                ov.insert("extractor_steps".into(), json!(s));
            }
        }
        Command::Train(a) => {
            if let Some(s) = a.max_steps {
                ov.insert("max_steps".into(), json!(s));
            }
            if let Some(e) = a.epochs {
                ov.insert("epochs_total".into(), json!(e));
                // keep the decay phase meaningful for shortened runs
                ov.entry("epochs_constant").or_insert(json!(e * 7 / 10));
            }
        }
        _ => {}
    }
    let cfg = load_config_with(cli.common.config.as_deref(), &ov)?;
    match &cli.command {
        Command::SynthData(a) => cmd_synth(&cfg, a),
        Command::TrainSeg(_) => cmd_train_seg(&cfg),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Infer => cmd_infer(&cfg),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a),
        Command::Plot(a) => cmd_plot(&cfg, a, cli.common.data.as_deref()),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let mut spec = DatasetSpec::new(
        a.n_background,
        a.n_angio,
        a.n_annotated,
        a.size.unwrap_or(cfg.image_size),
        cfg.seed,
    );
    spec.n_test = a.n_test;
    spec.imprint = a.imprint;
    let m = build_synthetic_dataset(&spec, &cfg.output_dir)?;
    println!("wrote {} files under {}", m.files.len(), cfg.output_dir.display());
    Ok(())
}

fn cmd_train_seg(cfg: &RunConfig) -> Result<()> {
    let root = &cfg.dataset_root;
    let pairs = load_seg_samples(root, cfg.image_channels, cfg.image_size)?;
    let samples = pairs
        .into_iter()
        .map(|(i, m)| SegSample::new(i, m))
        .collect::<Result<Vec<_>>>()?;
    let seg = train_segmenter(&samples, cfg)?;
    println!("segmenter validation dice {:.4}", seg.val_dice);
    let domains = load_unpaired(root, Split::Train, cfg.image_channels, cfg.image_size, cfg.seed)?;
    let (extractor, acc) = train_extractor(&domains.a, &domains.b, cfg)?;
    println!("extractor domain accuracy {acc:.4}");
    let out = &cfg.output_dir;
    save_networks(out, cfg, cfg.seed, &[&seg.net, &extractor])?;
    write_json(
        &out.join("seg_report.json"),
        &json!({
            "val_dice": seg.val_dice,
            "n_train": seg.train_indices.len(),
            "n_val": seg.val_indices.len(),
            "final_loss": seg.losses.last(),
            "extractor_accuracy": acc,
            "extractor_fingerprint": extractor_fingerprint(&extractor),
        }),
    )?;
    Ok(())
}

/// A training run directory (with `final/`) or a checkpoint itself.
fn resolve_checkpoint(dir: &Path) -> PathBuf {
    if dir.join(MANIFEST).is_file() {
        return dir.to_path_buf();
    }
    for sub in ["final", "checkpoints/final"] {
        if dir.join(sub).join(MANIFEST).is_file() {
            return dir.join(sub);
        }
    }
    dir.to_path_buf()
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let data = load_unpaired(&cfg.dataset_root, Split::Train, cfg.image_channels, cfg.image_size, cfg.seed)?;
    let ckpt = resolve_checkpoint(&cfg.checkpoint_dir);
    let mut state = if a.resume {
        let mut s = load_state(&ckpt)?;
        // schedule and stopping fields may change on resume; layout may not
        let mut next = s.bundle.config.clone();
        next.epochs_total = cfg.epochs_total;
        next.epochs_constant = cfg.epochs_constant;
        next.max_steps = cfg.max_steps;
        next.checkpoint_every = cfg.checkpoint_every;
        next.dataset_root = cfg.dataset_root.clone();
        next.checkpoint_dir = cfg.checkpoint_dir.clone();
        next.output_dir = cfg.output_dir.clone();
        next.validate()?;
        s.bundle.config = next;
        s
    } else {
        let Some((seg, _)) = load_network(&ckpt, NetKind::Segmenter)? else {
            return Err(Error::Checkpoint(format!(
                "no segmenter in {}; run `casgan train-seg` and pass its output with --checkpoint",
                ckpt.display()
            )));
        };
        let mut bundle = init_networks(cfg, cfg.seed)?;
        bundle.install_segmenter(seg)?;
        TrainState::new(bundle)?
    };
    let out = &cfg.output_dir;
    mkdir(out)?;
    state.bundle.config.save(&out.join("config.json"))?;
    let reports = train(
        &mut state,
        &data,
        TrainOutputs {
            log_path: Some(out.join("loss_log.csv")),
            checkpoint_root: Some(out.join("checkpoints")),
            on_step: None,
        },
    )?;
    match reports.last() {
        Some(r) => println!("trained {} steps; last total {:.5}", reports.len(), r.total),
        None => println!("no steps to run; checkpoint written"),
    }
    Ok(())
}

/// 8-bit RGB heat map of a map in `[0, 1]`.
pub fn heat_rgb(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0);
    // piecewise-linear black - red - yellow - white
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

pub fn save_heat_png(path: &Path, map: &Tensor) -> Result<()> {
    let (_, _, h, w) = map.dims4()?;
    let d = map.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(heat_rgb(d[y as usize * w + x as usize])));
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let input = &cfg.dataset_root;
    let paths = list_pngs(input)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images found in {}", input.display())));
    }
    let (bundle, _) = load_bundle(&resolve_checkpoint(&cfg.checkpoint_dir))?;
    let c = &bundle.config;
    let (paths, imgs) = load_dir(input, c.image_channels, c.image_size)?;
    let out = &cfg.output_dir;
    mkdir(out)?;
    for (p, x) in paths.iter().zip(&imgs) {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let f = run_forward(&bundle, x)?;
        save_png(&out.join(format!("{stem}_gen.png")), &f.y_g)?;
        save_heat_png(&out.join(format!("{stem}_attn.png")), &f.masks.attention)?;
        save_png(&out.join(format!("{stem}_ctx.png")), &f.masks.context)?;
    }
    println!("translated {} images into {}", imgs.len(), out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let test_b = cfg.dataset_root.join("testB");
    if !test_b.is_dir() {
        return Err(Error::Data(format!("missing test split directory {}", test_b.display())));
    }
    let ext_dir = a.extractor.clone().unwrap_or_else(|| cfg.checkpoint_dir.clone());
    let found = if ext_dir.join(MANIFEST).is_file() {
        load_network(&ext_dir, NetKind::Extractor)?
    } else {
        None
    };
    let Some((extractor, ext_cfg)) = found else {
        return Err(Error::Checkpoint(format!(
            "no feature extractor found in {}; run `casgan train-seg` first and pass its output directory with --extractor",
            ext_dir.display()
        )));
    };
    let (real, gen, channels, size) = if a.self_compare {
        let (_, real) = load_dir(&test_b, ext_cfg.image_channels, ext_cfg.image_size)?;
        (real.clone(), real, ext_cfg.image_channels, ext_cfg.image_size)
    } else {
        let dir = resolve_checkpoint(&cfg.checkpoint_dir);
        let (bundle, _) = load_bundle(&dir)?;
        let c = bundle.config.clone();
        let data = load_unpaired(&cfg.dataset_root, Split::Test, c.image_channels, c.image_size, cfg.seed)?;
        let gen = data
            .a
            .iter()
            .map(|x| run_forward(&bundle, x).map(|f| f.y_g))
            .collect::<Result<Vec<_>>>()?;
        (data.b, gen, c.image_channels, c.image_size)
    };
    if channels != ext_cfg.image_channels || size != ext_cfg.image_size {
        return Err(Error::Shape(format!(
            "extractor expects {}x{} images with {} channel(s)",
            ext_cfg.image_size, ext_cfg.image_size, ext_cfg.image_channels
        )));
    }
    let fr = extract_features(&real, &extractor)?;
    let fg = extract_features(&gen, &extractor)?;
    let report = evaluate_features(&fr, &fg, extractor_fingerprint(&extractor))?;
    mkdir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("eval.json");
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_plot(cfg: &RunConfig, a: &PlotArgs, data: Option<&Path>) -> Result<()> {
    let log = match (&a.log, data) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) if d.is_file() => d.to_path_buf(),
        (None, Some(d)) => d.join("loss_log.csv"),
        (None, None) => cfg.output_dir.join("loss_log.csv"),
    };
    let text = fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
    let table = parse_log(&text).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", log.display())),
        other => other,
    })?;
    let written = plot_log(&table, &cfg.output_dir)?;
    println!("wrote {} figures into {}", written.len(), cfg.output_dir.display());
    Ok(())
}
