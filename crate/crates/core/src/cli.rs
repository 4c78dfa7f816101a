//! Command-line surface shared by the `sagegan` binary and the tests.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{write_atomic, Container};
use crate::config::TrainConfig;
use crate::data::{load_dataset, load_gray_png, png_stems, save_gray_png, split_dataset, SplitManifest};
use crate::error::{Error, Result};
use crate::kernels::{resize_bilinear_2d, resize_nearest_2d};
use crate::metrics::evaluate_dataset;
use crate::style::{generate_image, GenModelState, LatentNoise, NoiseMode, GEN_KIND};
use crate::trainer::{train_sagegan_with, CycleState, CYCLE_KIND};
use crate::unet::{fit_pairs, predict_mask, pretrain_from, SegModelState, SEG_KIND};
use crate::viz::{render_attention_overlay, render_heatmap, Colormap, DEFAULT_ALPHA};

#[derive(Debug, Parser)]
#[command(name = "sagegan", version, about = "Attention U-Net + style-GAN segmentation pipeline")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Dataset root, or an image/mask directory for inference commands.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to read.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// TOML configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Working resolution, `N` or `HxW`.
    #[arg(long, value_parser = parse_size)]
    pub image_size: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phase 1: pretrain the attention U-Net.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Phase 2: adversarial training around a pretrained segmenter.
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Split manifest to reuse; otherwise the split is redrawn from the seed.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Predict a binary mask for every image.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score a segmenter on one partition of a labeled dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `split.txt` beside the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Partition::Val)]
        partition: Partition,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Synthesize one image per mask.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Render attention heatmaps and overlays.
    VisualizeAttention {
        #[command(flatten)]
        common: Common,
        /// Gate index, 0 being the finest.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value = "cool-warm")]
        colormap: String,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size `{s}`"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
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
    if cli.verbose {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    } else {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainSeg {
            common,
            epochs,
            batch_size,
        } => cmd_train_seg(&common, epochs, batch_size),
        Command::TrainGan {
            common,
            epochs,
            batch_size,
            manifest,
        } => cmd_train_gan(&common, epochs, batch_size, manifest.as_deref()),
        Command::Segment { common, threshold } => cmd_segment(&common, threshold),
        Command::Evaluate {
            common,
            manifest,
            partition,
            threshold,
        } => cmd_evaluate(&common, manifest.as_deref(), partition, threshold),
        Command::Generate { common } => cmd_generate(&common),
        Command::VisualizeAttention {
            common,
            layer,
            colormap,
            alpha,
        } => cmd_visualize(&common, layer, &colormap, alpha),
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(size) = common.image_size {
        cfg.set_image_size(size);
    }
    Ok(cfg)
}

fn require_dir(path: Option<&Path>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("--data is required ({what})")))?;
    if !p.is_dir() {
        return Err(Error::Ingestion(format!("{what} {} does not exist", p.display())));
    }
    Ok(p.to_path_buf())
}

fn require_file(path: Option<&Path>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("--checkpoint is required ({what})")))?;
    if !p.is_file() {
        return Err(Error::Checkpoint {
            path: p.to_path_buf(),
            reason: "file does not exist".into(),
        });
    }
    Ok(p.to_path_buf())
}

fn make_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    common: &'a Common,
    options: T,
    train: Option<&'a TrainConfig>,
}

fn echo_config<T: Serialize>(
    command: &str,
    common: &Common,
    options: T,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let echo = Echo {
        command,
        common,
        options,
        train,
    };
    let text = serde_json::to_string_pretty(&echo)?;
    write_atomic(&common.out.join("config.json"), text.as_bytes())
}

fn append_jsonl<T: Serialize>(path: &Path, kind: &str, record: &T) -> Result<()> {
    let mut value = serde_json::to_value(record)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("record".into(), kind.into());
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{value}").map_err(|e| Error::io(path, e))
}

fn fresh_file(path: &Path) -> Result<()> {
    fs::write(path, b"").map_err(|e| Error::io(path, e))
}

/// Loads the segmenter from a segmenter or Phase-2 checkpoint.
pub fn load_segmenter(path: &Path) -> Result<SegModelState> {
    let c = Container::load(path)?;
    match c.kind.as_str() {
        CYCLE_KIND => Ok(CycleState::from_container(&c, path)?.seg),
        _ => {
            c.expect_kind(&[SEG_KIND, CYCLE_KIND], path)?;
            SegModelState::from_container(&c, path)
        }
    }
}

/// Loads the generator from a generator or Phase-2 checkpoint.
pub fn load_generator(path: &Path) -> Result<GenModelState> {
    let c = Container::load(path)?;
    match c.kind.as_str() {
        CYCLE_KIND => Ok(CycleState::from_container(&c, path)?.gen),
        _ => {
            c.expect_kind(&[GEN_KIND, CYCLE_KIND], path)?;
            GenModelState::from_container(&c, path)
        }
    }
}

fn cmd_train_seg(common: &Common, epochs: Option<usize>, batch_size: Option<usize>) -> Result<()> {
    let data = require_dir(common.data.as_deref(), "dataset root")?;
    let mut cfg = resolve_config(common)?;
    if let Some(e) = epochs {
        cfg.epochs_pretrain = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let pairs = fit_pairs(&load_dataset(&data)?, cfg.unet.input_size)?;
    let split = split_dataset(&pairs, cfg.split_ratio, cfg.seed)?;
    make_out(&common.out)?;
    echo_config("train-seg", common, serde_json::json!({}), Some(&cfg))?;
    split.manifest().save(&common.out.join("split.txt"))?;
    let history = common.out.join("history.jsonl");
    fresh_file(&history)?;

    let init = SegModelState::new(
        cfg.unet.clone(),
        crate::config::stream_seed(cfg.seed, crate::config::Stream::SegInit),
    )?;
    let outcome = pretrain_from(init, &split, &cfg, &mut |rec, _| append_jsonl(&history, "epoch", rec))?;
    outcome.best.save(&common.out.join("segmenter.ckpt"))?;
    outcome.last.save(&common.out.join("segmenter_last.ckpt"))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} epochs; best epoch {:?}; final loss {:.5}",
            outcome.history.len(),
            outcome.best_epoch,
            last.loss.total
        );
    } else {
        println!("0 epochs: wrote initialized segmenter");
    }
    Ok(())
}

fn cmd_train_gan(
    common: &Common,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    manifest: Option<&Path>,
) -> Result<()> {
    let data = require_dir(common.data.as_deref(), "dataset root")?;
    let ckpt = require_file(common.checkpoint.as_deref(), "Phase-1 segmenter")?;
    let seg = load_segmenter(&ckpt)?;
    let mut cfg = resolve_config(common)?;
    // the segmenter fixes architecture and resolution
    cfg.unet = seg.config.clone();
    if let Some(e) = epochs {
        cfg.epochs_gan = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let pairs = fit_pairs(&load_dataset(&data)?, cfg.unet.input_size)?;
    let split = match manifest {
        Some(m) => SplitManifest::load(m)?.apply(&pairs)?,
        None => split_dataset(&pairs, cfg.split_ratio, cfg.seed)?,
    };
    let state = CycleState::new(seg, &cfg)?;
    make_out(&common.out)?;
    echo_config("train-gan", common, serde_json::json!({ "manifest": manifest }), Some(&cfg))?;
    split.manifest().save(&common.out.join("split.txt"))?;
    let history = common.out.join("history.jsonl");
    fresh_file(&history)?;

    let out = common.out.clone();
    let every = cfg.checkpoint_every;
    let outcome = train_sagegan_with(state, &split, &cfg, &mut |rec, steps, st| {
        for s in steps {
            append_jsonl(&history, "step", s)?;
        }
        append_jsonl(&history, "epoch", rec)?;
        if every > 0 && (rec.epoch + 1) % every == 0 {
            st.save(&out.join(format!("cycle_epoch{:04}.ckpt", rec.epoch + 1)))?;
        }
        Ok(())
    })?;
    outcome.state.save(&common.out.join("cycle.ckpt"))?;
    outcome.state.gen.save(&common.out.join("generator.ckpt"))?;
    outcome.best_seg.save(&common.out.join("best_seg.ckpt"))?;
    println!(
        "trained {} epochs ({} steps); best segmenter epoch {:?}",
        outcome.history.len(),
        outcome.steps.len(),
        outcome.best_epoch
    );
    Ok(())
}

/// PNG inputs of an inference command: `<data>/images` when present, else `<data>`.
fn input_pngs(data: &Path, sub: &str) -> Result<Vec<(String, PathBuf)>> {
    let dir = if data.join(sub).is_dir() {
        data.join(sub)
    } else {
        data.to_path_buf()
    };
    let found: Vec<(String, PathBuf)> = png_stems(&dir)?.into_iter().collect();
    if found.is_empty() {
        return Err(Error::EmptyDataset(dir));
    }
    Ok(found)
}

/// Runs `f` per input; failures are logged and skipped, and reported as an
/// error once every input has been attempted.
fn for_each_input(
    inputs: &[(String, PathBuf)],
    mut f: impl FnMut(&str, &Path) -> Result<()>,
) -> Result<usize> {
    let mut failed = Vec::new();
    for (stem, path) in inputs {
        if let Err(e) = f(stem, path) {
            log::warn!("skipping {}: {e}", path.display());
            failed.push(stem.clone());
        }
    }
    if failed.is_empty() {
        Ok(inputs.len())
    } else {
        Err(Error::Ingestion(format!(
            "{} of {} inputs failed: {}",
            failed.len(),
            inputs.len(),
            failed.join(", ")
        )))
    }
}

fn cmd_segment(common: &Common, threshold: f64) -> Result<()> {
    let data = require_dir(common.data.as_deref(), "image directory")?;
    let ckpt = require_file(common.checkpoint.as_deref(), "segmenter")?;
    let seg = load_segmenter(&ckpt)?;
    let inputs = input_pngs(&data, "images")?;
    make_out(&common.out)?;
    echo_config("segment", common, serde_json::json!({ "threshold": threshold }), None)?;
    let (h, w) = seg.config.input_size;
    let n = for_each_input(&inputs, |stem, path| {
        let img = load_gray_png(path)?;
        let (oh, ow) = img.dims2();
        let mask = predict_mask(&resize_bilinear_2d(&img, h, w).map(|v| v.clamp(0.0, 1.0)), &seg, threshold)?;
        let mask = resize_nearest_2d(&mask, oh, ow);
        save_gray_png(&common.out.join(format!("{stem}.png")), &mask)
    })?;
    println!("wrote {n} masks to {}", common.out.display());
    Ok(())
}

fn cmd_evaluate(common: &Common, manifest: Option<&Path>, partition: Partition, threshold: f64) -> Result<()> {
    let data = require_dir(common.data.as_deref(), "dataset root")?;
    let ckpt = require_file(common.checkpoint.as_deref(), "segmenter")?;
    let seg = load_segmenter(&ckpt)?;
    let pairs = fit_pairs(&load_dataset(&data)?, seg.config.input_size)?;
    let chosen = if partition == Partition::All {
        pairs
    } else {
        let mpath = match manifest {
            Some(m) => m.to_path_buf(),
            None => ckpt.parent().unwrap_or(Path::new(".")).join("split.txt"),
        };
        if !mpath.is_file() {
            return Err(Error::Config(format!(
                "split manifest {} not found (pass --manifest or --partition all)",
                mpath.display()
            )));
        }
        let split = SplitManifest::load(&mpath)?.apply(&pairs)?;
        if partition == Partition::Train {
            split.train
        } else {
            split.val
        }
    };
    make_out(&common.out)?;
    echo_config(
        "evaluate",
        common,
        serde_json::json!({ "manifest": manifest, "partition": partition, "threshold": threshold }),
        None,
    )?;
    let mut report = evaluate_dataset(&seg, &chosen, threshold)?;
    if let serde_json::Value::Object(map) = &mut report.config {
        map.insert("partition".into(), serde_json::to_value(partition)?);
        map.insert("checkpoint".into(), ckpt.display().to_string().into());
    }
    report.save(&common.out.join("report.json"))?;
    println!(
        "{} images: dice {:.4} f1 {:.4}",
        report.per_image.len(),
        report.aggregate.dice,
        report.aggregate.f1
    );
    Ok(())
}

fn cmd_generate(common: &Common) -> Result<()> {
    let data = require_dir(common.data.as_deref(), "mask directory")?;
    let ckpt = require_file(common.checkpoint.as_deref(), "generator")?;
    let gen = load_generator(&ckpt)?;
    let seed = common.seed.unwrap_or(0);
    let size = common.image_size;
    let inputs = input_pngs(&data, "masks")?;
    let (img_dir, mask_dir) = (common.out.join("images"), common.out.join("masks"));
    for d in [&img_dir, &mask_dir] {
        make_out(d)?;
    }
    echo_config("generate", common, serde_json::json!({ "seed": seed }), None)?;
    let mut rng = crate::config::stream_rng(seed, crate::config::Stream::Gan);
    let n = for_each_input(&inputs, |stem, path| {
        let mut mask = crate::data::binarize(&load_gray_png(path)?);
        if let Some((h, w)) = size {
            mask = crate::data::binarize(&resize_nearest_2d(&mask, h, w));
        }
        let z = LatentNoise::sample(gen.config.d_z, &mut rng);
        let noise = NoiseMode::Seeded(rand::RngCore::next_u64(&mut rng));
        let img = generate_image(&mask, &z, &gen, noise)?;
        save_gray_png(&img_dir.join(format!("{stem}.png")), &img)?;
        save_gray_png(&mask_dir.join(format!("{stem}.png")), &mask)
    })?;
    println!("wrote {n} synthetic pairs to {}", common.out.display());
    Ok(())
}

fn cmd_visualize(common: &Common, layer: usize, colormap: &str, alpha: f64) -> Result<()> {
    let data = common
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("--data is required (image file or directory)".into()))?;
    let ckpt = require_file(common.checkpoint.as_deref(), "segmenter")?;
    let seg = load_segmenter(&ckpt)?;
    let cmap: Colormap = colormap.parse()?;
    if layer + 1 >= seg.config.depth {
        return Err(Error::param(
            "layer",
            format!("{layer} is not available; choose one of {:?}", (0..seg.config.depth - 1).collect::<Vec<_>>()),
        ));
    }
    let inputs = if data.is_file() {
        let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        vec![(stem, data.to_path_buf())]
    } else if data.is_dir() {
        input_pngs(data, "images")?
    } else {
        return Err(Error::Ingestion(format!("input {} does not exist", data.display())));
    };
    make_out(&common.out)?;
    echo_config(
        "visualize-attention",
        common,
        serde_json::json!({ "layer": layer, "colormap": cmap.name(), "alpha": alpha }),
        None,
    )?;
    let (h, w) = seg.config.input_size;
    let n = for_each_input(&inputs, |stem, path| {
        let img = resize_bilinear_2d(&load_gray_png(path)?, h, w).map(|v| v.clamp(0.0, 1.0));
        let (_, maps) = seg.forward(&img)?;
        let overlay = render_attention_overlay(&img, &maps, layer, cmap, alpha)?;
        let save = |name: String, rgb: &image::RgbImage| -> Result<()> {
            let p = common.out.join(name);
            rgb.save_with_format(&p, image::ImageFormat::Png)
                .map_err(|source| Error::Image { path: p.clone(), source })
        };
        save(format!("{stem}_overlay.png"), &overlay.blend)?;
        save(format!("{stem}_heat.png"), &render_heatmap(&overlay.heat, cmap))
    })?;
    println!("rendered {n} overlays (gate {layer}) to {}", common.out.display());
    Ok(())
}
