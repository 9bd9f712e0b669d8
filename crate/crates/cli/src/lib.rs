//! Argument parsing and subcommand dispatch for the `holoslide` binary.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.
//! Diagnostics go to standard error; machine-readable output only to files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use holoslide::attention::{AttentionConfig, AttentionKind, BackboneConfig};
use holoslide::foreground::{compute_foreground, sample_roi, ForegroundMask, SamplerConfig};
use holoslide::mask::WsiMask;
use holoslide::metrics::{dice, wsi_dice_files, DiceItem, DiceMode, DiceReport};
use holoslide::model::{train_with_log, ModelConfig, SamplerKind, SegModel, TokenizerKind, TrainConfig, TrainingSlide};
use holoslide::pyramid::{import_image, PyramidImage};
use holoslide::raster::RgbImage;
use holoslide::stitch::{export_overlay, infer_wsi_with, InferOptions, TileConfig};
use holoslide::synth::{generate_synth, SynthSlideSpec};

#[derive(Debug, Parser)]
#[command(name = "holoslide", version, about = "Whole-slide segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a PPM or PNG raster into a tiled pyramid.
    Import(ImportArgs),
    /// Compute the tissue mask of one pyramid level.
    Mask(MaskArgs),
    /// Draw foreground ROIs from a tissue mask.
    Sample(SampleArgs),
    /// Train a segmentation model on a directory of slides.
    Train(TrainArgs),
    /// Segment a slide tile by tile and stitch the result.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Render a mask over the slide as a PPM image.
    ExportOverlay(OverlayArgs),
    /// Generate synthetic slides with exact ground truth.
    Synth(SynthArgs),
    /// Print the version.
    Version,
}

/// `WIDTHxHEIGHT`, e.g. `3840x2160`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Size {
            width: parse(w)?,
            height: parse(h)?,
        })
    }
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Source raster (binary PPM or non-interlaced 8-bit PNG).
    #[arg(long)]
    pub input: PathBuf,
    /// Pyramid file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Tile edge length in pixels.
    #[arg(long, default_value_t = 512)]
    pub tile_size: usize,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Pyramid to threshold.
    #[arg(long)]
    pub input: PathBuf,
    /// Pyramid level the mask is computed at.
    #[arg(long, default_value_t = 0)]
    pub level: usize,
    /// Foreground mask file to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Foreground mask produced by `mask`.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of ROIs to draw.
    #[arg(long)]
    pub count: u64,
    /// ROI size at the mask level.
    #[arg(long, default_value = "3840x2160")]
    pub roi: Size,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum foreground fraction of an accepted ROI.
    #[arg(long, default_value_t = 0.5)]
    pub min_fg: f64,
    /// JSON file receiving the array of ROIs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplerArg {
    Rand,
    Tile,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TokenizerArg {
    Vq,
    Linear,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttentionArg {
    Relu,
    Mhsa,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `<name>.hhpy` slides, each with `<name>.hhsm` ground
    /// truth (or `<name>.<k>.hhsm` per class when `--classes` > 1).
    #[arg(long)]
    pub data: PathBuf,
    /// ROI size at the training level.
    #[arg(long, default_value = "3840x2160")]
    pub roi: Size,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep encoder, codebook and decoder fixed.
    #[arg(long)]
    pub freeze_tokenizer: bool,
    #[arg(long, value_enum, default_value = "rand")]
    pub sampler: SamplerArg,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Pyramid level ROIs are read from.
    #[arg(long, default_value_t = 0)]
    pub level: usize,
    /// Minimum foreground fraction of a training ROI.
    #[arg(long, default_value_t = 0.5)]
    pub min_fg: f64,
    /// Weight of the soft-Dice term; cross-entropy gets the rest.
    #[arg(long, default_value_t = 0.5)]
    pub loss_mix: f64,
    /// Independent binary output heads.
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
    #[arg(long, value_enum, default_value = "vq")]
    pub tokenizer: TokenizerArg,
    /// Patchify factor.
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 1024)]
    pub codebook_size: usize,
    #[arg(long, default_value_t = 256)]
    pub code_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Comma-separated pooling factors of the multi-scale attention.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub scales: Vec<usize>,
    #[arg(long, value_enum, default_value = "relu")]
    pub attention: AttentionArg,
    #[arg(long, default_value_t = 2)]
    pub stage1_blocks: usize,
    #[arg(long, default_value_t = 2)]
    pub stage2_blocks: usize,
    /// Largest token grid side the positional tables cover.
    #[arg(long, default_value_t = 256)]
    pub max_grid: usize,
    /// Print progress to stderr every this many steps; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub level: usize,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "3840x2160")]
    pub tile: Size,
    #[arg(long, default_value_t = 0)]
    pub overlap: usize,
    /// Mask file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Output head to write for multi-class models.
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Tiles with a smaller tissue fraction are not inferred.
    #[arg(long, default_value_t = 0.05)]
    pub min_fg: f64,
    /// Probability cut for the binary mask.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Patch,
    Wsi,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted mask, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth mask, or a directory matched by file name.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value = "wsi")]
    pub mode: ModeArg,
    /// JSON report to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Earlier report to compare against with a paired signed-rank test.
    #[arg(long)]
    pub vs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Pyramid level of the rendered image.
    #[arg(long, default_value_t = 0)]
    pub level: usize,
    /// PPM file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory receiving `slide_NNN.hhpy` and `slide_NNN.hhsm`.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of slides; slide `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 4096)]
    pub width: usize,
    #[arg(long, default_value_t = 4096)]
    pub height: usize,
    /// Target disks per slide.
    #[arg(long, default_value_t = 24)]
    pub disks: usize,
    #[arg(long, default_value_t = 64.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 112.0)]
    pub radius_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub tile_size: usize,
}

/// The clap command tree, for help rendering and introspection.
pub fn command() -> clap::Command {
    Cli::command()
}

/// Parses `argv` (including the program name), runs it and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // Help and version go to stdout, errors to stderr.
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    if !matches!(cmd, Command::Infer(_)) {
        // Only inference is parallel; the global pool may already exist
        // when several commands run in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cmd {
        Command::Import(a) => cmd_import(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportOverlay(a) => cmd_overlay(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Version => {
            println!("holoslide {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn open_pyramid(path: &Path) -> Result<PyramidImage> {
    PyramidImage::open(path).with_context(|| format!("cannot open pyramid {}", path.display()))
}

fn cmd_import(a: ImportArgs) -> Result<()> {
    let img = RgbImage::load(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let p = import_image(&img, a.tile_size, &a.output)?;
    eprintln!("wrote {} ({} levels)", a.output.display(), p.level_count());
    Ok(())
}

fn cmd_mask(a: MaskArgs) -> Result<()> {
    let p = open_pyramid(&a.input)?;
    let mask = match compute_foreground(&p, a.level) {
        Ok(m) => m,
        Err(holoslide::Error::DegenerateHistogram(m)) => {
            eprintln!("warning: no threshold separates the intensities; writing an empty mask");
            *m
        }
        Err(e) => return Err(e.into()),
    };
    mask.save(&a.output)?;
    eprintln!(
        "wrote {} ({:.2}% foreground, threshold {:?})",
        a.output.display(),
        100.0 * mask.fraction(),
        mask.threshold_used
    );
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let mask = ForegroundMask::load(&a.input).with_context(|| format!("cannot read mask {}", a.input.display()))?;
    let cfg = SamplerConfig {
        roi_width: a.roi.width,
        roi_height: a.roi.height,
        min_foreground_fraction: a.min_fg,
        seed: a.seed,
    };
    let rois = (0..a.count)
        .map(|i| sample_roi(&mask, &cfg, i))
        .collect::<holoslide::Result<Vec<_>>>()?;
    fs::write(&a.out, serde_json::to_vec_pretty(&rois)?).with_context(|| format!("cannot write {}", a.out.display()))?;
    eprintln!("wrote {} ROIs to {}", rois.len(), a.out.display());
    Ok(())
}

/// Slides of a training directory with their per-class truth files.
fn training_set(dir: &Path, classes: usize) -> Result<Vec<(PathBuf, Vec<PathBuf>)>> {
    let mut slides: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hhpy"))
        .collect();
    slides.sort();
    if slides.is_empty() {
        bail!("no .hhpy slides in {}", dir.display());
    }
    slides
        .into_iter()
        .map(|s| {
            let truth = if classes == 1 {
                vec![s.with_extension("hhsm")]
            } else {
                (0..classes).map(|k| s.with_extension(format!("{k}.hhsm"))).collect()
            };
            for t in &truth {
                if !t.exists() {
                    bail!("missing ground truth {}", t.display());
                }
            }
            Ok((s, truth))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let model_cfg = ModelConfig {
        patch: a.patch,
        codebook_size: a.codebook_size,
        code_dim: a.code_dim,
        tokenizer: match a.tokenizer {
            TokenizerArg::Vq => TokenizerKind::Vq,
            TokenizerArg::Linear => TokenizerKind::Linear,
        },
        backbone: BackboneConfig {
            attention: AttentionConfig {
                d_model: a.d_model,
                heads: a.heads,
                scales: a.scales.clone(),
                kind: match a.attention {
                    AttentionArg::Relu => AttentionKind::Relu,
                    AttentionArg::Mhsa => AttentionKind::Mhsa,
                },
                ..Default::default()
            },
            stage1_blocks: a.stage1_blocks,
            stage2_blocks: a.stage2_blocks,
            max_grid: a.max_grid,
        },
        classes: a.classes,
        seed: a.seed,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        lr: a.lr,
        steps: a.steps,
        seed: a.seed,
        loss_mix: a.loss_mix,
        freeze_tokenizer: a.freeze_tokenizer,
        sampler: match a.sampler {
            SamplerArg::Rand => SamplerKind::Rand,
            SamplerArg::Tile => SamplerKind::Tile,
        },
        level: a.level,
        ..Default::default()
    };
    let sampler = SamplerConfig {
        roi_width: a.roi.width,
        roi_height: a.roi.height,
        min_foreground_fraction: a.min_fg,
        seed: a.seed,
    };
    let mut slides = Vec::new();
    for (img, truth) in training_set(&a.data, a.classes)? {
        let masks = truth
            .iter()
            .map(|t| WsiMask::load(t).with_context(|| format!("cannot read {}", t.display())))
            .collect::<Result<Vec<_>>>()?;
        slides.push(TrainingSlide::new(open_pyramid(&img)?, masks, a.level)?);
    }
    eprintln!("training on {} slides for {} steps", slides.len(), a.steps);
    let init = SegModel::new(model_cfg)?;
    let (mut acc, mut n) = (0.0, 0u64);
    let every = a.log_every;
    let result = train_with_log(init, &slides, &train_cfg, &sampler, &mut |r| {
        acc += r.loss;
        n += 1;
        if every > 0 && (r.step + 1) % every == 0 {
            eprintln!("step {:>6}  loss {:.4}", r.step + 1, acc / n as f64);
            acc = 0.0;
            n = 0;
        }
    });
    let model = match result {
        Ok(m) => m,
        Err(holoslide::Error::TrainingDiverged { step, last_good }) => {
            let keep = a.out.with_extension("last-good.hhck");
            last_good.save(&keep)?;
            bail!("training diverged at step {step}; last good model saved to {}", keep.display());
        }
        Err(e) => return Err(e.into()),
    };
    model.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let p = open_pyramid(&a.input)?;
    let model = SegModel::load(&a.model).with_context(|| format!("cannot load model {}", a.model.display()))?;
    if a.class >= model.config.classes {
        bail!("--class {} but the model has {} classes", a.class, model.config.classes);
    }
    let tiles = TileConfig {
        tile_width: a.tile.width,
        tile_height: a.tile.height,
        overlap: a.overlap,
        min_fg_fraction: a.min_fg,
    };
    let opts = InferOptions {
        threshold: a.threshold,
        workers: a.workers,
        ..Default::default()
    };
    let mut masks = infer_wsi_with(&p, a.level, &model, &tiles, &opts)?;
    let mask = masks.swap_remove(a.class);
    mask.save(&a.out)?;
    eprintln!("wrote {} ({} foreground pixels)", a.out.display(), mask.bits.count_ones());
    Ok(())
}

/// `(id, pred, gt)` triples; directories are paired by file name.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if !pred.is_dir() {
        if gt.is_dir() {
            bail!("--pred is a file but --gt is a directory");
        }
        return Ok(vec![(stem(pred), pred.to_path_buf(), gt.to_path_buf())]);
    }
    if !gt.is_dir() {
        bail!("--pred is a directory but --gt is not");
    }
    let mut files: Vec<PathBuf> = fs::read_dir(pred)
        .with_context(|| format!("cannot list {}", pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no masks in {}", pred.display());
    }
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().expect("listed file has a name");
            let g = gt.join(name);
            if !g.exists() {
                bail!("no ground truth {} for {}", g.display(), p.display());
            }
            Ok((stem(&p), p, g))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut items = Vec::new();
    for (id, p, g) in eval_pairs(&a.pred, &a.gt)? {
        let d = match a.mode {
            ModeArg::Wsi => wsi_dice_files(&p, &g).with_context(|| format!("scoring {}", p.display()))?,
            ModeArg::Patch => {
                let pm = WsiMask::load(&p).with_context(|| format!("cannot read {}", p.display()))?;
                let gm = WsiMask::load(&g).with_context(|| format!("cannot read {}", g.display()))?;
                if pm.level != gm.level {
                    bail!("{}: level {} against ground truth level {}", id, pm.level, gm.level);
                }
                dice(&pm.bits, &gm.bits)?
            }
        };
        items.push(DiceItem { id, dice: d });
    }
    let mode = match a.mode {
        ModeArg::Patch => DiceMode::Patch,
        ModeArg::Wsi => DiceMode::Wsi,
    };
    let mut report = DiceReport::new(mode, items)?;
    if let Some(vs) = &a.vs {
        let text = fs::read(vs).with_context(|| format!("cannot read report {}", vs.display()))?;
        let other: DiceReport = serde_json::from_slice(&text).with_context(|| format!("bad report {}", vs.display()))?;
        report.compare(&other, &vs.display().to_string())?;
    }
    fs::write(&a.out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("cannot write {}", a.out.display()))?;
    eprintln!("mean dice {:.4} over {} items", report.mean, report.items.len());
    if let Some(w) = &report.wilcoxon {
        eprintln!("signed-rank p = {:.4} ({:?}, n = {})", w.p, w.method, w.n_effective);
    }
    Ok(())
}

fn cmd_overlay(a: OverlayArgs) -> Result<()> {
    let p = open_pyramid(&a.input)?;
    let mask = WsiMask::load(&a.mask).with_context(|| format!("cannot read mask {}", a.mask.display()))?;
    let img = export_overlay(&p, &mask, a.level)?;
    img.save_ppm(&a.out)?;
    eprintln!("wrote {} ({}x{})", a.out.display(), img.width(), img.height());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for i in 0..a.count {
        let spec = SynthSlideSpec {
            width: a.width,
            height: a.height,
            disk_count: a.disks,
            disk_radius: (a.radius_min, a.radius_max),
            seed: a.seed + i as u64,
            ..Default::default()
        };
        let base = a.out.join(format!("slide_{i:03}"));
        let (_, truth) = generate_synth(&spec, a.tile_size, base.with_extension("hhpy"))?;
        truth.save(base.with_extension("hhsm"))?;
        eprintln!("wrote {} ({} target pixels)", base.with_extension("hhpy").display(), truth.bits.count_ones());
    }
    Ok(())
}
