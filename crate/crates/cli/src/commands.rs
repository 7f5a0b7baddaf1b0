use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;

use fundus_core::degradation::{make_seqlc, DegradationConfig};
use fundus_core::evaluation::{evaluate_masks, evaluate_pairs, list_images, wfqa, QualityLabelFile};
use fundus_core::image_io::{load_raw, save_image, save_raster, DEFAULT_SIDE};
use fundus_core::pyramid::{laplacian_decompose, DEFAULT_LEVELS};
use fundus_core::seed::id_from_str;
use fundus_core::synthetic::{synthetic_corpus, SyntheticConfig};
use fundus_core::Image;
use fundus_model::checkpoint;
use fundus_model::training::{train_loop, worker_pool, LoopOptions, TrainConfig};

use crate::{cache, Cmd, Common};

pub fn dispatch(cmd: Cmd, common: &Common) -> Result<()> {
    match cmd {
        Cmd::Degrade(a) => degrade(a, common),
        Cmd::Train(a) => train(a, common),
        Cmd::Enhance(a) => enhance(a, common),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Wfqa(a) => run_wfqa(a),
        Cmd::Pyramid(a) => pyramid(a),
    }
}

/// A single image file, or every image in a directory in name order.
fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let files: Vec<PathBuf> = list_images(input)?.into_values().collect();
        if files.is_empty() {
            bail!(fundus_core::Error::Config(format!("no images in {}", input.display())));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        bail!(fundus_core::Error::io(
            input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| fundus_core::Error::io(dir, e).into())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct DegradeArgs {
    /// Image file or directory of images
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Degraded variants per image (K)
    #[arg(long, default_value_t = 2)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Working side length after crop and resize
    #[arg(long, default_value_t = DEFAULT_SIDE)]
    pub side: usize,
    /// Comma-separated degradation classes to enable
    #[arg(long, default_value = "transmission,blur,artifact")]
    pub kinds: String,
    /// Probability that each enabled class is applied
    #[arg(long)]
    pub apply_probability: Option<f64>,
}

fn degradation_config(kinds: &str, apply_probability: Option<f64>, seed: u64) -> Result<DegradationConfig> {
    let mut cfg = DegradationConfig {
        enable_blur: false,
        enable_artifact: false,
        enable_transmission: false,
        seed,
        ..DegradationConfig::default()
    };
    for k in kinds.split(',').map(str::trim).filter(|k| !k.is_empty()) {
        match k {
            "blur" => cfg.enable_blur = true,
            "artifact" => cfg.enable_artifact = true,
            "transmission" => cfg.enable_transmission = true,
            other => bail!(fundus_core::Error::Config(format!("unknown degradation class `{other}`"))),
        }
    }
    if let Some(p) = apply_probability {
        cfg.apply_probability = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn degrade(a: DegradeArgs, common: &Common) -> Result<()> {
    let cfg = degradation_config(&a.kinds, a.apply_probability, a.seed)?;
    let inputs = collect_inputs(&a.input)?;
    create_dir(&a.out)?;
    let pool = worker_pool(common.workers)?;
    let groups = pool.install(|| {
        inputs
            .par_iter()
            .map(|p| -> Result<_> {
                let img = cache::load(p, a.side)?;
                let id = id_from_str(&stem(p));
                Ok((p, id, make_seqlc(&img, &cfg, a.seq_len, id)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let log_path = a.out.join("recipes.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| fundus_core::Error::io(&log_path, e))?);
    for (path, id, group) in &groups {
        let name = stem(path);
        for (k, (variant, recipe)) in group.variants.iter().zip(&group.recipes).enumerate() {
            let file = format!("{name}_k{k}.png");
            save_image(variant, a.out.join(&file))?;
            let record = serde_json::json!({
                "image": name,
                "image_id": id,
                "k": k,
                "seed": a.seed,
                "file": file,
                "recipe": recipe,
            });
            writeln!(log, "{record}").map_err(|e| fundus_core::Error::io(&log_path, e))?;
        }
    }
    log.flush().map_err(|e| fundus_core::Error::io(&log_path, e))?;
    println!("wrote {} variants for {} images to {}", groups.len() * a.seq_len, groups.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Directory of clean training images
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many procedurally drawn fundus-like images instead of --data
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<usize>,
    /// Output directory for the checkpoint and metrics log
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// First epoch of the linear learning-rate decay
    #[arg(long)]
    pub decay_start: Option<usize>,
    /// SeqLC groups per step
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the feature consistency term
    #[arg(long)]
    pub lambda_c: Option<f64>,
    /// Degraded variants per clean image (K)
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Pyramid depth L
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub channel_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Epochs between checkpoints (0 = only at the end)
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// No per-epoch progress on stderr
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let epochs = self.epochs.unwrap_or(d.epochs);
        // keep the default decay fraction when only the epoch count is given
        let decay = self
            .decay_start
            .unwrap_or_else(|| (epochs * d.decay_start_epoch).div_ceil(d.epochs).max(1));
        TrainConfig {
            epochs,
            decay_start_epoch: decay,
            base_lr: self.lr.unwrap_or(d.base_lr),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lambda_c: self.lambda_c.unwrap_or(d.lambda_c),
            seq_len: self.seq_len.unwrap_or(d.seq_len),
            seed: self.seed.unwrap_or(d.seed),
            side: self.side.unwrap_or(d.side),
            levels: self.levels.unwrap_or(d.levels),
            base_channels: self.base_channels.unwrap_or(d.base_channels),
            channel_cap: self.channel_cap.unwrap_or(d.channel_cap),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            degradation: d.degradation,
        }
    }
}

fn train(a: TrainArgs, common: &Common) -> Result<()> {
    let cfg = a.config();
    cfg.validate()?;
    let corpus: Vec<Image> = match (&a.data, a.synthetic) {
        (_, Some(n)) => synthetic_corpus(
            &SyntheticConfig {
                side: cfg.side,
                ..SyntheticConfig::default()
            },
            n,
            cfg.seed,
        ),
        (Some(dir), None) => {
            let files = collect_inputs(dir)?;
            let pool = worker_pool(common.workers)?;
            pool.install(|| {
                files
                    .par_iter()
                    .map(|p| cache::load(p, cfg.side).with_context(|| format!("loading {}", p.display())))
                    .collect::<Result<Vec<_>>>()
            })?
        }
        (None, None) => unreachable!("clap requires --data or --synthetic"),
    };
    let opts = LoopOptions {
        out_dir: a.out.clone(),
        resume: a.resume.clone(),
        workers: common.workers,
        quiet: a.quiet,
    };
    let outcome = train_loop(&corpus, &cfg, &opts)?;
    println!("checkpoint={}", outcome.checkpoint.display());
    Ok(())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; files keep their input names
    #[arg(long)]
    pub out: PathBuf,
}

fn enhance(a: EnhanceArgs, common: &Common) -> Result<()> {
    let state = checkpoint::load(&a.checkpoint)?;
    let side = state.config.side;
    let net = state.network;
    let inputs = collect_inputs(&a.input)?;
    create_dir(&a.out)?;
    let pool = worker_pool(common.workers)?;
    pool.install(|| {
        inputs.par_iter().try_for_each(|p| -> Result<()> {
            let img = cache::load(p, side)?;
            let out = net.enhance(&img)?;
            let name = p.file_name().context("input without a file name")?;
            save_image(&out, a.out.join(name))?;
            Ok(())
        })
    })?;
    println!("enhanced {} images into {}", inputs.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    /// Directory of predictions (enhanced images or binary masks)
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of references with matching file names
    #[arg(long)]
    pub reference: PathBuf,
    /// `image` for SSIM/PSNR, `mask` for IoU/DSC
    #[arg(long, default_value = "image", value_parser = ["image", "mask"])]
    pub metric: String,
    /// Crop and resize both images to this side before comparing
    #[arg(long)]
    pub side: Option<usize>,
    /// CSV report path
    #[arg(long)]
    pub out: PathBuf,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let table = if a.metric == "mask" {
        evaluate_masks(&a.pred, &a.reference)?
    } else {
        evaluate_pairs(&a.pred, &a.reference, a.side)?
    };
    let file = File::create(&a.out).map_err(|e| fundus_core::Error::io(&a.out, e))?;
    table.write_csv(BufWriter::new(file))?;
    for name in &table.unmatched {
        eprintln!("warning: {name} has no counterpart");
    }
    println!(
        "{}={:.6} {}={:.6} n={}",
        table.columns[0],
        table.mean[0],
        table.columns[1],
        table.mean[1],
        table.rows.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct WfqaArgs {
    /// CSV with `id,label` rows, labels Good/Usable/Reject
    #[arg(long)]
    pub labels: PathBuf,
}

fn run_wfqa(a: WfqaArgs) -> Result<()> {
    let labels = QualityLabelFile::from_path(&a.labels)?;
    let (fiqa, wfqa) = wfqa(&labels)?;
    println!("fiqa={fiqa:.6} wfqa={wfqa:.6} n={}", labels.records.len());
    Ok(())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PyramidArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    pub levels: usize,
    /// Crop and resize to this side first; defaults to the native size
    #[arg(long)]
    pub side: Option<usize>,
    /// Output directory (defaults to the input's directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn pyramid(a: PyramidArgs) -> Result<()> {
    let raster = match a.side {
        Some(side) => cache::load(&a.input, side)?.pixels,
        None => load_raw(&a.input)?,
    };
    let stack = laplacian_decompose(&raster, a.levels)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.input.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    let name = stem(&a.input);
    let manifest_path = out.join(format!("{name}_pyramid.txt"));
    let mut manifest = String::from("level kind channels height width file\n");
    for (l, level) in stack.levels.iter().enumerate() {
        let residual = l == stack.depth;
        // band-pass levels are centred on mid-grey so negative detail stays visible
        let shown = if residual { level.clone() } else { level + 0.5 };
        let file = format!("{name}_level{l}.png");
        save_raster(&shown, &out.join(&file))?;
        let (c, h, w) = level.dim();
        let kind = if residual { "lowpass" } else { "band" };
        manifest.push_str(&format!("{l} {kind} {c} {h} {w} {file}\n"));
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| fundus_core::Error::io(&manifest_path, e))?;
    println!("wrote {} levels and {}", stack.levels.len(), manifest_path.display());
    Ok(())
}
