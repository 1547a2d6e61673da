//! Command-line orchestration: reproducible, scriptable subcommands over the
//! full pipeline. Every command materializes its resolved configuration into
//! a run manifest next to its outputs, and all randomness flows from the
//! `--seed` flag.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::autodiff::{grad_check, op_gradcheck_suite, Array};
use crate::enhancer::{fuse, predict_bone, FusionConfig};
use crate::error::{Error, Result};
use crate::imageops::AugmentConfig;
use crate::losses::LossNetwork;
use crate::projector::{
    drr, drr_raw, load_image, make_pair, save_image, save_pgm16, ProjectorConfig,
};
use crate::trainer::{
    split_dataset, train, DataSplit, DatasetManifest, LossKind, PairEntry, Preprocess,
    SplitSpec, TrainConfig,
};
use crate::unet::{build, embedded_config, load_weights, save_weights, UNetConfig};
use crate::volmodel::{
    generate_phantom, load_annotations, load_volume, save_annotations, save_volume, PhantomSpec,
};

pub const THREADS_ENV: &str = "OSTEOFORGE_THREADS";

#[derive(Parser)]
#[command(
    name = "osteoforge",
    version,
    about = "Synthetic radiograph (DRR) generation, bone extraction U-Net training, and bone-enhanced radiograph fusion"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a parametric thorax phantom volume plus nodule annotations.
    Phantom(PhantomArgs),
    /// Project a volume into a DRR image.
    Drr(DrrArgs),
    /// Build (source, bone-target, nodule-mask) training pairs from a
    /// directory of volumes.
    Pairs(PairsArgs),
    /// Train the bone-extraction U-Net on a pairs dataset.
    Train(TrainArgs),
    /// Predict the bone image for a radiograph.
    Predict(PredictArgs),
    /// Fuse the predicted bone image into the input radiograph.
    Enhance(EnhanceArgs),
    /// Evaluate a model on a pairs dataset and report RMSE/PSNR/SSIM/MSSIM.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks over the autodiff op suite.
    Gradcheck(GradcheckArgs),
}

fn parse_triple(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got {s:?}"));
    }
    let mut vals = [0usize; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.trim().parse().map_err(|e| format!("bad dimension {p:?}: {e}"))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected LO,HI, got {s:?}"));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|e| format!("bad HI: {e}"))?;
    Ok((lo, hi))
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Base name of the volume/annotation files.
    #[arg(long, default_value = "phantom")]
    name: String,
    /// Phantom spec JSON; explicit flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Volume dims as X,Y,Z [default: 64,64,64].
    #[arg(long, value_parser = parse_triple)]
    dims: Option<(usize, usize, usize)>,
    /// RNG seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Number of randomly placed lung nodules [default: 0].
    #[arg(long)]
    nodules: Option<usize>,
    /// Nodule radius range in voxels as LO,HI [default: 2,4].
    #[arg(long, value_parser = parse_range)]
    nodule_radius: Option<(f64, f64)>,
    /// Generate an empty (uniform background) phantom.
    #[arg(long)]
    empty: bool,
}

#[derive(Args)]
struct DrrArgs {
    /// Input volume (.vol.json).
    #[arg(long)]
    volume: PathBuf,
    /// Output base path (writes <out>.img.json/.img.raw).
    #[arg(long)]
    out: PathBuf,
    /// Water attenuation coefficient in cm^-1.
    #[arg(long, default_value_t = 0.2)]
    mu_water: f64,
    /// Exposure factor in the exponent.
    #[arg(long, default_value_t = 0.02)]
    beta: f64,
    /// Apply the attenuation formula verbatim, without clamping (HU+1000)
    /// at zero.
    #[arg(long)]
    no_clamp_air: bool,
    /// Also write the raw (pre-normalization) intensities to <out>.raw.img.json.
    #[arg(long)]
    emit_raw: bool,
    /// Also export a 16-bit PGM rendering to <out>.pgm.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct PairsArgs {
    /// Directory scanned for *.vol.json volumes (with optional sibling
    /// *.nod.json annotations).
    #[arg(long)]
    volumes: PathBuf,
    /// Output directory for pair images and dataset.json.
    #[arg(long)]
    out: PathBuf,
    /// Bone window lower bound (HU).
    #[arg(long, default_value_t = 300)]
    lo: i16,
    /// Bone window upper bound (HU).
    #[arg(long, default_value_t = 700)]
    hi: i16,
    #[arg(long, default_value_t = 0.2)]
    mu_water: f64,
    #[arg(long, default_value_t = 0.02)]
    beta: f64,
    /// Force sequential execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct ModelShapeArgs {
    /// Input/output size [default: embedded config, else 512].
    #[arg(long)]
    input_size: Option<usize>,
    /// First-level filter count [default: embedded config, else 32].
    #[arg(long)]
    base_filters: Option<usize>,
    /// Encoder/decoder level count [default: embedded config, else 4].
    #[arg(long)]
    depth: Option<usize>,
    /// Bottleneck dilation rate [default: embedded config, else 2].
    #[arg(long)]
    dilation: Option<usize>,
    /// Input noise sigma (training only) [default: embedded config, else 0.2].
    #[arg(long)]
    noise_std: Option<f64>,
}

impl ModelShapeArgs {
    fn resolve(&self, base: UNetConfig) -> UNetConfig {
        UNetConfig {
            input_size: self.input_size.unwrap_or(base.input_size),
            base_filters: self.base_filters.unwrap_or(base.base_filters),
            depth: self.depth.unwrap_or(base.depth),
            bottleneck_dilation: self.dilation.unwrap_or(base.bottleneck_dilation),
            noise_std: self.noise_std.unwrap_or(base.noise_std),
            init_seed: base.init_seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Pairs manifest (dataset.json).
    #[arg(long)]
    dataset: PathBuf,
    /// Output base path (writes <out>.wts.json/.wts.raw and <out>.history.jsonl).
    #[arg(long)]
    out: PathBuf,
    /// Reconstruction loss.
    #[arg(long, value_enum, default_value_t = CliLoss::L1)]
    loss: CliLoss,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Master seed for init, shuffling, augmentation and noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight on nodule-mask pixels for the weighted L1 loss.
    #[arg(long, default_value_t = 30.0)]
    nodule_weight: f64,
    /// Fraction of the dataset held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[command(flatten)]
    shape: ModelShapeArgs,
    /// Source preprocessing pipeline.
    #[arg(long, value_enum, default_value_t = CliPreprocess::Standardize)]
    preprocess: CliPreprocess,
    /// Loss-network weights for the perceptual loss [default: seeded random].
    #[arg(long)]
    loss_net: Option<PathBuf>,
    /// Horizontal flip probability.
    #[arg(long, default_value_t = 0.5)]
    flip: f64,
    /// Augmentation additive-noise sigma.
    #[arg(long, default_value_t = 0.02)]
    aug_noise: f64,
    /// Intensity bias range (+-fraction).
    #[arg(long, default_value_t = 0.2)]
    bias: f64,
    /// Spatial zoom range (+-fraction).
    #[arg(long, default_value_t = 0.3)]
    zoom: f64,
    /// Unsharp amount (fires with probability 0.5).
    #[arg(long, default_value_t = 0.5)]
    sharpen: f64,
    /// Max |rotation| in degrees.
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    /// Max |shift| as a fraction of each dimension.
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    /// Force sequential execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CliLoss {
    L1,
    WeightedL1,
    Perceptual,
}

impl From<CliLoss> for LossKind {
    fn from(l: CliLoss) -> LossKind {
        match l {
            CliLoss::L1 => LossKind::L1,
            CliLoss::WeightedL1 => LossKind::WeightedL1,
            CliLoss::Perceptual => LossKind::Perceptual,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CliPreprocess {
    Standardize,
    HeClahe,
}

impl From<CliPreprocess> for Preprocess {
    fn from(p: CliPreprocess) -> Preprocess {
        match p {
            CliPreprocess::Standardize => Preprocess::Standardize,
            CliPreprocess::HeClahe => Preprocess::HeClahe,
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    /// Model weights (.wts.json).
    #[arg(long)]
    model: PathBuf,
    /// Input radiograph (.img.json, unit range).
    #[arg(long)]
    image: PathBuf,
    /// Output base path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    shape: ModelShapeArgs,
    #[arg(long, value_enum, default_value_t = CliPreprocess::Standardize)]
    preprocess: CliPreprocess,
    /// Also export a 16-bit PGM rendering.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fusion weight on the predicted bone image.
    #[arg(long, default_value_t = 0.5)]
    weight: f64,
    #[command(flatten)]
    shape: ModelShapeArgs,
    #[arg(long, value_enum, default_value_t = CliPreprocess::Standardize)]
    preprocess: CliPreprocess,
    /// Also write the intermediate bone image to <out>.bone.img.json.
    #[arg(long)]
    emit_bone: bool,
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Pairs manifest (dataset.json).
    #[arg(long)]
    dataset: PathBuf,
    /// Output base path (writes <out>.report.json).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    shape: ModelShapeArgs,
    #[arg(long, value_enum, default_value_t = CliPreprocess::Standardize)]
    preprocess: CliPreprocess,
    /// MS-SSIM scale count (use 3 for 64x64 desk-scale images).
    #[arg(long, default_value_t = 5)]
    scales: usize,
    /// Force sequential execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also check a small end-to-end U-Net (slower).
    #[arg(long, default_value_t = true)]
    full_model: bool,
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: String,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn ensure_parent(base: &Path) -> Result<()> {
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

/// Worker pool sized by OSTEOFORGE_THREADS (deterministic mode forces one
/// worker). Per-item work is independent, so results are identical either way.
fn worker_pool(deterministic: bool) -> Result<rayon::ThreadPool> {
    let threads = if deterministic {
        1
    } else {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0) // 0 lets rayon pick
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))
}

fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<PhantomSpec>(&text).map_err(|e| Error::Format {
                what: "phantom spec",
                path: path.clone(),
                reason: e.to_string(),
            })?
        }
        None if args.empty => PhantomSpec::empty(args.dims.unwrap_or((64, 64, 64))),
        None => PhantomSpec::thorax(args.dims.unwrap_or((64, 64, 64)), 0),
    };
    if args.empty && args.spec.is_some() {
        return Err(Error::invalid("empty", "cannot combine --empty with --spec"));
    }
    if let Some(dims) = args.dims {
        if args.spec.is_some() {
            spec = if args.empty { PhantomSpec::empty(dims) } else { PhantomSpec::thorax(dims, spec.seed) };
        }
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.nodules {
        spec.nodules.count = n;
    }
    if let Some(range) = args.nodule_radius {
        spec.nodules.radius_range = range;
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let (vol, annotations) = generate_phantom(&spec)?;
    let vol_base = args.out.join(&args.name);
    save_volume(&vol, &vol_base)?;
    let nod_path = args.out.join(format!("{}.nod.json", args.name));
    save_annotations(&annotations, &nod_path)?;

    RunManifest {
        subcommand: "phantom".into(),
        config: serde_json::to_value(&spec).expect("spec serializes"),
        seed: spec.seed,
        inputs: args.spec.iter().map(|p| path_str(p)).collect(),
        outputs: vec![
            format!("{}.vol.json", path_str(&vol_base)),
            format!("{}.vol.raw", path_str(&vol_base)),
            path_str(&nod_path),
        ],
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&args.out.join("run_manifest.json"))?;
    println!(
        "phantom: {}x{}x{} volume, {} nodules -> {}",
        vol.dims().0,
        vol.dims().1,
        vol.dims().2,
        annotations.len(),
        args.out.display()
    );
    Ok(())
}

fn strip_img_suffix(p: &Path) -> PathBuf {
    let s = p.to_string_lossy();
    PathBuf::from(s.strip_suffix(".img.json").unwrap_or(&s).to_string())
}

fn cmd_drr(args: &DrrArgs) -> Result<()> {
    let cfg = ProjectorConfig {
        mu_water: args.mu_water,
        beta: args.beta,
        clamp_air: !args.no_clamp_air,
    };
    let vol = load_volume(&args.volume)?;
    let image = drr(&vol, &cfg)?;
    let base = strip_img_suffix(&args.out);
    ensure_parent(&base)?;
    save_image(&image, &base)?;
    let mut outputs = vec![
        format!("{}.img.json", path_str(&base)),
        format!("{}.img.raw", path_str(&base)),
    ];
    if args.emit_raw {
        let raw = drr_raw(&vol, &cfg)?;
        let raw_base = PathBuf::from(format!("{}.raw", path_str(&base)));
        save_image(&raw, &raw_base)?;
        outputs.push(format!("{}.img.json", path_str(&raw_base)));
        outputs.push(format!("{}.img.raw", path_str(&raw_base)));
    }
    if args.pgm {
        let pgm = PathBuf::from(format!("{}.pgm", path_str(&base)));
        save_pgm16(&image, &pgm)?;
        outputs.push(path_str(&pgm));
    }
    RunManifest {
        subcommand: "drr".into(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        seed: 0,
        inputs: vec![path_str(&args.volume)],
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&PathBuf::from(format!("{}.manifest.json", path_str(&base))))?;
    println!("drr: {}x{} image -> {}.img.json", image.width(), image.height(), base.display());
    Ok(())
}

fn cmd_pairs(args: &PairsArgs) -> Result<()> {
    if args.lo > args.hi {
        return Err(Error::invalid("lo", "bone window requires lo <= hi"));
    }
    let cfg = ProjectorConfig { mu_water: args.mu_water, beta: args.beta, clamp_air: true };
    cfg.validate()?;
    let mut volume_paths: Vec<PathBuf> = std::fs::read_dir(&args.volumes)
        .map_err(|e| Error::io(&args.volumes, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".vol.json"))
        .collect();
    volume_paths.sort();
    if volume_paths.is_empty() {
        return Err(Error::invalid("volumes", format!("no *.vol.json files in {}", args.volumes.display())));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let pool = worker_pool(args.deterministic)?;
    let out_dir = args.out.clone();
    let entries: Vec<Result<PairEntry>> = pool.install(|| {
        use rayon::prelude::*;
        volume_paths
            .par_iter()
            .map(|vp| -> Result<PairEntry> {
                let stem = vp
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default()
                    .trim_end_matches(".vol.json")
                    .to_string();
                let vol = load_volume(vp)?;
                let nod_path = vp.with_file_name(format!("{stem}.nod.json"));
                let annotations =
                    if nod_path.exists() { load_annotations(&nod_path)? } else { Vec::new() };
                let pair = make_pair(&vol, &annotations, &cfg, args.lo, args.hi)?;
                save_image(&pair.source, out_dir.join(format!("{stem}.src")))?;
                save_image(&pair.target, out_dir.join(format!("{stem}.tgt")))?;
                save_image(&pair.nodule_mask, out_dir.join(format!("{stem}.msk")))?;
                Ok(PairEntry {
                    source: format!("{stem}.src.img.json"),
                    target: format!("{stem}.tgt.img.json"),
                    mask: format!("{stem}.msk.img.json"),
                })
            })
            .collect()
    });
    let pairs: Vec<PairEntry> = entries.into_iter().collect::<Result<_>>()?;
    let manifest = DatasetManifest { pairs };
    manifest.save(args.out.join("dataset.json"))?;

    RunManifest {
        subcommand: "pairs".into(),
        config: json!({
            "projector": cfg,
            "bone_window": { "lo": args.lo, "hi": args.hi },
            "deterministic": args.deterministic,
        }),
        seed: 0,
        inputs: volume_paths.iter().map(|p| path_str(p)).collect(),
        outputs: vec![path_str(&args.out.join("dataset.json"))],
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&args.out.join("run_manifest.json"))?;
    println!("pairs: {} pairs -> {}", manifest.pairs.len(), args.out.join("dataset.json").display());
    Ok(())
}

fn strip_wts_suffix(p: &Path) -> PathBuf {
    let s = p.to_string_lossy();
    PathBuf::from(s.strip_suffix(".wts.json").unwrap_or(&s).to_string())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.val_fraction) {
        return Err(Error::invalid("val_fraction", "must be in [0, 1)"));
    }
    let manifest = DatasetManifest::load(&args.dataset)?;
    let pairs = manifest.load_pairs(&args.dataset)?;
    if pairs.is_empty() {
        return Err(Error::invalid("dataset", "no pairs in manifest"));
    }
    let unet_cfg = UNetConfig {
        init_seed: args.seed,
        ..args.shape.resolve(UNetConfig::default())
    };
    let train_cfg = TrainConfig {
        batch_size: args.batch_size,
        learning_rate: args.lr,
        epochs: args.epochs,
        loss: args.loss.into(),
        nodule_weight: args.nodule_weight,
        preprocess: args.preprocess.into(),
        seed: args.seed,
        augment: AugmentConfig {
            horizontal_flip: args.flip,
            noise_std: args.aug_noise,
            bias_range: args.bias,
            zoom_range: args.zoom,
            sharpen_alpha: args.sharpen,
            rotation_deg: args.rotation,
            shift_range: args.shift,
            seed: args.seed,
        },
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let split = SplitSpec {
        fractions: (1.0 - args.val_fraction, args.val_fraction, 0.0),
        seed: args.seed,
    };
    let (train_pairs, val_pairs, _) = split_dataset(&pairs, &split)?;
    let data = DataSplit { train: train_pairs, val: val_pairs };

    let loss_net = match &args.loss_net {
        Some(path) => Some(LossNetwork::from_file(path)?),
        None => None,
    };
    let mut model = build(&unet_cfg)?;
    let history = train(&mut model, &data, &train_cfg, loss_net.as_ref())?;
    for e in &history.epochs {
        println!(
            "epoch {:>4}: train {:.6} val {:.6} ({:.2}s)",
            e.epoch, e.train_loss, e.val_loss, e.wall_time_s
        );
    }

    let base = strip_wts_suffix(&args.out);
    ensure_parent(&base)?;
    save_weights(&model, &base)?;
    let history_path = PathBuf::from(format!("{}.history.jsonl", path_str(&base)));
    std::fs::write(&history_path, history.to_jsonl()).map_err(|e| Error::io(&history_path, e))?;

    RunManifest {
        subcommand: "train".into(),
        config: json!({
            "unet": unet_cfg,
            "train": train_cfg,
            "val_fraction": args.val_fraction,
            "loss_net": args.loss_net.as_ref().map(|p| path_str(p)),
            "deterministic": args.deterministic,
        }),
        seed: args.seed,
        inputs: vec![path_str(&args.dataset)],
        outputs: vec![
            format!("{}.wts.json", path_str(&base)),
            format!("{}.wts.raw", path_str(&base)),
            path_str(&history_path),
        ],
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&PathBuf::from(format!("{}.manifest.json", path_str(&base))))?;
    println!(
        "train: {} params, {} epochs -> {}.wts.json",
        model.param_count(),
        history.epochs.len(),
        base.display()
    );
    Ok(())
}

fn load_model(path: &Path, shape: &ModelShapeArgs) -> Result<crate::unet::Model> {
    let base = embedded_config(path)?.unwrap_or_default();
    let cfg = shape.resolve(base);
    load_weights(path, &cfg)
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.model, &args.shape)?;
    let image = load_image(&args.image)?;
    let bone = predict_bone(&model, &image, args.preprocess.into())?;
    let base = strip_img_suffix(&args.out);
    ensure_parent(&base)?;
    save_image(&bone, &base)?;
    let mut outputs = vec![
        format!("{}.img.json", path_str(&base)),
        format!("{}.img.raw", path_str(&base)),
    ];
    if args.pgm {
        let pgm = PathBuf::from(format!("{}.pgm", path_str(&base)));
        save_pgm16(&bone, &pgm)?;
        outputs.push(path_str(&pgm));
    }
    RunManifest {
        subcommand: "predict".into(),
        config: json!({
            "unet": model.config(),
            "preprocess": Preprocess::from(args.preprocess),
        }),
        seed: 0,
        inputs: vec![path_str(&args.model), path_str(&args.image)],
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&PathBuf::from(format!("{}.manifest.json", path_str(&base))))?;
    println!("predict: bone image -> {}.img.json", base.display());
    Ok(())
}

fn cmd_enhance(args: &EnhanceArgs) -> Result<()> {
    let model = load_model(&args.model, &args.shape)?;
    let image = load_image(&args.image)?;
    let bone = predict_bone(&model, &image, args.preprocess.into())?;
    let fusion = FusionConfig { weight: args.weight, clamp: true };
    let enhanced = fuse(&image, &bone, &fusion)?;
    let base = strip_img_suffix(&args.out);
    ensure_parent(&base)?;
    save_image(&enhanced, &base)?;
    let mut outputs = vec![
        format!("{}.img.json", path_str(&base)),
        format!("{}.img.raw", path_str(&base)),
    ];
    if args.emit_bone {
        let bone_base = PathBuf::from(format!("{}.bone", path_str(&base)));
        save_image(&bone, &bone_base)?;
        outputs.push(format!("{}.img.json", path_str(&bone_base)));
    }
    if args.pgm {
        let pgm = PathBuf::from(format!("{}.pgm", path_str(&base)));
        save_pgm16(&enhanced, &pgm)?;
        outputs.push(path_str(&pgm));
    }
    RunManifest {
        subcommand: "enhance".into(),
        config: json!({
            "unet": model.config(),
            "fusion": fusion,
            "preprocess": Preprocess::from(args.preprocess),
        }),
        seed: 0,
        inputs: vec![path_str(&args.model), path_str(&args.image)],
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&PathBuf::from(format!("{}.manifest.json", path_str(&base))))?;
    println!("enhance: fused image (w = {}) -> {}.img.json", args.weight, base.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.model, &args.shape)?;
    let manifest = DatasetManifest::load(&args.dataset)?;
    let pairs = manifest.load_pairs(&args.dataset)?;
    let metric_cfg = crate::quality::MetricConfig::with_scales(args.scales);
    let pool = worker_pool(args.deterministic)?;
    let preprocess: Preprocess = args.preprocess.into();
    // Prediction per pair is independent; rows are gathered in index order.
    let rows: Vec<Result<(crate::RadiographImage, crate::RadiographImage)>> = pool.install(|| {
        use rayon::prelude::*;
        pairs
            .par_iter()
            .map(|p| {
                let pred = crate::trainer::predict_unit(&model, &p.source, preprocess)?;
                Ok((pred, p.target.clone()))
            })
            .collect()
    });
    let rows: Vec<_> = rows.into_iter().collect::<Result<_>>()?;
    let report = crate::quality::evaluate_set(&rows, &metric_cfg)?;

    let base = {
        let s = args.out.to_string_lossy();
        PathBuf::from(s.strip_suffix(".report.json").unwrap_or(&s).to_string())
    };
    ensure_parent(&base)?;
    let report_path = PathBuf::from(format!("{}.report.json", path_str(&base)));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    print!("{}", report.to_table());

    RunManifest {
        subcommand: "eval".into(),
        config: json!({
            "unet": model.config(),
            "metrics": metric_cfg,
            "preprocess": preprocess,
            "deterministic": args.deterministic,
        }),
        seed: 0,
        inputs: vec![path_str(&args.model), path_str(&args.dataset)],
        outputs: vec![path_str(&report_path)],
        tool_version: env!("CARGO_PKG_VERSION").into(),
    }
    .write(&PathBuf::from(format!("{}.manifest.json", path_str(&base))))?;
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut all_ok = true;
    for r in op_gradcheck_suite() {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<22} max rel error {:.3e} (bound {:.0e})", r.name, r.max_rel_error, r.bound);
        all_ok &= r.passed();
    }
    if args.full_model {
        let cfg = UNetConfig {
            input_size: 8,
            base_filters: 2,
            depth: 2,
            bottleneck_dilation: 2,
            noise_std: 0.2,
            init_seed: 11,
        };
        let model = build(&cfg)?;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let mut inputs: Vec<Array> = vec![Array::from_vec(&[1, 1, 8, 8], data)?];
        // Jitter off the zero-bias init so no ReLU sits exactly on its kink.
        inputs.extend(model.params().iter().map(|p| {
            let mut a = p.value.clone();
            for v in a.data_mut() {
                let j: f64 = rng.gen_range(0.01..0.05);
                *v += if rng.gen::<bool>() { j } else { -j };
            }
            a
        }));
        let err = grad_check(
            &inputs,
            |g, ids| {
                let out = model.forward_with(g, ids[0], &ids[1..], true, 77).unwrap();
                g.mean(out)
            },
            1e-5,
        );
        let ok = err < 1e-3;
        println!(
            "{} {:<22} max rel error {:.3e} (bound 1e-3)",
            if ok { "PASS" } else { "FAIL" },
            "unet end-to-end",
            err
        );
        all_ok &= ok;
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::invalid("gradcheck", "one or more checks failed"))
    }
}

/// Parses argv and runs the selected subcommand.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::parse_from(argv);
    match &cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Drr(args) => cmd_drr(args),
        Command::Pairs(args) => cmd_pairs(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Enhance(args) => cmd_enhance(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}
