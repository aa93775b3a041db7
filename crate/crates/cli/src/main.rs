//! `sqlc` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 model or hash error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use sqlc::bundle::{ModelBundle, STAIN_ENCODER_CODEC};
use sqlc::codec::{stain_encoder_bundle, LearnedCodec};
use sqlc::container::{CodecId, Container};
use sqlc::data_io::{self, load_entries, Manifest, ManifestEntry, Split, DEFAULT_TISSUE_THRESHOLD};
use sqlc::downstream::{self, DownstreamConfig, LabeledPatch, Setting};
use sqlc::evaluation::{self, CodecHandle};
use sqlc::models::SeModel;
use sqlc::stain::{self, NormRanges, StainMatrix};
use sqlc::training::{self, NicmContext, TrainConfig, Variant};
use sqlc::{jpeg, BundleError, Error, FormatError, Tensor};

#[derive(Parser)]
#[command(name = "sqlc", version, about = "Stain-aware learned codec for HE histopathology patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Nicm3,
    Nicm6,
    Sqlc,
    Jpeg,
}

impl From<CodecArg> for CodecId {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Nicm3 => CodecId::Nicm3,
            CodecArg::Nicm6 => CodecId::Nicm6,
            CodecArg::Sqlc => CodecId::Sqlc,
            CodecArg::Jpeg => CodecId::Jpeg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON lines) with train and val entries.
    #[arg(long)]
    data: PathBuf,
    /// Flat key=value training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
    quality: Option<u8>,
    /// Output model bundle; the training log goes next to it as CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the stain encoder.
    TrainSe(TrainArgs),
    /// Train a NICM variant; sqlc needs the stain encoder via --model.
    TrainNicm {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum, default_value = "nicm3")]
        codec: CodecArg,
        /// Train the stain-augmented three-channel variant.
        #[arg(long)]
        augmented: bool,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Finetune an SQLC bundle with the stain-decoder distance term.
    FinetuneSqlc {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        model: PathBuf,
    },
    Compress {
        input: PathBuf,
        #[arg(long, value_enum)]
        codec: CodecArg,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
        quality: u8,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Decompress {
        input: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate-distortion sweep; writes rd.csv and rd.svg into --out.
    EvalRd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Learned model bundles, any codec and quality.
        #[arg(long)]
        model: Vec<PathBuf>,
        /// Skip the JPEG sweep.
        #[arg(long)]
        no_jpeg: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// H-channel squared-difference maps of reconstructions.
    DiffH {
        original: PathBuf,
        reconstructions: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification proxy across compression settings.
    Downstream {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Vec<PathBuf>,
        /// JPEG quality indices to include.
        #[arg(long = "jpeg-quality")]
        jpeg_quality: Vec<u8>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut a large image into tissue patches and write a manifest.
    Tile {
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 224)]
        patch: usize,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TISSUE_THRESHOLD)]
        threshold: f64,
        /// Assign a source-level validation split of this fraction.
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the H, E and residual concentration planes of an image.
    StainSplit {
        input: PathBuf,
        /// Estimate the stain matrix from the image instead of the default.
        #[arg(long)]
        estimate: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error tagged with the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const MODEL: u8 = 3;

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Bundle(_) => MODEL,
        Error::Format(
            FormatError::HashMismatch { .. } | FormatError::CodecMismatch { .. } | FormatError::QualityMismatch { .. },
        ) => MODEL,
        Error::Config(_) => USAGE,
        _ => DATA,
    }
}

fn classify(error: anyhow::Error) -> Failure {
    let code = error.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(DATA, code_of);
    Failure { code, error }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

trait Tag<T> {
    fn model_err(self) -> Result<T>;
    fn usage_err(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for std::result::Result<T, E> {
    fn model_err(self) -> Result<T> {
        self.map_err(|e| Failure { code: MODEL, error: e.into() })
    }

    fn usage_err(self) -> Result<T> {
        self.map_err(|e| Failure { code: USAGE, error: e.into() })
    }
}

fn lift<T>(r: anyhow::Result<T>) -> Result<T> {
    r.map_err(classify)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainSe(args) => train_se(&args),
        Command::TrainNicm { train, codec, augmented, model } => train_nicm(&train, codec, augmented, model.as_deref()),
        Command::FinetuneSqlc { train, model } => finetune(&train, &model),
        Command::Compress { input, codec, quality, model, out } => compress(&input, codec.into(), quality, model.as_deref(), &out),
        Command::Decompress { input, model, out } => decompress(&input, model.as_deref(), &out),
        Command::EvalRd { data, split, model, no_jpeg, out } => eval_rd(&data, split, &model, no_jpeg, &out),
        Command::DiffH { original, reconstructions, out } => diff_h(&original, &reconstructions, &out),
        Command::Downstream { data, model, jpeg_quality, seed, steps, out } => {
            downstream(&data, &model, &jpeg_quality, seed, steps, &out)
        }
        Command::Tile { input, patch, stride, threshold, val_fraction, seed, out } => {
            tile(&input, patch, stride.unwrap_or(patch), threshold, val_fraction, seed, &out)
        }
        Command::StainSplit { input, estimate, out } => stain_split(&input, estimate, &out),
    }
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load(path).with_context(|| format!("loading model {}", path.display())).model_err()
}

fn load_codec(path: &Path) -> Result<LearnedCodec> {
    let bundle = load_bundle(path)?;
    LearnedCodec::from_bundle(&bundle).with_context(|| format!("model {}", path.display())).model_err()
}

fn load_se(path: &Path) -> Result<(SeModel, ModelBundle)> {
    let bundle = load_bundle(path)?;
    let se = if bundle.codec == STAIN_ENCODER_CODEC || bundle.codec == CodecId::Sqlc as u8 {
        SeModel::from_bundle(&bundle)
    } else {
        Err(BundleError::WrongCodec { expected: STAIN_ENCODER_CODEC, found: bundle.codec })
    };
    Ok((se.with_context(|| format!("stain encoder in {}", path.display())).model_err()?, bundle))
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    lift(Manifest::read(path).with_context(|| format!("reading manifest {}", path.display())))
}

fn load_split(path: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Tensor>> {
    let entries = manifest.with_split(split);
    if entries.is_empty() {
        return Err(Failure { code: DATA, error: anyhow!("manifest {} has no {split:?} entries", path.display()) });
    }
    lift(load_entries(path, &entries).context("loading patches"))
}

fn train_config(args: &TrainArgs, variant: Variant) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).usage_err()?;
            let mut cfg = TrainConfig::desk(variant);
            cfg.set("variant", variant.name()).usage_err()?;
            cfg.apply(&text).with_context(|| format!("config {}", p.display())).usage_err()?
        }
        None => TrainConfig::desk(variant),
    };
    if cfg.variant != variant {
        return Err(Failure { code: USAGE, error: anyhow!("config variant {} does not match command ({variant})", cfg.variant) });
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(q) = args.quality {
        cfg.quality = q;
    }
    cfg.validate().usage_err()?;
    info!("training config:\n{}", cfg.to_text().trim_end());
    Ok(cfg)
}

fn train_data(args: &TrainArgs) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let m = read_manifest(&args.data)?;
    Ok((load_split(&args.data, &m, Split::Train)?, load_split(&args.data, &m, Split::Val)?))
}

fn write_log(out: &Path, log: &training::TrainLog) -> Result<()> {
    let p = out.with_extension("csv");
    lift(log.write(&p).context("writing training log"))?;
    info!("log written to {}", p.display());
    Ok(())
}

fn save(bundle: &ModelBundle, out: &Path) -> Result<()> {
    lift(bundle.save(out).with_context(|| format!("writing {}", out.display())))?;
    info!("model written to {} (hash {:016x})", out.display(), bundle.hash());
    Ok(())
}

fn train_se(args: &TrainArgs) -> Result<()> {
    let cfg = train_config(args, Variant::Se)?;
    let (train, val) = train_data(args)?;
    let (matrix, ranges) = (StainMatrix::ruifrok().quantized(), NormRanges::default());
    let (se, log) = lift(training::train_se(&train, &val, &cfg, &matrix, &ranges).context("training stain encoder"))?;
    save(&stain_encoder_bundle(&se, ranges, matrix), &args.out)?;
    write_log(&args.out, &log)
}

fn train_nicm(args: &TrainArgs, codec: CodecArg, augmented: bool, model: Option<&Path>) -> Result<()> {
    let variant = match (codec, augmented) {
        (CodecArg::Nicm3, false) => Variant::Nicm3,
        (CodecArg::Nicm3, true) => Variant::NicmAugmented,
        (CodecArg::Nicm6, false) => Variant::Nicm6,
        (CodecArg::Sqlc, false) => Variant::Sqlc,
        (CodecArg::Jpeg, _) => return Err(Failure { code: USAGE, error: anyhow!("jpeg is not trainable") }),
        _ => return Err(Failure { code: USAGE, error: anyhow!("--augmented applies to nicm3 only") }),
    };
    let cfg = train_config(args, variant)?;
    let se = match (variant, model) {
        (Variant::Sqlc, Some(p)) => Some(load_se(p)?),
        (Variant::Sqlc, None) => return Err(Failure { code: USAGE, error: anyhow!("sqlc needs the stain encoder bundle via --model") }),
        _ => None,
    };
    let (matrix, ranges) = match &se {
        Some((_, b)) => (b.stain_matrix, b.ranges),
        None => (StainMatrix::ruifrok().quantized(), NormRanges::default()),
    };
    let (train, val) = train_data(args)?;
    let ctx = NicmContext { matrix: &matrix, ranges: &ranges, se: se.as_ref().map(|(s, _)| s) };
    let (nicm, log) = lift(training::train_nicm(&train, &val, &cfg, ctx).context("training NICM"))?;
    let codec = variant.codec().expect("NICM variant");
    let learned = lift(LearnedCodec::new(codec, cfg.quality, se.map(|(s, _)| s), nicm, ranges, matrix).map_err(Into::into))?;
    save(&lift(learned.to_bundle().map_err(Into::into))?, &args.out)?;
    write_log(&args.out, &log)
}

fn finetune(args: &TrainArgs, model: &Path) -> Result<()> {
    let codec = load_codec(model)?;
    if codec.codec != CodecId::Sqlc {
        return Err(Failure { code: MODEL, error: anyhow!("{} holds a {} model, not sqlc", model.display(), codec.codec) });
    }
    let mut cfg = train_config(args, Variant::Sqlc)?;
    if args.quality.is_none() {
        cfg.quality = codec.quality;
    }
    let (train, val) = train_data(args)?;
    let se = codec.se.clone().expect("sqlc codec carries a stain encoder");
    let (nicm, report) = lift(
        training::finetune_sqlc(&se, codec.nicm.clone(), &train, &val, &cfg, &codec.matrix, &codec.ranges)
            .context("finetuning"),
    )?;
    if report.se_hash.0 != report.se_hash.1 || report.max_se_grad != 0.0 {
        return Err(Failure { code: MODEL, error: anyhow!("stain encoder changed during finetuning") });
    }
    info!("stain encoder hash {:016x} unchanged", report.se_hash.0);
    let learned = lift(LearnedCodec::new(CodecId::Sqlc, cfg.quality, Some(se), nicm, codec.ranges, codec.matrix).map_err(Into::into))?;
    save(&lift(learned.to_bundle().map_err(Into::into))?, &args.out)?;
    write_log(&args.out, &report.log)
}

fn read_image(path: &Path) -> Result<Tensor> {
    lift(data_io::read_image(path).map_err(Into::into))
}

fn handle_for(codec: CodecId, quality: u8, model: Option<&Path>) -> Result<CodecHandle> {
    if codec == CodecId::Jpeg {
        return Ok(CodecHandle::Jpeg { index: quality });
    }
    let path = model.ok_or_else(|| Failure { code: USAGE, error: anyhow!("--model is required for {codec}") })?;
    let learned = load_codec(path)?;
    if learned.codec != codec {
        return Err(Failure { code: MODEL, error: anyhow!("{} holds a {} model, not {codec}", path.display(), learned.codec) });
    }
    if learned.quality != quality {
        return Err(Failure {
            code: MODEL,
            error: anyhow!("{} was trained for quality {}, not {quality}", path.display(), learned.quality),
        });
    }
    Ok(CodecHandle::Learned(Box::new(learned)))
}

fn compress(input: &Path, codec: CodecId, quality: u8, model: Option<&Path>, out: &Path) -> Result<()> {
    let handle = handle_for(codec, quality, model)?;
    let img = read_image(input)?;
    let container = lift(handle.compress(&img).context("compressing"))?;
    let bytes = lift(container.to_bytes().context("serializing container"))?;
    lift(std::fs::write(out, &bytes).with_context(|| format!("writing {}", out.display())))?;
    let [_, h, w] = *img.shape() else { unreachable!("read_image yields [3,H,W]") };
    let bpp = 8.0 * container.payload.len() as f64 / (w * h) as f64;
    info!("{}: {} bytes, {bpp:.4} bpp, {}", out.display(), bytes.len(), sqlc::metrics::ratio_label(bpp));
    Ok(())
}

fn decompress(input: &Path, model: Option<&Path>, out: &Path) -> Result<()> {
    let bytes = lift(std::fs::read(input).with_context(|| format!("reading {}", input.display())))?;
    let container = lift(Container::from_bytes(&bytes).with_context(|| format!("parsing {}", input.display())))?;
    let img = if container.header.codec == CodecId::Jpeg {
        lift(jpeg::decompress(&container).map_err(Into::into))?
    } else {
        let path = model.ok_or_else(|| Failure { code: USAGE, error: anyhow!("--model is required for {}", container.header.codec) })?;
        let codec = load_codec(path)?;
        lift(codec.decompress(&container).context("decompressing"))?
    };
    lift(data_io::write_image(&img, out).with_context(|| format!("writing {}", out.display())))
}

fn split_images(data: &Path, split: SplitArg) -> Result<Vec<Tensor>> {
    let m = read_manifest(data)?;
    match split {
        SplitArg::Train => load_split(data, &m, Split::Train),
        SplitArg::Val => load_split(data, &m, Split::Val),
        SplitArg::All => {
            let all: Vec<&ManifestEntry> = m.entries.iter().collect();
            if all.is_empty() {
                return Err(Failure { code: DATA, error: anyhow!("manifest {} is empty", data.display()) });
            }
            lift(load_entries(data, &all).context("loading patches"))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    lift(std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())))
}

fn eval_rd(data: &Path, split: SplitArg, models: &[PathBuf], no_jpeg: bool, out: &Path) -> Result<()> {
    let corpus = split_images(data, split)?;
    let mut handles = Vec::new();
    for p in models {
        handles.push(CodecHandle::Learned(Box::new(load_codec(p)?)));
    }
    if !no_jpeg {
        if jpeg::available() {
            handles.extend((1..=8).map(|index| CodecHandle::Jpeg { index }));
        } else {
            warn!("JPEG adapter unavailable; JPEG rows skipped");
        }
    }
    handles.sort_by_key(|h| (h.codec(), h.quality()));
    let points = lift(evaluation::eval_rd(&corpus, &handles).context("evaluating"))?;
    for (codec, lo, hi) in evaluation::monotonicity_violations(&points, 0.01, 0.05) {
        warn!("{codec}: quality {hi} does not improve on quality {lo}");
    }
    create_dir(out)?;
    let csv = out.join("rd.csv");
    lift(std::fs::write(&csv, evaluation::rd_csv(&points)).with_context(|| format!("writing {}", csv.display())))?;
    let svg = out.join("rd.svg");
    lift(std::fs::write(&svg, evaluation::rd_svg(&points)).with_context(|| format!("writing {}", svg.display())))?;
    info!("{} RD points written to {}", points.len(), csv.display());
    Ok(())
}

fn diff_h(original: &Path, reconstructions: &[PathBuf], out: &Path) -> Result<()> {
    if reconstructions.is_empty() {
        return Err(Failure { code: USAGE, error: anyhow!("no reconstructions given") });
    }
    let base = read_image(original)?;
    let recs = reconstructions.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    let (matrix, ranges) = (StainMatrix::ruifrok(), NormRanges::default());
    let diffs = lift(evaluation::h_channel_diff(&base, &recs, &matrix, &ranges).map_err(Into::into))?;
    let maps = lift(evaluation::heatmaps(&diffs).map_err(Into::into))?;
    create_dir(out)?;
    let mut table = String::from("image,h_mse\n");
    for ((path, d), map) in reconstructions.iter().zip(&diffs).zip(&maps) {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("reconstruction");
        let target = out.join(format!("{stem}.hdiff.png"));
        lift(data_io::write_image(map, &target).map_err(Into::into))?;
        table.push_str(&format!("{},{:.8}\n", path.display(), d.mse));
        println!("{}\t{:.8}", path.display(), d.mse);
    }
    let csv = out.join("h_mse.csv");
    lift(std::fs::write(&csv, table).with_context(|| format!("writing {}", csv.display())))
}

fn downstream(data: &Path, models: &[PathBuf], jpeg_q: &[u8], seed: Option<u64>, steps: Option<usize>, out: &Path) -> Result<()> {
    let m = read_manifest(data)?;
    let mut patches = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let label = e.label.ok_or_else(|| Failure { code: DATA, error: anyhow!("{} has no label", e.path) })?;
        let label = u8::try_from(label).ok().filter(|&l| l <= 1).ok_or_else(|| Failure {
            code: DATA,
            error: anyhow!("{}: label {label} is not binary", e.path),
        })?;
        let image = read_image(&Manifest::resolve(data, e))?;
        patches.push(LabeledPatch { image, label, source: e.source_id().to_string() });
    }
    let mut settings = vec![Setting { name: "uncompressed".into(), handle: None }];
    for p in models {
        let c = load_codec(p)?;
        settings.push(Setting { name: format!("{}-q{}", c.codec.name().to_uppercase(), c.quality), handle: Some(CodecHandle::Learned(Box::new(c))) });
    }
    for &q in jpeg_q {
        jpeg::jpeg_quality_for_index(q).usage_err()?;
        if jpeg::available() {
            settings.push(Setting { name: format!("JPEG-q{q}"), handle: Some(CodecHandle::Jpeg { index: q }) });
        } else {
            warn!("JPEG adapter unavailable; skipping JPEG quality {q}");
        }
    }
    let mut cfg = DownstreamConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let mut rows = lift(downstream::downstream_proxy(&patches, &settings, &cfg).context("downstream proxy"))?;
    rows.push(lift(downstream::shuffled_label_control(&patches, &cfg).context("shuffled-label control"))?);
    let csv = downstream::downstream_csv(&rows);
    print!("{csv}");
    lift(std::fs::write(out, csv).with_context(|| format!("writing {}", out.display())))
}

fn tile(inputs: &[PathBuf], patch: usize, stride: usize, threshold: f64, val_fraction: Option<f64>, seed: u64, out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Failure { code: USAGE, error: anyhow!("no input images") });
    }
    if patch == 0 || stride == 0 {
        return Err(Failure { code: USAGE, error: anyhow!("patch and stride must be positive") });
    }
    create_dir(out)?;
    let mut entries = Vec::new();
    for input in inputs {
        let img = read_image(input)?;
        let source = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let tiles = lift(data_io::tile(&img, patch, stride, threshold).map_err(Into::into))?;
        create_dir(&out.join(&source))?;
        for t in tiles {
            let rel = format!("{source}/{source}_x{}_y{}.png", t.x, t.y);
            let path = out.join(&rel);
            lift(data_io::write_image(&t.image, &path).map_err(Into::into))?;
            let bytes = lift(std::fs::read(&path).with_context(|| format!("reading back {}", path.display())))?;
            entries.push(ManifestEntry {
                path: rel,
                w: patch as u32,
                h: patch as u32,
                split: Split::Train,
                label: None,
                hash: data_io::file_hash(&bytes),
            });
        }
    }
    let mut manifest = Manifest { entries };
    if let Some(f) = val_fraction {
        manifest = lift(data_io::split(&manifest, f, seed).map_err(Into::into))?;
    }
    let path = out.join("manifest.jsonl");
    lift(manifest.write(&path).map_err(Into::into))?;
    info!("{} tiles, manifest {}", manifest.entries.len(), path.display());
    Ok(())
}

fn stain_split(input: &Path, estimate: bool, out: &Path) -> Result<()> {
    let img = read_image(input)?;
    let matrix = if estimate {
        let od = lift(stain::od_pixels(&img).map_err(Into::into))?;
        let est = lift(
            stain::estimate_stain_matrix(&od, stain::DEFAULT_NMF_SPARSITY, stain::DEFAULT_NMF_ITERATIONS).map_err(Into::into),
        )?;
        if est.fallback {
            warn!("too little tissue to estimate stains; using the default matrix");
        }
        est.matrix
    } else {
        StainMatrix::ruifrok()
    };
    let ranges = NormRanges::default();
    let hed = lift(stain::deconvolve(&img, &matrix).and_then(|h| stain::normalize_hed(&h, &ranges)).map_err(Into::into))?;
    let (h, w) = (hed.shape()[1], hed.shape()[2]);
    create_dir(out)?;
    for (c, name) in ["h", "e", "d"].iter().enumerate() {
        let plane = &hed.data()[c * h * w..(c + 1) * h * w];
        let grey: Vec<f32> = plane.iter().chain(plane).chain(plane).copied().collect();
        let t = lift(Tensor::new(vec![3, h, w], grey).map_err(Into::into))?;
        lift(data_io::write_image(&t, &out.join(format!("{name}.png"))).map_err(Into::into))?;
    }
    let rows = matrix.rows();
    println!("stain matrix rows (H, E, D):");
    for r in rows {
        println!("  {:.4} {:.4} {:.4}", r[0], r[1], r[2]);
    }
    Ok(())
}
