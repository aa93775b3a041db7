//! Trainers for the stain encoder, the NICM variants and the SQLC finetune
//! stage, with their learning-rate schedules and CSV logs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqlc_tensor::{AdamConfig, AdamState, Graph, Var};

use crate::bundle::fnv1a64;
use crate::codec::{stain_encoder_bundle, LearnedCodec};
use crate::container::CodecId;
use crate::entropy::{quantization_noise, rate_bits};
use crate::error::{Error, Result};
use crate::metrics::{self, MsSsimConfig};
use crate::models::{
    channelwise_msssim_loss, lambda_for_quality, pad_to_stride, rd_loss, sqlc_finetune_loss, NicmModel, NicmVars,
    Parameters, SeModel, SeVars, DEFAULT_LATENT_CHANNELS, DEFAULT_NICM_LATENTS, DEFAULT_NICM_WIDTH, DISTORTION_SCALE,
};
use crate::stain::{augment, deconvolve, denormalize_hed, make_z, normalize_hed, reconstruct, AugmentParams, NormRanges, StainMatrix};
use crate::Tensor;

pub const PLATEAU_FACTOR: f64 = 0.5;
pub const PLATEAU_THRESHOLD: f64 = 1e-4;
pub const PLATEAU_PATIENCE: usize = 10;
pub const MIN_LR: f64 = 1e-6;
/// Fewest patches the stain encoder is trained on.
pub const MIN_SE_PATCHES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Se,
    Nicm3,
    Nicm6,
    NicmAugmented,
    Sqlc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Se, Variant::Nicm3, Variant::Nicm6, Variant::NicmAugmented, Variant::Sqlc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Se => "se",
            Variant::Nicm3 => "nicm3",
            Variant::Nicm6 => "nicm6",
            Variant::NicmAugmented => "nicm_augmented",
            Variant::Sqlc => "sqlc",
        }
    }

    /// Codec a trained model of this variant is shipped as. The augmented
    /// variant is a three-channel NICM at inference.
    pub fn codec(self) -> Option<CodecId> {
        match self {
            Variant::Se => None,
            Variant::Nicm3 | Variant::NicmAugmented => Some(CodecId::Nicm3),
            Variant::Nicm6 => Some(CodecId::Nicm6),
            Variant::Sqlc => Some(CodecId::Sqlc),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Plateau { patience: usize },
    Cosine { t_max: usize },
}

/// `lr0·(1 + cos(π·step/T_max))/2`, held at 0 past `T_max`.
pub fn cosine_lr(step: usize, t_max: usize, lr0: f64) -> f64 {
    if t_max == 0 {
        return lr0;
    }
    let s = step.min(t_max) as f64;
    lr0 * (1.0 + (std::f64::consts::PI * s / t_max as f64).cos()) / 2.0
}

/// Reduce-on-plateau for a metric that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize) -> Self {
        Plateau { lr, patience, best: f64::INFINITY, bad: 0 }
    }

    /// Records one validation and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best - PLATEAU_THRESHOLD {
            self.best = metric;
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.lr = (self.lr * PLATEAU_FACTOR).max(MIN_LR);
                self.bad = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub quality: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub patch_size: usize,
    pub seed: u64,
    pub flips: bool,
    /// Per-patch α/β jitter on H and E; only the augmented variant uses it.
    pub stain_augment: bool,
    pub mu: f64,
    pub nicm_width: usize,
    pub nicm_latents: usize,
    pub latent_channels: usize,
    /// Steps between validations.
    pub val_every: usize,
}

impl TrainConfig {
    /// Desk-scale settings: short runs on 64×64 patches.
    pub fn desk(variant: Variant) -> Self {
        let mut cfg = TrainConfig {
            variant,
            quality: 5,
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            schedule: Schedule::Plateau { patience: PLATEAU_PATIENCE },
            patch_size: 64,
            seed: 0,
            flips: true,
            stain_augment: variant == Variant::NicmAugmented,
            mu: 1.0,
            nicm_width: DEFAULT_NICM_WIDTH,
            nicm_latents: DEFAULT_NICM_LATENTS,
            latent_channels: DEFAULT_LATENT_CHANNELS,
            val_every: 100,
        };
        if variant == Variant::Se {
            cfg.steps = 400;
            cfg.batch_size = 8;
            cfg.lr = 0.01;
            cfg.patch_size = 32;
            cfg.schedule = Schedule::Cosine { t_max: 400 };
            cfg.val_every = 50;
        }
        cfg
    }

    /// The published protocol, expressed in steps over a corpus of
    /// `corpus_len` patches.
    pub fn full_protocol(variant: Variant, corpus_len: usize) -> Self {
        let mut cfg = TrainConfig::desk(variant);
        if variant == Variant::Se {
            cfg.batch_size = 32;
            cfg.steps = 40 * corpus_len.div_ceil(32).max(1);
            cfg.lr = 0.01;
            cfg.schedule = Schedule::Cosine { t_max: cfg.steps };
        } else {
            cfg.lr = 1e-4;
            cfg.patch_size = 224;
            cfg.steps = 1000 * corpus_len.div_ceil(cfg.batch_size).max(1);
            cfg.val_every = corpus_len.div_ceil(cfg.batch_size).max(1);
        }
        cfg
    }

    pub fn lambda(&self) -> Result<f64> {
        lambda_for_quality(self.quality)
    }

    /// Applies `key=value` lines over `self`. Blank lines and `#` comments
    /// are skipped; `variant` must come first if present since it resets
    /// the defaults.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let variant = text
            .lines()
            .filter_map(|l| l.split('#').next()?.split_once('='))
            .find(|(k, _)| k.trim() == "variant")
            .map(|(_, v)| v.trim().parse())
            .transpose()?
            .unwrap_or(Variant::Nicm3);
        TrainConfig::desk(variant).apply(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "variant" => {
                let v: Variant = value.parse()?;
                if v != self.variant {
                    *self = TrainConfig { seed: self.seed, quality: self.quality, ..TrainConfig::desk(v) };
                }
            }
            "quality" => self.quality = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "plateau" => Schedule::Plateau { patience: PLATEAU_PATIENCE },
                    "cosine" => Schedule::Cosine { t_max: self.steps },
                    _ => return Err(Error::Config(format!("schedule: expected plateau or cosine, got {value:?}"))),
                }
            }
            "patience" => match &mut self.schedule {
                Schedule::Plateau { patience } => *patience = num(key, value)?,
                Schedule::Cosine { .. } => return Err(Error::Config("patience needs schedule=plateau".into())),
            },
            "t_max" => match &mut self.schedule {
                Schedule::Cosine { t_max } => *t_max = num(key, value)?,
                Schedule::Plateau { .. } => return Err(Error::Config("t_max needs schedule=cosine".into())),
            },
            "patch_size" => self.patch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "flips" => self.flips = num(key, value)?,
            "stain_augment" => self.stain_augment = num(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "nicm_width" => self.nicm_width = num(key, value)?,
            "nicm_latents" => self.nicm_latents = num(key, value)?,
            "latent_channels" => self.latent_channels = num(key, value)?,
            "val_every" => self.val_every = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        lambda_for_quality(self.quality)?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.steps == 0 || self.val_every == 0 {
            return bad("steps, batch_size and val_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be non-negative");
        }
        if self.patch_size < 22 {
            return bad("patch_size must be at least 22 for MS-SSIM");
        }
        if self.variant != Variant::Se && self.patch_size % 16 != 0 {
            return bad("NICM patch_size must be a multiple of 16");
        }
        if self.nicm_width == 0 || self.nicm_latents == 0 || self.latent_channels == 0 {
            return bad("model widths must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (schedule, extra) = match self.schedule {
            Schedule::Plateau { patience } => ("plateau", format!("patience={patience}")),
            Schedule::Cosine { t_max } => ("cosine", format!("t_max={t_max}")),
        };
        format!(
            "variant={}\nquality={}\nsteps={}\nbatch_size={}\nlr={}\nschedule={schedule}\n{extra}\npatch_size={}\nseed={}\n\
             flips={}\nstain_augment={}\nmu={}\nnicm_width={}\nnicm_latents={}\nlatent_channels={}\nval_every={}\n",
            self.variant,
            self.quality,
            self.steps,
            self.batch_size,
            self.lr,
            self.patch_size,
            self.seed,
            self.flips,
            self.stain_augment,
            self.mu,
            self.nicm_width,
            self.nicm_latents,
            self.latent_channels,
            self.val_every,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub lr: f64,
    /// `mean((ẑ − ẑ′)²)` during SQLC finetuning.
    pub euclid: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValRecord>,
    pub seconds: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,bpp,distortion,lr\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss, r.bpp, r.distortion, r.lr));
        }
        s
    }

    pub fn validation_csv(&self) -> String {
        let mut s = String::from("step,loss,bpp,ms_ssim\n");
        for r in &self.validations {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.bpp, r.ms_ssim));
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.val.csv` next to `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let val = path.with_extension("val.csv");
        std::fs::write(&val, self.validation_csv()).map_err(|e| Error::io(&val, e))
    }

    pub fn last_validation(&self) -> Option<&ValRecord> {
        self.validations.last()
    }
}

/// Draws random crops (with optional flips) from a fixed patch set.
pub struct Batcher<'a> {
    patches: &'a [Tensor],
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(patches: &'a [Tensor], seed: u64) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::Data("no training patches".into()));
        }
        Ok(Batcher { patches, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One `[3, size, size]` crop.
    pub fn sample(&mut self, size: usize, flips: bool) -> Result<Tensor> {
        let src = &self.patches[self.rng.gen_range(0..self.patches.len())];
        let [c, h, w] = *src.shape() else {
            return Err(Error::Data(format!("patch shape {:?}", src.shape())));
        };
        if h < size || w < size {
            return Err(Error::Data(format!("patch {w}x{h} smaller than crop {size}")));
        }
        let y0 = self.rng.gen_range(0..=h - size);
        let x0 = self.rng.gen_range(0..=w - size);
        let (fh, fv) = if flips { (self.rng.gen_bool(0.5), self.rng.gen_bool(0.5)) } else { (false, false) };
        let d = src.data();
        let mut out = Vec::with_capacity(c * size * size);
        for ch in 0..c {
            for y in 0..size {
                let sy = y0 + if fv { size - 1 - y } else { y };
                for x in 0..size {
                    let sx = x0 + if fh { size - 1 - x } else { x };
                    out.push(d[(ch * h + sy) * w + sx]);
                }
            }
        }
        Ok(Tensor::new(vec![c, size, size], out)?)
    }

    pub fn batch(&mut self, n: usize, size: usize, flips: bool) -> Result<Tensor> {
        let items = (0..n).map(|_| self.sample(size, flips)).collect::<Result<Vec<_>>>()?;
        stack(&items)
    }
}

/// Stacks equal-shape `[C,H,W]` tensors into `[N,C,H,W]`.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Data(format!("batch mixes shapes {:?} and {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// Re-renders an RGB patch after jittering its H and E concentrations.
pub fn stain_augment_rgb(rgb: &Tensor, params: &AugmentParams, matrix: &StainMatrix, ranges: &NormRanges) -> Result<Tensor> {
    let hed = normalize_hed(&deconvolve(rgb, matrix)?, ranges)?;
    let jittered = augment(&hed, params)?;
    reconstruct(&denormalize_hed(&jittered, ranges)?, matrix)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, detail: format!("{what} is {v}") })
    }
}

/// Adam with one state per parameter tensor and a mutable learning rate.
pub(crate) struct Optimizer {
    states: Vec<AdamState>,
    pub(crate) cfg: AdamConfig,
}

impl Optimizer {
    pub(crate) fn new(params: &[&mut Tensor], lr: f64) -> Self {
        Optimizer { states: params.iter().map(|p| AdamState::new(p.numel())).collect(), cfg: AdamConfig { lr, ..AdamConfig::default() } }
    }

    pub(crate) fn step(&mut self, step: usize, params: Vec<&mut Tensor>, g: &Graph<f32>, vars: &[Var]) -> Result<()> {
        let grads: Vec<Vec<f32>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
        for (i, grad) in grads.iter().enumerate() {
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { step, detail: format!("non-finite gradient in parameter {i}") });
            }
        }
        for ((state, p), grad) in self.states.iter_mut().zip(params).zip(&grads) {
            state.step(p, grad, &self.cfg)?;
        }
        Ok(())
    }
}

/// Learning-rate controller shared by the trainers.
enum LrControl {
    Plateau(Plateau),
    Cosine { t_max: usize, lr0: f64 },
}

impl LrControl {
    fn new(cfg: &TrainConfig) -> Self {
        match cfg.schedule {
            Schedule::Plateau { patience } => LrControl::Plateau(Plateau::new(cfg.lr, patience)),
            Schedule::Cosine { t_max } => LrControl::Cosine { t_max, lr0: cfg.lr },
        }
    }

    fn lr(&self, step: usize) -> f64 {
        match self {
            LrControl::Plateau(p) => p.lr,
            LrControl::Cosine { t_max, lr0 } => cosine_lr(step, *t_max, *lr0),
        }
    }

    fn observe(&mut self, metric: f64) {
        if let LrControl::Plateau(p) = self {
            p.observe(metric);
        }
    }
}

/// Validation of the stain encoder: channel-wise MS-SSIM loss over
/// `val`, each at full size.
pub fn se_validation_loss(se: &SeModel, val: &[Tensor], matrix: &StainMatrix, ranges: &NormRanges) -> Result<f64> {
    let cfg = MsSsimConfig::default();
    let mut total = 0.0;
    for rgb in val {
        let z = make_z(rgb, matrix, ranges)?.z;
        let zr = se.decode_tensor(&se.encode_tensor(&z)?)?;
        total += 1.0 - metrics::ms_ssim(&z, &zr, &cfg)?;
    }
    Ok(total / val.len().max(1) as f64)
}

/// Trains the stain encoder on `[RGB, HED]` inputs with flips only and
/// returns the best-validation checkpoint.
pub fn train_se(
    train: &[Tensor],
    val: &[Tensor],
    cfg: &TrainConfig,
    matrix: &StainMatrix,
    ranges: &NormRanges,
) -> Result<(SeModel, TrainLog)> {
    if train.len() < MIN_SE_PATCHES {
        return Err(Error::Data(format!("stain encoder needs at least {MIN_SE_PATCHES} patches, got {}", train.len())));
    }
    if val.is_empty() {
        return Err(Error::Data("no validation patches".into()));
    }
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut se = SeModel::new(cfg.latent_channels, &mut rng);
    let mut batcher = Batcher::new(train, cfg.seed.wrapping_add(1))?;
    let mut opt = Optimizer::new(&se.parameters_mut(), cfg.lr);
    let mut lr = LrControl::new(cfg);
    let ms_cfg = MsSsimConfig::default();
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, se.clone());

    for step in 0..cfg.steps {
        opt.cfg.lr = lr.lr(step);
        let rgb = batcher.batch(cfg.batch_size, cfg.patch_size, cfg.flips)?;
        let z = make_z(&rgb, matrix, ranges)?.z;
        let mut g = Graph::<f32>::new();
        let vars = se.bind(&mut g, true);
        let zv = g.constant(z);
        let x = se.encode(&mut g, &vars, zv)?;
        let zr = se.decode(&mut g, &vars, x)?;
        let loss = channelwise_msssim_loss(&mut g, zv, zr, &ms_cfg)?;
        let value = g.item(loss) as f64;
        check_finite(step, "stain encoder loss", value)?;
        g.backward(loss)?;
        opt.step(step, se.parameters_mut(), &g, vars.vars())?;
        log.steps.push(StepRecord { step, loss: value, bpp: 0.0, distortion: value, lr: opt.cfg.lr, euclid: None });

        if (step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps {
            let v = se_validation_loss(&se, val, matrix, ranges)?;
            check_finite(step, "stain encoder validation loss", v)?;
            log.validations.push(ValRecord { step: step + 1, loss: v, bpp: 0.0, ms_ssim: 1.0 - v });
            lr.observe(v);
            if v < best.0 {
                best = (v, se.clone());
            }
            log::debug!("se step {}: train {value:.5} val {v:.5}", step + 1);
        }
    }
    log.seconds = started.elapsed().as_secs_f64();
    Ok((best.1, log))
}

/// Mean coded bpp and RGB MS-SSIM of `codec` over `val`, from real
/// containers.
pub fn evaluate_codec(codec: &LearnedCodec, val: &[Tensor]) -> Result<(f64, f64)> {
    let cfg = MsSsimConfig::default();
    let (mut bpp, mut ms) = (0.0, 0.0);
    for rgb in val {
        let c = codec.compress(rgb)?;
        let out = codec.decompress(&c)?;
        let [_, h, w] = *rgb.shape() else { unreachable!("compress checked the shape") };
        bpp += metrics::bpp(c.payload_bits(), w, h)?;
        ms += metrics::ms_ssim(rgb, &out, &cfg)?;
    }
    let n = val.len().max(1) as f64;
    Ok((bpp / n, ms / n))
}

/// What the NICM trainer needs beyond its config.
#[derive(Debug, Clone, Copy)]
pub struct NicmContext<'a> {
    pub matrix: &'a StainMatrix,
    pub ranges: &'a NormRanges,
    /// Frozen stain encoder; required for the SQLC variant.
    pub se: Option<&'a SeModel>,
}

/// Builds the NICM input (and its distortion target) for one RGB batch.
fn nicm_input(cfg: &TrainConfig, ctx: &NicmContext, rgb: Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    match cfg.variant {
        Variant::Nicm3 if !cfg.stain_augment => Ok(rgb),
        Variant::Nicm3 | Variant::NicmAugmented => {
            let [n, c, h, w] = rgb.dims4("stain_augment")?;
            let plane = c * h * w;
            let items = (0..n)
                .map(|i| {
                    let one = Tensor::new(vec![c, h, w], rgb.data()[i * plane..(i + 1) * plane].to_vec())?;
                    let params = if cfg.stain_augment { AugmentParams::sample(rng) } else { AugmentParams::identity() };
                    stain_augment_rgb(&one, &params, ctx.matrix, ctx.ranges)
                })
                .collect::<Result<Vec<_>>>()?;
            stack(&items)
        }
        Variant::Nicm6 => Ok(make_z(&rgb, ctx.matrix, ctx.ranges)?.z),
        Variant::Sqlc => {
            let se = ctx.se.ok_or_else(|| Error::Config("sqlc variant needs a trained stain encoder".into()))?;
            se.encode_tensor(&make_z(&rgb, ctx.matrix, ctx.ranges)?.z)
        }
        Variant::Se => Err(Error::Config("the se variant is trained by train_se".into())),
    }
}

fn nicm_in_channels(cfg: &TrainConfig, ctx: &NicmContext) -> Result<usize> {
    Ok(match cfg.variant {
        Variant::Nicm3 | Variant::NicmAugmented => 3,
        Variant::Nicm6 => 6,
        Variant::Sqlc => ctx.se.ok_or_else(|| Error::Config("sqlc variant needs a trained stain encoder".into()))?.latent_channels(),
        Variant::Se => return Err(Error::Config("the se variant is trained by train_se".into())),
    })
}

/// Forward pass with noise quantization. Returns `(latent, reconstruction,
/// rate in bits)`.
fn nicm_forward(
    g: &mut Graph<f32>,
    nicm: &NicmModel,
    vars: &NicmVars,
    x: Var,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, Var)> {
    let padded = pad_to_stride(g, x)?;
    let y = nicm.analyze(g, vars, padded)?;
    let noise = g.constant(quantization_noise(g.shape(y), rng));
    let y_tilde = g.add(y, noise)?;
    let likelihood = nicm.entropy.likelihood(g, y_tilde, &vars.entropy)?;
    let bits = rate_bits(g, likelihood);
    let x_hat = nicm.synthesize(g, vars, y_tilde)?;
    let s = g.shape(x).to_vec();
    let x_hat = g.crop(x_hat, 0, 0, s[2], s[3])?;
    Ok((y_tilde, x_hat, bits))
}

fn validate_nicm(
    step: usize,
    cfg: &TrainConfig,
    ctx: &NicmContext,
    nicm: &NicmModel,
    val: &[Tensor],
    lambda: f64,
    log: &mut TrainLog,
) -> Result<f64> {
    let codec = cfg.variant.codec().expect("NICM variants have a codec");
    let learned = LearnedCodec::new(codec, cfg.quality, ctx.se.cloned(), nicm.clone(), *ctx.ranges, *ctx.matrix)?;
    let (bpp, ms) = evaluate_codec(&learned, val)?;
    let loss = bpp + lambda * DISTORTION_SCALE * (1.0 - ms);
    check_finite(step, "validation loss", loss)?;
    log.validations.push(ValRecord { step, loss, bpp, ms_ssim: ms });
    log::debug!("{} step {step}: val bpp {bpp:.4} ms-ssim {ms:.4}", cfg.variant);
    Ok(loss)
}

/// Trains a NICM variant on the rate-distortion loss. For SQLC this is
/// stage ii: the NICM learns the frozen encoder's latents with latent-space
/// MS-SSIM as distortion.
pub fn train_nicm(train: &[Tensor], val: &[Tensor], cfg: &TrainConfig, ctx: NicmContext) -> Result<(NicmModel, TrainLog)> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Data("no validation patches".into()));
    }
    let lambda = cfg.lambda()?;
    let in_c = nicm_in_channels(cfg, &ctx)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nicm = NicmModel::new(in_c, cfg.nicm_width, cfg.nicm_latents, &mut rng);
    let mut batcher = Batcher::new(train, cfg.seed.wrapping_add(1))?;
    let mut opt = Optimizer::new(&nicm.parameters_mut(), cfg.lr);
    let mut lr = LrControl::new(cfg);
    let ms_cfg = MsSsimConfig::default();
    let pixels = cfg.batch_size * cfg.patch_size * cfg.patch_size;
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        opt.cfg.lr = lr.lr(step);
        let rgb = batcher.batch(cfg.batch_size, cfg.patch_size, cfg.flips)?;
        let input = nicm_input(cfg, &ctx, rgb, batcher.rng())?;
        let mut g = Graph::<f32>::new();
        let vars = nicm.bind(&mut g, true);
        let x = g.constant(input);
        let (_, x_hat, bits) = nicm_forward(&mut g, &nicm, &vars, x, &mut rng)?;
        let terms = rd_loss(&mut g, x, x_hat, bits, lambda, pixels, &ms_cfg)?;
        let value = g.item(terms.loss) as f64;
        check_finite(step, "rd loss", value)?;
        g.backward(terms.loss)?;
        opt.step(step, nicm.parameters_mut(), &g, &vars.vars())?;
        log.steps.push(StepRecord {
            step,
            loss: value,
            bpp: g.item(terms.bpp) as f64,
            distortion: g.item(terms.distortion) as f64,
            lr: opt.cfg.lr,
            euclid: None,
        });
        if (step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps {
            let v = validate_nicm(step + 1, cfg, &ctx, &nicm, val, lambda, &mut log)?;
            lr.observe(v);
        }
    }
    log.seconds = started.elapsed().as_secs_f64();
    Ok((nicm, log))
}

/// Outcome of SQLC finetuning.
#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub log: TrainLog,
    /// Stain-encoder bundle hash before and after.
    pub se_hash: (u64, u64),
    /// Largest absolute SE gradient seen over all steps.
    pub max_se_grad: f32,
}

/// Mean `‖ẑ − ẑ′‖²` over `patches`, with `ẑ` decoded from the SE latent and
/// `ẑ′` from the NICM reconstruction of it.
pub fn sqlc_latent_fidelity(
    se: &SeModel,
    nicm: &NicmModel,
    patches: &[Tensor],
    matrix: &StainMatrix,
    ranges: &NormRanges,
) -> Result<f64> {
    let codec = LearnedCodec::new(CodecId::Sqlc, 1, Some(se.clone()), nicm.clone(), *ranges, *matrix)?;
    let mut total = 0.0;
    for rgb in patches {
        let z = make_z(rgb, &codec.matrix, ranges)?.z;
        let x = se.encode_tensor(&z)?;
        let z_hat = se.decode_tensor(&x)?;
        let [_, h, w] = *rgb.shape() else {
            return Err(Error::Data(format!("expected [3,H,W] image, got {:?}", rgb.shape())));
        };
        let (symbols, [m, lh, lw]) = codec.latents(rgb)?;
        let y = Tensor::new(vec![1, m, lh, lw], symbols.iter().map(|&v| v as f32).collect())?;
        let mut g = Graph::<f32>::new();
        let vars = nicm.bind(&mut g, false);
        let yv = g.constant(y);
        let xr = nicm.synthesize(&mut g, &vars, yv)?;
        let xr = g.crop(xr, 0, 0, h, w)?;
        let sv = se.bind(&mut g, false);
        let zp = se.decode(&mut g, &sv, xr)?;
        total += metrics::mse(&z_hat.reshape(g.shape(zp).to_vec())?, g.value(zp))?;
    }
    Ok(total / patches.len().max(1) as f64)
}

/// Stage iii: continues training `nicm` with the Euclidean term between
/// the SE decodings of the latent and of its reconstruction. The SE is
/// bound as constants and checked to stay bit-identical.
pub fn finetune_sqlc(
    se: &SeModel,
    mut nicm: NicmModel,
    train: &[Tensor],
    val: &[Tensor],
    cfg: &TrainConfig,
    matrix: &StainMatrix,
    ranges: &NormRanges,
) -> Result<(NicmModel, FinetuneReport)> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Data("no validation patches".into()));
    }
    if nicm.in_channels() != se.latent_channels() {
        return Err(Error::Config(format!(
            "NICM expects {} channels, stain encoder yields {}",
            nicm.in_channels(),
            se.latent_channels()
        )));
    }
    let se_bytes = |s: &SeModel| fnv1a64(&stain_encoder_bundle(s, *ranges, *matrix).to_bytes());
    let before = se_bytes(se);
    let lambda = cfg.lambda()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(train, cfg.seed.wrapping_add(1))?;
    let mut opt = Optimizer::new(&nicm.parameters_mut(), cfg.lr);
    let mut lr = LrControl::new(cfg);
    let ms_cfg = MsSsimConfig::default();
    let pixels = cfg.batch_size * cfg.patch_size * cfg.patch_size;
    let ctx = NicmContext { matrix, ranges, se: Some(se) };
    let sqlc_cfg = TrainConfig { variant: Variant::Sqlc, ..cfg.clone() };
    let mut log = TrainLog::default();
    let mut max_se_grad = 0.0f32;

    for step in 0..cfg.steps {
        opt.cfg.lr = lr.lr(step);
        let rgb = batcher.batch(cfg.batch_size, cfg.patch_size, cfg.flips)?;
        let z = make_z(&rgb, matrix, ranges)?.z;
        let x_t = se.encode_tensor(&z)?;
        let z_hat_t = se.decode_tensor(&x_t)?;

        let mut g = Graph::<f32>::new();
        let se_vars: SeVars = se.bind(&mut g, false);
        let vars = nicm.bind(&mut g, true);
        let x = g.constant(x_t);
        let z_hat = g.constant(z_hat_t);
        let (_, x_hat, bits) = nicm_forward(&mut g, &nicm, &vars, x, &mut rng)?;
        let z_prime = se.decode(&mut g, &se_vars, x_hat)?;
        let (terms, euclid) = sqlc_finetune_loss(&mut g, x, x_hat, z_hat, z_prime, bits, lambda, cfg.mu, pixels, &ms_cfg)?;
        let value = g.item(terms.loss) as f64;
        check_finite(step, "finetune loss", value)?;
        g.backward(terms.loss)?;
        for &v in se_vars.vars() {
            let peak = g.grad(v).map_or(0.0, |gr| gr.iter().fold(0.0f32, |m, x| m.max(x.abs())));
            max_se_grad = max_se_grad.max(peak);
        }
        assert_eq!(max_se_grad, 0.0, "stain encoder received a gradient");
        opt.step(step, nicm.parameters_mut(), &g, &vars.vars())?;
        log.steps.push(StepRecord {
            step,
            loss: value,
            bpp: g.item(terms.bpp) as f64,
            distortion: g.item(terms.distortion) as f64,
            lr: opt.cfg.lr,
            euclid: Some(g.item(euclid) as f64),
        });
        if (step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps {
            let v = validate_nicm(step + 1, &sqlc_cfg, &ctx, &nicm, val, lambda, &mut log)?;
            lr.observe(v);
        }
    }
    log.seconds = started.elapsed().as_secs_f64();
    let after = se_bytes(se);
    Ok((nicm, FinetuneReport { log, se_hash: (before, after), max_se_grad }))
}
