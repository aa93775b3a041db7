//! Downstream classification proxy: a small CNN trained on uncompressed
//! patches and scored by ROC AUC on test patches passed through each
//! compression setting, with source-level k-fold cross-validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqlc_tensor::{Graph, Var};

use crate::error::{Error, Result};
use crate::evaluation::CodecHandle;
use crate::metrics;
use crate::training::{stack, Optimizer};
use crate::Tensor;

pub const MIN_PER_CLASS: usize = 50;
pub const CSV_HEADER: &str = "codec,ratio,auc_mean,auc_std";

#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub image: Tensor,
    pub label: u8,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub folds: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig { folds: 4, steps: 300, batch_size: 16, lr: 3e-3, seed: 0 }
    }
}

/// A named way of degrading test patches; `None` leaves them untouched.
#[derive(Debug, Clone)]
pub struct Setting {
    pub name: String,
    pub handle: Option<CodecHandle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamRow {
    pub setting: String,
    /// Mean payload bpp over all test patches; 24 when uncompressed.
    pub bpp: f64,
    pub aucs: Vec<f64>,
    pub auc_mean: f64,
    pub auc_std: f64,
}

impl DownstreamRow {
    fn new(setting: String, bpp: f64, aucs: Vec<f64>) -> Self {
        let n = aucs.len() as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        DownstreamRow { setting, bpp, aucs, auc_mean: mean, auc_std: var.sqrt() }
    }

    pub fn ratio(&self) -> String {
        metrics::ratio_label(self.bpp)
    }
}

/// Area under the ROC curve by the trapezoidal rule; tied scores move
/// along a diagonal.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos * neg) as f64)
}

/// Tiny convolutional classifier producing one logit per patch.
#[derive(Debug, Clone)]
struct Classifier {
    params: Vec<Tensor>,
}

const WIDTHS: [usize; 4] = [3, 8, 16, 16];

impl Classifier {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        for w in WIDTHS.windows(2) {
            let bound = (6.0 / (w[0] * 9) as f64).sqrt();
            params.push(Tensor::uniform(vec![w[1], w[0], 3, 3], -bound, bound, rng));
            params.push(Tensor::zeros(vec![w[1]]));
        }
        let last = WIDTHS[3];
        let bound = (3.0 / last as f64).sqrt();
        params.push(Tensor::uniform(vec![1, last, 1, 1], -bound, bound, rng));
        params.push(Tensor::zeros(vec![1]));
        Classifier { params }
    }

    fn forward(&self, g: &mut Graph<f32>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            h = g.conv2d(h, vars[2 * i], 2, 1)?;
            h = g.channel_bias(h, vars[2 * i + 1])?;
            h = g.leaky_relu(h, 0.01);
        }
        let n = g.shape(h)[0];
        let pooled = g.mean_spatial(h)?;
        let pooled = g.reshape(pooled, vec![n, WIDTHS[3], 1, 1])?;
        let logit = g.conv2d(pooled, vars[6], 1, 0)?;
        let logit = g.channel_bias(logit, vars[7])?;
        Ok(g.reshape(logit, vec![n])?)
    }

    fn scores(&self, images: &[Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
            let x = g.constant(stack(chunk)?);
            let l = self.forward(&mut g, &vars, x)?;
            out.extend(g.value(l).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

fn flip(t: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.push(d[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("same size")
}

/// Trains with BCE on logits, `softplus(l) − t·l`, and random flips.
fn train_classifier(train: &[&LabeledPatch], cfg: &DownstreamConfig, seed: u64) -> Result<Classifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Classifier::new(&mut rng);
    let mut opt = Optimizer::new(&model.params.iter_mut().collect::<Vec<_>>(), cfg.lr);
    for step in 0..cfg.steps {
        let picks: Vec<&LabeledPatch> = (0..cfg.batch_size).map(|_| train[rng.gen_range(0..train.len())]).collect();
        let images = picks.iter().map(|p| flip(&p.image, rng.gen_bool(0.5), rng.gen_bool(0.5))).collect::<Vec<_>>();
        let targets = Tensor::new(vec![picks.len()], picks.iter().map(|p| p.label as f32).collect())?;
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = model.params.iter().map(|p| g.parameter(p.clone())).collect();
        let x = g.constant(stack(&images)?);
        let logit = model.forward(&mut g, &vars, x)?;
        let t = g.constant(targets);
        let sp = g.softplus(logit);
        let tl = g.mul(t, logit)?;
        let per = g.sub(sp, tl)?;
        let loss = g.mean(per);
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("classifier loss is {value}") });
        }
        g.backward(loss)?;
        opt.step(step, model.params.iter_mut().collect(), &g, &vars)?;
    }
    Ok(model)
}

/// Assigns sources to folds, dealing each class's sources round-robin so
/// every fold sees both classes when possible.
pub fn source_folds(patches: &[LabeledPatch], folds: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let mut by_source: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
    for p in patches {
        if p.label > 1 {
            return Err(Error::Data(format!("label {} is not binary", p.label)));
        }
        by_source.entry(&p.source).or_default()[p.label as usize] += 1;
    }
    let mut classes: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (s, counts) in &by_source {
        classes[usize::from(counts[1] > counts[0])].push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let mut next = 0;
    for list in &mut classes {
        list.shuffle(&mut rng);
        for s in list.iter() {
            out.insert(s.to_string(), next % folds);
            next += 1;
        }
    }
    Ok(out)
}

/// Trains one classifier per fold on uncompressed data and scores each
/// setting on that fold's test patches.
pub fn downstream_proxy(patches: &[LabeledPatch], settings: &[Setting], cfg: &DownstreamConfig) -> Result<Vec<DownstreamRow>> {
    for class in 0..2u8 {
        let n = patches.iter().filter(|p| p.label == class).count();
        if n < MIN_PER_CLASS {
            return Err(Error::Data(format!("class {class} has {n} patches, need at least {MIN_PER_CLASS}")));
        }
    }
    let fold_of = source_folds(patches, cfg.folds, cfg.seed)?;
    let mut aucs = vec![Vec::with_capacity(cfg.folds); settings.len()];
    let mut bits = vec![(0.0f64, 0usize); settings.len()];
    for fold in 0..cfg.folds {
        let (test, train): (Vec<&LabeledPatch>, Vec<&LabeledPatch>) = patches.iter().partition(|p| fold_of[&p.source] == fold);
        let labels: Vec<u8> = test.iter().map(|p| p.label).collect();
        if test.is_empty() || labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::Data(format!("fold {fold} test set holds a single class")));
        }
        if train.iter().all(|p| p.label == train[0].label) {
            return Err(Error::Data(format!("fold {fold} training set holds a single class")));
        }
        let model = train_classifier(&train, cfg, cfg.seed.wrapping_add(fold as u64 + 1))?;
        for (k, setting) in settings.iter().enumerate() {
            let images = match &setting.handle {
                None => {
                    bits[k].0 += metrics::UNCOMPRESSED_BPP * test.len() as f64;
                    test.iter().map(|p| p.image.clone()).collect()
                }
                Some(h) => test
                    .iter()
                    .map(|p| {
                        let (out, bpp, _) = h.round_trip(&p.image)?;
                        bits[k].0 += bpp;
                        Ok(out)
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            bits[k].1 += test.len();
            aucs[k].push(auc(&model.scores(&images)?, &labels)?);
        }
    }
    Ok(settings
        .iter()
        .zip(aucs)
        .zip(bits)
        .map(|((s, a), (b, n))| DownstreamRow::new(s.name.clone(), b / n as f64, a))
        .collect())
}

/// The same protocol with labels permuted across the whole set; a sound
/// pipeline scores chance level.
pub fn shuffled_label_control(patches: &[LabeledPatch], cfg: &DownstreamConfig) -> Result<DownstreamRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut labels: Vec<u8> = patches.iter().map(|p| p.label).collect();
    labels.shuffle(&mut rng);
    let shuffled: Vec<LabeledPatch> =
        patches.iter().zip(labels).map(|(p, label)| LabeledPatch { label, ..p.clone() }).collect();
    let rows = downstream_proxy(&shuffled, &[Setting { name: "shuffled".into(), handle: None }], cfg)?;
    Ok(rows.into_iter().next().expect("one setting"))
}

/// Rows like `JPEG,1:3,88.2,0.2`, AUC in percent.
pub fn downstream_csv(rows: &[DownstreamRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.1},{:.1}", r.setting, r.ratio(), 100.0 * r.auc_mean, 100.0 * r.auc_std);
    }
    s
}
