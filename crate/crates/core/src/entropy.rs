//! Factorized prior over integer latents.
//!
//! Each latent channel owns a small monotone network mapping a real value to
//! the logit of its cumulative distribution. The likelihood of a value `y`
//! is the mass of the unit interval around it, `c(y + ½) − c(y − ½)`.

use rand::Rng;
use sqlc_tensor::{Function, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Widths of the CDF network from input to logit.
pub const LAYER_WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
pub const STAGES: usize = LAYER_WIDTHS.len() - 1;
/// Likelihoods are floored here before taking logs.
pub const LIKELIHOOD_FLOOR: f64 = 8.881_784_197_001_252e-16; // 2^-50
/// Each side of a channel's coded support leaves less mass than this.
pub const DEFAULT_TAIL_MASS: f64 = 1e-6;
/// Quantized frequencies sum to this.
pub const FREQ_TOTAL: u32 = 1 << 16;
/// Largest magnitude a latent symbol may take.
pub const SYMBOL_LIMIT: i32 = 1 << 15;
const INIT_SCALE: f64 = 10.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Raw parameters of every channel's CDF network.
///
/// `matrices[k]` has shape `[M, out, in]` and passes through softplus to stay
/// positive; `biases[k]` is `[M, out]`; `factors[k]` (`k < STAGES-1`) is
/// `[M, out]` and gates a `tanh` residual.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyModel {
    channels: usize,
    pub matrices: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub factors: Vec<Tensor>,
}

/// Graph handles for an [`EntropyModel`]'s parameters.
#[derive(Debug, Clone)]
pub struct EntropyVars {
    inputs: Vec<Var>,
}

impl EntropyVars {
    /// Wraps handles already in [`EntropyModel::tensors`] order.
    pub fn from_vars(inputs: Vec<Var>) -> Self {
        EntropyVars { inputs }
    }

    pub fn vars(&self) -> &[Var] {
        &self.inputs
    }
}

impl EntropyModel {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let scale = INIT_SCALE.powf(1.0 / STAGES as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..STAGES {
            let (din, dout) = (LAYER_WIDTHS[k], LAYER_WIDTHS[k + 1]);
            let init = (1.0 / scale / dout as f64).exp_m1().ln() as f32;
            matrices.push(Tensor::full(vec![channels, dout, din], init));
            biases.push(Tensor::uniform(vec![channels, dout], -0.5, 0.5, rng));
            if k + 1 < STAGES {
                factors.push(Tensor::zeros(vec![channels, dout]));
            }
        }
        EntropyModel { channels, matrices, biases, factors }
    }

    /// Rebuilds a model from tensors in [`EntropyModel::tensors`] order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 3 * STAGES - 1 {
            return Err(Error::Config(format!("entropy model needs {} tensors, got {}", 3 * STAGES - 1, tensors.len())));
        }
        let channels = tensors[0].shape().first().copied().unwrap_or(0);
        let mut it = tensors.into_iter();
        let matrices: Vec<Tensor> = it.by_ref().take(STAGES).collect();
        let biases: Vec<Tensor> = it.by_ref().take(STAGES).collect();
        let factors: Vec<Tensor> = it.collect();
        for k in 0..STAGES {
            let (din, dout) = (LAYER_WIDTHS[k], LAYER_WIDTHS[k + 1]);
            let ok = matrices[k].shape() == [channels, dout, din]
                && biases[k].shape() == [channels, dout]
                && (k + 1 == STAGES || factors[k].shape() == [channels, dout]);
            if !ok {
                return Err(Error::Config(format!("entropy model stage {k} has inconsistent shapes")));
            }
        }
        Ok(EntropyModel { channels, matrices, biases, factors })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// All parameters: matrices, then biases, then factors.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.matrices.iter_mut().chain(self.biases.iter_mut()).chain(self.factors.iter_mut()).collect()
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> EntropyVars {
        let inputs = self
            .tensors()
            .into_iter()
            .map(|t| {
                let t = t.cast::<T>();
                if trainable {
                    g.parameter(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        EntropyVars { inputs }
    }

    fn network(&self) -> CdfNetwork {
        CdfNetwork::from_slices(&self.tensors().iter().map(|t| to_f64(t.data())).collect::<Vec<_>>())
    }

    /// Cumulative distribution of `channel` at `x`.
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        sigmoid(self.cdf_logit(channel, x))
    }

    /// Logit of the cumulative distribution, finite where `cdf` saturates.
    pub fn cdf_logit(&self, channel: usize, x: f64) -> f64 {
        self.network().logit(channel, x)
    }

    /// Probability of the integer `n` under `channel`.
    pub fn pmf_integer(&self, channel: usize, n: i32) -> f64 {
        self.network().likelihood(channel, n as f64)
    }

    /// Differentiable likelihood of every element of `y` (`[N, M, H, W]`).
    pub fn likelihood<T: Scalar>(&self, g: &mut Graph<T>, y: Var, vars: &EntropyVars) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let [_, m, h, w] = shape[..] else {
            return Err(Error::Data(format!("latents must be [N,M,H,W], got {shape:?}")));
        };
        if m != self.channels {
            return Err(Error::Data(format!("latents have {m} channels, entropy model {}", self.channels)));
        }
        let params: Vec<Vec<f64>> = vars.inputs.iter().map(|&v| to_f64(g.value(v).data())).collect();
        let net = CdfNetwork::from_slices(&params);
        let plane = h * w;
        let values: Vec<T> = g
            .value(y)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::from_f64(net.likelihood((i / plane) % m, v.as_f64())))
            .collect();
        let value = Tensor::new(shape, values)?;
        let mut inputs = vec![y];
        inputs.extend(&vars.inputs);
        Ok(g.custom(Box::new(LikelihoodOp { channels: m, plane }), &inputs, value))
    }

    /// Quantized coding tables, one per channel.
    pub fn build_cdf_tables(&self, tail_mass: f64) -> Result<Vec<CdfTable>> {
        let net = self.network();
        (0..self.channels).map(|c| CdfTable::from_network(&net, c, tail_mass)).collect()
    }
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Sum over elements of `−log₂ max(likelihood, 2⁻⁵⁰)`.
pub fn rate_bits<T: Scalar>(g: &mut Graph<T>, likelihood: Var) -> Var {
    let floored = g.clamp_min(likelihood, LIKELIHOOD_FLOOR);
    let ln = g.log(floored);
    let total = g.sum(ln);
    g.mul_scalar(total, -1.0 / std::f64::consts::LN_2)
}

/// Additive uniform noise strictly inside `(−½, ½)`, the training-time
/// stand-in for rounding. Samples sit on a symmetric 2⁻²⁴ grid so they are
/// exact in `f32`.
pub fn quantization_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| ((rng.gen_range(0..1u32 << 24) as f64 + 0.5) / (1u32 << 24) as f64 - 0.5) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

pub fn quantize_train<R: Rng + ?Sized>(y: &Tensor, rng: &mut R) -> Tensor {
    let noise = quantization_noise(y.shape(), rng);
    let data = y.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

/// Rounds half away from zero.
pub fn quantize_eval(y: &Tensor) -> Vec<i32> {
    y.data().iter().map(|v| v.round() as i32).collect()
}

/// f64 copy of all channels' parameters, laid out per [`EntropyModel`].
struct CdfNetwork {
    params: Vec<Vec<f64>>,
}

/// Activations of one forward pass through a channel network.
struct Trace {
    /// Layer inputs, `layers[k]` feeds stage `k`.
    layers: Vec<Vec<f64>>,
    /// Pre-gate affine outputs of each stage.
    pre: Vec<Vec<f64>>,
}

impl CdfNetwork {
    fn from_slices(params: &[Vec<f64>]) -> Self {
        CdfNetwork { params: params.to_vec() }
    }

    fn matrix(&self, k: usize, c: usize) -> &[f64] {
        let n = LAYER_WIDTHS[k] * LAYER_WIDTHS[k + 1];
        &self.params[k][c * n..(c + 1) * n]
    }

    fn bias(&self, k: usize, c: usize) -> &[f64] {
        let n = LAYER_WIDTHS[k + 1];
        &self.params[STAGES + k][c * n..(c + 1) * n]
    }

    fn factor(&self, k: usize, c: usize) -> &[f64] {
        let n = LAYER_WIDTHS[k + 1];
        &self.params[2 * STAGES + k][c * n..(c + 1) * n]
    }

    fn forward(&self, c: usize, x: f64) -> Trace {
        let mut layers = vec![vec![x]];
        let mut pre = Vec::with_capacity(STAGES);
        for k in 0..STAGES {
            let (din, dout) = (LAYER_WIDTHS[k], LAYER_WIDTHS[k + 1]);
            let m = self.matrix(k, c);
            let b = self.bias(k, c);
            let h = &layers[k];
            let p: Vec<f64> = (0..dout).map(|i| (0..din).map(|j| softplus(m[i * din + j]) * h[j]).sum::<f64>() + b[i]).collect();
            let next = if k + 1 < STAGES {
                let a = self.factor(k, c);
                p.iter().zip(a).map(|(v, a)| v + a.tanh() * v.tanh()).collect()
            } else {
                p.clone()
            };
            pre.push(p);
            layers.push(next);
        }
        Trace { layers, pre }
    }

    fn logit(&self, c: usize, x: f64) -> f64 {
        self.forward(c, x).layers[STAGES][0]
    }

    /// `c(x+½) − c(x−½)` evaluated on the side of the median where the
    /// difference of sigmoids does not cancel.
    fn likelihood(&self, c: usize, x: f64) -> f64 {
        let upper = self.logit(c, x + 0.5);
        let lower = self.logit(c, x - 0.5);
        let s = if upper + lower > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * upper) - sigmoid(s * lower)).abs()
    }

    /// Adds `dlogit · ∂logit/∂θ` into `grads` (per-tensor buffers) and
    /// returns `∂logit/∂x`.
    fn backprop(&self, c: usize, trace: &Trace, dlogit: f64, grads: &mut [Vec<f64>]) -> f64 {
        let mut g = vec![dlogit];
        for k in (0..STAGES).rev() {
            let (din, dout) = (LAYER_WIDTHS[k], LAYER_WIDTHS[k + 1]);
            let p = &trace.pre[k];
            let dpre: Vec<f64> = if k + 1 < STAGES {
                let a = self.factor(k, c);
                let off = c * dout;
                (0..dout)
                    .map(|i| {
                        let (ta, tp) = (a[i].tanh(), p[i].tanh());
                        grads[2 * STAGES + k][off + i] += g[i] * tp * (1.0 - ta * ta);
                        g[i] * (1.0 + ta * (1.0 - tp * tp))
                    })
                    .collect()
            } else {
                g.clone()
            };
            let m = self.matrix(k, c);
            let h = &trace.layers[k];
            let moff = c * dout * din;
            let mut prev = vec![0.0; din];
            for i in 0..dout {
                grads[STAGES + k][c * dout + i] += dpre[i];
                for j in 0..din {
                    let raw = m[i * din + j];
                    grads[k][moff + i * din + j] += dpre[i] * h[j] * sigmoid(raw);
                    prev[j] += dpre[i] * softplus(raw);
                }
            }
            g = prev;
        }
        g[0]
    }
}

/// Backward rule for [`EntropyModel::likelihood`].
struct LikelihoodOp {
    channels: usize,
    plane: usize,
}

impl<T: Scalar> Function<T> for LikelihoodOp {
    fn name(&self) -> &str {
        "factorized_likelihood"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let params: Vec<Vec<f64>> = inputs[1..].iter().map(|t| to_f64(t.data())).collect();
        let net = CdfNetwork::from_slices(&params);
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let y = inputs[0].data();
        let mut dy = vec![T::zero(); y.len()];
        for (i, (&v, &go)) in y.iter().zip(grad_output).enumerate() {
            let go = go.as_f64();
            if go == 0.0 {
                continue;
            }
            let c = (i / self.plane) % self.channels;
            let x = v.as_f64();
            let up = net.forward(c, x + 0.5);
            let lo = net.forward(c, x - 0.5);
            let (lu, ll) = (up.layers[STAGES][0], lo.layers[STAGES][0]);
            // d/dl σ(l) = σ(l)σ(−l), stable on both tails
            let du = go * sigmoid(lu) * sigmoid(-lu);
            let dl = -go * sigmoid(ll) * sigmoid(-ll);
            let gx = net.backprop(c, &up, du, &mut grads) + net.backprop(c, &lo, dl, &mut grads);
            dy[i] = T::from_f64(gx);
        }
        let mut out = Vec::with_capacity(inputs.len());
        out.push(needs[0].then_some(dy));
        for (k, gr) in grads.into_iter().enumerate() {
            out.push(needs[k + 1].then(|| gr.into_iter().map(T::from_f64).collect()));
        }
        out
    }
}

/// Quantized cumulative frequencies for one channel.
///
/// Slots `0..=max−min` code the integers `min..=max`; the final slot is the
/// escape for values outside the support, whose raw 16-bit value follows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    min: i32,
    cum: Vec<u32>,
}

impl CdfTable {
    /// Validates a cumulative table: starts at 0, ends at 2¹⁶, strictly
    /// increasing, at least one symbol plus the escape.
    pub fn new(min: i32, cum: Vec<u32>) -> Result<Self> {
        if cum.len() < 3 {
            return Err(Error::Config("CDF table needs at least one symbol and an escape slot".into()));
        }
        if cum[0] != 0 || *cum.last().unwrap() != FREQ_TOTAL {
            return Err(Error::Config("CDF table must run from 0 to 2^16".into()));
        }
        if cum.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("CDF table is not strictly increasing".into()));
        }
        let max = min as i64 + cum.len() as i64 - 3;
        if (min as i64) < -(SYMBOL_LIMIT as i64) || max >= SYMBOL_LIMIT as i64 {
            return Err(Error::Config(format!("CDF support [{min}, {max}] exceeds 16 bits")));
        }
        Ok(CdfTable { min, cum })
    }

    /// Quantizes probabilities (`symbols` then escape) to 16-bit frequencies.
    pub fn from_probabilities(min: i32, probs: &[f64]) -> Result<Self> {
        let slots = probs.len();
        if slots < 2 || slots > FREQ_TOTAL as usize {
            return Err(Error::Config(format!("cannot quantize {slots} slots into 2^16")));
        }
        let mut freq: Vec<i64> =
            probs.iter().map(|p| ((p.max(0.0) * FREQ_TOTAL as f64).round() as i64).max(1)).collect();
        let mut diff = FREQ_TOTAL as i64 - freq.iter().sum::<i64>();
        while diff != 0 {
            let (idx, &largest) = freq.iter().enumerate().max_by_key(|(i, f)| (**f, usize::MAX - *i)).unwrap();
            let step = if diff > 0 { diff } else { diff.max(1 - largest) };
            if step == 0 {
                return Err(Error::Config("cannot reach 2^16 with every frequency at least 1".into()));
            }
            freq[idx] += step;
            diff -= step;
        }
        let mut cum = Vec::with_capacity(slots + 1);
        cum.push(0u32);
        for f in freq {
            cum.push(cum.last().unwrap() + f as u32);
        }
        Self::new(min, cum)
    }

    fn from_network(net: &CdfNetwork, channel: usize, tail_mass: f64) -> Result<Self> {
        let lower_tail = |n: i32| sigmoid(net.logit(channel, n as f64 - 0.5));
        let upper_tail = |n: i32| sigmoid(-net.logit(channel, n as f64 + 0.5));
        let mut min = 0;
        while lower_tail(min) >= tail_mass {
            min -= 1;
            if min <= -SYMBOL_LIMIT {
                return Err(Error::SupportOverflow { channel });
            }
        }
        let mut max = 0;
        while upper_tail(max) >= tail_mass {
            max += 1;
            if max >= SYMBOL_LIMIT - 1 {
                return Err(Error::SupportOverflow { channel });
            }
        }
        let mut probs: Vec<f64> = (min..=max).map(|n| net.likelihood(channel, n as f64)).collect();
        probs.push(lower_tail(min) + upper_tail(max));
        Self::from_probabilities(min, &probs)
    }

    pub fn min_value(&self) -> i32 {
        self.min
    }

    pub fn max_value(&self) -> i32 {
        self.min + self.cum.len() as i32 - 3
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    /// Number of coding slots including the escape.
    pub fn slots(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn escape_slot(&self) -> usize {
        self.slots() - 1
    }

    /// Coding slot of `value`, or `None` when it needs the escape.
    pub fn slot_of(&self, value: i32) -> Option<usize> {
        (self.min..=self.max_value()).contains(&value).then(|| (value - self.min) as usize)
    }

    pub fn value_of(&self, slot: usize) -> i32 {
        self.min + slot as i32
    }

    /// `(cumulative start, frequency)` of a slot.
    pub fn range(&self, slot: usize) -> (u32, u32) {
        (self.cum[slot], self.cum[slot + 1] - self.cum[slot])
    }

    /// Slot whose cumulative interval contains `target`.
    pub fn find(&self, target: u32) -> Option<usize> {
        if target >= FREQ_TOTAL {
            return None;
        }
        Some(self.cum.partition_point(|&c| c <= target) - 1)
    }

    /// Ideal code length in bits of one slot.
    pub fn cost_bits(&self, slot: usize) -> f64 {
        let (_, f) = self.range(slot);
        -(f as f64 / FREQ_TOTAL as f64).log2()
    }
}
