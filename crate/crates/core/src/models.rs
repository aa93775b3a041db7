//! Stain-encoder autoencoder, compression transforms and training losses.
//!
//! Parameters live in `f32` tensors. Forward passes are written against a
//! [`Graph`] of any scalar type so the same code trains in `f32` and is
//! gradient-checked in `f64`.
//!
//! Parameter names follow a fixed grammar:
//! `se.enc.{i}.{w,b}`, `se.dec.{i}.{w,b}`, `nicm.ana.{i}.{w,b}`,
//! `nicm.ana.gdn{i}.{beta,gamma}`, `nicm.syn.{i}.{w,b}`,
//! `nicm.syn.igdn{i}.{beta,gamma}` and `nicm.ent.ch{c}.stage{k}.{h,b,a}`.

use rand::Rng;
use sqlc_tensor::{Graph, Scalar, Tensor, Var};

use crate::bundle::ModelBundle;
use crate::entropy::{EntropyModel, EntropyVars, LAYER_WIDTHS, STAGES};
use crate::error::{BundleError, Error, Result};
use crate::metrics::{ms_ssim_graph, MsSsimConfig};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Positivity offset of reparameterized GDN parameters.
pub const GDN_OFFSET: f64 = 1e-6;
/// Scale applied to distortion-like loss terms (8-bit squared range).
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;
pub const SE_INPUT_CHANNELS: usize = 6;
pub const SE_HIDDEN: usize = 32;
pub const DEFAULT_LATENT_CHANNELS: usize = 3;
pub const DEFAULT_NICM_WIDTH: usize = 32;
pub const DEFAULT_NICM_LATENTS: usize = 48;
const NICM_KERNEL: usize = 5;
/// Weight and bias of 8 convolutions plus beta and gamma of 6 GDN layers.
const TRANSFORM_PARAMETERS: usize = 28;
/// Spatial reduction of the analysis transform.
pub const NICM_STRIDE: usize = 16;

/// Rate–distortion trade-off per quality index 1..=8.
pub const QUALITY_LAMBDAS: [f64; 8] = [0.0016, 0.0045, 0.0127, 0.0359, 0.101, 0.285, 0.803, 1.6];

pub fn lambda_for_quality(quality: u8) -> Result<f64> {
    QUALITY_LAMBDAS
        .get((quality as usize).wrapping_sub(1))
        .copied()
        .ok_or_else(|| Error::Config(format!("quality index {quality} outside 1..=8")))
}

fn bind_tensor<T: Scalar>(g: &mut Graph<T>, t: &Tensor, trainable: bool) -> Var {
    let t = t.cast::<T>();
    if trainable {
        g.parameter(t)
    } else {
        g.constant(t)
    }
}

/// Convolution weights `[out, in, k, k]` (or `[in, out, k, k]` when
/// transposed) and a per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, transposed: bool, gain: f64, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (gain * 3.0 / fan_in).sqrt();
        let shape = if transposed { vec![cin, cout, k, k] } else { vec![cout, cin, k, k] };
        ConvLayer { weight: Tensor::uniform(shape, -bound, bound, rng), bias: Tensor::zeros(vec![cout]) }
    }

    fn from_bundle(bundle: &ModelBundle, prefix: &str) -> Result<Self, BundleError> {
        Ok(ConvLayer {
            weight: bundle.get(&format!("{prefix}.w"))?.clone(),
            bias: bundle.get(&format!("{prefix}.b"))?.clone(),
        })
    }
}

/// GDN parameters stored raw; the effective value is `offset + raw²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnLayer {
    pub beta: Tensor,
    pub gamma: Tensor,
}

impl GdnLayer {
    fn new(channels: usize) -> Self {
        let beta = Tensor::full(vec![channels], (1.0 - GDN_OFFSET).sqrt() as f32);
        let mut gamma = Tensor::full(vec![channels, channels], 0.01);
        for c in 0..channels {
            gamma.data_mut()[c * channels + c] = (0.1f64).sqrt() as f32;
        }
        GdnLayer { beta, gamma }
    }

    fn from_bundle(bundle: &ModelBundle, prefix: &str) -> Result<Self, BundleError> {
        Ok(GdnLayer {
            beta: bundle.get(&format!("{prefix}.beta"))?.clone(),
            gamma: bundle.get(&format!("{prefix}.gamma"))?.clone(),
        })
    }
}

/// Named view of a model's parameters, in a fixed order.
pub trait Parameters {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every parameter into `g` in [`Parameters::named_parameters`]
    /// order.
    fn bind_all<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.named_parameters().into_iter().map(|(_, t)| bind_tensor(g, t, trainable)).collect()
    }
}

/// Stain encoder: fuses the six RGB+HED channels into a small latent image
/// of the same spatial size, and decodes it back.
#[derive(Debug, Clone, PartialEq)]
pub struct SeModel {
    pub encoder: Vec<ConvLayer>,
    pub decoder: Vec<ConvLayer>,
}

/// Layer specs `(in, out, kernel)` of the SE encoder and decoder.
fn se_layout(latent: usize) -> ([(usize, usize, usize); 3], [(usize, usize, usize); 3]) {
    (
        [(SE_INPUT_CHANNELS, SE_HIDDEN, 3), (SE_HIDDEN, SE_HIDDEN, 3), (SE_HIDDEN, latent, 1)],
        [(latent, SE_HIDDEN, 3), (SE_HIDDEN, SE_HIDDEN, 3), (SE_HIDDEN, SE_INPUT_CHANNELS, 1)],
    )
}

impl SeModel {
    pub fn new<R: Rng + ?Sized>(latent_channels: usize, rng: &mut R) -> Self {
        let (enc, dec) = se_layout(latent_channels);
        let make = |(i, o, k): (usize, usize, usize), rng: &mut R| ConvLayer::new(i, o, k, false, 2.0, rng);
        SeModel {
            encoder: enc.into_iter().map(|s| make(s, rng)).collect(),
            decoder: dec.into_iter().map(|s| make(s, rng)).collect(),
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.encoder[2].weight.shape()[0]
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self, BundleError> {
        let encoder = (0..3).map(|i| ConvLayer::from_bundle(bundle, &format!("se.enc.{i}"))).collect::<Result<Vec<_>, _>>()?;
        let decoder = (0..3).map(|i| ConvLayer::from_bundle(bundle, &format!("se.dec.{i}"))).collect::<Result<Vec<_>, _>>()?;
        let model = SeModel { encoder, decoder };
        let (enc, dec) = se_layout(model.latent_channels());
        for (layer, (i, o, k)) in model.encoder.iter().zip(enc).chain(model.decoder.iter().zip(dec)) {
            if layer.weight.shape() != [o, i, k, k] || layer.bias.shape() != [o] {
                return Err(BundleError::Malformed(format!("stain encoder layer has shape {:?}", layer.weight.shape())));
            }
        }
        Ok(model)
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> SeVars {
        SeVars { vars: self.bind_all(g, trainable) }
    }

    fn stack<T: Scalar>(g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, pair) in vars.chunks(2).enumerate() {
            let k = g.shape(pair[0])[2];
            h = g.conv2d(h, pair[0], 1, k / 2)?;
            h = g.channel_bias(h, pair[1])?;
            h = if i < 2 { g.leaky_relu(h, LEAKY_SLOPE) } else { g.sigmoid(h) };
        }
        Ok(h)
    }

    /// `[N,6,H,W]` → `[N,C_x,H,W]` in `(0, 1)`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, vars: &SeVars, z: Var) -> Result<Var> {
        Self::stack(g, &vars.vars[..6], z)
    }

    /// `[N,C_x,H,W]` → `[N,6,H,W]` in `(0, 1)`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, vars: &SeVars, x: Var) -> Result<Var> {
        Self::stack(g, &vars.vars[6..], x)
    }

    pub fn encode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.eval(z, true)
    }

    pub fn decode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, false)
    }

    fn eval(&self, input: &Tensor, encode: bool) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g, false);
        let (batched, squeeze) = batch4(input)?;
        let x = g.constant(batched);
        let y = if encode { self.encode(&mut g, &vars, x)? } else { self.decode(&mut g, &vars, x)? };
        unbatch(g.value(y).clone(), squeeze)
    }
}

impl Parameters for SeModel {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (part, layers) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("se.{part}.{i}.w"), &l.weight));
                out.push((format!("se.{part}.{i}.b"), &l.bias));
            }
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SeVars {
    vars: Vec<Var>,
}

impl SeVars {
    /// Wraps handles already in [`Parameters::named_parameters`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        SeVars { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Factorized-prior compression model: analysis and synthesis transforms
/// plus the entropy model over their latents.
#[derive(Debug, Clone, PartialEq)]
pub struct NicmModel {
    pub analysis: Vec<ConvLayer>,
    pub analysis_gdn: Vec<GdnLayer>,
    pub synthesis: Vec<ConvLayer>,
    pub synthesis_gdn: Vec<GdnLayer>,
    pub entropy: EntropyModel,
}

#[derive(Debug, Clone)]
pub struct NicmVars {
    transforms: Vec<Var>,
    pub entropy: EntropyVars,
}

impl NicmVars {
    /// Wraps handles already in [`Parameters::named_parameters`] order.
    pub fn from_vars(mut vars: Vec<Var>) -> Self {
        let entropy = vars.split_off(TRANSFORM_PARAMETERS.min(vars.len()));
        NicmVars { transforms: vars, entropy: EntropyVars::from_vars(entropy) }
    }

    /// All parameter handles in [`Parameters::named_parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.transforms.iter().chain(self.entropy.vars()).copied().collect()
    }
}

impl NicmModel {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, width: usize, latents: usize, rng: &mut R) -> Self {
        let k = NICM_KERNEL;
        let ana_dims = [(in_channels, width), (width, width), (width, width), (width, latents)];
        let syn_dims = [(latents, width), (width, width), (width, width), (width, in_channels)];
        NicmModel {
            analysis: ana_dims.iter().map(|&(i, o)| ConvLayer::new(i, o, k, false, 1.0, rng)).collect(),
            analysis_gdn: (0..3).map(|_| GdnLayer::new(width)).collect(),
            synthesis: syn_dims.iter().map(|&(i, o)| ConvLayer::new(i, o, k, true, 4.0, rng)).collect(),
            synthesis_gdn: (0..3).map(|_| GdnLayer::new(width)).collect(),
            entropy: EntropyModel::new(latents, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.analysis[0].weight.shape()[1]
    }

    pub fn latent_channels(&self) -> usize {
        self.analysis[3].weight.shape()[0]
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> NicmVars {
        let transforms = self.transform_parameters().into_iter().map(|(_, t)| bind_tensor(g, t, trainable)).collect();
        NicmVars { transforms, entropy: self.entropy.bind(g, trainable) }
    }

    fn transform_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.analysis.iter().enumerate() {
            out.push((format!("nicm.ana.{i}.w"), &l.weight));
            out.push((format!("nicm.ana.{i}.b"), &l.bias));
        }
        for (i, l) in self.analysis_gdn.iter().enumerate() {
            out.push((format!("nicm.ana.gdn{i}.beta"), &l.beta));
            out.push((format!("nicm.ana.gdn{i}.gamma"), &l.gamma));
        }
        for (i, l) in self.synthesis.iter().enumerate() {
            out.push((format!("nicm.syn.{i}.w"), &l.weight));
            out.push((format!("nicm.syn.{i}.b"), &l.bias));
        }
        for (i, l) in self.synthesis_gdn.iter().enumerate() {
            out.push((format!("nicm.syn.igdn{i}.beta"), &l.beta));
            out.push((format!("nicm.syn.igdn{i}.gamma"), &l.gamma));
        }
        out
    }

    fn gdn<T: Scalar>(g: &mut Graph<T>, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let b = g.square(beta);
        let b = g.add_scalar(b, GDN_OFFSET);
        let gm = g.square(gamma);
        let gm = g.add_scalar(gm, GDN_OFFSET);
        Ok(g.gdn(x, b, gm, inverse)?)
    }

    /// `[N,C,H,W]` with `H, W` multiples of 16 → `[N,M,H/16,W/16]`.
    pub fn analyze<T: Scalar>(&self, g: &mut Graph<T>, vars: &NicmVars, x: Var) -> Result<Var> {
        let v = &vars.transforms;
        let mut h = x;
        for i in 0..4 {
            h = g.conv2d(h, v[2 * i], 2, NICM_KERNEL / 2)?;
            h = g.channel_bias(h, v[2 * i + 1])?;
            if i < 3 {
                h = Self::gdn(g, h, v[8 + 2 * i], v[8 + 2 * i + 1], false)?;
            }
        }
        Ok(h)
    }

    /// Inverse of [`NicmModel::analyze`] in shape; output in `(0, 1)`.
    pub fn synthesize<T: Scalar>(&self, g: &mut Graph<T>, vars: &NicmVars, y: Var) -> Result<Var> {
        let v = &vars.transforms[14..];
        let mut h = y;
        for i in 0..4 {
            h = g.conv2d_transpose(h, v[2 * i], 2, NICM_KERNEL / 2, 1)?;
            h = g.channel_bias(h, v[2 * i + 1])?;
            if i < 3 {
                h = Self::gdn(g, h, v[8 + 2 * i], v[8 + 2 * i + 1], true)?;
            }
        }
        Ok(g.sigmoid(h))
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self, BundleError> {
        let conv = |p: String| ConvLayer::from_bundle(bundle, &p);
        let gdn = |p: String| GdnLayer::from_bundle(bundle, &p);
        let analysis = (0..4).map(|i| conv(format!("nicm.ana.{i}"))).collect::<Result<Vec<_>, _>>()?;
        let analysis_gdn = (0..3).map(|i| gdn(format!("nicm.ana.gdn{i}"))).collect::<Result<Vec<_>, _>>()?;
        let synthesis = (0..4).map(|i| conv(format!("nicm.syn.{i}"))).collect::<Result<Vec<_>, _>>()?;
        let synthesis_gdn = (0..3).map(|i| gdn(format!("nicm.syn.igdn{i}"))).collect::<Result<Vec<_>, _>>()?;
        let latents = analysis[3].weight.shape()[0];
        let mut stacked = Vec::new();
        for (kind, width) in [("h", 0usize), ("b", 1), ("a", 2)] {
            let stages = if kind == "a" { STAGES - 1 } else { STAGES };
            for k in 0..stages {
                let mut data = Vec::new();
                for c in 0..latents {
                    data.extend_from_slice(bundle.get(&format!("nicm.ent.ch{c}.stage{k}.{kind}"))?.data());
                }
                let (din, dout) = (LAYER_WIDTHS[k], LAYER_WIDTHS[k + 1]);
                let shape = if width == 0 { vec![latents, dout, din] } else { vec![latents, dout] };
                stacked.push(Tensor::new(shape, data).map_err(|e| BundleError::Malformed(e.to_string()))?);
            }
        }
        let entropy = EntropyModel::from_tensors(stacked).map_err(|e| BundleError::Malformed(e.to_string()))?;
        Ok(NicmModel { analysis, analysis_gdn, synthesis, synthesis_gdn, entropy })
    }

    /// Entries for a bundle, with the entropy model split per channel.
    pub fn bundle_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.transform_parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let m = self.entropy.channels();
        let groups = [("h", &self.entropy.matrices), ("b", &self.entropy.biases), ("a", &self.entropy.factors)];
        for c in 0..m {
            for (kind, tensors) in groups {
                for (k, t) in tensors.iter().enumerate() {
                    let per = t.numel() / m;
                    let shape = t.shape()[1..].to_vec();
                    let data = t.data()[c * per..(c + 1) * per].to_vec();
                    out.push((format!("nicm.ent.ch{c}.stage{k}.{kind}"), Tensor::new(shape, data).expect("slice")));
                }
            }
        }
        out
    }
}

impl Parameters for NicmModel {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.transform_parameters();
        for (k, t) in self.entropy.tensors().into_iter().enumerate() {
            out.push((format!("nicm.ent.stacked{k}"), t));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.analysis {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for l in &mut self.analysis_gdn {
            out.extend([&mut l.beta, &mut l.gamma]);
        }
        for l in &mut self.synthesis {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        for l in &mut self.synthesis_gdn {
            out.extend([&mut l.beta, &mut l.gamma]);
        }
        out.extend(self.entropy.tensors_mut());
        out
    }
}

/// Adds a batch axis to `[C,H,W]` input; reports whether it did.
pub fn batch4(t: &Tensor) -> Result<(Tensor, bool)> {
    match *t.shape() {
        [c, h, w] => Ok((t.reshape(vec![1, c, h, w])?, true)),
        [_, _, _, _] => Ok((t.clone(), false)),
        ref s => Err(Error::Data(format!("expected image tensor, got {s:?}"))),
    }
}

pub fn unbatch(t: Tensor, squeeze: bool) -> Result<Tensor> {
    if squeeze {
        let s = t.shape()[1..].to_vec();
        Ok(t.reshape(s)?)
    } else {
        Ok(t)
    }
}

/// Reflection padding (bottom/right) so both sides become multiples of 16.
pub fn pad_to_stride<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[2], s[3]);
    let ph = h.next_multiple_of(NICM_STRIDE) - h;
    let pw = w.next_multiple_of(NICM_STRIDE) - w;
    if ph == 0 && pw == 0 {
        return Ok(x);
    }
    if ph >= h || pw >= w {
        return Err(Error::Data(format!("image {w}x{h} too small to reflect-pad to a multiple of {NICM_STRIDE}")));
    }
    Ok(g.reflect_pad(x, 0, ph, 0, pw)?)
}

/// Rate, distortion and total loss of one evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RdTerms {
    pub loss: Var,
    pub bpp: Var,
    pub distortion: Var,
}

/// `bpp + λ·255²·(1 − MS-SSIM(original, reconstruction))`.
pub fn rd_loss<T: Scalar>(
    g: &mut Graph<T>,
    original: Var,
    reconstruction: Var,
    rate_bits: Var,
    lambda: f64,
    num_pixels: usize,
    cfg: &MsSsimConfig,
) -> Result<RdTerms> {
    let bpp = g.mul_scalar(rate_bits, 1.0 / num_pixels as f64);
    let ms = ms_ssim_graph(g, original, reconstruction, cfg)?;
    let neg = g.mul_scalar(ms, -1.0);
    let distortion = g.add_scalar(neg, 1.0);
    let weighted = g.mul_scalar(distortion, lambda * DISTORTION_SCALE);
    let loss = g.add(bpp, weighted)?;
    Ok(RdTerms { loss, bpp, distortion })
}

/// [`rd_loss`] plus `μ·255²·mean((ẑ − ẑ′)²)`.
#[allow(clippy::too_many_arguments)]
pub fn sqlc_finetune_loss<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    x_hat: Var,
    z_hat: Var,
    z_hat_prime: Var,
    rate_bits: Var,
    lambda: f64,
    mu: f64,
    num_pixels: usize,
    cfg: &MsSsimConfig,
) -> Result<(RdTerms, Var)> {
    let rd = rd_loss(g, x, x_hat, rate_bits, lambda, num_pixels, cfg)?;
    let diff = g.sub(z_hat, z_hat_prime)?;
    let sq = g.square(diff);
    let euclid = g.mean(sq);
    let weighted = g.mul_scalar(euclid, mu * DISTORTION_SCALE);
    let loss = g.add(rd.loss, weighted)?;
    Ok((RdTerms { loss, ..rd }, euclid))
}

/// `1 −` mean over channels of per-channel MS-SSIM.
pub fn channelwise_msssim_loss<T: Scalar>(g: &mut Graph<T>, z: Var, z_hat: Var, cfg: &MsSsimConfig) -> Result<Var> {
    let ms = ms_ssim_graph(g, z, z_hat, cfg)?;
    let neg = g.mul_scalar(ms, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}
