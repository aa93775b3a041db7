//! SSIM, MS-SSIM, PSNR and rate bookkeeping.
//!
//! MS-SSIM is built from graph operations so the same code serves as a
//! training loss and as an evaluation metric.

use sqlc_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Bits per pixel of uncompressed 8-bit RGB, the compression-ratio baseline.
pub const UNCOMPRESSED_BPP: f64 = 24.0;
/// Contrast-structure values are floored here before the fractional power.
pub const CS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            scales: 5,
            weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl MsSsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Scale weights usable for an image whose shorter side is `side`:
    /// the longest prefix with `side ≥ window·2^(s−1)`, renormalized to sum 1.
    pub fn effective_weights(&self, side: usize) -> Result<Vec<f64>> {
        let mut scales = self.scales.min(self.weights.len());
        while scales > 0 && side < self.window << (scales - 1) {
            scales -= 1;
        }
        if scales < 2 {
            return Err(Error::Data(format!(
                "image side {side} too small for multi-scale SSIM with window {}",
                self.window
            )));
        }
        let prefix = &self.weights[..scales];
        let total: f64 = prefix.iter().sum();
        Ok(prefix.iter().map(|w| w / total).collect())
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn window_kernel<T: Scalar>(cfg: &MsSsimConfig) -> Tensor<T> {
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let data = taps.iter().flat_map(|a| taps.iter().map(move |b| T::from_f64(a * b))).collect();
    Tensor::new(vec![1, 1, cfg.window, cfg.window], data).expect("window shape")
}

/// Spatial means of the SSIM maps of single-channel planes `[P,1,H,W]`.
struct ScaleStats {
    /// Mean luminance·contrast-structure product, `[P, 1]`.
    ssim: Var,
    /// Mean contrast-structure term, `[P, 1]`.
    cs: Var,
}

fn scale_stats<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, kernel: Var, cfg: &MsSsimConfig) -> Result<ScaleStats> {
    let c1 = cfg.c1();
    let c2 = cfg.c2();
    let mu_a = g.conv2d(a, kernel, 1, 0)?;
    let mu_b = g.conv2d(b, kernel, 1, 0)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.conv2d(aa, kernel, 1, 0)?;
    let e_bb = g.conv2d(bb, kernel, 1, 0)?;
    let e_ab = g.conv2d(ab, kernel, 1, 0)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let cs_num = g.mul_scalar(cov, 2.0);
    let cs_num = g.add_scalar(cs_num, c2);
    let cs_den = g.add(var_a, var_b)?;
    let cs_den = g.add_scalar(cs_den, c2);
    let cs_map = g.div(cs_num, cs_den)?;

    let l_num = g.mul_scalar(mu_ab, 2.0);
    let l_num = g.add_scalar(l_num, c1);
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.add_scalar(l_den, c1);
    let l_map = g.div(l_num, l_den)?;
    let ssim_map = g.mul(l_map, cs_map)?;

    Ok(ScaleStats { ssim: g.mean_spatial(ssim_map)?, cs: g.mean_spatial(cs_map)? })
}

fn as_planes<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<(Var, usize, usize)> {
    let [n, c, h, w] = match *g.shape(x) {
        [n, c, h, w] => [n, c, h, w],
        ref s => return Err(Error::Data(format!("expected [N,C,H,W], got {s:?}"))),
    };
    Ok((g.reshape(x, vec![n * c, 1, h, w])?, n, c))
}

fn check_pair<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Data(format!("shape mismatch {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// Per-plane MS-SSIM of `[N,C,H,W]` inputs, returned as `[N, C]`.
pub fn ms_ssim_planes<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, cfg: &MsSsimConfig) -> Result<Var> {
    check_pair(g, a, b)?;
    let (mut pa, n, c) = as_planes(g, a)?;
    let (mut pb, _, _) = as_planes(g, b)?;
    let side = g.shape(pa)[2].min(g.shape(pa)[3]);
    let weights = cfg.effective_weights(side)?;
    let kernel = g.constant(window_kernel(cfg));

    let mut log_sum: Option<Var> = None;
    for (s, &w) in weights.iter().enumerate() {
        if s > 0 {
            pa = g.avg_pool2(pa)?;
            pb = g.avg_pool2(pb)?;
        }
        let stats = scale_stats(g, pa, pb, kernel, cfg)?;
        let term = if s + 1 == weights.len() { stats.ssim } else { stats.cs };
        let floored = g.clamp_min(term, CS_FLOOR);
        let logged = g.log(floored);
        let weighted = g.mul_scalar(logged, w);
        log_sum = Some(match log_sum {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let ms = g.exp(log_sum.expect("at least two scales"));
    Ok(g.reshape(ms, vec![n, c])?)
}

/// Mean MS-SSIM over all planes of `[N,C,H,W]` inputs as a scalar node.
pub fn ms_ssim_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, cfg: &MsSsimConfig) -> Result<Var> {
    let planes = ms_ssim_planes(g, a, b, cfg)?;
    Ok(g.mean(planes))
}

fn batched<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<f64>> {
    let t = t.cast::<f64>();
    match *t.shape() {
        [c, h, w] => Ok(t.reshape(vec![1, c, h, w])?),
        [_, _, _, _] => Ok(t),
        ref s => Err(Error::Data(format!("expected image tensor, got {s:?}"))),
    }
}

fn pair_graph<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Graph<f64>, Var, Var)> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut g = Graph::<f64>::new();
    let va = g.constant(batched(a)?);
    let vb = g.constant(batched(b)?);
    Ok((g, va, vb))
}

/// Single-scale SSIM and its contrast-structure component, averaged over
/// pixels and channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimValue {
    pub ssim: f64,
    pub cs: f64,
}

pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &MsSsimConfig) -> Result<SsimValue> {
    let (mut g, va, vb) = pair_graph(a, b)?;
    let (pa, _, _) = as_planes(&mut g, va)?;
    let (pb, _, _) = as_planes(&mut g, vb)?;
    if g.shape(pa)[2].min(g.shape(pa)[3]) < cfg.window {
        return Err(Error::Data(format!("image smaller than the {} px window", cfg.window)));
    }
    let kernel = g.constant(window_kernel(cfg));
    let stats = scale_stats(&mut g, pa, pb, kernel, cfg)?;
    Ok(SsimValue { ssim: g.value(stats.ssim).mean_f64(), cs: g.value(stats.cs).mean_f64() })
}

/// MS-SSIM per channel (averaged over the batch when 4-D).
pub fn ms_ssim_per_channel<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &MsSsimConfig) -> Result<Vec<f64>> {
    let (mut g, va, vb) = pair_graph(a, b)?;
    let planes = ms_ssim_planes(&mut g, va, vb, cfg)?;
    let v = g.value(planes);
    let (n, c) = (v.shape()[0], v.shape()[1]);
    Ok((0..c).map(|ch| (0..n).map(|i| v.data()[i * c + ch]).sum::<f64>() / n as f64).collect())
}

/// MS-SSIM computed per channel, then averaged.
pub fn ms_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &MsSsimConfig) -> Result<f64> {
    let per = ms_ssim_per_channel(a, b, cfg)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Peak signal-to-noise ratio for unit data range, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub fn bpp(payload_bits: u64, width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::Data("bpp of an empty image".into()));
    }
    Ok(payload_bits as f64 / (width * height) as f64)
}

pub fn compression_ratio(bpp: f64) -> f64 {
    UNCOMPRESSED_BPP / bpp
}

/// Table-style label such as `1:73`.
pub fn ratio_label(bpp: f64) -> String {
    format!("1:{}", compression_ratio(bpp).round() as i64)
}
