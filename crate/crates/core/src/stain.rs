//! Colour deconvolution between RGB and Hematoxylin/Eosin/DAB concentration
//! space.
//!
//! Images are `[3, H, W]` or `[N, 3, H, W]` tensors with values in `[0, 1]`.
//! Optical density follows Beer–Lambert with a `+1` guard so black pixels
//! stay finite.

use rand::Rng;
use sqlc_tensor::Tensor;

use crate::error::{Error, FormatError, Result};

/// Stain vectors from Ruifrok & Johnston, before normalization.
const RUIFROK_ROWS: [[f64; 3]; 3] = [[0.650, 0.704, 0.286], [0.072, 0.990, 0.105], [0.268, 0.570, 0.776]];

/// Pixels with optical-density norm at or below this count as background.
pub const TISSUE_OD_THRESHOLD: f64 = 0.15;
/// Fewer tissue pixels than this make matrix estimation fall back to Ruifrok.
pub const MIN_TISSUE_PIXELS: usize = 100;
/// Iteration count used when stain estimation is enabled.
pub const DEFAULT_NMF_ITERATIONS: usize = 2000;
/// Default weight of the coefficient sparsity term.
pub const DEFAULT_NMF_SPARSITY: f64 = 1e-3;

/// Pixel-wise map over the three colour planes of a `[3,H,W]` or
/// `[N,3,H,W]` tensor.
fn map_pixels(t: &Tensor, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Result<Tensor> {
    let (n, plane) = match t.shape() {
        [3, h, w] => (1, h * w),
        [n, 3, h, w] => (*n, h * w),
        s => return Err(Error::Data(format!("expected 3-channel image, got shape {s:?}"))),
    };
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for b in 0..n {
        let base = b * 3 * plane;
        for p in 0..plane {
            let px = [0, 1, 2].map(|c| src[base + c * plane + p] as f64);
            let v = f(px);
            for c in 0..3 {
                out[base + c * plane + p] = v[c] as f32;
            }
        }
    }
    Ok(Tensor::new(t.shape().to_vec(), out)?)
}

pub fn rgb_value_to_od(v: f64) -> f64 {
    -((255.0 * v + 1.0) / 256.0).log10()
}

pub fn od_value_to_rgb(od: f64) -> f64 {
    ((256.0 * 10f64.powf(-od) - 1.0) / 255.0).clamp(0.0, 1.0)
}

/// Optical density of every channel. Returns the density image and the
/// number of input values that had to be clamped into `[0, 1]`.
pub fn rgb_to_od(rgb: &Tensor) -> Result<(Tensor, usize)> {
    let mut clamped = 0;
    let od = map_pixels(rgb, |px| {
        px.map(|v| {
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            rgb_value_to_od(v.clamp(0.0, 1.0))
        })
    })?;
    if clamped > 0 {
        log::warn!("rgb_to_od: clamped {clamped} out-of-range values");
    }
    Ok((od, clamped))
}

pub fn od_to_rgb(od: &Tensor) -> Result<Tensor> {
    map_pixels(od, |px| px.map(od_value_to_rgb))
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    v.map(|x| x / n)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-9 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // adjugate transpose: cofactor of (j, i)
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

/// Stain optical-density vectors (rows: Hematoxylin, Eosin, DAB/residual)
/// and the inverse used for deconvolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inv: [[f64; 3]; 3],
}

impl StainMatrix {
    pub fn ruifrok() -> Self {
        Self::from_rows(RUIFROK_ROWS.map(normalized)).expect("Ruifrok matrix is valid")
    }

    /// Validates unit-norm rows, non-negative H and E rows and invertibility.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, FormatError> {
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::BadStainMatrix(format!("row {i} not finite")));
            }
            if (norm(*r) - 1.0).abs() > 1e-6 {
                return Err(FormatError::BadStainMatrix(format!("row {i} has norm {}", norm(*r))));
            }
            if i < 2 && r.iter().any(|&v| v < 0.0) {
                return Err(FormatError::BadStainMatrix(format!("row {i} has negative entries")));
            }
        }
        let inv = invert3(&rows).ok_or_else(|| FormatError::BadStainMatrix("singular".into()))?;
        Ok(StainMatrix { rows, inv })
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn inverse(&self) -> &[[f64; 3]; 3] {
        &self.inv
    }

    /// Concentrations of a single optical-density pixel.
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|j| (0..3).map(|i| od[i] * self.inv[i][j]).sum())
    }

    /// Optical density produced by the given concentrations.
    pub fn density(&self, c: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|j| (0..3).map(|i| c[i] * self.rows[i][j]).sum())
    }

    /// Nine little-endian `f32` values, row-major.
    pub fn to_le_bytes(&self) -> [u8; 36] {
        let mut out = [0u8; 36];
        for (k, v) in self.rows.iter().flatten().enumerate() {
            out[4 * k..4 * k + 4].copy_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8; 36]) -> Result<Self, FormatError> {
        let mut rows = [[0.0; 3]; 3];
        for k in 0..9 {
            let v = f32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
            rows[k / 3][k % 3] = v as f64;
        }
        Self::from_rows(rows)
    }

    /// Rounds every entry through `f32`, the precision used on disk.
    pub fn quantized(&self) -> Self {
        Self::from_le_bytes(&self.to_le_bytes()).expect("re-reading a valid matrix")
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::ruifrok()
    }
}

/// Raw (unnormalized) stain concentrations of every pixel.
pub fn deconvolve(rgb: &Tensor, matrix: &StainMatrix) -> Result<Tensor> {
    map_pixels(rgb, |px| matrix.concentrations(px.map(|v| rgb_value_to_od(v.clamp(0.0, 1.0)))))
}

/// RGB image rendered from raw concentrations.
pub fn reconstruct(hed_raw: &Tensor, matrix: &StainMatrix) -> Result<Tensor> {
    map_pixels(hed_raw, |c| matrix.density(c).map(od_value_to_rgb))
}

/// Per-channel affine ranges mapping raw concentrations into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRanges {
    pub lo: [f32; 3],
    pub hi: [f32; 3],
}

impl Default for NormRanges {
    fn default() -> Self {
        NormRanges { lo: [-0.1; 3], hi: [2.0; 3] }
    }
}

impl NormRanges {
    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            if !(self.lo[c] < self.hi[c]) {
                return Err(Error::Config(format!("normalization range {c}: lo {} >= hi {}", self.lo[c], self.hi[c])));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lo[channel] as f64, self.hi[channel] as f64);
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lo[channel] as f64, self.hi[channel] as f64);
        lo + v * (hi - lo)
    }
}

pub fn normalize_hed(hed_raw: &Tensor, ranges: &NormRanges) -> Result<Tensor> {
    ranges.validate()?;
    map_pixels(hed_raw, |c| [0, 1, 2].map(|i| ranges.normalize(i, c[i])))
}

pub fn denormalize_hed(hed: &Tensor, ranges: &NormRanges) -> Result<Tensor> {
    ranges.validate()?;
    map_pixels(hed, |c| [0, 1, 2].map(|i| ranges.denormalize(i, c[i])))
}

/// Per-patch stain jitter applied to the H and E channels in normalized
/// concentration space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub alpha: [f32; 2],
    pub beta: [f32; 2],
}

impl AugmentParams {
    pub const ALPHA_RANGE: f32 = 0.05;
    pub const BETA_RANGE: f32 = 0.2;
    /// Size of a unit `beta` shift in normalized units.
    pub const BETA_SCALE: f32 = 0.1;

    pub fn identity() -> Self {
        AugmentParams { alpha: [0.0; 2], beta: [0.0; 2] }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let a = Self::ALPHA_RANGE;
        let b = Self::BETA_RANGE;
        AugmentParams {
            alpha: [rng.gen_range(-a..=a), rng.gen_range(-a..=a)],
            beta: [rng.gen_range(-b..=b), rng.gen_range(-b..=b)],
        }
    }
}

pub fn augment(hed: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    map_pixels(hed, |c| {
        let mut out = c;
        for i in 0..2 {
            let scaled = c[i] * (1.0 + params.alpha[i] as f64);
            out[i] = (scaled + (params.beta[i] * AugmentParams::BETA_SCALE) as f64).clamp(0.0, 1.0);
        }
        out
    })
}

/// An RGB image with its normalized stain concentrations and the
/// six-channel concatenation fed to the stain encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StainedPatch {
    pub rgb: Tensor,
    pub hed: Tensor,
    pub z: Tensor,
}

/// Concatenates two `[C,H,W]` or `[N,C,H,W]` tensors along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let split = |t: &Tensor| -> Result<(usize, usize, usize, usize)> {
        match *t.shape() {
            [c, h, w] => Ok((1, c, h, w)),
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::Data(format!("expected image tensor, got {s:?}"))),
        }
    };
    let (na, ca, h, w) = split(a)?;
    let (nb, cb, hb, wb) = split(b)?;
    if na != nb || h != hb || w != wb || a.shape().len() != b.shape().len() {
        return Err(Error::Data(format!("cannot concat {:?} and {:?}", a.shape(), b.shape())));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..na {
        out.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    let shape = if a.shape().len() == 3 { vec![ca + cb, h, w] } else { vec![na, ca + cb, h, w] };
    Ok(Tensor::new(shape, out)?)
}

pub fn make_z(rgb: &Tensor, matrix: &StainMatrix, ranges: &NormRanges) -> Result<StainedPatch> {
    let hed = normalize_hed(&deconvolve(rgb, matrix)?, ranges)?;
    let z = concat_channels(rgb, &hed)?;
    Ok(StainedPatch { rgb: rgb.clone(), hed, z })
}

/// Outcome of sparse non-negative factorization of tissue optical densities.
#[derive(Debug, Clone)]
pub struct StainEstimate {
    pub matrix: StainMatrix,
    /// True when too few tissue pixels were present and Ruifrok was used.
    pub fallback: bool,
    /// Objective value after every iteration.
    pub objective: Vec<f64>,
}

/// `‖OD − C·W‖²_F + sparsity·‖C‖₁` for two stain rows `w`.
pub fn nmf_objective(od: &[[f64; 3]], coeffs: &[[f64; 2]], w: &[[f64; 3]; 2], sparsity: f64) -> f64 {
    od.iter()
        .zip(coeffs)
        .map(|(o, c)| {
            let r: f64 = (0..3).map(|j| (o[j] - c[0] * w[0][j] - c[1] * w[1][j]).powi(2)).sum();
            r + sparsity * (c[0] + c[1])
        })
        .sum()
}

/// Exact non-negative least-squares coefficients of every pixel given
/// fixed rows. With two rows the minimizer is either the unconstrained
/// solution or lies on one of the two axes.
fn update_coeffs(od: &[[f64; 3]], coeffs: &mut [[f64; 2]], w: &[[f64; 3]; 2], sparsity: f64) {
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let g = [[dot(&w[0], &w[0]), dot(&w[0], &w[1])], [dot(&w[1], &w[0]), dot(&w[1], &w[1])]];
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    // c·G·c − 2·b·c, the objective up to a per-pixel constant
    let value = |c: [f64; 2], b: [f64; 2]| {
        c[0] * c[0] * g[0][0] + 2.0 * c[0] * c[1] * g[0][1] + c[1] * c[1] * g[1][1] - 2.0 * (b[0] * c[0] + b[1] * c[1])
    };
    for (o, c) in od.iter().zip(coeffs.iter_mut()) {
        let b = [dot(o, &w[0]) - sparsity / 2.0, dot(o, &w[1]) - sparsity / 2.0];
        if det > 1e-12 {
            let free = [(g[1][1] * b[0] - g[0][1] * b[1]) / det, (g[0][0] * b[1] - g[1][0] * b[0]) / det];
            if free[0] >= 0.0 && free[1] >= 0.0 {
                *c = free;
                continue;
            }
        }
        let axis0 = [if g[0][0] > 0.0 { (b[0] / g[0][0]).max(0.0) } else { 0.0 }, 0.0];
        let axis1 = [0.0, if g[1][1] > 0.0 { (b[1] / g[1][1]).max(0.0) } else { 0.0 }];
        *c = if value(axis0, b) <= value(axis1, b) { axis0 } else { axis1 };
    }
}

/// Optimal coefficients for fixed stain rows.
pub fn fit_coefficients(od: &[[f64; 3]], w: &[[f64; 3]; 2], sparsity: f64) -> Vec<[f64; 2]> {
    let mut coeffs = vec![[0.0; 2]; od.len()];
    update_coeffs(od, &mut coeffs, w, sparsity);
    coeffs
}

/// Sparse NMF estimate of the H and E stain vectors from an `[K, 3]`
/// optical-density tensor. Background pixels are discarded first.
pub fn estimate_stain_matrix(od_pixels: &Tensor, sparsity: f64, iterations: usize) -> Result<StainEstimate> {
    let [_, 3] = od_pixels.shape() else {
        return Err(Error::Data(format!("expected [K, 3] densities, got {:?}", od_pixels.shape())));
    };
    let od: Vec<[f64; 3]> = od_pixels
        .data()
        .chunks_exact(3)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .filter(|p| norm(*p) > TISSUE_OD_THRESHOLD)
        .collect();
    if od.len() < MIN_TISSUE_PIXELS {
        log::warn!("stain estimation: {} tissue pixels, falling back to Ruifrok", od.len());
        return Ok(StainEstimate { matrix: StainMatrix::ruifrok(), fallback: true, objective: vec![] });
    }

    let ruifrok = StainMatrix::ruifrok();
    let mut w = [ruifrok.rows[0], ruifrok.rows[1]];
    let mut coeffs = vec![[0.0; 2]; od.len()];
    let mut objective = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        update_coeffs(&od, &mut coeffs, &w, sparsity);
        // Row update restricted to the non-negative unit sphere: the
        // minimizer is the normalized positive part of the correlation.
        for k in 0..2 {
            let other = 1 - k;
            let mut a = [0.0; 3];
            for (o, c) in od.iter().zip(&coeffs) {
                for j in 0..3 {
                    a[j] += c[k] * (o[j] - c[other] * w[other][j]);
                }
            }
            let a = a.map(|v| v.max(0.0));
            if norm(a) > 0.0 {
                w[k] = normalized(a);
            }
        }
        objective.push(nmf_objective(&od, &coeffs, &w, sparsity));
    }

    if w[0][2] < w[1][2] {
        w.swap(0, 1);
    }
    let third = normalized(cross(w[0], w[1]));
    let matrix = StainMatrix::from_rows([w[0], w[1], third])
        .map_err(|e| Error::Data(format!("estimated stain matrix unusable: {e}")))?;
    Ok(StainEstimate { matrix, fallback: false, objective })
}

/// Optical densities of an RGB image as an `[H·W, 3]` pixel list.
pub fn od_pixels(rgb: &Tensor) -> Result<Tensor> {
    let (od, _) = rgb_to_od(rgb)?;
    let [3, h, w] = *od.shape() else {
        return Err(Error::Data(format!("expected [3,H,W] image, got {:?}", od.shape())));
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        out.extend((0..3).map(|c| od.data()[c * plane + p]));
    }
    Ok(Tensor::new(vec![plane, 3], out)?)
}
