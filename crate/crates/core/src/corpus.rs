//! Synthetic H&E patch generator for the bundled desk-scale corpus.
//!
//! Tissue is painted in stain-concentration space (eosin stroma with
//! fibre texture, hematoxylin nuclei as soft ellipses) and rendered to RGB
//! through the Ruifrok matrix. Class 1 sources lean towards denser, larger,
//! darker nuclei than class 0; the ranges overlap. Each source has its own
//! stain intensity so that tiles of one source share a look.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{file_hash, write_image, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::stain::{reconstruct, StainMatrix};
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub sources: usize,
    pub tiles_per_source: usize,
    pub size: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { sources: 20, tiles_per_source: 10, size: 64, seed: 7, val_fraction: 0.25 }
    }
}

/// Per-source rendering parameters.
#[derive(Debug, Clone, Copy)]
struct SourceStyle {
    label: u8,
    h_gain: f64,
    e_gain: f64,
    nuclei_per_kpx: f64,
    radius: (f64, f64),
    nucleus_h: f64,
}

impl SourceStyle {
    fn sample(label: u8, rng: &mut ChaCha8Rng) -> Self {
        let (density, radius, nucleus_h) = if label == 1 {
            (rng.gen_range(1.3..2.0), (2.8, 4.6), rng.gen_range(0.85..1.15))
        } else {
            (rng.gen_range(0.9..1.5), (2.4, 3.8), rng.gen_range(0.75..1.0))
        };
        SourceStyle {
            label,
            h_gain: rng.gen_range(0.85..1.15),
            e_gain: rng.gen_range(0.8..1.2),
            nuclei_per_kpx: density,
            radius,
            nucleus_h,
        }
    }
}

/// Bilinearly interpolated lattice noise in `[0, 1]`.
fn value_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |a: usize, b: usize| lattice[a * n + b];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn render_tile(style: &SourceStyle, size: usize, matrix: &StainMatrix, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let plane = size * size;
    let mut hed = vec![0.0f64; 3 * plane];
    let coarse = value_noise(size, 16, rng);
    let fine = value_noise(size, 4, rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq: f64 = rng.gen_range(0.25..0.45);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let fibre = 0.5 + 0.5 * ((x as f64 * ca + y as f64 * sa) * freq + 3.0 * coarse[i]).sin();
            let tissue = (0.35 + 0.65 * coarse[i]).min(1.0);
            hed[plane + i] = style.e_gain * tissue * (0.25 + 0.35 * fibre + 0.15 * fine[i]);
            hed[i] = style.h_gain * 0.06 * fine[i];
            hed[2 * plane + i] = 0.02 * (fine[i] - 0.5);
        }
    }

    let count = (style.nuclei_per_kpx * plane as f64 / 1000.0).round() as usize;
    for _ in 0..count {
        let cy: f64 = rng.gen_range(0.0..size as f64);
        let cx: f64 = rng.gen_range(0.0..size as f64);
        let a: f64 = rng.gen_range(style.radius.0..style.radius.1);
        let b = a * rng.gen_range(0.6..1.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let peak = style.h_gain * style.nucleus_h * rng.gen_range(0.85..1.15);
        let reach = (a + 2.0).ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (py, px) = (cy as isize + dy, cx as isize + dx);
                if py < 0 || px < 0 || py >= size as isize || px >= size as isize {
                    continue;
                }
                let (ry, rx) = (py as f64 - cy, px as f64 - cx);
                let u = (rx * ct + ry * st) / a;
                let v = (-rx * st + ry * ct) / b;
                let r = (u * u + v * v).sqrt();
                // Soft edge over about one pixel, chromatin speckle inside.
                let w = (1.0 / (1.0 + ((r - 1.0) * 6.0).exp())).clamp(0.0, 1.0);
                if w < 1e-3 {
                    continue;
                }
                let i = py as usize * size + px as usize;
                let texture = 0.85 + 0.3 * fine[(i * 7 + 13) % plane];
                hed[i] = hed[i].max(peak * w * texture);
                hed[plane + i] *= 1.0 - 0.6 * w;
            }
        }
    }

    let raw = Tensor::new(vec![3, size, size], hed.iter().map(|&v| v as f32).collect())?;
    let rgb = reconstruct(&raw, matrix)?;
    let noisy = rgb.data().iter().map(|&v| (v as f64 + rng.gen_range(-0.01..0.01)).clamp(0.0, 1.0) as f32).collect();
    Ok(Tensor::new(vec![3, size, size], noisy)?)
}

/// One generated patch with its source and class.
#[derive(Debug, Clone)]
pub struct SyntheticPatch {
    pub source: usize,
    pub index: usize,
    pub label: u8,
    pub image: Tensor,
}

/// Generates the corpus in memory, half the sources per class.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<SyntheticPatch>> {
    if spec.sources < 2 || spec.tiles_per_source == 0 || spec.size < 16 {
        return Err(Error::Config(format!("degenerate corpus spec {spec:?}")));
    }
    let matrix = StainMatrix::ruifrok();
    let mut out = Vec::with_capacity(spec.sources * spec.tiles_per_source);
    for s in 0..spec.sources {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let label = (s % 2) as u8;
        let style = SourceStyle::sample(label, &mut rng);
        for index in 0..spec.tiles_per_source {
            let image = render_tile(&style, spec.size, &matrix, &mut rng)?;
            out.push(SyntheticPatch { source: s, index, label: style.label, image });
        }
    }
    Ok(out)
}

/// Writes PNGs under `dir/src{NN}/` and `dir/manifest.jsonl` with a
/// source-level split.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for p in generate(spec)? {
        let rel = format!("src{:02}/tile{:02}.png", p.source, p.index);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_image(&p.image, &path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            path: rel,
            w: spec.size as u32,
            h: spec.size as u32,
            split: Split::Train,
            label: Some(p.label as u32),
            hash: file_hash(&bytes),
        });
    }
    let manifest = crate::data_io::split(&Manifest { entries }, spec.val_fraction, spec.seed)?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
