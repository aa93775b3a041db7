//! PNG patch I/O, tiling, JSON-lines manifests and source-level splits.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sqlc_tensor::Tensor;

use crate::bundle::fnv1a64;
use crate::error::{Error, Result};

/// Mean saturation below which a tile counts as background.
pub const DEFAULT_TISSUE_THRESHOLD: f64 = 0.05;

fn image_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), detail: detail.into() }
}

/// Converts a decoded image, accepting only 8-bit RGB.
fn to_tensor(img: DynamicImage, path: &Path) -> Result<Tensor> {
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA8(_) => {
            return Err(image_err(path, "images with an alpha channel are not supported; export as 8-bit RGB"))
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            return Err(image_err(path, "16-bit images are not supported; export as 8-bit RGB"))
        }
        other => return Err(image_err(path, format!("unsupported colour type {:?}; expected 8-bit RGB", other.color()))),
    };
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

/// Quantizes a `[3,H,W]` tensor in `[0,1]` to 8 bits, rounding half up.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = *t.shape() else {
        return Err(Error::Data(format!("expected [3,H,W] image, got {:?}", t.shape())));
    };
    let plane = h * w;
    let d = t.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px[c] = (d[c * plane + i] as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

/// Decodes PNG bytes into a `[3,H,W]` tensor.
pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let reader = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let img = reader.decode().map_err(|e| image_err(origin, e.to_string()))?;
    to_tensor(img, origin)
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(t)?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Data(format!("PNG encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if image::guess_format(&bytes).ok() != Some(ImageFormat::Png) {
        return Err(image_err(path, "not a PNG file"));
    }
    decode_png(&bytes, path)
}

pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_png(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Mean of `1 − min(rgb)/max(rgb)` over the pixels of a region.
pub fn mean_saturation(img: &Tensor, x: usize, y: usize, size_w: usize, size_h: usize) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    let mut total = 0.0;
    for yy in y..y + size_h {
        for xx in x..x + size_w {
            let i = yy * w + xx;
            let px = [d[i], d[plane + i], d[2 * plane + i]];
            let max = px.iter().cloned().fold(f32::MIN, f32::max) as f64;
            let min = px.iter().cloned().fold(f32::MAX, f32::min) as f64;
            if max > 0.0 {
                total += 1.0 - min / max;
            }
        }
    }
    total / (size_w * size_h) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub image: Tensor,
}

/// Crops `[3, size_h, size_w]` at `(x, y)`.
pub fn crop(img: &Tensor, x: usize, y: usize, size_w: usize, size_h: usize) -> Result<Tensor> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::Data(format!("expected [3,H,W] image, got {:?}", img.shape())));
    };
    if x + size_w > w || y + size_h > h {
        return Err(Error::Data(format!("crop {size_w}x{size_h}+{x}+{y} exceeds {w}x{h}")));
    }
    let mut out = Vec::with_capacity(3 * size_w * size_h);
    for c in 0..3 {
        for yy in y..y + size_h {
            let row = c * h * w + yy * w;
            out.extend_from_slice(&img.data()[row + x..row + x + size_w]);
        }
    }
    Ok(Tensor::new(vec![3, size_h, size_w], out)?)
}

/// Grid tiles of `patch × patch` every `stride` pixels, dropping tiles
/// whose mean saturation is below `tissue_threshold`.
pub fn tile(img: &Tensor, patch: usize, stride: usize, tissue_threshold: f64) -> Result<Vec<Tile>> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::Data(format!("expected [3,H,W] image, got {:?}", img.shape())));
    };
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if h < patch || w < patch {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for y in (0..=h - patch).step_by(stride) {
        for x in (0..=w - patch).step_by(stride) {
            if mean_saturation(img, x, y, patch, patch) < tissue_threshold {
                continue;
            }
            out.push(Tile { x, y, image: crop(img, x, y, patch, patch)? });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub w: u32,
    pub h: u32,
    pub split: Split,
    #[serde(default)]
    pub label: Option<u32>,
    /// FNV-1a 64 of the file bytes, 16 hex digits.
    pub hash: String,
}

impl ManifestEntry {
    /// Directory component of the path, used as the source (subject) id.
    pub fn source_id(&self) -> &str {
        self.path.rsplit_once('/').map(|(dir, _)| dir).unwrap_or("")
    }
}

pub fn file_hash(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(e);
        }
        let m = Manifest { entries };
        m.check_unique()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.check_unique()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Data(format!("duplicate manifest path {}", e.path)));
            }
        }
        Ok(())
    }

    /// Path of an entry relative to the manifest's directory.
    pub fn resolve(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.path)
    }

    /// Checks every file's hash against the manifest.
    pub fn verify(&self, manifest_path: &Path) -> Result<()> {
        for e in &self.entries {
            let p = Self::resolve(manifest_path, e);
            let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
            let h = file_hash(&bytes);
            if h != e.hash {
                return Err(Error::Data(format!("{}: hash {h} does not match manifest {}", e.path, e.hash)));
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Reads the images of `entries`, resolved against `manifest_path`.
pub fn load_entries(manifest_path: &Path, entries: &[&ManifestEntry]) -> Result<Vec<Tensor>> {
    entries.iter().map(|e| read_image(&Manifest::resolve(manifest_path, e))).collect()
}

/// Reassigns splits so that `round(val_fraction · sources)` whole sources
/// go to validation, chosen by a seeded hash of the source id.
pub fn split(manifest: &Manifest, val_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} must lie in (0, 1)")));
    }
    let sources: BTreeSet<&str> = manifest.entries.iter().map(|e| e.source_id()).collect();
    let mut ranked: Vec<(u64, &str)> = sources
        .into_iter()
        .map(|s| {
            let mut key = seed.to_le_bytes().to_vec();
            key.extend_from_slice(s.as_bytes());
            (fnv1a64(&key), s)
        })
        .collect();
    ranked.sort();
    let n_val = (val_fraction * ranked.len() as f64).round() as usize;
    if n_val == 0 || n_val == ranked.len() {
        return Err(Error::Data(format!(
            "split of {} sources at fraction {val_fraction} leaves one side empty",
            ranked.len()
        )));
    }
    let val: BTreeSet<&str> = ranked[..n_val].iter().map(|(_, s)| *s).collect();
    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry { split: if val.contains(e.source_id()) { Split::Val } else { Split::Train }, ..e.clone() })
        .collect();
    Ok(Manifest { entries })
}
