//! Rate-distortion sweeps over a corpus, their CSV and SVG renderings, and
//! the H-channel difference tool.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::codec::LearnedCodec;
use crate::container::{CodecId, Container};
use crate::error::{Error, Result};
use crate::jpeg;
use crate::metrics::{self, MsSsimConfig};
use crate::stain::{deconvolve, normalize_hed, NormRanges, StainMatrix};
use crate::Tensor;

/// Anything that maps an RGB patch to a container and back.
#[derive(Debug, Clone)]
pub enum CodecHandle {
    Learned(Box<LearnedCodec>),
    Jpeg { index: u8 },
}

impl CodecHandle {
    pub fn codec(&self) -> CodecId {
        match self {
            CodecHandle::Learned(c) => c.codec,
            CodecHandle::Jpeg { .. } => CodecId::Jpeg,
        }
    }

    pub fn quality(&self) -> u8 {
        match self {
            CodecHandle::Learned(c) => c.quality,
            CodecHandle::Jpeg { index } => *index,
        }
    }

    pub fn compress(&self, rgb: &Tensor) -> Result<Container> {
        match self {
            CodecHandle::Learned(c) => c.compress(rgb),
            CodecHandle::Jpeg { index } => jpeg::compress(rgb, *index),
        }
    }

    pub fn decompress(&self, container: &Container) -> Result<Tensor> {
        match self {
            CodecHandle::Learned(c) => c.decompress(container),
            CodecHandle::Jpeg { .. } => jpeg::decompress(container),
        }
    }

    /// Compress-decompress round trip with the payload bpp.
    pub fn round_trip(&self, rgb: &Tensor) -> Result<(Tensor, f64, usize)> {
        let c = self.compress(rgb)?;
        let out = self.decompress(&c)?;
        let bpp = metrics::bpp(c.payload_bits(), c.header.width as usize, c.header.height as usize)?;
        Ok((out, bpp, c.payload.len()))
    }
}

/// Corpus means for one codec at one quality index.
#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub codec: CodecId,
    pub quality: u8,
    pub bpp: f64,
    pub ms_ssim: f64,
    pub psnr: f64,
    /// Mean payload bytes per image.
    pub bytes: f64,
    /// Mean wall-clock milliseconds per compress-decompress round trip.
    pub ms: f64,
}

pub fn rd_point(handle: &CodecHandle, corpus: &[Tensor]) -> Result<RdPoint> {
    if corpus.is_empty() {
        return Err(Error::Data("empty evaluation corpus".into()));
    }
    let cfg = MsSsimConfig::default();
    let per_image = corpus
        .par_iter()
        .map(|rgb| {
            let started = Instant::now();
            let (out, bpp, bytes) = handle.round_trip(rgb)?;
            let ms = started.elapsed().as_secs_f64() * 1e3;
            Ok([bpp, metrics::ms_ssim(rgb, &out, &cfg)?, metrics::psnr(rgb, &out)?, bytes as f64, ms])
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mean = |k: usize| per_image.iter().map(|r| r[k]).sum::<f64>() / n;
    Ok(RdPoint {
        codec: handle.codec(),
        quality: handle.quality(),
        bpp: mean(0),
        ms_ssim: mean(1),
        psnr: mean(2),
        bytes: mean(3),
        ms: mean(4),
    })
}

/// One point per handle; JPEG handles are skipped with a warning when the
/// adapter is unavailable.
pub fn eval_rd(corpus: &[Tensor], handles: &[CodecHandle]) -> Result<Vec<RdPoint>> {
    let mut out = Vec::with_capacity(handles.len());
    let mut warned = false;
    for h in handles {
        if h.codec() == CodecId::Jpeg && !jpeg::available() {
            if !warned {
                log::warn!("JPEG adapter unavailable; skipping JPEG rows");
                warned = true;
            }
            continue;
        }
        out.push(rd_point(h, corpus)?);
    }
    Ok(out)
}

pub const RD_CSV_HEADER: &str = "codec,quality,bpp,ms_ssim,psnr,bytes,ms";

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut s = format!("{RD_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.4},{:.2},{:.3}", p.codec, p.quality, p.bpp, p.ms_ssim, p.psnr, p.bytes, p.ms);
    }
    s
}

/// Pairs `(lower, higher)` quality indices of one codec where the higher
/// index loses more than the slack in MS-SSIM or bpp.
pub fn monotonicity_violations(points: &[RdPoint], ms_slack: f64, bpp_slack: f64) -> Vec<(CodecId, u8, u8)> {
    let mut bad = Vec::new();
    for codec in CodecId::ALL {
        let mut pts: Vec<&RdPoint> = points.iter().filter(|p| p.codec == codec).collect();
        pts.sort_by_key(|p| p.quality);
        for w in pts.windows(2) {
            if w[1].ms_ssim < w[0].ms_ssim - ms_slack || w[1].bpp < w[0].bpp - bpp_slack {
                bad.push((codec, w[0].quality, w[1].quality));
            }
        }
    }
    bad
}

const PALETTE: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#7f7f7f"];

/// Line plot of MS-SSIM against bpp, one polyline per codec. The JPEG
/// point at the acquisition quality is ringed.
pub fn rd_svg(points: &[RdPoint]) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let max_bpp = points.iter().map(|p| p.bpp).fold(0.0f64, f64::max).max(1e-9) * 1.05;
    let min_ms = points.iter().map(|p| p.ms_ssim).fold(1.0f64, f64::min).min(0.99);
    let lo = (min_ms * 20.0).floor() / 20.0;
    let sx = |b: f64| m + b / max_bpp * (w - 2.0 * m);
    let sy = |v: f64| h - m - (v - lo) / (1.0 - lo).max(1e-9) * (h - 2.0 * m);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<path d=\"M{m} {m} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        h - m,
        w - m
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">bpp</text>", w / 2.0, h - 12.0);
    let _ = writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">MS-SSIM</text>", h / 2.0, h / 2.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.2}</text>", m - 4.0, h - m);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">1.00</text>", m - 4.0, m + 4.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{max_bpp:.2}</text>", w - m, h - m + 16.0);
    for (i, codec) in CodecId::ALL.into_iter().enumerate() {
        let mut pts: Vec<&RdPoint> = points.iter().filter(|p| p.codec == codec).collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        let colour = PALETTE[i];
        let line: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", sx(p.bpp), sy(p.ms_ssim))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" stroke=\"{colour}\" fill=\"none\" stroke-width=\"2\"/>", line.join(" "));
        for p in &pts {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{colour}\"/>", sx(p.bpp), sy(p.ms_ssim));
            if codec == CodecId::Jpeg && jpeg::jpeg_quality_for_index(p.quality).ok() == Some(jpeg::ACQUISITION_QUALITY) {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"7\" stroke=\"{colour}\" fill=\"none\"/>",
                    sx(p.bpp),
                    sy(p.ms_ssim)
                );
            }
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{codec}</text>", w - m - 80.0, m + 16.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Normalized hematoxylin plane of an RGB image, `[H, W]`.
pub fn h_channel(rgb: &Tensor, matrix: &StainMatrix, ranges: &NormRanges) -> Result<Tensor> {
    let hed = normalize_hed(&deconvolve(rgb, matrix)?, ranges)?;
    let [3, h, w] = *hed.shape() else {
        return Err(Error::Data(format!("expected [3,H,W] image, got {:?}", rgb.shape())));
    };
    Ok(Tensor::new(vec![h, w], hed.data()[..h * w].to_vec())?)
}

/// Squared H-channel error of one reconstruction.
#[derive(Debug, Clone)]
pub struct HDiff {
    /// `[H, W]` squared differences of normalized H.
    pub squared: Tensor,
    pub mse: f64,
}

/// H-channel squared-error maps of each reconstruction against `original`.
pub fn h_channel_diff(original: &Tensor, reconstructions: &[Tensor], matrix: &StainMatrix, ranges: &NormRanges) -> Result<Vec<HDiff>> {
    let base = h_channel(original, matrix, ranges)?;
    reconstructions
        .iter()
        .map(|r| {
            if r.shape() != original.shape() {
                return Err(Error::Data(format!("reconstruction {:?} vs original {:?}", r.shape(), original.shape())));
            }
            let hr = h_channel(r, matrix, ranges)?;
            let sq: Vec<f32> = base.data().iter().zip(hr.data()).map(|(a, b)| (a - b) * (a - b)).collect();
            let mse = sq.iter().map(|&v| v as f64).sum::<f64>() / sq.len() as f64;
            Ok(HDiff { squared: Tensor::new(base.shape().to_vec(), sq)?, mse })
        })
        .collect()
}

/// Grey `[3,H,W]` heatmaps scaled by the largest value across `diffs`, so
/// maps of one sample share a scale; all-zero input stays zero.
pub fn heatmaps(diffs: &[HDiff]) -> Result<Vec<Tensor>> {
    let peak = diffs.iter().flat_map(|d| d.squared.data()).fold(0.0f32, |m, &v| m.max(v));
    diffs
        .iter()
        .map(|d| {
            let [h, w] = *d.squared.shape() else { unreachable!("h_channel_diff builds [H,W]") };
            let scaled: Vec<f32> = d.squared.data().iter().map(|&v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(&scaled);
            }
            Ok(Tensor::new(vec![3, h, w], data)?)
        })
        .collect()
}

/// Mean H-channel MSE of `handle` over `corpus`.
pub fn mean_h_mse(handle: &CodecHandle, corpus: &[Tensor], matrix: &StainMatrix, ranges: &NormRanges) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("empty evaluation corpus".into()));
    }
    let per = corpus
        .par_iter()
        .map(|rgb| {
            let (out, _, _) = handle.round_trip(rgb)?;
            Ok(h_channel_diff(rgb, &[out], matrix, ranges)?[0].mse)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
