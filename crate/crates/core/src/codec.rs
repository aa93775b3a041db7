//! Compression paths of the learned variants, bound to a model bundle by
//! its hash.
//!
//! A codec bundle holds the NICM tensors, the stain encoder for SQLC, and
//! the quantized coding tables (`nicm.cdf.min`, `nicm.cdf.ch{i}`) so that
//! decoding never re-derives tables from floating-point parameters.

use sqlc_tensor::Graph;

use crate::bundle::{ModelBundle, STAIN_ENCODER_CODEC};
use crate::coder::{decode_symbols, encode_symbols};
use crate::container::{CodecId, Container, ContainerHeader, LATENT_STRIDE};
use crate::entropy::{quantize_eval, CdfTable, DEFAULT_TAIL_MASS};
use crate::error::{BundleError, Error, FormatError, Result};
use crate::models::{batch4, pad_to_stride, NicmModel, Parameters, SeModel};
use crate::stain::{make_z, NormRanges, StainMatrix};
use crate::Tensor;

const CDF_MIN: &str = "nicm.cdf.min";

fn cdf_name(channel: usize) -> String {
    format!("nicm.cdf.ch{channel}")
}

/// Bundle holding only stain-encoder weights; its hash witnesses that a
/// frozen encoder stayed untouched.
pub fn stain_encoder_bundle(se: &SeModel, ranges: NormRanges, matrix: StainMatrix) -> ModelBundle {
    let mut b = ModelBundle::new(STAIN_ENCODER_CODEC, 1, ranges, matrix);
    for (name, t) in se.named_parameters() {
        b.insert(name, t.clone()).expect("parameter names are unique");
    }
    b
}

/// A trained variant ready to compress and decompress.
#[derive(Debug, Clone)]
pub struct LearnedCodec {
    pub codec: CodecId,
    pub quality: u8,
    pub se: Option<SeModel>,
    pub nicm: NicmModel,
    pub tables: Vec<CdfTable>,
    pub ranges: NormRanges,
    pub matrix: StainMatrix,
    hash: u64,
}

impl LearnedCodec {
    /// Assembles a codec, deriving coding tables from the entropy model.
    pub fn new(
        codec: CodecId,
        quality: u8,
        se: Option<SeModel>,
        nicm: NicmModel,
        ranges: NormRanges,
        matrix: StainMatrix,
    ) -> Result<Self> {
        let tables = nicm.entropy.build_cdf_tables(DEFAULT_TAIL_MASS)?;
        let mut c = LearnedCodec { codec, quality, se, nicm, tables, ranges, matrix: matrix.quantized(), hash: 0 };
        c.check_layout()?;
        c.hash = c.to_bundle()?.hash();
        Ok(c)
    }

    fn check_layout(&self) -> Result<()> {
        if !(1..=8).contains(&self.quality) {
            return Err(Error::Config(format!("quality index {} outside 1..=8", self.quality)));
        }
        let input = self.nicm.in_channels();
        let ok = match (self.codec, &self.se) {
            (CodecId::Nicm3, None) => input == 3,
            (CodecId::Nicm6, None) => input == 6,
            (CodecId::Sqlc, Some(se)) => input == se.latent_channels(),
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} codec cannot use a {input}-channel NICM{}",
                self.codec,
                if self.se.is_some() { " with a stain encoder" } else { "" }
            )));
        }
        if self.tables.len() != self.nicm.latent_channels() {
            return Err(Error::Config(format!("{} coding tables for {} latents", self.tables.len(), self.nicm.latent_channels())));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn to_bundle(&self) -> Result<ModelBundle> {
        let mut b = ModelBundle::new(self.codec as u8, self.quality, self.ranges, self.matrix);
        if let Some(se) = &self.se {
            for (name, t) in se.named_parameters() {
                b.insert(name, t.clone())?;
            }
        }
        for (name, t) in self.nicm.bundle_entries() {
            b.insert(name, t)?;
        }
        let mins = self.tables.iter().map(|t| t.min_value() as f32).collect::<Vec<_>>();
        b.insert(CDF_MIN, Tensor::new(vec![mins.len()], mins)?)?;
        for (i, t) in self.tables.iter().enumerate() {
            let cum: Vec<f32> = t.cumulative().iter().map(|&v| v as f32).collect();
            b.insert(cdf_name(i), Tensor::new(vec![cum.len()], cum)?)?;
        }
        Ok(b)
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let codec = CodecId::from_u8(bundle.codec)
            .filter(|c| c.is_learned())
            .ok_or(BundleError::WrongCodec { expected: CodecId::Sqlc as u8, found: bundle.codec })?;
        let se = if codec == CodecId::Sqlc { Some(SeModel::from_bundle(bundle)?) } else { None };
        let nicm = NicmModel::from_bundle(bundle)?;
        let mins = bundle.get(CDF_MIN)?;
        let mut tables = Vec::with_capacity(mins.numel());
        for (i, &min) in mins.data().iter().enumerate() {
            let cum = bundle.get(&cdf_name(i))?.data().iter().map(|&v| v as u32).collect();
            tables.push(CdfTable::new(min as i32, cum).map_err(|e| BundleError::Malformed(format!("{}: {e}", cdf_name(i))))?);
        }
        let c = LearnedCodec {
            codec,
            quality: bundle.quality,
            se,
            nicm,
            tables,
            ranges: bundle.ranges,
            matrix: bundle.stain_matrix,
            hash: bundle.hash(),
        };
        c.check_layout().map_err(|e| BundleError::Malformed(e.to_string()))?;
        Ok(c)
    }

    /// The tensor the NICM analysis transform sees, `[1, C, H, W]`.
    pub fn analysis_input(&self, rgb: &Tensor) -> Result<Tensor> {
        let input = match self.codec {
            CodecId::Nicm3 => rgb.clone(),
            CodecId::Nicm6 => make_z(rgb, &self.matrix, &self.ranges)?.z,
            CodecId::Sqlc => {
                let z = make_z(rgb, &self.matrix, &self.ranges)?.z;
                self.se.as_ref().expect("checked layout").encode_tensor(&z)?
            }
            CodecId::Jpeg => unreachable!("learned codecs only"),
        };
        Ok(batch4(&input)?.0)
    }

    /// Rounded latents of one image in `[C, h, w]` order.
    pub fn latents(&self, rgb: &Tensor) -> Result<(Vec<i32>, [usize; 3])> {
        let input = self.analysis_input(rgb)?;
        let mut g = Graph::<f32>::new();
        let vars = self.nicm.bind(&mut g, false);
        let x = g.constant(input);
        let padded = pad_to_stride(&mut g, x)?;
        let y = self.nicm.analyze(&mut g, &vars, padded)?;
        let s = g.shape(y);
        let dims = [s[1], s[2], s[3]];
        Ok((quantize_eval(g.value(y)), dims))
    }

    pub fn compress(&self, rgb: &Tensor) -> Result<Container> {
        let [3, h, w] = *rgb.shape() else {
            return Err(Error::Data(format!("expected [3,H,W] image, got {:?}", rgb.shape())));
        };
        let (width, height) = match (u16::try_from(w), u16::try_from(h)) {
            (Ok(w), Ok(h)) if w > 0 && h > 0 => (w, h),
            _ => return Err(Error::Data(format!("image {w}x{h} outside 1..=65535 per side"))),
        };
        let (symbols, [m, lh, lw]) = self.latents(rgb)?;
        let channels: Vec<usize> = (0..symbols.len()).map(|i| i / (lh * lw)).collect();
        let payload = encode_symbols(&symbols, &channels, &self.tables)?;
        let header = ContainerHeader {
            codec: self.codec,
            quality: self.quality,
            width,
            height,
            latent_c: m as u16,
            latent_h: lh as u16,
            latent_w: lw as u16,
            model_hash: self.hash,
            stain_matrix: None,
        };
        Ok(Container { header, payload })
    }

    pub fn decompress(&self, container: &Container) -> Result<Tensor> {
        let h = &container.header;
        if h.codec != self.codec {
            return Err(FormatError::CodecMismatch { expected: self.codec as u8, found: h.codec as u8 }.into());
        }
        if h.model_hash != self.hash {
            return Err(FormatError::HashMismatch { expected: self.hash, found: h.model_hash }.into());
        }
        if h.quality != self.quality {
            return Err(FormatError::QualityMismatch { expected: self.quality, found: h.quality }.into());
        }
        let m = self.nicm.latent_channels();
        if h.latent_c as usize != m {
            return Err(FormatError::Inconsistent(format!("{} latent channels, model has {m}", h.latent_c)).into());
        }
        let (lh, lw) = (h.latent_h as usize, h.latent_w as usize);
        let channels: Vec<usize> = (0..m * lh * lw).map(|i| i / (lh * lw)).collect();
        let symbols = decode_symbols(&container.payload, &channels, &self.tables)?;
        let y = Tensor::new(vec![1, m, lh, lw], symbols.iter().map(|&v| v as f32).collect())?;

        let mut g = Graph::<f32>::new();
        let vars = self.nicm.bind(&mut g, false);
        let yv = g.constant(y);
        let xr = self.nicm.synthesize(&mut g, &vars, yv)?;
        let (height, width) = (h.height as usize, h.width as usize);
        debug_assert_eq!(g.shape(xr)[2], lh * LATENT_STRIDE);
        let cropped = g.crop(xr, 0, 0, height, width)?;
        let rgb = match &self.se {
            Some(se) => {
                let sv = se.bind(&mut g, false);
                let z = se.decode(&mut g, &sv, cropped)?;
                g.slice_channels(z, 0, 3)?
            }
            None if self.codec == CodecId::Nicm6 => g.slice_channels(cropped, 0, 3)?,
            None => cropped,
        };
        let out = g.value(rgb).reshape(vec![3, height, width])?;
        Ok(out)
    }
}
