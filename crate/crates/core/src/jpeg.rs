//! Baseline JPEG adapter over the `image` crate's baseline encoder and
//! decoder.
//!
//! Setting `SQLC_JPEG=none` in the environment makes the adapter report
//! itself unavailable, which exercises the skip path of RD evaluation.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};

use crate::container::{CodecId, Container, ContainerHeader};
use crate::data_io::{rgb_to_tensor, tensor_to_rgb};
use crate::error::{Error, FormatError, Result};
use crate::Tensor;

/// JPEG quality used for each codec quality index 1..=8.
pub const JPEG_QUALITIES: [u8; 8] = [5, 10, 20, 30, 50, 70, 80, 95];
/// Quality of the usual acquisition baseline.
pub const ACQUISITION_QUALITY: u8 = 80;
pub const ENV_SWITCH: &str = "SQLC_JPEG";

pub fn available() -> bool {
    std::env::var(ENV_SWITCH).map_or(true, |v| v != "none")
}

pub fn jpeg_quality_for_index(index: u8) -> Result<u8> {
    index
        .checked_sub(1)
        .and_then(|i| JPEG_QUALITIES.get(i as usize))
        .copied()
        .ok_or_else(|| Error::Config(format!("quality index {index} outside 1..=8")))
}

/// Encodes `[3,H,W]` at JPEG quality `1..=95`.
pub fn encode(rgb: &Tensor, quality: u8) -> Result<Vec<u8>> {
    if !available() {
        return Err(Error::JpegUnavailable(format!("disabled by {ENV_SWITCH}=none")));
    }
    if !(1..=95).contains(&quality) {
        return Err(Error::Config(format!("JPEG quality {quality} outside 1..=95")));
    }
    let img = tensor_to_rgb(rgb)?;
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality)
        .encode(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::JpegUnavailable(e.to_string()))?;
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Jpeg)
        .map_err(|e| FormatError::CorruptPayload(format!("JPEG: {e}")))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Round trip through JPEG; returns the decoded image and
/// `8·bytes/(H·W)`.
pub fn jpeg_adapter(rgb: &Tensor, quality: u8) -> Result<(Tensor, f64)> {
    let bytes = encode(rgb, quality)?;
    let decoded = decode(&bytes)?;
    let [_, h, w] = *rgb.shape() else { unreachable!("encode checked the shape") };
    Ok((decoded, 8.0 * bytes.len() as f64 / (h * w) as f64))
}

/// Wraps a JPEG stream in a container at codec quality index `index`.
pub fn compress(rgb: &Tensor, index: u8) -> Result<Container> {
    let payload = encode(rgb, jpeg_quality_for_index(index)?)?;
    let [_, h, w] = *rgb.shape() else { unreachable!("encode checked the shape") };
    let side = |v: usize| u16::try_from(v).map_err(|_| Error::Data(format!("image side {v} exceeds 65535")));
    let header = ContainerHeader {
        codec: CodecId::Jpeg,
        quality: index,
        width: side(w)?,
        height: side(h)?,
        latent_c: 0,
        latent_h: 0,
        latent_w: 0,
        model_hash: 0,
        stain_matrix: None,
    };
    Ok(Container { header, payload })
}

pub fn decompress(container: &Container) -> Result<Tensor> {
    let h = &container.header;
    if h.codec != CodecId::Jpeg {
        return Err(FormatError::CodecMismatch { expected: CodecId::Jpeg as u8, found: h.codec as u8 }.into());
    }
    let out = decode(&container.payload)?;
    if out.shape() != [3, h.height as usize, h.width as usize] {
        return Err(FormatError::Inconsistent(format!(
            "JPEG stream decodes to {:?}, header says {}x{}",
            out.shape(),
            h.width,
            h.height
        ))
        .into());
    }
    Ok(out)
}
