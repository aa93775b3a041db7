//! Compressed-file layout.
//!
//! ```text
//! offset size field
//!      0    4 magic "SQLC"
//!      4    1 version (1)
//!      5    1 codec id
//!      6    1 quality index (1..=8)
//!      7    2 width
//!      9    2 height
//!     11    2 latent channels
//!     13    2 latent height
//!     15    2 latent width
//!     17    8 model hash
//!     25    1 flags (bit 0: stain matrix follows)
//!     26   36 stain matrix, 9 × f32 (only if flag bit 0)
//!      …    4 payload length
//!      …    n payload
//! ```
//! All integers are little-endian.

use crate::error::FormatError;
use crate::stain::StainMatrix;

pub const MAGIC: [u8; 4] = *b"SQLC";
pub const VERSION: u8 = 1;
/// Bytes before the optional stain matrix.
pub const FIXED_HEADER_LEN: usize = 26;
pub const STAIN_MATRIX_LEN: usize = 36;
pub const FLAG_STAIN_MATRIX: u8 = 0x01;
/// Latent grids are 16× smaller than the image in each direction.
pub const LATENT_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CodecId {
    Nicm3 = 0,
    Nicm6 = 1,
    Sqlc = 2,
    Jpeg = 3,
}

impl CodecId {
    pub const ALL: [CodecId; 4] = [CodecId::Nicm3, CodecId::Nicm6, CodecId::Sqlc, CodecId::Jpeg];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| *c as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecId::Nicm3 => "nicm3",
            CodecId::Nicm6 => "nicm6",
            CodecId::Sqlc => "sqlc",
            CodecId::Jpeg => "jpeg",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn is_learned(self) -> bool {
        self != CodecId::Jpeg
    }
}

impl std::fmt::Display for CodecId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub codec: CodecId,
    pub quality: u8,
    pub width: u16,
    pub height: u16,
    pub latent_c: u16,
    pub latent_h: u16,
    pub latent_w: u16,
    pub model_hash: u64,
    pub stain_matrix: Option<StainMatrix>,
}

impl ContainerHeader {
    /// Size of the header including the stain matrix and payload length.
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + if self.stain_matrix.is_some() { STAIN_MATRIX_LEN } else { 0 } + 4
    }

    fn validate(&self) -> Result<(), FormatError> {
        if !(1..=8).contains(&self.quality) {
            return Err(FormatError::BadQuality(self.quality));
        }
        if self.width == 0 || self.height == 0 {
            return Err(FormatError::Inconsistent(format!("empty image {}x{}", self.width, self.height)));
        }
        let expect = |side: u16| (side as usize).div_ceil(LATENT_STRIDE) as u16;
        if self.codec.is_learned() {
            if self.latent_c == 0 {
                return Err(FormatError::Inconsistent("zero latent channels".into()));
            }
            if self.latent_h != expect(self.height) || self.latent_w != expect(self.width) {
                return Err(FormatError::Inconsistent(format!(
                    "latent grid {}x{} does not match image {}x{}",
                    self.latent_w, self.latent_h, self.width, self.height
                )));
            }
        } else if self.latent_c != 0 || self.latent_h != 0 || self.latent_w != 0 || self.model_hash != 0 {
            return Err(FormatError::Inconsistent("JPEG containers carry no latent grid or model hash".into()));
        }
        if self.codec == CodecId::Jpeg && self.stain_matrix.is_some() {
            return Err(FormatError::Inconsistent("JPEG containers carry no stain matrix".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let h = &self.header;
        h.validate()?;
        let payload_len = u32::try_from(self.payload.len())
            .map_err(|_| FormatError::Inconsistent("payload longer than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(h.encoded_len() + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(h.codec as u8);
        out.push(h.quality);
        for v in [h.width, h.height, h.latent_c, h.latent_h, h.latent_w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.model_hash.to_le_bytes());
        out.push(if h.stain_matrix.is_some() { FLAG_STAIN_MATRIX } else { 0 });
        if let Some(m) = &h.stain_matrix {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&payload_len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(FormatError::Truncated { need: n, have: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        need(FIXED_HEADER_LEN)?;
        if bytes[4] != VERSION {
            return Err(FormatError::BadVersion(bytes[4]));
        }
        let codec = CodecId::from_u8(bytes[5]).ok_or(FormatError::BadCodec(bytes[5]))?;
        let quality = bytes[6];
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let model_hash = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
        let flags = bytes[25];
        if flags & !FLAG_STAIN_MATRIX != 0 {
            return Err(FormatError::BadFlags(flags));
        }
        let mut pos = FIXED_HEADER_LEN;
        let stain_matrix = if flags & FLAG_STAIN_MATRIX != 0 {
            need(pos + STAIN_MATRIX_LEN)?;
            let m = StainMatrix::from_le_bytes(bytes[pos..pos + STAIN_MATRIX_LEN].try_into().unwrap())?;
            pos += STAIN_MATRIX_LEN;
            Some(m)
        } else {
            None
        };
        let header = ContainerHeader {
            codec,
            quality,
            width: u16_at(7),
            height: u16_at(9),
            latent_c: u16_at(11),
            latent_h: u16_at(13),
            latent_w: u16_at(15),
            model_hash,
            stain_matrix,
        };
        header.validate()?;
        need(pos + 4)?;
        let declared = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        pos += 4;
        let actual = bytes.len() - pos;
        if declared as usize != actual {
            return Err(FormatError::LengthMismatch { declared, actual });
        }
        Ok(Container { header, payload: bytes[pos..].to_vec() })
    }

    /// Coded size in bits, the basis of every reported rate.
    pub fn payload_bits(&self) -> u64 {
        8 * self.payload.len() as u64
    }
}
