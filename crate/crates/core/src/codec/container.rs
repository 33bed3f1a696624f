//! The `ATCS` compressed-activation container.
//!
//! ```text
//! magic "ATCS" | u16 version | u32 H, W, C | u16 bw, bh, bc
//! f32 step | f32 clip | u16 keep | u8 transform mode
//! [transform payload]            mode 1: n·n f32 matrix, n f32 mean
//!                                mode 2: f32 scale, n·n i8 matrix, n f32 mean
//! keep × codebook                one per retained coefficient
//! u64 symbol count | payload bits, zero padded to a byte
//! ```
//! All integers little-endian.

use crate::io::ByteReader;
use crate::tensor::BlockShape;
use crate::vlc::{BitStream, HuffmanCodebook};

use super::fold::Int8Transform;
use super::CodecError;

pub const STREAM_MAGIC: &[u8; 4] = b"ATCS";
pub const STREAM_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TransformMode {
    External = 0,
    Float32 = 1,
    Int8 = 2,
}

impl TryFrom<u8> for TransformMode {
    type Error = CodecError;

    fn try_from(v: u8) -> Result<Self, CodecError> {
        match v {
            0 => Ok(Self::External),
            1 => Ok(Self::Float32),
            2 => Ok(Self::Int8),
            _ => Err(CodecError::Corrupt(format!("unknown transform mode {v}"))),
        }
    }
}

/// Transform carried inside a stream.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddedTransform {
    Float32 { matrix: Vec<f32>, mean: Vec<f32> },
    Int8 { matrix: Int8Transform, mean: Vec<f32> },
}

impl EmbeddedTransform {
    pub fn mode(&self) -> TransformMode {
        match self {
            Self::Float32 { .. } => TransformMode::Float32,
            Self::Int8 { .. } => TransformMode::Int8,
        }
    }

    /// Row-major matrix and mean in working precision.
    pub fn to_f64(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Float32 { matrix, mean } => (
                matrix.iter().map(|&v| v as f64).collect(),
                mean.iter().map(|&v| v as f64).collect(),
            ),
            Self::Int8 { matrix, mean } => (matrix.dequantize(), mean.iter().map(|&v| v as f64).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub block: BlockShape,
    pub step: f32,
    pub clip: f32,
    pub keep: usize,
    pub transform: Option<EmbeddedTransform>,
    pub codebooks: Vec<HuffmanCodebook>,
    pub symbol_count: u64,
}

impl StreamHeader {
    pub fn mode(&self) -> TransformMode {
        self.transform.as_ref().map_or(TransformMode::External, |t| t.mode())
    }

    pub fn value_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn block_count(&self) -> usize {
        self.block.block_count(self.height, self.width, self.channels)
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for d in [self.block.bw, self.block.bh, self.block.bc] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.clip.to_le_bytes());
        out.extend_from_slice(&(self.keep as u16).to_le_bytes());
        out.push(self.mode() as u8);
        match &self.transform {
            None => {}
            Some(EmbeddedTransform::Float32 { matrix, mean }) => {
                matrix.iter().chain(mean).for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            Some(EmbeddedTransform::Int8 { matrix, mean }) => {
                out.extend_from_slice(&matrix.scale.to_le_bytes());
                out.extend(matrix.values.iter().map(|&v| v as u8));
                mean.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        for cb in &self.codebooks {
            cb.write_to(out);
        }
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
    }
}

/// Encoded layer activation: header plus packed symbol payload.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedActivation {
    pub header: StreamHeader,
    pub payload: BitStream,
}

impl CompressedActivation {
    /// Payload length in bits. Exact for freshly encoded streams; streams
    /// parsed from bytes count whole payload bytes.
    pub fn payload_bits(&self) -> u64 {
        self.payload.bit_len()
    }

    /// Everything before the payload, in bits.
    pub fn header_bits(&self) -> u64 {
        let mut buf = Vec::new();
        self.header.write_to(&mut buf);
        8 * buf.len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.header.write_to(&mut out);
        out.extend_from_slice(self.payload.bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let short = || CodecError::Corrupt("truncated stream header".into());
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok_or_else(short)? != STREAM_MAGIC {
            return Err(CodecError::Corrupt("bad magic, expected \"ATCS\"".into()));
        }
        let version = r.u16().ok_or_else(short)?;
        if version != STREAM_VERSION {
            return Err(CodecError::Corrupt(format!("unsupported stream version {version}")));
        }
        let height = r.u32().ok_or_else(short)? as usize;
        let width = r.u32().ok_or_else(short)? as usize;
        let channels = r.u32().ok_or_else(short)? as usize;
        let bw = r.u16().ok_or_else(short)? as usize;
        let bh = r.u16().ok_or_else(short)? as usize;
        let bc = r.u16().ok_or_else(short)? as usize;
        let block = BlockShape::new(bw, bh, bc)?;
        if height == 0 || width == 0 || channels == 0 || bc > channels {
            return Err(CodecError::Corrupt(format!("bad dims {height}×{width}×{channels} for {block} blocks")));
        }
        let step = r.f32().ok_or_else(short)?;
        let clip = r.f32().ok_or_else(short)?;
        let keep = r.u16().ok_or_else(short)? as usize;
        let n = block.n();
        if keep == 0 || keep > n {
            return Err(CodecError::Corrupt(format!("kept coefficient count {keep} outside 1..={n}")));
        }
        let mode = TransformMode::try_from(r.u8().ok_or_else(short)?)?;
        let read_f32s = |r: &mut ByteReader<'_>, count: usize| -> Result<Vec<f32>, CodecError> {
            let raw = r.take(count * 4).ok_or_else(short)?;
            Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
        };
        let transform = match mode {
            TransformMode::External => None,
            TransformMode::Float32 => {
                let matrix = read_f32s(&mut r, n * n)?;
                let mean = read_f32s(&mut r, n)?;
                Some(EmbeddedTransform::Float32 { matrix, mean })
            }
            TransformMode::Int8 => {
                let scale = r.f32().ok_or_else(short)?;
                let values = r.take(n * n).ok_or_else(short)?.iter().map(|&b| b as i8).collect();
                let mean = read_f32s(&mut r, n)?;
                Some(EmbeddedTransform::Int8 { matrix: Int8Transform { n, values, scale }, mean })
            }
        };
        let mut codebooks = Vec::with_capacity(keep);
        for _ in 0..keep {
            codebooks.push(HuffmanCodebook::read_from(&mut r)?);
        }
        let symbol_count = r.u64().ok_or_else(short)?;
        let header = StreamHeader {
            height,
            width,
            channels,
            block,
            step,
            clip,
            keep,
            transform,
            codebooks,
            symbol_count,
        };
        let expected = header.block_count() as u64 * keep as u64;
        if symbol_count != expected {
            return Err(CodecError::Corrupt(format!(
                "symbol count {symbol_count} does not match {expected} for the stated dims"
            )));
        }
        let payload = BitStream::from_bytes(r.rest().to_vec());
        Ok(Self { header, payload })
    }
}
