//! Activation tensors, block partitioning and the `ATCT` tensor file format.
//!
//! Data is stored channel-major at each spatial site: element `(h, w, c)`
//! lives at `(h * width + w) * channels + c`, so a `1×1×C` block is a
//! contiguous slice of the payload.
//!
//! Blocks are emitted row-major over the block grid `(gy, gx, gz)` with the
//! channel-block index fastest. Inside a block, elements are ordered
//! `(dy, dx, dc)`, again channel fastest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{write_atomic, ByteReader};

pub const TENSOR_MAGIC: &[u8; 4] = b"ATCT";
pub const TENSOR_VERSION: u16 = 1;
const DTYPE_F32: u16 = 0;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 * 3;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:?}, expected \"ATCT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    VersionMismatch(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u16),
    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense `H×W×C` tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ActivationTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TensorError::Shape(format!(
                "dimensions must be positive, got {height}×{width}×{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| TensorError::Shape("dimension product overflows".into()))?;
        if data.len() != expected {
            return Err(TensorError::Shape(format!(
                "data length {} does not match {height}×{width}×{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self, TensorError> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.index(h, w, c)]
    }

    /// Channel vector at one spatial site.
    pub fn pixel(&self, h: usize, w: usize) -> &[f32] {
        let start = self.index(h, w, 0);
        &self.data[start..start + self.channels]
    }

    /// Applies `f` elementwise, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, TensorError> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Per-channel mean over all spatial sites.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let count = (self.height * self.width) as f64;
        sums.into_iter().map(|s| s / count).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let truncated = || TensorError::Truncated { expected: HEADER_LEN, actual: bytes.len() };
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.take(4).ok_or_else(truncated)?.try_into().expect("4 bytes");
        if &magic != TENSOR_MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let version = r.u16().ok_or_else(truncated)?;
        if version != TENSOR_VERSION {
            return Err(TensorError::VersionMismatch(version));
        }
        let dtype = r.u16().ok_or_else(truncated)?;
        if dtype != DTYPE_F32 {
            return Err(TensorError::UnsupportedDtype(dtype));
        }
        let height = r.u32().ok_or_else(truncated)? as usize;
        let width = r.u32().ok_or_else(truncated)? as usize;
        let channels = r.u32().ok_or_else(truncated)? as usize;
        let count = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| TensorError::Shape("dimension product overflows".into()))?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(TensorError::Truncated { expected, actual: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(TensorError::TrailingBytes(bytes.len() - expected));
        }
        let data = r
            .rest()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(height, width, channels, data)
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ActivationTensor, TensorError> {
    let bytes = std::fs::read(path)?;
    ActivationTensor::from_bytes(&bytes)
}

pub fn save_tensor(t: &ActivationTensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    write_atomic(path.as_ref(), &t.to_bytes())?;
    Ok(())
}

/// Block extent along width, height and channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockShape {
    pub bw: usize,
    pub bh: usize,
    pub bc: usize,
}

impl BlockShape {
    pub fn new(bw: usize, bh: usize, bc: usize) -> Result<Self, TensorError> {
        if bw == 0 || bh == 0 || bc == 0 {
            return Err(TensorError::Shape(format!("block extents must be positive: {bw}x{bh}x{bc}")));
        }
        Ok(Self { bw, bh, bc })
    }

    /// The `1×1×C` shape: all channels of one pixel.
    pub fn pixel(channels: usize) -> Self {
        Self { bw: 1, bh: 1, bc: channels }
    }

    pub fn n(&self) -> usize {
        self.bw * self.bh * self.bc
    }

    pub fn is_pixel(&self) -> bool {
        self.bw == 1 && self.bh == 1
    }

    /// Number of blocks along (height, width, channels).
    pub fn grid(&self, height: usize, width: usize, channels: usize) -> (usize, usize, usize) {
        (height.div_ceil(self.bh), width.div_ceil(self.bw), channels.div_ceil(self.bc))
    }

    pub fn block_count(&self, height: usize, width: usize, channels: usize) -> usize {
        let (gy, gx, gz) = self.grid(height, width, channels);
        gy * gx * gz
    }

    pub fn check_against(&self, channels: usize) -> Result<(), TensorError> {
        if self.bc > channels {
            return Err(TensorError::Shape(format!(
                "block depth {} exceeds tensor channels {channels}",
                self.bc
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BlockShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.bw, self.bh, self.bc)
    }
}

impl From<BlockShape> for String {
    fn from(s: BlockShape) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for BlockShape {
    type Error = TensorError;

    fn try_from(s: String) -> Result<Self, TensorError> {
        s.parse()
    }
}

impl FromStr for BlockShape {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<_> = s.split(['x', 'X', '×']).collect();
        let bad = || TensorError::Shape(format!("expected BWxBHxBC, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let p = |i: usize| parts[i].trim().parse::<usize>().map_err(|_| bad());
        Self::new(p(0)?, p(1)?, p(2)?)
    }
}

/// Fill values for block slots that fall outside the tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PaddingPolicy {
    /// Per-channel fill; `None` pads with zeros. Channels beyond the
    /// tensor's channel count are always zero-filled.
    pub channel_means: Option<Vec<f32>>,
}

impl PaddingPolicy {
    fn fill(&self, c: usize) -> f32 {
        self.channel_means
            .as_ref()
            .and_then(|m| m.get(c).copied())
            .unwrap_or(0.0)
    }
}

/// Ordered block vectors cut from one tensor, stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSequence {
    data: Vec<f32>,
    height: usize,
    width: usize,
    channels: usize,
    shape: BlockShape,
    padding: PaddingPolicy,
}

impl BlockSequence {
    /// Wraps decoded block data; checks that the count and length match the
    /// origin dims.
    pub fn from_blocks(
        data: Vec<f32>,
        dims: (usize, usize, usize),
        shape: BlockShape,
    ) -> Result<Self, TensorError> {
        let (height, width, channels) = dims;
        let expected = shape.block_count(height, width, channels) * shape.n();
        if data.len() != expected {
            return Err(TensorError::Shape(format!(
                "block data length {} inconsistent with {height}×{width}×{channels} in {shape} blocks (expected {expected})",
                data.len()
            )));
        }
        Ok(Self { data, height, width, channels, shape, padding: PaddingPolicy::default() })
    }

    pub fn shape(&self) -> BlockShape {
        self.shape
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn padding(&self) -> &PaddingPolicy {
        &self.padding
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.n()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, i: usize) -> &[f32] {
        let n = self.shape.n();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn blocks(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.shape.n())
    }

    pub fn blocks_mut(&mut self) -> std::slice::ChunksExactMut<'_, f32> {
        let n = self.shape.n();
        self.data.chunks_exact_mut(n)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    /// Count of slots that hold padding rather than tensor data.
    pub fn padded_slots(&self) -> usize {
        self.data.len() - self.height * self.width * self.channels
    }
}

/// Visits every block slot as `(slot index, Some(tensor index) | None)`.
fn for_each_slot(
    dims: (usize, usize, usize),
    shape: BlockShape,
    mut f: impl FnMut(usize, Option<usize>, usize),
) {
    let (height, width, channels) = dims;
    let (gy, gx, gz) = shape.grid(height, width, channels);
    let mut slot = 0;
    for by in 0..gy {
        for bx in 0..gx {
            for bz in 0..gz {
                for dy in 0..shape.bh {
                    let h = by * shape.bh + dy;
                    for dx in 0..shape.bw {
                        let w = bx * shape.bw + dx;
                        for dc in 0..shape.bc {
                            let c = bz * shape.bc + dc;
                            let idx = (h < height && w < width && c < channels)
                                .then(|| (h * width + w) * channels + c);
                            f(slot, idx, c);
                            slot += 1;
                        }
                    }
                }
            }
        }
    }
}

pub fn partition(t: &ActivationTensor, shape: BlockShape) -> Result<BlockSequence, TensorError> {
    partition_padded(t, shape, PaddingPolicy::default())
}

pub fn partition_padded(
    t: &ActivationTensor,
    shape: BlockShape,
    padding: PaddingPolicy,
) -> Result<BlockSequence, TensorError> {
    shape.check_against(t.channels)?;
    let dims = t.dims();
    if shape.bw == 1 && shape.bh == 1 && shape.bc == t.channels {
        return Ok(BlockSequence {
            data: t.data.clone(),
            height: t.height,
            width: t.width,
            channels: t.channels,
            shape,
            padding,
        });
    }
    let mut data = vec![0.0f32; shape.block_count(dims.0, dims.1, dims.2) * shape.n()];
    for_each_slot(dims, shape, |slot, idx, c| {
        data[slot] = match idx {
            Some(i) => t.data[i],
            None => padding.fill(c),
        };
    });
    Ok(BlockSequence {
        data,
        height: t.height,
        width: t.width,
        channels: t.channels,
        shape,
        padding,
    })
}

pub fn reassemble(b: &BlockSequence) -> Result<ActivationTensor, TensorError> {
    let (height, width, channels) = b.dims();
    let expected = b.shape.block_count(height, width, channels) * b.shape.n();
    if b.data.len() != expected {
        return Err(TensorError::Shape(format!(
            "block data length {} inconsistent with origin dims (expected {expected})",
            b.data.len()
        )));
    }
    let mut out = vec![0.0f32; height * width * channels];
    for_each_slot(b.dims(), b.shape, |slot, idx, _| {
        if let Some(i) = idx {
            out[i] = b.data[slot];
        }
    });
    ActivationTensor::new(height, width, channels, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(h: usize, w: usize, c: usize) -> ActivationTensor {
        ActivationTensor::new(h, w, c, (0..h * w * c).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ActivationTensor::new(0, 1, 1, vec![]).is_err());
        assert!(ActivationTensor::new(1, 1, 2, vec![1.0]).is_err());
        assert!(matches!(
            ActivationTensor::new(1, 1, 2, vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite(1))
        ));
    }

    #[test]
    fn tiny_file_is_24_bytes() {
        let t = ActivationTensor::new(1, 1, 1, vec![3.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"ATCT");
        assert_eq!(&bytes[20..], &3.5f32.to_le_bytes());
    }

    #[test]
    fn byte_round_trip_and_determinism() {
        let t = seq(2, 2, 2);
        let a = t.to_bytes();
        assert_eq!(a, t.to_bytes());
        assert_eq!(ActivationTensor::from_bytes(&a).unwrap(), t);
    }

    #[test]
    fn format_errors_are_distinct() {
        let mut bytes = seq(2, 2, 2).to_bytes();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(ActivationTensor::from_bytes(&bad), Err(TensorError::BadMagic(_))));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(ActivationTensor::from_bytes(&v2), Err(TensorError::VersionMismatch(2))));

        let mut dt = bytes.clone();
        dt[6] = 1;
        assert!(matches!(ActivationTensor::from_bytes(&dt), Err(TensorError::UnsupportedDtype(1))));

        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            ActivationTensor::from_bytes(short),
            Err(TensorError::Truncated { expected: 52, actual: 48 })
        ));

        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(ActivationTensor::from_bytes(&bytes), Err(TensorError::NonFinite(7))));
    }

    #[test]
    fn pixel_blocks_are_channel_vectors() {
        let t = seq(2, 2, 2);
        let b = partition(&t, BlockShape::pixel(2)).unwrap();
        assert_eq!(b.len(), 4);
        for (i, blk) in b.blocks().enumerate() {
            assert_eq!(blk, t.pixel(i / 2, i % 2));
        }
    }

    #[test]
    fn spatial_blocks_pad_remainders() {
        let t = seq(3, 3, 1);
        let shape = BlockShape::new(2, 2, 1).unwrap();
        let b = partition(&t, shape).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.padded_slots(), 7);
        // first block covers (0,0),(0,1),(1,0),(1,1)
        assert_eq!(b.block(0), &[0.0, 1.0, 3.0, 4.0]);
        // bottom-right block holds only (2,2)
        assert_eq!(b.block(3), &[8.0, 0.0, 0.0, 0.0]);
        assert_eq!(reassemble(&b).unwrap(), t);
    }

    #[test]
    fn padding_uses_channel_means() {
        let t = seq(1, 1, 3);
        let shape = BlockShape::new(1, 1, 2).unwrap();
        let b = partition_padded(
            &t,
            shape,
            PaddingPolicy { channel_means: Some(vec![10.0, 20.0, 30.0]) },
        )
        .unwrap();
        // channel 3 does not exist, so the second block's tail is zero
        assert_eq!(b.as_flat(), &[0.0, 1.0, 2.0, 0.0]);
        let t = seq(1, 3, 1);
        let b = partition_padded(
            &t,
            BlockShape::new(2, 1, 1).unwrap(),
            PaddingPolicy { channel_means: Some(vec![7.5]) },
        )
        .unwrap();
        assert_eq!(b.as_flat(), &[0.0, 1.0, 2.0, 7.5]);
    }

    #[test]
    fn block_depth_larger_than_channels_is_rejected() {
        let t = seq(2, 2, 2);
        assert!(partition(&t, BlockShape::new(1, 1, 3).unwrap()).is_err());
    }

    #[test]
    fn reassemble_checks_lengths() {
        let r = BlockSequence::from_blocks(vec![0.0; 5], (2, 2, 1), BlockShape::pixel(1));
        assert!(r.is_err());
        let zeros = BlockSequence::from_blocks(vec![0.0; 16], (3, 3, 1), BlockShape::new(2, 2, 1).unwrap())
            .unwrap();
        assert_eq!(reassemble(&zeros).unwrap(), ActivationTensor::zeros(3, 3, 1).unwrap());
        let single = BlockSequence::from_blocks(vec![1.0, 2.0, 3.0], (1, 1, 3), BlockShape::pixel(3)).unwrap();
        assert_eq!(reassemble(&single).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_parses() {
        assert_eq!("1x1x64".parse::<BlockShape>().unwrap(), BlockShape::pixel(64));
        assert!("4x4".parse::<BlockShape>().is_err());
        assert!("0x1x1".parse::<BlockShape>().is_err());
    }
}
