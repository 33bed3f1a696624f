//! Layer codec: calibration, KLT + uniform quantization + Huffman encoding
//! into `ATCS` streams, and the matching decoder.
//!
//! Every layer quantizes all its transform coefficients with one step,
//! anchored on the highest-variance coefficient. Each retained coefficient
//! index carries its own canonical codebook, shared by all blocks.

pub mod container;
pub mod fold;

use std::borrow::Cow;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;
use crate::nn::relu;
use crate::quant::{step_for_rate_exact, QuantError, QuantizerSpec, MAX_SOLVER_RATE};
use crate::stats::{make_klt, CovarianceModel, KLTransform, StatsError};
use crate::tensor::{partition_padded, reassemble, ActivationTensor, BlockSequence, BlockShape, PaddingPolicy, TensorError};
use crate::vlc::{build_codebook_with_escape, BitReader, BitStream, BitWriter, HuffmanCodebook, SymbolHistogram, VlcError};

pub use container::{CompressedActivation, EmbeddedTransform, StreamHeader, TransformMode};
pub use fold::{fold, quantize_transform, Int8Transform};

/// Blocks handled per parallel work item.
const BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Vlc(#[from] VlcError),
    #[error("invalid codec configuration: {0}")]
    Config(String),
    #[error("stream and profile disagree: {0}")]
    Mismatch(String),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("empty calibration batch")]
    EmptyBatch,
    #[error("profile: {0}")]
    Profile(#[from] serde_json::Error),
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Numeric,
}

impl CodecError {
    pub fn class(&self) -> ErrorClass {
        match self {
            Self::Tensor(TensorError::Io(_)) => ErrorClass::Io,
            Self::Stats(StatsError::NoConvergence { .. } | StatsError::NotPositiveSemidefinite(_) | StatsError::NonFinite) => {
                ErrorClass::Numeric
            }
            Self::Quant(QuantError::NotBracketed { .. } | QuantError::BadSigma(_) | QuantError::AllVariancesZero) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Validation,
        }
    }
}

/// How the layer's quantizer step is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Entropy target in bits per value for the anchor coefficient.
    Rate(f64),
    /// Fixed-width levels spanning `[−clip, clip]`.
    Bits(u32),
    /// Explicit step.
    Step(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformPrecision {
    #[default]
    Float32,
    Int8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    /// ReLU is applied to decoded activations.
    #[default]
    AfterDecoder,
    /// ReLU is applied before the encoder sees the activation.
    BeforeEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    #[default]
    Klt,
    /// Mean removal only; coefficients are the raw block values.
    Identity,
}

fn default_clip() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCodecConfig {
    pub block: BlockShape,
    pub step: StepRule,
    #[serde(default = "default_clip")]
    pub clip_multiplier: f64,
    /// Retained coefficient count; `None` keeps all `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep: Option<usize>,
    #[serde(default)]
    pub precision: TransformPrecision,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub transform: TransformKind,
    /// Carry the transform inside every stream.
    #[serde(default)]
    pub embed_transform: bool,
}

impl LayerCodecConfig {
    pub fn new(block: BlockShape, step: StepRule) -> Self {
        Self {
            block,
            step,
            clip_multiplier: default_clip(),
            keep: None,
            precision: TransformPrecision::default(),
            nonlinearity: Nonlinearity::default(),
            transform: TransformKind::default(),
            embed_transform: false,
        }
    }

    pub fn keep_count(&self) -> usize {
        self.keep.unwrap_or(self.block.n())
    }

    pub fn validate(&self, channels: usize) -> Result<(), CodecError> {
        let bad = |m: String| Err(CodecError::Config(m));
        self.block.check_against(channels)?;
        let n = self.block.n();
        if n > u16::MAX as usize || self.block.bw > u16::MAX as usize || self.block.bh > u16::MAX as usize {
            return bad(format!("block {} too large", self.block));
        }
        if !(1..=n).contains(&self.keep_count()) {
            return bad(format!("keep {} outside 1..={n}", self.keep_count()));
        }
        if !(self.clip_multiplier > 0.0 && self.clip_multiplier.is_finite()) {
            return bad(format!("clip multiplier {} must be positive", self.clip_multiplier));
        }
        match self.step {
            StepRule::Rate(r) if !(r > 0.0 && r <= MAX_SOLVER_RATE) => bad(format!("target rate {r} outside (0, {MAX_SOLVER_RATE}]")),
            StepRule::Bits(b) if !(1..=24).contains(&b) => bad(format!("bitwidth {b} outside 1..=24")),
            StepRule::Step(s) if !(s > 0.0 && s.is_finite()) => bad(format!("step {s} must be positive")),
            _ => Ok(()),
        }
    }
}

/// Everything needed to code one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub config: LayerCodecConfig,
    pub channels: usize,
    /// Transform as applied, i.e. after precision reduction. Its spectrum
    /// holds the calibration eigenvalues.
    pub transform: KLTransform<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub int8: Option<Int8Transform>,
    pub quantizer: QuantizerSpec<f64>,
    pub codebooks: Vec<HuffmanCodebook>,
    /// Per-channel calibration means used to pad partial blocks.
    pub padding: Vec<f32>,
    pub sample_count: u64,
}

impl ProfileEntry {
    pub fn block(&self) -> BlockShape {
        self.config.block
    }

    pub fn keep(&self) -> usize {
        self.codebooks.len()
    }

    pub fn spectrum(&self) -> &[f64] {
        self.transform.spectrum()
    }

    fn padding_policy(&self) -> PaddingPolicy {
        PaddingPolicy { channel_means: Some(self.padding.clone()) }
    }

    fn embedded(&self) -> Option<EmbeddedTransform> {
        if !self.config.embed_transform {
            return None;
        }
        let mean = self.transform.mean().iter().map(|&v| v as f32).collect();
        Some(match &self.int8 {
            Some(q) => EmbeddedTransform::Int8 { matrix: q.clone(), mean },
            None => EmbeddedTransform::Float32 { matrix: self.transform.matrix().iter().map(|&v| v as f32).collect(), mean },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub model: String,
    pub sample_count: u64,
    pub layers: Vec<ProfileEntry>,
}

impl CalibrationProfile {
    pub fn layer(&self, id: usize) -> Result<&ProfileEntry, CodecError> {
        self.layers
            .get(id)
            .ok_or_else(|| CodecError::Config(format!("layer {id} not in profile ({} layers)", self.layers.len())))
    }

    pub fn to_json(&self) -> Result<Vec<u8>, CodecError> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, CodecError> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        write_atomic(path.as_ref(), &self.to_json()?).map_err(TensorError::Io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        let bytes = std::fs::read(path).map_err(TensorError::Io)?;
        Self::from_json(&bytes)
    }
}

fn prepare<'a>(t: &'a ActivationTensor, config: &LayerCodecConfig) -> Result<Cow<'a, ActivationTensor>, CodecError> {
    Ok(match config.nonlinearity {
        Nonlinearity::BeforeEncoder => Cow::Owned(t.map(relu)?),
        Nonlinearity::AfterDecoder => Cow::Borrowed(t),
    })
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Quantizer for a layer: `clip = c·σ'₀`, step from the rule, both stored
/// at `f32` precision.
pub fn anchor_quantizer(spectrum: &[f64], config: &LayerCodecConfig) -> Result<QuantizerSpec<f64>, CodecError> {
    let sigma = spectrum.iter().fold(0.0f64, |m, &v| m.max(v)).sqrt();
    let clip = config.clip_multiplier * sigma;
    let step = match config.step {
        StepRule::Rate(r) => step_for_rate_exact(r, sigma)?,
        StepRule::Bits(b) => 2.0 * clip / ((1u64 << b) - 1) as f64,
        StepRule::Step(s) => s,
    };
    let step = step as f32 as f64;
    let clip = (clip as f32 as f64).max(step / 2.0);
    Ok(QuantizerSpec::new(step, clip)?)
}

/// Bin indices of the leading `keep` coefficients of every block.
fn block_symbols(transform: &KLTransform<f64>, q: &QuantizerSpec<f64>, keep: usize, blocks: &BlockSequence) -> Vec<i32> {
    let n = blocks.shape().n();
    let mut out = vec![0i32; blocks.len() * keep];
    out.par_chunks_mut(keep * BATCH)
        .zip(blocks.as_flat().par_chunks(n * BATCH))
        .for_each(|(dst, src)| {
            let mut x = vec![0.0f64; n];
            let mut y = vec![0.0f64; keep];
            for (d, s) in dst.chunks_exact_mut(keep).zip(src.chunks_exact(n)) {
                for (a, &b) in x.iter_mut().zip(s) {
                    *a = b as f64;
                }
                transform.forward_into(&x, &mut y).expect("block length matches transform");
                for (k, &v) in d.iter_mut().zip(&y) {
                    *k = q.index(v);
                }
            }
        });
    out
}

/// Per-coefficient histograms of block-interleaved symbols.
pub fn coefficient_histograms(symbols: &[i32], keep: usize) -> Result<Vec<SymbolHistogram>, CodecError> {
    (0..keep)
        .map(|j| {
            let column: Vec<i32> = symbols.iter().skip(j).step_by(keep).copied().collect();
            Ok(SymbolHistogram::from_symbols(&column)?)
        })
        .collect()
}

/// Calibrates one layer on a batch of its activations.
pub fn calibrate_layer(batch: &[ActivationTensor], config: &LayerCodecConfig) -> Result<ProfileEntry, CodecError> {
    let first = batch.first().ok_or(CodecError::EmptyBatch)?;
    let channels = first.channels();
    config.validate(channels)?;
    if let Some(t) = batch.iter().find(|t| t.channels() != channels) {
        return Err(CodecError::Mismatch(format!(
            "calibration batch mixes {channels} and {} channels",
            t.channels()
        )));
    }
    let prepared = batch.iter().map(|t| prepare(t, config)).collect::<Result<Vec<_>, _>>()?;

    let mut sums = vec![0.0f64; channels];
    let mut pixels = 0usize;
    for t in &prepared {
        for (s, m) in sums.iter_mut().zip(t.channel_means()) {
            *s += m * (t.height() * t.width()) as f64;
        }
        pixels += t.height() * t.width();
    }
    let padding: Vec<f32> = sums.iter().map(|s| (s / pixels as f64) as f32).collect();
    let policy = PaddingPolicy { channel_means: Some(padding.clone()) };

    let n = config.block.n();
    let mut model = CovarianceModel::<f64>::new(n);
    let mut sequences = Vec::with_capacity(prepared.len());
    for t in &prepared {
        let blocks = partition_padded(t, config.block, policy.clone())?;
        model.extend_flat(blocks.as_flat())?;
        sequences.push(blocks);
    }

    let exact = match config.transform {
        TransformKind::Klt => make_klt(&model)?,
        TransformKind::Identity => {
            let cov = model.covariance();
            let variances = (0..n).map(|i| cov[i * n + i]).collect();
            KLTransform::from_parts(KLTransform::<f64>::identity(n).matrix().to_vec(), model.mean().to_vec(), variances)?
        }
    };
    let mean = round_f32(exact.mean());
    let (transform, int8) = match config.precision {
        TransformPrecision::Float32 => {
            (KLTransform::from_parts(round_f32(exact.matrix()), mean, exact.spectrum().to_vec())?, None)
        }
        TransformPrecision::Int8 => {
            let q = quantize_transform(&exact);
            (KLTransform::from_parts(q.dequantize(), mean, exact.spectrum().to_vec())?, Some(q))
        }
    };

    let quantizer = anchor_quantizer(transform.spectrum(), config)?;
    let keep = config.keep_count();
    let mut symbols = Vec::new();
    for blocks in &sequences {
        symbols.extend(block_symbols(&transform, &quantizer, keep, blocks));
    }
    let codebooks = coefficient_histograms(&symbols, keep)?
        .iter()
        .map(build_codebook_with_escape)
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ProfileEntry {
        config: config.clone(),
        channels,
        transform,
        int8,
        quantizer,
        codebooks,
        padding,
        sample_count: model.sample_count(),
    })
}

/// Calibrates independent layers, each on its own batch.
pub fn calibrate(batches: &[Vec<ActivationTensor>], configs: &[LayerCodecConfig], model: &str) -> Result<CalibrationProfile, CodecError> {
    if batches.len() != configs.len() {
        return Err(CodecError::Config(format!("{} batches for {} layer configs", batches.len(), configs.len())));
    }
    let layers = batches
        .iter()
        .zip(configs)
        .map(|(b, c)| calibrate_layer(b, c))
        .collect::<Result<Vec<_>, _>>()?;
    let sample_count = layers.iter().map(|l| l.sample_count).sum();
    Ok(CalibrationProfile { model: model.to_string(), sample_count, layers })
}

/// Encoded stream plus the symbols it carries, block-interleaved.
#[derive(Debug, Clone)]
pub struct EncodedLayer {
    pub stream: CompressedActivation,
    pub symbols: Vec<i32>,
}

fn pack(symbols: &[i32], codebooks: &[HuffmanCodebook]) -> Result<BitStream, CodecError> {
    let mut w = BitWriter::new();
    for block in symbols.chunks_exact(codebooks.len()) {
        for (&s, cb) in block.iter().zip(codebooks) {
            cb.encode_symbol(&mut w, s)?;
        }
    }
    Ok(w.finish())
}

fn assemble(dims: (usize, usize, usize), symbols: Vec<i32>, entry: &ProfileEntry) -> Result<EncodedLayer, CodecError> {
    let payload = pack(&symbols, &entry.codebooks)?;
    let header = StreamHeader {
        height: dims.0,
        width: dims.1,
        channels: dims.2,
        block: entry.block(),
        step: entry.quantizer.step() as f32,
        clip: entry.quantizer.clip() as f32,
        keep: entry.keep(),
        transform: entry.embedded(),
        codebooks: entry.codebooks.clone(),
        symbol_count: symbols.len() as u64,
    };
    Ok(EncodedLayer { stream: CompressedActivation { header, payload }, symbols })
}

fn check_channels(channels: usize, entry: &ProfileEntry) -> Result<(), CodecError> {
    if channels != entry.channels {
        return Err(CodecError::Mismatch(format!(
            "tensor has {channels} channels, layer was calibrated on {}",
            entry.channels
        )));
    }
    Ok(())
}

pub fn encode_layer_symbols(t: &ActivationTensor, entry: &ProfileEntry) -> Result<EncodedLayer, CodecError> {
    check_channels(t.channels(), entry)?;
    let t = prepare(t, &entry.config)?;
    let blocks = partition_padded(&t, entry.block(), entry.padding_policy())?;
    let symbols = block_symbols(&entry.transform, &entry.quantizer, entry.keep(), &blocks);
    assemble(t.dims(), symbols, entry)
}

/// Partition, transform, truncate, quantize and entropy-code one tensor.
pub fn encode_layer(t: &ActivationTensor, entry: &ProfileEntry) -> Result<CompressedActivation, CodecError> {
    Ok(encode_layer_symbols(t, entry)?.stream)
}

/// Encodes values already in the transform domain, as produced by a
/// folded convolution. `coefficients` is laid out pixel by pixel with `C`
/// values each; only `1×1×C` layers qualify.
pub fn encode_coefficients(
    dims: (usize, usize, usize),
    coefficients: &[f64],
    entry: &ProfileEntry,
) -> Result<EncodedLayer, CodecError> {
    let (h, w, c) = dims;
    check_channels(c, entry)?;
    if entry.block() != BlockShape::pixel(c) {
        return Err(CodecError::Config(format!("coefficient input needs 1x1x{c} blocks, layer uses {}", entry.block())));
    }
    if entry.config.nonlinearity == Nonlinearity::BeforeEncoder {
        return Err(CodecError::Config("a ReLU before the encoder cannot be folded".into()));
    }
    if coefficients.len() != h * w * c {
        return Err(CodecError::Mismatch(format!("{} coefficients for {h}×{w}×{c}", coefficients.len())));
    }
    let keep = entry.keep();
    let q = &entry.quantizer;
    let symbols = coefficients
        .chunks_exact(c)
        .flat_map(|px| px[..keep].iter().map(|&v| q.index(v)))
        .collect();
    assemble(dims, symbols, entry)
}

fn check_header(h: &StreamHeader, entry: &ProfileEntry) -> Result<(), CodecError> {
    if h.block != entry.block() || h.keep != entry.keep() || h.channels != entry.channels {
        return Err(CodecError::Mismatch(format!(
            "stream {}×{}×{} in {} blocks keeping {}, profile expects {} channels in {} blocks keeping {}",
            h.height,
            h.width,
            h.channels,
            h.block,
            h.keep,
            entry.channels,
            entry.block(),
            entry.keep()
        )));
    }
    Ok(())
}

/// Variable-length decode of all symbols, block-interleaved.
pub fn decode_symbols(ca: &CompressedActivation) -> Result<Vec<i32>, CodecError> {
    let h = &ca.header;
    if h.codebooks.len() != h.keep || h.symbol_count != (h.block_count() * h.keep) as u64 {
        return Err(CodecError::Corrupt("codebook or symbol count inconsistent with header".into()));
    }
    let mut r = BitReader::new(&ca.payload);
    let mut symbols = vec![0i32; h.symbol_count as usize];
    for block in symbols.chunks_exact_mut(h.keep) {
        for (s, cb) in block.iter_mut().zip(&h.codebooks) {
            *s = cb.decode_symbol(&mut r)?;
        }
    }
    r.finish()?;
    Ok(symbols)
}

fn decode_with(ca: &CompressedActivation, transform: &KLTransform<f64>) -> Result<ActivationTensor, CodecError> {
    let h = &ca.header;
    let n = h.block.n();
    if transform.dim() != n {
        return Err(CodecError::Mismatch(format!("transform dim {} for {} blocks", transform.dim(), h.block)));
    }
    let q = QuantizerSpec::new(h.step as f64, h.clip as f64)?;
    let symbols = decode_symbols(ca)?;
    let keep = h.keep;
    let mut data = vec![0.0f32; h.block_count() * n];
    data.par_chunks_mut(n * BATCH)
        .zip(symbols.par_chunks(keep * BATCH))
        .for_each(|(dst, src)| {
            let mut y = vec![0.0f64; keep];
            let mut x = vec![0.0f64; n];
            for (d, s) in dst.chunks_exact_mut(n).zip(src.chunks_exact(keep)) {
                for (a, &k) in y.iter_mut().zip(s) {
                    *a = q.level(k);
                }
                transform.inverse_into(&y, &mut x).expect("coefficient count within transform");
                for (o, &v) in d.iter_mut().zip(&x) {
                    *o = v as f32;
                }
            }
        });
    let blocks = BlockSequence::from_blocks(data, (h.height, h.width, h.channels), h.block)?;
    Ok(reassemble(&blocks)?)
}

/// Decodes without the layer nonlinearity. An embedded transform takes
/// precedence over the profile's.
pub fn decode_layer_raw(ca: &CompressedActivation, entry: &ProfileEntry) -> Result<ActivationTensor, CodecError> {
    check_header(&ca.header, entry)?;
    match &ca.header.transform {
        Some(embedded) => decode_with(ca, &embedded_klt(embedded, entry.block().n())?),
        None => decode_with(ca, &entry.transform),
    }
}

/// Inverse of [`encode_layer`], applying ReLU when the layer places it
/// after the decoder.
pub fn decode_layer(ca: &CompressedActivation, entry: &ProfileEntry) -> Result<ActivationTensor, CodecError> {
    let t = decode_layer_raw(ca, entry)?;
    match entry.config.nonlinearity {
        Nonlinearity::AfterDecoder => Ok(t.map(relu)?),
        Nonlinearity::BeforeEncoder => Ok(t),
    }
}

fn embedded_klt(e: &EmbeddedTransform, n: usize) -> Result<KLTransform<f64>, CodecError> {
    let (matrix, mean) = e.to_f64();
    Ok(KLTransform::from_parts(matrix, mean, vec![0.0; n])?)
}

/// Decodes a stream that carries its own transform. No nonlinearity.
pub fn decode_standalone(ca: &CompressedActivation) -> Result<ActivationTensor, CodecError> {
    let e = ca
        .header
        .transform
        .as_ref()
        .ok_or_else(|| CodecError::Config("stream has no embedded transform; a profile is needed".into()))?;
    decode_with(ca, &embedded_klt(e, ca.header.block.n())?)
}

/// Payload bits (plus header bits if asked) per original tensor value.
pub fn measured_rate(ca: &CompressedActivation, include_header: bool) -> f64 {
    let mut bits = ca.payload_bits();
    if include_header {
        bits += ca.header_bits();
    }
    bits as f64 / ca.header.value_count() as f64
}
