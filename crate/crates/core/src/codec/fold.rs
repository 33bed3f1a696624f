//! 8-bit transform storage and conv/BN/KLT folding.

use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm, ConvWeights};
use crate::stats::KLTransform;
use crate::tensor::BlockShape;

use super::CodecError;

/// Transform matrix stored as `i8` entries with one symmetric scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Int8Transform {
    pub n: usize,
    pub values: Vec<i8>,
    pub scale: f32,
}

impl Int8Transform {
    /// Entries `v·scale`, evaluated in `f32`.
    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&v| (v as f32 * self.scale) as f64).collect()
    }

    /// Largest entrywise deviation from `matrix`.
    pub fn max_error(&self, matrix: &[f64]) -> f64 {
        self.dequantize().iter().zip(matrix).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Per-matrix symmetric 8-bit quantization: `s = max|T|/127`,
/// entries `round(T/s)`.
pub fn quantize_transform(t: &KLTransform<f64>) -> Int8Transform {
    let peak = t.matrix().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { (peak / 127.0) as f32 } else { 1.0 };
    let values = t
        .matrix()
        .iter()
        .map(|&v| (v / scale as f64).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Int8Transform { n: t.dim(), values, scale }
}

/// Folds batch normalization and the KLT into a convolution:
/// `W' = T·diag(γ/s)·W` per spatial tap and
/// `b' = T·(diag(γ/s)(b − m) + β − μ_t)`.
///
/// The transform must act on `1×1×C` blocks, the only shape for which
/// channel mixing commutes with the spatial convolution.
pub fn fold(conv: &ConvWeights, bn: &BatchNorm, klt: &KLTransform<f64>, shape: BlockShape) -> Result<ConvWeights, CodecError> {
    let c = conv.out_channels;
    if !shape.is_pixel() || shape.bc != c {
        return Err(CodecError::Config(format!(
            "folding needs 1x1x{c} blocks, layer uses {shape}"
        )));
    }
    bn.validate()?;
    if bn.channels() != c || klt.dim() != c {
        return Err(CodecError::Mismatch(format!(
            "conv has {c} outputs, batch norm {} channels, transform {}",
            bn.channels(),
            klt.dim()
        )));
    }
    let g = bn.scale();
    let taps = conv.in_channels * conv.kernel * conv.kernel;
    let mut weights = vec![0.0; c * taps];
    let mut bias = vec![0.0; c];
    let shifted: Vec<f64> = (0..c)
        .map(|o| g[o] * (conv.bias[o] - bn.mean[o]) + bn.beta[o] - klt.mean()[o])
        .collect();
    for (p, row) in (0..c).map(|p| (p, klt.row(p))) {
        let dst = &mut weights[p * taps..(p + 1) * taps];
        for o in 0..c {
            let f = row[o] * g[o];
            if f == 0.0 {
                continue;
            }
            for (d, &w) in dst.iter_mut().zip(&conv.weights[o * taps..(o + 1) * taps]) {
                *d += f * w;
            }
        }
        bias[p] = row.iter().zip(&shifted).map(|(t, s)| t * s).sum();
    }
    Ok(ConvWeights::new(c, conv.in_channels, conv.kernel, conv.stride, weights, bias)?)
}
