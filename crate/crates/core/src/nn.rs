//! Minimal layer primitives for the desk-scale chain: direct 2-D
//! convolution, inference-mode batch normalization and ReLU.
//!
//! Kernels are stored `(out, in, kh, kw)` row-major. Intermediate values are
//! `f64` and laid out like [`ActivationTensor`] (channel fastest).

use serde::{Deserialize, Serialize};

use crate::tensor::{ActivationTensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if kernel % 2 == 0 || stride == 0 || out_channels == 0 || in_channels == 0 {
            return Err(TensorError::Shape(format!(
                "conv needs odd kernel and positive stride/channels (k={kernel}, s={stride})"
            )));
        }
        if weights.len() != out_channels * in_channels * kernel * kernel || bias.len() != out_channels {
            return Err(TensorError::Shape("conv weight or bias length mismatch".into()));
        }
        Ok(Self { out_channels, in_channels, kernel, stride, weights, bias })
    }

    #[inline]
    pub fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

/// Per-channel affine normalization `γ·(x − mean)/std + β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.std.len() != c {
            return Err(TensorError::Shape("batch-norm parameter lengths differ".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(TensorError::Shape("batch-norm std must be positive".into()));
        }
        Ok(())
    }

    /// Multiplicative factor `γ/std` per channel.
    pub fn scale(&self) -> Vec<f64> {
        self.gamma.iter().zip(&self.std).map(|(g, s)| g / s).collect()
    }

    pub fn apply(&self, data: &mut [f64]) {
        let c = self.channels();
        let scale = self.scale();
        for px in data.chunks_exact_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = scale[k] * (*v - self.mean[k]) + self.beta[k];
            }
        }
    }
}

/// Direct convolution with zero "same" padding of `kernel / 2`.
/// Returns `(height, width, data)` of the output.
pub fn conv2d(input: &ActivationTensor, conv: &ConvWeights) -> Result<(usize, usize, Vec<f64>), TensorError> {
    conv2d_f64(input.height(), input.width(), input.channels(), |i| input.data()[i] as f64, conv)
}

pub fn conv2d_f64(
    height: usize,
    width: usize,
    channels: usize,
    at: impl Fn(usize) -> f64,
    conv: &ConvWeights,
) -> Result<(usize, usize, Vec<f64>), TensorError> {
    if channels != conv.in_channels {
        return Err(TensorError::Shape(format!(
            "conv expects {} input channels, got {channels}",
            conv.in_channels
        )));
    }
    let (oh, ow) = conv.output_dims(height, width);
    let pad = (conv.kernel / 2) as isize;
    let oc = conv.out_channels;
    let mut out = vec![0.0f64; oh * ow * oc];
    let mut patch = vec![0.0f64; channels];
    for y in 0..oh {
        for x in 0..ow {
            let dst = &mut out[(y * ow + x) * oc..(y * ow + x + 1) * oc];
            dst.copy_from_slice(&conv.bias);
            for ky in 0..conv.kernel {
                let sy = (y * conv.stride) as isize + ky as isize - pad;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..conv.kernel {
                    let sx = (x * conv.stride) as isize + kx as isize - pad;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let base = (sy as usize * width + sx as usize) * channels;
                    for (i, p) in patch.iter_mut().enumerate() {
                        *p = at(base + i);
                    }
                    for (o, d) in dst.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (i, &p) in patch.iter().enumerate() {
                            acc += conv.w(o, i, ky, kx) * p;
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
    Ok((oh, ow, out))
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// Rounds an `f64` activation buffer into a tensor.
pub fn to_tensor(height: usize, width: usize, channels: usize, data: &[f64]) -> Result<ActivationTensor, TensorError> {
    ActivationTensor::new(height, width, channels, data.iter().map(|&v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_conv_is_channel_mixing() {
        let t = ActivationTensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let conv = ConvWeights::new(1, 2, 1, 1, vec![10.0, 1.0], vec![0.5]).unwrap();
        let (h, w, out) = conv2d(&t, &conv).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(out, vec![12.5, 34.5]);
    }

    #[test]
    fn three_by_three_uses_zero_padding() {
        let t = ActivationTensor::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let conv = ConvWeights::new(1, 1, 3, 1, vec![1.0; 9], vec![0.0]).unwrap();
        let (_, _, out) = conv2d(&t, &conv).unwrap();
        assert_eq!(out, vec![4.0; 4]);
        let strided = ConvWeights::new(1, 1, 3, 2, vec![1.0; 9], vec![0.0]).unwrap();
        let (h, w, out) = conv2d(&t, &strided).unwrap();
        assert_eq!((h, w, out), (1, 1, vec![4.0]));
    }

    #[test]
    fn batch_norm_applies_per_channel() {
        let bn = BatchNorm { gamma: vec![2.0, 1.0], beta: vec![1.0, 0.0], mean: vec![1.0, 0.0], std: vec![0.5, 1.0] };
        let mut d = vec![2.0, 3.0];
        bn.apply(&mut d);
        assert_eq!(d, vec![5.0, 3.0]);
        assert!(BatchNorm { std: vec![0.0, 1.0], ..bn }.validate().is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ConvWeights::new(1, 1, 2, 1, vec![0.0; 4], vec![0.0]).is_err());
        assert!(ConvWeights::new(1, 1, 1, 1, vec![0.0; 2], vec![0.0]).is_err());
        let conv = ConvWeights::new(1, 3, 1, 1, vec![0.0; 3], vec![0.0]).unwrap();
        assert!(conv2d(&ActivationTensor::zeros(1, 1, 2).unwrap(), &conv).is_err());
    }
}
