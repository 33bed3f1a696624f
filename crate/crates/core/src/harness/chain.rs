//! Tiny conv → BN → codec → ReLU chains.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{
    self, calibrate_layer, decode_layer, decode_layer_raw, encode_coefficients, encode_layer_symbols, fold,
    CalibrationProfile, EncodedLayer, LayerCodecConfig, Nonlinearity, ProfileEntry,
};
use crate::nn::{conv2d, relu, to_tensor, BatchNorm, ConvWeights};
use crate::tensor::{load_tensor, ActivationTensor};

use super::source::{sub_seed, GaussianRng};
use super::HarnessError;

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<BatchNorm>,
    pub codec: LayerCodecConfig,
    /// ATCT file holding the kernel as `out × in × (kh·kw)`, i.e. the
    /// `(out, in, kh, kw)` row-major order. Random He init when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerChainSpec {
    #[serde(default = "default_model")]
    pub model: String,
    pub input: InputDims,
    #[serde(default)]
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

fn default_model() -> String {
    "chain".into()
}

impl LayerChainSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        let d = self.input;
        if d.height == 0 || d.width == 0 || d.channels == 0 {
            return bad("input dims must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("chain has no layers".into());
        }
        let mut channels = d.channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != channels {
                return bad(format!("layer {i} expects {} input channels, previous layer gives {channels}", l.in_channels));
            }
            if l.kernel % 2 == 0 || l.stride == 0 || l.out_channels == 0 {
                return bad(format!("layer {i}: kernel must be odd, stride and channels positive"));
            }
            if let Some(bn) = &l.bn {
                bn.validate()?;
                if bn.channels() != l.out_channels {
                    return bad(format!("layer {i}: batch norm has {} channels, conv {}", bn.channels(), l.out_channels));
                }
            }
            l.codec.validate(l.out_channels).map_err(|e| HarnessError::Spec(format!("layer {i}: {e}")))?;
            channels = l.out_channels;
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, HarnessError> {
        let spec: Self = serde_json::from_slice(bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    /// `count` i.i.d. N(0, 1) input tensors; tensor `k` uses seed `seed ⊕ k`.
    pub fn random_inputs(&self, count: usize, seed: u64) -> Vec<ActivationTensor> {
        let d = self.input;
        (0..count)
            .map(|k| {
                let mut rng = GaussianRng::new(sub_seed(seed, k as u64));
                let data = (0..d.height * d.width * d.channels).map(|_| rng.normal() as f32).collect();
                ActivationTensor::new(d.height, d.width, d.channels, data).expect("dims validated")
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ChainLayer {
    pub conv: ConvWeights,
    pub bn: BatchNorm,
    pub codec: LayerCodecConfig,
}

#[derive(Debug, Clone)]
pub struct Chain {
    pub model: String,
    pub input: InputDims,
    pub layers: Vec<ChainLayer>,
}

/// Standard deviation of He-initialised weights.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl Chain {
    /// Instantiates weights: from files (relative to `base`) or He-normal
    /// with std `√(2/fan_in)` drawn from seed `seed ⊕ layer`. Biases of
    /// random layers are `0.1·N(0, 1)`.
    pub fn build(spec: &LayerChainSpec, base: Option<&Path>) -> Result<Self, HarnessError> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let k = l.kernel;
                let count = l.out_channels * l.in_channels * k * k;
                let (weights, bias) = match &l.weights {
                    Some(p) => {
                        let path = base.map_or_else(|| p.clone(), |b| b.join(p));
                        let t = load_tensor(&path)?;
                        if t.dims() != (l.out_channels, l.in_channels, k * k) {
                            return Err(HarnessError::Spec(format!(
                                "layer {i}: weight file dims {:?}, expected {:?}",
                                t.dims(),
                                (l.out_channels, l.in_channels, k * k)
                            )));
                        }
                        (t.data().iter().map(|&v| v as f64).collect(), vec![0.0; l.out_channels])
                    }
                    None => {
                        let mut rng = GaussianRng::new(sub_seed(spec.seed, i as u64));
                        let std = he_std(l.in_channels * k * k);
                        let w = (0..count).map(|_| std * rng.normal()).collect();
                        let b = (0..l.out_channels).map(|_| 0.1 * rng.normal()).collect();
                        (w, b)
                    }
                };
                Ok(ChainLayer {
                    conv: ConvWeights::new(l.out_channels, l.in_channels, k, l.stride, weights, bias)?,
                    bn: l.bn.clone().unwrap_or_else(|| BatchNorm::identity(l.out_channels)),
                    codec: l.codec.clone(),
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(Self { model: spec.model.clone(), input: spec.input, layers })
    }

    /// Same chain with every layer's codec config rewritten.
    pub fn map_codec(&self, f: impl Fn(&LayerCodecConfig) -> LayerCodecConfig) -> Self {
        let mut c = self.clone();
        for l in &mut c.layers {
            l.codec = f(&l.codec);
        }
        c
    }
}

/// Pre-activation `BN(conv(x))` in `f64`, as `(height, width, values)`.
pub fn pre_activation(layer: &ChainLayer, x: &ActivationTensor) -> Result<(usize, usize, Vec<f64>), HarnessError> {
    let (h, w, mut z) = conv2d(x, &layer.conv)?;
    layer.bn.apply(&mut z);
    Ok((h, w, z))
}

fn pre_tensor(layer: &ChainLayer, x: &ActivationTensor) -> Result<ActivationTensor, HarnessError> {
    let (h, w, z) = pre_activation(layer, x)?;
    Ok(to_tensor(h, w, layer.conv.out_channels, &z)?)
}

/// Uncompressed forward pass; returns the final post-ReLU output.
pub fn reference_forward(chain: &Chain, input: &ActivationTensor) -> Result<ActivationTensor, HarnessError> {
    let mut x = input.clone();
    for layer in &chain.layers {
        x = pre_tensor(layer, &x)?.map(relu)?;
    }
    Ok(x)
}

/// Calibrates layer by layer: each layer's statistics come from inputs that
/// already went through the coded earlier layers.
pub fn calibrate_chain(chain: &Chain, inputs: &[ActivationTensor]) -> Result<CalibrationProfile, HarnessError> {
    let mut xs = inputs.to_vec();
    let mut layers = Vec::with_capacity(chain.layers.len());
    for layer in &chain.layers {
        let zs = xs.iter().map(|x| pre_tensor(layer, x)).collect::<Result<Vec<_>, _>>()?;
        let entry = calibrate_layer(&zs, &layer.codec)?;
        xs = zs
            .iter()
            .map(|z| {
                let enc = codec::encode_layer(z, &entry)?;
                decode_layer(&enc, &entry)
            })
            .collect::<Result<Vec<_>, _>>()?;
        layers.push(entry);
    }
    Ok(profile(chain, layers))
}

/// All layers calibrated on the clean, uncompressed forward pass.
pub fn calibrate_chain_clean(chain: &Chain, inputs: &[ActivationTensor]) -> Result<CalibrationProfile, HarnessError> {
    let mut xs = inputs.to_vec();
    let mut layers = Vec::with_capacity(chain.layers.len());
    for layer in &chain.layers {
        let zs = xs.iter().map(|x| pre_tensor(layer, x)).collect::<Result<Vec<_>, _>>()?;
        layers.push(calibrate_layer(&zs, &layer.codec)?);
        xs = zs.iter().map(|z| z.map(relu)).collect::<Result<Vec<_>, _>>()?;
    }
    Ok(profile(chain, layers))
}

fn profile(chain: &Chain, layers: Vec<ProfileEntry>) -> CalibrationProfile {
    let sample_count = layers.iter().map(|l| l.sample_count).sum();
    CalibrationProfile { model: chain.model.clone(), sample_count, layers }
}

/// Coding record of one layer in one chain run.
#[derive(Debug, Clone)]
pub struct LayerRun {
    pub encoded: EncodedLayer,
    /// Activation handed to the encoder (after ReLU when it precedes it).
    pub original: ActivationTensor,
    /// Decoder output before any ReLU.
    pub decoded: ActivationTensor,
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    pub layers: Vec<LayerRun>,
    pub output: ActivationTensor,
    pub reference: ActivationTensor,
}

impl ChainRun {
    /// MSE of the final output against the uncompressed chain.
    pub fn output_mse(&self) -> f64 {
        mse(&self.output, &self.reference)
    }
}

pub fn mse(a: &ActivationTensor, b: &ActivationTensor) -> f64 {
    sq_err(a, b) / a.len() as f64
}

pub fn sq_err(a: &ActivationTensor, b: &ActivationTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Runs the compressed chain. With `folded`, each layer's conv, BN and KLT
/// run as one convolution producing transform coefficients directly; that
/// needs `1×1×C` blocks and the ReLU after the decoder.
pub fn run_chain(chain: &Chain, profile: &CalibrationProfile, input: &ActivationTensor, folded: bool) -> Result<ChainRun, HarnessError> {
    if profile.layers.len() != chain.layers.len() {
        return Err(HarnessError::Spec(format!(
            "profile has {} layers, chain {}",
            profile.layers.len(),
            chain.layers.len()
        )));
    }
    let reference = reference_forward(chain, input)?;
    let mut x = input.clone();
    let mut runs = Vec::with_capacity(chain.layers.len());
    for (layer, entry) in chain.layers.iter().zip(&profile.layers) {
        let z = pre_tensor(layer, &x)?;
        let encoded = if folded {
            let f = fold(&layer.conv, &layer.bn, &entry.transform, entry.block())?;
            let (h, w, coeffs) = conv2d(&x, &f)?;
            encode_coefficients((h, w, f.out_channels), &coeffs, entry)?
        } else {
            encode_layer_symbols(&z, entry)?
        };
        let decoded = decode_layer_raw(&encoded.stream, entry)?;
        let original = match entry.config.nonlinearity {
            Nonlinearity::BeforeEncoder => z.map(relu)?,
            Nonlinearity::AfterDecoder => z,
        };
        x = match entry.config.nonlinearity {
            Nonlinearity::AfterDecoder => decoded.map(relu)?,
            Nonlinearity::BeforeEncoder => decoded.clone(),
        };
        runs.push(LayerRun { encoded, original, decoded });
    }
    Ok(ChainRun { layers: runs, output: x, reference })
}

/// Largest relative deviation `‖a − b‖∞ / ‖b‖∞` between the folded
/// convolution and `klt_forward(BN(conv(x)))`.
pub fn fold_agreement(layer: &ChainLayer, entry: &ProfileEntry, x: &ActivationTensor) -> Result<f64, HarnessError> {
    let f = fold(&layer.conv, &layer.bn, &entry.transform, entry.block())?;
    let (_, _, folded) = conv2d(x, &f)?;
    let (_, _, z) = pre_activation(layer, x)?;
    let c = layer.conv.out_channels;
    let mut composed = vec![0.0; z.len()];
    for (px, out) in z.chunks_exact(c).zip(composed.chunks_exact_mut(c)) {
        entry.transform.forward_into(px, out)?;
    }
    let peak = composed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = folded.iter().zip(&composed).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(if peak > 0.0 { worst / peak } else { worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::StepRule;
    use crate::tensor::BlockShape;

    fn spec(step: f64) -> LayerChainSpec {
        let codec = |c: usize| LayerCodecConfig::new(BlockShape::pixel(c), StepRule::Step(step));
        LayerChainSpec {
            model: "t".into(),
            input: InputDims { height: 6, width: 6, channels: 3 },
            seed: 11,
            layers: vec![
                LayerSpec { kernel: 3, in_channels: 3, out_channels: 8, stride: 1, bn: None, codec: codec(8), weights: None },
                LayerSpec { kernel: 1, in_channels: 8, out_channels: 4, stride: 1, bn: None, codec: codec(4), weights: None },
                LayerSpec { kernel: 3, in_channels: 4, out_channels: 4, stride: 2, bn: None, codec: codec(4), weights: None },
            ],
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(0.1);
        s.validate().unwrap();
        s.layers[1].in_channels = 5;
        assert!(s.validate().is_err());
        let json = serde_json::to_vec(&spec(0.1)).unwrap();
        assert_eq!(LayerChainSpec::from_json(&json).unwrap(), spec(0.1));
    }

    #[test]
    fn tiny_step_matches_reference() {
        let s = spec(1e-5);
        let chain = Chain::build(&s, None).unwrap();
        let inputs = s.random_inputs(2, 5);
        let profile = calibrate_chain(&chain, &inputs).unwrap();
        let run = run_chain(&chain, &profile, &inputs[0], false).unwrap();
        assert_eq!(run.layers.len(), 3);
        let peak = run.reference.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        assert!(run.output_mse().sqrt() < 1e-3 * peak);
    }

    #[test]
    fn folded_and_unfolded_paths_agree() {
        let s = spec(1e-4);
        let chain = Chain::build(&s, None).unwrap();
        let inputs = s.random_inputs(2, 9);
        let profile = calibrate_chain(&chain, &inputs).unwrap();
        let a = run_chain(&chain, &profile, &inputs[1], false).unwrap();
        let b = run_chain(&chain, &profile, &inputs[1], true).unwrap();
        let peak = a.output.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        for (x, y) in a.output.data().iter().zip(b.output.data()) {
            assert!(((x - y) as f64).abs() <= 1e-4 * peak);
        }
        for (layer, entry) in chain.layers.iter().zip(&profile.layers) {
            let x = s.random_inputs(1, 3).remove(0);
            if layer.conv.in_channels == 3 {
                assert!(fold_agreement(layer, entry, &x).unwrap() < 1e-9);
            }
        }
    }
}
