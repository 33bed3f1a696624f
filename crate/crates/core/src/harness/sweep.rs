//! Rate–distortion sweeps and matched-MSE comparisons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{calibrate_layer, decode_layer_raw, encode_layer_symbols, CalibrationProfile, LayerCodecConfig, Nonlinearity, ProfileEntry, StepRule, TransformKind};
use crate::nn::relu;
use crate::stats::energy_ratio;
use crate::tensor::{ActivationTensor, BlockShape};
use crate::vlc::{entropy, SymbolHistogram};

use super::chain::{calibrate_chain, run_chain, sq_err, Chain, LayerRun};
use super::HarnessError;

/// One row of a rate–distortion report. Rates are bits per tensor value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateDistortionPoint {
    pub layer: usize,
    pub step: f64,
    pub entropy_bits: f64,
    pub huffman_bits: f64,
    pub header_bits: f64,
    pub mse: f64,
    pub output_mse: Option<f64>,
}

/// What the `huffman_bits` column reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RateColumn {
    /// Measured payload of the Huffman-coded stream.
    #[default]
    Huffman,
    /// Empirical entropy of the coded symbols.
    Theoretical,
    /// `⌈log2(levels)⌉` bits per kept coefficient, no entropy coding.
    FixedWidth,
}

/// Ablation switches applied on top of each layer's configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct SweepOptions {
    pub transform: Option<TransformKind>,
    pub keep: Option<usize>,
    pub rate: RateColumn,
}

impl SweepOptions {
    pub fn apply(&self, config: &LayerCodecConfig, step: StepRule) -> LayerCodecConfig {
        let mut c = config.clone();
        c.step = step;
        if let Some(t) = self.transform {
            c.transform = t;
        }
        if let Some(k) = self.keep {
            c.keep = Some(k);
        }
        c
    }
}

/// Running totals for one layer over many coded tensors.
#[derive(Debug, Clone)]
struct Tally {
    values: usize,
    payload: u64,
    header: u64,
    sq_err: f64,
    columns: Vec<Vec<i32>>,
}

impl Tally {
    fn new(keep: usize) -> Self {
        Self { values: 0, payload: 0, header: 0, sq_err: 0.0, columns: vec![Vec::new(); keep] }
    }

    fn add(&mut self, run: &LayerRun) {
        let ca = &run.encoded.stream;
        self.values += ca.header.value_count();
        self.payload += ca.payload_bits();
        self.header += ca.header_bits();
        self.sq_err += sq_err(&run.decoded, &run.original);
        let keep = self.columns.len();
        for block in run.encoded.symbols.chunks_exact(keep) {
            for (col, &s) in self.columns.iter_mut().zip(block) {
                col.push(s);
            }
        }
    }

    fn point(&self, layer: usize, entry: &ProfileEntry, rate: RateColumn, output_mse: Option<f64>) -> Result<RateDistortionPoint, HarnessError> {
        let v = self.values as f64;
        let mut entropy_bits = 0.0;
        let mut symbols = 0usize;
        for col in &self.columns {
            entropy_bits += entropy(&SymbolHistogram::from_symbols(col).map_err(crate::codec::CodecError::from)?) * col.len() as f64;
            symbols += col.len();
        }
        let entropy_bits = entropy_bits / v;
        let huffman_bits = match rate {
            RateColumn::Huffman => self.payload as f64 / v,
            RateColumn::Theoretical => entropy_bits,
            RateColumn::FixedWidth => (entry.quantizer.fixed_width_bits() as u64 * symbols as u64) as f64 / v,
        };
        Ok(RateDistortionPoint {
            layer,
            step: entry.quantizer.step(),
            entropy_bits,
            huffman_bits,
            header_bits: self.header as f64 / v,
            mse: self.sq_err / v,
            output_mse,
        })
    }
}

fn code_tensor(t: &ActivationTensor, entry: &ProfileEntry) -> Result<LayerRun, HarnessError> {
    let encoded = encode_layer_symbols(t, entry)?;
    let decoded = decode_layer_raw(&encoded.stream, entry)?;
    let original = match entry.config.nonlinearity {
        Nonlinearity::BeforeEncoder => t.map(relu)?,
        Nonlinearity::AfterDecoder => t.clone(),
    };
    Ok(LayerRun { encoded, original, decoded })
}

/// Calibrates on `batch` and codes every tensor of it; MSE is measured
/// before any decoder-side ReLU.
pub fn measure_layer(layer: usize, batch: &[ActivationTensor], config: &LayerCodecConfig, rate: RateColumn) -> Result<RateDistortionPoint, HarnessError> {
    let entry = calibrate_layer(batch, config)?;
    let mut tally = Tally::new(entry.keep());
    for t in batch {
        tally.add(&code_tensor(t, &entry)?);
    }
    tally.point(layer, &entry, rate, None)
}

/// One point per (layer, step), layer-major in grid order. Layer `i` is
/// calibrated and coded on `batches[i]` with `configs[i]`.
pub fn rd_sweep(
    batches: &[Vec<ActivationTensor>],
    configs: &[LayerCodecConfig],
    steps: &[StepRule],
    options: SweepOptions,
) -> Result<Vec<RateDistortionPoint>, HarnessError> {
    if batches.len() != configs.len() {
        return Err(HarnessError::Spec(format!("{} batches for {} configs", batches.len(), configs.len())));
    }
    if steps.is_empty() {
        return Err(HarnessError::Spec("empty step grid".into()));
    }
    let jobs: Vec<(usize, StepRule)> = (0..batches.len()).flat_map(|l| steps.iter().map(move |&s| (l, s))).collect();
    jobs.par_iter()
        .map(|&(l, s)| measure_layer(l, &batches[l], &options.apply(&configs[l], s), options.rate))
        .collect()
}

/// Sweeps a whole chain: for each step the chain is calibrated
/// progressively on `calibration` and run on `test`. Points are
/// layer-major and carry the final-output MSE.
pub fn chain_sweep(
    chain: &Chain,
    calibration: &[ActivationTensor],
    test: &[ActivationTensor],
    steps: &[StepRule],
    options: SweepOptions,
) -> Result<Vec<RateDistortionPoint>, HarnessError> {
    if steps.is_empty() || test.is_empty() {
        return Err(HarnessError::Spec("empty step grid or test set".into()));
    }
    let per_step = steps
        .par_iter()
        .map(|&s| {
            let c = chain.map_codec(|cfg| options.apply(cfg, s));
            let profile = calibrate_chain(&c, calibration)?;
            let mut tallies: Vec<Tally> = profile.layers.iter().map(|e| Tally::new(e.keep())).collect();
            let mut out_err = 0.0;
            let mut out_len = 0usize;
            for x in test {
                let run = run_chain(&c, &profile, x, false)?;
                for (t, l) in tallies.iter_mut().zip(&run.layers) {
                    t.add(l);
                }
                out_err += sq_err(&run.output, &run.reference);
                out_len += run.output.len();
            }
            let out = out_err / out_len as f64;
            tallies
                .iter()
                .zip(&profile.layers)
                .enumerate()
                .map(|(i, (t, e))| t.point(i, e, options.rate, Some(out)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let layers = chain.layers.len();
    Ok((0..layers).flat_map(|l| per_step.iter().map(move |pts| pts[l].clone())).collect())
}

/// Rate at a given MSE, interpolated linearly in `log2(mse)` between the
/// two nearest bracketing points. `None` outside the measured range.
pub fn rate_at_mse(points: &[RateDistortionPoint], mse: f64, rate: impl Fn(&RateDistortionPoint) -> f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points.iter().filter(|p| p.mse > 0.0).map(|p| (p.mse.log2(), rate(p))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let x = mse.log2();
    pts.windows(2).find(|w| w[0].0 <= x && x <= w[1].0).map(|w| {
        let (a, b) = (w[0], w[1]);
        if b.0 == a.0 {
            a.1.min(b.1)
        } else {
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        }
    })
}

pub fn huffman_rate(p: &RateDistortionPoint) -> f64 {
    p.huffman_bits
}

pub fn entropy_rate(p: &RateDistortionPoint) -> f64 {
    p.entropy_bits
}

/// Sweeps each shape (all with the same `n`) over the step grid on one batch.
pub fn block_shape_study(
    batch: &[ActivationTensor],
    base: &LayerCodecConfig,
    shapes: &[BlockShape],
    steps: &[StepRule],
    options: SweepOptions,
) -> Result<Vec<(BlockShape, Vec<RateDistortionPoint>)>, HarnessError> {
    let n = shapes.first().ok_or_else(|| HarnessError::Spec("no block shapes".into()))?.n();
    if let Some(s) = shapes.iter().find(|s| s.n() != n) {
        return Err(HarnessError::Spec(format!("shape {s} has n = {}, expected {n}", s.n())));
    }
    shapes
        .iter()
        .map(|&shape| {
            let config = LayerCodecConfig { block: shape, ..base.clone() };
            let points = rd_sweep(&[batch.to_vec()], &[config], steps, options)?;
            Ok((shape, points))
        })
        .collect()
}

pub const ENERGY_FRACTIONS: [f64; 4] = [0.80, 0.90, 0.95, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub layer: usize,
    pub n: usize,
    pub fraction: f64,
    pub count: usize,
    pub ratio: f64,
}

/// Eigencount needed for each of [`ENERGY_FRACTIONS`], per layer.
pub fn energy_ratio_report(profile: &CalibrationProfile) -> Result<Vec<EnergyRow>, HarnessError> {
    let mut rows = Vec::new();
    for (layer, entry) in profile.layers.iter().enumerate() {
        let n = entry.spectrum().len();
        for &fraction in &ENERGY_FRACTIONS {
            let count = energy_ratio(entry.spectrum(), fraction)?;
            rows.push(EnergyRow { layer, n, fraction, count, ratio: count as f64 / n as f64 });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::source::{equicorrelated, SyntheticSource};

    fn point(mse: f64, rate: f64) -> RateDistortionPoint {
        RateDistortionPoint { layer: 0, step: 0.0, entropy_bits: rate, huffman_bits: rate, header_bits: 0.0, mse, output_mse: None }
    }

    #[test]
    fn interpolates_in_log_mse() {
        let pts = [point(1.0, 2.0), point(0.25, 3.0)];
        assert_eq!(rate_at_mse(&pts, 0.5, huffman_rate), Some(2.5));
        assert_eq!(rate_at_mse(&pts, 1.0, huffman_rate), Some(2.0));
        assert_eq!(rate_at_mse(&pts, 2.0, huffman_rate), None);
    }

    #[test]
    fn mse_falls_as_step_shrinks() {
        let src = SyntheticSource::zero_mean(equicorrelated(8, 0.8), 8, 1).unwrap();
        let batch = vec![src.generate_tensor(32, 32, 8, BlockShape::pixel(8)).unwrap()];
        let config = LayerCodecConfig::new(BlockShape::pixel(8), StepRule::Step(1.0));
        let steps: Vec<_> = [0.8, 0.4, 0.2, 0.1].iter().map(|&s| StepRule::Step(s)).collect();
        let pts = rd_sweep(&[batch], &[config], &steps, SweepOptions::default()).unwrap();
        assert_eq!(pts.len(), 4);
        for w in pts.windows(2) {
            assert!(w[1].mse <= w[0].mse);
            assert!(w[1].huffman_bits >= w[0].huffman_bits);
        }
        for p in &pts {
            assert!(p.entropy_bits <= p.huffman_bits && p.huffman_bits < p.entropy_bits + 1.0, "{p:?}");
        }
    }
}
