//! One test per acceptance criterion. Each prints a `PASS`/`FAIL` line with
//! the measured quantities before asserting.

use std::time::Instant;

use actcodec::codec::{calibrate_layer, encode_layer, fold, CalibrationProfile, LayerCodecConfig, StepRule, TransformKind};
use actcodec::harness::chain::{calibrate_chain, Chain, InputDims, LayerChainSpec, LayerSpec};
use actcodec::harness::source::{equicorrelated, identity_cov, random_orthogonal, random_psd, with_spectrum, GaussianRng, SyntheticSource};
use actcodec::harness::sweep::{block_shape_study, huffman_rate, measure_layer, rate_at_mse, rd_sweep, RateColumn, RateDistortionPoint, SweepOptions};
use actcodec::nn::{conv2d, BatchNorm, ConvWeights};
use actcodec::quant::{allocate_rates, step_for_rate_exact, step_for_rate_approx, AllocationMode, QuantizerSpec};
use actcodec::stats::{energy_ratio, make_klt, CovarianceModel, KLTransform};
use actcodec::tensor::{ActivationTensor, BlockShape};
use actcodec::vlc::{average_rate, build_codebook, build_codebook_with_escape, decode, encode, entropy, HuffmanCodebook, SymbolHistogram};

const HUFFMAN_TRIALS: usize = 1000;
const FUZZ_SEQUENCES: usize = 10_000;
const KLT_TRIALS: usize = 100;
const KLT_OFFDIAG_TOL: f64 = 1e-8;
const KLT_ORTHO_TOL: f64 = 1e-10;
const LAW_SAMPLES: usize = 1_000_000;
const LAW_MSE_REL: f64 = 0.05;
const LAW_ENTROPY_TOL: f64 = 0.05;
const STEP_LAW_REL: f64 = 0.05;
const ALLOC_TRIALS: usize = 100;
const ALLOC_TOL: f64 = 1e-4;
const GAIN_TOL: f64 = 0.1;
const IID_GAP_TOL: f64 = 0.05;
const FOLD_TRIALS: usize = 100;
const FOLD_REL: f64 = 1e-4;
const ABLATION_SAVING: f64 = 0.30;
const TRUNCATION_MSE_FACTOR: f64 = 2.0;
const TRUNCATION_PAYLOAD_SAVING: f64 = 0.5;

fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    println!("[{}] criterion {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn steps(from: f64, to: f64, count: usize) -> Vec<StepRule> {
    (0..count)
        .map(|i| StepRule::Step(from * (to / from).powf(i as f64 / (count - 1) as f64)))
        .collect()
}

fn pixel_batch(source: &SyntheticSource, side: usize, count: usize) -> Vec<ActivationTensor> {
    let n = source.dim();
    (0..count)
        .map(|k| source.with_seed(source.seed() ^ k as u64).generate_tensor(side, side, n, BlockShape::pixel(n)).unwrap())
        .collect()
}

fn sweep(batch: &[ActivationTensor], config: &LayerCodecConfig, grid: &[StepRule], options: SweepOptions) -> Vec<RateDistortionPoint> {
    rd_sweep(&[batch.to_vec()], &[config.clone()], grid, options).unwrap()
}

#[test]
fn c01_huffman_bound() {
    let start = Instant::now();
    let mut rng = GaussianRng::new(101);
    let mut worst_low = f64::INFINITY;
    let mut worst_high = f64::NEG_INFINITY;
    let mut ok = true;
    for _ in 0..HUFFMAN_TRIALS {
        let alphabet = 1 + (rng.next_u64() % 256) as usize;
        let max_count = 1 + rng.next_u64() % 100_000;
        let mut counts: Vec<u64> = (0..alphabet).map(|_| rng.next_u64() % (max_count + 1)).collect();
        if counts.iter().all(|&c| c == 0) {
            counts[0] = 1;
        }
        let h = SymbolHistogram::from_counts(-(alphabet as i32) / 2, counts).unwrap();
        let cb = build_codebook(&h).unwrap();
        let (r, e) = (average_rate(&cb, &h).unwrap(), entropy(&h));
        worst_low = worst_low.min(r - e);
        worst_high = worst_high.max(r - e);
        ok &= r >= e - 1e-12 && r < e + 1.0;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(1, "Huffman bound", ok && secs < 10.0, format!("R−H in [{worst_low:.4}, {worst_high:.4}] over {HUFFMAN_TRIALS} trials, {secs:.2}s"));
}

#[test]
fn c02_lossless_vlc() {
    let start = Instant::now();
    let mut rng = GaussianRng::new(202);
    let (mut singles, mut escapes, mut ok) = (0, 0, true);
    for trial in 0..FUZZ_SEQUENCES {
        let alphabet = 1 + (rng.next_u64() % 40) as usize;
        let min = (rng.next_u64() % 200) as i32 - 100;
        let counts: Vec<u64> = (0..alphabet).map(|i| if i == 0 { 1 + rng.next_u64() % 50 } else { rng.next_u64() % 50 }).collect();
        let h = SymbolHistogram::from_counts(min, counts).unwrap();
        let present: Vec<i32> = h.iter().map(|(s, _)| s).collect();
        let with_escape = trial % 2 == 1;
        let cb: HuffmanCodebook = if with_escape { build_codebook_with_escape(&h).unwrap() } else { build_codebook(&h).unwrap() };
        singles += cb.is_single() as usize;
        let len = (rng.next_u64() % 200) as usize;
        let symbols: Vec<i32> = (0..len)
            .map(|_| {
                if with_escape && rng.next_u64() % 8 == 0 {
                    escapes += 1;
                    (rng.next_u64() as u32) as i32
                } else {
                    present[(rng.next_u64() % present.len() as u64) as usize]
                }
            })
            .collect();
        let stream = encode(&symbols, &cb).unwrap();
        ok &= decode(&stream, &cb, symbols.len()).unwrap() == symbols;
        let bits: u64 = symbols.iter().map(|&s| cb.cost(s).unwrap()).sum();
        ok &= stream.bit_len() == bits;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "lossless VLC",
        ok && singles > 0 && escapes > 0 && secs < 30.0,
        format!("{FUZZ_SEQUENCES} sequences, {singles} single-symbol codebooks, {escapes} escaped symbols, {secs:.2}s"),
    );
}

#[test]
fn c03_klt_correctness() {
    let mut rng = GaussianRng::new(303);
    let (mut worst_off, mut worst_ortho) = (0.0f64, 0.0f64);
    for trial in 0..KLT_TRIALS {
        let n = [2, 8, 64][trial % 3];
        let cov = random_psd(n, &mut rng);
        let model = CovarianceModel::<f64>::from_covariance(vec![0.0; n], cov.clone(), 1000).unwrap();
        let klt = make_klt(&model).unwrap();
        let d = klt.conjugate(&cov);
        let trace: f64 = (0..n).map(|i| cov[i * n + i]).sum();
        let off = (0..n * n).filter(|k| k / n != k % n).map(|k| d[k].abs()).fold(0.0, f64::max);
        worst_off = worst_off.max(off / trace);
        worst_ortho = worst_ortho.max(klt.orthonormality_error());
    }
    verdict(
        3,
        "KLT correctness",
        worst_off <= KLT_OFFDIAG_TOL && worst_ortho <= KLT_ORTHO_TOL,
        format!("max off-diagonal/trace {worst_off:.2e}, max |TTᵀ−I| {worst_ortho:.2e}"),
    );
}

#[test]
fn c04_high_rate_distortion_law() {
    let start = Instant::now();
    let source = SyntheticSource::zero_mean(identity_cov(1), 1, 404).unwrap();
    let x = source.generate(LAW_SAMPLES);
    let step = step_for_rate_exact(4.0, 1.0).unwrap();
    let q = QuantizerSpec::new(step, 10.0).unwrap();
    let k: Vec<i32> = x.iter().map(|&v| q.index(v)).collect();
    let mse = x.iter().zip(&k).map(|(&v, &i)| (v - q.level(i)).powi(2)).sum::<f64>() / x.len() as f64;
    let h = entropy(&SymbolHistogram::from_symbols(&k).unwrap());
    let predicted = std::f64::consts::PI * std::f64::consts::E / 6.0 * 2f64.powi(-8);
    let rel = (mse - predicted).abs() / predicted;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "high-rate distortion law",
        rel <= LAW_MSE_REL && (h - 4.0).abs() <= LAW_ENTROPY_TOL && secs < 10.0,
        format!("MSE {mse:.6} vs {predicted:.6} ({:.2}%), entropy {h:.4} bits, {secs:.2}s", 100.0 * rel),
    );
}

#[test]
fn c05_step_rate_constant() {
    let mut worst = 0.0f64;
    let mut cells = Vec::new();
    for r in 2..=6 {
        let exact = step_for_rate_exact(r as f64, 1.0).unwrap();
        let approx = step_for_rate_approx(r as f64);
        let rel = (exact - approx).abs() / approx;
        worst = worst.max(rel);
        cells.push(format!("R={r}: {exact:.4}/{approx:.4}"));
    }
    verdict(5, "Δ–R constant", worst <= STEP_LAW_REL, format!("{}; worst {:.2}%", cells.join(", "), 100.0 * worst));
}

/// Lagrange solution by bisection on the water level `θ`:
/// `Rᵢ = max(0, ½·log2(σᵢ²/θ))` with mean rate `target`.
fn lagrange_rates(variances: &[f64], target: f64) -> Vec<f64> {
    let rates = |theta: f64| -> Vec<f64> { variances.iter().map(|&v| if v > 0.0 { (0.5 * (v / theta).log2()).max(0.0) } else { 0.0 }).collect() };
    let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
    let (mut lo, mut hi) = (1e-300f64.ln(), variances.iter().fold(0.0f64, |m, &v| m.max(v)).ln());
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mean(&rates(mid.exp())) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    rates((0.5 * (lo + hi)).exp())
}

#[test]
fn c06_rate_allocation() {
    let mut rng = GaussianRng::new(606);
    let (mut worst_fill, mut worst_clamp, mut all_active) = (0.0f64, 0.0f64, 0);
    for trial in 0..ALLOC_TRIALS {
        let n = 2 + (rng.next_u64() % 30) as usize;
        let decades = if trial % 2 == 0 { 1.0 } else { 6.0 };
        let variances: Vec<f64> = (0..n).map(|_| 10f64.powf(decades * (rng.uniform() - 0.5))).collect();
        let target = 0.25 + 5.0 * rng.uniform();
        let fill = allocate_rates(&variances, target, AllocationMode::Waterfill).unwrap();
        let oracle = lagrange_rates(&variances, target);
        for (a, b) in fill.rates.iter().zip(&oracle) {
            worst_fill = worst_fill.max((a - b).abs());
        }
        let mean_log = variances.iter().map(|v| v.sqrt().log2()).sum::<f64>() / n as f64;
        let printed: Vec<f64> = variances.iter().map(|v| target + v.sqrt().log2() - mean_log).collect();
        if printed.iter().all(|&r| r > 0.0) {
            all_active += 1;
            let clamp = allocate_rates(&variances, target, AllocationMode::ClosedFormClamp).unwrap();
            for (a, b) in clamp.rates.iter().zip(&printed) {
                worst_clamp = worst_clamp.max((a - b).abs());
            }
        }
    }
    verdict(
        6,
        "rate allocation",
        worst_fill <= ALLOC_TOL && worst_clamp <= 1e-12 && all_active > 0,
        format!("waterfill vs Lagrange max {worst_fill:.2e} bits; closed-form clamp vs formula max {worst_clamp:.2e} on {all_active} all-active cases"),
    );
}

/// Rate gap between the identity transform and the KLT at the MSE an
/// ideal uniform quantizer reaches at 4 bits per unit-variance value.
fn klt_gap(cov: Vec<f64>, n: usize, seed: u64) -> (f64, f64, f64) {
    let source = SyntheticSource::zero_mean(cov, n, seed).unwrap();
    let batch = vec![source.generate_tensor(256, 256, n, BlockShape::pixel(n)).unwrap()];
    let grid = steps(0.45, 0.12, 10);
    let config = LayerCodecConfig::new(BlockShape::pixel(n), StepRule::Step(0.2));
    let on = sweep(&batch, &config, &grid, SweepOptions::default());
    let off = sweep(&batch, &config, &grid, SweepOptions { transform: Some(TransformKind::Identity), ..Default::default() });
    let target = step_for_rate_exact(4.0f64, 1.0).unwrap().powi(2) / 12.0;
    let r_on = rate_at_mse(&on, target, huffman_rate).unwrap();
    let r_off = rate_at_mse(&off, target, huffman_rate).unwrap();
    (r_off - r_on, r_on, r_off)
}

#[test]
fn c07_coding_gain() {
    let predicted = 0.25 * (1.0f64 / 0.19).log2();
    let (gap, on, off) = klt_gap(equicorrelated(2, 0.9), 2, 707);
    let (iid_gap, ..) = klt_gap(identity_cov(2), 2, 708);
    verdict(
        7,
        "coding gain",
        (gap - predicted).abs() <= GAIN_TOL && iid_gap.abs() <= IID_GAP_TOL,
        format!("ρ=0.9 gap {gap:.4} (KLT {on:.4}, none {off:.4}) vs {predicted:.4}; Σ=I gap {iid_gap:.4}"),
    );
}

#[test]
fn c08_fold_correctness() {
    let mut rng = GaussianRng::new(808);
    let mut worst = 0.0f64;
    for trial in 0..FOLD_TRIALS {
        let kernel = if trial % 2 == 0 { 1 } else { 3 };
        let (cin, c) = (3 + trial % 4, 8);
        let w: Vec<f64> = (0..c * cin * kernel * kernel).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let conv = ConvWeights::new(c, cin, kernel, 1 + trial % 2, w, b).unwrap();
        let bn = BatchNorm {
            gamma: (0..c).map(|_| 0.5 + rng.uniform()).collect(),
            beta: (0..c).map(|_| rng.normal()).collect(),
            mean: (0..c).map(|_| rng.normal()).collect(),
            std: (0..c).map(|_| 0.2 + rng.uniform()).collect(),
        };
        let mean: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let klt = KLTransform::from_parts(random_orthogonal(c, &mut rng), mean, vec![1.0; c]).unwrap();
        let data = (0..7 * 5 * cin).map(|_| rng.normal() as f32).collect();
        let x = ActivationTensor::new(7, 5, cin, data).unwrap();

        let folded = fold(&conv, &bn, &klt, BlockShape::pixel(c)).unwrap();
        let (_, _, fast) = conv2d(&x, &folded).unwrap();
        let (_, _, mut z) = conv2d(&x, &conv).unwrap();
        bn.apply(&mut z);
        let composed: Vec<f64> = z.chunks_exact(c).flat_map(|px| klt.forward(px).unwrap()).collect();
        let num = fast.iter().zip(&composed).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den = composed.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    verdict(8, "fold correctness", worst <= FOLD_REL, format!("max relative error {worst:.2e} over {FOLD_TRIALS} 1x1/3x3 layers"));
}

#[test]
fn c09_ablation_ordering() {
    let n = 64;
    let source = SyntheticSource::zero_mean(equicorrelated(n, 0.9), n, 909).unwrap();
    let batch = pixel_batch(&source, 64, 2);
    let base = LayerCodecConfig::new(BlockShape::pixel(n), StepRule::Step(0.03));
    let identity = SweepOptions { transform: Some(TransformKind::Identity), ..Default::default() };

    let plain = measure_layer(0, &batch, &LayerCodecConfig { step: StepRule::Bits(8), transform: TransformKind::Identity, ..base.clone() }, RateColumn::FixedWidth).unwrap();
    let floor = plain.step.powi(2) / 12.0;
    let target = floor.min(plain.mse);

    let grid = steps(0.05, 0.02, 8);
    let pca = sweep(&batch, &base, &grid, SweepOptions::default());
    let vlc = sweep(&batch, &base, &grid, identity);
    let r_pca = rate_at_mse(&pca, target, huffman_rate).unwrap();
    let r_vlc = rate_at_mse(&vlc, target, huffman_rate).unwrap();
    let r_plain = plain.huffman_bits;
    let saving = 1.0 - r_pca / r_plain;
    verdict(
        9,
        "ablation ordering",
        r_pca < r_vlc && r_vlc < r_plain && saving >= ABLATION_SAVING,
        format!(
            "at MSE {target:.3e}: PCA+VLC {r_pca:.3}, VLC-only {r_vlc:.3}, plain {r_plain:.0} bits/value (8-bit MSE {:.3e}); saving {:.1}%",
            plain.mse,
            100.0 * saving
        ),
    );
}

#[test]
fn c10_block_shape_trend() {
    let n = 64;
    let source = SyntheticSource::zero_mean(equicorrelated(n, 0.9), n, 1010).unwrap();
    let batch = pixel_batch(&source, 64, 2);
    let shapes = [BlockShape::pixel(64), BlockShape::new(4, 4, 4).unwrap(), BlockShape::new(8, 8, 1).unwrap()];
    let base = LayerCodecConfig::new(shapes[0], StepRule::Step(0.1));
    let grid = steps(0.3, 0.08, 8);
    let study = block_shape_study(&batch, &base, &shapes, &grid, SweepOptions::default()).unwrap();
    let target = 0.15f64.powi(2) / 12.0;
    let rates: Vec<f64> = study.iter().map(|(_, pts)| rate_at_mse(pts, target, huffman_rate).unwrap()).collect();
    verdict(
        10,
        "block shape trend",
        rates[0] < rates[1] && rates[0] < rates[2],
        format!("bits/value at MSE {target:.2e}: 1x1x64 {:.3}, 4x4x4 {:.3}, 8x8x1 {:.3}", rates[0], rates[1], rates[2]),
    );
}

#[test]
fn c11_truncation_tradeoff() {
    let n = 64;
    let keep = n / 4;
    let step: f64 = step_for_rate_exact(6.0, 1.0).unwrap();
    let tail = (0.4 * step).powi(2);
    let spectrum: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { tail }).collect();
    let mut rng = GaussianRng::new(1111);
    let cov = with_spectrum(&spectrum, &random_orthogonal(n, &mut rng));
    let source = SyntheticSource::zero_mean(cov, n, 1112).unwrap();
    let batch = pixel_batch(&source, 64, 2);
    let full_cfg = LayerCodecConfig::new(BlockShape::pixel(n), StepRule::Rate(6.0));
    let cut_cfg = LayerCodecConfig { keep: Some(keep), ..full_cfg.clone() };

    let entry = calibrate_layer(&batch, &full_cfg).unwrap();
    let top = energy_ratio(entry.spectrum(), 0.9).unwrap();
    let full = measure_layer(0, &batch, &full_cfg, RateColumn::Huffman).unwrap();
    let cut = measure_layer(0, &batch, &cut_cfg, RateColumn::Huffman).unwrap();
    let floor = full.step.powi(2) / 12.0;
    let saving = 1.0 - cut.huffman_bits / full.huffman_bits;
    verdict(
        11,
        "truncation tradeoff",
        top <= keep && cut.mse < TRUNCATION_MSE_FACTOR * floor && cut.mse - full.mse < TRUNCATION_MSE_FACTOR * floor && saving >= TRUNCATION_PAYLOAD_SAVING,
        format!(
            "90% energy in {top} of {n}; MSE t={keep} {:.3e} vs t={n} {:.3e}, floor Δ²/12 {floor:.3e}; payload {:.3} → {:.3} bits/value ({:.1}% saved)",
            cut.mse,
            full.mse,
            full.huffman_bits,
            cut.huffman_bits,
            100.0 * saving
        ),
    );
}

fn determinism_run(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    let codec = |c: usize| LayerCodecConfig::new(BlockShape::pixel(c), StepRule::Rate(4.0));
    let spec = LayerChainSpec {
        model: "det".into(),
        input: InputDims { height: 8, width: 8, channels: 3 },
        seed: 1212,
        layers: vec![
            LayerSpec { kernel: 3, in_channels: 3, out_channels: 16, stride: 1, bn: None, codec: codec(16), weights: None },
            LayerSpec { kernel: 1, in_channels: 16, out_channels: 8, stride: 1, bn: None, codec: codec(8), weights: None },
        ],
    };
    let chain = Chain::build(&spec, None).unwrap();
    let inputs = spec.random_inputs(3, 77);
    let profile = calibrate_chain(&chain, &inputs).unwrap();
    let profile_path = dir.join("profile.json");
    profile.save(&profile_path).unwrap();
    let loaded = CalibrationProfile::load(&profile_path).unwrap();
    let z = actcodec::harness::chain::pre_activation(&chain.layers[0], &inputs[0]).unwrap();
    let t = actcodec::nn::to_tensor(z.0, z.1, 16, &z.2).unwrap();
    let stream_path = dir.join("layer0.atcs");
    std::fs::write(&stream_path, encode_layer(&t, &loaded.layers[0]).unwrap().to_bytes()).unwrap();
    (std::fs::read(profile_path).unwrap(), std::fs::read(stream_path).unwrap())
}

#[test]
fn c12_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (p1, s1) = determinism_run(a.path());
    let (p2, s2) = determinism_run(b.path());
    verdict(
        12,
        "determinism",
        p1 == p2 && s1 == s2,
        format!("profile {} bytes identical: {}, stream {} bytes identical: {}", p1.len(), p1 == p2, s1.len(), s1 == s2),
    );
}
