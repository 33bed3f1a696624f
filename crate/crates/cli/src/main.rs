//! `actcodec` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actcodec::codec::{self, decode_layer, decode_layer_raw, encode_layer, measured_rate, CalibrationProfile, CodecError, CompressedActivation, ErrorClass, LayerCodecConfig, StepRule, TransformKind};
use actcodec::harness::chain::{calibrate_chain, calibrate_chain_clean, mse, Chain, LayerChainSpec};
use actcodec::harness::report::{self, ReportFormat};
use actcodec::harness::source::{equicorrelated, identity_cov, sub_seed, SyntheticSource};
use actcodec::harness::sweep::{chain_sweep, energy_ratio_report, rd_sweep, RateColumn, RateDistortionPoint, SweepOptions};
use actcodec::harness::HarnessError;
use actcodec::io::write_atomic;
use actcodec::tensor::{load_tensor, save_tensor, BlockShape, TensorError};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "actcodec", version, about = "Transform-domain activation compression")]
struct Cli {
    /// Seed for synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn per-layer transforms, steps and codebooks.
    Calibrate(CalibrateArgs),
    /// Compress one layer activation (ATCT) into a stream (ATCS).
    Encode(EncodeArgs),
    /// Decompress a stream back into a tensor.
    Decode(DecodeArgs),
    /// Rate–distortion sweep over a step grid.
    Sweep(SweepArgs),
    /// Eigenvalue energy-ratio table of a profile.
    AnalyzeEigen(EigenArgs),
    /// Print or convert a sweep report.
    Report(ReportArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Layer chain spec (JSON).
    #[arg(long, conflicts_with_all = ["config", "tensors"])]
    spec: Option<PathBuf>,
    /// Chain input tensors; synthetic N(0, 1) inputs when absent.
    #[arg(long, num_args = 1.., requires = "spec")]
    inputs: Vec<PathBuf>,
    /// Number of synthetic chain inputs.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Calibrate every layer on the uncompressed forward pass.
    #[arg(long, requires = "spec")]
    clean: bool,
    /// Single-layer codec config (JSON), calibrated directly on --tensors.
    #[arg(long, requires = "tensors")]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1.., requires = "config")]
    tensors: Vec<PathBuf>,
    /// Profile to write.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Skip the decoder-side ReLU.
    #[arg(long)]
    raw: bool,
    /// Original tensor; prints the reconstruction MSE.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep grid (JSON).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// csv or json; by default from the output extension.
    #[arg(long)]
    format: Option<String>,
    /// Identity transform instead of the KLT.
    #[arg(long)]
    no_klt: bool,
    /// Quantization plus VLC without a transform; same arm as --no-klt.
    #[arg(long)]
    vlc_only: bool,
    /// Report fixed-width code lengths instead of Huffman payload.
    #[arg(long, conflicts_with = "theoretical_only")]
    fixed_width: bool,
    /// Report symbol entropy in place of Huffman payload.
    #[arg(long)]
    theoretical_only: bool,
    /// Keep only the leading t coefficients.
    #[arg(long)]
    truncate: Option<usize>,
}

#[derive(Args)]
struct EigenArgs {
    #[arg(long)]
    profile: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Converted copy of the report.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum SourceSpec {
    Identity { n: usize },
    Equicorrelated { n: usize, rho: f64 },
    Covariance { n: usize, matrix: Vec<f64>, #[serde(default)] mean: Option<Vec<f64>> },
}

impl SourceSpec {
    fn build(&self, seed: u64) -> Result<SyntheticSource, HarnessError> {
        match self {
            Self::Identity { n } => SyntheticSource::zero_mean(identity_cov(*n), *n, seed),
            Self::Equicorrelated { n, rho } => SyntheticSource::zero_mean(equicorrelated(*n, *rho), *n, seed),
            Self::Covariance { n, matrix, mean } => {
                SyntheticSource::new(mean.clone().unwrap_or_else(|| vec![0.0; *n]), matrix.clone(), seed)
            }
        }
    }
}

fn default_dim() -> usize {
    32
}

fn default_one() -> usize {
    1
}

fn default_calibration() -> usize {
    4
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepGrid {
    #[serde(default)]
    steps: Vec<f64>,
    #[serde(default)]
    rates: Vec<f64>,
    #[serde(default)]
    source: Option<SourceSpec>,
    #[serde(default)]
    chain: Option<LayerChainSpec>,
    /// Tensor files swept as a single layer.
    #[serde(default)]
    inputs: Vec<PathBuf>,
    #[serde(default)]
    block: Option<BlockShape>,
    #[serde(default)]
    clip_multiplier: Option<f64>,
    #[serde(default = "default_dim")]
    height: usize,
    #[serde(default = "default_dim")]
    width: usize,
    #[serde(default)]
    channels: Option<usize>,
    #[serde(default = "default_one")]
    tensors: usize,
    #[serde(default = "default_calibration")]
    calibration: usize,
    #[serde(default = "default_one")]
    test: usize,
}

impl SweepGrid {
    fn step_rules(&self) -> Result<Vec<StepRule>> {
        let rules: Vec<StepRule> = self
            .steps
            .iter()
            .map(|&s| StepRule::Step(s))
            .chain(self.rates.iter().map(|&r| StepRule::Rate(r)))
            .collect();
        if rules.is_empty() {
            bail!(invalid("grid needs at least one entry in \"steps\" or \"rates\""));
        }
        Ok(rules)
    }
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Spec(msg.into())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| anyhow!(invalid(format!("{}: {e}", path.display()))))
}

fn load_profile(path: &Path) -> Result<CalibrationProfile> {
    let bytes = read(path)?;
    Ok(CalibrationProfile::from_json(&bytes).with_context(|| format!("parsing profile {}", path.display()))?)
}

fn load(path: &Path) -> Result<actcodec::ActivationTensor> {
    load_tensor(path).with_context(|| format!("loading tensor {}", path.display()))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

fn calibrate(cli: &Cli, args: &CalibrateArgs) -> Result<()> {
    let profile = match (&args.spec, &args.config) {
        (Some(spec_path), None) => {
            let spec = LayerChainSpec::from_json(&read(spec_path)?)?;
            let chain = Chain::build(&spec, spec_path.parent())?;
            let inputs = if args.inputs.is_empty() {
                if args.batch == 0 {
                    bail!(invalid("--batch must be positive"));
                }
                spec.random_inputs(args.batch, cli.seed)
            } else {
                args.inputs.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?
            };
            if cli.verbose {
                eprintln!("calibrating {} layers on {} inputs", chain.layers.len(), inputs.len());
            }
            if args.clean {
                calibrate_chain_clean(&chain, &inputs)?
            } else {
                calibrate_chain(&chain, &inputs)?
            }
        }
        (None, Some(config_path)) => {
            let config: LayerCodecConfig = parse_json(config_path)?;
            let batch = args.tensors.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            let model = config_path.file_stem().map_or("layer".into(), |s| s.to_string_lossy().into_owned());
            codec::calibrate(&[batch], &[config], &model)?
        }
        _ => bail!(invalid("calibrate needs either --spec or --config with --tensors")),
    };
    profile.save(&args.output)?;
    let layers: Vec<_> = profile
        .layers
        .iter()
        .enumerate()
        .map(|(i, e)| {
            json!({
                "layer": i,
                "block": e.block().to_string(),
                "keep": e.keep(),
                "step": e.quantizer.step(),
                "clip": e.quantizer.clip(),
                "spectrum_top5": e.spectrum().iter().take(5).collect::<Vec<_>>(),
            })
        })
        .collect();
    print_json(&json!({ "model": profile.model, "samples": profile.sample_count, "profile": args.output, "layers": layers }));
    Ok(())
}

fn encode(cli: &Cli, args: &EncodeArgs) -> Result<()> {
    let profile = load_profile(&args.profile)?;
    let entry = profile.layer(args.layer)?;
    let t = load(&args.input)?;
    let ca = encode_layer(&t, entry)?;
    write_atomic(&args.output, &ca.to_bytes()).with_context(|| format!("writing {}", args.output.display()))?;
    let summary = json!({
        "layer": args.layer,
        "values": ca.header.value_count(),
        "payload_bits": ca.payload_bits(),
        "header_bits": ca.header_bits(),
        "rate": measured_rate(&ca, false),
        "rate_with_header": measured_rate(&ca, true),
    });
    if cli.json {
        print_json(&summary);
    } else {
        println!(
            "layer {}: {} values, {} payload bits, {} header bits, {:.4} bits/value",
            args.layer,
            ca.header.value_count(),
            ca.payload_bits(),
            ca.header_bits(),
            measured_rate(&ca, false)
        );
    }
    Ok(())
}

fn decode(cli: &Cli, args: &DecodeArgs) -> Result<()> {
    let profile = load_profile(&args.profile)?;
    let entry = profile.layer(args.layer)?;
    let ca = CompressedActivation::from_bytes(&read(&args.input)?)?;
    let t = if args.raw { decode_layer_raw(&ca, entry)? } else { decode_layer(&ca, entry)? };
    let err = match &args.reference {
        Some(p) => {
            let r = load(p)?;
            if r.dims() != t.dims() {
                bail!(invalid(format!("reference dims {:?} differ from decoded {:?}", r.dims(), t.dims())));
            }
            Some(mse(&t, &r))
        }
        None => None,
    };
    save_tensor(&t, &args.output).with_context(|| format!("writing {}", args.output.display()))?;
    if cli.json {
        print_json(&json!({ "layer": args.layer, "dims": t.dims(), "mse": err }));
    } else {
        let (h, w, c) = t.dims();
        match err {
            Some(m) => println!("decoded {h}x{w}x{c}, mse {m:.6e}"),
            None => println!("decoded {h}x{w}x{c}"),
        }
    }
    Ok(())
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let grid: SweepGrid = parse_json(&args.grid)?;
    let steps = grid.step_rules()?;
    let format = match &args.format {
        Some(f) => f.parse()?,
        None => ReportFormat::for_path(&args.output),
    };
    let options = SweepOptions {
        transform: (args.no_klt || args.vlc_only).then_some(TransformKind::Identity),
        keep: args.truncate,
        rate: if args.theoretical_only {
            RateColumn::Theoretical
        } else if args.fixed_width {
            RateColumn::FixedWidth
        } else {
            RateColumn::Huffman
        },
    };
    let sources = [grid.source.is_some(), grid.chain.is_some(), !grid.inputs.is_empty()];
    if sources.iter().filter(|&&s| s).count() != 1 {
        bail!(invalid("grid needs exactly one of \"source\", \"chain\" or \"inputs\""));
    }
    let points = if let Some(spec) = &grid.chain {
        spec.validate()?;
        let chain = Chain::build(spec, args.grid.parent())?;
        let calibration = spec.random_inputs(grid.calibration, cli.seed);
        let test = spec.random_inputs(grid.test, sub_seed(cli.seed, 1 << 32));
        chain_sweep(&chain, &calibration, &test, &steps, options)?
    } else {
        let batch = match &grid.source {
            Some(src) => {
                let source = src.build(cli.seed)?;
                let n = source.dim();
                let block = grid.block.unwrap_or(BlockShape::pixel(n));
                let channels = grid.channels.unwrap_or(block.bc);
                (0..grid.tensors)
                    .map(|k| source.with_seed(sub_seed(cli.seed, k as u64)).generate_tensor(grid.height, grid.width, channels, block))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => grid.inputs.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?,
        };
        let first = batch.first().ok_or_else(|| invalid("no tensors to sweep"))?;
        let mut config = LayerCodecConfig::new(grid.block.unwrap_or(BlockShape::pixel(first.channels())), steps[0]);
        if let Some(c) = grid.clip_multiplier {
            config.clip_multiplier = c;
        }
        rd_sweep(&[batch], &[config], &steps, options)?
    };
    if cli.verbose {
        eprintln!("{} points", points.len());
    }
    report::emit_report(&points, format, &args.output)?;
    if cli.json {
        println!("{}", report::to_json(&points)?.trim_end());
    } else {
        print_table(&points);
    }
    Ok(())
}

fn print_table(points: &[RateDistortionPoint]) {
    println!("{:>5} {:>12} {:>10} {:>10} {:>10} {:>12} {:>12}", "layer", "step", "entropy", "huffman", "header", "mse", "output_mse");
    for p in points {
        let out = p.output_mse.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
        println!(
            "{:>5} {:>12.6} {:>10.4} {:>10.4} {:>10.4} {:>12.4e} {:>12}",
            p.layer, p.step, p.entropy_bits, p.huffman_bits, p.header_bits, p.mse, out
        );
    }
}

fn analyze_eigen(cli: &Cli, args: &EigenArgs) -> Result<()> {
    let profile = load_profile(&args.profile)?;
    let rows = energy_ratio_report(&profile)?;
    if cli.json {
        print_json(&serde_json::to_value(&rows)?);
    } else {
        println!("{:>5} {:>5} {:>8} {:>6} {:>8}", "layer", "n", "fraction", "count", "ratio");
        for r in &rows {
            println!("{:>5} {:>5} {:>8.2} {:>6} {:>8.4}", r.layer, r.n, r.fraction, r.count, r.ratio);
        }
    }
    Ok(())
}

fn report_cmd(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let points = report::load_report(&args.input).with_context(|| format!("reading report {}", args.input.display()))?;
    if let Some(out) = &args.output {
        let format = match &args.format {
            Some(f) => f.parse()?,
            None => ReportFormat::for_path(out),
        };
        report::emit_report(&points, format, out)?;
    }
    if cli.json {
        println!("{}", report::to_json(&points)?.trim_end());
    } else {
        print_table(&points);
    }
    Ok(())
}

fn class_of(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<HarnessError>() {
            return e.class();
        }
        if let Some(e) = cause.downcast_ref::<CodecError>() {
            return e.class();
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return if matches!(e, TensorError::Io(_)) { ErrorClass::Io } else { ErrorClass::Validation };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ErrorClass::Io;
        }
    }
    ErrorClass::Validation
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| anyhow!(invalid(e.to_string())))?;
    }
    match &cli.command {
        Command::Calibrate(a) => calibrate(cli, a),
        Command::Encode(a) => encode(cli, a),
        Command::Decode(a) => decode(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::AnalyzeEigen(a) => analyze_eigen(cli, a),
        Command::Report(a) => report_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(match class_of(&e) {
                ErrorClass::Io => 1,
                ErrorClass::Validation => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(text: &str) -> serde_json::Result<SweepGrid> {
        serde_json::from_str(text)
    }

    #[test]
    fn grid_defaults_and_rules() {
        let g = grid(r#"{"steps": [0.5], "rates": [4], "source": {"kind": "identity", "n": 4}}"#).unwrap();
        assert_eq!((g.height, g.width, g.tensors, g.calibration, g.test), (32, 32, 1, 4, 1));
        assert_eq!(g.step_rules().unwrap(), vec![StepRule::Step(0.5), StepRule::Rate(4.0)]);
        assert!(grid(r#"{"source": {"kind": "identity", "n": 4}}"#).unwrap().step_rules().is_err());
    }

    #[test]
    fn grid_rejects_unknown_fields() {
        assert!(grid(r#"{"steps": [1], "stpes": [2]}"#).is_err());
        assert!(grid(r#"{"steps": [1], "source": {"kind": "laplace", "n": 4}}"#).is_err());
    }

    #[test]
    fn covariance_source_builds() {
        let g = grid(r#"{"steps": [1], "source": {"kind": "covariance", "n": 2, "matrix": [1, 0.5, 0.5, 1]}}"#).unwrap();
        let s = g.source.unwrap().build(3).unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.mean(), &[0.0, 0.0]);
    }
}
