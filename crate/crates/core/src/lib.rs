//! Transform-domain compression of multi-channel activation tensors.
//!
//! The encode chain partitions a tensor into blocks, decorrelates each
//! block with a Karhunen–Loève transform, quantizes the coefficients with a
//! single uniform step and entropy-codes them with canonical Huffman codes.
//! [`stats`] and [`quant`] are generic over the scalar type ([`Real`]); the
//! codec and harness work in `f64` over `f32` tensors.

pub mod codec;
pub mod harness;
pub mod io;
pub mod nn;
pub mod quant;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod vlc;

pub use codec::{
    calibrate, calibrate_layer, decode_layer, decode_standalone, encode_layer, measured_rate, CalibrationProfile,
    CodecError, CompressedActivation, ErrorClass, LayerCodecConfig, ProfileEntry, StepRule,
};
pub use harness::HarnessError;
pub use scalar::Real;
pub use tensor::{load_tensor, partition, reassemble, save_tensor, ActivationTensor, BlockSequence, BlockShape};
pub use vlc::{BitStream, HuffmanCodebook, SymbolHistogram};

pub type Covariance = stats::CovarianceModel<f64>;
pub type Covariance32 = stats::CovarianceModel<f32>;
pub type Eigen = stats::EigenDecomposition<f64>;
pub type Eigen32 = stats::EigenDecomposition<f32>;
pub type Klt = stats::KLTransform<f64>;
pub type Klt32 = stats::KLTransform<f32>;
pub type Quantizer = quant::QuantizerSpec<f64>;
pub type Quantizer32 = quant::QuantizerSpec<f32>;
pub type Allocation = quant::RateAllocation<f64>;
