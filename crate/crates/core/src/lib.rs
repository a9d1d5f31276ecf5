//! Compression of 3D Gaussian splat models by per-attribute vector
//! quantization with noise-substituted codebook training.
//!
//! The pipeline prunes low-opacity splats, trains four codebooks (scale,
//! rotation, colour, SH), stores only per-splat indices plus full-precision
//! positions and opacities, and decompresses to a standard 3DGS PLY.

pub mod codec;
pub mod compress;
pub mod linalg;
pub mod metrics;
pub mod ply;
pub mod render;
pub mod rng;
pub mod splat;
pub mod synth;
pub mod vq;

pub use codec::{decode, encode, size_report, CodecError, SizeReport};
pub use compress::{compress, dequantize, CompressError, CompressionConfig, Group, QuantizedCloud};
pub use metrics::{evaluate, psnr, EvalReport};
pub use ply::{load_ply, save_ply, PlyError};
pub use splat::{GaussianSplat, SplatCloud, SplatError};
pub use vq::{Codebook, VqError};
