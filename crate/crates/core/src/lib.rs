//! ibvc-core: an interpolation-driven B-frame video codec.
//!
//! B frames are predicted by bi-directional frame interpolation (no motion
//! bits), and only a masked contextual difference between the source and the
//! interpolation is transmitted, through a small learned transform coder with
//! a hyperprior entropy model and a byte-exact range coder.
//!
//! The crate is organized bottom-up:
//!
//! * [`scalar`], [`tensor`], [`ops`], [`autograd`], [`nn`]: a deterministic
//!   CPU tensor core. Inference is bit-exact across machines because every
//!   reduction runs in a fixed scalar order and every transcendental comes
//!   from [`scalar`]'s own implementations, not libm.
//! * [`entropy`]: range coder, CDF quantization, Gaussian likelihood model.
//! * [`video_io`]: YUV420/YUV444/PNG-directory frame io, BT.709 conversion.
//! * [`vfi`]: the bi-directional interpolator (flow pyramid + occlusion fuse).
//! * [`arcodec`]: the conditional B-frame coder (masked-difference encoder,
//!   hyperprior, grid-fusion decoder with channel attention).
//! * [`pipeline`]: GoP planning, bitstream format, sequence encode/decode.
//! * [`train`]: synthetic corpus, rate-distortion loss, training loops.
//! * [`metrics`]: PSNR, MS-SSIM, BD-rate, report emission.

pub mod arcodec;
pub mod autograd;
pub mod ckpt;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vfi;
pub mod video_io;

pub use error::{Error, Result};
