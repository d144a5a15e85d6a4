//! Underwater image enhancement by frequency-domain degradation decoupling
//! and dual color encoding.
pub mod checkpoint;
pub mod dce;
pub mod fourier;
pub mod fsnet;
pub mod fusion;
pub mod imageio;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;
