//! Dual-polarization coherent fiber link simulation and end-to-end
//! autoencoder learning over a regular-perturbation channel model.

pub mod autoencoder;
pub mod autograd;
pub mod dsp;
pub mod error;
pub mod fft;
pub mod pipeline;
pub mod rp;
pub mod signal;
pub mod ssfm;

pub use error::{Error, Result};
pub use signal::{DualPolWaveform, LinkConfig, PulseConfig, SymbolFrame, C64};
