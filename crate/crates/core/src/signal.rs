//! Signal containers and physical configuration shared across the crate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Symbol rate of the reference single-channel system (64 GBd).
pub const DEFAULT_BAUD: f64 = 64e9;

/// Dual-polarization complex baseband field in sqrt(W).
#[derive(Debug, Clone, PartialEq)]
pub struct DualPolWaveform {
    pub samples_h: Vec<C64>,
    pub samples_v: Vec<C64>,
    pub sample_rate: f64,
}

impl DualPolWaveform {
    pub fn new(samples_h: Vec<C64>, samples_v: Vec<C64>, sample_rate: f64) -> Result<Self> {
        if samples_h.len() != samples_v.len() {
            return Err(Error::input(format!(
                "polarization lengths differ ({} vs {})",
                samples_h.len(),
                samples_v.len()
            )));
        }
        if samples_h.is_empty() {
            return Err(Error::input("empty waveform"));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::input("sample rate must be positive"));
        }
        Ok(Self {
            samples_h,
            samples_v,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples_h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples_h.is_empty()
    }

    pub fn pols(&self) -> [&[C64]; 2] {
        [&self.samples_h, &self.samples_v]
    }

    pub fn pols_mut(&mut self) -> [&mut Vec<C64>; 2] {
        [&mut self.samples_h, &mut self.samples_v]
    }

    /// Sum of squared magnitudes over both polarizations.
    pub fn energy(&self) -> f64 {
        self.samples_h
            .iter()
            .chain(&self.samples_v)
            .map(|s| s.norm_sqr())
            .sum()
    }

    /// Total mean power: per-polarization mean powers added together.
    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    /// Row-major `[2, n]` layout (H row first).
    pub fn to_flat(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend_from_slice(&self.samples_h);
        out.extend_from_slice(&self.samples_v);
        out
    }

    pub fn from_flat(flat: &[C64], sample_rate: f64) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::input("flat dual-pol buffer has odd length"));
        }
        let n = flat.len() / 2;
        Self::new(flat[..n].to_vec(), flat[n..].to_vec(), sample_rate)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            samples_h: self.samples_h.iter().map(|s| s * factor).collect(),
            samples_v: self.samples_v.iter().map(|s| s * factor).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Dual-polarization symbol streams at one sample per symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub syms_h: Vec<C64>,
    pub syms_v: Vec<C64>,
    pub baud_rate: f64,
}

impl SymbolFrame {
    pub fn new(syms_h: Vec<C64>, syms_v: Vec<C64>, baud_rate: f64) -> Result<Self> {
        if syms_h.len() != syms_v.len() {
            return Err(Error::input(format!(
                "polarization lengths differ ({} vs {})",
                syms_h.len(),
                syms_v.len()
            )));
        }
        if !(baud_rate > 0.0) {
            return Err(Error::input("baud rate must be positive"));
        }
        Ok(Self {
            syms_h,
            syms_v,
            baud_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.syms_h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.syms_h.is_empty()
    }

    pub fn pols(&self) -> [&[C64]; 2] {
        [&self.syms_h, &self.syms_v]
    }

    /// Mean symbol power averaged over the two polarizations.
    pub fn mean_power(&self) -> f64 {
        let n = self.len().max(1) as f64;
        self.syms_h
            .iter()
            .chain(&self.syms_v)
            .map(|s| s.norm_sqr())
            .sum::<f64>()
            / (2.0 * n)
    }

    pub fn to_flat(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(2 * self.len());
        out.extend_from_slice(&self.syms_h);
        out.extend_from_slice(&self.syms_v);
        out
    }

    pub fn from_flat(flat: &[C64], baud_rate: f64) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::input("flat dual-pol buffer has odd length"));
        }
        let n = flat.len() / 2;
        Self::new(flat[..n].to_vec(), flat[n..].to_vec(), baud_rate)
    }
}

/// Physical parameters of a homogeneous multi-span link with lumped amplifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    /// Attenuation in dB/km.
    pub alpha_db_km: f64,
    /// Group velocity dispersion in ps²/km.
    pub beta2_ps2_km: f64,
    /// Kerr coefficient in 1/(W·km).
    pub gamma: f64,
    /// Span length in km.
    pub span_length_km: f64,
    pub n_spans: usize,
    /// Amplifier noise figure in dB.
    pub noise_figure_db: f64,
    /// Optical carrier frequency in Hz.
    pub carrier_freq_hz: f64,
}

impl Default for LinkConfig {
    /// 30 × 80 km standard single-mode fiber with 4 dB noise figure amplifiers.
    fn default() -> Self {
        Self {
            alpha_db_km: 0.21,
            beta2_ps2_km: -21.4,
            gamma: 1.14,
            span_length_km: 80.0,
            n_spans: 30,
            noise_figure_db: 4.0,
            carrier_freq_hz: 193.41e12,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_db_km >= 0.0) {
            return Err(Error::config("alpha must be >= 0"));
        }
        if !(self.span_length_km > 0.0) {
            return Err(Error::config("span length must be > 0"));
        }
        if self.n_spans < 1 {
            return Err(Error::config("n_spans must be >= 1"));
        }
        if !(self.carrier_freq_hz > 0.0) {
            return Err(Error::config("carrier frequency must be > 0"));
        }
        if !self.beta2_ps2_km.is_finite() || !self.gamma.is_finite() {
            return Err(Error::config("beta2 and gamma must be finite"));
        }
        Ok(())
    }

    /// Field power attenuation in 1/km.
    pub fn alpha_per_km(&self) -> f64 {
        self.alpha_db_km * std::f64::consts::LN_10 / 10.0
    }

    pub fn length_km(&self) -> f64 {
        self.span_length_km * self.n_spans as f64
    }

    /// Linear power gain restoring one span's loss.
    pub fn span_gain(&self) -> f64 {
        (self.alpha_per_km() * self.span_length_km).exp()
    }

    /// Power profile f(z) of a lumped-amplified link: exponential decay
    /// within a span, reset to 1 after each amplifier.
    pub fn power_profile(&self, z_km: f64) -> f64 {
        // branch positions computed as m·δ may land a rounding error short
        // of an amplifier
        let spans_passed = (z_km / self.span_length_km + 1e-9).floor();
        (-self.alpha_per_km() * (z_km - self.span_length_km * spans_passed)).exp()
    }
}

/// Effective length (1 − e^{−αδ})/α, with the α → 0 limit δ.
pub fn effective_length(alpha_per_km: f64, length_km: f64) -> f64 {
    if alpha_per_km.abs() < 1e-12 {
        length_km
    } else {
        -(-alpha_per_km * length_km).exp_m1() / alpha_per_km
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseConfig {
    pub rolloff: f64,
    /// Samples per symbol.
    pub sps: usize,
    /// Filter length in symbols; even.
    pub filter_span: usize,
}

impl Default for PulseConfig {
    fn default() -> Self {
        Self {
            rolloff: 0.1,
            sps: 2,
            filter_span: 64,
        }
    }
}

impl PulseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rolloff > 0.0 && self.rolloff <= 1.0) {
            return Err(Error::config(format!(
                "rolloff {} outside (0, 1]",
                self.rolloff
            )));
        }
        if self.sps < 2 {
            return Err(Error::config("sps must be >= 2"));
        }
        if self.filter_span == 0 || self.filter_span % 2 != 0 {
            return Err(Error::config("filter_span must be a positive even count"));
        }
        Ok(())
    }
}

pub fn dbm_to_watt(p_dbm: f64) -> f64 {
    10f64.powf((p_dbm - 30.0) / 10.0)
}

pub fn watt_to_dbm(p_w: f64) -> f64 {
    10.0 * p_w.log10() + 30.0
}
