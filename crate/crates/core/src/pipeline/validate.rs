//! Side-by-side comparison of the RP model with the SSFM reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Constellation, ORDER};
use crate::dsp::{cdc, demodulate, estimate_snr, modulate, sdr, set_launch_power};
use crate::error::{Error, Result};
use crate::rp::{rp_propagate, RpModelConfig};
use crate::signal::{DualPolWaveform, LinkConfig, PulseConfig, SymbolFrame, C64, DEFAULT_BAUD};
use crate::ssfm::{ssfm_propagate, SsfmOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub powers_dbm: Vec<f64>,
    /// Symbols per polarization.
    pub n_symbols: usize,
    pub seed: u64,
    /// `None` selects the reference staging of the link.
    pub rp: Option<RpModelConfig>,
    pub ssfm: SsfmOptions,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            powers_dbm: (0..=20).map(|i| -5.0 + 0.5 * i as f64).collect(),
            n_symbols: 1 << 14,
            seed: 4,
            rp: None,
            ssfm: SsfmOptions::default(),
        }
    }
}

/// One launch power of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub power_dbm: f64,
    /// SNR after CDC with ASE, SSFM and RP.
    pub snr_ssfm_db: f64,
    pub snr_rp_db: f64,
    /// SDR of the noiseless RP symbols against the noiseless SSFM symbols.
    pub sdr_db: f64,
    /// SDR after removing the least-squares complex gain between the two.
    pub sdr_aligned_db: f64,
    pub seed: u64,
}

/// 64QAM over both channel models at every power. The same message frame is
/// used at all powers; noise draws use per-power streams of `cfg.seed`.
pub fn validate_rp(link: &LinkConfig, pulse: &PulseConfig, cfg: &ValidateConfig) -> Result<Vec<ValidationRow>> {
    if cfg.powers_dbm.is_empty() {
        return Err(Error::config("validation needs at least one launch power"));
    }
    let rp = match &cfg.rp {
        Some(r) => r.clone(),
        None => RpModelConfig::reference(link)?,
    };
    rp.validate(link)?;
    let n = cfg.n_symbols;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let msgs: Vec<usize> = (0..2 * n).map(|_| rng.gen_range(0..ORDER)).collect();
    let frame = Constellation::qam64().encode(&msgs[..n], &msgs[n..], DEFAULT_BAUD)?;
    let shaped = modulate(&frame, pulse)?;
    let quiet = SsfmOptions {
        include_ase: false,
        ..cfg.ssfm
    };
    let rp_quiet = rp.clone().without_noise();

    cfg.powers_dbm
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let w = set_launch_power(&shaped, p)?;
            let receive = |out: &DualPolWaveform| demodulate(&cdc(out, link), pulse, DEFAULT_BAUD);
            let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
            noise.set_stream(1 + 2 * i as u64);
            let snr_ssfm_db = estimate_snr(&frame, &receive(&ssfm_propagate(&w, link, &cfg.ssfm, &mut noise)?)?)?;
            noise.set_stream(2 + 2 * i as u64);
            let snr_rp_db = estimate_snr(&frame, &receive(&rp_propagate(&w, &rp, link, &mut noise)?)?)?;
            let reference = receive(&ssfm_propagate(&w, link, &quiet, &mut noise)?)?;
            let model = receive(&rp_propagate(&w, &rp_quiet, link, &mut noise)?)?;
            Ok(ValidationRow {
                power_dbm: p,
                snr_ssfm_db,
                snr_rp_db,
                sdr_db: sdr(&as_waveform(&model)?, &as_waveform(&reference)?)?,
                sdr_aligned_db: aligned_sdr(&model, &reference)?,
                seed: cfg.seed,
            })
        })
        .collect()
}

fn as_waveform(f: &SymbolFrame) -> Result<DualPolWaveform> {
    DualPolWaveform::from_flat(&f.to_flat(), f.baud_rate)
}

/// SDR of `a·model` against `reference` with the complex scalar `a` chosen by
/// least squares.
pub fn aligned_sdr(model: &SymbolFrame, reference: &SymbolFrame) -> Result<f64> {
    let m = model.to_flat();
    let r = reference.to_flat();
    let mm: f64 = m.iter().map(|v| v.norm_sqr()).sum();
    if !(mm > 0.0) {
        return Err(Error::input("aligned sdr: model has zero energy"));
    }
    let a = m.iter().zip(&r).map(|(x, y)| x.conj() * y).sum::<C64>() / mm;
    let scaled: Vec<C64> = m.iter().map(|x| a * x).collect();
    sdr(
        &DualPolWaveform::from_flat(&scaled, model.baud_rate)?,
        &as_waveform(reference)?,
    )
}
