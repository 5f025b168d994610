//! Pulse shaping, dispersion, power control and link-quality metrics.
//!
//! All filtering is circular over the frame so that FFT-domain dispersion is
//! exact and frames carry no boundary transients.

use crate::error::{Error, Result};
use crate::fft;
use crate::signal::{dbm_to_watt, DualPolWaveform, LinkConfig, PulseConfig, SymbolFrame, C64};

/// Upper bound reported by [`estimate_snr`] and [`sdr`] for error-free inputs.
pub const METRIC_CAP_DB: f64 = 100.0;

/// Root-raised-cosine taps of length `filter_span * sps + 1`, unit energy.
pub fn rrc_taps(cfg: &PulseConfig, baud: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(baud > 0.0) {
        return Err(Error::config("baud must be positive"));
    }
    let beta = cfg.rolloff;
    let len = cfg.filter_span * cfg.sps + 1;
    let center = (len - 1) as f64 / 2.0;
    let pi = std::f64::consts::PI;
    let mut taps: Vec<f64> = (0..len)
        .map(|k| {
            // time in symbol periods
            let t = (k as f64 - center) / cfg.sps as f64;
            if t.abs() < 1e-12 {
                1.0 - beta + 4.0 * beta / pi
            } else if ((4.0 * beta * t).abs() - 1.0).abs() < 1e-9 {
                beta / 2f64.sqrt()
                    * ((1.0 + 2.0 / pi) * (pi / (4.0 * beta)).sin()
                        + (1.0 - 2.0 / pi) * (pi / (4.0 * beta)).cos())
            } else {
                ((pi * t * (1.0 - beta)).sin() + 4.0 * beta * t * (pi * t * (1.0 + beta)).cos())
                    / (pi * t * (1.0 - (4.0 * beta * t).powi(2)))
            }
        })
        .collect();
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    for t in &mut taps {
        *t /= norm;
    }
    Ok(taps)
}

/// Multiplies the spectrum of each row by `response` in place.
pub fn filter_rows(buf: &mut [C64], response: &[C64]) {
    let n = response.len();
    for row in buf.chunks_exact_mut(n) {
        fft::forward(row);
        for (v, h) in row.iter_mut().zip(response) {
            *v *= h;
        }
        fft::inverse(row);
    }
}

/// Root-raised-cosine frequency response sampled on the `n`-point DFT grid,
/// scaled so that the equivalent periodic pulse has unit energy.
///
/// This is the response of the untruncated pulse wrapped circularly onto the
/// frame, so a matched pair is exactly Nyquist over circular frames.
pub fn rrc_spectrum(cfg: &PulseConfig, n: usize) -> Vec<C64> {
    let beta = cfg.rolloff;
    let sps = cfg.sps as f64;
    (0..n)
        .map(|k| {
            let signed = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            // frequency in units of the symbol rate
            let f = (signed * sps / n as f64).abs();
            let lo = 0.5 * (1.0 - beta);
            let hi = 0.5 * (1.0 + beta);
            let rc = if f <= lo {
                1.0
            } else if f >= hi {
                0.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI / beta * (f - lo)).cos())
            };
            C64::new((sps * rc).sqrt(), 0.0)
        })
        .collect()
}

/// Pulse-shaping filter state for a given frame length, reused across calls.
#[derive(Debug, Clone)]
pub struct PulseShaper {
    pub cfg: PulseConfig,
    pub baud: f64,
    spectrum: Vec<C64>,
}

impl PulseShaper {
    pub fn new(cfg: PulseConfig, baud: f64, n_symbols: usize) -> Result<Self> {
        cfg.validate()?;
        if !(baud > 0.0) {
            return Err(Error::config("baud must be positive"));
        }
        if n_symbols == 0 {
            return Err(Error::input("empty symbol frame"));
        }
        Ok(Self {
            cfg,
            baud,
            spectrum: rrc_spectrum(&cfg, n_symbols * cfg.sps),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.spectrum.len()
    }

    pub fn spectrum(&self) -> &[C64] {
        &self.spectrum
    }

    pub fn sample_rate(&self) -> f64 {
        self.baud * self.cfg.sps as f64
    }

    /// Zero-stuffs by `sps` with gain sqrt(sps) so that the shaped waveform
    /// keeps the symbol power, then filters. Operates on `[rows, n_sym]`.
    pub fn modulate_rows(&self, syms: &[C64]) -> Vec<C64> {
        let sps = self.cfg.sps;
        let gain = (sps as f64).sqrt();
        let mut out = vec![C64::new(0.0, 0.0); syms.len() * sps];
        for (i, s) in syms.iter().enumerate() {
            out[i * sps] = s * gain;
        }
        filter_rows(&mut out, &self.spectrum);
        out
    }

    /// Matched filter then decimation at symbol centers.
    pub fn demodulate_rows(&self, samples: &[C64]) -> Vec<C64> {
        let sps = self.cfg.sps;
        let gain = 1.0 / (sps as f64).sqrt();
        let mut buf = samples.to_vec();
        filter_rows(&mut buf, &self.spectrum);
        buf.iter().step_by(sps).map(|s| s * gain).collect()
    }
}

pub fn modulate(frame: &SymbolFrame, cfg: &PulseConfig) -> Result<DualPolWaveform> {
    if frame.is_empty() {
        return Err(Error::input("empty symbol frame"));
    }
    let shaper = PulseShaper::new(*cfg, frame.baud_rate, frame.len())?;
    let flat = shaper.modulate_rows(&frame.to_flat());
    DualPolWaveform::from_flat(&flat, shaper.sample_rate())
}

pub fn demodulate(w: &DualPolWaveform, cfg: &PulseConfig, baud: f64) -> Result<SymbolFrame> {
    cfg.validate()?;
    let ratio = w.sample_rate / baud;
    if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() as usize != cfg.sps {
        return Err(Error::input(format!(
            "sample rate {} Hz is not {} × baud {} Hz",
            w.sample_rate, cfg.sps, baud
        )));
    }
    if w.len() % cfg.sps != 0 {
        return Err(Error::input("waveform length is not a whole number of symbols"));
    }
    let shaper = PulseShaper::new(*cfg, baud, w.len() / cfg.sps)?;
    let flat = shaper.demodulate_rows(&w.to_flat());
    SymbolFrame::from_flat(&flat, baud)
}

/// D_z: all-pass chromatic dispersion over `z_km` (negative z inverts).
pub fn dispersion_op(w: &DualPolWaveform, beta2_ps2_km: f64, z_km: f64) -> DualPolWaveform {
    let omega = fft::angular_frequencies(w.len(), w.sample_rate);
    let response = fft::dispersion_response(&omega, beta2_ps2_km, z_km);
    let mut flat = w.to_flat();
    filter_rows(&mut flat, &response);
    DualPolWaveform::from_flat(&flat, w.sample_rate).expect("shape preserved")
}

/// Chromatic dispersion compensation for the whole link.
pub fn cdc(w: &DualPolWaveform, link: &LinkConfig) -> DualPolWaveform {
    dispersion_op(w, link.beta2_ps2_km, -link.length_km())
}

/// Rescales so that the total (dual-pol) mean power is `p_dbm`.
pub fn set_launch_power(w: &DualPolWaveform, p_dbm: f64) -> Result<DualPolWaveform> {
    let p = w.mean_power();
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::input("cannot set launch power of a zero-power waveform"));
    }
    Ok(w.scaled((dbm_to_watt(p_dbm) / p).sqrt()))
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

/// Per-polarization SNR after least-squares complex scaling, in linear units.
pub fn snr_per_pol(tx: &SymbolFrame, rx: &SymbolFrame) -> Result<[f64; 2]> {
    if tx.len() != rx.len() || tx.is_empty() {
        return Err(Error::input("tx and rx frames must be non-empty and equal length"));
    }
    let mut out = [0.0; 2];
    for (p, (t, r)) in tx.pols().iter().zip(rx.pols()).enumerate() {
        let tt = inner(t, t).re;
        if !(tt > 0.0) {
            return Err(Error::input("transmitted frame has zero power"));
        }
        let a = inner(r, t) / tt;
        let err: f64 = r.iter().zip(t.iter()).map(|(y, x)| (y - a * x).norm_sqr()).sum();
        out[p] = if err == 0.0 { f64::INFINITY } else { a.norm_sqr() * tt / err };
    }
    Ok(out)
}

/// Two-polarization average SNR (linear mean, reported in dB, capped).
pub fn estimate_snr(tx: &SymbolFrame, rx: &SymbolFrame) -> Result<f64> {
    let [h, v] = snr_per_pol(tx, rx)?;
    Ok(to_capped_db(0.5 * (h + v)))
}

fn to_capped_db(ratio: f64) -> f64 {
    if ratio.is_infinite() {
        METRIC_CAP_DB
    } else {
        (10.0 * ratio.log10()).min(METRIC_CAP_DB)
    }
}

/// Signal-to-distortion ratio −20·log10(‖model − ref‖ / ‖ref‖) over both
/// polarizations.
pub fn sdr(model: &DualPolWaveform, reference: &DualPolWaveform) -> Result<f64> {
    if model.len() != reference.len() {
        return Err(Error::input("sdr inputs differ in length"));
    }
    let ref_energy = reference.energy();
    if !(ref_energy > 0.0) {
        return Err(Error::input("sdr reference has zero energy"));
    }
    let err: f64 = model
        .pols()
        .iter()
        .zip(reference.pols())
        .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()))
        .sum();
    if err == 0.0 {
        return Ok(METRIC_CAP_DB);
    }
    Ok(to_capped_db(ref_energy / err))
}
