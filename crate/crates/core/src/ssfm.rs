//! Split-step Fourier integration of the Manakov equation over a
//! lumped-amplified multi-span link.
//!
//! The field is propagated in the loss-normalized frame E = u·sqrt(f(z)):
//! attenuation enters through the f(z) weight of the Kerr term and the
//! ideal amplifier gain e^{αL_sp} is then exactly the identity on `u`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::signal::{effective_length, DualPolWaveform, LinkConfig, C64};

/// Planck constant in J·s.
pub const PLANCK: f64 = 6.626_070_15e-34;

/// Manakov polarization-averaging factor of the Kerr term.
pub const MANAKOV_FACTOR: f64 = 8.0 / 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitScheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsfmOptions {
    pub steps_per_span: usize,
    pub scheme: SplitScheme,
    pub include_ase: bool,
}

impl Default for SsfmOptions {
    fn default() -> Self {
        Self {
            steps_per_span: 200,
            scheme: SplitScheme::Symmetric,
            include_ase: true,
        }
    }
}

/// Ideal lumped amplifier restoring one span's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifierModel {
    /// Linear power gain.
    pub gain: f64,
    /// ASE power spectral density per polarization in W/Hz.
    pub ase_psd: f64,
}

impl AmplifierModel {
    pub fn from_link(link: &LinkConfig) -> Self {
        Self {
            gain: link.span_gain(),
            ase_psd: ase_psd(link),
        }
    }
}

/// σ²_ASE = (NF/2)·(G − 1)·h·ν per polarization, NF and G linear.
pub fn ase_psd(link: &LinkConfig) -> f64 {
    let nf = 10f64.powf(link.noise_figure_db / 10.0);
    0.5 * nf * (link.span_gain() - 1.0) * PLANCK * link.carrier_freq_hz
}

/// Adds circular complex Gaussian noise with total variance `variance`
/// per complex sample.
pub fn add_white_noise<R: Rng + ?Sized>(buf: &mut [C64], variance: f64, rng: &mut R) {
    if variance <= 0.0 {
        return;
    }
    let sigma = (0.5 * variance).sqrt();
    for v in buf.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += C64::new(sigma * re, sigma * im);
    }
}

pub fn ssfm_propagate<R: Rng + ?Sized>(
    w: &DualPolWaveform,
    link: &LinkConfig,
    opts: &SsfmOptions,
    rng: &mut R,
) -> Result<DualPolWaveform> {
    link.validate()?;
    if opts.steps_per_span < 1 {
        return Err(Error::config("steps_per_span must be >= 1"));
    }
    if w.is_empty() {
        return Err(Error::input("empty waveform"));
    }
    let n = w.len();
    let h = link.span_length_km / opts.steps_per_span as f64;
    let alpha = link.alpha_per_km();
    let omega = fft::angular_frequencies(n, w.sample_rate);
    let full = fft::dispersion_response(&omega, link.beta2_ps2_km, h);
    let half = fft::dispersion_response(&omega, link.beta2_ps2_km, 0.5 * h);
    // Kerr phase weight per step: (8/9)·γ·∫ f(z) dz over the step.
    let leff = effective_length(alpha, h);
    let kerr: Vec<f64> = (0..opts.steps_per_span)
        .map(|i| MANAKOV_FACTOR * link.gamma * (-alpha * i as f64 * h).exp() * leff)
        .collect();
    let noise_var = ase_psd(link) * w.sample_rate;

    let mut buf = w.to_flat();
    for span in 0..link.n_spans {
        match opts.scheme {
            SplitScheme::Symmetric => {
                fft::forward_rows(&mut buf, n);
                apply_rows(&mut buf, &half);
                for (step, &k) in kerr.iter().enumerate() {
                    fft::inverse_rows(&mut buf, n);
                    kerr_phase(&mut buf, n, k).ok_or(Error::Divergence { span, step })?;
                    fft::forward_rows(&mut buf, n);
                    let last = step + 1 == kerr.len();
                    apply_rows(&mut buf, if last { &half } else { &full });
                }
                fft::inverse_rows(&mut buf, n);
            }
            SplitScheme::Asymmetric => {
                for (step, &k) in kerr.iter().enumerate() {
                    fft::forward_rows(&mut buf, n);
                    apply_rows(&mut buf, &full);
                    fft::inverse_rows(&mut buf, n);
                    kerr_phase(&mut buf, n, k).ok_or(Error::Divergence { span, step })?;
                }
            }
        }
        if opts.include_ase {
            add_white_noise(&mut buf, noise_var, rng);
        }
        if buf.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Divergence {
                span,
                step: opts.steps_per_span,
            });
        }
    }
    DualPolWaveform::from_flat(&buf, w.sample_rate)
}

fn apply_rows(buf: &mut [C64], response: &[C64]) {
    for row in buf.chunks_exact_mut(response.len()) {
        for (v, h) in row.iter_mut().zip(response) {
            *v *= h;
        }
    }
}

/// u_p ← u_p · exp(i·k·(|u_h|² + |u_v|²)); `None` if the power is not finite.
fn kerr_phase(buf: &mut [C64], n: usize, k: f64) -> Option<()> {
    if k == 0.0 {
        return Some(());
    }
    let (h, v) = buf.split_at_mut(n);
    for (a, b) in h.iter_mut().zip(v.iter_mut()) {
        let p = a.norm_sqr() + b.norm_sqr();
        if !p.is_finite() {
            return None;
        }
        let rot = C64::from_polar(1.0, k * p);
        *a *= rot;
        *b *= rot;
    }
    Some(())
}
