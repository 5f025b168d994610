//! The differentiable transceiver chain used for training:
//! encode → pre-emphasis → pulse shaping → launch power → channel model →
//! CDC → matched filter → standardization → decoder → cross-entropy.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamVars;
use crate::autoencoder::{decoder_on_tape, encode_on_tape, normalize_on_tape, preemphasize_on_tape, WIDTH};
use crate::autograd::{Tape, Tensor, Var};
use crate::dsp::rrc_spectrum;
use crate::error::{Error, Result};
use crate::fft;
use crate::rp::{rp_stage_on_tape, stage_noise, RpModelConfig, StagePlan};
use crate::signal::{dbm_to_watt, LinkConfig, PulseConfig, C64, DEFAULT_BAUD};
use crate::ssfm::{add_white_noise, ase_psd};

/// Differentiable channel used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrainChannel {
    /// RP model; `stages = None` selects the reference staging of the link.
    Rp {
        #[serde(default)]
        stages: Option<RpModelConfig>,
    },
    /// Additive white Gaussian noise at the given symbol SNR; no fiber.
    Awgn { snr_db: f64 },
}

impl Default for TrainChannel {
    fn default() -> Self {
        TrainChannel::Rp { stages: None }
    }
}

enum ChannelPlan {
    Rp {
        plans: Vec<Arc<StagePlan>>,
        variance: f64,
    },
    Awgn {
        variance: f64,
    },
}

/// Frame-size dependent state shared by all iterations.
pub struct GraphContext {
    n_symbols: usize,
    sps: usize,
    launch_power_w: f64,
    pulse: Arc<Vec<C64>>,
    cdc: Option<Arc<Vec<C64>>>,
    channel: ChannelPlan,
}

/// Output of one recorded forward pass.
pub struct Forward {
    pub loss: Var,
    /// 1 / RMS of the received symbols fed to the decoder.
    pub input_scale: f64,
    /// Mean total power of the launched waveform in W.
    pub launch_power_w: f64,
}

impl GraphContext {
    pub fn new(
        link: &LinkConfig,
        pulse: &PulseConfig,
        channel: &TrainChannel,
        launch_power_dbm: f64,
        n_symbols: usize,
    ) -> Result<Self> {
        link.validate()?;
        pulse.validate()?;
        if n_symbols <= WIDTH {
            return Err(Error::config(format!("batch of {n_symbols} symbols is shorter than the pre-emphasis window")));
        }
        if !launch_power_dbm.is_finite() {
            return Err(Error::config("launch power must be finite"));
        }
        let n = n_symbols * pulse.sps;
        let sample_rate = DEFAULT_BAUD * pulse.sps as f64;
        let launch_power_w = dbm_to_watt(launch_power_dbm);
        let (channel, cdc) = match channel {
            TrainChannel::Rp { stages } => {
                let cfg = match stages {
                    Some(c) => c.clone(),
                    None => RpModelConfig::reference(link)?,
                };
                cfg.validate(link)?;
                let plans = cfg
                    .stages
                    .iter()
                    .map(|s| StagePlan::new(s, link, n, sample_rate).map(Arc::new))
                    .collect::<Result<Vec<_>>>()?;
                let variance = if cfg.noise { ase_psd(link) * sample_rate } else { 0.0 };
                let omega = fft::angular_frequencies(n, sample_rate);
                let cdc = fft::dispersion_response(&omega, link.beta2_ps2_km, -link.length_km());
                (ChannelPlan::Rp { plans, variance }, Some(Arc::new(cdc)))
            }
            TrainChannel::Awgn { snr_db } => {
                if !snr_db.is_finite() {
                    return Err(Error::config("AWGN snr_db must be finite"));
                }
                // white noise of variance σ² per sample becomes σ²/sps per
                // symbol after the unit-energy matched filter and decimation
                let per_pol = launch_power_w / 2.0;
                let variance = pulse.sps as f64 * per_pol / 10f64.powf(snr_db / 10.0);
                (ChannelPlan::Awgn { variance }, None)
            }
        };
        Ok(Self {
            n_symbols,
            sps: pulse.sps,
            launch_power_w,
            pulse: Arc::new(rrc_spectrum(pulse, n)),
            cdc,
            channel,
        })
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    /// Records the full chain for messages `msgs` (flat `[2·N]`, H first);
    /// all channel noise derives from `noise_seed`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, msgs: &[usize], noise_seed: u64) -> Result<Forward> {
        if msgs.len() != 2 * self.n_symbols {
            return Err(Error::input(format!(
                "expected {} messages, got {}",
                2 * self.n_symbols,
                msgs.len()
            )));
        }
        let n = self.n_symbols * self.sps;
        let norm = normalize_on_tape(tape, vars.constellation)?;
        let mut x = encode_on_tape(tape, norm, msgs)?;
        if let Some(c) = vars.preemph {
            x = preemphasize_on_tape(tape, x, c)?;
        }

        let up = tape.upsample(x, self.sps, (self.sps as f64).sqrt())?;
        let w = tape.circ_conv(up, self.pulse.clone())?;
        let p = tape.abs_sq(w);
        let pm = tape.mean(p);
        let r = tape.powf(pm, -0.5)?;
        let r = tape.scale(r, (self.launch_power_w / 2.0).sqrt());
        let mut w = tape.mul_scalar(w, r)?;
        let launched = 2.0 * tape.value(pm).item().unwrap() * tape.value(r).item().unwrap().powi(2);

        match &self.channel {
            ChannelPlan::Rp { plans, variance } => {
                for (i, plan) in plans.iter().enumerate() {
                    let noise = if *variance > 0.0 {
                        stage_noise(n, plan.spans(), *variance, noise_seed, i)
                    } else {
                        Vec::new()
                    };
                    w = rp_stage_on_tape(tape, w, plan.clone(), &noise)?;
                }
            }
            ChannelPlan::Awgn { variance } => {
                let mut noise = vec![C64::new(0.0, 0.0); 2 * n];
                add_white_noise(&mut noise, *variance, &mut ChaCha8Rng::seed_from_u64(noise_seed));
                let nv = tape.constant(Tensor::complex(&[2, n], noise)?);
                w = tape.add(w, nv)?;
            }
        }
        if let Some(cdc) = &self.cdc {
            w = tape.circ_conv(w, cdc.clone())?;
        }

        let mf = tape.circ_conv(w, self.pulse.clone())?;
        let y = tape.decimate(mf, self.sps, 1.0 / (self.sps as f64).sqrt())?;
        let py = tape.abs_sq(y);
        let pym = tape.mean(py);
        let s = tape.powf(pym, -0.5)?;
        let input_scale = tape.value(s).item().unwrap();
        let ys = tape.mul_scalar(y, s)?;
        let flat = tape.reshape(ys, &[2 * self.n_symbols])?;
        let re_im = tape.unpack(flat)?;
        let logits = decoder_on_tape(tape, &vars.decoder, re_im)?;
        let logp = tape.log_softmax(logits)?;
        let picked = tape.pick(logp, msgs)?;
        let mean = tape.mean(picked);
        let loss = tape.scale(mean, -1.0);
        Ok(Forward {
            loss,
            input_scale,
            launch_power_w: launched,
        })
    }
}
