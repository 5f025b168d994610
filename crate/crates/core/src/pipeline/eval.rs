use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::train::{corpus, CorpusChannel};
use crate::autoencoder::{kde_mi, mi_estimate, Bandwidth};
use crate::dsp::estimate_snr;
use crate::error::{Error, Result};
use crate::rp::RpModelConfig;
use crate::signal::{LinkConfig, PulseConfig, SymbolFrame, DEFAULT_BAUD};
use crate::ssfm::SsfmOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelTag {
    Rp,
    Ssfm,
}

impl fmt::Display for ChannelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelTag::Rp => "rp",
            ChannelTag::Ssfm => "ssfm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_seq: usize,
    /// Symbols per polarization per sequence.
    pub seq_len: usize,
    pub seed: u64,
    pub use_preemph: bool,
    /// Also report the KDE-based MI.
    pub kde: bool,
    pub bandwidth: Bandwidth,
    /// Channel the sequences are sent over.
    pub channel: ChannelTag,
    pub ssfm: SsfmOptions,
    /// RP model for `channel = "rp"`; `None` selects the reference staging.
    pub rp: Option<RpModelConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_seq: 10,
            seq_len: 1 << 16,
            seed: 3,
            use_preemph: true,
            kde: false,
            bandwidth: Bandwidth::Silverman,
            channel: ChannelTag::Ssfm,
            ssfm: SsfmOptions::default(),
            rp: None,
        }
    }
}

/// Metrics of one launch power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub launch_power_dbm: f64,
    /// Decoder-based MI, bits/sym/pol.
    pub mi_mean: f64,
    pub mi_std: f64,
    pub kde_mi_mean: Option<f64>,
    pub kde_mi_std: Option<f64>,
    /// Effective SNR of the received symbols against the constellation symbols.
    pub snr_db: f64,
    pub sdr_db: Option<f64>,
    pub seed: u64,
    pub channel: ChannelTag,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// MI statistics over `n_seq` fresh random sequences sent over the configured
/// channel (SSFM by default).
pub fn evaluate(
    params: &ModelParams,
    link: &LinkConfig,
    pulse: &PulseConfig,
    launch_power_dbm: f64,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if cfg.n_seq == 0 || cfg.seq_len == 0 {
        return Err(Error::config("evaluation needs n_seq >= 1 and seq_len >= 1"));
    }
    let rp = match &cfg.rp {
        Some(r) => r.clone(),
        None => RpModelConfig::reference(link)?,
    };
    let channel = match cfg.channel {
        ChannelTag::Ssfm => CorpusChannel::Ssfm(&cfg.ssfm),
        ChannelTag::Rp => CorpusChannel::Rp(&rp),
    };
    let corpus = corpus(
        params,
        link,
        pulse,
        channel,
        launch_power_dbm,
        cfg.n_seq,
        cfg.seq_len,
        cfg.use_preemph,
        cfg.seed,
    )?;
    let mut mi = Vec::with_capacity(cfg.n_seq);
    let mut kde = Vec::new();
    let mut snr_lin = Vec::with_capacity(cfg.n_seq);
    for c in &corpus {
        let post = params.decoder.decode(&c.rx)?;
        mi.push(mi_estimate(&post, &c.labels)?);
        let tx = SymbolFrame::from_flat(&c.tx, DEFAULT_BAUD)?;
        let rx = SymbolFrame::from_flat(&c.rx, DEFAULT_BAUD)?;
        snr_lin.push(10f64.powf(estimate_snr(&tx, &rx)? / 10.0));
        if cfg.kde {
            kde.push(kde_mi(&c.rx, &c.labels, cfg.bandwidth)?);
        }
    }
    let (mi_mean, mi_std) = mean_std(&mi);
    let (kde_mi_mean, kde_mi_std) = if cfg.kde {
        let (m, s) = mean_std(&kde);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let snr_db = 10.0 * (snr_lin.iter().sum::<f64>() / snr_lin.len() as f64).log10();
    Ok(MetricReport {
        launch_power_dbm,
        mi_mean,
        mi_std,
        kde_mi_mean,
        kde_mi_std,
        snr_db,
        sdr_db: None,
        seed: cfg.seed,
        channel: cfg.channel,
    })
}

/// Runs `recipe` at every power; a failing point is logged and recorded
/// as an error without stopping the sweep.
pub fn sweep_power<F>(powers: &[f64], mut recipe: F) -> Result<Vec<(f64, Result<MetricReport>)>>
where
    F: FnMut(f64) -> Result<MetricReport>,
{
    if powers.is_empty() {
        return Err(Error::config("power sweep needs at least one power"));
    }
    Ok(powers
        .iter()
        .map(|&p| {
            let r = recipe(p);
            if let Err(e) = &r {
                warn!("sweep point {p} dBm failed: {e}");
            }
            (p, r)
        })
        .collect())
}
