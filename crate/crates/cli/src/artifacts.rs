//! Checkpoints, parameter exports and CSV outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fiber_ae::pipeline::{MetricReport, ModelParams, TrainState, ValidationRow};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Finetune,
}

/// Parameters of every group; training checkpoints also carry the optimizer
/// and rng state for an exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub params: ModelParams,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).context("serializing checkpoint")?;
        // write-then-rename so an interrupted run never leaves a torn file
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ck: Self = serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            bail!("checkpoint format {} is not supported", ck.format_version);
        }
        Ok(ck)
    }
}

/// Writes `constellation.txt` and `preemph.txt` into `dir` with `prefix`.
pub fn export_params(dir: &Path, prefix: &str, params: &ModelParams) -> Result<()> {
    write_text(&dir.join(format!("{prefix}constellation.txt")), &params.constellation.to_text())?;
    write_text(&dir.join(format!("{prefix}preemph.txt")), &params.preemph.to_text())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

#[derive(Serialize)]
struct MetricRow<'a> {
    power_dbm: f64,
    metric: &'a str,
    value: f64,
    std: Option<f64>,
    channel: String,
    seed: u64,
}

/// Long-format metrics: `power_dbm, metric, value, std, channel, seed`.
pub fn write_metrics(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in reports {
        let channel = r.channel.to_string();
        let mut row = |metric, value, std| {
            w.serialize(MetricRow {
                power_dbm: r.launch_power_dbm,
                metric,
                value,
                std,
                channel: channel.clone(),
                seed: r.seed,
            })
        };
        row("mi", r.mi_mean, Some(r.mi_std))?;
        if let (Some(m), Some(s)) = (r.kde_mi_mean, r.kde_mi_std) {
            row("kde_mi", m, Some(s))?;
        }
        row("snr_db", r.snr_db, None)?;
        if let Some(sdr) = r.sdr_db {
            row("sdr_db", sdr, None)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ValidationCsv {
    power_dbm: f64,
    snr_ssfm: f64,
    snr_rp: f64,
    sdr: f64,
    seed: u64,
}

/// `power_dbm, snr_ssfm, snr_rp, sdr, seed`, one row per power.
pub fn write_validation(path: &Path, rows: &[ValidationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(ValidationCsv {
            power_dbm: r.power_dbm,
            snr_ssfm: r.snr_ssfm_db,
            snr_rp: r.snr_rp_db,
            sdr: r.sdr_db,
            seed: r.seed,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `iteration, loss` in nats.
pub fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in history.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
