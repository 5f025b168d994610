use std::path::Path;

use anyhow::{Context, Result};
use fiber_ae::pipeline::{
    self, finetune_decoder, sweep_power, train_e2e, validate_rp as run_validation, MetricReport, ModelParams,
    TrainState, Trainer,
};
use log::{info, warn};

use crate::artifacts::{self, Checkpoint, Stage, CHECKPOINT_VERSION};
use crate::config::ExperimentConfig;

fn initial_params(cfg: &ExperimentConfig, power_dbm: f64) -> Result<ModelParams> {
    Ok(if cfg.train.use_preemph {
        ModelParams::initial_with_preemph(cfg.train.seed, &cfg.link, &cfg.pulse, power_dbm)?
    } else {
        ModelParams::initial(cfg.train.seed)
    })
}

fn require_checkpoint(path: Option<&Path>, command: &str) -> Result<Checkpoint> {
    let path = path.with_context(|| format!("{command} needs --checkpoint PATH"))?;
    Checkpoint::read(path)
}

pub fn validate_rp(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let rows = run_validation(&cfg.link, &cfg.pulse, &cfg.validate)?;
    for r in &rows {
        println!(
            "validate-rp {:+.2} dBm: snr_ssfm {:.3} dB, snr_rp {:.3} dB, sdr {:.2} dB",
            r.power_dbm, r.snr_ssfm_db, r.snr_rp_db, r.sdr_db
        );
    }
    artifacts::write_validation(&out.join("validate_rp.csv"), &rows)
}

pub fn train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let state = match resume {
        Some(p) => Checkpoint::read(p)?
            .train_state
            .context("checkpoint has no training state to resume from")?,
        None => TrainState::new(initial_params(cfg, cfg.power())?, cfg.train.seed),
    };
    let mut trainer = Trainer::resume(cfg.train.clone(), &cfg.link, &cfg.pulse, state)?;
    let path = out.join("checkpoint.json");
    let save = |state: &TrainState| {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            stage: Stage::Train,
            params: state.params.clone(),
            train_state: Some(state.clone()),
        }
        .write(&path)
    };
    while !trainer.done() {
        trainer.run(cfg.checkpoint_every)?;
        save(trainer.state())?;
        let s = trainer.state();
        info!("iteration {}: loss {:.5}", s.iteration, s.history.last().copied().unwrap_or(f64::NAN));
    }
    let state = trainer.into_state();
    save(&state)?;
    artifacts::export_params(out, "", &state.params)?;
    artifacts::write_history(&out.join("train_loss.csv"), &state.history)?;
    println!(
        "train: {} iterations at {:.2} dBm, final loss {} nats -> {}",
        state.iteration,
        cfg.train.launch_power_dbm,
        state.history.last().map_or("n/a".into(), |l| format!("{l:.5}")),
        path.display()
    );
    Ok(())
}

pub fn finetune(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let ck = require_checkpoint(checkpoint, "finetune")?;
    let outcome = finetune_decoder(&ck.params, &cfg.finetune, &cfg.link, &cfg.pulse)?;
    let path = out.join("checkpoint_finetuned.json");
    Checkpoint {
        format_version: CHECKPOINT_VERSION,
        stage: Stage::Finetune,
        params: outcome.params.clone(),
        train_state: None,
    }
    .write(&path)?;
    artifacts::export_params(out, "finetuned_", &outcome.params)?;
    artifacts::write_history(&out.join("finetune_loss.csv"), &outcome.history)?;
    println!(
        "finetune: {} iterations at {:.2} dBm, final loss {} nats -> {}",
        outcome.history.len(),
        cfg.finetune.launch_power_dbm,
        outcome.history.last().map_or("n/a".into(), |l| format!("{l:.5}")),
        path.display()
    );
    Ok(())
}

fn summary(r: &MetricReport) -> String {
    let kde = match (r.kde_mi_mean, r.kde_mi_std) {
        (Some(m), Some(s)) => format!(", kde mi {m:.4} ± {s:.4}"),
        _ => String::new(),
    };
    format!(
        "{:+.2} dBm over {}: mi {:.4} ± {:.4} bits/sym/pol{kde}, snr {:.3} dB",
        r.launch_power_dbm, r.channel, r.mi_mean, r.mi_std, r.snr_db
    )
}

pub fn evaluate(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let ck = require_checkpoint(checkpoint, "evaluate")?;
    let report = pipeline::evaluate(&ck.params, &cfg.link, &cfg.pulse, cfg.power(), &cfg.eval)?;
    println!("evaluate: {}", summary(&report));
    artifacts::write_metrics(&out.join("metrics.csv"), &[report])
}

pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let results = sweep_power(&cfg.sweep.powers_dbm, |p| {
        let mut params = initial_params(cfg, p).map_err(to_core)?;
        if cfg.sweep.train {
            let tc = fiber_ae::pipeline::TrainConfig {
                launch_power_dbm: p,
                ..cfg.train.clone()
            };
            params = train_e2e(&tc, &cfg.link, &cfg.pulse, params)?.params;
        }
        if cfg.sweep.finetune {
            let fc = fiber_ae::pipeline::FinetuneConfig {
                launch_power_dbm: p,
                ..cfg.finetune.clone()
            };
            params = finetune_decoder(&params, &fc, &cfg.link, &cfg.pulse)?.params;
        }
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            stage: if cfg.sweep.finetune { Stage::Finetune } else { Stage::Train },
            params: params.clone(),
            train_state: None,
        };
        ck.write(&out.join(format!("sweep_{p}dBm.json"))).map_err(to_core)?;
        let r = pipeline::evaluate(&params, &cfg.link, &cfg.pulse, p, &cfg.eval)?;
        println!("sweep: {}", summary(&r));
        Ok(r)
    })?;
    let mut reports = Vec::new();
    let mut first_failure = None;
    for (p, r) in results {
        match r {
            Ok(r) => reports.push(r),
            Err(e) => {
                warn!("sweep point {p} dBm failed: {e}");
                first_failure.get_or_insert((p, e));
            }
        }
    }
    artifacts::write_metrics(&out.join("sweep.csv"), &reports)?;
    match first_failure {
        Some((p, e)) => Err(anyhow::Error::new(e).context(format!("sweep point {p} dBm failed"))),
        None => Ok(()),
    }
}

/// Carries a non-model failure (IO, checkpoint) through the sweep recipe.
fn to_core(e: anyhow::Error) -> fiber_ae::Error {
    match e.downcast::<fiber_ae::Error>() {
        Ok(e) => e,
        Err(e) => fiber_ae::Error::Input(format!("{e:#}")),
    }
}
