//! Experiment configuration: TOML file, environment overrides, CLI flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fiber_ae::pipeline::{ChannelTag, EvalConfig, FinetuneConfig, TrainConfig, ValidateConfig};
use fiber_ae::{LinkConfig, PulseConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Prefix of environment overrides. Nested keys are joined with `__`, e.g.
/// `FIBER_AE_TRAIN__ITERATIONS=500` sets `train.iterations`.
pub const ENV_PREFIX: &str = "FIBER_AE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; when set, the per-stage seeds derive from it.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Operating launch power for train, finetune and evaluate (total dBm).
    /// Defaults to `train.launch_power_dbm`.
    pub power_dbm: Option<f64>,
    /// Iterations between checkpoints written during `train`.
    pub checkpoint_every: usize,
    pub link: LinkConfig,
    pub pulse: PulseConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub validate: ValidateConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            power_dbm: None,
            checkpoint_every: 1000,
            link: LinkConfig::default(),
            pulse: PulseConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            validate: ValidateConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Per-power recipe of `sweep`: initialize, optionally train and fine-tune,
/// then evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub powers_dbm: Vec<f64>,
    pub train: bool,
    pub finetune: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            powers_dbm: (0..=8).map(|i| 1.0 + 0.25 * i as f64).collect(),
            train: true,
            finetune: true,
        }
    }
}

/// Command-line overrides, applied after the file and the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub power_dbm: Option<f64>,
    pub channel: Option<ChannelTag>,
    pub no_preemph: bool,
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults), applies environment and flag
    /// overrides, materializes derived values and validates the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let vars: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::from_parts(&text, &vars, overrides)
    }

    pub fn from_parts(text: &str, env: &[(String, String)], overrides: &Overrides) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).context("parsing config")?;
        for (key, value) in env {
            let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
            let path: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
            set_path(&mut table, &path, parse_env_value(value)).with_context(|| format!("applying {key}"))?;
        }
        let mut cfg: Self = toml::Value::Table(table).try_into().context("config schema")?;
        cfg.apply(overrides);
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(p) = o.power_dbm {
            self.power_dbm = Some(p);
            self.validate.powers_dbm = vec![p];
            self.sweep.powers_dbm = vec![p];
        }
        if let Some(c) = o.channel {
            self.eval.channel = c;
        }
        if o.no_preemph {
            self.train.use_preemph = false;
            self.train.train_preemph = false;
            self.finetune.use_preemph = false;
            self.eval.use_preemph = false;
        }
    }

    /// Copies the shared values into the stage sections so the snapshot
    /// shows exactly what each stage runs with.
    fn resolve(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.finetune.seed = s.wrapping_add(1);
            self.eval.seed = s.wrapping_add(2);
            self.validate.seed = s.wrapping_add(3);
        }
        let p = self.power_dbm.unwrap_or(self.train.launch_power_dbm);
        self.power_dbm = Some(p);
        self.train.launch_power_dbm = p;
        self.finetune.launch_power_dbm = p;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        self.link.validate()?;
        self.pulse.validate()?;
        self.train.validate()?;
        if self.checkpoint_every == 0 {
            bail!("checkpoint_every must be at least 1");
        }
        if self.sweep.powers_dbm.is_empty() || self.validate.powers_dbm.is_empty() {
            bail!("power lists must not be empty");
        }
        if self.eval.n_seq == 0 || self.eval.seq_len == 0 {
            bail!("eval.n_seq and eval.seq_len must be positive");
        }
        Ok(())
    }

    pub fn power(&self) -> f64 {
        self.power_dbm.unwrap_or(self.train.launch_power_dbm)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().context("empty override key")?;
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("`{key}` is not a table"),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_parts("", &[], &Overrides::default()).unwrap();
        assert_eq!(cfg.power(), 2.0);
        assert_eq!(cfg.train.iterations, TrainConfig::default().iterations);
    }

    #[test]
    fn shipped_config_parses() {
        let text = include_str!("../../../configs/quick.toml");
        let cfg = ExperimentConfig::from_parts(text, &[], &Overrides::default()).unwrap();
        assert_eq!(cfg.link.n_spans, 10);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_parts("bogus = 1", &[], &Overrides::default()).is_err());
        assert!(ExperimentConfig::from_parts("[train]\nbogus = 1", &[], &Overrides::default()).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        assert!(ExperimentConfig::from_parts("schema_version = 9", &[], &Overrides::default()).is_err());
    }

    #[test]
    fn env_overrides_nested_keys() {
        let env = vec![
            ("FIBER_AE_TRAIN__ITERATIONS".to_string(), "7".to_string()),
            ("FIBER_AE_LINK__N_SPANS".to_string(), "4".to_string()),
            ("FIBER_AE_OUT_DIR".to_string(), "somewhere/else".to_string()),
        ];
        let cfg = ExperimentConfig::from_parts("[train]\niterations = 3", &env, &Overrides::default()).unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.link.n_spans, 4);
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere/else"));
    }

    #[test]
    fn flags_win_and_seed_fans_out() {
        let o = Overrides {
            seed: Some(10),
            power_dbm: Some(3.5),
            no_preemph: true,
            channel: Some(ChannelTag::Rp),
            ..Default::default()
        };
        let cfg = ExperimentConfig::from_parts("power_dbm = 1.0", &[], &o).unwrap();
        assert_eq!(cfg.power(), 3.5);
        assert_eq!(cfg.train.launch_power_dbm, 3.5);
        assert_eq!((cfg.train.seed, cfg.finetune.seed, cfg.eval.seed), (10, 11, 12));
        assert!(!cfg.train.use_preemph && !cfg.eval.use_preemph);
        assert_eq!(cfg.eval.channel, ChannelTag::Rp);
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let cfg = ExperimentConfig::from_parts("seed = 5\n[link]\nn_spans = 10", &[], &Overrides::default()).unwrap();
        let again = ExperimentConfig::from_parts(&cfg.to_toml().unwrap(), &[], &Overrides::default()).unwrap();
        assert_eq!(cfg, again);
    }
}
