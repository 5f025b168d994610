use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::graph::{GraphContext, TrainChannel};
use super::params::{Group, ModelParams};
use crate::autoencoder::{decoder_on_tape, ORDER, WIDTH};
use crate::autograd::{Tape, Tensor};
use crate::dsp::{cdc, set_launch_power, PulseShaper};
use crate::error::{Error, Result};
use crate::rp::{rp_propagate, RpModelConfig};
use crate::signal::{DualPolWaveform, LinkConfig, PulseConfig, C64, DEFAULT_BAUD};
use crate::ssfm::{ssfm_propagate, SsfmOptions};

/// Iterations before the divergence check is armed.
pub const DIVERGENCE_WARMUP: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total dual-polarization launch power.
    pub launch_power_dbm: f64,
    /// Symbols per polarization in every batch.
    pub batch_symbols: usize,
    pub iterations: usize,
    pub learn_rate: f64,
    /// Fractions of `iterations` after which the rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    /// Learning-rate multiplier of the pre-emphasis group, whose
    /// coefficients live on a much smaller scale than the other groups.
    pub preemph_lr_scale: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub train_encoder: bool,
    pub train_preemph: bool,
    pub train_decoder: bool,
    /// Pass symbols through the pre-emphasis at all. When false the
    /// coefficients are neither applied nor trained.
    pub use_preemph: bool,
    pub channel: TrainChannel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            launch_power_dbm: 2.0,
            batch_symbols: 1 << 12,
            iterations: 20_000,
            learn_rate: 1e-3,
            decay_at: vec![0.6, 0.85],
            decay_factor: 0.5,
            preemph_lr_scale: 0.01,
            adam: AdamConfig::default(),
            seed: 1,
            train_encoder: true,
            train_preemph: true,
            train_decoder: true,
            use_preemph: true,
            channel: TrainChannel::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_symbols <= WIDTH {
            return Err(Error::config(format!(
                "batch_symbols must exceed the pre-emphasis window ({WIDTH})"
            )));
        }
        if !(self.learn_rate > 0.0) || !(self.decay_factor > 0.0) || !(self.preemph_lr_scale >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("decay_at fractions must lie in [0, 1]"));
        }
        if !self.launch_power_dbm.is_finite() {
            return Err(Error::config("launch power must be finite"));
        }
        self.adam.validate()
    }

    pub fn learn_rate_at(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.iterations.max(1) as f64;
        let drops = self.decay_at.iter().filter(|&&f| frac >= f).count();
        self.learn_rate * self.decay_factor.powi(drops as i32)
    }

    fn enabled(&self, group: Group) -> bool {
        match group {
            Group::Encoder => self.train_encoder,
            Group::Preemph => self.train_preemph && self.use_preemph,
            Group::Decoder => self.train_decoder,
        }
    }
}

/// Resumable training state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Vec<(Group, AdamState)>,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let adam = Group::ALL
            .iter()
            .map(|&g| (g, AdamState::new(params.group_values(g).len())))
            .collect();
        Self {
            params,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed),
            iteration: 0,
            history: Vec::new(),
        }
    }
}

/// Loss of one batch and the launched power it was computed at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub loss: f64,
    pub launch_power_w: f64,
}

/// End-to-end trainer over a differentiable channel model.
pub struct Trainer {
    cfg: TrainConfig,
    ctx: GraphContext,
    state: TrainState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, link: &LinkConfig, pulse: &PulseConfig, params: ModelParams) -> Result<Self> {
        let state = TrainState::new(params, cfg.seed);
        Self::resume(cfg, link, pulse, state)
    }

    pub fn resume(cfg: TrainConfig, link: &LinkConfig, pulse: &PulseConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        let ctx = GraphContext::new(link, pulse, &cfg.channel, cfg.launch_power_dbm, cfg.batch_symbols)?;
        Ok(Self { cfg, ctx, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    /// One forward/backward pass and optimizer update.
    pub fn step(&mut self) -> Result<StepInfo> {
        let it = self.state.iteration;
        let msgs: Vec<usize> = (0..2 * self.cfg.batch_symbols)
            .map(|_| self.state.rng.gen_range(0..ORDER))
            .collect();
        let noise_seed: u64 = self.state.rng.gen();

        let mut tape = Tape::new();
        let vars = self.state.params.record(&mut tape, self.cfg.use_preemph);
        let fwd = self.ctx.forward(&mut tape, &vars, &msgs, noise_seed)?;
        let loss = tape.value(fwd.loss).item().unwrap();
        self.state.history.push(loss);
        if !loss.is_finite() || (it >= DIVERGENCE_WARMUP && loss > (ORDER as f64).ln() + 1.0) {
            return Err(Error::TrainingDiverged {
                iteration: it,
                loss,
                history: self.state.history.clone(),
            });
        }
        let grads = tape.backward(fwd.loss)?;

        let lr = self.cfg.learn_rate_at(it);
        for (group, adam) in &mut self.state.adam {
            if !self.cfg.enabled(*group) {
                continue;
            }
            let g = self.state.params.group_grads(*group, &vars, &grads);
            let mut v = self.state.params.group_values(*group);
            let group_lr = if *group == Group::Preemph { lr * self.cfg.preemph_lr_scale } else { lr };
            adam_step(&mut v, &g, adam, &self.cfg.adam, group_lr)?;
            self.state.params.set_group_values(*group, &v);
        }
        if self.cfg.train_decoder {
            self.state.params.decoder.input_scale = fwd.input_scale;
        }
        self.state.iteration += 1;
        if it % 100 == 0 {
            debug!("iteration {it}: loss {loss:.5}, lr {lr:e}");
        }
        Ok(StepInfo {
            loss,
            launch_power_w: fwd.launch_power_w,
        })
    }

    /// Runs up to `max_steps` further iterations (bounded by the configured total).
    pub fn run(&mut self, max_steps: usize) -> Result<()> {
        for _ in 0..max_steps {
            if self.done() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }
}

/// Final parameters and per-iteration losses (nats).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<f64>,
}

/// Trains the enabled parameter groups end to end from `params`.
pub fn train_e2e(cfg: &TrainConfig, link: &LinkConfig, pulse: &PulseConfig, params: ModelParams) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), link, pulse, params)?;
    trainer.run(cfg.iterations)?;
    let state = trainer.into_state();
    if let Some(last) = state.history.last() {
        info!("trained {} iterations, final loss {last:.5}", state.iteration);
    }
    Ok(TrainOutcome {
        params: state.params,
        history: state.history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub launch_power_dbm: f64,
    /// Number of SSFM propagations in the corpus.
    pub corpus_sequences: usize,
    /// Symbols per polarization per corpus sequence.
    pub sequence_symbols: usize,
    pub iterations: usize,
    pub batch_symbols: usize,
    pub learn_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub use_preemph: bool,
    pub ssfm: SsfmOptions,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            launch_power_dbm: 2.0,
            corpus_sequences: 4,
            sequence_symbols: 1 << 14,
            iterations: 2000,
            batch_symbols: 1 << 12,
            learn_rate: 2e-4,
            adam: AdamConfig::default(),
            seed: 2,
            use_preemph: true,
            ssfm: SsfmOptions::default(),
        }
    }
}

/// Received symbols after SSFM, CDC and matched filtering, with their labels.
#[derive(Debug, Clone)]
pub struct Corpus {
    /// Flat received symbols, H then V per sequence.
    pub rx: Vec<C64>,
    pub labels: Vec<usize>,
    /// Transmitted (pre-emphasis input) symbols, same layout.
    pub tx: Vec<C64>,
}

/// Channel used to generate a corpus.
#[derive(Debug, Clone, Copy)]
pub enum CorpusChannel<'a> {
    Ssfm(&'a SsfmOptions),
    Rp(&'a RpModelConfig),
}

/// Sends `n_seq` random sequences through the SSFM link. Sequence i uses
/// ChaCha stream i of `seed`, so the corpus is independent of worker count.
#[allow(clippy::too_many_arguments)]
pub fn ssfm_corpus(
    params: &ModelParams,
    link: &LinkConfig,
    pulse: &PulseConfig,
    ssfm: &SsfmOptions,
    launch_power_dbm: f64,
    n_seq: usize,
    seq_symbols: usize,
    use_preemph: bool,
    seed: u64,
) -> Result<Vec<Corpus>> {
    corpus(
        params,
        link,
        pulse,
        CorpusChannel::Ssfm(ssfm),
        launch_power_dbm,
        n_seq,
        seq_symbols,
        use_preemph,
        seed,
    )
}

/// [`ssfm_corpus`] over either channel model.
#[allow(clippy::too_many_arguments)]
pub fn corpus(
    params: &ModelParams,
    link: &LinkConfig,
    pulse: &PulseConfig,
    channel: CorpusChannel<'_>,
    launch_power_dbm: f64,
    n_seq: usize,
    seq_symbols: usize,
    use_preemph: bool,
    seed: u64,
) -> Result<Vec<Corpus>> {
    let shaper = PulseShaper::new(*pulse, DEFAULT_BAUD, seq_symbols)?;
    (0..n_seq)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let labels: Vec<usize> = (0..2 * seq_symbols).map(|_| rng.gen_range(0..ORDER)).collect();
            let frame = params
                .constellation
                .encode(&labels[..seq_symbols], &labels[seq_symbols..], DEFAULT_BAUD)?;
            let tx = frame.to_flat();
            let shaped = if use_preemph {
                params.preemph.apply(&frame)?.to_flat()
            } else {
                tx.clone()
            };
            let w = DualPolWaveform::from_flat(&shaper.modulate_rows(&shaped), shaper.sample_rate())?;
            let w = set_launch_power(&w, launch_power_dbm)?;
            let out = match channel {
                CorpusChannel::Ssfm(opts) => ssfm_propagate(&w, link, opts, &mut rng)?,
                CorpusChannel::Rp(cfg) => rp_propagate(&w, cfg, link, &mut rng)?,
            };
            let rx = shaper.demodulate_rows(&cdc(&out, link).to_flat());
            Ok(Corpus { rx, labels, tx })
        })
        .collect()
}

/// Updates only the decoder on a pre-generated SSFM corpus.
pub fn finetune_decoder(
    params: &ModelParams,
    cfg: &FinetuneConfig,
    link: &LinkConfig,
    pulse: &PulseConfig,
) -> Result<TrainOutcome> {
    cfg.adam.validate()?;
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            params: params.clone(),
            history: Vec::new(),
        });
    }
    if cfg.corpus_sequences == 0 || cfg.batch_symbols == 0 || cfg.sequence_symbols == 0 {
        return Err(Error::config("fine-tuning needs a non-empty corpus and batch"));
    }
    let corpus = ssfm_corpus(
        params,
        link,
        pulse,
        &cfg.ssfm,
        cfg.launch_power_dbm,
        cfg.corpus_sequences,
        cfg.sequence_symbols,
        cfg.use_preemph,
        cfg.seed,
    )?;
    let rx: Vec<C64> = corpus.iter().flat_map(|c| c.rx.iter().copied()).collect();
    let labels: Vec<usize> = corpus.iter().flat_map(|c| c.labels.iter().copied()).collect();
    let rms = (rx.iter().map(|v| v.norm_sqr()).sum::<f64>() / rx.len() as f64).sqrt();
    let scale = 1.0 / rms;

    let mut out = params.clone();
    out.decoder.input_scale = scale;
    let mut adam = AdamState::new(out.group_values(Group::Decoder).len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = Vec::with_capacity(cfg.iterations);
    let batch = cfg.batch_symbols.min(rx.len());
    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..rx.len())).collect();
        let feats: Vec<f64> = idx.iter().flat_map(|&i| [rx[i].re * scale, rx[i].im * scale]).collect();
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let vars = out.record(&mut tape, false);
        let x = tape.constant(Tensor::real(&[batch, 2], feats)?);
        let logits = decoder_on_tape(&mut tape, &vars.decoder, x)?;
        let logp = tape.log_softmax(logits)?;
        let picked = tape.pick(logp, &lab)?;
        let mean = tape.mean(picked);
        let loss_var = tape.scale(mean, -1.0);
        let loss = tape.value(loss_var).item().unwrap();
        history.push(loss);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: it,
                loss,
                history,
            });
        }
        let grads = tape.backward(loss_var)?;
        let g = out.group_grads(Group::Decoder, &vars, &grads);
        let mut v = out.group_values(Group::Decoder);
        adam_step(&mut v, &g, &mut adam, &cfg.adam, cfg.learn_rate)?;
        out.set_group_values(Group::Decoder, &v);
    }
    Ok(TrainOutcome { params: out, history })
}
