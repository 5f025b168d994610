//! Training, fine-tuning and evaluation of the end-to-end transceiver.

mod adam;
mod eval;
mod graph;
mod params;
mod train;
mod validate;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use eval::{evaluate, mean_std, sweep_power, ChannelTag, EvalConfig, MetricReport};
pub use graph::{Forward, GraphContext, TrainChannel};
pub use params::{Group, ModelParams, ParamVars};
pub use train::{
    corpus, finetune_decoder, ssfm_corpus, CorpusChannel, train_e2e, Corpus, FinetuneConfig, StepInfo, TrainConfig, TrainOutcome,
    TrainState, Trainer, DIVERGENCE_WARMUP,
};
pub use validate::{aligned_sdr, validate_rp, ValidateConfig, ValidationRow};

#[cfg(test)]
mod tests;
