//! Trainable transmitter and receiver: geometric constellation, cubic
//! pre-emphasis and posterior decoder, plus the loss and MI estimators.

mod constellation;
mod decoder;
mod metrics;
mod preemph;

pub use constellation::{encode_on_tape, normalize_on_tape, qam64, Constellation, ORDER};
pub use decoder::{decoder_on_tape, Dense, DecoderNet, DecoderVars, HIDDEN};
pub use metrics::{
    gaussian_mi, kde_mi, mi_estimate, mi_from_xent, xent_loss, Bandwidth, CrossEntropy, KDE_MIN_SAMPLES,
    POSTERIOR_FLOOR,
};
pub use preemph::{
    init_preemph, init_preemph_with, preemphasize, preemphasize_on_tape, PreEmphasis, PreemphFit, HALF_WIDTH,
    N_COEFFS, WIDTH,
};

