use fiber_ae::autoencoder::{init_preemph, Constellation, HALF_WIDTH};
use fiber_ae::dsp::{cdc, demodulate, estimate_snr, modulate, set_launch_power};
use fiber_ae::signal::{LinkConfig, PulseConfig, DEFAULT_BAUD};
use fiber_ae::ssfm::{ssfm_propagate, SsfmOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// SSFM A/B gain of the initial pre-emphasis at 2 dBm, 2^14 symbols, seed 5.
// Frozen from the run that validated the calibration.
const AB_GAIN_DB: f64 = 0.097;

#[test]
fn kerr_free_link_gives_zero_coefficients() {
    let link = LinkConfig {
        gamma: 0.0,
        n_spans: 2,
        ..Default::default()
    };
    let pe = init_preemph(&link, &PulseConfig::default(), 2.0).unwrap();
    assert!(pe.is_zero());
}

#[test]
fn coefficients_are_largest_near_the_center() {
    let pe = init_preemph(&LinkConfig::default(), &PulseConfig::default(), 2.0).unwrap();
    let w = HALF_WIDTH as isize;
    let mut border = 0.0f64;
    let mut center = 0.0f64;
    for m in -w..=w {
        for n in -w..=w {
            let c = pe.get(m, n).norm();
            if m.abs() == w || n.abs() == w {
                border = border.max(c);
            }
            if m.abs() <= 1 && n.abs() <= 1 {
                center = center.max(c);
            }
        }
    }
    assert!(border < center, "border {border:e} center {center:e}");
}

#[test]
fn initial_preemphasis_improves_ssfm_snr_at_2_dbm() {
    let link = LinkConfig::default();
    let pulse = PulseConfig::default();
    let pe = init_preemph(&link, &pulse, 2.0).unwrap();
    let n = 1 << 14;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let msgs: Vec<usize> = (0..2 * n).map(|_| rng.gen_range(0..64)).collect();
    let frame = Constellation::qam64().encode(&msgs[..n], &msgs[n..], DEFAULT_BAUD).unwrap();
    let snr = |use_pe: bool| {
        let tx = if use_pe { pe.apply(&frame).unwrap() } else { frame.clone() };
        let w = set_launch_power(&modulate(&tx, &pulse).unwrap(), 2.0).unwrap();
        let out = ssfm_propagate(&w, &link, &SsfmOptions::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let rx = demodulate(&cdc(&out, &link), &pulse, DEFAULT_BAUD).unwrap();
        estimate_snr(&frame, &rx).unwrap()
    };
    let gain = snr(true) - snr(false);
    assert!(gain > 0.0, "gain {gain} dB");
    assert!((gain - AB_GAIN_DB).abs() < 0.02, "gain {gain} dB drifted from {AB_GAIN_DB}");
}
