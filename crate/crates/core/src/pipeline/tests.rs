use super::*;
use crate::autograd::{gradient_check, Tape};
use crate::rp::{RpModelConfig, RpStageConfig};
use crate::signal::{dbm_to_watt, LinkConfig, PulseConfig, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short_link() -> LinkConfig {
    LinkConfig {
        n_spans: 1,
        ..Default::default()
    }
}

fn one_stage(n_branches: usize) -> TrainChannel {
    TrainChannel::Rp {
        stages: Some(RpModelConfig {
            stages: vec![RpStageConfig {
                length_km: 80.0,
                n_branches,
            }],
            noise: true,
        }),
    }
}

fn perturbed_params(seed: u64) -> ModelParams {
    let mut p = ModelParams::initial(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut c = p.group_values(Group::Preemph);
    c.iter_mut().for_each(|v| *v = rng.gen_range(-1e-3..1e-3));
    p.set_group_values(Group::Preemph, &c);
    let mut e = p.group_values(Group::Encoder);
    e.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    p.set_group_values(Group::Encoder, &e);
    p
}

#[test]
fn full_chain_gradient_matches_finite_differences() {
    let link = short_link();
    let pulse = PulseConfig::default();
    let ctx = GraphContext::new(&link, &pulse, &one_stage(4), 4.0, 64).unwrap();
    let params = perturbed_params(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let msgs: Vec<usize> = (0..128).map(|_| rng.gen_range(0..64)).collect();
    let report = gradient_check(
        |tape, leaves| {
            let vars = ModelParams::vars_from(leaves, true)?;
            Ok(ctx.forward(tape, &vars, &msgs, 9)?.loss)
        },
        &params.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn launch_power_is_exact_every_batch() {
    let link = short_link();
    let pulse = PulseConfig::default();
    let cfg = TrainConfig {
        batch_symbols: 64,
        iterations: 3,
        launch_power_dbm: 1.5,
        channel: one_stage(4),
        ..Default::default()
    };
    let mut t = Trainer::new(cfg, &link, &pulse, perturbed_params(1)).unwrap();
    for _ in 0..3 {
        let info = t.step().unwrap();
        let err_db = 10.0 * (info.launch_power_w / dbm_to_watt(1.5)).log10();
        assert!(err_db.abs() < 0.05);
    }
    assert!(t.done());
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let link = short_link();
    let pulse = PulseConfig::default();
    let cfg = TrainConfig {
        batch_symbols: 64,
        iterations: 4,
        channel: one_stage(4),
        ..Default::default()
    };
    let a = train_e2e(&cfg, &link, &pulse, ModelParams::initial(2)).unwrap();
    let b = train_e2e(&cfg, &link, &pulse, ModelParams::initial(2)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let link = short_link();
    let pulse = PulseConfig::default();
    let cfg = TrainConfig {
        batch_symbols: 64,
        iterations: 6,
        channel: one_stage(4),
        ..Default::default()
    };
    let full = train_e2e(&cfg, &link, &pulse, ModelParams::initial(3)).unwrap();
    let mut t = Trainer::new(cfg.clone(), &link, &pulse, ModelParams::initial(3)).unwrap();
    t.run(2).unwrap();
    let json = serde_json::to_string(&t.into_state()).unwrap();
    let state: TrainState = serde_json::from_str(&json).unwrap();
    let mut t = Trainer::resume(cfg, &link, &pulse, state).unwrap();
    t.run(10).unwrap();
    assert_eq!(t.state().params, full.params);
}

#[test]
fn disabled_groups_do_not_move() {
    let link = short_link();
    let pulse = PulseConfig::default();
    let cfg = TrainConfig {
        batch_symbols: 64,
        iterations: 3,
        channel: one_stage(4),
        train_encoder: false,
        train_preemph: false,
        ..Default::default()
    };
    let init = perturbed_params(4);
    let out = train_e2e(&cfg, &link, &pulse, init.clone()).unwrap();
    assert_eq!(out.params.constellation, init.constellation);
    assert_eq!(out.params.preemph, init.preemph);
    assert_ne!(out.params.decoder.layers, init.decoder.layers);
}

#[test]
fn learn_rate_schedule() {
    let cfg = TrainConfig {
        iterations: 100,
        learn_rate: 1.0,
        ..Default::default()
    };
    assert_eq!(cfg.learn_rate_at(0), 1.0);
    assert_eq!(cfg.learn_rate_at(59), 1.0);
    assert_eq!(cfg.learn_rate_at(60), 0.5);
    assert_eq!(cfg.learn_rate_at(90), 0.25);
}

#[test]
fn awgn_training_reduces_loss() {
    let link = short_link();
    let pulse = PulseConfig::default();
    let cfg = TrainConfig {
        batch_symbols: 512,
        iterations: 300,
        learn_rate: 1e-2,
        use_preemph: false,
        channel: TrainChannel::Awgn { snr_db: 15.0 },
        ..Default::default()
    };
    let out = train_e2e(&cfg, &link, &pulse, ModelParams::initial(5)).unwrap();
    let head: f64 = out.history[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = out.history[280..].iter().sum::<f64>() / 20.0;
    assert!(tail < head - 1.0, "{head} -> {tail}");
}

#[test]
fn zero_finetune_iterations_is_identity() {
    let p = ModelParams::initial(6);
    let cfg = FinetuneConfig {
        iterations: 0,
        ..Default::default()
    };
    let out = finetune_decoder(&p, &cfg, &short_link(), &PulseConfig::default()).unwrap();
    assert_eq!(out.params, p);
}

#[test]
fn evaluate_is_reproducible() {
    let link = short_link();
    let pulse = PulseConfig::default();
    let cfg = EvalConfig {
        n_seq: 1,
        seq_len: 256,
        ..Default::default()
    };
    let p = ModelParams::initial(7);
    let a = evaluate(&p, &link, &pulse, 0.0, &cfg).unwrap();
    let b = evaluate(&p, &link, &pulse, 0.0, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mi_std, 0.0);
}

#[test]
fn sweep_records_failures_and_continues() {
    let out = sweep_power(&[1.0, 2.0], |p| {
        if p > 1.5 {
            Err(crate::Error::Numeric("boom".into()))
        } else {
            Ok(MetricReport {
                launch_power_dbm: p,
                mi_mean: 1.0,
                mi_std: 0.0,
                kde_mi_mean: None,
                kde_mi_std: None,
                snr_db: 10.0,
                sdr_db: None,
                seed: 0,
                channel: ChannelTag::Ssfm,
            })
        }
    })
    .unwrap();
    assert!(out[0].1.is_ok() && out[1].1.is_err());
    assert!(sweep_power(&[], |_| unreachable!()).is_err());
}

#[test]
fn polarization_swap_symmetry_of_chain() {
    // Shared parameters across polarizations: swapping the H and V message
    // streams (with matching noise) swaps nothing in the loss.
    let link = short_link();
    let pulse = PulseConfig::default();
    let ctx = GraphContext::new(
        &link,
        &pulse,
        &TrainChannel::Rp {
            stages: Some(RpModelConfig::uniform(&link, 1, 4).unwrap().without_noise()),
        },
        3.0,
        64,
    )
    .unwrap();
    let p = perturbed_params(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let msgs: Vec<usize> = (0..128).map(|_| rng.gen_range(0..64)).collect();
    let swapped: Vec<usize> = msgs[64..].iter().chain(&msgs[..64]).copied().collect();
    let loss = |m: &[usize]| {
        let mut tape = Tape::new();
        let vars = p.record(&mut tape, true);
        let f = ctx.forward(&mut tape, &vars, m, 0).unwrap();
        tape.value(f.loss).item().unwrap()
    };
    assert!((loss(&msgs) - loss(&swapped)).abs() < 1e-12);
    let _ = C64::new(0.0, 0.0);
}
