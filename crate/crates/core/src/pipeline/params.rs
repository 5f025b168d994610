use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{init_preemph, Constellation, DecoderNet, DecoderVars, PreEmphasis, WIDTH};
use crate::autograd::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::{LinkConfig, PulseConfig, C64};

/// Trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Preemph,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Preemph, Group::Decoder];
}

/// All trainable state of the transceiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub constellation: Constellation,
    pub preemph: PreEmphasis,
    pub decoder: DecoderNet,
}

/// Tape handles of one recorded [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub constellation: Var,
    /// Absent when pre-emphasis is bypassed.
    pub preemph: Option<Var>,
    pub decoder: DecoderVars,
}

fn interleave(v: &[C64]) -> Vec<f64> {
    v.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn deinterleave(src: &[f64], dst: &mut [C64]) {
    for (d, p) in dst.iter_mut().zip(src.chunks_exact(2)) {
        *d = C64::new(p[0], p[1]);
    }
}

impl ModelParams {
    /// 64-QAM, zero pre-emphasis, Glorot decoder from `seed`.
    pub fn initial(seed: u64) -> Self {
        Self {
            constellation: Constellation::qam64(),
            preemph: PreEmphasis::zeros(),
            decoder: DecoderNet::new(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// [`ModelParams::initial`] with fitted pre-emphasis for `launch_power_dbm`.
    pub fn initial_with_preemph(
        seed: u64,
        link: &LinkConfig,
        pulse: &PulseConfig,
        launch_power_dbm: f64,
    ) -> Result<Self> {
        Ok(Self {
            preemph: init_preemph(link, pulse, launch_power_dbm)?,
            ..Self::initial(seed)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.decoder.is_finite()
            && self
                .constellation
                .raw()
                .iter()
                .chain(self.preemph.coeffs())
                .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Leaf tensors in recording order: constellation, pre-emphasis,
    /// then (weights, bias) of each decoder layer.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            Tensor::complex_vec(self.constellation.raw().to_vec()),
            Tensor::complex(&[WIDTH, WIDTH], self.preemph.coeffs().to_vec()).expect("fixed size"),
        ];
        for l in &self.decoder.layers {
            out.push(Tensor::real(&[l.fan_in, l.fan_out], l.weights.clone()).expect("layer shape"));
            out.push(Tensor::real_vec(l.bias.clone()));
        }
        out
    }

    /// Binds leaves created from [`ModelParams::tensors`].
    pub fn vars_from(leaves: &[Var], with_preemph: bool) -> Result<ParamVars> {
        if leaves.len() != 8 {
            return Err(Error::input(format!("expected 8 parameter leaves, got {}", leaves.len())));
        }
        Ok(ParamVars {
            constellation: leaves[0],
            preemph: with_preemph.then_some(leaves[1]),
            decoder: DecoderVars {
                layers: [(leaves[2], leaves[3]), (leaves[4], leaves[5]), (leaves[6], leaves[7])],
            },
        })
    }

    pub fn record(&self, tape: &mut Tape, with_preemph: bool) -> ParamVars {
        let leaves: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t)).collect();
        Self::vars_from(&leaves, with_preemph).expect("eight leaves")
    }

    /// Real coordinates of one group (complex values interleaved).
    pub fn group_values(&self, group: Group) -> Vec<f64> {
        match group {
            Group::Encoder => interleave(self.constellation.raw()),
            Group::Preemph => interleave(self.preemph.coeffs()),
            Group::Decoder => self
                .decoder
                .layers
                .iter()
                .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
                .collect(),
        }
    }

    pub fn set_group_values(&mut self, group: Group, values: &[f64]) {
        match group {
            Group::Encoder => deinterleave(values, self.constellation.raw_mut()),
            Group::Preemph => deinterleave(values, self.preemph.coeffs_mut()),
            Group::Decoder => {
                let mut it = values.iter().copied();
                for l in &mut self.decoder.layers {
                    l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
                }
            }
        }
    }

    /// Real-pair gradient of one group, zero where the loss does not depend on it.
    pub fn group_grads(&self, group: Group, vars: &ParamVars, grads: &Gradients) -> Vec<f64> {
        let leaf = |v: Option<Var>, like: Tensor| match v {
            Some(v) => grads.real_pair_or_zero(v, &like).to_reals(),
            None => vec![0.0; like.real_dim()],
        };
        let t = self.tensors();
        match group {
            Group::Encoder => leaf(Some(vars.constellation), t[0].clone()),
            Group::Preemph => leaf(vars.preemph, t[1].clone()),
            Group::Decoder => vars
                .decoder
                .layers
                .iter()
                .zip(t[2..].chunks_exact(2))
                .flat_map(|((w, b), tt)| {
                    let mut g = leaf(Some(*w), tt[0].clone());
                    g.extend(leaf(Some(*b), tt[1].clone()));
                    g
                })
                .collect(),
        }
    }
}
