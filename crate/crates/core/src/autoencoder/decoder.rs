use rand::Rng;
use serde::{Deserialize, Serialize};

use super::constellation::ORDER;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::C64;

pub const HIDDEN: usize = 32;

/// Dense layer stored row-major as `[fan_in, fan_out]` plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform in ±sqrt(6/(fan_in+fan_out)), zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            fan_in,
            fan_out,
            weights: (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect(),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn forward(&self, x: &[f64], relu: bool) -> Vec<f64> {
        let rows = x.len() / self.fan_in;
        let mut out = Vec::with_capacity(rows * self.fan_out);
        for row in x.chunks_exact(self.fan_in) {
            let start = out.len();
            out.extend_from_slice(&self.bias);
            let o = &mut out[start..];
            for (xi, w) in row.iter().zip(self.weights.chunks_exact(self.fan_out)) {
                for (oj, wj) in o.iter_mut().zip(w) {
                    *oj += xi * wj;
                }
            }
            if relu {
                o.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        out
    }
}

/// Posterior network 2 → 32 → 32 → 64 with ReLU hidden layers and softmax
/// output, shared by both polarizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderNet {
    pub layers: [Dense; 3],
    /// Multiplies received symbols before the first layer (1 / RMS of the
    /// training data).
    pub input_scale: f64,
}

/// Tape handles of the decoder parameters (weights, bias per layer).
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub layers: [(Var, Var); 3],
}

impl DecoderNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            layers: [
                Dense::glorot(2, HIDDEN, rng),
                Dense::glorot(HIDDEN, HIDDEN, rng),
                Dense::glorot(HIDDEN, ORDER, rng),
            ],
            input_scale: 1.0,
        }
    }

    /// Zeroes the output layer so every posterior is uniform.
    pub fn with_zero_output(mut self) -> Self {
        self.layers[2] = Dense::zeros(HIDDEN, ORDER);
        self
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.input_scale.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Output-layer logits, `[len, 64]` row-major.
    pub fn logits(&self, y: &[C64]) -> Vec<f64> {
        let x: Vec<f64> = y
            .iter()
            .flat_map(|v| [v.re * self.input_scale, v.im * self.input_scale])
            .collect();
        let h1 = self.layers[0].forward(&x, true);
        let h2 = self.layers[1].forward(&h1, true);
        self.layers[2].forward(&h2, false)
    }

    /// Posterior matrix P(c_k | y), `[len, 64]` row-major, rows sum to one.
    pub fn decode(&self, y: &[C64]) -> Result<Vec<f64>> {
        if y.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::input("decoder input is not finite"));
        }
        let mut out = self.logits(y);
        for row in out.chunks_exact_mut(ORDER) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(out)
    }

    pub fn record(&self, tape: &mut Tape) -> DecoderVars {
        let mut leaf = |l: &Dense| {
            let w = tape.param(Tensor::real(&[l.fan_in, l.fan_out], l.weights.clone()).expect("layer shape"));
            let b = tape.param(Tensor::real_vec(l.bias.clone()));
            (w, b)
        };
        DecoderVars {
            layers: [leaf(&self.layers[0]), leaf(&self.layers[1]), leaf(&self.layers[2])],
        }
    }
}

/// Logits `[rows, 64]` for standardized real `[rows, 2]` inputs.
pub fn decoder_on_tape(tape: &mut Tape, vars: &DecoderVars, input: Var) -> Result<Var> {
    let mut h = input;
    for (i, (w, b)) in vars.layers.iter().enumerate() {
        h = tape.matmul(h, *w)?;
        h = tape.add_broadcast(h, *b)?;
        if i < 2 {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}
