use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::{SymbolFrame, C64};

/// Number of messages (points) per polarization.
pub const ORDER: usize = 64;

/// Trainable geometric constellation. Stores raw points; every use goes
/// through the unit-power normalized view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    points: Vec<C64>,
}

/// Square 64-QAM with unit mean power; point k sits at
/// ((2·(k mod 8) − 7) + i·(2·(k div 8) − 7)) / √42.
pub fn qam64() -> Vec<C64> {
    let scale = 1.0 / 42f64.sqrt();
    (0..ORDER)
        .map(|k| {
            let re = 2.0 * (k % 8) as f64 - 7.0;
            let im = 2.0 * (k / 8) as f64 - 7.0;
            C64::new(re, im) * scale
        })
        .collect()
}

fn normalize(points: &[C64]) -> Vec<C64> {
    let p = points.iter().map(|c| c.norm_sqr()).sum::<f64>() / points.len() as f64;
    let s = 1.0 / p.sqrt();
    points.iter().map(|c| c * s).collect()
}

impl Default for Constellation {
    fn default() -> Self {
        Self::qam64()
    }
}

impl Constellation {
    pub fn qam64() -> Self {
        Self { points: qam64() }
    }

    pub fn from_raw(points: Vec<C64>) -> Result<Self> {
        if points.len() != ORDER {
            return Err(Error::input(format!(
                "constellation needs {ORDER} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::input("constellation has non-finite points"));
        }
        if points.iter().all(|c| c.norm_sqr() == 0.0) {
            return Err(Error::input("constellation has zero power"));
        }
        Ok(Self { points })
    }

    pub fn raw(&self) -> &[C64] {
        &self.points
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [C64] {
        &mut self.points
    }

    /// Points scaled to E{|c|²} = 1.
    pub fn normalized(&self) -> Vec<C64> {
        normalize(&self.points)
    }

    /// Maps message indices of both polarizations to normalized points.
    pub fn encode(&self, msgs_h: &[usize], msgs_v: &[usize], baud: f64) -> Result<SymbolFrame> {
        check_messages(msgs_h)?;
        check_messages(msgs_v)?;
        let pts = self.normalized();
        SymbolFrame::new(
            msgs_h.iter().map(|&k| pts[k]).collect(),
            msgs_v.iter().map(|&k| pts[k]).collect(),
            baud,
        )
    }

    /// Index of the nearest normalized point.
    pub fn nearest(&self, y: C64) -> usize {
        nearest_in(&self.normalized(), y)
    }

    /// Text export: one `index re im` line per normalized point.
    pub fn to_text(&self) -> String {
        self.normalized()
            .iter()
            .enumerate()
            .map(|(k, c)| format!("{k} {:.17e} {:.17e}\n", c.re, c.im))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut points = vec![None; ORDER];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::input(format!("constellation line {}: `{line}`", lineno + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let k: usize = f[0].parse().map_err(|_| bad())?;
            let re: f64 = f[1].parse().map_err(|_| bad())?;
            let im: f64 = f[2].parse().map_err(|_| bad())?;
            if k >= ORDER {
                return Err(bad());
            }
            points[k] = Some(C64::new(re, im));
        }
        let points: Option<Vec<C64>> = points.into_iter().collect();
        Self::from_raw(points.ok_or_else(|| Error::input("constellation file misses points"))?)
    }

    /// Records the raw points as a trainable leaf and returns (leaf, normalized view).
    pub fn record(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let raw = tape.param(Tensor::complex_vec(self.points.clone()));
        Ok((raw, normalize_on_tape(tape, raw)?))
    }
}

pub(crate) fn nearest_in(points: &[C64], y: C64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in points.iter().enumerate() {
        let d = (y - c).norm_sqr();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

pub(crate) fn check_messages(msgs: &[usize]) -> Result<()> {
    match msgs.iter().find(|&&k| k >= ORDER) {
        Some(k) => Err(Error::input(format!("message index {k} outside [0, {ORDER})"))),
        None => Ok(()),
    }
}

/// Differentiable c / sqrt(mean |c|²).
pub fn normalize_on_tape(tape: &mut Tape, raw: Var) -> Result<Var> {
    let p = tape.abs_sq(raw);
    let m = tape.mean(p);
    let r = tape.powf(m, -0.5)?;
    tape.mul_scalar(raw, r)
}

/// Table lookup of flat `[2·N]` messages (H first) into a complex `[2, N]` tensor.
pub fn encode_on_tape(tape: &mut Tape, normalized: Var, msgs: &[usize]) -> Result<Var> {
    if msgs.len() % 2 != 0 {
        return Err(Error::input("message buffer must hold both polarizations"));
    }
    check_messages(msgs)?;
    let g = tape.gather(normalized, msgs)?;
    tape.reshape(g, &[2, msgs.len() / 2])
}
