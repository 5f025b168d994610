//! Thin wrapper over `rustfft` with a process-wide plan cache.
//!
//! Conventions: `forward` is the unnormalized DFT with kernel e^{-2πikn/N};
//! `inverse` divides by N so that `inverse(forward(x)) == x`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::{Fft, FftPlanner};

use crate::signal::C64;

type PlanPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

fn plans(n: usize) -> PlanPair {
    static CACHE: OnceLock<Mutex<(FftPlanner<f64>, HashMap<usize, PlanPair>)>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    let (planner, map) = &mut *guard;
    map.entry(n)
        .or_insert_with(|| (planner.plan_fft_forward(n), planner.plan_fft_inverse(n)))
        .clone()
}

pub fn forward(buf: &mut [C64]) {
    if buf.len() <= 1 {
        return;
    }
    plans(buf.len()).0.process(buf);
}

pub fn inverse(buf: &mut [C64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    plans(n).1.process(buf);
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

/// Applies `forward` to each contiguous row of length `row_len`.
pub fn forward_rows(buf: &mut [C64], row_len: usize) {
    for row in buf.chunks_exact_mut(row_len) {
        forward(row);
    }
}

pub fn inverse_rows(buf: &mut [C64], row_len: usize) {
    for row in buf.chunks_exact_mut(row_len) {
        inverse(row);
    }
}

/// Angular frequency grid in rad/ps matching the DFT bin ordering.
pub fn angular_frequencies(n: usize, sample_rate_hz: f64) -> Vec<f64> {
    let df = sample_rate_hz / n as f64;
    (0..n)
        .map(|k| {
            let signed = if k < n.div_ceil(2) {
                k as f64
            } else {
                k as f64 - n as f64
            };
            2.0 * std::f64::consts::PI * signed * df * 1e-12
        })
        .collect()
}

/// Frequency response exp(iβ2 z ω²/2) of chromatic dispersion over `z_km`.
pub fn dispersion_response(omega: &[f64], beta2_ps2_km: f64, z_km: f64) -> Vec<C64> {
    omega
        .iter()
        .map(|w| C64::from_polar(1.0, 0.5 * beta2_ps2_km * z_km * w * w))
        .collect()
}
