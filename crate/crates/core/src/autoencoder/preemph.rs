//! Cubic (triplet) nonlinear pre-emphasis.
//!
//! For polarization p with partner q and symbol position k (circular):
//!
//! ```text
//! Δx_p[k] = Σ_{|m|,|n| ≤ W} C[m,n] · x_p[k+m] · ( x_p[k+n]·x*_p[k+m+n] + x_q[k+n]·x*_q[k+m+n] )
//! ```
//!
//! and the output is x + Δx. The same C is used for both polarizations.

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::constellation::{qam64, ORDER};
use crate::autograd::{CustomOp, Tape, Tensor, Var};
use crate::dsp::{cdc, modulate, set_launch_power, PulseShaper};
use crate::error::{Error, Result};
use crate::rp::{rp_propagate, RpModelConfig};
use crate::signal::{dbm_to_watt, LinkConfig, PulseConfig, SymbolFrame, C64, DEFAULT_BAUD};

/// Largest |m|, |n| in the triplet window.
pub const HALF_WIDTH: usize = 10;
/// Side of the coefficient matrix (2·HALF_WIDTH + 1).
pub const WIDTH: usize = 2 * HALF_WIDTH + 1;
/// Number of coefficients.
pub const N_COEFFS: usize = WIDTH * WIDTH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreEmphasis {
    /// Row-major over (m, n), both running −W..=W.
    coeffs: Vec<C64>,
}

impl Default for PreEmphasis {
    fn default() -> Self {
        Self::zeros()
    }
}

fn offset(i: isize) -> usize {
    (i + HALF_WIDTH as isize) as usize
}

impl PreEmphasis {
    pub fn zeros() -> Self {
        Self {
            coeffs: vec![C64::new(0.0, 0.0); N_COEFFS],
        }
    }

    pub fn from_coeffs(coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != N_COEFFS {
            return Err(Error::input(format!(
                "pre-emphasis needs {N_COEFFS} coefficients, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::input("pre-emphasis has non-finite coefficients"));
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn get(&self, m: isize, n: isize) -> C64 {
        self.coeffs[offset(m) * WIDTH + offset(n)]
    }

    pub fn set(&mut self, m: isize, n: isize, value: C64) {
        self.coeffs[offset(m) * WIDTH + offset(n)] = value;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.norm_sqr() == 0.0)
    }

    pub fn apply(&self, frame: &SymbolFrame) -> Result<SymbolFrame> {
        let n = frame.len();
        if n <= WIDTH {
            return Err(Error::input(format!("frame of {n} symbols is shorter than the window")));
        }
        let out = preemphasize(&frame.to_flat(), n, &self.coeffs);
        SymbolFrame::from_flat(&out, frame.baud_rate)
    }

    /// Text export: one `m n re im` line per coefficient.
    pub fn to_text(&self) -> String {
        let w = HALF_WIDTH as isize;
        let mut s = String::new();
        for m in -w..=w {
            for n in -w..=w {
                let c = self.get(m, n);
                s.push_str(&format!("{m} {n} {:.17e} {:.17e}\n", c.re, c.im));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let w = HALF_WIDTH as isize;
        let mut out = Self::zeros();
        let mut seen = vec![false; N_COEFFS];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::input(format!("pre-emphasis line {}: `{line}`", lineno + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let m: isize = f[0].parse().map_err(|_| bad())?;
            let n: isize = f[1].parse().map_err(|_| bad())?;
            if m.abs() > w || n.abs() > w {
                return Err(bad());
            }
            let re: f64 = f[2].parse().map_err(|_| bad())?;
            let im: f64 = f[3].parse().map_err(|_| bad())?;
            out.set(m, n, C64::new(re, im));
            seen[offset(m) * WIDTH + offset(n)] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::input("pre-emphasis file misses coefficients"));
        }
        Self::from_coeffs(out.coeffs)
    }

    /// Records the coefficients as a trainable complex `[WIDTH, WIDTH]` leaf.
    pub fn record(&self, tape: &mut Tape) -> Var {
        tape.param(Tensor::complex(&[WIDTH, WIDTH], self.coeffs.clone()).expect("fixed size"))
    }
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Triplet feature x_p[k+m]·(x_p[k+n]x*_p[k+m+n] + x_q[k+n]x*_q[k+m+n]).
#[inline]
fn triplet(xp: &[C64], xq: &[C64], k: usize, m: isize, n: isize) -> C64 {
    let len = xp.len();
    let k = k as isize;
    let a = xp[wrap(k + m, len)];
    let b = wrap(k + n, len);
    let d = wrap(k + m + n, len);
    a * (xp[b] * xp[d].conj() + xq[b] * xq[d].conj())
}

/// x + Δx on a flat `[2, n]` buffer.
pub fn preemphasize(x: &[C64], n: usize, coeffs: &[C64]) -> Vec<C64> {
    let (xh, xv) = x.split_at(n);
    let w = HALF_WIDTH as isize;
    let mut out = x.to_vec();
    for (p, (xp, xq)) in [(xh, xv), (xv, xh)].into_iter().enumerate() {
        for k in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for m in -w..=w {
                let row = &coeffs[offset(m) * WIDTH..][..WIDTH];
                for (j, c) in row.iter().enumerate() {
                    if c.re != 0.0 || c.im != 0.0 {
                        acc += c * triplet(xp, xq, k, m, j as isize - w);
                    }
                }
            }
            out[p * n + k] += acc;
        }
    }
    out
}

/// Fused pre-emphasis primitive: inputs x `[2, n]` and C `[WIDTH, WIDTH]`.
struct PreEmphasisOp {
    n: usize,
}

impl CustomOp for PreEmphasisOp {
    fn name(&self) -> &'static str {
        "preemphasis"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.n;
        let x = inputs[0].as_complex().expect("complex input");
        let coeffs = inputs[1].as_complex().expect("complex coefficients");
        let g = grad.as_complex().expect("complex gradient");
        let w = HALF_WIDTH as isize;
        let zero = C64::new(0.0, 0.0);
        let mut gx = g.to_vec();
        let mut gc = vec![zero; N_COEFFS];
        let (xh, xv) = x.split_at(n);
        for p in 0..2 {
            let q = 1 - p;
            let (xp, xq) = if p == 0 { (xh, xv) } else { (xv, xh) };
            for k in 0..n {
                let gk = g[p * n + k];
                if gk == zero {
                    continue;
                }
                let ki = k as isize;
                for m in -w..=w {
                    let ia = wrap(ki + m, n);
                    let a = xp[ia];
                    for nn in -w..=w {
                        let idx = offset(m) * WIDTH + offset(nn);
                        let c = coeffs[idx];
                        let ib = wrap(ki + nn, n);
                        let id = wrap(ki + m + nn, n);
                        let (b, d, e, f) = (xp[ib], xp[id], xq[ib], xq[id]);
                        let t = b * d.conj() + e * f.conj();
                        gc[idx] += (a * t).conj() * gk;
                        let ca = c * a;
                        // holomorphic inputs: conj(∂y/∂z)·g; conjugated ones: conj(g)·∂y/∂z̄
                        gx[p * n + ia] += (c * t).conj() * gk;
                        gx[p * n + ib] += (ca * d.conj()).conj() * gk;
                        gx[q * n + ib] += (ca * f.conj()).conj() * gk;
                        gx[p * n + id] += gk.conj() * ca * b;
                        gx[q * n + id] += gk.conj() * ca * e;
                    }
                }
            }
        }
        vec![
            Some(Tensor::complex(inputs[0].shape(), gx).expect("shape")),
            Some(Tensor::complex(inputs[1].shape(), gc).expect("shape")),
        ]
    }
}

/// Records x + Δx(x; C) for x `[2, n]` and C `[WIDTH, WIDTH]`.
pub fn preemphasize_on_tape(tape: &mut Tape, x: Var, coeffs: Var) -> Result<Var> {
    let xt = tape.value(x);
    let ct = tape.value(coeffs);
    let err = |detail: String| Error::Autograd {
        primitive: "preemphasis",
        detail,
    };
    if xt.shape().len() != 2 || xt.shape()[0] != 2 || !xt.is_complex() {
        return Err(err(format!("expected complex [2, n] input, got {:?}", xt.shape())));
    }
    if ct.shape() != [WIDTH, WIDTH] || !ct.is_complex() {
        return Err(err(format!("expected complex [{WIDTH}, {WIDTH}] coefficients")));
    }
    let n = xt.shape()[1];
    if n <= WIDTH {
        return Err(err(format!("frame of {n} symbols is shorter than the window")));
    }
    let out = preemphasize(xt.as_complex().unwrap(), n, ct.as_complex().unwrap());
    let out = Tensor::complex(&[2, n], out)?;
    Ok(tape.custom(&[x, coeffs], out, Box::new(PreEmphasisOp { n })))
}

/// Settings of the regression used by [`init_preemph_with`].
#[derive(Debug, Clone)]
pub struct PreemphFit {
    /// RP model whose first-order distortion is fitted (noise is ignored).
    pub rp: RpModelConfig,
    /// Launch power at which the distortion is measured.
    pub fit_power_dbm: f64,
    pub n_symbols: usize,
    pub seed: u64,
    /// Tikhonov weight relative to the mean diagonal of the normal matrix.
    pub ridge: f64,
}

impl PreemphFit {
    pub fn for_link(link: &LinkConfig) -> Result<Self> {
        Ok(Self {
            rp: RpModelConfig::reference(link)?.without_noise(),
            fit_power_dbm: 0.0,
            n_symbols: 1 << 14,
            seed: 0x5eed,
            ridge: 1e-9,
        })
    }
}

/// Pre-emphasis coefficients for launch power `launch_power_dbm`, fitted at
/// 0 dBm on the reference RP model of `link` and rescaled linearly in power.
pub fn init_preemph(link: &LinkConfig, pulse: &PulseConfig, launch_power_dbm: f64) -> Result<PreEmphasis> {
    init_preemph_with(link, pulse, launch_power_dbm, &PreemphFit::for_link(link)?)
}

/// Least-squares fit of the noiseless RP distortion (received symbols after
/// CDC, with the common complex gain removed) onto the triplet features.
///
/// The fitted shape is rescaled linearly to the launch power and multiplied
/// by the complex gain that minimizes the residual distortion of the same RP
/// model at that power. The gain is found from two probe runs; with a large
/// accumulated nonlinear phase the channel's response to the correction is
/// far from the identity, so the plain negated fit does not cancel.
pub fn init_preemph_with(
    link: &LinkConfig,
    pulse: &PulseConfig,
    launch_power_dbm: f64,
    fit: &PreemphFit,
) -> Result<PreEmphasis> {
    link.validate()?;
    pulse.validate()?;
    let n = fit.n_symbols;
    if n <= WIDTH {
        return Err(Error::config("pre-emphasis fit needs more symbols than the window"));
    }
    if !launch_power_dbm.is_finite() {
        return Err(Error::config("launch power must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let pts = qam64();
    let msgs: Vec<usize> = (0..2 * n).map(|_| rng.gen_range(0..ORDER)).collect();
    let x: Vec<C64> = msgs.iter().map(|&k| pts[k]).collect();
    let probe = Probe::new(link, pulse, &fit.rp, &x, n)?;

    let target = probe.residual(&x, fit.fit_power_dbm)?;
    let signal: f64 = x.iter().map(|v| v.norm_sqr()).sum();
    let distortion = energy(&target);
    if distortion <= 1e-20 * signal {
        return Ok(PreEmphasis::zeros());
    }

    let Some(solution) = solve_normal_equations(&x, n, &target, fit.ridge) else {
        warn!("pre-emphasis regression is singular; falling back to zero coefficients");
        return Ok(PreEmphasis::zeros());
    };
    let shape: Vec<C64> = solution
        .iter()
        .map(|c| c * (-dbm_to_watt(launch_power_dbm) / dbm_to_watt(fit.fit_power_dbm)))
        .collect();

    // residual ≈ e0 + Re(a)·d1 + Im(a)·di for a complex gain a on the shape
    let with_gain = |a: C64| -> Vec<C64> { shape.iter().map(|c| c * a).collect() };
    let e0 = probe.residual(&x, launch_power_dbm)?;
    let step = 0.5;
    let d1 = diff(&probe.residual(&preemphasize(&x, n, &with_gain(C64::new(step, 0.0))), launch_power_dbm)?, &e0, step);
    let di = diff(&probe.residual(&preemphasize(&x, n, &with_gain(C64::new(0.0, step))), launch_power_dbm)?, &e0, step);
    let g11 = energy(&d1);
    let g22 = energy(&di);
    let g12 = real_inner(&d1, &di);
    let b1 = -real_inner(&d1, &e0);
    let b2 = -real_inner(&di, &e0);
    let det = g11 * g22 - g12 * g12;
    if !(det > 0.0) || !det.is_finite() {
        warn!("pre-emphasis gain calibration is degenerate; falling back to zero coefficients");
        return Ok(PreEmphasis::zeros());
    }
    let a = C64::new((b1 * g22 - b2 * g12) / det, (b2 * g11 - b1 * g12) / det);
    let coeffs = with_gain(a);
    let e = probe.residual(&preemphasize(&x, n, &coeffs), launch_power_dbm)?;
    if energy(&e) >= energy(&e0) {
        warn!("fitted pre-emphasis does not reduce the RP distortion; falling back to zero coefficients");
        return Ok(PreEmphasis::zeros());
    }
    PreEmphasis::from_coeffs(coeffs)
}

fn energy(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

fn real_inner(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum()
}

fn diff(a: &[C64], b: &[C64], step: f64) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| (x - y) / step).collect()
}

/// Noiseless RP transmission of a fixed reference frame.
struct Probe<'a> {
    link: &'a LinkConfig,
    pulse: &'a PulseConfig,
    rp: RpModelConfig,
    reference: &'a [C64],
    shaper: PulseShaper,
    n: usize,
}

impl<'a> Probe<'a> {
    fn new(link: &'a LinkConfig, pulse: &'a PulseConfig, rp: &RpModelConfig, reference: &'a [C64], n: usize) -> Result<Self> {
        Ok(Self {
            link,
            pulse,
            rp: rp.clone().without_noise(),
            reference,
            shaper: PulseShaper::new(*pulse, DEFAULT_BAUD, n)?,
            n,
        })
    }

    /// Received symbols for transmitted `symbols` (normalized to the launch
    /// amplitude) minus their least-squares projection onto the reference
    /// frame: the common complex gain is removed by the receiver anyway.
    fn residual(&self, symbols: &[C64], launch_power_dbm: f64) -> Result<Vec<C64>> {
        let frame = SymbolFrame::from_flat(symbols, DEFAULT_BAUD)?;
        let launched = set_launch_power(&modulate(&frame, self.pulse)?, launch_power_dbm)?;
        // the model is noiseless, so the generator is never drawn from
        let rx = rp_propagate(&launched, &self.rp, self.link, &mut ChaCha8Rng::seed_from_u64(0))?;
        let y = self.shaper.demodulate_rows(&cdc(&rx, self.link).to_flat());
        debug_assert_eq!(y.len(), 2 * self.n);
        let gain = (dbm_to_watt(launch_power_dbm) / 2.0).sqrt();
        let x = self.reference;
        let common = y.iter().zip(x).map(|(y, x)| y * x.conj()).sum::<C64>() / (gain * energy(x));
        Ok(y.iter().zip(x).map(|(y, x)| y / gain - common * x).collect())
    }
}

const FIT_CHUNK: usize = 2048;
const FIT_GROUPS: usize = 8;

/// Row-major `[rows, N_COEFFS]` triplet features of flat rows `start..start + rows`
/// (H rows first), conjugated when `conj` is set.
fn feature_rows(x: &[C64], n: usize, start: usize, rows: usize, conj: bool, out: &mut Vec<C64>) {
    let (xh, xv) = x.split_at(n);
    let w = HALF_WIDTH as isize;
    out.clear();
    for row in start..start + rows {
        let (xp, xq, k) = if row < n { (xh, xv, row) } else { (xv, xh, row - n) };
        for m in -w..=w {
            for nn in -w..=w {
                let t = triplet(xp, xq, k, m, nn);
                out.push(if conj { t.conj() } else { t });
            }
        }
    }
}

/// Solves (AᴴA + λI) c = Aᴴb by Cholesky, where A holds the triplet features
/// of `x`; the normal equations are accumulated chunk by chunk. `None` when
/// not positive definite.
fn solve_normal_equations(x: &[C64], n: usize, b: &[C64], ridge: f64) -> Option<Vec<C64>> {
    let cols = N_COEFFS;
    let total = 2 * n;
    let starts: Vec<usize> = (0..total).step_by(FIT_CHUNK).collect();
    // a fixed grouping of chunks keeps the floating-point summation order
    // independent of the worker count
    let per_group = starts.len().div_ceil(FIT_GROUPS);
    let partial: Vec<(Vec<C64>, Vec<C64>)> = starts
        .par_chunks(per_group)
        .map(|group| {
            let mut gram = vec![C64::new(0.0, 0.0); cols * cols];
            let mut rhs = vec![C64::new(0.0, 0.0); cols];
            let mut a = Vec::with_capacity(FIT_CHUNK * cols);
            let mut conj = Vec::with_capacity(FIT_CHUNK * cols);
            for &start in group {
                let rows = FIT_CHUNK.min(total - start);
                feature_rows(x, n, start, rows, false, &mut a);
                feature_rows(x, n, start, rows, true, &mut conj);
                // zgemm ignores conjugation flags, so conj(A)ᵀ is read from
                // an explicitly conjugated copy through transposed strides
                unsafe {
                    matrixmultiply::zgemm(
                        matrixmultiply::CGemmOption::Standard,
                        matrixmultiply::CGemmOption::Standard,
                        cols,
                        rows,
                        cols,
                        [1.0, 0.0],
                        conj.as_ptr() as *const [f64; 2],
                        1,
                        cols as isize,
                        a.as_ptr() as *const [f64; 2],
                        cols as isize,
                        1,
                        [1.0, 0.0],
                        gram.as_mut_ptr() as *mut [f64; 2],
                        cols as isize,
                        1,
                    );
                }
                for (row, t) in conj.chunks_exact(cols).zip(&b[start..start + rows]) {
                    for (r, c) in rhs.iter_mut().zip(row) {
                        *r += c * t;
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = vec![C64::new(0.0, 0.0); cols * cols];
    let mut rhs = vec![C64::new(0.0, 0.0); cols];
    for (g, r) in &partial {
        gram.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let mean_diag = (0..cols).map(|i| gram[i * cols + i].re).sum::<f64>() / cols as f64;
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return None;
    }
    let mut g = DMatrix::from_row_slice(cols, cols, &gram);
    for i in 0..cols {
        g[(i, i)] += C64::new(ridge * mean_diag, 0.0);
    }
    let chol = g.cholesky()?;
    let sol = chol.solve(&nalgebra::DVector::from_column_slice(&rhs));
    let sol: Vec<C64> = sol.iter().copied().collect();
    sol.iter().all(|c| c.re.is_finite() && c.im.is_finite()).then_some(sol)
}
