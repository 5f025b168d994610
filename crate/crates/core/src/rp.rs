//! First-order regular-perturbation (RP) channel model.
//!
//! A stage of length z is approximated by a linear branch D_z[u + η] plus
//! N_br − 1 nonlinear branches D_{z−mδ}[K_{δ,m}[u_L(mδ)]], m = 1..N_br−1.
//! Branches are independent; they are evaluated with `rayon::join` over a
//! fixed binary split of the branch range, so the reduction tree (and hence
//! the floating-point result) does not depend on the worker count.
//!
//! Everything is computed in the frequency domain with the common factor
//! H(z) pulled out of the sum:
//!
//! ```text
//! Y = H(z) · ( X_S + Σ_m conj(H(mδ)) · F[ K_m( F⁻¹[X_{k(m)} · H(mδ)] ) ] )
//! ```
//!
//! where X_k is the spectrum of the stage input plus the accumulated noise
//! of the first k amplifiers of the stage.

use std::borrow::Cow;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fft;
use crate::signal::{effective_length, DualPolWaveform, LinkConfig, C64};
use crate::ssfm::{add_white_noise, ase_psd, MANAKOV_FACTOR};

/// Cached per-branch responses are kept when branches × samples stays below this.
const RESPONSE_CACHE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpStageConfig {
    pub length_km: f64,
    pub n_branches: usize,
}

impl RpStageConfig {
    /// Branch spacing δ = z / N_br.
    pub fn delta_km(&self) -> f64 {
        self.length_km / self.n_branches as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpModelConfig {
    pub stages: Vec<RpStageConfig>,
    /// ASE noise in the linear and nonlinear branches.
    pub noise: bool,
}

impl RpModelConfig {
    /// `n_stages` equal stages covering the link, each with `n_branches`.
    pub fn uniform(link: &LinkConfig, n_stages: usize, n_branches: usize) -> Result<Self> {
        if n_stages == 0 || link.n_spans % n_stages != 0 {
            return Err(Error::config(format!(
                "{} spans cannot be split into {} equal stages",
                link.n_spans, n_stages
            )));
        }
        let spans = link.n_spans / n_stages;
        Ok(Self {
            stages: vec![
                RpStageConfig {
                    length_km: spans as f64 * link.span_length_km,
                    n_branches,
                };
                n_stages
            ],
            noise: true,
        })
    }

    /// Three stages of ten spans each with 100 branches for the 30-span link;
    /// other links get stages of up to ten spans.
    pub fn reference(link: &LinkConfig) -> Result<Self> {
        let n_stages = link.n_spans.div_ceil(10);
        Self::uniform(link, n_stages, 100)
    }

    pub fn without_noise(mut self) -> Self {
        self.noise = false;
        self
    }

    pub fn validate(&self, link: &LinkConfig) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("rp model needs at least one stage"));
        }
        let total: f64 = self.stages.iter().map(|s| s.length_km).sum();
        if (total - link.length_km()).abs() > 1e-9 * link.length_km() {
            return Err(Error::config(format!(
                "rp stages cover {total} km but the link is {} km",
                link.length_km()
            )));
        }
        for s in &self.stages {
            stage_geometry(s, link)?;
        }
        Ok(())
    }
}

fn near_integer(x: f64) -> Option<usize> {
    let r = x.round();
    ((x - r).abs() < 1e-9 * x.abs().max(1.0) && r >= 1.0).then_some(r as usize)
}

/// Returns (spans in stage, branches per span). The second is 0 for N_br = 1.
fn stage_geometry(stage: &RpStageConfig, link: &LinkConfig) -> Result<(usize, usize)> {
    if stage.n_branches < 1 {
        return Err(Error::config("n_branches must be >= 1"));
    }
    let spans = near_integer(stage.length_km / link.span_length_km).ok_or_else(|| {
        Error::config(format!(
            "stage length {} km is not a whole number of {} km spans",
            stage.length_km, link.span_length_km
        ))
    })?;
    if stage.n_branches == 1 {
        return Ok((spans, 0));
    }
    let per_span = near_integer(link.span_length_km / stage.delta_km()).ok_or_else(|| {
        Error::config(format!(
            "branch spacing {} km does not divide the {} km span",
            stage.delta_km(),
            link.span_length_km
        ))
    })?;
    Ok((spans, per_span))
}

/// Pointwise Kerr kernel K_{δ,m}[u] = i(8/9)γ·L_eff(δ)·f(mδ)·‖u‖²·u.
pub fn kerr_kernel(u: &DualPolWaveform, link: &LinkConfig, delta_km: f64, m: usize) -> DualPolWaveform {
    let coeff = kerr_coefficient(link, delta_km, m);
    let mut flat = u.to_flat();
    apply_kerr(&mut flat, u.len(), coeff);
    DualPolWaveform::from_flat(&flat, u.sample_rate).expect("shape preserved")
}

pub fn kerr_coefficient(link: &LinkConfig, delta_km: f64, m: usize) -> C64 {
    let weight = effective_length(link.alpha_per_km(), delta_km) * link.power_profile(m as f64 * delta_km);
    C64::new(0.0, MANAKOV_FACTOR * link.gamma * weight)
}

/// buf[p] ← coeff · (|u_h|² + |u_v|²) · u_p on a flat `[2, n]` buffer.
pub fn apply_kerr(buf: &mut [C64], n: usize, coeff: C64) {
    let (h, v) = buf.split_at_mut(n);
    for (a, b) in h.iter_mut().zip(v.iter_mut()) {
        let s = coeff * (a.norm_sqr() + b.norm_sqr());
        *a *= s;
        *b *= s;
    }
}

/// Adjoint of [`apply_kerr`] in the real-pair gradient convention:
/// G_u_p = conj(κ)·s·G_p + 2·u_p·Re(Σ_q conj(G_q)·κ·u_q).
pub fn kerr_adjoint(u: &[C64], grad: &[C64], n: usize, coeff: C64) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); 2 * n];
    let ck = coeff.conj();
    for t in 0..n {
        let (uh, uv) = (u[t], u[n + t]);
        let (gh, gv) = (grad[t], grad[n + t]);
        let s = uh.norm_sqr() + uv.norm_sqr();
        let r = (gh.conj() * coeff * uh + gv.conj() * coeff * uv).re;
        out[t] = ck * s * gh + 2.0 * r * uh;
        out[n + t] = ck * s * gv + 2.0 * r * uv;
    }
    out
}

/// Sums `f(i)` for i in `lo..hi` over a fixed binary tree, in parallel.
pub(crate) fn tree_sum<F>(lo: usize, hi: usize, f: &F) -> Vec<C64>
where
    F: Fn(usize) -> Vec<C64> + Sync,
{
    debug_assert!(hi > lo);
    if hi - lo == 1 {
        return f(lo);
    }
    let mid = lo + (hi - lo) / 2;
    let (mut a, b) = rayon::join(|| tree_sum(lo, mid, f), || tree_sum(mid, hi, f));
    for (x, y) in a.iter_mut().zip(&b) {
        *x += y;
    }
    a
}

/// Precomputed geometry and responses of one stage for a fixed frame size.
#[derive(Debug, Clone)]
pub struct StagePlan {
    n: usize,
    spans: usize,
    per_span: usize,
    n_branches: usize,
    delta_km: f64,
    beta2: f64,
    omega: Vec<f64>,
    coeffs: Vec<C64>,
    total: Vec<C64>,
    cached: Option<Vec<Vec<C64>>>,
}

impl StagePlan {
    pub fn new(stage: &RpStageConfig, link: &LinkConfig, n: usize, sample_rate: f64) -> Result<Self> {
        link.validate()?;
        let (spans, per_span) = stage_geometry(stage, link)?;
        let delta_km = stage.delta_km();
        let omega = fft::angular_frequencies(n, sample_rate);
        let coeffs = (1..stage.n_branches)
            .map(|m| kerr_coefficient(link, delta_km, m))
            .collect();
        let total = fft::dispersion_response(&omega, link.beta2_ps2_km, stage.length_km);
        let cached = ((stage.n_branches - 1) * n <= RESPONSE_CACHE_LIMIT).then(|| {
            (1..stage.n_branches)
                .map(|m| fft::dispersion_response(&omega, link.beta2_ps2_km, m as f64 * delta_km))
                .collect()
        });
        Ok(Self {
            n,
            spans,
            per_span,
            n_branches: stage.n_branches,
            delta_km,
            beta2: link.beta2_ps2_km,
            omega,
            coeffs,
            total,
            cached,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    /// Number of amplifiers inside the stage.
    pub fn spans(&self) -> usize {
        self.spans
    }

    fn response(&self, m: usize) -> Cow<'_, [C64]> {
        match &self.cached {
            Some(c) => Cow::Borrowed(&c[m - 1]),
            None => Cow::Owned(fft::dispersion_response(
                &self.omega,
                self.beta2,
                m as f64 * self.delta_km,
            )),
        }
    }

    /// Amplifiers passed before branch m.
    fn amps_before(&self, m: usize) -> usize {
        m / self.per_span
    }

    /// Spectra X_k of input plus accumulated noise of the first k amplifiers.
    /// `noise[k-1]` is the time-domain accumulated noise after amplifier k.
    pub fn input_spectra(&self, x: &[C64], noise: &[Vec<C64>]) -> Vec<Vec<C64>> {
        let mut base = x.to_vec();
        fft::forward_rows(&mut base, self.n);
        let mut out = Vec::with_capacity(noise.len() + 1);
        for nk in noise {
            let mut s = nk.clone();
            fft::forward_rows(&mut s, self.n);
            for (v, b) in s.iter_mut().zip(&base) {
                *v += b;
            }
            out.push(s);
        }
        out.insert(0, base);
        out
    }

    fn spectrum_at<'a>(&self, spectra: &'a [Vec<C64>], amps: usize) -> &'a [C64] {
        if spectra.len() == 1 {
            &spectra[0]
        } else {
            &spectra[amps]
        }
    }

    /// Time-domain u_L(mδ) on the flat `[2, n]` layout.
    fn linear_field(&self, spectra: &[Vec<C64>], m: usize) -> Vec<C64> {
        let h = self.response(m);
        let x = self.spectrum_at(spectra, self.amps_before(m));
        let mut a: Vec<C64> = x
            .chunks_exact(self.n)
            .flat_map(|row| row.iter().zip(h.iter()).map(|(v, r)| v * r))
            .collect();
        fft::inverse_rows(&mut a, self.n);
        a
    }

    /// Stage output from precomputed input spectra.
    pub fn forward(&self, spectra: &[Vec<C64>]) -> Vec<C64> {
        let n = self.n;
        let last = self.spectrum_at(spectra, self.spans);
        let mut acc = if self.n_branches > 1 {
            tree_sum(1, self.n_branches, &|m| {
                let mut a = self.linear_field(spectra, m);
                apply_kerr(&mut a, n, self.coeffs[m - 1]);
                fft::forward_rows(&mut a, n);
                let h = self.response(m);
                for row in a.chunks_exact_mut(n) {
                    for (v, r) in row.iter_mut().zip(h.iter()) {
                        *v *= r.conj();
                    }
                }
                a
            })
        } else {
            vec![C64::new(0.0, 0.0); 2 * n]
        };
        for (row, lrow) in acc.chunks_exact_mut(n).zip(last.chunks_exact(n)) {
            for ((v, l), t) in row.iter_mut().zip(lrow).zip(&self.total) {
                *v = (*v + l) * t;
            }
        }
        fft::inverse_rows(&mut acc, n);
        acc
    }

    /// Vector-Jacobian product: gradient w.r.t. the stage input (noise is
    /// constant) given the gradient w.r.t. the output, both real-pair.
    pub fn adjoint(&self, spectra: &[Vec<C64>], grad_out: &[C64]) -> Vec<C64> {
        let n = self.n;
        // Γ = spectrum of D_{−z} G_y
        let mut gamma = grad_out.to_vec();
        fft::forward_rows(&mut gamma, n);
        for row in gamma.chunks_exact_mut(n) {
            for (v, t) in row.iter_mut().zip(&self.total) {
                *v *= t.conj();
            }
        }
        let mut acc = if self.n_branches > 1 {
            tree_sum(1, self.n_branches, &|m| {
                let a = self.linear_field(spectra, m);
                let h = self.response(m);
                let mut gb: Vec<C64> = gamma
                    .chunks_exact(n)
                    .flat_map(|row| row.iter().zip(h.iter()).map(|(v, r)| v * r))
                    .collect();
                fft::inverse_rows(&mut gb, n);
                let mut ga = kerr_adjoint(&a, &gb, n, self.coeffs[m - 1]);
                fft::forward_rows(&mut ga, n);
                for row in ga.chunks_exact_mut(n) {
                    for (v, r) in row.iter_mut().zip(h.iter()) {
                        *v *= r.conj();
                    }
                }
                ga
            })
        } else {
            vec![C64::new(0.0, 0.0); 2 * n]
        };
        for (v, g) in acc.iter_mut().zip(&gamma) {
            *v += g;
        }
        fft::inverse_rows(&mut acc, n);
        acc
    }
}

/// One RP stage recorded as a single tape primitive on a complex `[2, n]`
/// input. `noise` holds the accumulated amplifier noise (constants).
pub fn rp_stage_on_tape(tape: &mut Tape, x: Var, plan: Arc<StagePlan>, noise: &[Vec<C64>]) -> Result<Var> {
    let xt = tape.value(x);
    if xt.shape() != [2, plan.n_samples()] || !xt.is_complex() {
        return Err(Error::Autograd {
            primitive: "rp_stage",
            detail: format!("expected complex [2, {}], got {:?}", plan.n_samples(), xt.shape()),
        });
    }
    let spectra = plan.input_spectra(xt.as_complex().unwrap(), noise);
    let y = Tensor::complex(xt.shape(), plan.forward(&spectra))?;
    Ok(tape.custom(&[x], y, Box::new(RpStageOp { plan, spectra })))
}

struct RpStageOp {
    plan: Arc<StagePlan>,
    spectra: Vec<Vec<C64>>,
}

impl CustomOp for RpStageOp {
    fn name(&self) -> &'static str {
        "rp_stage"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = self.plan.adjoint(&self.spectra, grad.as_complex().expect("complex gradient"));
        vec![Some(Tensor::complex(inputs[0].shape(), g).expect("shape"))]
    }
}

/// Accumulated ASE of the amplifiers inside one stage: entry k−1 holds the
/// sum of the first k amplifier noise draws. Each amplifier draws from its
/// own ChaCha stream derived from `seed`, `stage_index` and its position.
pub fn stage_noise(
    n: usize,
    spans: usize,
    variance: f64,
    seed: u64,
    stage_index: usize,
) -> Vec<Vec<C64>> {
    let mut out: Vec<Vec<C64>> = Vec::with_capacity(spans);
    let mut running = vec![C64::new(0.0, 0.0); 2 * n];
    for amp in 0..spans {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((stage_index as u64) << 32) | amp as u64);
        add_white_noise(&mut running, variance, &mut rng);
        out.push(running.clone());
    }
    out
}

/// One RP stage applied to `w_in`. `ase` is σ²_ASE in W/Hz per polarization;
/// zero disables noise.
pub fn rp_stage<R: Rng + ?Sized>(
    w_in: &DualPolWaveform,
    stage: &RpStageConfig,
    link: &LinkConfig,
    ase: f64,
    rng: &mut R,
) -> Result<DualPolWaveform> {
    let plan = StagePlan::new(stage, link, w_in.len(), w_in.sample_rate)?;
    let noise = if ase > 0.0 {
        stage_noise(w_in.len(), plan.spans(), ase * w_in.sample_rate, rng.gen(), 0)
    } else {
        Vec::new()
    };
    let spectra = plan.input_spectra(&w_in.to_flat(), &noise);
    DualPolWaveform::from_flat(&plan.forward(&spectra), w_in.sample_rate)
}

/// Cascade of RP stages over the whole link.
pub fn rp_propagate<R: Rng + ?Sized>(
    w: &DualPolWaveform,
    cfg: &RpModelConfig,
    link: &LinkConfig,
    rng: &mut R,
) -> Result<DualPolWaveform> {
    cfg.validate(link)?;
    let variance = if cfg.noise { ase_psd(link) * w.sample_rate } else { 0.0 };
    let seed: u64 = rng.gen();
    let mut x = w.to_flat();
    for (i, stage) in cfg.stages.iter().enumerate() {
        let plan = StagePlan::new(stage, link, w.len(), w.sample_rate)?;
        let noise = if variance > 0.0 {
            stage_noise(w.len(), plan.spans(), variance, seed, i)
        } else {
            Vec::new()
        };
        let spectra = plan.input_spectra(&x, &noise);
        x = plan.forward(&spectra);
        if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Numeric(format!("rp stage {i} produced non-finite output")));
        }
    }
    DualPolWaveform::from_flat(&x, w.sample_rate)
}
