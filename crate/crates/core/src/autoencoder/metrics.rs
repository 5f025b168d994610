use std::collections::HashMap;
use std::f64::consts::{LN_2, PI};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::constellation::{check_messages, ORDER};
use crate::error::{Error, Result};
use crate::signal::C64;

/// Posterior probabilities are clamped to this floor inside the logarithm.
pub const POSTERIOR_FLOOR: f64 = 1e-30;

/// Minimum number of samples accepted by [`kde_mi`].
pub const KDE_MIN_SAMPLES: usize = 1 << 14;

/// Cross-entropy value and how many label posteriors hit the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// Mean of −ln P(label | y), in nats.
    pub nats: f64,
    pub clamped: usize,
}

fn check_posteriors(posteriors: &[f64], labels: &[usize]) -> Result<()> {
    if posteriors.len() != labels.len() * ORDER {
        return Err(Error::input(format!(
            "{} posterior values for {} labels",
            posteriors.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::input("no samples"));
    }
    check_messages(labels)
}

/// Mean −ln P(label | y) over all rows of a `[len, 64]` posterior matrix.
pub fn xent_loss(posteriors: &[f64], labels: &[usize]) -> Result<CrossEntropy> {
    check_posteriors(posteriors, labels)?;
    let mut clamped = 0;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let p = posteriors[i * ORDER + l];
            if p < POSTERIOR_FLOOR {
                clamped += 1;
            }
            -p.max(POSTERIOR_FLOOR).ln()
        })
        .sum();
    if clamped > 0 {
        warn!("{clamped} label posteriors clamped at {POSTERIOR_FLOOR:e}");
    }
    Ok(CrossEntropy {
        nats: total / labels.len() as f64,
        clamped,
    })
}

/// Decoder-based MI lower bound 6 − xent/ln2 in bits per symbol per polarization.
pub fn mi_estimate(posteriors: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(mi_from_xent(xent_loss(posteriors, labels)?.nats))
}

pub fn mi_from_xent(nats: f64) -> f64 {
    (ORDER as f64).log2() - nats / LN_2
}

/// KDE bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Bandwidth {
    /// Silverman's rule per class: h = σ̂·n^(−1/6) per real dimension.
    Silverman,
    /// Fixed per-dimension standard deviation of the kernel.
    Fixed(f64),
}

/// MI from per-class likelihoods with uniform priors:
/// mean of log2( p(y|c_label) / (1/64·Σ_j p(y|c_j)) ) over samples.
/// `log_lik` returns ln p(y | c_j) for all j.
fn mi_from_log_likelihoods<F>(rx: &[C64], labels: &[usize], log_lik: F) -> f64
where
    F: Fn(C64) -> [f64; ORDER] + Sync,
{
    let terms: Vec<f64> = rx
        .par_iter()
        .zip(labels.par_iter())
        .map(|(&y, &l)| {
            let ll = log_lik(y);
            let max = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + ll.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (ll[l] - lse) / LN_2
        })
        .collect();
    (ORDER as f64).log2() + terms.iter().sum::<f64>() / terms.len() as f64
}

/// MI of received samples under the exact complex Gaussian likelihood with
/// total noise variance `noise_var` around `points`.
pub fn gaussian_mi(rx: &[C64], labels: &[usize], points: &[C64], noise_var: f64) -> Result<f64> {
    if rx.len() != labels.len() || rx.is_empty() {
        return Err(Error::input("rx and labels must be non-empty and equal length"));
    }
    if points.len() != ORDER || !(noise_var > 0.0) {
        return Err(Error::input("need 64 points and positive noise variance"));
    }
    check_messages(labels)?;
    Ok(mi_from_log_likelihoods(rx, labels, |y| {
        let mut out = [0.0; ORDER];
        for (o, c) in out.iter_mut().zip(points) {
            *o = -(y - c).norm_sqr() / noise_var;
        }
        out
    }))
}

struct ClassKde {
    h: f64,
    log_norm: f64,
    samples: Vec<C64>,
}

/// Spatial hash of all fit samples for cutoff-limited kernel sums.
struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<(usize, C64)>>,
}

impl Grid {
    fn key(&self, y: C64) -> (i64, i64) {
        ((y.re / self.cell).floor() as i64, (y.im / self.cell).floor() as i64)
    }
}

/// MI estimate with p(y|x) from per-class Gaussian kernel density estimates.
///
/// Even-indexed samples fit the densities and odd-indexed ones are
/// evaluated. Kernel contributions beyond eight bandwidths are dropped;
/// a sample with no class mass inside that radius falls back to an exact
/// log-domain sum.
pub fn kde_mi(rx: &[C64], labels: &[usize], bandwidth: Bandwidth) -> Result<f64> {
    if rx.len() != labels.len() {
        return Err(Error::input("rx and labels must have equal length"));
    }
    if rx.len() < KDE_MIN_SAMPLES {
        return Err(Error::input(format!(
            "KDE needs at least {KDE_MIN_SAMPLES} samples, got {}",
            rx.len()
        )));
    }
    check_messages(labels)?;
    if rx.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::input("received samples are not finite"));
    }

    let mut per_class: Vec<Vec<C64>> = vec![Vec::new(); ORDER];
    for (y, &l) in rx.iter().zip(labels).step_by(2) {
        per_class[l].push(*y);
    }
    let mut base = Vec::with_capacity(ORDER);
    for (k, s) in per_class.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::input(format!("class {k} has too few fit samples")));
        }
        let h = match bandwidth {
            Bandwidth::Fixed(h) if h > 0.0 => h,
            Bandwidth::Fixed(_) => return Err(Error::input("bandwidth must be positive")),
            Bandwidth::Silverman => silverman(s),
        };
        if !(h > 0.0) {
            return Err(Error::input(format!("class {k} has zero spread")));
        }
        base.push(h);
    }

    let eval_rx: Vec<C64> = rx.iter().skip(1).step_by(2).copied().collect();
    let eval_labels: Vec<usize> = labels.iter().skip(1).step_by(2).copied().collect();
    Ok(kde_estimate(&per_class, &base, &eval_rx, &eval_labels))
}

fn kde_estimate(per_class: &[Vec<C64>], bandwidths: &[f64], eval_rx: &[C64], eval_labels: &[usize]) -> f64 {
    let classes: Vec<ClassKde> = per_class
        .iter()
        .zip(bandwidths)
        .map(|(s, &h)| ClassKde {
            h,
            log_norm: -(2.0 * PI * h * h).ln() - (s.len() as f64).ln(),
            samples: s.clone(),
        })
        .collect();

    let h_max = classes.iter().map(|c| c.h).fold(0.0, f64::max);
    let mut grid = Grid {
        cell: 8.0 * h_max,
        cells: HashMap::new(),
    };
    for (k, c) in classes.iter().enumerate() {
        for &y in &c.samples {
            let key = grid.key(y);
            grid.cells.entry(key).or_default().push((k, y));
        }
    }

    mi_from_log_likelihoods(eval_rx, eval_labels, |y| {
        let mut dens = [0.0f64; ORDER];
        let (cx, cy) = grid.key(y);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = grid.cells.get(&(cx + dx, cy + dy)) {
                    for &(k, s) in list {
                        let c = &classes[k];
                        let d2 = (y - s).norm_sqr();
                        dens[k] += (-d2 / (2.0 * c.h * c.h)).exp();
                    }
                }
            }
        }
        let mut out = [0.0; ORDER];
        if dens.iter().all(|&d| d == 0.0) {
            for (o, c) in out.iter_mut().zip(&classes) {
                let e: Vec<f64> = c
                    .samples
                    .iter()
                    .map(|s| -(y - s).norm_sqr() / (2.0 * c.h * c.h))
                    .collect();
                let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                *o = max + e.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + c.log_norm;
            }
        } else {
            for ((o, d), c) in out.iter_mut().zip(&dens).zip(&classes) {
                *o = d.ln() + c.log_norm;
            }
        }
        out
    })
}

/// σ̂·n^(−1/6) with σ̂ the mean of the real and imaginary sample deviations.
fn silverman(samples: &[C64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<C64>() / n;
    let var_re = samples.iter().map(|s| (s.re - mean.re).powi(2)).sum::<f64>() / (n - 1.0);
    let var_im = samples.iter().map(|s| (s.im - mean.im).powi(2)).sum::<f64>() / (n - 1.0);
    0.5 * (var_re.sqrt() + var_im.sqrt()) * n.powf(-1.0 / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_posteriors() {
        let p = vec![1.0 / 64.0; 2 * ORDER];
        let x = xent_loss(&p, &[3, 60]).unwrap();
        assert!((x.nats - 64f64.ln()).abs() < 1e-12);
        assert!(mi_estimate(&p, &[3, 60]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn perfect_posteriors() {
        let mut p = vec![0.0; 2 * ORDER];
        p[5] = 1.0;
        p[ORDER + 9] = 1.0;
        assert_eq!(xent_loss(&p, &[5, 9]).unwrap().nats, 0.0);
        assert_eq!(mi_estimate(&p, &[5, 9]).unwrap(), 6.0);
    }

    #[test]
    fn hand_computed_pair() {
        let mut p = vec![0.0; 2 * ORDER];
        p[0] = 0.5;
        p[1] = 0.5;
        p[ORDER] = 0.25;
        p[ORDER + 2] = 0.75;
        let x = xent_loss(&p, &[1, 0]).unwrap();
        assert!((x.nats - 0.5 * (2f64.ln() + 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn zero_posterior_is_clamped() {
        let mut p = vec![0.0; ORDER];
        p[1] = 1.0;
        let x = xent_loss(&p, &[0]).unwrap();
        assert_eq!(x.clamped, 1);
        assert!((x.nats - 1e30f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_labels() {
        let p = vec![1.0 / 64.0; ORDER];
        assert!(xent_loss(&p, &[64]).is_err());
        assert!(xent_loss(&p, &[0, 1]).is_err());
    }

    #[test]
    fn kde_requires_enough_samples() {
        let rx = vec![C64::new(0.0, 0.0); 100];
        let labels = vec![0; 100];
        assert!(kde_mi(&rx, &labels, Bandwidth::Silverman).is_err());
    }
}
