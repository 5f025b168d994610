use std::f64::consts::PI;

use fiber_ae::autoencoder::{gaussian_mi, kde_mi, qam64, Bandwidth};
use fiber_ae::C64;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gauss-Hermite rule for the weight exp(−t²) (Golub-Welsch).
fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    (0..n)
        .map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect()
}

/// MI of equiprobable points over complex AWGN of total variance `var`.
fn quadrature_mi(points: &[C64], var: f64, nodes: usize) -> f64 {
    let gh = gauss_hermite(nodes);
    let s = var.sqrt();
    let mut acc = 0.0;
    for xi in points {
        for &(ta, wa) in &gh {
            for &(tb, wb) in &gh {
                let z = C64::new(s * ta, s * tb);
                let lse: f64 = points
                    .iter()
                    .map(|xj| (-((xi - xj + z).norm_sqr() - z.norm_sqr()) / var).exp())
                    .sum();
                acc += wa * wb / PI * lse.log2();
            }
        }
    }
    let m = points.len() as f64;
    m.log2() - acc / m
}

fn awgn(points: &[C64], var: f64, n: usize, seed: u64) -> (Vec<C64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..points.len())).collect();
    let sd = (var / 2.0).sqrt();
    let rx = labels
        .iter()
        .map(|&l| {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            points[l] + C64::new(a, b) * sd
        })
        .collect();
    (rx, labels)
}

#[test]
fn quadrature_rule_is_exact_on_polynomials() {
    let gh = gauss_hermite(20);
    let moment = |p: i32| gh.iter().map(|(t, w)| w * t.powi(p)).sum::<f64>();
    assert!((moment(0) - PI.sqrt()).abs() < 1e-12);
    assert!((moment(2) - PI.sqrt() / 2.0).abs() < 1e-12);
    assert!((moment(4) - 3.0 * PI.sqrt() / 4.0).abs() < 1e-12);
}

#[test]
fn quadrature_oracle_is_converged_and_bounded() {
    let pts = qam64();
    let var = 10f64.powf(-1.5);
    let a = quadrature_mi(&pts, var, 40);
    let b = quadrature_mi(&pts, var, 60);
    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    assert!(a > 4.5 && a < 6.0);
    assert!(quadrature_mi(&pts, 1e-4, 20) > 5.999);
}

#[test]
fn estimators_match_quadrature_at_15_db() {
    let pts = qam64();
    let var = 10f64.powf(-1.5);
    let truth = quadrature_mi(&pts, var, 40);
    let (rx, labels) = awgn(&pts, var, 1 << 16, 3);
    let exact = gaussian_mi(&rx, &labels, &pts, var).unwrap();
    assert!((exact - truth).abs() < 0.03, "{exact} vs {truth}");
    let silverman = kde_mi(&rx, &labels, Bandwidth::Silverman).unwrap();
    assert!((silverman - truth).abs() < 0.05, "{silverman} vs {truth}");
}

#[test]
fn kde_smoothing_bias_shrinks_with_samples() {
    let pts = qam64();
    let var = 10f64.powf(-1.5);
    let (rx, labels) = awgn(&pts, var, 1 << 17, 4);
    let small = kde_mi(&rx[..1 << 14], &labels[..1 << 14], Bandwidth::Silverman).unwrap();
    let large = kde_mi(&rx, &labels, Bandwidth::Silverman).unwrap();
    assert!(large > small, "{small} -> {large}");
}
