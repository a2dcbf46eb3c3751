//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ugmm_nn::numkit::{Matrix, Rng};
use ugmm_nn::ugmm::{self, ComponentMask, DropoutSpec, UgmmLayerParams};

/// ln N(x; μ, σ²) written out independently of `numkit::gauss_logpdf`.
pub fn log_normal(x: f64, mu: f64, log_sigma: f64) -> f64 {
    let z = (x - mu) * (-log_sigma).exp();
    -0.5 * z * z - log_sigma - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    pub fn new() -> Self {
        Self { sum: 0.0, c: 0.0 }
    }
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }
    pub fn total(&self) -> f64 {
        self.sum + self.c
    }
}

/// Naive uGMM forward: a triple loop with Neumaier-compensated sums.
pub fn oracle(p: &UgmmLayerParams, x: &Matrix, mask: Option<&ComponentMask>) -> Vec<f64> {
    let (m, n) = (p.n_out(), p.n_in());
    let mut out = Vec::new();
    for b in 0..x.rows() {
        for j in 0..m {
            let logits: Vec<f64> = (0..n).map(|k| p.pi_logit[(j, k)]).collect();
            let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = Neumaier::new();
            for &l in &logits {
                z.add((l - lmax).exp());
            }
            let log_z = lmax + z.total().ln();

            let terms: Vec<f64> = (0..n)
                .filter(|&k| mask.is_none_or(|mk| mk.row(j)[k]))
                .map(|k| p.pi_logit[(j, k)] - log_z + log_normal(x[(b, k)], p.mu[(j, k)], p.log_sigma[(j, k)]))
                .collect();
            let tmax = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = Neumaier::new();
            for t in &terms {
                s.add((t - tmax).exp());
            }
            out.push(tmax + s.total().ln());
        }
    }
    out
}

pub fn random_case(rng: &mut Rng, masked: bool) -> (UgmmLayerParams, Matrix, Option<ComponentMask>) {
    let (b, n, m) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
    let mut draw = |len: usize, scale: f64| -> Vec<f64> { (0..len).map(|_| scale * rng.normal()).collect() };
    let mu = Matrix::from_vec(m, n, draw(m * n, 2.0)).unwrap();
    let log_sigma = Matrix::from_vec(m, n, draw(m * n, 0.7)).unwrap();
    let logits = Matrix::from_vec(m, n, draw(m * n, 1.5)).unwrap();
    let x = Matrix::from_vec(b, n, draw(b * n, 3.0)).unwrap();
    let params = UgmmLayerParams::new(mu, log_sigma, logits).unwrap();
    let mask = masked.then(|| ugmm::sample_mask(DropoutSpec::new(0.4, true).unwrap(), m, n, rng));
    (params, x, mask)
}

/// Relative error with the denominator floored at 1, because activations
/// pass through zero and a relative measure is meaningless there.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

