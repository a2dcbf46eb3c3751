//! Univariate Gaussian mixture layer.
//!
//! Neuron `j` of a layer with `N` inputs owns one Gaussian component per
//! input. Its activation is the mixture log-density with component `k`
//! evaluated at input `x_k`:
//!
//! ```text
//! a_j = ln Σ_k π_{j,k} · N(x_k; μ_{j,k}, σ²_{j,k})
//! ```
//!
//! Standard deviations are stored as `ln σ` and mixing weights as logits
//! (`π_{j,:} = softmax(pi_logit_{j,:})`), so every parameter is unconstrained.
//! Component dropout removes terms from the sum without renormalising the
//! surviving weights.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkit::{log_softmax_into, Matrix, Rng, LN_2PI};

/// `log_sigma` is clamped to this range after every optimizer step.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 10.0;

/// Rows per work unit in the batched passes. Fixed so that the gradient
/// reduction order, and therefore every bit of the result, does not depend
/// on the thread count.
const ROW_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct UgmmLayerParams {
    pub mu: Matrix,
    pub log_sigma: Matrix,
    pub pi_logit: Matrix,
}

impl UgmmLayerParams {
    /// All three matrices must be `n_out × n_in` with finite entries.
    pub fn new(mu: Matrix, log_sigma: Matrix, pi_logit: Matrix) -> Result<Self> {
        if mu.shape() != log_sigma.shape() || mu.shape() != pi_logit.shape() {
            return Err(Error::Shape(format!(
                "ugmm parameter shapes differ: mu {:?}, log_sigma {:?}, pi_logit {:?}",
                mu.shape(),
                log_sigma.shape(),
                pi_logit.shape()
            )));
        }
        if mu.rows() == 0 || mu.cols() == 0 {
            return Err(Error::Shape("ugmm layer needs at least one input and one neuron".into()));
        }
        if !(mu.is_finite() && log_sigma.is_finite() && pi_logit.is_finite()) {
            return Err(Error::Numerical("non-finite ugmm parameter".into()));
        }
        Ok(Self { mu, log_sigma, pi_logit })
    }

    /// Means drawn from `Normal(0, 1)`, unit standard deviations and a
    /// uniform mixture.
    pub fn init(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let mu: Vec<f64> = (0..n_in * n_out).map(|_| rng.normal()).collect();
        Self {
            mu: Matrix::from_vec(n_out, n_in, mu).expect("length matches"),
            log_sigma: Matrix::zeros(n_out, n_in),
            pi_logit: Matrix::zeros(n_out, n_in),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            mu: Matrix::zeros(n_out, n_in),
            log_sigma: Matrix::zeros(n_out, n_in),
            pi_logit: Matrix::zeros(n_out, n_in),
        }
    }

    /// Number of inputs (components per neuron).
    #[inline]
    pub fn n_in(&self) -> usize {
        self.mu.cols()
    }

    /// Number of neurons.
    #[inline]
    pub fn n_out(&self) -> usize {
        self.mu.rows()
    }

    /// Mixing weights, one simplex row per neuron.
    pub fn pi(&self) -> Matrix {
        let mut out = self.log_pi();
        out.as_mut_slice().iter_mut().for_each(|v| *v = v.exp());
        out
    }

    pub fn log_pi(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n_out(), self.n_in());
        for j in 0..self.n_out() {
            log_softmax_into(self.pi_logit.row(j), out.row_mut(j));
        }
        out
    }

    #[inline]
    pub fn sigma(&self, j: usize, k: usize) -> f64 {
        self.log_sigma[(j, k)].exp()
    }

    pub fn clamp_log_sigma(&mut self) {
        for v in self.log_sigma.as_mut_slice() {
            *v = v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        }
    }
}

/// Component dropout configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    p: f64,
    pub training: bool,
}

impl DropoutSpec {
    pub fn new(p: f64, training: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("dropout.p", format!("must lie in [0, 1), got {p}")));
        }
        Ok(Self { p, training })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Which components take part in each neuron's mixture. Every row keeps at
/// least one component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMask {
    n_out: usize,
    n_in: usize,
    keep: Vec<bool>,
}

impl ComponentMask {
    pub fn new(n_out: usize, n_in: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != n_out * n_in {
            return Err(Error::Shape(format!(
                "mask {n_out}x{n_in} needs {} entries, got {}",
                n_out * n_in,
                keep.len()
            )));
        }
        if n_in == 0 || keep.chunks_exact(n_in).any(|row| !row.contains(&true)) {
            return Err(Error::EmptyMixture);
        }
        Ok(Self { n_out, n_in, keep })
    }

    pub fn all_kept(n_out: usize, n_in: usize) -> Self {
        Self { n_out, n_in, keep: vec![true; n_out * n_in] }
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[bool] {
        &self.keep[j * self.n_in..(j + 1) * self.n_in]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_out, self.n_in)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Draws an independent `Bernoulli(1 - p)` keep bit per component. A row that
/// comes out empty gets one uniformly chosen component switched back on.
///
/// Outside training this returns the all-kept mask without touching `rng`.
pub fn sample_mask(spec: DropoutSpec, n_out: usize, n_in: usize, rng: &mut Rng) -> ComponentMask {
    if !spec.training {
        return ComponentMask::all_kept(n_out, n_in);
    }
    let keep_prob = 1.0 - spec.p;
    let mut keep = Vec::with_capacity(n_out * n_in);
    for _ in 0..n_out {
        let start = keep.len();
        keep.extend((0..n_in).map(|_| rng.uniform() < keep_prob));
        if !keep[start..].contains(&true) {
            let k = rng.below(n_in);
            keep[start + k] = true;
        }
    }
    ComponentMask { n_out, n_in, keep }
}

/// Per-component constants shared by the forward and backward passes:
/// `μ`, `1/σ`, and `ln π − ln σ − ½ ln 2π`.
struct Prepared {
    n_in: usize,
    mu: Vec<f64>,
    inv_sigma: Vec<f64>,
    offset: Vec<f64>,
    pi: Vec<f64>,
}

impl Prepared {
    fn new(params: &UgmmLayerParams) -> Self {
        let log_pi = params.log_pi();
        let log_sigma = params.log_sigma.as_slice();
        let offset = log_pi
            .as_slice()
            .iter()
            .zip(log_sigma)
            .map(|(lp, ls)| lp - ls - 0.5 * LN_2PI)
            .collect();
        Self {
            n_in: params.n_in(),
            mu: params.mu.as_slice().to_vec(),
            inv_sigma: log_sigma.iter().map(|ls| (-ls).exp()).collect(),
            offset,
            pi: log_pi.as_slice().iter().map(|v| v.exp()).collect(),
        }
    }

    /// Fills `terms` with each component's log-weighted density at `x` (−∞
    /// for dropped components) and returns their log-sum-exp.
    #[inline]
    fn neuron(&self, j: usize, x: &[f64], keep: Option<&[bool]>, terms: &mut [f64]) -> f64 {
        let base = j * self.n_in;
        let mu = &self.mu[base..base + self.n_in];
        let inv = &self.inv_sigma[base..base + self.n_in];
        let off = &self.offset[base..base + self.n_in];
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.n_in {
            let t = if keep.is_none_or(|m| m[k]) {
                let z = (x[k] - mu[k]) * inv[k];
                off[k] - 0.5 * z * z
            } else {
                f64::NEG_INFINITY
            };
            terms[k] = t;
            if t > max {
                max = t;
            }
        }
        let mut sum = 0.0;
        for &t in terms.iter() {
            sum += (t - max).exp();
        }
        max + sum.ln()
    }
}

fn check_inputs(params: &UgmmLayerParams, x: &Matrix, mask: Option<&ComponentMask>) -> Result<()> {
    if x.cols() != params.n_in() {
        return Err(Error::Shape(format!(
            "ugmm layer expects {} inputs, got {}",
            params.n_in(),
            x.cols()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != (params.n_out(), params.n_in()) {
            return Err(Error::Shape(format!(
                "mask shape {:?} vs layer {}x{}",
                m.shape(),
                params.n_out(),
                params.n_in()
            )));
        }
    }
    Ok(())
}

/// Batched activations: `X` is `B × N`, the result `B × M`.
pub fn forward(params: &UgmmLayerParams, x: &Matrix, mask: Option<&ComponentMask>) -> Result<Matrix> {
    check_inputs(params, x, mask)?;
    let prep = Prepared::new(params);
    let (n_in, n_out) = (params.n_in(), params.n_out());
    let mut out = Matrix::zeros(x.rows(), n_out);
    if n_out == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(n_out * ROW_CHUNK)
        .enumerate()
        .for_each(|(chunk, block)| {
            let mut terms = vec![0.0; n_in];
            for (i, out_row) in block.chunks_exact_mut(n_out).enumerate() {
                let xb = x.row(chunk * ROW_CHUNK + i);
                for (j, a) in out_row.iter_mut().enumerate() {
                    *a = prep.neuron(j, xb, mask.map(|m| m.row(j)), &mut terms);
                }
            }
        });
    Ok(out)
}

/// Posterior weight of each component for a single input vector. Dropped
/// components get 0; each row sums to 1.
pub fn responsibilities(
    params: &UgmmLayerParams,
    x: &[f64],
    mask: Option<&ComponentMask>,
) -> Result<Matrix> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    check_inputs(params, &xm, mask)?;
    let prep = Prepared::new(params);
    let mut r = Matrix::zeros(params.n_out(), params.n_in());
    let mut terms = vec![0.0; params.n_in()];
    for j in 0..params.n_out() {
        let a = prep.neuron(j, x, mask.map(|m| m.row(j)), &mut terms);
        for (rk, &t) in r.row_mut(j).iter_mut().zip(&terms) {
            *rk = (t - a).exp();
        }
    }
    Ok(r)
}

/// Gradients of `Σ_{b,j} dA[b,j] · a[b,j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UgmmGrads {
    pub params: UgmmLayerParams,
    pub d_x: Matrix,
}

/// Reverse pass. `a` must be `forward(params, x, mask)`.
///
/// With responsibilities `r` and `z = (x_k − μ)/σ`, per sample:
/// `∂a/∂μ = r z/σ`, `∂a/∂ln σ = r (z² − 1)`, `∂a/∂logit = r − π`,
/// `∂a/∂x_k = −r z/σ`.
pub fn backward(
    params: &UgmmLayerParams,
    x: &Matrix,
    a: &Matrix,
    d_a: &Matrix,
    mask: Option<&ComponentMask>,
) -> Result<UgmmGrads> {
    check_inputs(params, x, mask)?;
    let (n_in, n_out) = (params.n_in(), params.n_out());
    let batch = x.rows();
    if a.shape() != (batch, n_out) || d_a.shape() != (batch, n_out) {
        return Err(Error::Shape(format!(
            "backward expects activations and upstream gradients of shape {:?}, got {:?} and {:?}",
            (batch, n_out),
            a.shape(),
            d_a.shape()
        )));
    }
    let prep = Prepared::new(params);

    let mut d_x = Matrix::zeros(batch, n_in);
    let partials: Vec<UgmmLayerParams> = d_x
        .as_mut_slice()
        .par_chunks_mut(n_in * ROW_CHUNK)
        .enumerate()
        .map(|(chunk, dx_block)| {
            let mut g = UgmmLayerParams::zeros(n_in, n_out);
            let mut terms = vec![0.0; n_in];
            for (i, dx) in dx_block.chunks_exact_mut(n_in).enumerate() {
                let b = chunk * ROW_CHUNK + i;
                accumulate_row(&prep, x.row(b), a.row(b), d_a.row(b), mask, &mut g, dx, &mut terms);
            }
            g
        })
        .collect();

    let mut grads = UgmmLayerParams::zeros(n_in, n_out);
    for p in &partials {
        grads.mu.add_assign(&p.mu);
        grads.log_sigma.add_assign(&p.log_sigma);
        grads.pi_logit.add_assign(&p.pi_logit);
    }
    Ok(UgmmGrads { params: grads, d_x })
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_row(
    prep: &Prepared,
    x: &[f64],
    a: &[f64],
    d_a: &[f64],
    mask: Option<&ComponentMask>,
    g: &mut UgmmLayerParams,
    dx: &mut [f64],
    terms: &mut [f64],
) {
    let n_in = prep.n_in;
    for (j, (&aj, &gj)) in a.iter().zip(d_a).enumerate() {
        if gj == 0.0 {
            continue;
        }
        // Recomputing the terms is cheaper than caching B·M·N of them.
        prep.neuron(j, x, mask.map(|m| m.row(j)), terms);
        let base = j * n_in;
        let mu = &prep.mu[base..base + n_in];
        let inv = &prep.inv_sigma[base..base + n_in];
        let pi = &prep.pi[base..base + n_in];
        let g_mu = g.mu.row_mut(j);
        let g_ls = g.log_sigma.row_mut(j);
        let g_pl = g.pi_logit.row_mut(j);
        for k in 0..n_in {
            let r = (terms[k] - aj).exp();
            let z = (x[k] - mu[k]) * inv[k];
            let s = gj * r * z * inv[k];
            g_mu[k] += s;
            dx[k] -= s;
            g_ls[k] += gj * r * (z * z - 1.0);
            g_pl[k] += gj * (r - pi[k]);
        }
    }
}

/// Mixture density `P_j(y) = Σ_k π_{j,k} N(y; μ_{j,k}, σ²_{j,k})` at every
/// grid point.
pub fn density_curve(params: &UgmmLayerParams, neuron: usize, grid: &[f64]) -> Result<Vec<f64>> {
    Ok(component_curves(params, neuron, grid)?
        .iter()
        .map(|comps| comps.iter().sum())
        .collect())
}

/// Weighted component densities `π_k N(y; μ_k, σ_k²)` of one neuron, one
/// vector of `N` values per grid point.
pub fn component_curves(params: &UgmmLayerParams, neuron: usize, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if neuron >= params.n_out() {
        return Err(Error::Index(format!(
            "neuron {neuron} of a layer with {} neurons",
            params.n_out()
        )));
    }
    let mut log_pi = vec![0.0; params.n_in()];
    log_softmax_into(params.pi_logit.row(neuron), &mut log_pi);
    let mu = params.mu.row(neuron);
    let log_sigma = params.log_sigma.row(neuron);
    Ok(grid
        .iter()
        .map(|&y| {
            (0..params.n_in())
                .map(|k| {
                    let z = (y - mu[k]) * (-log_sigma[k]).exp();
                    (log_pi[k] - log_sigma[k] - 0.5 * LN_2PI - 0.5 * z * z).exp()
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(mu: &[f64], log_sigma: &[f64], pi: &[f64]) -> UgmmLayerParams {
        let n = mu.len();
        UgmmLayerParams::new(
            Matrix::from_vec(1, n, mu.to_vec()).unwrap(),
            Matrix::from_vec(1, n, log_sigma.to_vec()).unwrap(),
            Matrix::from_vec(1, n, pi.iter().map(|p| p.ln()).collect()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_component_is_gaussian_logpdf() {
        let p = layer(&[0.0], &[0.0], &[1.0]);
        let a = forward(&p, &Matrix::from_vec(1, 1, vec![0.0]).unwrap(), None).unwrap();
        assert!((a[(0, 0)] + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn components_at_their_own_means() {
        let p = layer(&[0.0, 1.0], &[0.0, 0.0], &[0.5, 0.5]);
        let a = forward(&p, &Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap(), None).unwrap();
        assert!((a[(0, 0)] + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn responsibilities_simple_cases() {
        let p = layer(&[0.3], &[0.2], &[1.0]);
        let r = responsibilities(&p, &[1.7], None).unwrap();
        assert!((r[(0, 0)] - 1.0).abs() < 1e-15);

        let p = layer(&[0.5, 0.5], &[0.1, 0.1], &[0.5, 0.5]);
        let r = responsibilities(&p, &[-1.0, -1.0], None).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((r[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_component_has_no_mixing_gradient() {
        let p = layer(&[0.3], &[0.2], &[1.0]);
        let x = Matrix::from_vec(2, 1, vec![1.7, -0.4]).unwrap();
        let a = forward(&p, &x, None).unwrap();
        let g = backward(&p, &x, &a, &Matrix::filled(2, 1, 1.3), None).unwrap();
        assert_eq!(g.params.pi_logit[(0, 0)], 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let p = UgmmLayerParams::init(3, 4, &mut rng);
        let x = Matrix::from_vec(2, 3, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let a = forward(&p, &x, None).unwrap();
        let g = backward(&p, &x, &a, &Matrix::zeros(2, 4), None).unwrap();
        assert!(g.params.mu.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.params.log_sigma.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.params.pi_logit.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.d_x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = Rng::new(0);
        let p = UgmmLayerParams::init(3, 2, &mut rng);
        assert!(matches!(forward(&p, &Matrix::zeros(1, 4), None), Err(Error::Shape(_))));
        let m = ComponentMask::all_kept(3, 3);
        assert!(matches!(forward(&p, &Matrix::zeros(1, 3), Some(&m)), Err(Error::Shape(_))));
        assert!(ComponentMask::new(1, 2, vec![false, false]).is_err());
        assert!(density_curve(&p, 2, &[0.0]).is_err());
    }

    #[test]
    fn mask_sampling_edge_cases() {
        let mut rng = Rng::new(11);
        let all = sample_mask(DropoutSpec::new(0.0, true).unwrap(), 5, 7, &mut rng);
        assert_eq!(all.kept_count(), 35);

        let spec = DropoutSpec::new(0.99, true).unwrap();
        for _ in 0..200 {
            let m = sample_mask(spec, 3, 1, &mut rng);
            assert_eq!(m.kept_count(), 3);
        }
        assert!(DropoutSpec::new(1.0, true).is_err());
        assert!(DropoutSpec::new(-0.1, true).is_err());
    }

    #[test]
    fn inference_mask_does_not_touch_rng() {
        let mut rng = Rng::new(5);
        let before = rng.clone().next_u64();
        let m = sample_mask(DropoutSpec::new(0.5, false).unwrap(), 4, 4, &mut rng);
        assert_eq!(m.kept_count(), 16);
        assert_eq!(rng.next_u64(), before);
    }

    #[test]
    fn kept_fraction_is_binomial() {
        let mut rng = Rng::new(2024);
        let m = sample_mask(DropoutSpec::new(0.3, true).unwrap(), 128, 64, &mut rng);
        let n = (128 * 64) as f64;
        let frac = m.kept_count() as f64 / n;
        let sd = (0.7 * 0.3 / n).sqrt();
        assert!((frac - 0.7).abs() <= 3.0 * sd, "kept fraction {frac}");
    }

    #[test]
    fn density_curve_values() {
        let p = layer(&[0.0], &[0.0], &[1.0]);
        let d = density_curve(&p, 0, &[0.0]).unwrap();
        assert!((d[0] - 0.398_942_280_401_432_7).abs() < 1e-15);

        // Symmetric pair at ±1: at the midpoint both halves contribute equally.
        let p = layer(&[-1.0, 1.0], &[0.0, 0.0], &[0.5, 0.5]);
        let single = layer(&[1.0], &[0.0], &[1.0]);
        let d = density_curve(&p, 0, &[0.0]).unwrap()[0];
        let s = density_curve(&single, 0, &[0.0]).unwrap()[0];
        assert!((d - s).abs() < 1e-16);
    }

    #[test]
    fn clamp_bounds_log_sigma() {
        let mut p = layer(&[0.0, 0.0], &[-30.0, 12.0], &[0.5, 0.5]);
        p.clamp_log_sigma();
        assert_eq!(p.log_sigma.as_slice(), &[LOG_SIGMA_MIN, LOG_SIGMA_MAX]);
    }
}
