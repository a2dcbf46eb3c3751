//! Central finite-difference audits of the analytic gradients.
//!
//! Each audit differentiates the scalar `Σ dA ⊙ output` for a random upstream
//! gradient `dA`, so a single pass checks the full vector-Jacobian product.
//! An entry passes when `|analytic − numeric| ≤ max(1e-6 · scale, 1e-8)`,
//! with `scale = max(|analytic|, |numeric|)`.

use crate::error::Result;
use crate::net::{DropoutPlacement, Mode, ModelKind, NetworkParams, NetworkSpec};
use crate::numkit::{Matrix, Rng};
use crate::ugmm::{self, ComponentMask, DropoutSpec, UgmmGrads, UgmmLayerParams};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-8;

/// Error measure whose threshold `REL_TOL` is equivalent to the pass rule:
/// relative error, with the denominator floored at `ABS_TOL / REL_TOL`.
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_TOL / REL_TOL);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditResult {
    pub max_error: f64,
    /// Where `max_error` occurred.
    pub worst: String,
    pub entries: usize,
}

impl AuditResult {
    pub fn passed(&self) -> bool {
        self.max_error <= REL_TOL
    }

    fn record(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        let e = scaled_error(analytic, numeric);
        self.entries += 1;
        if e > self.max_error || !e.is_finite() {
            self.max_error = if e.is_finite() { e } else { f64::INFINITY };
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }

    pub fn merge(&mut self, other: AuditResult) {
        self.entries += other.entries;
        if other.max_error > self.max_error {
            self.max_error = other.max_error;
            self.worst = other.worst;
        }
    }
}

fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x0: f64) -> Result<f64> {
    let up = f(x0 + FD_STEP)?;
    let down = f(x0 - FD_STEP)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

fn weighted_sum(a: &Matrix, w: &Matrix) -> f64 {
    a.as_slice().iter().zip(w.as_slice()).map(|(x, y)| x * y).sum()
}

/// A layer-level audit case.
#[derive(Debug, Clone)]
pub struct LayerInstance {
    pub params: UgmmLayerParams,
    pub x: Matrix,
    pub d_a: Matrix,
    pub mask: Option<ComponentMask>,
}

impl LayerInstance {
    pub fn random(rng: &mut Rng, batch: usize, n_in: usize, n_out: usize, masked: bool) -> Self {
        let mut draw = |n: usize, f: &mut dyn FnMut(&mut Rng) -> f64| -> Vec<f64> { (0..n).map(|_| f(rng)).collect() };
        let mn = n_in * n_out;
        let mu = draw(mn, &mut |r| r.normal());
        let log_sigma = draw(mn, &mut |r| r.uniform_range(-0.5, 0.5));
        let pi_logit = draw(mn, &mut |r| r.normal());
        let x = draw(batch * n_in, &mut |r| 1.5 * r.normal());
        let d_a = draw(batch * n_out, &mut |r| r.normal());
        let params = UgmmLayerParams::new(
            Matrix::from_vec(n_out, n_in, mu).expect("shape"),
            Matrix::from_vec(n_out, n_in, log_sigma).expect("shape"),
            Matrix::from_vec(n_out, n_in, pi_logit).expect("shape"),
        )
        .expect("finite");
        let mask = masked.then(|| {
            ugmm::sample_mask(DropoutSpec::new(0.3, true).expect("valid p"), n_out, n_in, rng)
        });
        Self {
            params,
            x: Matrix::from_vec(batch, n_in, x).expect("shape"),
            d_a: Matrix::from_vec(batch, n_out, d_a).expect("shape"),
            mask,
        }
    }
}

pub type LayerBackward =
    dyn Fn(&UgmmLayerParams, &Matrix, &Matrix, &Matrix, Option<&ComponentMask>) -> Result<UgmmGrads>;

/// Audits `backward` (normally [`ugmm::backward`]) on one layer instance:
/// every mean, log-std, mixing logit and input entry.
pub fn audit_layer(inst: &LayerInstance, backward: &LayerBackward) -> Result<AuditResult> {
    let mask = inst.mask.as_ref();
    let a = ugmm::forward(&inst.params, &inst.x, mask)?;
    let grads = backward(&inst.params, &inst.x, &a, &inst.d_a, mask)?;
    let objective = |p: &UgmmLayerParams, x: &Matrix| -> Result<f64> {
        Ok(weighted_sum(&ugmm::forward(p, x, mask)?, &inst.d_a))
    };

    let mut result = AuditResult::default();
    let names = ["mu", "log_sigma", "pi_logit"];
    for (t, name) in names.iter().enumerate() {
        let analytic = match t {
            0 => &grads.params.mu,
            1 => &grads.params.log_sigma,
            _ => &grads.params.pi_logit,
        };
        for i in 0..analytic.as_slice().len() {
            let mut p = inst.params.clone();
            let x0 = tensor_mut(&mut p, t)[i];
            let numeric = central_difference(
                |v| {
                    tensor_mut(&mut p, t)[i] = v;
                    objective(&p, &inst.x)
                },
                x0,
            )?;
            result.record(analytic.as_slice()[i], numeric, || format!("{name}[{i}]"));
        }
    }
    for i in 0..inst.x.as_slice().len() {
        let mut x = inst.x.clone();
        let x0 = x.as_slice()[i];
        let numeric = central_difference(
            |v| {
                x.as_mut_slice()[i] = v;
                objective(&inst.params, &x)
            },
            x0,
        )?;
        result.record(grads.d_x.as_slice()[i], numeric, || format!("x[{i}]"));
    }
    Ok(result)
}

fn tensor_mut(p: &mut UgmmLayerParams, t: usize) -> &mut [f64] {
    match t {
        0 => p.mu.as_mut_slice(),
        1 => p.log_sigma.as_mut_slice(),
        _ => p.pi_logit.as_mut_slice(),
    }
}

/// A whole-network audit case with its dropout masks fixed up front.
#[derive(Debug, Clone)]
pub struct NetworkInstance {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub x: Matrix,
    pub d_out: Matrix,
    pub masks: Vec<Option<crate::net::LayerMask>>,
}

impl NetworkInstance {
    /// Random toy network with widths at most `[5, 4, 3]` and batch at most 3.
    pub fn random(rng: &mut Rng, kind: ModelKind, with_dropout: bool) -> Result<Self> {
        let widths = vec![2 + rng.below(4), 2 + rng.below(3), 2 + rng.below(2)];
        let batch = 1 + rng.below(3);
        let spec = NetworkSpec {
            kind,
            layer_widths: widths.clone(),
            dropout: if with_dropout { vec![DropoutPlacement { layer: 1, p: 0.3 }] } else { vec![] },
            mode: Mode::Discriminative,
            seed: 0,
        };
        let mut params = NetworkParams::init(&spec, rng)?;
        // Move away from the symmetric initial point so every gradient term matters.
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        params.clamp_log_sigma();
        let x = Matrix::from_vec(batch, widths[0], (0..batch * widths[0]).map(|_| rng.normal()).collect())?;
        let c = widths[2];
        let d_out = Matrix::from_vec(batch, c, (0..batch * c).map(|_| rng.normal()).collect())?;
        let masks = if with_dropout {
            params.sample_masks(&spec, batch, rng)?
        } else {
            vec![None; params.layers().len()]
        };
        Ok(Self { spec, params, x, d_out, masks })
    }
}

pub fn audit_network(inst: &NetworkInstance) -> Result<AuditResult> {
    let cache = inst.params.forward_with_masks(&inst.x, inst.masks.clone())?;
    let grads = inst.params.backward(&cache, &inst.d_out)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut result = AuditResult::default();
    for (t, g) in analytic.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let mut p = inst.params.clone();
            let x0 = p.tensors()[t][i];
            let numeric = central_difference(
                |v| {
                    p.tensors_mut()[t][i] = v;
                    let out = p.forward_with_masks(&inst.x, inst.masks.clone())?.outputs;
                    Ok(weighted_sum(&out, &inst.d_out))
                },
                x0,
            )?;
            result.record(a, numeric, || format!("tensor {t}[{i}]"));
        }
    }
    Ok(result)
}

/// Summary of a full audit run.
#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub layer: AuditResult,
    pub network: AuditResult,
    pub layer_instances: usize,
    pub network_instances: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layer.passed() && self.network.passed()
    }

    pub fn max_error(&self) -> f64 {
        self.layer.max_error.max(self.network.max_error)
    }
}

/// Layer audits at `(batch, n_in, n_out) = sizes` plus random smaller shapes,
/// and whole-network audits for both model kinds; half of each with dropout
/// masks.
pub fn run_gradcheck(
    seed: u64,
    sizes: (usize, usize, usize),
    instances: usize,
    backward: &LayerBackward,
) -> Result<GradcheckReport> {
    let mut rng = Rng::new(seed);
    let mut report = GradcheckReport::default();
    for i in 0..instances {
        let masked = i % 2 == 1;
        let (b, n, m) = if i == 0 || i == 1 {
            sizes
        } else {
            (1 + rng.below(sizes.0), 1 + rng.below(sizes.1), 1 + rng.below(sizes.2))
        };
        let inst = LayerInstance::random(&mut rng, b, n, m, masked);
        report.layer.merge(audit_layer(&inst, backward)?);
        report.layer_instances += 1;
    }
    for i in 0..instances {
        let kind = if i % 2 == 0 { ModelKind::Ugmm } else { ModelKind::Ffnn };
        let inst = NetworkInstance::random(&mut rng, kind, (i / 2) % 2 == 1)?;
        report.network.merge(audit_network(&inst)?);
        report.network_instances += 1;
    }
    Ok(report)
}
