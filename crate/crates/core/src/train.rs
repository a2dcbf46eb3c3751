//! Losses, Adam, the multi-step learning-rate schedule and the epoch loop.

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::net::{predict, Mode, ModelKind, NetworkParams, NetworkSpec};
use crate::numkit::{softmax_in_place, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr0: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", format!("must lie in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", format!("must lie in [0, 1), got {}", self.beta2)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", format!("must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Multiply the learning rate by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("milestones", "must be strictly increasing"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `lr0 · gamma^(number of milestones ≤ epoch)`.
pub fn lr_at_epoch(sched: &ScheduleConfig, lr0: f64, epoch: usize) -> f64 {
    let passed = sched.milestones.iter().filter(|&&m| m <= epoch).count();
    let mut lr = lr0;
    for _ in 0..passed {
        lr *= sched.gamma;
    }
    lr
}

fn check_labels(outputs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != outputs.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), outputs.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= outputs.cols()) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", outputs.cols())));
    }
    if labels.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient with respect to the outputs.
pub fn cross_entropy(outputs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(outputs, labels)?;
    let batch = outputs.rows() as f64;
    let mut grad = outputs.clone();
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = outputs.row(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let g = grad.row_mut(b);
        softmax_in_place(g);
        g[label] -= 1.0;
        g.iter_mut().for_each(|v| *v /= batch);
    }
    Ok((loss / batch, grad))
}

/// Negative mean true-class output, read as `−ln P(y, x)`.
pub fn generative_nll(outputs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(outputs, labels)?;
    let batch = outputs.rows() as f64;
    let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        loss -= outputs[(b, label)];
        grad[(b, label)] = -1.0 / batch;
    }
    Ok((loss / batch, grad))
}

pub fn loss_for_mode(mode: Mode, outputs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    match mode {
        Mode::Discriminative => cross_entropy(outputs, labels),
        Mode::Generative => generative_nll(outputs, labels),
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update, followed by the `log_sigma` clamp.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut AdamState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    let shapes = |p: &NetworkParams| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    let expected = shapes(params);
    if shapes(grads) != expected || shapes(&state.m) != expected || shapes(&state.v) != expected {
        return Err(Error::Shape("optimizer state or gradients do not match the parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms.iter_mut()).zip(vs.iter_mut()) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    params.clamp_log_sigma();
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut NetworkParams, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().flat_map(|t| t.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm gradient clip; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Defaults for a model kind: uGMM starts at `1e-2` with clipping at 10,
    /// the FFNN at `1e-3` without clipping.
    pub fn defaults_for(kind: ModelKind) -> Self {
        let (lr0, grad_clip) = match kind {
            ModelKind::Ugmm => (1e-2, Some(10.0)),
            ModelKind::Ffnn => (1e-3, None),
        };
        Self {
            optim: OptimConfig { lr0, ..OptimConfig::default() },
            schedule: ScheduleConfig { milestones: vec![20, 45, 60], gamma: 0.1 },
            epochs: 100,
            batch_size: 128,
            grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,test_accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:e},{},{}\n", e.epoch, e.lr, e.train_loss, e.test_accuracy));
        }
        out
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub adam: AdamState,
    pub report: TrainReport,
}

pub fn train_run(
    spec: &NetworkSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    train_run_with(spec, train, test, cfg, rng, |_| {})
}

/// The epoch loop. `rng` is consumed in a fixed order: parameter init, then
/// per epoch the shuffle permutation followed by each batch's dropout masks
/// (layer by layer).
pub fn train_run_with(
    spec: &NetworkSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    for (name, ds) in [("train", train), ("test", test)] {
        if ds.x.cols() != spec.input_width() {
            return Err(Error::Data(format!(
                "{name} set has {} features, network expects {}",
                ds.x.cols(),
                spec.input_width()
            )));
        }
        if ds.class_count > spec.n_classes() {
            return Err(Error::Data(format!(
                "{name} set has {} classes, network outputs {}",
                ds.class_count,
                spec.n_classes()
            )));
        }
    }
    if train.len() == 0 {
        return Err(Error::Data("empty training set".into()));
    }

    let mut params = NetworkParams::init(spec, rng)?;
    let mut adam = AdamState::new(&params);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(&cfg.schedule, cfg.optim.lr0, epoch);
        let mut loss_sum = 0.0;
        let order = batches(train, cfg.batch_size, true, rng);
        for (x, y) in order {
            let cache = params.forward(spec, &x, true, rng)?;
            let (loss, d_out) = loss_for_mode(spec.mode, &cache.outputs, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss} in epoch {epoch}")));
            }
            loss_sum += loss * y.len() as f64;
            let mut grads = params.backward(&cache, &d_out)?;
            if let Some(c) = cfg.grad_clip {
                let norm = clip_global_norm(&mut grads, c);
                if !norm.is_finite() {
                    return Err(Error::Numerical(format!("gradient norm became {norm} in epoch {epoch}")));
                }
            }
            adam_step(&mut params, &grads, &mut adam, &cfg.optim, lr)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            test_accuracy: evaluate(&params, &test.x, &test.y)?,
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok(TrainOutcome { params, adam, report })
}

/// Fraction of rows whose predicted class equals the label.
pub fn evaluate(params: &NetworkParams, x: &Matrix, y: &[usize]) -> Result<f64> {
    if x.rows() != y.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", x.rows(), y.len())));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    for start in (0..x.rows()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(x.rows())).collect();
        let out = params.infer(&x.select_rows(&idx))?;
        correct += predict(&out, Mode::Discriminative)
            .iter()
            .zip(&y[start..])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ugmm::UgmmLayerParams;
    use crate::net::Layer;

    fn milestone_schedule() -> ScheduleConfig {
        ScheduleConfig { milestones: vec![20, 45, 60], gamma: 0.1 }
    }

    #[test]
    fn schedule_values() {
        let s = milestone_schedule();
        assert_eq!(lr_at_epoch(&s, 1e-2, 19), 1e-2);
        assert_eq!(lr_at_epoch(&s, 1e-2, 20), 1e-2 * 0.1);
        assert_eq!(lr_at_epoch(&s, 1e-2, 44), 1e-2 * 0.1);
        assert_eq!(lr_at_epoch(&s, 1e-2, 45), 1e-2 * 0.1 * 0.1);
        assert_eq!(lr_at_epoch(&s, 1e-2, 60), 1e-2 * 0.1 * 0.1 * 0.1);
        assert!((lr_at_epoch(&s, 1e-2, 60) - 1e-5).abs() < 1e-20);
        let flat = ScheduleConfig { milestones: vec![], gamma: 0.5 };
        assert_eq!(lr_at_epoch(&flat, 0.3, 1000), 0.3);
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleConfig { milestones: vec![5, 5], gamma: 0.1 }.validate().is_err());
        assert!(ScheduleConfig { milestones: vec![5], gamma: 1.0 }.validate().is_err());
        assert!(milestone_schedule().validate().is_ok());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let out = Matrix::filled(3, 10, 0.7);
        let (loss, g) = cross_entropy(&out, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
        for row in g.iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_large_margin_is_near_zero() {
        let out = Matrix::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy(&out, &[0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-20);
        assert!(cross_entropy(&out, &[3]).is_err());
    }

    #[test]
    fn generative_nll_negates_true_root() {
        let out = Matrix::from_rows(&[vec![-1.0, -2.0]]).unwrap();
        let (loss, g) = generative_nll(&out, &[0]).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g.as_slice(), &[-1.0, 0.0]);
        assert!(generative_nll(&out, &[2]).is_err());
    }

    fn scalar_net(value: f64) -> NetworkParams {
        let one = |v: f64| Matrix::from_vec(1, 1, vec![v]).unwrap();
        NetworkParams::new(vec![Layer::Ugmm(
            UgmmLayerParams::new(one(value), one(0.0), one(0.0)).unwrap(),
        )])
        .unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_net(1.0);
        let mut state = AdamState::new(&p);
        let g = scalar_net(0.25);
        adam_step(&mut p, &g, &mut state, &OptimConfig::default(), 0.01).unwrap();
        let mu = p.tensors()[0][0];
        assert!((mu - (1.0 - 0.01)).abs() < 1e-8);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_net(1.5);
        let before = p.clone();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &scalar_net(0.0), &mut state, &OptimConfig::default(), 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = OptimConfig::default();
        let grads = [0.3, -1.2, 0.05];
        let lr = 0.02;

        let (mut theta, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
        }

        let mut p = scalar_net(0.4);
        let mut state = AdamState::new(&p);
        for g in grads {
            adam_step(&mut p, &scalar_net(g), &mut state, &cfg, lr).unwrap();
        }
        assert!((p.tensors()[0][0] - theta).abs() < 1e-12);
    }

    #[test]
    fn adam_clamps_log_sigma() {
        let one = |v: f64| Matrix::from_vec(1, 1, vec![v]).unwrap();
        let mut p = NetworkParams::new(vec![Layer::Ugmm(
            UgmmLayerParams::new(one(0.0), one(-9.999), one(0.0)).unwrap(),
        )])
        .unwrap();
        let mut state = AdamState::new(&p);
        let g = NetworkParams::new(vec![Layer::Ugmm(
            UgmmLayerParams::new(one(0.0), one(5.0), one(0.0)).unwrap(),
        )])
        .unwrap();
        adam_step(&mut p, &g, &mut state, &OptimConfig::default(), 1.0).unwrap();
        assert_eq!(p.tensors()[1][0], crate::ugmm::LOG_SIGMA_MIN);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = scalar_net(30.0);
        let norm = clip_global_norm(&mut g, 10.0);
        assert_eq!(norm, 30.0);
        assert!((g.tensors()[0][0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn optim_validation_names_fields() {
        let bad = OptimConfig { lr0: -1.0, ..OptimConfig::default() };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lr"),
            other => panic!("{other:?}"),
        }
    }
}
