//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line (run with `--nocapture` to see them)
//! and fails when the criterion does.
//!
//! Criterion 5 needs the MNIST IDX files in `data/mnist/` and reports SKIP
//! without them. Criterion 6 is hours of CPU time and is `#[ignore]`d.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{oracle, random_case, rel};
use ugmm_nn::audit::run_gradcheck;
use ugmm_nn::cli::{train_from_config, RunConfig};
use ugmm_nn::net::{Layer, NetworkParams, NetworkSpec};
use ugmm_nn::numkit::{Matrix, Rng};
use ugmm_nn::train::{adam_step, lr_at_epoch, AdamState, OptimConfig, ScheduleConfig};
use ugmm_nn::ugmm::{self, ComponentMask, DropoutSpec, UgmmLayerParams};

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn shipped(name: &str) -> RunConfig {
    RunConfig::load(&repo().join("configs").join(format!("{name}.json"))).unwrap()
}

/// Trains a shipped config (paths resolved against `configs/`) into a temp dir.
fn train_shipped(cfg: RunConfig, verbose: bool) -> (f64, tempfile::TempDir) {
    let out = tempfile::tempdir().unwrap();
    let run = train_from_config(cfg, &repo().join("configs"), Some(out.path()), verbose).unwrap();
    (run.final_accuracy, out)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

#[test]
fn criterion_01_gradient_fidelity() {
    let t = Instant::now();
    let report = run_gradcheck(0, (3, 4, 5), 100, &ugmm::backward).unwrap();
    let elapsed = t.elapsed();
    let pass = report.passed()
        && report.layer_instances >= 100
        && report.network_instances >= 100
        && elapsed < Duration::from_secs(30);
    verdict(
        1,
        pass,
        format!(
            "max scaled error {:.2e} over {} layer + {} network audits in {:.2?}",
            report.max_error(),
            report.layer_instances,
            report.network_instances,
            elapsed
        ),
    );
}

#[test]
fn criterion_02_forward_oracle() {
    let t = Instant::now();
    let mut rng = Rng::new(7);
    let mut worst = 0.0f64;
    let cases = 300;
    for i in 0..cases {
        let (p, x, mask) = random_case(&mut rng, i % 2 == 0);
        let fast = ugmm::forward(&p, &x, mask.as_ref()).unwrap();
        for (a, e) in fast.as_slice().iter().zip(oracle(&p, &x, mask.as_ref())) {
            worst = worst.max(rel(*a, e));
        }
    }
    let elapsed = t.elapsed();
    verdict(
        2,
        worst <= 1e-12 && elapsed < Duration::from_secs(10),
        format!("{cases} cases, worst relative error {worst:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_density_normalization() {
    let mut rng = Rng::new(3);
    let mut worst = 0.0f64;
    let neurons = 60;
    for _ in 0..neurons {
        let n = 1 + rng.below(6);
        let mut draw = |s: f64| Matrix::from_vec(1, n, (0..n).map(|_| s * rng.normal()).collect()).unwrap();
        let (mu, ls, pl) = (draw(2.0), draw(0.6), draw(1.0));
        let p = UgmmLayerParams::new(mu, ls, pl).unwrap();
        let lo = (0..n).map(|k| p.mu[(0, k)] - 8.0 * p.sigma(0, k)).fold(f64::INFINITY, f64::min);
        let hi = (0..n).map(|k| p.mu[(0, k)] + 8.0 * p.sigma(0, k)).fold(f64::NEG_INFINITY, f64::max);
        let points = 20001;
        let h = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| lo + h * i as f64).collect();
        let d = ugmm::density_curve(&p, 0, &grid).unwrap();
        let area = h * (d.iter().sum::<f64>() - 0.5 * (d[0] + d[points - 1]));
        worst = worst.max((area - 1.0).abs());
    }
    verdict(3, worst <= 1e-3, format!("{neurons} neurons, worst |area - 1| = {worst:.2e}"));
}

#[test]
fn criterion_04_iris_generative() {
    let t = Instant::now();
    let mut accs = Vec::new();
    for seed in 1..=5 {
        let mut cfg = shipped("iris-ugmm-generative");
        cfg.seed = seed;
        accs.push(train_shipped(cfg, false).0);
    }
    let elapsed = t.elapsed();
    let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let pass = median(&accs) == 1.0 && min >= 29.0 / 30.0 - 1e-12 && elapsed < Duration::from_secs(120);
    verdict(4, pass, format!("seeds 1-5 accuracies {accs:?}, {elapsed:.2?}"));
}

fn mnist_present() -> bool {
    let dir = repo().join("data/mnist");
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        .iter()
        .all(|f| dir.join(f).is_file())
}

#[test]
fn criterion_05_mnist_desk() {
    if !mnist_present() {
        println!("criterion 5: SKIP (MNIST IDX files not found in data/mnist)");
        return;
    }
    let t = Instant::now();
    let (ugmm_acc, _a) = train_shipped(shipped("mnist-ugmm-desk"), false);
    let (ffnn_acc, _b) = train_shipped(shipped("mnist-ffnn-desk"), false);
    let elapsed = t.elapsed();
    let pass = ugmm_acc >= 0.93 && ffnn_acc >= 0.95 && elapsed < Duration::from_secs(20 * 60);
    verdict(5, pass, format!("uGMM-NN {ugmm_acc:.4}, FFNN {ffnn_acc:.4}, {elapsed:.2?}"));
}

#[test]
#[ignore = "full MNIST, 100 epochs per model: hours of CPU time"]
fn criterion_06_mnist_full() {
    assert!(mnist_present(), "MNIST IDX files not found in data/mnist");
    let (u, _a) = train_shipped(shipped("mnist-ugmm"), true);
    let (f, _b) = train_shipped(shipped("mnist-ffnn"), true);
    let pass = u >= 0.972 && f >= 0.977 && (f - u) <= 0.010;
    verdict(6, pass, format!("uGMM-NN {u:.4}, FFNN {f:.4}, gap {:.2} points", 100.0 * (f - u)));
}

#[test]
fn criterion_07_schedule_exactness() {
    let s = ScheduleConfig { milestones: vec![20, 45, 60], gamma: 0.1 };
    let trace: Vec<f64> = (0..100).map(|e| lr_at_epoch(&s, 1e-2, e)).collect();
    let mut expected: Vec<f64> = vec![1e-2; 20];
    expected.extend([1e-3; 25]);
    expected.extend([1e-4; 15]);
    expected.extend([1e-5; 40]);
    let same = trace.iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(7, same && trace.len() == 100, "epochs 0-99 bit-exact against 1e-2/1e-3/1e-4/1e-5".into());
}

#[test]
fn criterion_08_dropout_contract() {
    let mut rng = Rng::new(8);
    // p = 0 masks keep everything and reproduce the unmasked pass bit for bit.
    let mut bit_identical = true;
    for _ in 0..50 {
        let (p, x, _) = random_case(&mut rng, false);
        let mask = ugmm::sample_mask(DropoutSpec::new(0.0, true).unwrap(), p.n_out(), p.n_in(), &mut rng);
        let a = ugmm::forward(&p, &x, Some(&mask)).unwrap();
        let b = ugmm::forward(&p, &x, None).unwrap();
        bit_identical &= a.as_slice().iter().zip(b.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits());
    }

    // Inference never samples: the stream is untouched and outputs ignore it.
    let spec: NetworkSpec = serde_json::from_str(
        r#"{"kind":"ugmm","layer_widths":[4,6,5,3],"dropout":[{"layer":1,"p":0.3},{"layer":2,"p":0.3}],"mode":"discriminative","seed":0}"#,
    )
    .unwrap();
    let net = NetworkParams::init(&spec, &mut rng).unwrap();
    let x = Matrix::from_vec(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mut r1 = Rng::new(99);
    let mut r2 = Rng::new(12345);
    let o1 = net.forward(&spec, &x, false, &mut r1).unwrap();
    let o2 = net.forward(&spec, &x, false, &mut r2).unwrap();
    let untouched = r1.next_u64() == Rng::new(99).next_u64();
    let inference_clean = untouched && o1.outputs == o2.outputs && o1.masks.iter().all(Option::is_none);
    let eval_spec = DropoutSpec::new(0.3, false).unwrap();
    let all_kept = ugmm::sample_mask(eval_spec, 3, 4, &mut r1) == ComponentMask::all_kept(3, 4);

    // Kept fraction under p = 0.3 over 10^6 component draws.
    let (rows, cols) = (1000, 1000);
    let mask = ugmm::sample_mask(DropoutSpec::new(0.3, true).unwrap(), rows, cols, &mut rng);
    let frac = mask.kept_count() as f64 / (rows * cols) as f64;

    let pass = bit_identical && inference_clean && all_kept && (frac - 0.7).abs() <= 0.002;
    verdict(
        8,
        pass,
        format!(
            "p=0 bit-identical: {bit_identical}; inference draws nothing: {}; kept fraction {frac:.5}",
            inference_clean && all_kept
        ),
    );
}

#[test]
fn criterion_09_determinism() {
    let bin = env!("CARGO_BIN_EXE_ugmm-nn");
    let mut all_same = true;
    let mut checked = Vec::new();
    for name in ["iris-ugmm-generative", "iris-ffnn"] {
        let cfg = repo().join("configs").join(format!("{name}.json"));
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let status = std::process::Command::new(bin)
                .args(["train", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap(), "-q"])
                .output()
                .unwrap();
            assert!(status.status.success());
        }
        for file in ["report.csv", "model.ckpt", "summary.txt"] {
            let a = std::fs::read(dirs[0].path().join(file)).unwrap();
            let b = std::fs::read(dirs[1].path().join(file)).unwrap();
            all_same &= a == b;
        }
        checked.push(name);
    }

    // Component dropout draws from the stream too; repeat one masked uGMM run in-process.
    let mut cfg = shipped("iris-ugmm-generative");
    cfg.epochs = 5;
    cfg.dropout = serde_json::from_str(r#"[{"layer":1,"p":0.3}]"#).unwrap();
    let (_, a) = train_shipped(cfg.clone(), false);
    let (_, b) = train_shipped(cfg, false);
    for file in ["report.csv", "model.ckpt"] {
        all_same &= std::fs::read(a.path().join(file)).unwrap() == std::fs::read(b.path().join(file)).unwrap();
    }
    verdict(9, all_same, format!("byte-identical report, checkpoint and summary for {checked:?} and a masked uGMM run"));
}

/// Expected log-likelihood under 0.5 N(-2, 0.25) + 0.5 N(2, 0.25), by
/// composite Simpson quadrature on [-8, 8].
fn true_expected_loglik() -> f64 {
    let logp = |y: f64| {
        let c = 0.5 * (2.0 * std::f64::consts::PI * 0.25).sqrt().recip();
        (c * ((-(y - 2.0).powi(2) / 0.5).exp() + (-(y + 2.0).powi(2) / 0.5).exp())).ln()
    };
    let n = 20_000;
    let (a, b) = (-8.0, 8.0);
    let h = (b - a) / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let y = a + h * i as f64;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * logp(y).exp() * logp(y);
    }
    s * h / 3.0
}

fn bimodal_samples(rng: &mut Rng, n: usize) -> Matrix {
    let mut data = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let centre = if rng.uniform() < 0.5 { -2.0 } else { 2.0 };
        let y = centre + 0.5 * rng.normal();
        data.extend([y; 4]);
    }
    Matrix::from_vec(n, 4, data).unwrap()
}

#[test]
fn criterion_10_one_dimensional_expressivity() {
    let reference = true_expected_loglik();
    // Independent value of the same integral (mpmath, 30 digits).
    assert!((reference - -1.418_844_998_127_647).abs() < 1e-9, "quadrature {reference}");

    let mut rng = Rng::new(10);
    let train = bimodal_samples(&mut rng, 4000);
    let held_out = bimodal_samples(&mut rng, 20000);

    // One neuron with four components; every component sees the same sample,
    // so the activation is the log-density of a four-component 1-D mixture.
    let mut net = NetworkParams::new(vec![Layer::Ugmm(UgmmLayerParams::init(4, 1, &mut rng))]).unwrap();
    let mut adam = AdamState::new(&net);
    let optim = OptimConfig { lr0: 5e-2, ..OptimConfig::default() };
    let batch = 200;
    for epoch in 0..60 {
        let lr = if epoch < 40 { 5e-2 } else { 5e-3 };
        for start in (0..train.rows()).step_by(batch) {
            let idx: Vec<usize> = (start..(start + batch).min(train.rows())).collect();
            let x = train.select_rows(&idx);
            let Layer::Ugmm(p) = &net.layers()[0] else { unreachable!() };
            let a = ugmm::forward(p, &x, None).unwrap();
            // Ascend the mean log-likelihood, i.e. descend its negation.
            let d_a = Matrix::filled(x.rows(), 1, -1.0 / x.rows() as f64);
            let g = ugmm::backward(p, &x, &a, &d_a, None).unwrap();
            let grads = NetworkParams::new(vec![Layer::Ugmm(g.params)]).unwrap();
            adam_step(&mut net, &grads, &mut adam, &optim, lr).unwrap();
        }
    }
    let Layer::Ugmm(p) = &net.layers()[0] else { unreachable!() };
    let a = ugmm::forward(p, &held_out, None).unwrap();
    let avg = a.as_slice().iter().sum::<f64>() / a.rows() as f64;
    let gap = reference - avg;
    verdict(
        10,
        gap.abs() <= 0.1,
        format!("held-out mean log-likelihood {avg:.4} vs true {reference:.4} (gap {gap:.4} nats)"),
    );
}
