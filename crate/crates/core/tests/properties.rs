//! Randomized invariants across the numerical core.

use proptest::prelude::*;
use ugmm_nn::data::{stratified_split, Dataset};
use ugmm_nn::numkit::{logsumexp, softmax, Matrix, Rng};
use ugmm_nn::train::{cross_entropy, generative_nll, lr_at_epoch, ScheduleConfig};
use ugmm_nn::ugmm::{self, UgmmLayerParams};

fn layer(seed: u64, n: usize, m: usize) -> UgmmLayerParams {
    let mut rng = Rng::new(seed);
    let mut draw = |scale: f64| -> Matrix {
        Matrix::from_vec(m, n, (0..m * n).map(|_| scale * rng.normal()).collect()).unwrap()
    };
    let mu = draw(2.0);
    let log_sigma = draw(0.5);
    let logits = draw(1.0);
    UgmmLayerParams::new(mu, log_sigma, logits).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logsumexp_is_shift_equivariant(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = logsumexp(&v, None).unwrap();
        let b = logsumexp(&shifted, None).unwrap();
        prop_assert!((a + c - b).abs() <= 1e-11 * b.abs().max(1.0));
        prop_assert!(a >= v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-300.0f64..300.0, 1..12)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn responsibilities_sum_to_one(seed in any::<u64>(), n in 1usize..8, m in 1usize..6) {
        let p = layer(seed, n, m);
        let mut rng = Rng::new(seed ^ 1);
        let x = Matrix::from_vec(1, n, (0..n).map(|_| 3.0 * rng.normal()).collect()).unwrap();
        let r = ugmm::responsibilities(&p, x.row(0), None).unwrap();
        for j in 0..m {
            prop_assert!((r.row(j).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
        // The mixing-logit gradient of each neuron therefore sums to zero.
        let a = ugmm::forward(&p, &x, None).unwrap();
        let ones = Matrix::filled(1, m, 1.0);
        let g = ugmm::backward(&p, &x, &a, &ones, None).unwrap();
        for j in 0..m {
            prop_assert!(g.params.pi_logit.row(j).iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn density_curves_integrate_to_one(seed in any::<u64>(), n in 1usize..6) {
        let p = layer(seed, n, 1);
        let lo = (0..n).map(|k| p.mu[(0, k)] - 8.0 * p.sigma(0, k)).fold(f64::INFINITY, f64::min);
        let hi = (0..n).map(|k| p.mu[(0, k)] + 8.0 * p.sigma(0, k)).fold(f64::NEG_INFINITY, f64::max);
        let points = 20001;
        let h = (hi - lo) / (points - 1) as f64;
        let grid: Vec<f64> = (0..points).map(|i| lo + h * i as f64).collect();
        let d = ugmm::density_curve(&p, 0, &grid).unwrap();
        let area = h * (d.iter().sum::<f64>() - 0.5 * (d[0] + d[points - 1]));
        prop_assert!((area - 1.0).abs() <= 1e-3, "area {}", area);
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero(seed in any::<u64>(), b in 1usize..6, c in 2usize..8) {
        let mut rng = Rng::new(seed);
        let out = Matrix::from_vec(b, c, (0..b * c).map(|_| 5.0 * rng.normal()).collect()).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let (loss, d) = cross_entropy(&out, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for i in 0..b {
            prop_assert!(d.row(i).iter().sum::<f64>().abs() <= 1e-12);
        }
        let (_, dg) = generative_nll(&out, &labels).unwrap();
        for i in 0..b {
            for k in 0..c {
                let expect = if k == labels[i] { -1.0 / b as f64 } else { 0.0 };
                prop_assert_eq!(dg[(i, k)], expect);
            }
        }
    }

    #[test]
    fn schedule_never_increases(mut ms in prop::collection::vec(0usize..120, 0..5), lr0 in 1e-5f64..1.0) {
        ms.sort_unstable();
        let s = ScheduleConfig { milestones: ms, gamma: 0.1 };
        let lrs: Vec<f64> = (0..120).map(|e| lr_at_epoch(&s, lr0, e)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn stratified_split_is_proportional(seed in any::<u64>(), per_class in 5usize..30, classes in 2usize..5) {
        let n = per_class * classes;
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|i| i as f64).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let ds = Dataset::new(x, y, classes).unwrap();
        let (train, test) = stratified_split(&ds, 0.2, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n);
        let expect = (per_class as f64 * 0.2).round() as usize;
        for c in test.class_counts() {
            prop_assert_eq!(c, expect);
        }
    }
}
