use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rotocal::distributions::{ks_statistic_uniform, sample_laplace, uniformize, LaplaceModel};
use rotocal::tensor::{householder_qr, random_hadamard, FlopCounter, FlopTag, Matrix};

fn gaussian(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qr_factor_invariants(n in 1usize..24, seed in any::<u64>()) {
        let a = gaussian(n, seed);
        let f = householder_qr(&a, &FlopCounter::new()).unwrap();
        prop_assert!(f.q.orthogonality_error() < 1e-10);
        for i in 0..n {
            prop_assert!(f.r[(i, i)] >= 0.0);
            for j in 0..i {
                prop_assert_eq!(f.r[(i, j)], 0.0);
            }
        }
        let qr = f.q.matmul(&f.r).unwrap();
        prop_assert!(qr.sub(&a).unwrap().frobenius_norm() <= 1e-10 * a.frobenius_norm());
        let again = householder_qr(&a, &FlopCounter::new()).unwrap();
        prop_assert_eq!(&again.q, &f.q);
        prop_assert_eq!(&again.r, &f.r);
    }

    #[test]
    fn hadamard_is_orthogonal(log_n in 0u32..=10, seed in any::<u64>()) {
        let h = random_hadamard(1 << log_n, seed).unwrap();
        let hht = h.matmul_t(&h).unwrap();
        prop_assert!(hht.sub(&Matrix::identity(1 << log_n)).unwrap().frobenius_norm() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn uniformized_laplace_is_uniform(b in 0.05f64..20.0, tau_idx in 0usize..3, seed in any::<u64>()) {
        let tau = [0.5, 1.0, 4.0][tau_idx];
        let m = LaplaceModel::new(b).unwrap();
        let batch = sample_laplace(&m, 1000, 100, seed).unwrap();
        let u: Vec<f64> = batch.tokens.data().iter().map(|&x| uniformize(&m, tau, x)).collect();
        let ks = ks_statistic_uniform(&u, -tau, tau);
        prop_assert!(ks < 0.02, "b={} tau={} ks={}", b, tau, ks);
    }

    #[test]
    fn laplace_generation_is_bitwise_reproducible(seed in any::<u64>(), b in 0.1f64..5.0) {
        let m = LaplaceModel::new(b).unwrap();
        let a = sample_laplace(&m, 32, 16, seed).unwrap();
        let c = sample_laplace(&m, 32, 16, seed).unwrap();
        let bits = |x: &Matrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.tokens), bits(&c.tokens));
    }
}

#[test]
fn qr_flops_track_four_thirds_n_cubed() {
    for n in [128usize, 256, 512] {
        let flops = FlopCounter::new();
        householder_qr(&gaussian(n, n as u64), &flops).unwrap();
        let expected = 4.0 / 3.0 * (n as f64).powi(3);
        let got = flops.get(FlopTag::Qr) as f64;
        assert!((got - expected).abs() / expected < 0.2, "n={n}: {got} vs {expected}");
    }
}
