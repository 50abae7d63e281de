//! Property tests for the structural invariants: Kronecker products agree
//! with dense expansion, Cholesky round trips, gram-matrix positivity, and
//! psi-statistic limits.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sgplvm_core::kernels::{KernelSpec, VariationalLatentPosterior};
use sgplvm_core::linalg::{chol, chol_solve, kron_dense, KronMatrix};

fn small_matrix(max_dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_dim).prop_flat_map(move |n| {
        proptest::collection::vec(-1.0..1.0f64, n * n)
            .prop_map(move |v| DMatrix::from_vec(n, n, v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn kron_matvec_agrees_with_dense(
        a in small_matrix(6),
        b in small_matrix(6),
        seed in 0u64..1000,
    ) {
        use rand::prelude::*;
        let mut r = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
        let v = DVector::from_fn(k.size(), |_, _| r.gen_range(-1.0..1.0));
        let fast = k.matvec(&v).unwrap();
        let exact = kron_dense(&a, &b) * &v;
        let denom = exact.norm().max(1e-9);
        prop_assert!((fast - exact).norm() / denom < 1e-12);
    }

    #[test]
    fn kron_matmat_agrees_with_dense(
        a in small_matrix(5),
        b in small_matrix(5),
        cols in 1usize..4,
        seed in 0u64..1000,
    ) {
        use rand::prelude::*;
        let mut r = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let k = KronMatrix::new(vec![a.clone(), b.clone()]).unwrap();
        let m = DMatrix::from_fn(k.size(), cols, |_, _| r.gen_range(-1.0..1.0));
        let fast = k.matmat(&m).unwrap();
        let exact = kron_dense(&a, &b) * &m;
        let denom = exact.norm().max(1e-9);
        prop_assert!((fast - exact).norm() / denom < 1e-12);
    }

    #[test]
    fn chol_solve_round_trip(m in small_matrix(6), seed in 0u64..1000) {
        use rand::prelude::*;
        let n = m.nrows();
        let spd = &m * m.transpose() + DMatrix::identity(n, n);
        let factor = chol(&spd, "prop").unwrap();
        let mut r = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, 2, |_, _| r.gen_range(-1.0..1.0));
        let x = chol_solve(&factor, &b).unwrap();
        let back = &spd * &x;
        prop_assert!((back - &b).norm() / b.norm().max(1e-9) < 1e-10);
    }

    #[test]
    fn gram_matrices_stay_psd(seed in 0u64..2000, kind in 0usize..4) {
        use rand::prelude::*;
        let mut r = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let kernel = match kind {
            0 => KernelSpec::rbf_ard(r.gen_range(0.3..2.0), vec![r.gen_range(0.3..2.0); 2]),
            1 => KernelSpec::exponential(r.gen_range(0.1..1.0)),
            2 => KernelSpec::linear(vec![r.gen_range(0.2..1.5); 2]),
            _ => KernelSpec::sum(
                r.gen_range(0.3..2.0),
                vec![r.gen_range(0.3..2.0); 2],
                vec![r.gen_range(0.2..1.5); 2],
            ),
        };
        let d = kernel.input_dim().max(2);
        let x = DMatrix::from_fn(7, d, |_, _| r.gen_range(-2.0..2.0));
        let g = kernel.gram(&x, &x).unwrap();
        let eig = sgplvm_core::linalg::sym_eig(&g).unwrap();
        prop_assert!(eig.lambda.min() >= -1e-8 * eig.lambda.max().max(1e-12));
    }

    #[test]
    fn psi_statistics_deterministic_limit(seed in 0u64..500, kind in 0usize..3) {
        use rand::prelude::*;
        let mut r = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let kernel = match kind {
            0 => KernelSpec::rbf_ard(r.gen_range(0.5..1.5), vec![r.gen_range(0.5..1.5); 2]),
            1 => KernelSpec::linear(vec![r.gen_range(0.3..1.2); 2]),
            _ => KernelSpec::sum(
                r.gen_range(0.5..1.5),
                vec![r.gen_range(0.5..1.5); 2],
                vec![r.gen_range(0.3..1.2); 2],
            ),
        };
        let mu = DMatrix::from_fn(3, 2, |_, _| r.gen_range(-1.0..1.0));
        let q = VariationalLatentPosterior::new(
            mu.clone(),
            DMatrix::from_element(3, 2, 1e-10),
        ).unwrap();
        let z = DMatrix::from_fn(3, 2, |_, _| r.gen_range(-1.0..1.0));
        let stats = kernel.psi_stats(&q, &z, false).unwrap();
        let kfu = kernel.gram(&mu, &z).unwrap();
        let denom = kfu.norm().max(1e-9);
        prop_assert!((&stats.psi1 - &kfu).norm() / denom < 1e-6);
        let k2 = kfu.transpose() * &kfu;
        prop_assert!((&stats.psi2 - &k2).norm() / k2.norm().max(1e-9) < 1e-6);
    }
}
