//! Structural properties of the collapsed bound: the exact-collapse identity
//! at tied inducing points, the upper-bound property against the exact
//! structured likelihood, kernel-expectation agreement with the Monte-Carlo
//! oracle, and automatic relevance determination on synthetic data.

mod common;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use sgplvm_core::kernels::{KernelSpec, VariationalLatentPosterior};
use sgplvm_core::model::{latent_prior_kl, SgplvmModel, TrainableFlags};
use sgplvm_core::opt::OptimizerSettings;
use sgplvm_core::sgpr::{SgprModel, StructuredInputs};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

struct CollapseSetup {
    model: SgplvmModel,
    loglik: f64,
}

/// SGPLVM with m_xi = n_xi, z = mu, s -> 0 next to the exact SGPR
/// likelihood at the same deterministic latents.
fn collapse_setup(seed: u64, m_xi_override: Option<usize>) -> CollapseSetup {
    let mut r = rng(seed);
    let n_xi = 5;
    let d_xi = 2;
    let x1 = DMatrix::from_fn(4, 1, |i, _| i as f64 / 3.0);
    let x2 = DMatrix::from_fn(4, 1, |i, _| i as f64 / 3.0);
    let mu = DMatrix::from_fn(n_xi, d_xi, |_, _| r.gen_range(-1.2..1.2));
    let kernel_xi = KernelSpec::rbf_ard(1.3, vec![0.9, 1.1]);
    let kernels_s = vec![KernelSpec::exponential(0.5), KernelSpec::exponential(0.7)];
    let beta: f64 = 4.0;
    let y = common::sample_structured_gp(
        &kernel_xi,
        &mu,
        &kernels_s,
        &[x1.clone(), x2.clone()],
        (1.0 / beta).sqrt(),
        1,
        seed ^ 0xfeed,
    );

    let mut sgpr = SgprModel::new(
        StructuredInputs::new(mu.clone(), vec![x1.clone(), x2.clone()]).unwrap(),
        y.clone(),
        kernel_xi.clone(),
        kernels_s.clone(),
        beta,
    )
    .unwrap();
    sgpr.rebuild_cache().unwrap();
    let loglik = sgpr.log_likelihood().unwrap();

    let (z, m_xi) = match m_xi_override {
        None => (mu.clone(), n_xi),
        Some(m) => (
            DMatrix::from_fn(m, d_xi, |_, _| r.gen_range(-1.2..1.2)),
            m,
        ),
    };
    let _ = m_xi;
    let q = VariationalLatentPosterior::new(mu, DMatrix::from_element(n_xi, d_xi, 1e-10)).unwrap();
    let model = SgplvmModel::new(
        y,
        vec![x1, x2],
        q,
        z,
        kernel_xi,
        kernels_s,
        beta,
        TrainableFlags::default(),
    )
    .unwrap();
    CollapseSetup { model, loglik }
}

#[test]
fn collapsed_bound_collapses_at_tied_inducing_points() {
    let setup = collapse_setup(301, None);
    let (bound, cache) = setup.model.collapsed_bound().unwrap();
    let kl = cache.kl;
    let gap = (bound + kl - setup.loglik).abs() / setup.loglik.abs();
    assert!(
        gap < 1e-6,
        "collapse gap {gap:.3e}: bound+KL {} vs loglik {}",
        bound + kl,
        setup.loglik
    );
}

#[test]
fn collapsed_bound_never_exceeds_exact_likelihood() {
    for seed in [302, 303, 304] {
        for m_xi in [2, 3] {
            let setup = collapse_setup(seed, Some(m_xi));
            let (bound, cache) = setup.model.collapsed_bound().unwrap();
            assert!(
                bound + cache.kl <= setup.loglik + 1e-9 * setup.loglik.abs(),
                "bound violated: {} > {}",
                bound + cache.kl,
                setup.loglik
            );
        }
    }
}

#[test]
fn psi_statistics_match_mc_oracle_quick() {
    // a faster version of the acceptance MC suite for routine runs
    let mut r = rng(310);
    for kernel in [
        KernelSpec::rbf_ard(1.2, vec![0.8, 1.3]),
        KernelSpec::linear(vec![0.7, 1.1]),
        KernelSpec::sum(1.2, vec![0.8, 1.3], vec![0.7, 1.1]),
    ] {
        let q = VariationalLatentPosterior::new(
            DMatrix::from_fn(3, 2, |_, _| r.gen_range(-1.0..1.0)),
            DMatrix::from_fn(3, 2, |_, _| r.gen_range(0.1..0.6)),
        )
        .unwrap();
        let z = DMatrix::from_fn(4, 2, |_, _| r.gen_range(-1.0..1.0));
        let analytic = kernel.psi_stats(&q, &z, false).unwrap();
        let mc = common::mc_psi_oracle(&kernel, &q, &z, 200_000, 311);
        assert!(
            (analytic.psi0 - mc.psi0).abs() / mc.psi0.abs() < 0.02,
            "{kernel:?} psi0"
        );
        assert!(common::rel_mat(&analytic.psi1, &mc.psi1) < 0.02, "{kernel:?} psi1");
        assert!(common::rel_mat(&analytic.psi2, &mc.psi2) < 0.02, "{kernel:?} psi2");
    }
}

#[test]
fn ard_prunes_unused_latent_dimensions() {
    // data generated from a 2-D latent space, model given 8 dimensions
    let mut counts = Vec::new();
    for seed in 0..5u64 {
        let mut r = rng(320 + seed);
        let n_xi = 48;
        let d_true = 2;
        let d_model = 8;
        let g = 10;
        let x1 = DMatrix::from_fn(g, 1, |i, _| i as f64 / (g - 1) as f64);
        let x2 = DMatrix::from_fn(g, 1, |i, _| i as f64 / (g - 1) as f64);
        let true_latents = DMatrix::from_fn(n_xi, d_true, |_, _| {
            r.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let gen_kernel = KernelSpec::rbf_ard(1.0, vec![1.2, 1.2]);
        let kernels_s = vec![KernelSpec::exponential(0.4), KernelSpec::exponential(0.4)];
        let y = common::sample_structured_gp(
            &gen_kernel,
            &true_latents,
            &kernels_s,
            &[x1.clone(), x2.clone()],
            0.02,
            1,
            400 + seed,
        );
        let var_y = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        let mu0 = sgplvm_core::model::pca_latent_init(&y, n_xi, d_model, seed).unwrap();
        let q = VariationalLatentPosterior::new(
            mu0.clone(),
            DMatrix::from_element(n_xi, d_model, 0.1),
        )
        .unwrap();
        let z = sgplvm_core::model::inducing_init_subset(&mu0, 24, seed);
        let mut model = SgplvmModel::new(
            y,
            vec![x1, x2],
            q,
            z,
            KernelSpec::rbf_ard(var_y, vec![(d_model as f64).sqrt(); d_model]),
            kernels_s,
            10.0 / var_y,
            TrainableFlags::default(),
        )
        .unwrap();
        model
            .train(&OptimizerSettings {
                max_iters: 2000,
                ..OptimizerSettings::default()
            })
            .unwrap();
        let mut ls = match &model.kernel_xi {
            KernelSpec::RbfArd { lengthscales, .. } => lengthscales.clone(),
            _ => unreachable!(),
        };
        ls.sort_by(f64::total_cmp);
        let active = ls[1];
        let pruned = ls.iter().filter(|&&l| l > 10.0 * active).count();
        counts.push(pruned);
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    assert!(
        mean >= 6.0,
        "mean pruned dimensions {mean} (per-seed {counts:?})"
    );
}

#[test]
fn bound_improves_from_init_on_trained_model() {
    let mut r = rng(330);
    let n_xi = 8;
    let x1 = DMatrix::from_fn(5, 1, |i, _| i as f64 / 4.0);
    let x2 = DMatrix::from_fn(5, 1, |i, _| i as f64 / 4.0);
    let y = DMatrix::from_fn(n_xi * 25, 1, |_, _| r.gen_range(-1.0..1.0));
    let mu0 = sgplvm_core::model::pca_latent_init(&y, n_xi, 3, 0).unwrap();
    let q =
        VariationalLatentPosterior::new(mu0.clone(), DMatrix::from_element(n_xi, 3, 0.1)).unwrap();
    let z = sgplvm_core::model::inducing_init_subset(&mu0, 4, 0);
    let mut model = SgplvmModel::new(
        y,
        vec![x1, x2],
        q,
        z,
        KernelSpec::sum(0.5, vec![1.0; 3], vec![0.2; 3]),
        vec![KernelSpec::exponential(0.3), KernelSpec::exponential(0.3)],
        10.0,
        TrainableFlags::default(),
    )
    .unwrap();
    let (before, _) = model.collapsed_bound().unwrap();
    let out = model
        .train(&OptimizerSettings {
            max_iters: 150,
            ..OptimizerSettings::default()
        })
        .unwrap();
    assert!(out.bound > before, "bound {} -> {}", before, out.bound);
    // KL stays consistent with the trained posterior
    let kl = latent_prior_kl(&model.q).unwrap();
    assert!(kl.is_finite() && kl >= 0.0);
}
