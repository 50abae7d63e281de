//! Forward predictive densities from latent posteriors, mixture-of-Gaussians
//! marginal moments, full predictive covariance over a spatial test grid, and
//! latent-variable inference from noisy or partially observed test data via
//! the augmented bound.
//!
//! Everything here treats the trained model as read-only; each inference call
//! owns its own test posterior.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{PsiAdjoint, VariationalLatentPosterior};
use crate::linalg::{
    apply_kron_ops, apply_kron_ops_mat, bilinear_factor_grads, chol_inverse, kron_dense, FactorOp,
    Side,
};
use crate::model::{latent_prior_kl, sandwich_total, BoundCache, SgplvmModel};
use crate::opt::{maximize, OptimizerSettings};

/// Gaussian posterior over a single test latent variable, plus the test
/// observation noise precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestLatentPosterior {
    /// `1 x d_xi`
    pub mu_star: DMatrix<f64>,
    /// `1 x d_xi`, strictly positive
    pub s_star: DMatrix<f64>,
    pub beta_star: f64,
}

impl TestLatentPosterior {
    pub fn new(mu_star: DMatrix<f64>, s_star: DMatrix<f64>, beta_star: f64) -> Result<Self> {
        if mu_star.nrows() != 1 || s_star.nrows() != 1 || mu_star.ncols() != s_star.ncols() {
            return Err(Error::DimensionMismatch {
                op: "TestLatentPosterior::new",
                detail: "mu and s must both be 1 x d_xi".into(),
            });
        }
        if s_star.iter().any(|&v| v <= 0.0) || beta_star <= 0.0 {
            return Err(Error::InvalidArgument(
                "test posterior variances and beta_star must be positive".into(),
            ));
        }
        Ok(TestLatentPosterior {
            mu_star,
            s_star,
            beta_star,
        })
    }

    pub fn to_q(&self) -> VariationalLatentPosterior {
        VariationalLatentPosterior {
            mu: self.mu_star.clone(),
            s: self.s_star.clone(),
        }
    }
}

/// Predictive mean/variance per test point and output dimension; optional
/// full covariance over the spatial grid for a single stochastic test point.
#[derive(Debug, Clone)]
pub struct PredictiveMoments {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct PredictOptions {
    pub want_covariance: bool,
    /// Add the model noise variance `1/beta` to the returned variances.
    pub include_noise: bool,
    /// Mixture-of-Gaussians sample count for marginalized variances.
    pub n_mog: usize,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            want_covariance: false,
            include_noise: true,
            n_mog: 100,
            seed: 0,
        }
    }
}

fn spatial_cross(
    model: &SgplvmModel,
    x_s_star: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    if x_s_star.len() != model.x_s.len() {
        return Err(Error::DimensionMismatch {
            op: "spatial_cross",
            detail: format!(
                "test grid has {} spatial factors, model has {}",
                x_s_star.len(),
                model.x_s.len()
            ),
        });
    }
    model
        .kernels_s
        .iter()
        .zip(x_s_star.iter().zip(&model.x_s))
        .map(|(kern, (xs, xt))| kern.gram(xs, xt))
        .collect()
}

fn spatial_test_diag(model: &SgplvmModel, x_s_star: &[DMatrix<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(x_s_star.len());
    for (kern, xs) in model.kernels_s.iter().zip(x_s_star) {
        let mut d = DVector::zeros(xs.nrows());
        for i in 0..xs.nrows() {
            let m = DMatrix::from_element(1, 1, xs[(i, 0)]);
            d[i] = kern.gram(&m, &m)?[(0, 0)];
        }
        out.push(d);
    }
    Ok(out)
}

/// Predictive moments of the latent outputs at known test latents
/// `x_xi_star` over a spatial test grid, via the cached training
/// factorization. Full covariance requires a single stochastic test point.
pub fn predict_given_latent(
    model: &SgplvmModel,
    cache: &BoundCache,
    x_xi_star: &DMatrix<f64>,
    x_s_star: &[DMatrix<f64>],
    opts: &PredictOptions,
) -> Result<PredictiveMoments> {
    let beta_inv = 1.0 / model.beta;
    let n_xi_star = x_xi_star.nrows();
    if opts.want_covariance && n_xi_star != 1 {
        return Err(Error::InvalidArgument(
            "full covariance requires a single stochastic test point".into(),
        ));
    }
    let ksu_xi = model.kernel_xi.gram(x_xi_star, &model.z_xi)?;
    let ksu_s = spatial_cross(model, x_s_star)?;

    // mean = K_*u W
    let mut ops: Vec<FactorOp> = vec![FactorOp::Mul(&ksu_xi)];
    for k in &ksu_s {
        ops.push(FactorOp::Mul(k));
    }
    let mean = apply_kron_ops_mat(&ops, &cache.w)?;

    // rotated factors G_k = K_*u^(k) L_k^{-T} Q_k
    let mut g_factors = Vec::with_capacity(1 + ksu_s.len());
    for (k, cross) in std::iter::once(&ksu_xi).chain(ksu_s.iter()).enumerate() {
        let lt = crate::linalg::tri_solve(
            &cache.l_factors[k],
            &cross.transpose(),
            Side::Left,
            false,
        )?;
        g_factors.push(lt.transpose() * &cache.c_eig_q[k]);
    }

    // marginal variance via the Schur identity in the rotated basis
    let xi_diag: Vec<f64> = (0..n_xi_star)
        .map(|i| {
            let xi = x_xi_star.row(i).clone_owned();
            let m = DMatrix::from_row_slice(1, xi.len(), xi.transpose().as_slice());
            model.kernel_xi.gram(&m, &m).map(|g| g[(0, 0)])
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut diag_factors = vec![DVector::from_vec(xi_diag)];
    diag_factors.extend(spatial_test_diag(model, x_s_star)?);
    let prior_diag = crate::linalg::compose_kron_diag(&diag_factors);

    let reduction_weights: Vec<f64> = cache.d.iter().map(|&d| 1.0 - beta_inv / d).collect();
    let schur: Vec<DMatrix<f64>> = g_factors.iter().map(|g| g.component_mul(g)).collect();
    let ops: Vec<FactorOp> = schur.iter().map(FactorOp::Mul).collect();
    let reduction = apply_kron_ops(&ops, &reduction_weights)?;

    let n_star = prior_diag.len();
    let mut variance = DMatrix::zeros(n_star, model.d_y());
    for i in 0..n_star {
        let mut v = prior_diag[i] - reduction[i];
        if opts.include_noise {
            v += beta_inv;
        }
        v = v.max(f64::MIN_POSITIVE);
        for j in 0..model.d_y() {
            variance[(i, j)] = v;
        }
    }

    let covariance = if opts.want_covariance {
        // blockwise accumulation over the stochastic inducing index; the
        // stochastic rotation coefficient enters squared, which the dense
        // oracle confirms.
        let n_s_star: usize = x_s_star.iter().map(|f| f.nrows()).product();
        let g_s = dense_kron_list(&g_factors[1..]);
        let mut sigma = {
            let kxis = model.kernel_xi.gram(x_xi_star, x_xi_star)?[(0, 0)];
            let mats: Vec<DMatrix<f64>> = model
                .kernels_s
                .iter()
                .zip(x_s_star)
                .map(|(kern, xs)| kern.gram(xs, xs))
                .collect::<Result<Vec<_>>>()?;
            dense_kron_list(&mats) * kxis
        };
        let m_s: usize = cache.k_s.iter().map(|k| k.nrows()).product();
        for i in 0..model.m_xi() {
            let g_i = g_factors[0][(0, i)];
            let mut h = g_s.clone();
            for p in 0..m_s {
                let scale = reduction_weights[i * m_s + p].max(0.0).sqrt();
                for r in 0..h.nrows() {
                    h[(r, p)] *= scale;
                }
            }
            sigma -= g_i * g_i * &h * h.transpose();
        }
        if opts.include_noise {
            for i in 0..n_s_star {
                sigma[(i, i)] += beta_inv;
            }
        }
        Some(sigma)
    } else {
        None
    };

    Ok(PredictiveMoments {
        mean,
        variance,
        covariance,
    })
}

fn dense_kron_list(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::from_element(1, 1, 1.0);
    for m in mats {
        acc = kron_dense(&acc, m);
    }
    acc
}

/// Predictive moments marginalized over a Gaussian test latent posterior:
/// analytic mean, mixture-of-Gaussians variance over `n_mog` seeded samples.
pub fn predict_marginalized(
    model: &SgplvmModel,
    cache: &BoundCache,
    q_star: &TestLatentPosterior,
    x_s_star: &[DMatrix<f64>],
    opts: &PredictOptions,
) -> Result<PredictiveMoments> {
    if opts.n_mog == 0 {
        return Err(Error::InvalidArgument("n_mog must be at least 1".into()));
    }
    let psi = model
        .kernel_xi
        .psi_stats(&q_star.to_q(), &model.z_xi, false)?;
    let ksu_s = spatial_cross(model, x_s_star)?;
    let mut ops: Vec<FactorOp> = vec![FactorOp::Mul(&psi.psi1)];
    for k in &ksu_s {
        ops.push(FactorOp::Mul(k));
    }
    let mean = apply_kron_ops_mat(&ops, &cache.w)?;

    // mixture-of-Gaussians variance estimate
    let inner_opts = PredictOptions {
        want_covariance: false,
        include_noise: false,
        ..*opts
    };
    let d_xi = model.d_xi();
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 0x6d6f_6731u64.rotate_left(17));
    let mut acc = DMatrix::zeros(mean.nrows(), mean.ncols());
    for _ in 0..opts.n_mog {
        let mut x_hat = DMatrix::zeros(1, d_xi);
        for qd in 0..d_xi {
            let eps: f64 = rng.sample(StandardNormal);
            x_hat[(0, qd)] = q_star.mu_star[(0, qd)] + q_star.s_star[(0, qd)].sqrt() * eps;
        }
        let p = predict_given_latent(model, cache, &x_hat, x_s_star, &inner_opts)?;
        for j in 0..acc.ncols() {
            for i in 0..acc.nrows() {
                let dm = p.mean[(i, j)] - mean[(i, j)];
                acc[(i, j)] += dm * dm + p.variance[(i, j)];
            }
        }
    }
    let beta_inv = 1.0 / model.beta;
    let mut variance = acc / opts.n_mog as f64;
    if opts.include_noise {
        variance.iter_mut().for_each(|v| *v += beta_inv);
    }

    Ok(PredictiveMoments {
        mean,
        variance,
        covariance: None,
    })
}

/// The augmented-bound test term and its per-dimension pieces.
#[derive(Debug, Clone)]
pub struct TestTerm {
    /// `L* = sum_{j in O} F*_j - KL(q* || prior)`
    pub l_star: f64,
    pub f_per_dim: Vec<Option<f64>>,
    pub kl_star: f64,
}

struct TestTermParts {
    psi: crate::kernels::PsiStats,
    ksu_s: Vec<DMatrix<f64>>,
    p_star_s: Vec<DMatrix<f64>>,
    psi0_star: f64,
    tr_kuu_inv_psi2: f64,
    tr_kpsi_inv_psi2: f64,
    tr_spatial_diag: f64,
    tr_kinv_p_factors: Vec<f64>,
    kuu_inv: Vec<DMatrix<f64>>,
    /// per observed dim: (yy, t1, quad)
    fit: Vec<Option<(f64, f64, f64)>>,
    n_s_star: usize,
}

fn test_term_parts(
    model: &SgplvmModel,
    cache: &BoundCache,
    q_star: &TestLatentPosterior,
    y_star: &DMatrix<f64>,
    mask: &[bool],
    x_s_star: &[DMatrix<f64>],
) -> Result<TestTermParts> {
    if mask.len() != model.d_y() || y_star.ncols() != model.d_y() {
        return Err(Error::DimensionMismatch {
            op: "test_term",
            detail: format!(
                "mask length {} and y_star columns {} must equal d_y = {}",
                mask.len(),
                y_star.ncols(),
                model.d_y()
            ),
        });
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::InvalidArgument(
            "test term requires at least one observed dimension".into(),
        ));
    }
    let n_s_star: usize = x_s_star.iter().map(|f| f.nrows()).product();
    if y_star.nrows() != n_s_star {
        return Err(Error::DimensionMismatch {
            op: "test_term",
            detail: format!(
                "y_star has {} rows, test grid has {}",
                y_star.nrows(),
                n_s_star
            ),
        });
    }

    let psi = model
        .kernel_xi
        .psi_stats(&q_star.to_q(), &model.z_xi, false)?;
    let ksu_s = spatial_cross(model, x_s_star)?;
    let p_star_s: Vec<DMatrix<f64>> = ksu_s.iter().map(|k| k.transpose() * k).collect();

    let test_diags = spatial_test_diag(model, x_s_star)?;
    let tr_spatial_diag: f64 = test_diags.iter().map(|d| d.sum()).product();
    let psi0_star = psi.psi0 * tr_spatial_diag;

    let kuu_inv: Vec<DMatrix<f64>> = cache
        .l_factors
        .iter()
        .map(chol_inverse)
        .collect::<Result<Vec<_>>>()?;
    let mut tr_kinv_p_factors = vec![(&kuu_inv[0] * &psi.psi2).trace()];
    for (k, p) in p_star_s.iter().enumerate() {
        tr_kinv_p_factors.push((&kuu_inv[k + 1] * p).trace());
    }
    let tr_kuu_inv_psi2: f64 = tr_kinv_p_factors.iter().product();

    // diag of Q^T L^{-1} P L^{-T} Q per factor, then the d-weighted sum
    let mut sandwich_diags = Vec::with_capacity(1 + p_star_s.len());
    for (k, p) in std::iter::once(&psi.psi2).chain(p_star_s.iter()).enumerate() {
        let tmp = crate::linalg::tri_solve(&cache.l_factors[k], p, Side::Left, false)?;
        let half =
            crate::linalg::tri_solve(&cache.l_factors[k], &tmp.transpose(), Side::Left, false)?;
        let rot = cache.c_eig_q[k].transpose() * half.transpose() * &cache.c_eig_q[k];
        sandwich_diags.push(rot.diagonal().iter().copied().collect::<Vec<f64>>());
    }
    let tr_kpsi_inv_psi2 = sandwich_total(&sandwich_diags, &cache.d);

    let mut fit = Vec::with_capacity(model.d_y());
    let mut psi1_ops: Vec<FactorOp> = vec![FactorOp::Mul(&psi.psi1)];
    for k in &ksu_s {
        psi1_ops.push(FactorOp::Mul(k));
    }
    let mut psi2_ops: Vec<FactorOp> = vec![FactorOp::Mul(&psi.psi2)];
    for p in &p_star_s {
        psi2_ops.push(FactorOp::Mul(p));
    }
    for j in 0..model.d_y() {
        if !mask[j] {
            fit.push(None);
            continue;
        }
        let wj: Vec<f64> = cache.w.column(j).iter().copied().collect();
        let yj: Vec<f64> = y_star.column(j).iter().copied().collect();
        let yy: f64 = yj.iter().map(|v| v * v).sum();
        let psi1_w = apply_kron_ops(&psi1_ops, &wj)?;
        let t1: f64 = yj.iter().zip(&psi1_w).map(|(a, b)| a * b).sum();
        let psi2_w = apply_kron_ops(&psi2_ops, &wj)?;
        let quad: f64 = wj.iter().zip(&psi2_w).map(|(a, b)| a * b).sum();
        fit.push(Some((yy, t1, quad)));
    }

    Ok(TestTermParts {
        psi,
        ksu_s,
        p_star_s,
        psi0_star,
        tr_kuu_inv_psi2,
        tr_kpsi_inv_psi2,
        tr_spatial_diag,
        tr_kinv_p_factors,
        kuu_inv,
        fit,
        n_s_star,
    })
}

/// Evaluates `F*` (per observed dimension) and `L*` for a test observation
/// against the cached training factorization. Masked dimensions contribute
/// nothing.
pub fn test_term(
    model: &SgplvmModel,
    cache: &BoundCache,
    q_star: &TestLatentPosterior,
    y_star: &DMatrix<f64>,
    mask: &[bool],
    x_s_star: &[DMatrix<f64>],
) -> Result<TestTerm> {
    let parts = test_term_parts(model, cache, q_star, y_star, mask, x_s_star)?;
    let beta = model.beta;
    let beta_star = q_star.beta_star;
    let n_star = parts.n_s_star as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let shared = parts.psi0_star - parts.tr_kuu_inv_psi2 + parts.tr_kpsi_inv_psi2 / beta;
    let mut f_per_dim = Vec::with_capacity(model.d_y());
    let mut f_sum = 0.0;
    for fit in &parts.fit {
        match fit {
            None => f_per_dim.push(None),
            Some((yy, t1, quad)) => {
                let f = -0.5 * n_star * (two_pi.ln() - beta_star.ln())
                    - 0.5 * beta_star * (yy - 2.0 * t1 + quad + shared);
                f_per_dim.push(Some(f));
                f_sum += f;
            }
        }
    }
    let kl_star = latent_prior_kl(&q_star.to_q())?;
    Ok(TestTerm {
        l_star: f_sum - kl_star,
        f_per_dim,
        kl_star,
    })
}

/// Gradient of `L*` w.r.t. `(mu_star, log s_star, log beta_star)`.
fn test_term_grad(
    model: &SgplvmModel,
    cache: &BoundCache,
    q_star: &TestLatentPosterior,
    y_star: &DMatrix<f64>,
    mask: &[bool],
    x_s_star: &[DMatrix<f64>],
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>, f64)> {
    let parts = test_term_parts(model, cache, q_star, y_star, mask, x_s_star)?;
    let beta = model.beta;
    let beta_star = q_star.beta_star;
    let n_star = parts.n_s_star as f64;
    let d_obs = mask.iter().filter(|&&b| b).count() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let shared = parts.psi0_star - parts.tr_kuu_inv_psi2 + parts.tr_kpsi_inv_psi2 / beta;

    let mut l_star = 0.0;
    let mut d_beta_star = 0.0;
    let mut psi1_bar = DMatrix::zeros(1, model.m_xi());
    let mut psi2_bar = DMatrix::zeros(model.m_xi(), model.m_xi());

    let psi1_factors: Vec<&DMatrix<f64>> = std::iter::once(&parts.psi.psi1)
        .chain(parts.ksu_s.iter())
        .collect();
    let psi2_factors: Vec<&DMatrix<f64>> = std::iter::once(&parts.psi.psi2)
        .chain(parts.p_star_s.iter())
        .collect();

    for (j, fit) in parts.fit.iter().enumerate() {
        let Some((yy, t1, quad)) = fit else { continue };
        let f = -0.5 * n_star * (two_pi.ln() - beta_star.ln())
            - 0.5 * beta_star * (yy - 2.0 * t1 + quad + shared);
        l_star += f;
        d_beta_star += 0.5 * n_star / beta_star - 0.5 * (yy - 2.0 * t1 + quad + shared);

        let wj: Vec<f64> = cache.w.column(j).iter().copied().collect();
        let yj: Vec<f64> = y_star.column(j).iter().copied().collect();
        // + beta_star * y^T Psi1* w
        let g1 = bilinear_factor_grads(&yj, &wj, &psi1_factors)?;
        psi1_bar += &g1[0] * beta_star;
        // -(beta_star/2) w^T Psi2* w
        let g2 = bilinear_factor_grads(&wj, &wj, &psi2_factors)?;
        psi2_bar += &g2[0] * (-0.5 * beta_star);
    }

    // shared-term adjoints (appear once per observed dimension)
    // psi0_star = psi.psi0 * tr_spatial
    let psi0_bar = -0.5 * beta_star * d_obs * parts.tr_spatial_diag;
    // -(beta_star d_obs / 2) * (-tr(K_uu^{-1} Psi2*)) -> +.. ; only the
    // stochastic factor varies with q_star
    let others: f64 = parts.tr_kinv_p_factors[1..].iter().product();
    psi2_bar += &parts.kuu_inv[0] * (0.5 * beta_star * d_obs * others);
    // -(beta_star d_obs / 2) beta^{-1} tr(K_psi^{-1} Psi2*): sandwich weights
    {
        let mut diags: Vec<Vec<f64>> = Vec::with_capacity(1 + parts.p_star_s.len());
        diags.push(vec![1.0; model.m_xi()]); // placeholder; excluded for k = 0
        for (k, p) in parts.p_star_s.iter().enumerate() {
            let tmp = crate::linalg::tri_solve(&cache.l_factors[k + 1], p, Side::Left, false)?;
            let half = crate::linalg::tri_solve(
                &cache.l_factors[k + 1],
                &tmp.transpose(),
                Side::Left,
                false,
            )?;
            let rot = cache.c_eig_q[k + 1].transpose() * half.transpose() * &cache.c_eig_q[k + 1];
            diags.push(rot.diagonal().iter().copied().collect());
        }
        let w0 = exclusion_weight_for_factor0(&diags, &cache.d);
        let q0 = &cache.c_eig_q[0];
        let qw = q0 * DMatrix::from_diagonal(&DVector::from_vec(w0)) * q0.transpose();
        let tmp =
            crate::linalg::tri_solve(&cache.l_factors[0], &qw.transpose(), Side::Left, true)?;
        let sandwich =
            crate::linalg::tri_solve(&cache.l_factors[0], &tmp.transpose(), Side::Left, true)?;
        psi2_bar += sandwich * (-0.5 * beta_star * d_obs / beta);
    }

    let adj = PsiAdjoint {
        psi0: psi0_bar,
        psi1: Some(&psi1_bar),
        psi2: Some(&psi2_bar),
    };
    let q = q_star.to_q();
    let psi_grad = model.kernel_xi.psi_stats_vjp(&q, &model.z_xi, &adj)?;

    // KL(q* || N(0,1)) gradients
    let mut d_mu = psi_grad.d_mu - &q_star.mu_star;
    let d_log_s = DMatrix::from_fn(1, model.d_xi(), |_, c| {
        let s = q_star.s_star[(0, c)];
        (psi_grad.d_s[(0, c)] - 0.5 * (1.0 - 1.0 / s)) * s
    });
    let kl_star = latent_prior_kl(&q)?;
    l_star -= kl_star;
    if d_mu.iter().any(|v| !v.is_finite()) {
        d_mu.fill(f64::NAN);
    }
    Ok((l_star, d_mu, d_log_s, beta_star * d_beta_star))
}

fn exclusion_weight_for_factor0(diags: &[Vec<f64>], d: &DVector<f64>) -> Vec<f64> {
    let sizes: Vec<usize> = diags.iter().map(|v| v.len()).collect();
    let nf = sizes.len();
    let mut out = vec![0.0; sizes[0]];
    let mut idx = vec![0usize; nf];
    for flat in 0..d.len() {
        let mut rem = flat;
        for k in (0..nf).rev() {
            idx[k] = rem % sizes[k];
            rem /= sizes[k];
        }
        let mut prod = 1.0 / d[flat];
        for k in 1..nf {
            prod *= diags[k][idx[k]];
        }
        out[idx[0]] += prod;
    }
    out
}

/// Settings for latent inference from a test observation.
#[derive(Debug, Clone)]
pub struct InferSettings {
    pub optimize_beta_star: bool,
    pub n_restarts: usize,
    pub seed: u64,
    pub optimizer: OptimizerSettings,
}

impl Default for InferSettings {
    fn default() -> Self {
        InferSettings {
            optimize_beta_star: false,
            n_restarts: 5,
            seed: 0,
            optimizer: OptimizerSettings {
                max_iters: 200,
                ..OptimizerSettings::default()
            },
        }
    }
}

const LOG_BETA_STAR_BOUNDS: (f64, f64) = (-13.815510557964274, 27.631021115928547); // ln 1e-6 .. ln 1e12

/// Infers the variational posterior over the test latent variable by
/// maximizing `sum_{j in O} F*_j - KL`, with multiple restarts (nearest
/// training latent warm start plus seeded prior draws). The trained model is
/// never mutated.
pub fn infer_latent(
    model: &SgplvmModel,
    cache: &BoundCache,
    y_star: &DMatrix<f64>,
    x_s_star: &[DMatrix<f64>],
    mask: &[bool],
    settings: &InferSettings,
) -> Result<(TestLatentPosterior, f64)> {
    let d_xi = model.d_xi();
    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed ^ 0x1a7e_47);

    let mut inits: Vec<(DMatrix<f64>, DMatrix<f64>)> = Vec::new();
    if let Some(i_near) = nearest_training_realization(model, y_star, mask, x_s_star) {
        let mu = DMatrix::from_fn(1, d_xi, |_, c| model.q.mu[(i_near, c)]);
        let s = DMatrix::from_fn(1, d_xi, |_, c| model.q.s[(i_near, c)].max(1e-6));
        inits.push((mu, s));
    }
    while inits.len() < settings.n_restarts.max(1) {
        let mu = DMatrix::from_fn(1, d_xi, |_, _| rng.sample::<f64, _>(StandardNormal));
        inits.push((mu, DMatrix::from_element(1, d_xi, 1.0)));
    }

    let mut best: Option<(TestLatentPosterior, f64)> = None;
    let mut failures = Vec::new();
    for (mu0, s0) in inits {
        let mut x0: Vec<f64> = mu0.iter().copied().collect();
        x0.extend(s0.iter().map(|v| v.ln()));
        let mut bounds: Vec<(f64, f64)> =
            vec![(f64::NEG_INFINITY, f64::INFINITY); 2 * d_xi];
        if settings.optimize_beta_star {
            x0.push(model.beta.ln());
            bounds.push(LOG_BETA_STAR_BOUNDS);
        }
        let unpack = |p: &[f64]| -> Result<TestLatentPosterior> {
            let mu = DMatrix::from_fn(1, d_xi, |_, c| p[c]);
            let s = DMatrix::from_fn(1, d_xi, |_, c| p[d_xi + c].exp());
            let beta_star = if settings.optimize_beta_star {
                p[2 * d_xi].exp()
            } else {
                model.beta
            };
            TestLatentPosterior::new(mu, s, beta_star)
        };
        let outcome = maximize(
            |p| {
                let q_star = unpack(p)?;
                let (l, d_mu, d_log_s, d_log_bs) =
                    test_term_grad(model, cache, &q_star, y_star, mask, x_s_star)?;
                let mut g: Vec<f64> = d_mu.iter().copied().collect();
                g.extend(d_log_s.iter());
                if settings.optimize_beta_star {
                    g.push(d_log_bs);
                }
                Ok((l, g))
            },
            &x0,
            &settings.optimizer,
            Some(&bounds),
        );
        match outcome {
            Ok(o) => {
                let q_star = unpack(&o.x)?;
                if best.as_ref().map_or(true, |(_, b)| o.objective > *b) {
                    best = Some((q_star, o.objective));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    best.ok_or_else(|| {
        Error::OptimizerDiverged(format!(
            "latent inference failed at every restart: {}",
            failures.join("; ")
        ))
    })
}

/// Index of the training realization whose observed values (at the nearest
/// training grid points) are closest to the test observation.
fn nearest_training_realization(
    model: &SgplvmModel,
    y_star: &DMatrix<f64>,
    mask: &[bool],
    x_s_star: &[DMatrix<f64>],
) -> Option<usize> {
    // snap each test coordinate to the nearest training coordinate per factor
    let mut snapped: Vec<Vec<usize>> = Vec::with_capacity(x_s_star.len());
    for (xs, xt) in x_s_star.iter().zip(&model.x_s) {
        let mut idx = Vec::with_capacity(xs.nrows());
        for i in 0..xs.nrows() {
            let v = xs[(i, 0)];
            let mut bestj = 0;
            let mut bestd = f64::INFINITY;
            for j in 0..xt.nrows() {
                let d = (xt[(j, 0)] - v).abs();
                if d < bestd {
                    bestd = d;
                    bestj = j;
                }
            }
            idx.push(bestj);
        }
        snapped.push(idx);
    }
    // flat training spatial index per test point (row-major over factors)
    let strides: Vec<usize> = {
        let sizes: Vec<usize> = model.x_s.iter().map(|f| f.nrows()).collect();
        let mut s = vec![1usize; sizes.len()];
        for k in (0..sizes.len().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * sizes[k + 1];
        }
        s
    };
    let test_sizes: Vec<usize> = x_s_star.iter().map(|f| f.nrows()).collect();
    let n_test: usize = test_sizes.iter().product();
    let mut train_flat = Vec::with_capacity(n_test);
    for flat in 0..n_test {
        let mut rem = flat;
        let mut tf = 0usize;
        for k in (0..test_sizes.len()).rev() {
            let ik = rem % test_sizes[k];
            rem /= test_sizes[k];
            tf += snapped[k][ik] * strides[k];
        }
        train_flat.push(tf);
    }
    let n_s = model.n_s();
    let mut best: Option<(usize, f64)> = None;
    for i in 0..model.n_xi() {
        let mut sse = 0.0;
        for (t, &tf) in train_flat.iter().enumerate() {
            for (j, &obs) in mask.iter().enumerate() {
                if obs {
                    let d = model.y[(i * n_s + tf, j)] - y_star[(t, j)];
                    sse += d * d;
                }
            }
        }
        if best.map_or(true, |(_, b)| sse < b) {
            best = Some((i, sse));
        }
    }
    best.map(|(i, _)| i)
}
