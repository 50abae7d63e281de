//! The structured Bayesian GP latent variable model: collapsed evidence
//! lower bound with structured inducing points, efficient bound terms, and
//! gradient-based training.
//!
//! Spatial inducing inputs are tied to the training spatial points, so the
//! Kronecker factors of `K_uu`, `Psi_1`, and `Psi_2` over the spatial
//! dimensions all reduce to the training grams. No `n x n` or dense
//! `m x m` Kronecker product is ever materialized; everything runs through
//! per-factor Cholesky and eigendecompositions.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, PsiAdjoint, PsiStats, VariationalLatentPosterior};
use crate::linalg::{
    apply_kron_ops_mat, bilinear_factor_grads, chol, chol_inverse, sym_eig, CholFactor, FactorOp,
};
use crate::opt::{maximize, IterationRecord, OptimizerSettings};

/// Which parameter groups training may move.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainableFlags {
    pub latents: bool,
    pub inducing: bool,
    pub kernel_xi: bool,
    pub kernels_s: bool,
    pub beta: bool,
}

impl Default for TrainableFlags {
    fn default() -> Self {
        TrainableFlags {
            latents: true,
            inducing: true,
            kernel_xi: true,
            kernels_s: true,
            beta: true,
        }
    }
}

/// Structured Bayesian GP-LVM state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgplvmModel {
    /// `n x d_y` observations, rows in (stochastic, spatial...) Kronecker order.
    pub y: DMatrix<f64>,
    /// Spatial factor coordinates (one `n_k x 1` matrix per spatial dimension).
    pub x_s: Vec<DMatrix<f64>>,
    pub q: VariationalLatentPosterior,
    /// Stochastic inducing inputs `m_xi x d_xi`; spatial inducing inputs are
    /// tied to `x_s`.
    pub z_xi: DMatrix<f64>,
    pub kernel_xi: KernelSpec,
    pub kernels_s: Vec<KernelSpec>,
    pub beta: f64,
    pub trainable: TrainableFlags,
}

/// Cached factorizations shared by the bound, its gradient, and predictions.
#[derive(Debug, Clone)]
pub struct BoundCache {
    /// Effective (jittered) stochastic inducing covariance.
    pub k_uu_xi: DMatrix<f64>,
    /// Effective spatial kernel matrices.
    pub k_s: Vec<DMatrix<f64>>,
    /// Cholesky factors of `[k_uu_xi, k_s...]`.
    pub l_factors: Vec<CholFactor>,
    /// C factors `L^{-1} P L^{-T}` per factor.
    pub c_factors: Vec<DMatrix<f64>>,
    pub c_eig_q: Vec<DMatrix<f64>>,
    /// Per-factor C eigenvalues clamped at zero (as composed into `d`).
    pub c_eig_lambda: Vec<DVector<f64>>,
    /// `beta^{-1} + composed C eigenvalues`, length m.
    pub d: DVector<f64>,
    /// `Q_C^T L^{-1} Psi_1^T Y`, `m x d_y`.
    pub b: DMatrix<f64>,
    /// `K_psi^{-1} Psi_1^T Y`, `m x d_y`.
    pub w: DMatrix<f64>,
    pub psi: PsiStats,
    pub psi1t_y: DMatrix<f64>,
    pub t_yy: f64,
    pub psi0_full: f64,
    pub trace_c: f64,
    pub log_det_a: f64,
    pub t_fit: f64,
    pub kl: f64,
}

impl BoundCache {
    pub fn m(&self) -> usize {
        self.d.len()
    }
}

/// Gradients of the collapsed bound; frozen groups come back zeroed.
#[derive(Debug, Clone)]
pub struct BoundGradients {
    pub d_mu: DMatrix<f64>,
    /// w.r.t. the raw variances `s` (not log s).
    pub d_s: DMatrix<f64>,
    pub d_z: DMatrix<f64>,
    pub d_kernel_xi: Vec<f64>,
    pub d_kernels_s: Vec<Vec<f64>>,
    pub d_log_beta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bound: f64,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

/// Relative size of the fixed diagonal nugget added to linear-kernel
/// inducing covariances.
pub const KUU_STABILIZER_REL: f64 = 1e-6;

/// `KL(q(X) || N(0, I))` for a fully factorized Gaussian posterior.
pub fn latent_prior_kl(q: &VariationalLatentPosterior) -> Result<f64> {
    if q.s.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(
            "latent KL requires positive variances".into(),
        ));
    }
    let mut kl = 0.0;
    for (m, s) in q.mu.iter().zip(q.s.iter()) {
        kl += s - s.ln() + m * m - 1.0;
    }
    Ok(0.5 * kl)
}

/// Per-factor weights for traces of the form
/// `tr(K_psi^{-1} (dF_k kron prod_{l != k} F_l))` in the doubly rotated
/// basis: `weights[k][j] = sum_{alpha: alpha_k = j} prod_{l != k} diag_l[alpha_l] / d_alpha`.
fn exclusion_weights(diags: &[Vec<f64>], d: &DVector<f64>) -> Vec<Vec<f64>> {
    let nf = diags.len();
    let sizes: Vec<usize> = diags.iter().map(|v| v.len()).collect();
    let total: usize = sizes.iter().product();
    debug_assert_eq!(total, d.len());
    let mut weights: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut idx = vec![0usize; nf];
    for flat in 0..total {
        let mut rem = flat;
        for k in (0..nf).rev() {
            idx[k] = rem % sizes[k];
            rem /= sizes[k];
        }
        let dinv = 1.0 / d[flat];
        for k in 0..nf {
            let mut prod = dinv;
            for l in 0..nf {
                if l != k {
                    prod *= diags[l][idx[l]];
                }
            }
            weights[k][idx[k]] += prod;
        }
    }
    weights
}

/// `sum_alpha prod_k diag_k[alpha_k] / d_alpha`.
pub(crate) fn sandwich_total(diags: &[Vec<f64>], d: &DVector<f64>) -> f64 {
    let nf = diags.len();
    let sizes: Vec<usize> = diags.iter().map(|v| v.len()).collect();
    let mut idx = vec![0usize; nf];
    let mut total = 0.0;
    for flat in 0..d.len() {
        let mut rem = flat;
        for k in (0..nf).rev() {
            idx[k] = rem % sizes[k];
            rem /= sizes[k];
        }
        let mut prod = 1.0 / d[flat];
        for (k, diag) in diags.iter().enumerate() {
            prod *= diag[idx[k]];
        }
        total += prod;
    }
    total
}

impl SgplvmModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        y: DMatrix<f64>,
        x_s: Vec<DMatrix<f64>>,
        q: VariationalLatentPosterior,
        z_xi: DMatrix<f64>,
        kernel_xi: KernelSpec,
        kernels_s: Vec<KernelSpec>,
        beta: f64,
        trainable: TrainableFlags,
    ) -> Result<Self> {
        if x_s.is_empty() || kernels_s.len() != x_s.len() {
            return Err(Error::DimensionMismatch {
                op: "SgplvmModel::new",
                detail: "one spatial kernel per spatial factor required".into(),
            });
        }
        let n_s: usize = x_s.iter().map(|f| f.nrows()).product();
        if y.nrows() != q.n_rows() * n_s {
            return Err(Error::DimensionMismatch {
                op: "SgplvmModel::new",
                detail: format!(
                    "y has {} rows, expected n_xi * n_s = {} * {}",
                    y.nrows(),
                    q.n_rows(),
                    n_s
                ),
            });
        }
        if z_xi.ncols() != q.dim() || kernel_xi.input_dim() != q.dim() {
            return Err(Error::DimensionMismatch {
                op: "SgplvmModel::new",
                detail: "latent dimension mismatch between q, z, and the stochastic kernel".into(),
            });
        }
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        kernel_xi.validate()?;
        for k in &kernels_s {
            k.validate()?;
        }
        Ok(SgplvmModel {
            y,
            x_s,
            q,
            z_xi,
            kernel_xi,
            kernels_s,
            beta,
            trainable,
        })
    }

    pub fn n_xi(&self) -> usize {
        self.q.n_rows()
    }

    pub fn n_s(&self) -> usize {
        self.x_s.iter().map(|f| f.nrows()).product()
    }

    pub fn n(&self) -> usize {
        self.n_xi() * self.n_s()
    }

    pub fn m_xi(&self) -> usize {
        self.z_xi.nrows()
    }

    pub fn m(&self) -> usize {
        self.m_xi() * self.n_s()
    }

    pub fn d_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn d_xi(&self) -> usize {
        self.q.dim()
    }

    /// Effective spatial kernel matrices and their Cholesky factors.
    fn spatial_factors(&self) -> Result<(Vec<DMatrix<f64>>, Vec<CholFactor>)> {
        let mut mats = Vec::with_capacity(self.x_s.len());
        let mut chols = Vec::with_capacity(self.x_s.len());
        for (k, kern) in self.kernels_s.iter().enumerate() {
            let g = kern.gram(&self.x_s[k], &self.x_s[k])?;
            let c = chol(&g, &format!("K_s[{k}]"))?;
            let mut eff = g;
            if c.jitter > 0.0 {
                for i in 0..eff.nrows() {
                    eff[(i, i)] += c.jitter;
                }
            }
            mats.push(eff);
            chols.push(c);
        }
        Ok((mats, chols))
    }

    /// Builds every factorization the bound needs. Cost is linear in
    /// `n * d_y` given the per-factor decompositions.
    pub fn build_cache(&self) -> Result<BoundCache> {
        let beta_inv = 1.0 / self.beta;
        // stochastic inducing covariance; linear kernels get a fixed
        // stabilizing nugget so the inducing prior stays invertible when
        // m_xi exceeds the latent dimension
        let mut g_uu = self.kernel_xi.gram(&self.z_xi, &self.z_xi)?;
        if self.kernel_xi.needs_stabilizer() {
            let nugget = KUU_STABILIZER_REL * g_uu.trace() / g_uu.nrows() as f64;
            for i in 0..g_uu.nrows() {
                g_uu[(i, i)] += nugget;
            }
        }
        let l_uu = chol(&g_uu, "K_uu_xi")?;
        let mut k_uu_xi = g_uu;
        if l_uu.jitter > 0.0 {
            for i in 0..k_uu_xi.nrows() {
                k_uu_xi[(i, i)] += l_uu.jitter;
            }
        }
        let (k_s, l_s) = self.spatial_factors()?;
        let mut l_factors = vec![l_uu];
        l_factors.extend(l_s);

        let psi = self.kernel_xi.psi_stats(&self.q, &self.z_xi, false)?;
        if !psi.psi0.is_finite() || psi.psi1.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("psi statistics"));
        }

        // C factors: stochastic L^{-1} Psi2 L^{-T}; spatial L^{-1} K^2 L^{-T}
        let mut c_factors = Vec::with_capacity(1 + k_s.len());
        {
            let l0 = &l_factors[0];
            let tmp = crate::linalg::tri_solve(l0, &psi.psi2, crate::linalg::Side::Left, false)?;
            let c0 = crate::linalg::tri_solve(l0, &tmp.transpose(), crate::linalg::Side::Left, false)?;
            c_factors.push(c0.transpose());
        }
        for (k, ks) in k_s.iter().enumerate() {
            let p = ks * ks;
            let lk = &l_factors[k + 1];
            let tmp = crate::linalg::tri_solve(lk, &p, crate::linalg::Side::Left, false)?;
            let ck = crate::linalg::tri_solve(lk, &tmp.transpose(), crate::linalg::Side::Left, false)?;
            c_factors.push(ck.transpose());
        }

        let mut c_eig_q = Vec::with_capacity(c_factors.len());
        let mut c_eig_lambda = Vec::with_capacity(c_factors.len());
        for c in &c_factors {
            let e = sym_eig(c)?;
            c_eig_q.push(e.q);
            c_eig_lambda.push(e.lambda.map(|v| v.max(0.0)));
        }
        let lambda_c = crate::linalg::compose_kron_diag(&c_eig_lambda);
        let d = lambda_c.map(|v| v + beta_inv);

        // Psi1^T Y -> L^{-1} -> Q_C^T
        let psi1t_y = {
            let mut ops = vec![FactorOp::TMul(&psi.psi1)];
            for ks in &k_s {
                ops.push(FactorOp::TMul(ks));
            }
            apply_kron_ops_mat(&ops, &self.y)?
        };
        let linv_psi1t_y = {
            let ops: Vec<FactorOp> = l_factors
                .iter()
                .map(|c| FactorOp::SolveLower(&c.l))
                .collect();
            apply_kron_ops_mat(&ops, &psi1t_y)?
        };
        let b = {
            let ops: Vec<FactorOp> = c_eig_q.iter().map(FactorOp::TMul).collect();
            apply_kron_ops_mat(&ops, &linv_psi1t_y)?
        };
        // W = L^{-T} Q_C D^{-1} B
        let w = {
            let mut scaled = b.clone();
            for j in 0..scaled.ncols() {
                for i in 0..scaled.nrows() {
                    scaled[(i, j)] /= d[i];
                }
            }
            let mut half = {
                let ops: Vec<FactorOp> = c_eig_q.iter().map(FactorOp::Mul).collect();
                apply_kron_ops_mat(&ops, &scaled)?
            };
            let ops: Vec<FactorOp> = l_factors
                .iter()
                .map(|c| FactorOp::SolveLowerT(&c.l))
                .collect();
            half = apply_kron_ops_mat(&ops, &half)?;
            half
        };

        let t_yy: f64 = self.y.iter().map(|v| v * v).sum();
        let mut t_fit = 0.0;
        for j in 0..b.ncols() {
            for i in 0..b.nrows() {
                t_fit += b[(i, j)] * b[(i, j)] / d[i];
            }
        }
        let log_det_a: f64 = d.iter().map(|&v| v.ln()).sum();
        let psi0_full = psi.psi0 * k_s.iter().map(|ks| ks.trace()).product::<f64>();
        let trace_c: f64 = c_factors.iter().map(|c| c.trace()).product();
        let kl = latent_prior_kl(&self.q)?;

        Ok(BoundCache {
            k_uu_xi,
            k_s,
            l_factors,
            c_factors,
            c_eig_q,
            c_eig_lambda,
            d,
            b,
            w,
            psi,
            psi1t_y,
            t_yy,
            psi0_full,
            trace_c,
            log_det_a,
            t_fit,
            kl,
        })
    }

    fn bound_from_cache(&self, cache: &BoundCache) -> f64 {
        let n = self.n() as f64;
        let m = self.m() as f64;
        let d_y = self.d_y() as f64;
        let two_pi = 2.0 * std::f64::consts::PI;
        0.5 * d_y * ((n - m) * self.beta.ln() - n * two_pi.ln() - cache.log_det_a)
            - 0.5
                * self.beta
                * (cache.t_yy - cache.t_fit + d_y * (cache.psi0_full - cache.trace_c))
            - cache.kl
    }

    /// The collapsed evidence lower bound and the cache it was built from.
    pub fn collapsed_bound(&self) -> Result<(f64, BoundCache)> {
        let cache = self.build_cache()?;
        let bound = self.bound_from_cache(&cache);
        if !bound.is_finite() {
            return Err(Error::NonFinite("collapsed bound"));
        }
        Ok((bound, cache))
    }

    /// Per-output-dimension bound terms `L_j` plus the shared KL, so that
    /// `sum_j L_j - KL` equals [`SgplvmModel::collapsed_bound`].
    pub fn collapsed_bound_per_dim(&self) -> Result<(Vec<f64>, f64)> {
        let cache = self.build_cache()?;
        let n = self.n() as f64;
        let m = self.m() as f64;
        let two_pi = 2.0 * std::f64::consts::PI;
        let shared = 0.5 * ((n - m) * self.beta.ln() - n * two_pi.ln() - cache.log_det_a);
        let mut per_dim = Vec::with_capacity(self.d_y());
        for j in 0..self.d_y() {
            let yj_sq: f64 = self.y.column(j).iter().map(|v| v * v).sum();
            let mut fit_j = 0.0;
            for i in 0..cache.b.nrows() {
                fit_j += cache.b[(i, j)] * cache.b[(i, j)] / cache.d[i];
            }
            per_dim.push(
                shared
                    - 0.5 * self.beta * (yj_sq - fit_j + cache.psi0_full - cache.trace_c),
            );
        }
        Ok((per_dim, cache.kl))
    }

    /// Full gradient of the collapsed bound. Frozen groups are zeroed.
    pub fn bound_gradients(&self) -> Result<BoundGradients> {
        let cache = self.build_cache()?;
        self.bound_gradients_with_cache(&cache)
    }

    pub fn bound_gradients_with_cache(&self, cache: &BoundCache) -> Result<BoundGradients> {
        let beta = self.beta;
        let beta_inv = 1.0 / beta;
        let d_y = self.d_y() as f64;
        let n = self.n() as f64;
        let m_total = self.m() as f64;
        let n_factors = 1 + self.x_s.len();
        let m_sizes: Vec<usize> = std::iter::once(self.m_xi())
            .chain(self.x_s.iter().map(|f| f.nrows()))
            .collect();

        // spatial Psi2 factors P_k = K_k^2
        let p_s: Vec<DMatrix<f64>> = cache.k_s.iter().map(|k| k * k).collect();

        // accumulators
        let mut psi0_bar = 0.0;
        let mut psi1_bar = DMatrix::zeros(self.n_xi(), self.m_xi());
        let mut psi2_bar = DMatrix::zeros(self.m_xi(), self.m_xi());
        let mut kuu_bar = DMatrix::zeros(self.m_xi(), self.m_xi());
        let mut ks_bar: Vec<DMatrix<f64>> = cache
            .k_s
            .iter()
            .map(|k| DMatrix::zeros(k.nrows(), k.ncols()))
            .collect();
        let mut d_beta = 0.0;

        // ---- log|A| term: -(d_y/2) (log|K_psi| - log|K_uu|) ----
        let lam_diags: Vec<Vec<f64>> = cache
            .c_eig_lambda
            .iter()
            .map(|v| v.iter().copied().collect())
            .collect();
        let ones_diags: Vec<Vec<f64>> = m_sizes.iter().map(|&s| vec![1.0; s]).collect();
        let w_psi2 = exclusion_weights(&lam_diags, &cache.d);
        let w_kuu = exclusion_weights(&ones_diags, &cache.d);
        let sum_inv_d: f64 = cache.d.iter().map(|&v| 1.0 / v).sum();

        let sandwich = |k: usize, wts: &[f64]| -> Result<DMatrix<f64>> {
            // L_k^{-T} Q_k diag(wts) Q_k^T L_k^{-1}
            let q = &cache.c_eig_q[k];
            let qw = q * DMatrix::from_diagonal(&DVector::from_vec(wts.to_vec())) * q.transpose();
            let tmp = crate::linalg::tri_solve(
                &cache.l_factors[k],
                &qw.transpose(),
                crate::linalg::Side::Left,
                true,
            )?;
            let out = crate::linalg::tri_solve(
                &cache.l_factors[k],
                &tmp.transpose(),
                crate::linalg::Side::Left,
                true,
            )?;
            Ok(out)
        };

        let kinv: Vec<DMatrix<f64>> = cache
            .l_factors
            .iter()
            .map(chol_inverse)
            .collect::<Result<Vec<_>>>()?;

        for k in 0..n_factors {
            // through Psi2 slot of K_psi
            let p_bar = sandwich(k, &w_psi2[k])? * (-0.5 * d_y);
            if k == 0 {
                psi2_bar += &p_bar;
            } else {
                let kmat = &cache.k_s[k - 1];
                ks_bar[k - 1] += &p_bar * kmat + kmat * &p_bar;
            }
            // through K_uu slot of K_psi (beta^{-1} factor)
            let kbar = sandwich(k, &w_kuu[k])? * (-0.5 * d_y * beta_inv);
            if k == 0 {
                kuu_bar += &kbar;
            } else {
                ks_bar[k - 1] += &kbar;
            }
            // minus log|K_uu|: +(d_y/2) (m/m_k) K_k^{-1}
            let scale = 0.5 * d_y * m_total / m_sizes[k] as f64;
            if k == 0 {
                kuu_bar += &kinv[0] * scale;
            } else {
                ks_bar[k - 1] += &kinv[k] * scale;
            }
        }
        // d log|K_psi| / d beta = -beta^{-2} tr(K_psi^{-1} K_uu) = -beta^{-2} sum 1/d
        d_beta += 0.5 * d_y * beta_inv * beta_inv * sum_inv_d;

        // ---- data-fit term: +(beta/2) T_fit ----
        d_beta += 0.5 * cache.t_fit;
        let psi1_factors: Vec<&DMatrix<f64>> = std::iter::once(&cache.psi.psi1)
            .chain(cache.k_s.iter())
            .collect();
        let psi2_factors: Vec<&DMatrix<f64>> = std::iter::once(&cache.psi.psi2)
            .chain(p_s.iter())
            .collect();
        let kuu_factors: Vec<&DMatrix<f64>> = std::iter::once(&cache.k_uu_xi)
            .chain(cache.k_s.iter())
            .collect();
        let mut t_wkw = 0.0;
        for j in 0..self.d_y() {
            let yj: Vec<f64> = self.y.column(j).iter().copied().collect();
            let wj: Vec<f64> = cache.w.column(j).iter().copied().collect();
            // 2 * (beta/2) * y^T dPsi1 w
            let g1 = bilinear_factor_grads(&yj, &wj, &psi1_factors)?;
            for (k, g) in g1.into_iter().enumerate() {
                if k == 0 {
                    psi1_bar += g * beta;
                } else {
                    ks_bar[k - 1] += g * beta;
                }
            }
            // -(beta/2) w^T dK_psi w with dK_psi = beta^{-1} dK_uu + dPsi2
            let g2 = bilinear_factor_grads(&wj, &wj, &psi2_factors)?;
            for (k, g) in g2.into_iter().enumerate() {
                if k == 0 {
                    psi2_bar += g * (-0.5 * beta);
                } else {
                    let kmat = &cache.k_s[k - 1];
                    let p_bar = g * (-0.5 * beta);
                    ks_bar[k - 1] += &p_bar * kmat + kmat * &p_bar;
                }
            }
            let g3 = bilinear_factor_grads(&wj, &wj, &kuu_factors)?;
            for (k, g) in g3.into_iter().enumerate() {
                if k == 0 {
                    kuu_bar += g * (-0.5);
                } else {
                    ks_bar[k - 1] += g * (-0.5);
                }
            }
            // w^T K_uu w for the beta path
            let ops: Vec<FactorOp> = kuu_factors.iter().map(|f| FactorOp::Mul(f)).collect();
            let kw = crate::linalg::apply_kron_ops(&ops, &wj)?;
            t_wkw += wj.iter().zip(&kw).map(|(a, b)| a * b).sum::<f64>();
        }
        // -(beta/2) w^T (dK_psi/dbeta) w = +(1/2) beta^{-1} w^T K_uu w
        d_beta += 0.5 * beta_inv * t_wkw;

        // ---- psi0 term: -(beta d_y / 2) psi0_full ----
        let tr_ks: Vec<f64> = cache.k_s.iter().map(|k| k.trace()).collect();
        let tr_ks_all: f64 = tr_ks.iter().product();
        psi0_bar += -0.5 * beta * d_y * tr_ks_all;
        for k in 0..cache.k_s.len() {
            let others: f64 = tr_ks
                .iter()
                .enumerate()
                .filter(|(l, _)| *l != k)
                .map(|(_, v)| v)
                .product();
            let scale = -0.5 * beta * d_y * cache.psi.psi0 * others;
            for i in 0..cache.k_s[k].nrows() {
                ks_bar[k][(i, i)] += scale;
            }
        }
        d_beta += -0.5 * d_y * cache.psi0_full;

        // ---- trace C term: +(beta d_y / 2) trace_c ----
        let tr_c: Vec<f64> = cache.c_factors.iter().map(|c| c.trace()).collect();
        for k in 0..n_factors {
            let others: f64 = tr_c
                .iter()
                .enumerate()
                .filter(|(l, _)| *l != k)
                .map(|(_, v)| v)
                .product();
            let scale = 0.5 * beta * d_y * others;
            // tr(K_k^{-1} P_k): d/dP_k = K_k^{-1}; d/dK_k = -K_k^{-1} P_k K_k^{-1}
            let p_k = if k == 0 { &cache.psi.psi2 } else { &p_s[k - 1] };
            let kinv_p_kinv = &kinv[k] * p_k * &kinv[k];
            if k == 0 {
                psi2_bar += &kinv[0] * scale;
                kuu_bar -= kinv_p_kinv * scale;
            } else {
                let kmat = &cache.k_s[k - 1];
                let p_bar = &kinv[k] * scale;
                ks_bar[k - 1] += &p_bar * kmat + kmat * &p_bar;
                ks_bar[k - 1] -= kinv_p_kinv * scale;
            }
        }
        d_beta += 0.5 * d_y * cache.trace_c;

        // ---- remaining direct beta terms ----
        d_beta += 0.5 * d_y * (n - m_total) * beta_inv;
        d_beta += -0.5 * cache.t_yy;

        // ---- KL term ----
        let mut d_mu = -self.q.mu.clone();
        let mut d_s = self.q.s.map(|s| -0.5 * (1.0 - 1.0 / s));

        // ---- chain rules ----
        let adj = PsiAdjoint {
            psi0: psi0_bar,
            psi1: Some(&psi1_bar),
            psi2: Some(&psi2_bar),
        };
        let psi_grad = self.kernel_xi.psi_stats_vjp(&self.q, &self.z_xi, &adj)?;
        d_mu += &psi_grad.d_mu;
        d_s += &psi_grad.d_s;
        let mut d_z = psi_grad.d_z;
        let mut d_kernel_xi = psi_grad.d_log_params;

        if self.kernel_xi.needs_stabilizer() {
            // K_eff = G + (c/m) tr(G) I, so the raw-gram adjoint picks up a
            // trace term
            let extra = KUU_STABILIZER_REL * kuu_bar.trace() / kuu_bar.nrows() as f64;
            for i in 0..kuu_bar.nrows() {
                kuu_bar[(i, i)] += extra;
            }
        }
        let g_uu = self.kernel_xi.gram_vjp(&self.z_xi, &self.z_xi, &kuu_bar)?;
        d_z += &g_uu.d_x1 + &g_uu.d_x2;
        for (dst, src) in d_kernel_xi.iter_mut().zip(&g_uu.d_log_params) {
            *dst += src;
        }

        let mut d_kernels_s = Vec::with_capacity(self.kernels_s.len());
        for (k, kern) in self.kernels_s.iter().enumerate() {
            let g = kern.gram_vjp(&self.x_s[k], &self.x_s[k], &ks_bar[k])?;
            d_kernels_s.push(g.d_log_params);
        }

        let mut grads = BoundGradients {
            d_mu,
            d_s,
            d_z,
            d_kernel_xi,
            d_kernels_s,
            d_log_beta: beta * d_beta,
        };
        if !self.trainable.latents {
            grads.d_mu.fill(0.0);
            grads.d_s.fill(0.0);
        }
        if !self.trainable.inducing {
            grads.d_z.fill(0.0);
        }
        if !self.trainable.kernel_xi {
            grads.d_kernel_xi.iter_mut().for_each(|v| *v = 0.0);
        }
        if !self.trainable.kernels_s {
            for g in &mut grads.d_kernels_s {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if !self.trainable.beta {
            grads.d_log_beta = 0.0;
        }
        Ok(grads)
    }

    /// Packs the unfrozen parameter groups for the optimizer. Variances go
    /// in log space.
    pub fn pack_params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        if self.trainable.latents {
            p.extend(self.q.mu.iter());
            p.extend(self.q.s.iter().map(|s| s.ln()));
        }
        if self.trainable.inducing {
            p.extend(self.z_xi.iter());
        }
        if self.trainable.kernel_xi {
            p.extend(self.kernel_xi.params_log());
        }
        if self.trainable.kernels_s {
            for k in &self.kernels_s {
                p.extend(k.params_log());
            }
        }
        if self.trainable.beta {
            p.push(self.beta.ln());
        }
        p
    }

    pub fn unpack_params(&mut self, p: &[f64]) -> Result<()> {
        let mut at = 0;
        if self.trainable.latents {
            let nd = self.q.mu.len();
            for (dst, &src) in self.q.mu.iter_mut().zip(&p[at..at + nd]) {
                *dst = src;
            }
            at += nd;
            for (dst, &src) in self.q.s.iter_mut().zip(&p[at..at + nd]) {
                *dst = src.exp();
            }
            at += nd;
        }
        if self.trainable.inducing {
            let nz = self.z_xi.len();
            for (dst, &src) in self.z_xi.iter_mut().zip(&p[at..at + nz]) {
                *dst = src;
            }
            at += nz;
        }
        if self.trainable.kernel_xi {
            let nk = self.kernel_xi.n_params();
            self.kernel_xi.set_params_log(&p[at..at + nk])?;
            at += nk;
        }
        if self.trainable.kernels_s {
            for k in &mut self.kernels_s {
                let nk = k.n_params();
                k.set_params_log(&p[at..at + nk])?;
                at += nk;
            }
        }
        if self.trainable.beta {
            self.beta = p[at].exp();
            at += 1;
        }
        if at != p.len() {
            return Err(Error::DimensionMismatch {
                op: "unpack_params",
                detail: format!("consumed {at} of {} packed parameters", p.len()),
            });
        }
        Ok(())
    }

    fn gradient_packed(&self, grads: &BoundGradients) -> Vec<f64> {
        let mut g = Vec::new();
        if self.trainable.latents {
            g.extend(grads.d_mu.iter());
            // chain d/ds -> d/d log s
            g.extend(grads.d_s.iter().zip(self.q.s.iter()).map(|(d, s)| d * s));
        }
        if self.trainable.inducing {
            g.extend(grads.d_z.iter());
        }
        if self.trainable.kernel_xi {
            g.extend(grads.d_kernel_xi.iter());
        }
        if self.trainable.kernels_s {
            for gk in &grads.d_kernels_s {
                g.extend(gk.iter());
            }
        }
        if self.trainable.beta {
            g.push(grads.d_log_beta);
        }
        g
    }

    /// Maximizes the collapsed bound over all unfrozen parameter groups.
    pub fn train(&mut self, settings: &OptimizerSettings) -> Result<TrainOutcome> {
        let x0 = self.pack_params();
        let mut probe = self.clone();
        let outcome = maximize(
            |p| {
                probe.unpack_params(p)?;
                let cache = probe.build_cache()?;
                let bound = probe.bound_from_cache(&cache);
                if !bound.is_finite() {
                    return Err(Error::NonFinite("collapsed bound"));
                }
                let grads = probe.bound_gradients_with_cache(&cache)?;
                Ok((bound, probe.gradient_packed(&grads)))
            },
            &x0,
            settings,
            None,
        )?;
        self.unpack_params(&outcome.x)?;
        Ok(TrainOutcome {
            bound: outcome.objective,
            iterations: outcome.iterations,
            converged: outcome.converged,
        })
    }

    /// Analytic optimum of the inducing-output posterior `q(U)`.
    pub fn optimal_qu(&self, cache: &BoundCache) -> Result<OptimalQu> {
        let kuu_factors: Vec<&DMatrix<f64>> = std::iter::once(&cache.k_uu_xi)
            .chain(cache.k_s.iter())
            .collect();
        let ops: Vec<FactorOp> = kuu_factors.iter().map(|f| FactorOp::Mul(f)).collect();
        let mean = apply_kron_ops_mat(&ops, &cache.w)?;
        Ok(OptimalQu {
            mean,
            cov: QuCovariance {
                l_factors: cache.l_factors.iter().map(|c| c.l.clone()).collect(),
                q_factors: cache.c_eig_q.clone(),
                d: cache.d.clone(),
                beta: self.beta,
            },
        })
    }
}

/// Optimal `q(U)`: mean plus the covariance in factorized form
/// `Sigma_u = beta^{-1} (L Q_C) D^{-1} (L Q_C)^T`.
#[derive(Debug, Clone)]
pub struct OptimalQu {
    pub mean: DMatrix<f64>,
    pub cov: QuCovariance,
}

#[derive(Debug, Clone)]
pub struct QuCovariance {
    l_factors: Vec<DMatrix<f64>>,
    q_factors: Vec<DMatrix<f64>>,
    d: DVector<f64>,
    beta: f64,
}

impl QuCovariance {
    pub fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let ops_lt: Vec<FactorOp> = self.l_factors.iter().map(FactorOp::TMul).collect();
        let mut x = crate::linalg::apply_kron_ops(&ops_lt, v.as_slice())?;
        let ops_qt: Vec<FactorOp> = self.q_factors.iter().map(FactorOp::TMul).collect();
        x = crate::linalg::apply_kron_ops(&ops_qt, &x)?;
        for (xi, di) in x.iter_mut().zip(self.d.iter()) {
            *xi /= di;
        }
        let ops_q: Vec<FactorOp> = self.q_factors.iter().map(FactorOp::Mul).collect();
        x = crate::linalg::apply_kron_ops(&ops_q, &x)?;
        let ops_l: Vec<FactorOp> = self.l_factors.iter().map(FactorOp::Mul).collect();
        x = crate::linalg::apply_kron_ops(&ops_l, &x)?;
        Ok(DVector::from_vec(x.into_iter().map(|v| v / self.beta).collect()))
    }

    /// Dense expansion; for small `m` only (tests and oracles).
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        let m: usize = self.l_factors.iter().map(|l| l.nrows()).product();
        let mut out = DMatrix::zeros(m, m);
        for j in 0..m {
            let mut e = DVector::zeros(m);
            e[j] = 1.0;
            let col = self.matvec(&e)?;
            out.column_mut(j).copy_from(&col);
        }
        Ok(out)
    }
}

/// PCA initialization of the latent posterior: project the realization-major
/// reshape of the data onto its top principal directions and scale each
/// latent column to unit variance. Zero-variance directions fall back to
/// small seeded noise.
pub fn pca_latent_init(
    y: &DMatrix<f64>,
    n_xi: usize,
    d_xi: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if y.nrows() % n_xi != 0 {
        return Err(Error::DimensionMismatch {
            op: "pca_latent_init",
            detail: format!("{} rows not divisible by n_xi = {}", y.nrows(), n_xi),
        });
    }
    let n_s = y.nrows() / n_xi;
    let cols = n_s * y.ncols();
    let mut r = DMatrix::zeros(n_xi, cols);
    for i in 0..n_xi {
        for p in 0..n_s {
            for j in 0..y.ncols() {
                r[(i, p * y.ncols() + j)] = y[(i * n_s + p, j)];
            }
        }
    }
    // center columns
    for c in 0..cols {
        let mean = r.column(c).sum() / n_xi as f64;
        for i in 0..n_xi {
            r[(i, c)] -= mean;
        }
    }
    // scores from the realization-space Gram matrix
    let gram = &r * r.transpose();
    let eig = sym_eig(&gram)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut mu = DMatrix::zeros(n_xi, d_xi);
    for q in 0..d_xi {
        // eigenvalues ascend; take from the top
        let src = eig.lambda.len() as i64 - 1 - q as i64;
        let (col, lam) = if src >= 0 {
            (
                eig.q.column(src as usize).clone_owned(),
                eig.lambda[src as usize].max(0.0),
            )
        } else {
            (DVector::zeros(n_xi), 0.0)
        };
        let score = col * lam.sqrt();
        let var = score.iter().map(|v| v * v).sum::<f64>() / n_xi as f64;
        if var > 1e-20 {
            let scale = 1.0 / var.sqrt();
            for i in 0..n_xi {
                mu[(i, q)] = score[i] * scale;
            }
        } else {
            for i in 0..n_xi {
                mu[(i, q)] = 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
    }
    Ok(mu)
}

/// Picks `m_xi` inducing inputs as a seeded random subset of the latent means.
pub fn inducing_init_subset(mu: &DMatrix<f64>, m_xi: usize, seed: u64) -> DMatrix<f64> {
    let n = mu.nrows();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0123_4567_89ab_cdef);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(m_xi.min(n));
    let mut z = DMatrix::zeros(idx.len(), mu.ncols());
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..mu.ncols() {
            z[(r, c)] = mu[(i, c)];
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    pub(crate) fn tiny_model(seed: u64, kernel: KernelSpec, d_y: usize) -> SgplvmModel {
        let mut r = rng(seed);
        let n_xi = 4;
        let d_xi = kernel.input_dim();
        let m_xi = 2;
        let x1 = DMatrix::from_fn(3, 1, |i, _| i as f64 / 2.0);
        let x2 = DMatrix::from_fn(3, 1, |i, _| i as f64 / 2.0);
        let n = n_xi * 9;
        let y = DMatrix::from_fn(n, d_y, |_, _| r.gen_range(-1.0..1.0));
        let q = VariationalLatentPosterior::new(
            DMatrix::from_fn(n_xi, d_xi, |_, _| r.gen_range(-1.0..1.0)),
            DMatrix::from_fn(n_xi, d_xi, |_, _| r.gen_range(0.1..0.6)),
        )
        .unwrap();
        let z = DMatrix::from_fn(m_xi, d_xi, |_, _| r.gen_range(-1.0..1.0));
        SgplvmModel::new(
            y,
            vec![x1, x2],
            q,
            z,
            kernel,
            vec![KernelSpec::exponential(0.4), KernelSpec::exponential(0.6)],
            3.0,
            TrainableFlags::default(),
        )
        .unwrap()
    }

    #[test]
    fn latent_kl_closed_forms() {
        let q = VariationalLatentPosterior::new(DMatrix::zeros(3, 2), DMatrix::from_element(3, 2, 1.0))
            .unwrap();
        assert!(latent_prior_kl(&q).unwrap().abs() < 1e-15);

        let q = VariationalLatentPosterior::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((latent_prior_kl(&q).unwrap() - 0.5).abs() < 1e-15);

        // random q against the coordinate-wise 1-D closed form
        let mut r = rng(91);
        let mu = DMatrix::from_fn(4, 3, |_, _| r.gen_range(-2.0..2.0));
        let s = DMatrix::from_fn(4, 3, |_, _| r.gen_range(0.1..3.0));
        let q = VariationalLatentPosterior::new(mu.clone(), s.clone()).unwrap();
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                oracle += 0.5 * (s[(i, j)] + mu[(i, j)] * mu[(i, j)] - 1.0 - s[(i, j)].ln());
            }
        }
        let got = latent_prior_kl(&q).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs());
    }

    #[test]
    fn latent_kl_rejects_nonpositive_variance() {
        let q = VariationalLatentPosterior {
            mu: DMatrix::zeros(1, 1),
            s: DMatrix::from_element(1, 1, 0.0),
        };
        assert!(latent_prior_kl(&q).is_err());
    }

    #[test]
    fn per_dim_bound_sums_to_full() {
        for kernel in [
            KernelSpec::rbf_ard(1.2, vec![0.8, 1.1]),
            KernelSpec::linear(vec![0.7, 0.9]),
            KernelSpec::sum(1.2, vec![0.8, 1.1], vec![0.7, 0.9]),
        ] {
            let m = tiny_model(92, kernel, 3);
            let (bound, _) = m.collapsed_bound().unwrap();
            let (per_dim, kl) = m.collapsed_bound_per_dim().unwrap();
            let total: f64 = per_dim.iter().sum::<f64>() - kl;
            assert!(
                (total - bound).abs() <= 1e-10 * bound.abs().max(1.0),
                "sum {total} vs bound {bound}"
            );
        }
    }

    #[test]
    fn single_dimension_term_equals_bound_plus_kl() {
        let m = tiny_model(93, KernelSpec::rbf_ard(1.1, vec![0.9, 1.3]), 1);
        let (bound, _) = m.collapsed_bound().unwrap();
        let (per_dim, kl) = m.collapsed_bound_per_dim().unwrap();
        assert_eq!(per_dim.len(), 1);
        assert!((per_dim[0] - kl - bound).abs() <= 1e-10 * bound.abs().max(1.0));
    }

    #[test]
    fn duplicated_columns_have_equal_terms_and_double_hyp_gradients() {
        let mut m = tiny_model(94, KernelSpec::rbf_ard(1.1, vec![0.9, 1.3]), 1);
        let y1 = m.y.clone();
        let mut y2 = DMatrix::zeros(y1.nrows(), 2);
        y2.column_mut(0).copy_from(&y1.column(0));
        y2.column_mut(1).copy_from(&y1.column(0));
        let single = m.clone();
        m.y = y2;
        let (per_dim, _) = m.collapsed_bound_per_dim().unwrap();
        assert!((per_dim[0] - per_dim[1]).abs() <= 1e-10 * per_dim[0].abs());

        let g1 = single.bound_gradients().unwrap();
        let g2 = m.bound_gradients().unwrap();
        for (a, b) in g1.d_kernel_xi.iter().zip(&g2.d_kernel_xi) {
            assert!((2.0 * a - b).abs() <= 1e-8 * b.abs().max(1e-8), "{a} {b}");
        }
    }

    #[test]
    fn zero_data_removes_fit_terms() {
        let mut m = tiny_model(95, KernelSpec::rbf_ard(1.0, vec![1.0, 1.0]), 2);
        m.y.fill(0.0);
        let (bound, cache) = m.collapsed_bound().unwrap();
        assert_eq!(cache.t_yy, 0.0);
        assert_eq!(cache.t_fit, 0.0);
        let n = m.n() as f64;
        let mt = m.m() as f64;
        let d_y = m.d_y() as f64;
        let expect = 0.5
            * d_y
            * ((n - mt) * m.beta.ln() - n * (2.0 * std::f64::consts::PI).ln() - cache.log_det_a)
            - 0.5 * m.beta * d_y * (cache.psi0_full - cache.trace_c)
            - cache.kl;
        assert!((bound - expect).abs() <= 1e-12 * expect.abs());
    }

    #[test]
    fn frozen_groups_zero_gradients() {
        let mut m = tiny_model(96, KernelSpec::rbf_ard(1.0, vec![1.0, 1.0]), 2);
        m.trainable = TrainableFlags {
            latents: false,
            inducing: false,
            kernel_xi: false,
            kernels_s: false,
            beta: false,
        };
        let g = m.bound_gradients().unwrap();
        assert!(g.d_mu.iter().all(|&v| v == 0.0));
        assert!(g.d_s.iter().all(|&v| v == 0.0));
        assert!(g.d_z.iter().all(|&v| v == 0.0));
        assert!(g.d_kernel_xi.iter().all(|&v| v == 0.0));
        assert!(g.d_kernels_s.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(g.d_log_beta, 0.0);
        assert_eq!(m.pack_params().len(), 0);
    }

    fn fd_check_bound(kernel: KernelSpec, seed: u64) {
        let m = tiny_model(seed, kernel, 2);
        let grads = m.bound_gradients().unwrap();
        let packed_grad = m.gradient_packed(&grads);
        let x0 = m.pack_params();
        let h = 1e-5;
        let mut worst: (f64, usize) = (0.0, 0);
        for i in 0..x0.len() {
            let mut probe = m.clone();
            let mut xp = x0.clone();
            xp[i] += h;
            probe.unpack_params(&xp).unwrap();
            let fp = probe.collapsed_bound().unwrap().0;
            let mut xm = x0.clone();
            xm[i] -= h;
            probe.unpack_params(&xm).unwrap();
            let fm = probe.collapsed_bound().unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let an = packed_grad[i];
            if an.abs() > 1e-6 || fd.abs() > 1e-6 {
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                if rel > worst.0 {
                    worst = (rel, i);
                }
                assert!(
                    rel < 1e-4,
                    "coordinate {i}: fd {fd} vs analytic {an} (rel {rel:.2e})"
                );
            }
        }
        let _ = worst;
    }

    #[test]
    fn bound_gradients_match_finite_differences_rbf() {
        fd_check_bound(KernelSpec::rbf_ard(1.2, vec![0.8, 1.1]), 97);
    }

    #[test]
    fn bound_gradients_match_finite_differences_linear() {
        fd_check_bound(KernelSpec::linear(vec![0.9, 0.6]), 98);
    }

    #[test]
    fn bound_gradients_match_finite_differences_sum() {
        fd_check_bound(KernelSpec::sum(1.1, vec![0.9, 1.2], vec![0.5, 0.8]), 99);
    }

    #[test]
    fn bound_invariant_to_realization_permutation() {
        let m = tiny_model(100, KernelSpec::rbf_ard(1.2, vec![0.8, 1.1]), 2);
        let (bound, _) = m.collapsed_bound().unwrap();
        // permute realizations: rows of q and the corresponding Y blocks
        let perm = [2usize, 0, 3, 1];
        let n_s = m.n_s();
        let mut m2 = m.clone();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..m.q.mu.ncols() {
                m2.q.mu[(new_i, c)] = m.q.mu[(old_i, c)];
                m2.q.s[(new_i, c)] = m.q.s[(old_i, c)];
            }
            for p in 0..n_s {
                for j in 0..m.d_y() {
                    m2.y[(new_i * n_s + p, j)] = m.y[(old_i * n_s + p, j)];
                }
            }
        }
        let (bound2, _) = m2.collapsed_bound().unwrap();
        assert!(
            (bound - bound2).abs() <= 1e-10 * bound.abs(),
            "{bound} vs {bound2}"
        );
    }

    #[test]
    fn optimal_qu_zero_data_is_zero() {
        let mut m = tiny_model(101, KernelSpec::rbf_ard(1.0, vec![1.0, 1.0]), 2);
        m.y.fill(0.0);
        let (_, cache) = m.collapsed_bound().unwrap();
        let qu = m.optimal_qu(&cache).unwrap();
        assert!(qu.mean.norm() < 1e-14);
    }

    #[test]
    fn training_does_not_decrease_bound() {
        let mut m = tiny_model(102, KernelSpec::rbf_ard(1.2, vec![0.8, 1.1]), 1);
        let (before, _) = m.collapsed_bound().unwrap();
        let settings = OptimizerSettings {
            max_iters: 30,
            ..OptimizerSettings::default()
        };
        let out = m.train(&settings).unwrap();
        assert!(out.bound >= before - 1e-9);
        let mut last = f64::NEG_INFINITY;
        for rec in &out.iterations {
            assert!(rec.objective >= last - 1e-12);
            last = rec.objective;
        }
    }

    #[test]
    fn resume_from_converged_state_is_stationary() {
        let mut m = tiny_model(103, KernelSpec::rbf_ard(1.2, vec![0.8, 1.1]), 1);
        let settings = OptimizerSettings {
            max_iters: 400,
            ..OptimizerSettings::default()
        };
        m.train(&settings).unwrap();
        let (b1, _) = m.collapsed_bound().unwrap();
        m.train(&settings).unwrap();
        let (b2, _) = m.collapsed_bound().unwrap();
        assert!((b2 - b1).abs() < 1e-5, "b1 {b1} b2 {b2}");
    }

    #[test]
    fn pca_init_shapes_and_determinism() {
        let mut r = rng(104);
        let y = DMatrix::from_fn(40, 1, |_, _| r.gen_range(-1.0..1.0));
        let a = pca_latent_init(&y, 8, 3, 7).unwrap();
        let b = pca_latent_init(&y, 8, 3, 7).unwrap();
        assert_eq!(a.shape(), (8, 3));
        assert_eq!(a, b);
        // unit column variance
        for c in 0..3 {
            let var = a.column(c).iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((var - 1.0).abs() < 1e-8, "column {c} variance {var}");
        }
    }

    #[test]
    fn inducing_subset_rows_come_from_mu() {
        let mut r = rng(105);
        let mu = DMatrix::from_fn(10, 2, |_, _| r.gen_range(-1.0..1.0));
        let z = inducing_init_subset(&mu, 4, 3);
        assert_eq!(z.shape(), (4, 2));
        for zr in 0..4 {
            let found = (0..10).any(|mr| {
                (0..2).all(|c| (z[(zr, c)] - mu[(mr, c)]).abs() < 1e-15)
            });
            assert!(found);
        }
    }
}
