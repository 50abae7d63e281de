//! Exact structured GP regression on Cartesian-product inputs.
//!
//! The kernel is separable over (stochastic, spatial-1, ..., spatial-d_s)
//! factors, so the training covariance is a Kronecker product and the
//! likelihood, its gradients, and predictions run off per-factor
//! eigendecompositions. Zero mean function throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{
    apply_kron_ops, apply_kron_ops_mat, bilinear_factor_grads, clamp_eigenvalues, kron_dense,
    sym_eig, EigenPair, FactorOp,
};
use crate::opt::{maximize, IterationRecord, OptimizerSettings};

/// Cartesian-product input design: stochastic rows times spatial grid factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructuredInputs {
    /// `n_xi x d_xi` stochastic inputs.
    pub x_xi: DMatrix<f64>,
    /// Spatial factor coordinates, one `n_k x 1` matrix per spatial dimension.
    pub x_s: Vec<DMatrix<f64>>,
}

impl StructuredInputs {
    pub fn new(x_xi: DMatrix<f64>, x_s: Vec<DMatrix<f64>>) -> Result<Self> {
        if x_xi.nrows() == 0 || x_s.iter().any(|f| f.nrows() == 0) {
            return Err(Error::InvalidArgument(
                "structured inputs require non-empty factors".into(),
            ));
        }
        if x_s.is_empty() {
            return Err(Error::InvalidArgument(
                "structured inputs require at least one spatial factor".into(),
            ));
        }
        Ok(StructuredInputs { x_xi, x_s })
    }

    pub fn n_xi(&self) -> usize {
        self.x_xi.nrows()
    }

    pub fn n_s(&self) -> usize {
        self.x_s.iter().map(|f| f.nrows()).product()
    }

    /// Logical number of inputs `n = n_xi * prod(n_k)`.
    pub fn n(&self) -> usize {
        self.n_xi() * self.n_s()
    }
}

#[derive(Debug, Clone)]
struct SgprCache {
    eig: Vec<EigenPair>,
    /// Composed eigenvalues in Kronecker order, clamped for inversion.
    lambda: DVector<f64>,
    /// Rotated data Q^T Y.
    qty: DMatrix<f64>,
}

/// Structured GP regression model with per-factor kernels and noise
/// precision `beta`.
#[derive(Debug, Clone)]
pub struct SgprModel {
    pub inputs: StructuredInputs,
    pub y: DMatrix<f64>,
    pub kernel_xi: KernelSpec,
    pub kernels_s: Vec<KernelSpec>,
    pub beta: f64,
    cache: Option<SgprCache>,
}

/// Which predictive moments to compute.
#[derive(Debug, Clone, Copy)]
pub struct PredictRequest {
    pub mean: bool,
    pub marginal_variance: bool,
    pub full_covariance: bool,
    /// Include the observation noise `1/beta` in variances (the default for
    /// predictive densities over observables).
    pub include_noise: bool,
}

impl Default for PredictRequest {
    fn default() -> Self {
        PredictRequest {
            mean: true,
            marginal_variance: true,
            full_covariance: false,
            include_noise: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgprPrediction {
    pub mean: Option<DMatrix<f64>>,
    /// Marginal predictive variance, shared across output dimensions.
    pub variance: Option<DVector<f64>>,
    /// Full covariance over the spatial test grid (single stochastic test
    /// point only).
    pub covariance: Option<DMatrix<f64>>,
}

impl SgprModel {
    pub fn new(
        inputs: StructuredInputs,
        y: DMatrix<f64>,
        kernel_xi: KernelSpec,
        kernels_s: Vec<KernelSpec>,
        beta: f64,
    ) -> Result<Self> {
        if kernels_s.len() != inputs.x_s.len() {
            return Err(Error::DimensionMismatch {
                op: "SgprModel::new",
                detail: format!(
                    "{} spatial kernels for {} spatial factors",
                    kernels_s.len(),
                    inputs.x_s.len()
                ),
            });
        }
        if y.nrows() != inputs.n() {
            return Err(Error::DimensionMismatch {
                op: "SgprModel::new",
                detail: format!("y has {} rows, inputs have n = {}", y.nrows(), inputs.n()),
            });
        }
        if beta <= 0.0 || !beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        kernel_xi.validate()?;
        for k in &kernels_s {
            k.validate()?;
        }
        Ok(SgprModel {
            inputs,
            y,
            kernel_xi,
            kernels_s,
            beta,
            cache: None,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.n()
    }

    pub fn d_y(&self) -> usize {
        self.y.ncols()
    }

    fn factor_grams(&self) -> Result<Vec<DMatrix<f64>>> {
        let mut grams =
            vec![self
                .kernel_xi
                .gram(&self.inputs.x_xi, &self.inputs.x_xi)?];
        for (k, xk) in self.kernels_s.iter().zip(&self.inputs.x_s) {
            grams.push(k.gram(xk, xk)?);
        }
        Ok(grams)
    }

    /// Rebuilds the eigendecomposition cache from the current
    /// hyperparameters.
    pub fn rebuild_cache(&mut self) -> Result<()> {
        let grams = self.factor_grams()?;
        let mut eig = Vec::with_capacity(grams.len());
        for g in &grams {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sgpr kernel matrix"));
            }
            eig.push(sym_eig(g)?);
        }
        let lambda_factors: Vec<DVector<f64>> = eig
            .iter()
            .map(|e| clamp_eigenvalues(&e.lambda))
            .collect();
        let lambda = crate::linalg::compose_kron_diag(&lambda_factors);
        let ops: Vec<FactorOp> = eig.iter().map(|e| FactorOp::TMul(&e.q)).collect();
        let qty = apply_kron_ops_mat(&ops, &self.y)?;
        self.cache = Some(SgprCache { eig, lambda, qty });
        Ok(())
    }

    fn cache(&self) -> Result<&SgprCache> {
        self.cache.as_ref().ok_or_else(|| {
            Error::InvalidArgument("sgpr cache not built; call rebuild_cache first".into())
        })
    }

    /// Sum over output dimensions of `log N(y_j | 0, K_yy)` via the
    /// Kronecker eigendecomposition.
    pub fn log_likelihood(&self) -> Result<f64> {
        let cache = self.cache()?;
        let n = self.n() as f64;
        let d_y = self.d_y() as f64;
        let beta_inv = 1.0 / self.beta;
        let mut log_det = 0.0;
        for &l in cache.lambda.iter() {
            log_det += (l + beta_inv).ln();
        }
        let mut quad = 0.0;
        for j in 0..self.d_y() {
            for (i, &l) in cache.lambda.iter().enumerate() {
                let v = cache.qty[(i, j)];
                quad += v * v / (l + beta_inv);
            }
        }
        let ll = -0.5 * n * d_y * (2.0 * std::f64::consts::PI).ln() - 0.5 * d_y * log_det
            - 0.5 * quad;
        if !ll.is_finite() {
            return Err(Error::NonFinite("sgpr log likelihood"));
        }
        Ok(ll)
    }

    /// `alpha = K_yy^{-1} Y` through the rotated basis.
    fn alpha(&self) -> Result<DMatrix<f64>> {
        let cache = self.cache()?;
        let beta_inv = 1.0 / self.beta;
        let mut scaled = cache.qty.clone();
        for j in 0..scaled.ncols() {
            for i in 0..scaled.nrows() {
                scaled[(i, j)] /= cache.lambda[i] + beta_inv;
            }
        }
        let ops: Vec<FactorOp> = cache.eig.iter().map(|e| FactorOp::Mul(&e.q)).collect();
        apply_kron_ops_mat(&ops, &scaled)
    }

    /// Packed log-parameters: stochastic kernel, spatial kernels, log beta.
    pub fn params_log(&self) -> Vec<f64> {
        let mut p = self.kernel_xi.params_log();
        for k in &self.kernels_s {
            p.extend(k.params_log());
        }
        p.push(self.beta.ln());
        p
    }

    pub fn set_params_log(&mut self, p: &[f64]) -> Result<()> {
        let mut at = 0;
        let nk = self.kernel_xi.n_params();
        self.kernel_xi.set_params_log(&p[at..at + nk])?;
        at += nk;
        for k in &mut self.kernels_s {
            let nk = k.n_params();
            k.set_params_log(&p[at..at + nk])?;
            at += nk;
        }
        self.beta = p[at].exp();
        self.cache = None;
        Ok(())
    }

    /// Gradient of the log likelihood w.r.t. the packed log-parameters.
    pub fn log_likelihood_grad(&self) -> Result<Vec<f64>> {
        let cache = self.cache()?;
        let beta_inv = 1.0 / self.beta;
        let d_y = self.d_y() as f64;
        let alpha = self.alpha()?;
        let n_factors = cache.eig.len();

        // trace weights: w_k[j] = sum over multi-indices with alpha_k = j of
        // prod_{l != k} lambda_l / (lambda + beta^{-1})
        let sizes: Vec<usize> = cache.eig.iter().map(|e| e.lambda.len()).collect();
        let mut weights: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut sum_inv = 0.0;
        let total: usize = sizes.iter().product();
        let mut idx = vec![0usize; n_factors];
        for flat in 0..total {
            // decode row-major multi-index
            let mut rem = flat;
            for k in (0..n_factors).rev() {
                idx[k] = rem % sizes[k];
                rem /= sizes[k];
            }
            let denom = cache.lambda[flat] + beta_inv;
            sum_inv += 1.0 / denom;
            for k in 0..n_factors {
                let mut prod = 1.0;
                for l in 0..n_factors {
                    if l != k {
                        prod *= cache.eig[l].lambda[idx[l]].max(0.0);
                    }
                }
                weights[k][idx[k]] += prod / denom;
            }
        }

        // factor adjoints: 0.5 * sum_j alpha_j^T dK alpha_j - (d_y/2) tr(Kyy^{-1} dK)
        let factor_mats: Vec<&DMatrix<f64>> = Vec::new();
        drop(factor_mats);
        let grams = self.factor_grams()?;
        let gram_refs: Vec<&DMatrix<f64>> = grams.iter().collect();
        let mut adjoints: Vec<DMatrix<f64>> = sizes
            .iter()
            .map(|&s| DMatrix::zeros(s, s))
            .collect();
        for j in 0..self.d_y() {
            let aj: Vec<f64> = alpha.column(j).iter().copied().collect();
            let grads = bilinear_factor_grads(&aj, &aj, &gram_refs)?;
            for (acc, g) in adjoints.iter_mut().zip(grads) {
                *acc += 0.5 * g;
            }
        }
        for k in 0..n_factors {
            let q = &cache.eig[k].q;
            let wdiag = DMatrix::from_diagonal(&DVector::from_vec(weights[k].clone()));
            adjoints[k] -= 0.5 * d_y * q * wdiag * q.transpose();
        }

        // chain into kernel hyperparameters
        let mut grad = Vec::new();
        let g0 = self
            .kernel_xi
            .gram_vjp(&self.inputs.x_xi, &self.inputs.x_xi, &adjoints[0])?;
        grad.extend(g0.d_log_params);
        for (k, kern) in self.kernels_s.iter().enumerate() {
            let gk = kern.gram_vjp(&self.inputs.x_s[k], &self.inputs.x_s[k], &adjoints[k + 1])?;
            grad.extend(gk.d_log_params);
        }

        // beta gradient: dK_yy = I d beta^{-1}, d beta^{-1}/d log beta = -1/beta
        let mut alpha_sq = 0.0;
        for v in alpha.iter() {
            alpha_sq += v * v;
        }
        let d_beta_inv = 0.5 * alpha_sq - 0.5 * d_y * sum_inv;
        grad.push(-beta_inv * d_beta_inv);
        Ok(grad)
    }

    /// Maximizes the log likelihood over the packed log-parameters.
    pub fn train(&mut self, settings: &OptimizerSettings) -> Result<Vec<IterationRecord>> {
        let x0 = self.params_log();
        let mut probe = self.clone();
        let outcome = maximize(
            |p| {
                probe.set_params_log(p)?;
                probe.rebuild_cache()?;
                let ll = probe.log_likelihood()?;
                let g = probe.log_likelihood_grad()?;
                Ok((ll, g))
            },
            &x0,
            settings,
            None,
        )?;
        self.set_params_log(&outcome.x)?;
        self.rebuild_cache()?;
        Ok(outcome.iterations)
    }

    /// Predictive moments at structured test inputs.
    pub fn predict(
        &self,
        test: &StructuredInputs,
        want: &PredictRequest,
    ) -> Result<SgprPrediction> {
        let cache = self.cache()?;
        if test.x_s.len() != self.inputs.x_s.len() {
            return Err(Error::DimensionMismatch {
                op: "sgpr_predict",
                detail: format!(
                    "test has {} spatial factors, model has {}",
                    test.x_s.len(),
                    self.inputs.x_s.len()
                ),
            });
        }
        if want.full_covariance && test.n_xi() != 1 {
            return Err(Error::InvalidArgument(
                "full covariance requires a single stochastic test point".into(),
            ));
        }
        let beta_inv = 1.0 / self.beta;

        // cross-covariance factors K_*f
        let mut cross = vec![self.kernel_xi.gram(&test.x_xi, &self.inputs.x_xi)?];
        for (k, (kern, xk)) in self.kernels_s.iter().zip(&self.inputs.x_s).enumerate() {
            cross.push(kern.gram(&test.x_s[k], xk)?);
        }

        let mut out = SgprPrediction {
            mean: None,
            variance: None,
            covariance: None,
        };

        if want.mean {
            let alpha = self.alpha()?;
            let ops: Vec<FactorOp> = cross.iter().map(FactorOp::Mul).collect();
            out.mean = Some(apply_kron_ops_mat(&ops, &alpha)?);
        }

        // rotated cross-covariances E_k = K_*f^(k) Q_k
        let e_factors: Vec<DMatrix<f64>> = cross
            .iter()
            .zip(&cache.eig)
            .map(|(c, e)| c * &e.q)
            .collect();
        let inv_diag: Vec<f64> = cache
            .lambda
            .iter()
            .map(|&l| 1.0 / (l + beta_inv))
            .collect();

        if want.marginal_variance {
            // prior diagonal: product of per-factor k(x, x)
            let mut diag_factors = Vec::with_capacity(cross.len());
            let kxi_diag: Vec<f64> = (0..test.n_xi())
                .map(|i| {
                    let xi = test.x_xi.row(i).clone_owned().transpose();
                    let m = DMatrix::from_column_slice(1, xi.len(), xi.as_slice());
                    self.kernel_xi.gram(&m, &m).map(|g| g[(0, 0)])
                })
                .collect::<Result<Vec<f64>>>()?;
            diag_factors.push(kxi_diag);
            for (k, kern) in self.kernels_s.iter().enumerate() {
                let d: Vec<f64> = (0..test.x_s[k].nrows())
                    .map(|i| {
                        let m = DMatrix::from_element(1, 1, test.x_s[k][(i, 0)]);
                        kern.gram(&m, &m).map(|g| g[(0, 0)])
                    })
                    .collect::<Result<Vec<f64>>>()?;
                diag_factors.push(d);
            }
            let prior_diag = crate::linalg::compose_kron_diag(
                &diag_factors
                    .iter()
                    .map(|v| DVector::from_vec(v.clone()))
                    .collect::<Vec<_>>(),
            );
            // Schur-product reduction in the rotated basis
            let schur: Vec<DMatrix<f64>> = e_factors
                .iter()
                .map(|e| e.component_mul(e))
                .collect();
            let ops: Vec<FactorOp> = schur.iter().map(FactorOp::Mul).collect();
            let reduction = apply_kron_ops(&ops, &inv_diag)?;
            let mut var = DVector::zeros(prior_diag.len());
            for i in 0..var.len() {
                let mut v = prior_diag[i] - reduction[i];
                if want.include_noise {
                    v += beta_inv;
                }
                var[i] = v.max(f64::MIN_POSITIVE);
            }
            out.variance = Some(var);
        }

        if want.full_covariance {
            // blockwise accumulation over the stochastic index; the
            // stochastic rotation enters squared, verified against the dense
            // oracle.
            let n_s_star: usize = test.x_s.iter().map(|f| f.nrows()).product();
            let e_s = dense_kron(&e_factors[1..]);
            let mut k_ss = self.kernel_xi.gram(&test.x_xi, &test.x_xi)?[(0, 0)]
                * dense_kron(
                    &self
                        .kernels_s
                        .iter()
                        .enumerate()
                        .map(|(k, kern)| kern.gram(&test.x_s[k], &test.x_s[k]))
                        .collect::<Result<Vec<_>>>()?,
                );
            let n_xi = self.inputs.n_xi();
            let n_s = self.inputs.n_s();
            for i in 0..n_xi {
                let e_xi = e_factors[0][(0, i)];
                let block: Vec<f64> = (0..n_s).map(|p| inv_diag[i * n_s + p]).collect();
                // H = E_s * Dtilde_i, accumulated as E_s diag(block) E_s^T
                let mut h = e_s.clone();
                for (p, &b) in block.iter().enumerate() {
                    let scale = b.sqrt();
                    for r in 0..h.nrows() {
                        h[(r, p)] *= scale;
                    }
                }
                k_ss -= e_xi * e_xi * &h * h.transpose();
            }
            if want.include_noise {
                for i in 0..n_s_star {
                    k_ss[(i, i)] += beta_inv;
                }
            }
            out.covariance = Some(k_ss);
        }

        Ok(out)
    }
}

fn dense_kron(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::from_element(1, 1, 1.0);
    for m in mats {
        acc = kron_dense(&acc, m);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn small_model(seed: u64, n_xi: usize, n1: usize, n2: usize, d_y: usize) -> SgprModel {
        let mut r = rng(seed);
        let x_xi = DMatrix::from_fn(n_xi, 2, |_, _| r.gen_range(-1.0..1.0));
        let x1 = DMatrix::from_fn(n1, 1, |i, _| i as f64 / n1.max(2) as f64);
        let x2 = DMatrix::from_fn(n2, 1, |i, _| i as f64 / n2.max(2) as f64);
        let inputs = StructuredInputs::new(x_xi, vec![x1, x2]).unwrap();
        let y = DMatrix::from_fn(inputs.n(), d_y, |_, _| r.gen_range(-1.0..1.0));
        let mut m = SgprModel::new(
            inputs,
            y,
            KernelSpec::rbf_ard(1.3, vec![0.9, 1.2]),
            vec![KernelSpec::exponential(0.5), KernelSpec::exponential(0.8)],
            4.0,
        )
        .unwrap();
        m.rebuild_cache().unwrap();
        m
    }

    /// Dense transcription of the GP log likelihood.
    fn dense_log_likelihood(m: &SgprModel) -> f64 {
        let kff = dense_kff(m);
        let n = kff.nrows();
        let kyy = &kff + DMatrix::identity(n, n) / m.beta;
        let chol = nalgebra::Cholesky::new(kyy).unwrap();
        let mut log_det = 0.0;
        for i in 0..n {
            log_det += 2.0 * chol.l()[(i, i)].ln();
        }
        let mut ll = 0.0;
        for j in 0..m.d_y() {
            let yj = m.y.column(j).clone_owned();
            let a = chol.solve(&yj);
            ll += -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * log_det
                - 0.5 * yj.dot(&a);
        }
        ll
    }

    fn dense_kff(m: &SgprModel) -> DMatrix<f64> {
        let mut mats = vec![m
            .kernel_xi
            .gram(&m.inputs.x_xi, &m.inputs.x_xi)
            .unwrap()];
        for (k, kern) in m.kernels_s.iter().enumerate() {
            mats.push(kern.gram(&m.inputs.x_s[k], &m.inputs.x_s[k]).unwrap());
        }
        dense_kron(&mats)
    }

    #[test]
    fn single_datum_unit_variance_standard_normal() {
        let inputs = StructuredInputs::new(
            DMatrix::zeros(1, 1),
            vec![DMatrix::zeros(1, 1)],
        )
        .unwrap();
        let mut m = SgprModel::new(
            inputs,
            DMatrix::zeros(1, 1),
            KernelSpec::rbf_ard(1.0, vec![1.0]),
            vec![KernelSpec::exponential(1.0)],
            1e12,
        )
        .unwrap();
        m.rebuild_cache().unwrap();
        let ll = m.log_likelihood().unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ll - expect).abs() < 1e-6);
    }

    #[test]
    fn pure_noise_closed_form() {
        let mut r = rng(71);
        let inputs = StructuredInputs::new(
            DMatrix::from_fn(3, 1, |_, _| r.gen_range(-1.0..1.0)),
            vec![DMatrix::from_fn(2, 1, |i, _| i as f64)],
        )
        .unwrap();
        let y = DMatrix::from_fn(6, 2, |_, _| r.gen_range(-1.0..1.0));
        for beta in [2.0, 4.0] {
            let mut m = SgprModel::new(
                inputs.clone(),
                y.clone(),
                KernelSpec::rbf_ard(1e-300, vec![1.0]),
                vec![KernelSpec::exponential(1.0)],
                beta,
            )
            .unwrap();
            m.rebuild_cache().unwrap();
            let ll = m.log_likelihood().unwrap();
            let n = 6.0;
            let mut expect = 0.0;
            for j in 0..2 {
                let yj = y.column(j);
                expect += -0.5 * n * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * n * (1.0 / beta).ln()
                    - 0.5 * beta * yj.dot(&yj);
            }
            assert!((ll - expect).abs() / expect.abs() < 1e-9);
        }
    }

    #[test]
    fn structured_likelihood_matches_dense_oracle() {
        let m = small_model(72, 3, 2, 2, 2);
        let fast = m.log_likelihood().unwrap();
        let dense = dense_log_likelihood(&m);
        assert!(
            (fast - dense).abs() / dense.abs() < 1e-8,
            "fast {fast} dense {dense}"
        );
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let m = small_model(73, 3, 2, 3, 2);
        let grad = m.log_likelihood_grad().unwrap();
        let p0 = m.params_log();
        let h = 1e-5;
        for pi in 0..p0.len() {
            let mut mp = m.clone();
            let mut pm = p0.clone();
            pm[pi] += h;
            mp.set_params_log(&pm).unwrap();
            mp.rebuild_cache().unwrap();
            let fp = mp.log_likelihood().unwrap();
            let mut mm = m.clone();
            let mut pmm = p0.clone();
            pmm[pi] -= h;
            mm.set_params_log(&pmm).unwrap();
            mm.rebuild_cache().unwrap();
            let fm = mm.log_likelihood().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grad[pi]).abs() <= 1e-4 * (1.0 + fd.abs()),
                "param {pi}: fd {fd} analytic {}",
                grad[pi]
            );
        }
    }

    #[test]
    fn predict_interpolates_at_high_precision() {
        let mut m = small_model(74, 3, 2, 2, 1);
        m.beta = 1e8;
        m.rebuild_cache().unwrap();
        let test = m.inputs.clone();
        let pred = m
            .predict(
                &test,
                &PredictRequest {
                    mean: true,
                    marginal_variance: false,
                    full_covariance: false,
                    include_noise: false,
                },
            )
            .unwrap();
        let mean = pred.mean.unwrap();
        let err = (&mean - &m.y).abs().max();
        assert!(err < 1e-3, "interpolation error {err}");
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let m = small_model(75, 3, 2, 2, 2);
        let mut r = rng(76);
        let test = StructuredInputs::new(
            DMatrix::from_fn(2, 2, |_, _| r.gen_range(-1.0..1.0)),
            vec![
                DMatrix::from_fn(3, 1, |i, _| 0.1 + i as f64 * 0.3),
                DMatrix::from_fn(2, 1, |i, _| 0.2 + i as f64 * 0.25),
            ],
        )
        .unwrap();
        let pred = m
            .predict(
                &test,
                &PredictRequest {
                    mean: true,
                    marginal_variance: true,
                    full_covariance: false,
                    include_noise: true,
                },
            )
            .unwrap();

        // dense oracle
        let kff = dense_kff(&m);
        let n = kff.nrows();
        let kyy = &kff + DMatrix::identity(n, n) / m.beta;
        let kyy_inv = kyy.clone().try_inverse().unwrap();
        let mut cross_mats = vec![m.kernel_xi.gram(&test.x_xi, &m.inputs.x_xi).unwrap()];
        for (k, kern) in m.kernels_s.iter().enumerate() {
            cross_mats.push(kern.gram(&test.x_s[k], &m.inputs.x_s[k]).unwrap());
        }
        let ksf = dense_kron(&cross_mats);
        let mean_dense = &ksf * &kyy_inv * &m.y;
        let mean = pred.mean.unwrap();
        assert!((&mean - &mean_dense).norm() / mean_dense.norm() < 1e-8);

        let mut kss_mats = vec![m.kernel_xi.gram(&test.x_xi, &test.x_xi).unwrap()];
        for (k, kern) in m.kernels_s.iter().enumerate() {
            kss_mats.push(kern.gram(&test.x_s[k], &test.x_s[k]).unwrap());
        }
        let kss = dense_kron(&kss_mats);
        let cov_dense =
            &kss - &ksf * &kyy_inv * ksf.transpose() + DMatrix::identity(kss.nrows(), kss.ncols()) / m.beta;
        let var = pred.variance.unwrap();
        for i in 0..var.len() {
            assert!(
                (var[i] - cov_dense[(i, i)]).abs() / cov_dense[(i, i)].abs() < 1e-8,
                "variance {i}: {} vs {}",
                var[i],
                cov_dense[(i, i)]
            );
        }
    }

    #[test]
    fn marginal_variance_equals_full_covariance_diagonal() {
        let m = small_model(77, 4, 3, 2, 1);
        let mut r = rng(78);
        let test = StructuredInputs::new(
            DMatrix::from_fn(1, 2, |_, _| r.gen_range(-1.0..1.0)),
            vec![
                DMatrix::from_fn(3, 1, |i, _| i as f64 * 0.37),
                DMatrix::from_fn(3, 1, |i, _| i as f64 * 0.21),
            ],
        )
        .unwrap();
        let pred = m
            .predict(
                &test,
                &PredictRequest {
                    mean: false,
                    marginal_variance: true,
                    full_covariance: true,
                    include_noise: true,
                },
            )
            .unwrap();
        let var = pred.variance.unwrap();
        let cov = pred.covariance.unwrap();
        for i in 0..var.len() {
            assert!(
                (var[i] - cov[(i, i)]).abs() <= 1e-10 * cov[(i, i)].abs().max(1e-12),
                "diag {i}: {} vs {}",
                var[i],
                cov[(i, i)]
            );
        }
    }

    #[test]
    fn full_covariance_requires_single_stochastic_point() {
        let m = small_model(79, 3, 2, 2, 1);
        let test = m.inputs.clone();
        let res = m.predict(
            &test,
            &PredictRequest {
                mean: false,
                marginal_variance: false,
                full_covariance: true,
                include_noise: false,
            },
        );
        assert!(res.is_err());
    }

    #[test]
    fn variance_is_at_least_noise_floor() {
        let m = small_model(80, 3, 2, 2, 1);
        let test = m.inputs.clone();
        let pred = m.predict(&test, &PredictRequest::default()).unwrap();
        let beta_inv = 1.0 / m.beta;
        for v in pred.variance.unwrap().iter() {
            assert!(*v >= beta_inv * (1.0 - 1e-12));
        }
    }

    #[test]
    fn training_does_not_decrease_likelihood() {
        let mut m = small_model(81, 4, 2, 2, 1);
        let before = m.log_likelihood().unwrap();
        let settings = OptimizerSettings {
            max_iters: 50,
            ..OptimizerSettings::default()
        };
        m.train(&settings).unwrap();
        let after = m.log_likelihood().unwrap();
        assert!(after >= before - 1e-9, "before {before} after {after}");
    }

    #[test]
    fn training_from_optimum_is_stationary() {
        let mut m = small_model(82, 4, 2, 2, 1);
        let settings = OptimizerSettings {
            max_iters: 200,
            ..OptimizerSettings::default()
        };
        m.train(&settings).unwrap();
        let ll1 = m.log_likelihood().unwrap();
        m.train(&settings).unwrap();
        let ll2 = m.log_likelihood().unwrap();
        assert!((ll2 - ll1).abs() < 1e-5, "ll1 {ll1} ll2 {ll2}");
    }
}
