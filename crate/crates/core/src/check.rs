//! Dense-oracle and gradient verification suites.
//!
//! Everything here recomputes model quantities with straight dense linear
//! algebra (full Kronecker expansions, explicit inverses) and compares
//! against the structured implementations. The dense routines never touch
//! the factored code paths they are checking, so they stay valid as
//! independent oracles. Only sensible at small sizes.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::kernels::{KernelSpec, VariationalLatentPosterior};
use crate::linalg::kron_dense;
use crate::model::{BoundCache, SgplvmModel, TrainableFlags};
use crate::predictive::{test_term, TestLatentPosterior};
use crate::sgpr::{PredictRequest, SgprModel, StructuredInputs};

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn from_rel(name: impl Into<String>, rel: f64, tol: f64) -> Self {
        CheckReport {
            name: name.into(),
            passed: rel < tol,
            detail: format!("rel err {rel:.3e} (tol {tol:.0e})"),
        }
    }
}

fn rel_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn dense_kron_list(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::from_element(1, 1, 1.0);
    for m in mats {
        acc = kron_dense(&acc, m);
    }
    acc
}

fn dense_log_det(m: &DMatrix<f64>) -> f64 {
    let eig = crate::linalg::sym_eig(m).expect("dense log det eig");
    eig.lambda.iter().map(|v| v.ln()).sum()
}

// ---------------------------------------------------------------------------
// dense transcriptions
// ---------------------------------------------------------------------------

/// Fully expanded bound ingredients for a tiny model.
pub struct DenseBoundParts {
    pub kuu: DMatrix<f64>,
    pub psi0: f64,
    /// `n x m`
    pub psi1: DMatrix<f64>,
    /// `m x m`
    pub psi2: DMatrix<f64>,
}

/// Expands the cached Kronecker factors densely. Tiny instances only.
pub fn dense_parts(cache: &BoundCache) -> DenseBoundParts {
    let kuu_factors: Vec<&DMatrix<f64>> = std::iter::once(&cache.k_uu_xi)
        .chain(cache.k_s.iter())
        .collect();
    let kuu = dense_kron_list(&kuu_factors);
    let psi1_factors: Vec<&DMatrix<f64>> = std::iter::once(&cache.psi.psi1)
        .chain(cache.k_s.iter())
        .collect();
    let psi1 = dense_kron_list(&psi1_factors);
    let p_s: Vec<DMatrix<f64>> = cache.k_s.iter().map(|k| k * k).collect();
    let psi2_factors: Vec<&DMatrix<f64>> = std::iter::once(&cache.psi.psi2)
        .chain(p_s.iter())
        .collect();
    let psi2 = dense_kron_list(&psi2_factors);
    DenseBoundParts {
        kuu,
        psi0: cache.psi0_full,
        psi1,
        psi2,
    }
}

/// Dense transcription of the collapsed bound.
pub fn dense_collapsed_bound(parts: &DenseBoundParts, beta: f64, y: &DMatrix<f64>, kl: f64) -> f64 {
    let n = y.nrows() as f64;
    let m = parts.kuu.nrows();
    let d_y = y.ncols() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let l = nalgebra::Cholesky::new(parts.kuu.clone()).expect("dense kuu chol");
    let linv = l.l().try_inverse().expect("dense L inverse");
    let c = &linv * &parts.psi2 * linv.transpose();
    let a = DMatrix::identity(m, m) / beta + &c;
    let log_det_a = dense_log_det(&a);
    let kpsi = &parts.kuu / beta + &parts.psi2;
    let kpsi_inv = kpsi.try_inverse().expect("dense kpsi inverse");
    let t_fit = (y.transpose() * &parts.psi1 * &kpsi_inv * parts.psi1.transpose() * y).trace();
    let t_yy = (y.transpose() * y).trace();
    0.5 * d_y * ((n - m as f64) * beta.ln() - n * two_pi.ln() - log_det_a)
        - 0.5 * beta * (t_yy - t_fit + d_y * (parts.psi0 - c.trace()))
        - kl
}

/// Dense optimal `q(U)`: mean and shared covariance.
pub fn dense_optimal_qu(
    parts: &DenseBoundParts,
    beta: f64,
    y: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let kpsi = &parts.kuu / beta + &parts.psi2;
    let chol = nalgebra::Cholesky::new(kpsi).expect("dense kpsi chol");
    let ubar = &parts.kuu * chol.solve(&(parts.psi1.transpose() * y));
    let sigma_u = &parts.kuu * chol.solve(&parts.kuu) / beta;
    // symmetrize away the solve asymmetry
    let sigma_u = (&sigma_u + sigma_u.transpose()) * 0.5;
    (ubar, sigma_u)
}

/// Dense transcription of the uncollapsed bound at a given `q(U)`.
pub fn dense_uncollapsed_bound(
    parts: &DenseBoundParts,
    beta: f64,
    y: &DMatrix<f64>,
    kl_x: f64,
    ubar: &DMatrix<f64>,
    sigma_u: &DMatrix<f64>,
) -> f64 {
    let n = y.nrows() as f64;
    let m = parts.kuu.nrows() as f64;
    let d_y = y.ncols() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let kuu_inv = parts.kuu.clone().try_inverse().expect("dense kuu inverse");
    let t_yy = (y.transpose() * y).trace();
    let t_cross = (ubar.transpose() * &kuu_inv * parts.psi1.transpose() * y).trace();
    let quad = &kuu_inv * &parts.psi2 * &kuu_inv;
    let t_quad = (&quad * (ubar * ubar.transpose() + sigma_u * d_y)).trace();
    let t_gap = parts.psi0 - (&kuu_inv * &parts.psi2).trace();

    // KL(q(U) || p(U)) for the shared covariance across dimensions
    let log_det_kuu = dense_log_det(&parts.kuu);
    let log_det_sigma = dense_log_det(sigma_u);
    let kl_u = 0.5 * d_y * ((&kuu_inv * sigma_u).trace() - m + log_det_kuu - log_det_sigma)
        + 0.5 * (ubar.transpose() * &kuu_inv * ubar).trace();

    -0.5 * n * d_y * (two_pi.ln() - beta.ln()) - 0.5 * beta * t_yy + beta * t_cross
        - 0.5 * beta * t_quad
        - 0.5 * beta * d_y * t_gap
        - kl_u
        - kl_x
}

/// Dense transcription of the per-dimension test terms `F*_j` at the
/// (dense) optimal `q(U)`.
#[allow(clippy::too_many_arguments)]
pub fn dense_test_term(
    kuu: &DMatrix<f64>,
    psi0_star: f64,
    psi1_star: &DMatrix<f64>,
    psi2_star: &DMatrix<f64>,
    beta_star: f64,
    ubar: &DMatrix<f64>,
    sigma_u: &DMatrix<f64>,
    y_star: &DMatrix<f64>,
    mask: &[bool],
) -> Vec<Option<f64>> {
    let n_star = y_star.nrows() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let kuu_inv = kuu.clone().try_inverse().expect("dense kuu inverse");
    let quad_op = &kuu_inv * psi2_star * &kuu_inv;
    let tr_kuu_psi2 = (&kuu_inv * psi2_star).trace();
    let mut out = Vec::with_capacity(mask.len());
    for (j, &obs) in mask.iter().enumerate() {
        if !obs {
            out.push(None);
            continue;
        }
        let yj = y_star.column(j).clone_owned();
        let uj = ubar.column(j).clone_owned();
        let yy = yj.dot(&yj);
        let t1 = (yj.transpose() * psi1_star * &kuu_inv * &uj)[(0, 0)];
        let t_quad = (&quad_op * (&uj * uj.transpose() + sigma_u)).trace();
        let f = -0.5 * n_star * (two_pi.ln() - beta_star.ln())
            - 0.5 * beta_star * (yy - 2.0 * t1 + t_quad + psi0_star - tr_kuu_psi2);
        out.push(Some(f));
    }
    out
}

// ---------------------------------------------------------------------------
// random instances
// ---------------------------------------------------------------------------

fn random_sgpr(r: &mut ChaCha20Rng, max_n: usize) -> SgprModel {
    let n_xi = r.gen_range(2..6);
    let mut n1 = r.gen_range(2..7);
    let mut n2 = r.gen_range(2..7);
    while n_xi * n1 * n2 > max_n {
        n1 = (n1 / 2).max(2);
        n2 = (n2 / 2).max(2);
    }
    let d_xi = r.gen_range(1..4);
    let d_y = r.gen_range(1..3);
    let x_xi = DMatrix::from_fn(n_xi, d_xi, |_, _| r.gen_range(-1.0..1.0));
    let x1 = DMatrix::from_fn(n1, 1, |i, _| i as f64 / n1 as f64 + r.gen_range(0.0..0.05));
    let x2 = DMatrix::from_fn(n2, 1, |i, _| i as f64 / n2 as f64 + r.gen_range(0.0..0.05));
    let inputs = StructuredInputs::new(x_xi, vec![x1, x2]).unwrap();
    let y = DMatrix::from_fn(inputs.n(), d_y, |_, _| r.gen_range(-1.0..1.0));
    let lengthscales = (0..d_xi).map(|_| r.gen_range(0.5..1.5)).collect();
    let mut m = SgprModel::new(
        inputs,
        y,
        KernelSpec::rbf_ard(r.gen_range(0.5..2.0), lengthscales),
        vec![
            KernelSpec::exponential(r.gen_range(0.3..1.0)),
            KernelSpec::exponential(r.gen_range(0.3..1.0)),
        ],
        r.gen_range(1.0..10.0),
    )
    .unwrap();
    m.rebuild_cache().unwrap();
    m
}

pub fn random_tiny_sgplvm(r: &mut ChaCha20Rng, kernel_kind: usize, d_y: usize) -> SgplvmModel {
    let n_xi = r.gen_range(3..5);
    // the pure linear kernel keeps m_xi <= d_xi, matching the production
    // geometry (m_xi = d_xi); larger m_xi would make K_uu structurally
    // singular and the finite-difference reference meaningless
    let m_xi = if kernel_kind == 1 {
        2
    } else {
        r.gen_range(2..4)
    };
    let d_xi = 2;
    let kernel = match kernel_kind {
        0 => KernelSpec::rbf_ard(r.gen_range(0.6..1.6), vec![r.gen_range(0.6..1.4), r.gen_range(0.6..1.4)]),
        1 => KernelSpec::linear(vec![r.gen_range(0.4..1.2), r.gen_range(0.4..1.2)]),
        _ => KernelSpec::sum(
            r.gen_range(0.6..1.6),
            vec![r.gen_range(0.6..1.4), r.gen_range(0.6..1.4)],
            vec![r.gen_range(0.4..1.2), r.gen_range(0.4..1.2)],
        ),
    };
    let x1 = DMatrix::from_fn(3, 1, |i, _| i as f64 / 2.0);
    let x2 = DMatrix::from_fn(3, 1, |i, _| i as f64 / 2.0);
    let n = n_xi * 9;
    let y = DMatrix::from_fn(n, d_y, |_, _| r.gen_range(-1.0..1.0));
    let q = VariationalLatentPosterior::new(
        DMatrix::from_fn(n_xi, d_xi, |_, _| r.gen_range(-1.0..1.0)),
        DMatrix::from_fn(n_xi, d_xi, |_, _| r.gen_range(0.1..0.7)),
    )
    .unwrap();
    let z = DMatrix::from_fn(m_xi, d_xi, |_, _| r.gen_range(-1.0..1.0));
    SgplvmModel::new(
        y,
        vec![x1, x2],
        q,
        z,
        kernel,
        vec![
            KernelSpec::exponential(r.gen_range(0.3..0.8)),
            KernelSpec::exponential(r.gen_range(0.3..0.8)),
        ],
        r.gen_range(1.5..6.0),
        TrainableFlags::default(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// suites
// ---------------------------------------------------------------------------

/// Structured SGPR likelihood, predictions, and blockwise covariance against
/// dense `O(n^3)` oracles on random instances with `n <= 200`.
pub fn kron_oracle_suite(seed: u64, n_instances: usize) -> Result<Vec<CheckReport>> {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for inst in 0..n_instances {
        let m = random_sgpr(&mut r, 200);
        // dense ingredients
        let mut mats = vec![m.kernel_xi.gram(&m.inputs.x_xi, &m.inputs.x_xi)?];
        for (k, kern) in m.kernels_s.iter().enumerate() {
            mats.push(kern.gram(&m.inputs.x_s[k], &m.inputs.x_s[k])?);
        }
        let kff = dense_kron_list(&mats.iter().collect::<Vec<_>>());
        let n = kff.nrows();
        let kyy = &kff + DMatrix::identity(n, n) / m.beta;
        let chol = nalgebra::Cholesky::new(kyy.clone()).expect("dense kyy chol");
        let mut log_det = 0.0;
        for i in 0..n {
            log_det += 2.0 * chol.l()[(i, i)].ln();
        }
        let mut dense_ll = 0.0;
        for j in 0..m.d_y() {
            let yj = m.y.column(j).clone_owned();
            let a = chol.solve(&yj);
            dense_ll += -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det
                - 0.5 * yj.dot(&a);
        }
        let fast_ll = m.log_likelihood()?;
        reports.push(CheckReport::from_rel(
            format!("sgpr[{inst}] likelihood vs dense"),
            rel_scalar(fast_ll, dense_ll),
            1e-8,
        ));

        // predictions at a random structured test set with one stochastic point
        let test = StructuredInputs::new(
            DMatrix::from_fn(1, m.inputs.x_xi.ncols(), |_, _| r.gen_range(-1.0..1.0)),
            vec![
                DMatrix::from_fn(3, 1, |i, _| r.gen_range(0.0..0.2) + i as f64 * 0.3),
                DMatrix::from_fn(2, 1, |i, _| r.gen_range(0.0..0.2) + i as f64 * 0.4),
            ],
        )?;
        let pred = m.predict(
            &test,
            &PredictRequest {
                mean: true,
                marginal_variance: true,
                full_covariance: true,
                include_noise: true,
            },
        )?;
        let mut cross = vec![m.kernel_xi.gram(&test.x_xi, &m.inputs.x_xi)?];
        for (k, kern) in m.kernels_s.iter().enumerate() {
            cross.push(kern.gram(&test.x_s[k], &m.inputs.x_s[k])?);
        }
        let ksf = dense_kron_list(&cross.iter().collect::<Vec<_>>());
        let kyy_inv = kyy.try_inverse().expect("dense kyy inverse");
        let mean_dense = &ksf * &kyy_inv * &m.y;
        reports.push(CheckReport::from_rel(
            format!("sgpr[{inst}] predictive mean vs dense"),
            rel_mat(pred.mean.as_ref().unwrap(), &mean_dense),
            1e-8,
        ));
        let mut kss_mats = vec![m.kernel_xi.gram(&test.x_xi, &test.x_xi)?];
        for (k, kern) in m.kernels_s.iter().enumerate() {
            kss_mats.push(kern.gram(&test.x_s[k], &test.x_s[k])?);
        }
        let kss = dense_kron_list(&kss_mats.iter().collect::<Vec<_>>());
        let cov_dense = &kss - &ksf * &kyy_inv * ksf.transpose()
            + DMatrix::identity(kss.nrows(), kss.ncols()) / m.beta;
        let var = pred.variance.as_ref().unwrap();
        let var_dense = DVector::from_fn(var.len(), |i, _| cov_dense[(i, i)]);
        let var_as_mat = DMatrix::from_column_slice(var.len(), 1, var.as_slice());
        let var_dense_mat = DMatrix::from_column_slice(var.len(), 1, var_dense.as_slice());
        reports.push(CheckReport::from_rel(
            format!("sgpr[{inst}] marginal variance vs dense"),
            rel_mat(&var_as_mat, &var_dense_mat),
            1e-8,
        ));
        reports.push(CheckReport::from_rel(
            format!("sgpr[{inst}] blockwise covariance vs dense"),
            rel_mat(pred.covariance.as_ref().unwrap(), &cov_dense),
            1e-8,
        ));
    }
    Ok(reports)
}

/// Collapsed bound, per-dimension sum, optimal `q(U)`, uncollapsed-bound
/// consistency, and the test term against dense transcriptions on tiny
/// instances.
pub fn bound_oracle_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for kernel_kind in 0..3 {
        let name = ["rbf", "linear", "sum"][kernel_kind];
        let m = random_tiny_sgplvm(&mut r, kernel_kind, 2);
        let (bound, cache) = m.collapsed_bound()?;
        let parts = dense_parts(&cache);
        let dense = dense_collapsed_bound(&parts, m.beta, &m.y, cache.kl);
        reports.push(CheckReport::from_rel(
            format!("bound[{name}] collapsed vs dense"),
            rel_scalar(bound, dense),
            1e-10,
        ));

        let (per_dim, kl) = m.collapsed_bound_per_dim()?;
        let total: f64 = per_dim.iter().sum::<f64>() - kl;
        reports.push(CheckReport::from_rel(
            format!("bound[{name}] per-dimension sum"),
            rel_scalar(total, bound),
            1e-10,
        ));

        let qu = m.optimal_qu(&cache)?;
        let (ubar_dense, sigma_dense) = dense_optimal_qu(&parts, m.beta, &m.y);
        reports.push(CheckReport::from_rel(
            format!("bound[{name}] optimal q(U) mean vs dense"),
            rel_mat(&qu.mean, &ubar_dense),
            1e-10,
        ));
        let sigma_fast = qu.cov.dense()?;
        reports.push(CheckReport::from_rel(
            format!("bound[{name}] optimal q(U) covariance vs dense"),
            rel_mat(&sigma_fast, &sigma_dense),
            1e-10,
        ));

        let uncollapsed =
            dense_uncollapsed_bound(&parts, m.beta, &m.y, cache.kl, &ubar_dense, &sigma_dense);
        reports.push(CheckReport::from_rel(
            format!("bound[{name}] uncollapsed at optimal q(U)"),
            rel_scalar(uncollapsed, bound),
            1e-8,
        ));

        // test term against the dense transcription, with one masked column
        let q_star = TestLatentPosterior::new(
            DMatrix::from_fn(1, 2, |_, _| r.gen_range(-1.0..1.0)),
            DMatrix::from_fn(1, 2, |_, _| r.gen_range(0.2..0.8)),
            r.gen_range(1.0..5.0),
        )?;
        let y_star = DMatrix::from_fn(m.n_s(), 2, |_, _| r.gen_range(-1.0..1.0));
        for mask in [vec![true, true], vec![true, false]] {
            let t = test_term(&m, &cache, &q_star, &y_star, &mask, &m.x_s)?;
            let psi_star = m.kernel_xi.psi_stats(&q_star.to_q(), &m.z_xi, false)?;
            let mut psi1s_factors = vec![psi_star.psi1.clone()];
            let mut psi2s_factors = vec![psi_star.psi2.clone()];
            for (k, kern) in m.kernels_s.iter().enumerate() {
                let cross = kern.gram(&m.x_s[k], &m.x_s[k])?;
                psi2s_factors.push(cross.transpose() * &cross);
                psi1s_factors.push(cross);
            }
            let psi1_star = dense_kron_list(&psi1s_factors.iter().collect::<Vec<_>>());
            let psi2_star = dense_kron_list(&psi2s_factors.iter().collect::<Vec<_>>());
            let psi0_star = psi_star.psi0 * m.n_s() as f64;
            let dense_f = dense_test_term(
                &parts.kuu,
                psi0_star,
                &psi1_star,
                &psi2_star,
                q_star.beta_star,
                &ubar_dense,
                &sigma_dense,
                &y_star,
                &mask,
            );
            let mut worst: f64 = 0.0;
            for (a, b) in t.f_per_dim.iter().zip(&dense_f) {
                match (a, b) {
                    (Some(x), Some(y)) => worst = worst.max(rel_scalar(*x, *y)),
                    (None, None) => {}
                    _ => worst = f64::INFINITY,
                }
            }
            reports.push(CheckReport::from_rel(
                format!("bound[{name}] test term vs dense (mask {mask:?})"),
                worst,
                1e-8,
            ));
        }
    }
    Ok(reports)
}

/// Bound gradients against central finite differences on random tiny
/// instances; coordinates with |grad| <= 1e-6 are skipped.
pub fn gradient_suite(seed: u64, n_instances: usize) -> Result<Vec<CheckReport>> {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for inst in 0..n_instances {
        let m = random_tiny_sgplvm(&mut r, inst % 3, 2);
        let cache = m.build_cache()?;
        let grads = m.bound_gradients_with_cache(&cache)?;
        let packed = {
            // pack in the same order as pack_params
            let mut g: Vec<f64> = grads.d_mu.iter().copied().collect();
            g.extend(grads.d_s.iter().zip(m.q.s.iter()).map(|(d, s)| d * s));
            g.extend(grads.d_z.iter());
            g.extend(grads.d_kernel_xi.iter());
            for gk in &grads.d_kernels_s {
                g.extend(gk.iter());
            }
            g.push(grads.d_log_beta);
            g
        };
        let x0 = m.pack_params();
        let h = 1e-5;
        let mut worst = 0.0;
        let mut worst_coord = 0;
        for i in 0..x0.len() {
            let mut probe = m.clone();
            let mut xp = x0.clone();
            xp[i] += h;
            probe.unpack_params(&xp)?;
            let fp = probe.collapsed_bound()?.0;
            let mut xm = x0.clone();
            xm[i] -= h;
            probe.unpack_params(&xm)?;
            let fm = probe.collapsed_bound()?.0;
            let fd = (fp - fm) / (2.0 * h);
            let an = packed[i];
            if an.abs() > 1e-6 || fd.abs() > 1e-6 {
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                if rel > worst {
                    worst = rel;
                    worst_coord = i;
                }
            }
        }
        reports.push(CheckReport {
            name: format!("gradient[{inst}] bound vs central differences"),
            passed: worst < 1e-4,
            detail: format!("worst rel err {worst:.3e} at coordinate {worst_coord}"),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_oracle_suite_passes() {
        let reports = kron_oracle_suite(2024, 4).unwrap();
        for rep in &reports {
            assert!(rep.passed, "{}: {}", rep.name, rep.detail);
        }
    }

    #[test]
    fn bound_oracle_suite_passes() {
        let reports = bound_oracle_suite(2025).unwrap();
        for rep in &reports {
            assert!(rep.passed, "{}: {}", rep.name, rep.detail);
        }
    }

    #[test]
    fn gradient_suite_passes() {
        let reports = gradient_suite(2026, 2).unwrap();
        for rep in &reports {
            assert!(rep.passed, "{}: {}", rep.name, rep.detail);
        }
    }
}
