//! Shared test utilities: the Monte-Carlo oracle for kernel expectations and
//! a structured GP sampler for synthetic-recovery runs. Test-only code,
//! independent of the analytic paths it checks.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sgplvm_core::kernels::{KernelSpec, VariationalLatentPosterior};
use sgplvm_core::linalg::{apply_kron_ops, chol, FactorOp};

pub struct McPsi {
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

/// Monte-Carlo estimate of the kernel expectations under `q` at inducing
/// inputs `z`, with `n_samples` Gaussian draws per posterior row.
pub fn mc_psi_oracle(
    kernel: &KernelSpec,
    q: &VariationalLatentPosterior,
    z: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> McPsi {
    let n = q.n_rows();
    let m = z.nrows();
    let d = q.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut psi0 = 0.0;
    let mut psi1 = DMatrix::zeros(n, m);
    let mut psi2 = DMatrix::zeros(m, m);
    let mut x = DMatrix::zeros(1, d);
    let mut kvec = vec![0.0; m];
    for i in 0..n {
        let mut p0 = 0.0;
        let mut p1 = vec![0.0; m];
        let mut p2: DMatrix<f64> = DMatrix::zeros(m, m);
        for _ in 0..n_samples {
            for qd in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                x[(0, qd)] = q.mu[(i, qd)] + q.s[(i, qd)].sqrt() * eps;
            }
            let kxx = kernel.gram(&x, &x).unwrap()[(0, 0)];
            p0 += kxx;
            let kxz = kernel.gram(&x, z).unwrap();
            for mm in 0..m {
                kvec[mm] = kxz[(0, mm)];
                p1[mm] += kvec[mm];
            }
            for a in 0..m {
                for b in a..m {
                    p2[(a, b)] += kvec[a] * kvec[b];
                }
            }
        }
        let inv = 1.0 / n_samples as f64;
        psi0 += p0 * inv;
        for mm in 0..m {
            psi1[(i, mm)] += p1[mm] * inv;
        }
        for a in 0..m {
            for b in a..m {
                psi2[(a, b)] += p2[(a, b)] * inv;
                if a != b {
                    psi2[(b, a)] += p2[(a, b)] * inv;
                }
            }
        }
    }
    McPsi { psi0, psi1, psi2 }
}

/// Draws `d_y` columns from a zero-mean structured GP
/// `kron(K_xi, K_s1, K_s2) + noise` and returns the noisy observations.
pub fn sample_structured_gp(
    kernel_xi: &KernelSpec,
    x_xi: &DMatrix<f64>,
    kernels_s: &[KernelSpec],
    x_s: &[DMatrix<f64>],
    noise_std: f64,
    d_y: usize,
    seed: u64,
) -> DMatrix<f64> {
    let mut factors = vec![chol(
        &kernel_xi.gram(x_xi, x_xi).unwrap(),
        "gen K_xi",
    )
    .unwrap()
    .l];
    for (k, kern) in kernels_s.iter().enumerate() {
        factors.push(chol(&kern.gram(&x_s[k], &x_s[k]).unwrap(), "gen K_s").unwrap().l);
    }
    let n: usize = factors.iter().map(|f| f.nrows()).product();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(n, d_y);
    for j in 0..d_y {
        let eps: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ops: Vec<FactorOp> = factors.iter().map(FactorOp::Mul).collect();
        let f = apply_kron_ops(&ops, &eps).unwrap();
        for i in 0..n {
            let noise: f64 = rng.sample(StandardNormal);
            y[(i, j)] = f[i] + noise_std * noise;
        }
    }
    y
}

/// Relative Frobenius distance.
pub fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[allow(dead_code)]
pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
