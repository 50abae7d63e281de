//! Kernel functions, their gradients, and analytic kernel expectations
//! (psi-statistics) under Gaussian latent posteriors.
//!
//! Positive hyperparameters are exposed to optimizers through their
//! logarithms; `params_log`/`set_params_log` define the packing order.
//! Spatial exponential kernels carry unit variance so that all signal
//! variance lives in the stochastic kernel.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel family plus hyperparameters (all strictly positive).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum KernelSpec {
    RbfArd {
        variance: f64,
        lengthscales: Vec<f64>,
    },
    Exponential {
        variance: f64,
        lengthscale: f64,
    },
    Linear {
        variances: Vec<f64>,
    },
    /// RBF-ARD plus linear on the same input dimension.
    Sum {
        rbf_variance: f64,
        rbf_lengthscales: Vec<f64>,
        linear_variances: Vec<f64>,
    },
}

impl KernelSpec {
    pub fn rbf_ard(variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelSpec::RbfArd {
            variance,
            lengthscales,
        }
    }

    pub fn exponential(lengthscale: f64) -> Self {
        KernelSpec::Exponential {
            variance: 1.0,
            lengthscale,
        }
    }

    pub fn linear(variances: Vec<f64>) -> Self {
        KernelSpec::Linear { variances }
    }

    pub fn sum(rbf_variance: f64, rbf_lengthscales: Vec<f64>, linear_variances: Vec<f64>) -> Self {
        KernelSpec::Sum {
            rbf_variance,
            rbf_lengthscales,
            linear_variances,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        let all_ok = match self {
            KernelSpec::RbfArd {
                variance,
                lengthscales,
            } => ok(*variance) && !lengthscales.is_empty() && lengthscales.iter().all(|&l| ok(l)),
            KernelSpec::Exponential {
                variance,
                lengthscale,
            } => ok(*variance) && ok(*lengthscale),
            KernelSpec::Linear { variances } => {
                !variances.is_empty() && variances.iter().all(|&v| ok(v))
            }
            KernelSpec::Sum {
                rbf_variance,
                rbf_lengthscales,
                linear_variances,
            } => {
                ok(*rbf_variance)
                    && rbf_lengthscales.iter().all(|&l| ok(l))
                    && linear_variances.iter().all(|&v| ok(v))
                    && rbf_lengthscales.len() == linear_variances.len()
                    && !rbf_lengthscales.is_empty()
            }
        };
        if all_ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "kernel hyperparameters must be strictly positive and consistent: {self:?}"
            )))
        }
    }

    /// Whether gram matrices of this kernel can be structurally
    /// rank-deficient (linear kernel with more points than input
    /// dimensions), calling for a fixed stabilizing nugget.
    pub fn needs_stabilizer(&self) -> bool {
        matches!(self, KernelSpec::Linear { .. })
    }

    /// Input dimensionality the kernel expects.
    pub fn input_dim(&self) -> usize {
        match self {
            KernelSpec::RbfArd { lengthscales, .. } => lengthscales.len(),
            KernelSpec::Exponential { .. } => 1,
            KernelSpec::Linear { variances } => variances.len(),
            KernelSpec::Sum {
                rbf_lengthscales, ..
            } => rbf_lengthscales.len(),
        }
    }

    /// Number of free (trainable) hyperparameters.
    pub fn n_params(&self) -> usize {
        match self {
            KernelSpec::RbfArd { lengthscales, .. } => 1 + lengthscales.len(),
            // spatial exponential kernels train only the lengthscale
            KernelSpec::Exponential { .. } => 1,
            KernelSpec::Linear { variances } => variances.len(),
            KernelSpec::Sum {
                rbf_lengthscales,
                linear_variances,
                ..
            } => 1 + rbf_lengthscales.len() + linear_variances.len(),
        }
    }

    /// Hyperparameters in log space, in the documented packing order:
    /// RbfArd `[log var, log l_1..l_d]`, Exponential `[log l]`,
    /// Linear `[log var_1..var_d]`, Sum `rbf ++ linear`.
    pub fn params_log(&self) -> Vec<f64> {
        match self {
            KernelSpec::RbfArd {
                variance,
                lengthscales,
            } => {
                let mut p = vec![variance.ln()];
                p.extend(lengthscales.iter().map(|l| l.ln()));
                p
            }
            KernelSpec::Exponential { lengthscale, .. } => vec![lengthscale.ln()],
            KernelSpec::Linear { variances } => variances.iter().map(|v| v.ln()).collect(),
            KernelSpec::Sum {
                rbf_variance,
                rbf_lengthscales,
                linear_variances,
            } => {
                let mut p = vec![rbf_variance.ln()];
                p.extend(rbf_lengthscales.iter().map(|l| l.ln()));
                p.extend(linear_variances.iter().map(|v| v.ln()));
                p
            }
        }
    }

    pub fn set_params_log(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                op: "set_params_log",
                detail: format!("{} params given, kernel has {}", p.len(), self.n_params()),
            });
        }
        match self {
            KernelSpec::RbfArd {
                variance,
                lengthscales,
            } => {
                *variance = p[0].exp();
                for (l, &v) in lengthscales.iter_mut().zip(&p[1..]) {
                    *l = v.exp();
                }
            }
            KernelSpec::Exponential { lengthscale, .. } => *lengthscale = p[0].exp(),
            KernelSpec::Linear { variances } => {
                for (s, &v) in variances.iter_mut().zip(p) {
                    *s = v.exp();
                }
            }
            KernelSpec::Sum {
                rbf_variance,
                rbf_lengthscales,
                linear_variances,
            } => {
                let d = rbf_lengthscales.len();
                *rbf_variance = p[0].exp();
                for (l, &v) in rbf_lengthscales.iter_mut().zip(&p[1..1 + d]) {
                    *l = v.exp();
                }
                for (s, &v) in linear_variances.iter_mut().zip(&p[1 + d..]) {
                    *s = v.exp();
                }
            }
        }
        Ok(())
    }

    /// Gram matrix: entry (i, j) is `k(x1_i, x2_j)`.
    pub fn gram(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dims("gram", x1, x2)?;
        let (n1, n2) = (x1.nrows(), x2.nrows());
        let mut out = DMatrix::zeros(n1, n2);
        for i in 0..n1 {
            for j in 0..n2 {
                out[(i, j)] = self.eval(&row(x1, i), &row(x2, j));
            }
        }
        Ok(out)
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::RbfArd {
                variance,
                lengthscales,
            } => {
                let mut e = 0.0;
                for q in 0..a.len() {
                    let d = (a[q] - b[q]) / lengthscales[q];
                    e += d * d;
                }
                variance * (-0.5 * e).exp()
            }
            KernelSpec::Exponential {
                variance,
                lengthscale,
            } => {
                let mut d2 = 0.0;
                for q in 0..a.len() {
                    let d = a[q] - b[q];
                    d2 += d * d;
                }
                variance * (-d2.sqrt() / lengthscale).exp()
            }
            KernelSpec::Linear { variances } => {
                let mut s = 0.0;
                for q in 0..a.len() {
                    s += variances[q] * a[q] * b[q];
                }
                s
            }
            KernelSpec::Sum {
                rbf_variance,
                rbf_lengthscales,
                linear_variances,
            } => {
                let rbf = KernelSpec::RbfArd {
                    variance: *rbf_variance,
                    lengthscales: rbf_lengthscales.clone(),
                };
                let lin = KernelSpec::Linear {
                    variances: linear_variances.clone(),
                };
                rbf.eval(a, b) + lin.eval(a, b)
            }
        }
    }

    /// Vector-Jacobian product of the gram matrix: given the adjoint `gbar`
    /// of the gram output, returns gradients w.r.t. the log hyperparameters
    /// and both input matrices.
    pub fn gram_vjp(
        &self,
        x1: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        gbar: &DMatrix<f64>,
    ) -> Result<GramGrad> {
        self.check_dims("gram_vjp", x1, x2)?;
        let (n1, n2) = (x1.nrows(), x2.nrows());
        if gbar.shape() != (n1, n2) {
            return Err(Error::DimensionMismatch {
                op: "gram_vjp",
                detail: format!("adjoint is {:?}, expected {:?}", gbar.shape(), (n1, n2)),
            });
        }
        let mut grad = GramGrad::zeros(self.n_params(), x1.shape(), x2.shape());
        for i in 0..n1 {
            for j in 0..n2 {
                let g = gbar[(i, j)];
                if g == 0.0 {
                    continue;
                }
                self.eval_vjp(&row(x1, i), &row(x2, j), g, i, j, &mut grad);
            }
        }
        Ok(grad)
    }

    fn eval_vjp(&self, a: &[f64], b: &[f64], g: f64, i: usize, j: usize, grad: &mut GramGrad) {
        match self {
            KernelSpec::RbfArd {
                variance,
                lengthscales,
            } => {
                let k = self.eval(a, b);
                grad.d_log_params[0] += g * k;
                for q in 0..a.len() {
                    let l2 = lengthscales[q] * lengthscales[q];
                    let d = a[q] - b[q];
                    grad.d_log_params[1 + q] += g * k * d * d / l2;
                    let dk = -k * d / l2;
                    grad.d_x1[(i, q)] += g * dk;
                    grad.d_x2[(j, q)] -= g * dk;
                }
                let _ = variance;
            }
            KernelSpec::Exponential { lengthscale, .. } => {
                let k = self.eval(a, b);
                let mut d2 = 0.0;
                for q in 0..a.len() {
                    let d = a[q] - b[q];
                    d2 += d * d;
                }
                let dist = d2.sqrt();
                grad.d_log_params[0] += g * k * dist / lengthscale;
                if dist > 0.0 {
                    for q in 0..a.len() {
                        let dk = -k * (a[q] - b[q]) / (dist * lengthscale);
                        grad.d_x1[(i, q)] += g * dk;
                        grad.d_x2[(j, q)] -= g * dk;
                    }
                }
            }
            KernelSpec::Linear { variances } => {
                for q in 0..a.len() {
                    grad.d_log_params[q] += g * variances[q] * a[q] * b[q];
                    grad.d_x1[(i, q)] += g * variances[q] * b[q];
                    grad.d_x2[(j, q)] += g * variances[q] * a[q];
                }
            }
            KernelSpec::Sum {
                rbf_variance,
                rbf_lengthscales,
                linear_variances,
            } => {
                let d = rbf_lengthscales.len();
                let rbf = KernelSpec::RbfArd {
                    variance: *rbf_variance,
                    lengthscales: rbf_lengthscales.clone(),
                };
                let lin = KernelSpec::Linear {
                    variances: linear_variances.clone(),
                };
                let mut g_rbf = GramGrad::zeros(rbf.n_params(), grad.d_x1.shape(), grad.d_x2.shape());
                rbf.eval_vjp(a, b, g, i, j, &mut g_rbf);
                let mut g_lin = GramGrad::zeros(lin.n_params(), grad.d_x1.shape(), grad.d_x2.shape());
                lin.eval_vjp(a, b, g, i, j, &mut g_lin);
                for (dst, src) in grad.d_log_params[..1 + d].iter_mut().zip(&g_rbf.d_log_params) {
                    *dst += src;
                }
                for (dst, src) in grad.d_log_params[1 + d..].iter_mut().zip(&g_lin.d_log_params) {
                    *dst += src;
                }
                grad.d_x1 += &g_rbf.d_x1 + &g_lin.d_x1;
                grad.d_x2 += &g_rbf.d_x2 + &g_lin.d_x2;
            }
        }
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

impl KernelSpec {
    fn check_dims(&self, op: &'static str, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
        // the isotropic exponential kernel accepts inputs of any dimension
        if matches!(self, KernelSpec::Exponential { .. }) {
            if x1.ncols() == x2.ncols() && x1.ncols() > 0 {
                return Ok(());
            }
            return Err(Error::DimensionMismatch {
                op: match op {
                    "gram" => "gram",
                    _ => "gram_vjp",
                },
                detail: format!(
                    "exponential kernel inputs must share a positive dimension, got {} and {}",
                    x1.ncols(),
                    x2.ncols()
                ),
            });
        }
        let d = self.input_dim();
        if x1.ncols() != d || x2.ncols() != d {
            return Err(Error::DimensionMismatch {
                op: match op {
                    "gram" => "gram",
                    _ => "gram_vjp",
                },
                detail: format!(
                    "kernel expects {} input columns, got {} and {}",
                    d,
                    x1.ncols(),
                    x2.ncols()
                ),
            });
        }
        Ok(())
    }
}

/// Gradients returned by [`KernelSpec::gram_vjp`].
#[derive(Debug, Clone)]
pub struct GramGrad {
    pub d_log_params: Vec<f64>,
    pub d_x1: DMatrix<f64>,
    pub d_x2: DMatrix<f64>,
}

impl GramGrad {
    fn zeros(n_params: usize, s1: (usize, usize), s2: (usize, usize)) -> Self {
        GramGrad {
            d_log_params: vec![0.0; n_params],
            d_x1: DMatrix::zeros(s1.0, s1.1),
            d_x2: DMatrix::zeros(s2.0, s2.1),
        }
    }
}

/// Per-realization Gaussian posterior over latent inputs: means `mu` and
/// diagonal variances `s`, both `n_xi x d_xi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalLatentPosterior {
    pub mu: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl VariationalLatentPosterior {
    pub fn new(mu: DMatrix<f64>, s: DMatrix<f64>) -> Result<Self> {
        if mu.shape() != s.shape() {
            return Err(Error::DimensionMismatch {
                op: "VariationalLatentPosterior::new",
                detail: format!("mu is {:?}, s is {:?}", mu.shape(), s.shape()),
            });
        }
        if s.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "latent posterior variances must be strictly positive".into(),
            ));
        }
        Ok(VariationalLatentPosterior { mu, s })
    }

    pub fn n_rows(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }
}

/// Kernel expectations under a Gaussian latent posterior.
#[derive(Debug, Clone)]
pub struct PsiStats {
    pub psi0: f64,
    /// `n_xi x m_xi`
    pub psi1: DMatrix<f64>,
    /// `m_xi x m_xi`, symmetric PSD
    pub psi2: DMatrix<f64>,
    /// Per-realization psi2 summands, when requested.
    pub psi2_rows: Option<Vec<DMatrix<f64>>>,
}

/// Adjoints of a scalar objective w.r.t. the psi-statistics.
pub struct PsiAdjoint<'a> {
    pub psi0: f64,
    pub psi1: Option<&'a DMatrix<f64>>,
    pub psi2: Option<&'a DMatrix<f64>>,
}

/// Gradients of the psi-statistics contracted against a [`PsiAdjoint`].
#[derive(Debug, Clone)]
pub struct PsiGrad {
    pub d_mu: DMatrix<f64>,
    pub d_s: DMatrix<f64>,
    pub d_z: DMatrix<f64>,
    pub d_log_params: Vec<f64>,
}

impl PsiGrad {
    fn zeros(n: usize, d: usize, m: usize, n_params: usize) -> Self {
        PsiGrad {
            d_mu: DMatrix::zeros(n, d),
            d_s: DMatrix::zeros(n, d),
            d_z: DMatrix::zeros(m, d),
            d_log_params: vec![0.0; n_params],
        }
    }
}

struct RowStats {
    psi0: f64,
    psi1_row: Vec<f64>,
    psi2_row: DMatrix<f64>,
}

fn check_psi_inputs(q: &VariationalLatentPosterior, z: &DMatrix<f64>, d: usize) -> Result<()> {
    if q.dim() != d || z.ncols() != d {
        return Err(Error::DimensionMismatch {
            op: "psi_stats",
            detail: format!(
                "kernel dimension {}, posterior dimension {}, inducing dimension {}",
                d,
                q.dim(),
                z.ncols()
            ),
        });
    }
    if q.s.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(
            "psi statistics require strictly positive posterior variances".into(),
        ));
    }
    Ok(())
}

impl KernelSpec {
    /// Analytic kernel expectations psi0, Psi1, Psi2 under `q` at inducing
    /// inputs `z`. Rows are computed independently (data-parallel) and summed
    /// in index order so the result does not depend on the partitioning.
    pub fn psi_stats(
        &self,
        q: &VariationalLatentPosterior,
        z: &DMatrix<f64>,
        keep_rows: bool,
    ) -> Result<PsiStats> {
        let d = self.input_dim();
        check_psi_inputs(q, z, d)?;
        let n = q.n_rows();
        let m = z.nrows();
        let rows: Vec<RowStats> = (0..n)
            .into_par_iter()
            .map(|i| self.psi_row(q, z, i))
            .collect::<Result<Vec<_>>>()?;
        let mut psi0 = 0.0;
        let mut psi1 = DMatrix::zeros(n, m);
        let mut psi2 = DMatrix::zeros(m, m);
        for (i, r) in rows.iter().enumerate() {
            psi0 += r.psi0;
            for mm in 0..m {
                psi1[(i, mm)] = r.psi1_row[mm];
            }
            psi2 += &r.psi2_row;
        }
        let psi2_rows = keep_rows.then(|| rows.into_iter().map(|r| r.psi2_row).collect());
        Ok(PsiStats {
            psi0,
            psi1,
            psi2,
            psi2_rows,
        })
    }

    fn psi_row(&self, q: &VariationalLatentPosterior, z: &DMatrix<f64>, i: usize) -> Result<RowStats> {
        match self {
            KernelSpec::RbfArd { .. } => Ok(self.psi_row_rbf(q, z, i)),
            KernelSpec::Linear { .. } => Ok(self.psi_row_linear(q, z, i)),
            KernelSpec::Sum {
                rbf_variance,
                rbf_lengthscales,
                linear_variances,
            } => {
                let rbf = KernelSpec::RbfArd {
                    variance: *rbf_variance,
                    lengthscales: rbf_lengthscales.clone(),
                };
                let lin = KernelSpec::Linear {
                    variances: linear_variances.clone(),
                };
                let a = rbf.psi_row_rbf(q, z, i);
                let b = lin.psi_row_linear(q, z, i);
                let cross = sum_cross_row(
                    *rbf_variance,
                    rbf_lengthscales,
                    linear_variances,
                    q,
                    z,
                    i,
                );
                let psi2_row = &a.psi2_row + &b.psi2_row + &cross + cross.transpose();
                Ok(RowStats {
                    psi0: a.psi0 + b.psi0,
                    psi1_row: a
                        .psi1_row
                        .iter()
                        .zip(&b.psi1_row)
                        .map(|(x, y)| x + y)
                        .collect(),
                    psi2_row,
                })
            }
            KernelSpec::Exponential { .. } => Err(Error::InvalidArgument(
                "psi statistics are not defined for the exponential kernel".into(),
            )),
        }
    }

    fn psi_row_rbf(&self, q: &VariationalLatentPosterior, z: &DMatrix<f64>, i: usize) -> RowStats {
        let (variance, lengthscales) = match self {
            KernelSpec::RbfArd {
                variance,
                lengthscales,
            } => (*variance, lengthscales),
            _ => unreachable!(),
        };
        let m = z.nrows();
        let d = lengthscales.len();
        let mut psi1_row = vec![0.0; m];
        for mm in 0..m {
            let mut log_f = 0.0;
            for qd in 0..d {
                let t = lengthscales[qd] * lengthscales[qd];
                let v = t + q.s[(i, qd)];
                let diff = q.mu[(i, qd)] - z[(mm, qd)];
                log_f += 0.5 * (t.ln() - v.ln()) - diff * diff / (2.0 * v);
            }
            psi1_row[mm] = variance * log_f.exp();
        }
        let mut psi2_row = DMatrix::zeros(m, m);
        let v2 = variance * variance;
        for ma in 0..m {
            for mb in ma..m {
                let mut log_g = 0.0;
                for qd in 0..d {
                    let t = lengthscales[qd] * lengthscales[qd];
                    let u = t + 2.0 * q.s[(i, qd)];
                    let dz = z[(ma, qd)] - z[(mb, qd)];
                    let zbar = 0.5 * (z[(ma, qd)] + z[(mb, qd)]);
                    let dm = q.mu[(i, qd)] - zbar;
                    log_g += 0.5 * (t.ln() - u.ln()) - dz * dz / (4.0 * t) - dm * dm / u;
                }
                let val = v2 * log_g.exp();
                psi2_row[(ma, mb)] = val;
                psi2_row[(mb, ma)] = val;
            }
        }
        RowStats {
            psi0: variance,
            psi1_row,
            psi2_row,
        }
    }

    fn psi_row_linear(
        &self,
        q: &VariationalLatentPosterior,
        z: &DMatrix<f64>,
        i: usize,
    ) -> RowStats {
        let variances = match self {
            KernelSpec::Linear { variances } => variances,
            _ => unreachable!(),
        };
        let m = z.nrows();
        let d = variances.len();
        let mut psi0 = 0.0;
        for qd in 0..d {
            psi0 += variances[qd] * (q.mu[(i, qd)] * q.mu[(i, qd)] + q.s[(i, qd)]);
        }
        let mut a = vec![0.0; m];
        for mm in 0..m {
            let mut s = 0.0;
            for qd in 0..d {
                s += variances[qd] * q.mu[(i, qd)] * z[(mm, qd)];
            }
            a[mm] = s;
        }
        let mut psi2_row = DMatrix::zeros(m, m);
        for ma in 0..m {
            for mb in ma..m {
                let mut val = a[ma] * a[mb];
                for qd in 0..d {
                    val += variances[qd]
                        * variances[qd]
                        * q.s[(i, qd)]
                        * z[(ma, qd)]
                        * z[(mb, qd)];
                }
                psi2_row[(ma, mb)] = val;
                psi2_row[(mb, ma)] = val;
            }
        }
        RowStats {
            psi0,
            psi1_row: a,
            psi2_row,
        }
    }
}

/// Cross term of the sum-kernel Psi2 for realization `i`:
/// `X[m, m'] = E[k_lin(z_m, x) k_rbf(x, z_m')]` under `q(x_i)`, evaluated
/// per dimension with the Gaussian product identity.
fn sum_cross_row(
    rbf_variance: f64,
    rbf_lengthscales: &[f64],
    linear_variances: &[f64],
    q: &VariationalLatentPosterior,
    z: &DMatrix<f64>,
    i: usize,
) -> DMatrix<f64> {
    let m = z.nrows();
    let d = rbf_lengthscales.len();
    let mut out = DMatrix::zeros(m, m);
    // c and m-tilde depend on (i, m') only
    let mut cprod = vec![0.0; m];
    let mut mtilde = DMatrix::zeros(m, d);
    for mb in 0..m {
        let mut log_c = 0.0;
        for qd in 0..d {
            let t = rbf_lengthscales[qd] * rbf_lengthscales[qd];
            let s = q.s[(i, qd)];
            let v = t + s;
            let diff = q.mu[(i, qd)] - z[(mb, qd)];
            log_c += 0.5 * (t.ln() - v.ln()) - diff * diff / (2.0 * v);
            mtilde[(mb, qd)] = (q.mu[(i, qd)] * t + z[(mb, qd)] * s) / v;
        }
        cprod[mb] = rbf_variance * log_c.exp();
    }
    for ma in 0..m {
        for mb in 0..m {
            let mut lin = 0.0;
            for qd in 0..d {
                lin += linear_variances[qd] * z[(ma, qd)] * mtilde[(mb, qd)];
            }
            out[(ma, mb)] = cprod[mb] * lin;
        }
    }
    out
}

impl KernelSpec {
    /// Vector-Jacobian product of the psi-statistics: contracts the adjoint
    /// against the Jacobians w.r.t. `mu`, `s`, `z`, and the log
    /// hyperparameters.
    pub fn psi_stats_vjp(
        &self,
        q: &VariationalLatentPosterior,
        z: &DMatrix<f64>,
        adj: &PsiAdjoint,
    ) -> Result<PsiGrad> {
        let d = self.input_dim();
        check_psi_inputs(q, z, d)?;
        let n = q.n_rows();
        let m = z.nrows();
        if let Some(p1) = adj.psi1 {
            if p1.shape() != (n, m) {
                return Err(Error::DimensionMismatch {
                    op: "psi_stats_vjp",
                    detail: format!("psi1 adjoint is {:?}, expected {:?}", p1.shape(), (n, m)),
                });
            }
        }
        if let Some(p2) = adj.psi2 {
            if p2.shape() != (m, m) {
                return Err(Error::DimensionMismatch {
                    op: "psi_stats_vjp",
                    detail: format!("psi2 adjoint is {:?}, expected {:?}", p2.shape(), (m, m)),
                });
            }
        }
        match self {
            KernelSpec::RbfArd { .. } => Ok(self.psi_vjp_rbf(q, z, adj)),
            KernelSpec::Linear { .. } => Ok(self.psi_vjp_linear(q, z, adj)),
            KernelSpec::Sum {
                rbf_variance,
                rbf_lengthscales,
                linear_variances,
            } => {
                let rbf = KernelSpec::RbfArd {
                    variance: *rbf_variance,
                    lengthscales: rbf_lengthscales.clone(),
                };
                let lin = KernelSpec::Linear {
                    variances: linear_variances.clone(),
                };
                let g_rbf = rbf.psi_vjp_rbf(q, z, adj);
                let g_lin = lin.psi_vjp_linear(q, z, adj);
                let mut g = PsiGrad::zeros(q.n_rows(), rbf_lengthscales.len(), z.nrows(), self.n_params());
                g.d_mu = &g_rbf.d_mu + &g_lin.d_mu;
                g.d_s = &g_rbf.d_s + &g_lin.d_s;
                g.d_z = &g_rbf.d_z + &g_lin.d_z;
                let dr = rbf_lengthscales.len();
                for (dst, src) in g.d_log_params[..1 + dr].iter_mut().zip(&g_rbf.d_log_params) {
                    *dst += src;
                }
                for (dst, src) in g.d_log_params[1 + dr..].iter_mut().zip(&g_lin.d_log_params) {
                    *dst += src;
                }
                if let Some(p2) = adj.psi2 {
                    let xbar = p2 + p2.transpose();
                    sum_cross_vjp(
                        *rbf_variance,
                        rbf_lengthscales,
                        linear_variances,
                        q,
                        z,
                        &xbar,
                        &mut g,
                    );
                }
                Ok(g)
            }
            KernelSpec::Exponential { .. } => Err(Error::InvalidArgument(
                "psi statistics are not defined for the exponential kernel".into(),
            )),
        }
    }

    fn psi_vjp_rbf(&self, q: &VariationalLatentPosterior, z: &DMatrix<f64>, adj: &PsiAdjoint) -> PsiGrad {
        let (variance, lengthscales) = match self {
            KernelSpec::RbfArd {
                variance,
                lengthscales,
            } => (*variance, lengthscales),
            _ => unreachable!(),
        };
        let n = q.n_rows();
        let m = z.nrows();
        let d = lengthscales.len();
        let mut g = PsiGrad::zeros(n, d, m, 1 + d);

        // psi0 = n * variance
        g.d_log_params[0] += adj.psi0 * n as f64 * variance;

        if let Some(p1bar) = adj.psi1 {
            for i in 0..n {
                for mm in 0..m {
                    let gb = p1bar[(i, mm)];
                    if gb == 0.0 {
                        continue;
                    }
                    let mut log_f = 0.0;
                    for qd in 0..d {
                        let t = lengthscales[qd] * lengthscales[qd];
                        let v = t + q.s[(i, qd)];
                        let diff = q.mu[(i, qd)] - z[(mm, qd)];
                        log_f += 0.5 * (t.ln() - v.ln()) - diff * diff / (2.0 * v);
                    }
                    let val = variance * log_f.exp();
                    let w = gb * val;
                    g.d_log_params[0] += w;
                    for qd in 0..d {
                        let t = lengthscales[qd] * lengthscales[qd];
                        let v = t + q.s[(i, qd)];
                        let diff = q.mu[(i, qd)] - z[(mm, qd)];
                        g.d_mu[(i, qd)] += w * (-diff / v);
                        g.d_z[(mm, qd)] += w * (diff / v);
                        g.d_s[(i, qd)] += w * (-0.5 / v + diff * diff / (2.0 * v * v));
                        g.d_log_params[1 + qd] += w * (1.0 - t / v + t * diff * diff / (v * v));
                    }
                }
            }
        }

        if let Some(p2bar) = adj.psi2 {
            let v2 = variance * variance;
            for i in 0..n {
                for ma in 0..m {
                    for mb in 0..m {
                        let gb = p2bar[(ma, mb)];
                        if gb == 0.0 {
                            continue;
                        }
                        let mut log_g = 0.0;
                        for qd in 0..d {
                            let t = lengthscales[qd] * lengthscales[qd];
                            let u = t + 2.0 * q.s[(i, qd)];
                            let dz = z[(ma, qd)] - z[(mb, qd)];
                            let zbar = 0.5 * (z[(ma, qd)] + z[(mb, qd)]);
                            let dm = q.mu[(i, qd)] - zbar;
                            log_g += 0.5 * (t.ln() - u.ln()) - dz * dz / (4.0 * t) - dm * dm / u;
                        }
                        let val = v2 * log_g.exp();
                        let w = gb * val;
                        g.d_log_params[0] += 2.0 * w;
                        for qd in 0..d {
                            let t = lengthscales[qd] * lengthscales[qd];
                            let u = t + 2.0 * q.s[(i, qd)];
                            let dz = z[(ma, qd)] - z[(mb, qd)];
                            let zbar = 0.5 * (z[(ma, qd)] + z[(mb, qd)]);
                            let dm = q.mu[(i, qd)] - zbar;
                            g.d_mu[(i, qd)] += w * (-2.0 * dm / u);
                            g.d_s[(i, qd)] += w * (-1.0 / u + 2.0 * dm * dm / (u * u));
                            g.d_z[(ma, qd)] += w * (-dz / (2.0 * t) + dm / u);
                            g.d_z[(mb, qd)] += w * (dz / (2.0 * t) + dm / u);
                            g.d_log_params[1 + qd] += w
                                * (1.0 - t / u + dz * dz / (2.0 * t) + 2.0 * t * dm * dm / (u * u));
                        }
                    }
                }
            }
        }
        g
    }

    fn psi_vjp_linear(
        &self,
        q: &VariationalLatentPosterior,
        z: &DMatrix<f64>,
        adj: &PsiAdjoint,
    ) -> PsiGrad {
        let variances = match self {
            KernelSpec::Linear { variances } => variances,
            _ => unreachable!(),
        };
        let n = q.n_rows();
        let m = z.nrows();
        let d = variances.len();
        let mut g = PsiGrad::zeros(n, d, m, d);

        if adj.psi0 != 0.0 {
            for i in 0..n {
                for qd in 0..d {
                    let sv = variances[qd];
                    g.d_mu[(i, qd)] += adj.psi0 * sv * 2.0 * q.mu[(i, qd)];
                    g.d_s[(i, qd)] += adj.psi0 * sv;
                    g.d_log_params[qd] +=
                        adj.psi0 * sv * (q.mu[(i, qd)] * q.mu[(i, qd)] + q.s[(i, qd)]);
                }
            }
        }

        if let Some(p1bar) = adj.psi1 {
            for i in 0..n {
                for mm in 0..m {
                    let gb = p1bar[(i, mm)];
                    if gb == 0.0 {
                        continue;
                    }
                    for qd in 0..d {
                        let sv = variances[qd];
                        g.d_mu[(i, qd)] += gb * sv * z[(mm, qd)];
                        g.d_z[(mm, qd)] += gb * sv * q.mu[(i, qd)];
                        g.d_log_params[qd] += gb * sv * q.mu[(i, qd)] * z[(mm, qd)];
                    }
                }
            }
        }

        if let Some(p2bar) = adj.psi2 {
            for i in 0..n {
                // a_m = sum_q var_q mu_iq z_mq
                let mut a = vec![0.0; m];
                for mm in 0..m {
                    let mut s = 0.0;
                    for qd in 0..d {
                        s += variances[qd] * q.mu[(i, qd)] * z[(mm, qd)];
                    }
                    a[mm] = s;
                }
                // abar_m = sum_m' (p2bar[m,m'] + p2bar[m',m]) a_m'
                let mut abar = vec![0.0; m];
                for ma in 0..m {
                    let mut s = 0.0;
                    for mb in 0..m {
                        s += (p2bar[(ma, mb)] + p2bar[(mb, ma)]) * a[mb];
                    }
                    abar[ma] = s;
                }
                for mm in 0..m {
                    let ab = abar[mm];
                    if ab == 0.0 {
                        continue;
                    }
                    for qd in 0..d {
                        let sv = variances[qd];
                        g.d_mu[(i, qd)] += ab * sv * z[(mm, qd)];
                        g.d_z[(mm, qd)] += ab * sv * q.mu[(i, qd)];
                        g.d_log_params[qd] += ab * sv * q.mu[(i, qd)] * z[(mm, qd)];
                    }
                }
                // diagonal-variance term: sum_q var_q^2 s_iq z_mq z_m'q
                for ma in 0..m {
                    for mb in 0..m {
                        let gb = p2bar[(ma, mb)];
                        if gb == 0.0 {
                            continue;
                        }
                        for qd in 0..d {
                            let sv = variances[qd];
                            let sv2 = sv * sv;
                            let siq = q.s[(i, qd)];
                            g.d_s[(i, qd)] += gb * sv2 * z[(ma, qd)] * z[(mb, qd)];
                            g.d_z[(ma, qd)] += gb * sv2 * siq * z[(mb, qd)];
                            g.d_z[(mb, qd)] += gb * sv2 * siq * z[(ma, qd)];
                            g.d_log_params[qd] +=
                                gb * 2.0 * sv2 * siq * z[(ma, qd)] * z[(mb, qd)];
                        }
                    }
                }
            }
        }
        g
    }
}

/// Backward pass of [`sum_cross_row`] summed over realizations: accumulates
/// into `g` given the adjoint `xbar` of the cross matrix `X`.
fn sum_cross_vjp(
    rbf_variance: f64,
    rbf_lengthscales: &[f64],
    linear_variances: &[f64],
    q: &VariationalLatentPosterior,
    z: &DMatrix<f64>,
    xbar: &DMatrix<f64>,
    g: &mut PsiGrad,
) {
    let n = q.n_rows();
    let m = z.nrows();
    let d = rbf_lengthscales.len();
    let dr = 1 + d; // offset of linear params in the packed vector
    for i in 0..n {
        for mb in 0..m {
            // shared per-(i, mb) quantities
            let mut log_c = 0.0;
            let mut mtilde = vec![0.0; d];
            for qd in 0..d {
                let t = rbf_lengthscales[qd] * rbf_lengthscales[qd];
                let s = q.s[(i, qd)];
                let v = t + s;
                let diff = q.mu[(i, qd)] - z[(mb, qd)];
                log_c += 0.5 * (t.ln() - v.ln()) - diff * diff / (2.0 * v);
                mtilde[qd] = (q.mu[(i, qd)] * t + z[(mb, qd)] * s) / v;
            }
            let c = rbf_variance * log_c.exp();
            for ma in 0..m {
                let gb = xbar[(ma, mb)];
                if gb == 0.0 {
                    continue;
                }
                let mut lin = 0.0;
                for qd in 0..d {
                    lin += linear_variances[qd] * z[(ma, qd)] * mtilde[qd];
                }
                // X[ma,mb] = c * lin
                let w_c = gb * lin; // adjoint of c
                let w_lin = gb * c; // adjoint of lin
                g.d_log_params[0] += w_c * c; // c scales with rbf variance
                for qd in 0..d {
                    let t = rbf_lengthscales[qd] * rbf_lengthscales[qd];
                    let s = q.s[(i, qd)];
                    let v = t + s;
                    let diff = q.mu[(i, qd)] - z[(mb, qd)];
                    // chain through log c (same structure as rbf Psi1)
                    let wc = w_c * c;
                    g.d_mu[(i, qd)] += wc * (-diff / v);
                    g.d_z[(mb, qd)] += wc * (diff / v);
                    g.d_s[(i, qd)] += wc * (-0.5 / v + diff * diff / (2.0 * v * v));
                    g.d_log_params[1 + qd] += wc * (1.0 - t / v + t * diff * diff / (v * v));
                    // chain through lin
                    let sv = linear_variances[qd];
                    g.d_z[(ma, qd)] += w_lin * sv * mtilde[qd];
                    g.d_log_params[dr + qd] += w_lin * sv * z[(ma, qd)] * mtilde[qd];
                    let w_mt = w_lin * sv * z[(ma, qd)]; // adjoint of mtilde[qd]
                    g.d_mu[(i, qd)] += w_mt * t / v;
                    g.d_z[(mb, qd)] += w_mt * s / v;
                    g.d_s[(i, qd)] += w_mt * t * (z[(mb, qd)] - q.mu[(i, qd)]) / (v * v);
                    // d mtilde / d log l = 2t * s (mu - z) / v^2
                    g.d_log_params[1 + qd] +=
                        w_mt * 2.0 * t * s * (q.mu[(i, qd)] - z[(mb, qd)]) / (v * v);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_q(n: usize, d: usize, rng: &mut ChaCha20Rng) -> VariationalLatentPosterior {
        VariationalLatentPosterior::new(
            DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)),
            DMatrix::from_fn(n, d, |_, _| rng.gen_range(0.05..0.8)),
        )
        .unwrap()
    }

    #[test]
    fn gram_rbf_zero_distance_is_variance() {
        let k = KernelSpec::rbf_ard(2.5, vec![0.7, 1.3]);
        let x = DMatrix::from_row_slice(1, 2, &[0.3, -0.4]);
        let g = k.gram(&x, &x).unwrap();
        assert!((g[(0, 0)] - 2.5).abs() < 1e-14);
    }

    #[test]
    fn gram_exponential_unit_lengthscale_distance() {
        let l = 0.37;
        let k = KernelSpec::exponential(l);
        let x1 = DMatrix::from_row_slice(1, 1, &[0.0]);
        let x2 = DMatrix::from_row_slice(1, 1, &[l]);
        let g = k.gram(&x1, &x2).unwrap();
        assert!((g[(0, 0)] - (-1.0_f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn gram_linear_dot_product() {
        let k = KernelSpec::linear(vec![1.0, 1.0]);
        let x1 = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let x2 = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let g = k.gram(&x1, &x2).unwrap();
        assert!((g[(0, 0)] - 11.0).abs() < 1e-14);
    }

    #[test]
    fn gram_dimension_mismatch() {
        let k = KernelSpec::rbf_ard(1.0, vec![1.0, 1.0]);
        let x = DMatrix::zeros(2, 3);
        assert!(k.gram(&x, &x).is_err());
    }

    #[test]
    fn gram_psd_on_random_inputs() {
        let mut r = rng(21);
        for kernel in [
            KernelSpec::rbf_ard(1.3, vec![0.6, 1.1]),
            KernelSpec::exponential(0.4),
            KernelSpec::linear(vec![0.8, 0.5]),
            KernelSpec::sum(1.1, vec![0.7, 0.9], vec![0.4, 0.6]),
        ] {
            let d = kernel.input_dim();
            let x = DMatrix::from_fn(8, d, |_, _| r.gen_range(-1.5..1.5));
            let g = kernel.gram(&x, &x).unwrap();
            let eig = crate::linalg::sym_eig(&g).unwrap();
            let max = eig.lambda.max();
            assert!(
                eig.lambda.min() >= -1e-8 * max,
                "kernel {kernel:?} produced negative eigenvalue"
            );
        }
    }

    #[test]
    fn rbf_gram_log_variance_scale_equivariance() {
        let mut r = rng(22);
        let k = KernelSpec::rbf_ard(1.7, vec![0.8, 1.2]);
        let x = DMatrix::from_fn(4, 2, |_, _| r.gen_range(-1.0..1.0));
        let g = k.gram(&x, &x).unwrap();
        let gbar = DMatrix::from_element(4, 4, 1.0);
        let grad = k.gram_vjp(&x, &x, &gbar).unwrap();
        // d gram / d log var = gram, so the contraction equals the gram sum
        assert!((grad.d_log_params[0] - g.sum()).abs() < 1e-10 * g.sum().abs());
    }

    fn fd_check_gram(kernel: &KernelSpec, seed: u64) {
        let mut r = rng(seed);
        let d = kernel.input_dim();
        let x1 = DMatrix::from_fn(3, d, |_, _| r.gen_range(-1.0..1.0));
        let x2 = DMatrix::from_fn(4, d, |_, _| r.gen_range(-1.0..1.0));
        let gbar = DMatrix::from_fn(3, 4, |_, _| r.gen_range(-1.0..1.0));
        let grad = kernel.gram_vjp(&x1, &x2, &gbar).unwrap();
        let h = 1e-5;

        let value = |k: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>| -> f64 {
            (gbar.transpose() * k.gram(a, b).unwrap()).trace()
        };

        let p0 = kernel.params_log();
        for pi in 0..p0.len() {
            let mut kp = kernel.clone();
            let mut km = kernel.clone();
            let mut pp = p0.clone();
            let mut pm = p0.clone();
            pp[pi] += h;
            pm[pi] -= h;
            kp.set_params_log(&pp).unwrap();
            km.set_params_log(&pm).unwrap();
            let fd = (value(&kp, &x1, &x2) - value(&km, &x1, &x2)) / (2.0 * h);
            let an = grad.d_log_params[pi];
            assert!(
                (fd - an).abs() <= 1e-4 * (1.0 + fd.abs()),
                "{kernel:?} param {pi}: fd {fd} vs analytic {an}"
            );
        }
        for i in 0..3 {
            for q in 0..d {
                let mut xp = x1.clone();
                let mut xm = x1.clone();
                xp[(i, q)] += h;
                xm[(i, q)] -= h;
                let fd = (value(kernel, &xp, &x2) - value(kernel, &xm, &x2)) / (2.0 * h);
                let an = grad.d_x1[(i, q)];
                assert!(
                    (fd - an).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "{kernel:?} x1 ({i},{q}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn gram_gradients_match_finite_differences() {
        fd_check_gram(&KernelSpec::rbf_ard(1.4, vec![0.7, 1.1]), 31);
        fd_check_gram(&KernelSpec::exponential(0.5), 32);
        fd_check_gram(&KernelSpec::linear(vec![0.9, 0.4]), 33);
        fd_check_gram(&KernelSpec::sum(1.2, vec![0.8, 1.3], vec![0.5, 0.7]), 34);
    }

    #[test]
    fn psi_rbf_deterministic_limit_matches_gram() {
        let mut r = rng(41);
        let k = KernelSpec::rbf_ard(1.3, vec![0.8, 1.1]);
        let n = 4;
        let m = 3;
        let mu = DMatrix::from_fn(n, 2, |_, _| r.gen_range(-1.0..1.0));
        let s = DMatrix::from_element(n, 2, 1e-10);
        let q = VariationalLatentPosterior::new(mu.clone(), s).unwrap();
        let z = DMatrix::from_fn(m, 2, |_, _| r.gen_range(-1.0..1.0));
        let stats = k.psi_stats(&q, &z, false).unwrap();
        let kfu = k.gram(&mu, &z).unwrap();
        assert!((&stats.psi1 - &kfu).norm() / kfu.norm() < 1e-6);
        let kufkfu = kfu.transpose() * &kfu;
        assert!((&stats.psi2 - &kufkfu).norm() / kufkfu.norm() < 1e-6);
        assert!((stats.psi0 - n as f64 * 1.3).abs() < 1e-12);
    }

    #[test]
    fn psi_rbf_psi0_is_n_variance() {
        let mut r = rng(42);
        let k = KernelSpec::rbf_ard(1.0, vec![1.0]);
        let q = random_q(10, 1, &mut r);
        let z = DMatrix::from_fn(3, 1, |_, _| r.gen_range(-1.0..1.0));
        let stats = k.psi_stats(&q, &z, false).unwrap();
        assert!((stats.psi0 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn psi_linear_zero_mean_psi1_vanishes() {
        let mut r = rng(43);
        let k = KernelSpec::linear(vec![0.7, 1.2]);
        let n = 5;
        let q = VariationalLatentPosterior::new(
            DMatrix::zeros(n, 2),
            DMatrix::from_fn(n, 2, |_, _| r.gen_range(0.1..1.0)),
        )
        .unwrap();
        let z = DMatrix::from_fn(4, 2, |_, _| r.gen_range(-1.0..1.0));
        let stats = k.psi_stats(&q, &z, false).unwrap();
        assert!(stats.psi1.norm() < 1e-14);
    }

    #[test]
    fn psi_linear_deterministic_limit() {
        let mut r = rng(44);
        let k = KernelSpec::linear(vec![0.7, 1.2]);
        let mu = DMatrix::from_fn(4, 2, |_, _| r.gen_range(-1.0..1.0));
        let q = VariationalLatentPosterior::new(mu.clone(), DMatrix::from_element(4, 2, 1e-12))
            .unwrap();
        let z = DMatrix::from_fn(3, 2, |_, _| r.gen_range(-1.0..1.0));
        let stats = k.psi_stats(&q, &z, false).unwrap();
        let kfu = k.gram(&mu, &z).unwrap();
        let expect = kfu.transpose() * &kfu;
        assert!((&stats.psi2 - &expect).norm() / expect.norm() < 1e-6);
    }

    #[test]
    fn psi_sum_collapses_to_components() {
        let mut r = rng(45);
        let q = random_q(3, 2, &mut r);
        let z = DMatrix::from_fn(4, 2, |_, _| r.gen_range(-1.0..1.0));

        // zero linear variances: equals rbf stats
        let sum_k = KernelSpec::sum(1.4, vec![0.9, 0.7], vec![1e-300, 1e-300]);
        let rbf_k = KernelSpec::rbf_ard(1.4, vec![0.9, 0.7]);
        let a = sum_k.psi_stats(&q, &z, false).unwrap();
        let b = rbf_k.psi_stats(&q, &z, false).unwrap();
        assert!((a.psi0 - b.psi0).abs() < 1e-10);
        assert!((&a.psi1 - &b.psi1).norm() < 1e-10);
        assert!((&a.psi2 - &b.psi2).norm() < 1e-10);

        // zero rbf variance: equals linear stats
        let sum_k = KernelSpec::sum(1e-300, vec![0.9, 0.7], vec![0.8, 1.1]);
        let lin_k = KernelSpec::linear(vec![0.8, 1.1]);
        let a = sum_k.psi_stats(&q, &z, false).unwrap();
        let b = lin_k.psi_stats(&q, &z, false).unwrap();
        assert!((a.psi0 - b.psi0).abs() < 1e-10);
        assert!((&a.psi1 - &b.psi1).norm() < 1e-10);
        assert!((&a.psi2 - &b.psi2).norm() < 1e-10);
    }

    #[test]
    fn psi2_is_symmetric_psd_and_sum_of_rows() {
        let mut r = rng(46);
        for kernel in [
            KernelSpec::rbf_ard(1.2, vec![0.8, 1.4]),
            KernelSpec::linear(vec![0.6, 0.9]),
            KernelSpec::sum(1.2, vec![0.8, 1.4], vec![0.6, 0.9]),
        ] {
            let q = random_q(5, 2, &mut r);
            let z = DMatrix::from_fn(4, 2, |_, _| r.gen_range(-1.0..1.0));
            let stats = kernel.psi_stats(&q, &z, true).unwrap();
            assert!((&stats.psi2 - stats.psi2.transpose()).norm() < 1e-12);
            let eig = crate::linalg::sym_eig(&stats.psi2).unwrap();
            assert!(eig.lambda.min() >= -1e-8 * eig.lambda.max());
            let rows = stats.psi2_rows.as_ref().unwrap();
            let mut total = DMatrix::zeros(4, 4);
            for rr in rows {
                total += rr;
            }
            assert!((&total - &stats.psi2).norm() < 1e-12);
        }
    }

    #[test]
    fn psi_stats_undefined_for_exponential_kernel() {
        let k = KernelSpec::exponential(0.3);
        let q = VariationalLatentPosterior::new(
            DMatrix::zeros(2, 1),
            DMatrix::from_element(2, 1, 0.5),
        )
        .unwrap();
        let z = DMatrix::zeros(2, 1);
        assert!(k.psi_stats(&q, &z, false).is_err());
        let adj = PsiAdjoint {
            psi0: 1.0,
            psi1: None,
            psi2: None,
        };
        assert!(k.psi_stats_vjp(&q, &z, &adj).is_err());
    }

    #[test]
    fn psi_rejects_nonpositive_variances() {
        let k = KernelSpec::rbf_ard(1.0, vec![1.0]);
        let q = VariationalLatentPosterior {
            mu: DMatrix::zeros(2, 1),
            s: DMatrix::from_element(2, 1, 0.0),
        };
        let z = DMatrix::zeros(2, 1);
        assert!(k.psi_stats(&q, &z, false).is_err());
    }

    fn fd_check_psi(kernel: &KernelSpec, seed: u64) {
        let mut r = rng(seed);
        let d = kernel.input_dim();
        let n = 3;
        let m = 4;
        let q = random_q(n, d, &mut r);
        let z = DMatrix::from_fn(m, d, |_, _| r.gen_range(-1.0..1.0));
        let psi0_bar = r.gen_range(-1.0..1.0);
        let psi1_bar = DMatrix::from_fn(n, m, |_, _| r.gen_range(-1.0..1.0));
        let psi2_bar = DMatrix::from_fn(m, m, |_, _| r.gen_range(-1.0..1.0));
        let adj = PsiAdjoint {
            psi0: psi0_bar,
            psi1: Some(&psi1_bar),
            psi2: Some(&psi2_bar),
        };
        let grad = kernel.psi_stats_vjp(&q, &z, &adj).unwrap();

        let value = |k: &KernelSpec, q: &VariationalLatentPosterior, z: &DMatrix<f64>| -> f64 {
            let s = k.psi_stats(q, z, false).unwrap();
            psi0_bar * s.psi0
                + (psi1_bar.transpose() * &s.psi1).trace()
                + (psi2_bar.transpose() * &s.psi2).trace()
        };

        let h = 1e-5;
        let check = |fd: f64, an: f64, what: &str| {
            assert!(
                (fd - an).abs() <= 1e-4 * (1.0 + fd.abs()),
                "{kernel:?} {what}: fd {fd} vs analytic {an}"
            );
        };

        for i in 0..n {
            for qd in 0..d {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp.mu[(i, qd)] += h;
                qm.mu[(i, qd)] -= h;
                check(
                    (value(kernel, &qp, &z) - value(kernel, &qm, &z)) / (2.0 * h),
                    grad.d_mu[(i, qd)],
                    &format!("mu ({i},{qd})"),
                );
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp.s[(i, qd)] += h;
                qm.s[(i, qd)] -= h;
                check(
                    (value(kernel, &qp, &z) - value(kernel, &qm, &z)) / (2.0 * h),
                    grad.d_s[(i, qd)],
                    &format!("s ({i},{qd})"),
                );
            }
        }
        for mm in 0..m {
            for qd in 0..d {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[(mm, qd)] += h;
                zm[(mm, qd)] -= h;
                check(
                    (value(kernel, &q, &zp) - value(kernel, &q, &zm)) / (2.0 * h),
                    grad.d_z[(mm, qd)],
                    &format!("z ({mm},{qd})"),
                );
            }
        }
        let p0 = kernel.params_log();
        for pi in 0..p0.len() {
            let mut kp = kernel.clone();
            let mut km = kernel.clone();
            let mut pp = p0.clone();
            let mut pm = p0.clone();
            pp[pi] += h;
            pm[pi] -= h;
            kp.set_params_log(&pp).unwrap();
            km.set_params_log(&pm).unwrap();
            check(
                (value(&kp, &q, &z) - value(&km, &q, &z)) / (2.0 * h),
                grad.d_log_params[pi],
                &format!("param {pi}"),
            );
        }
    }

    #[test]
    fn psi_gradients_match_finite_differences() {
        fd_check_psi(&KernelSpec::rbf_ard(1.3, vec![0.7, 1.2]), 51);
        fd_check_psi(&KernelSpec::linear(vec![0.8, 1.1]), 52);
        fd_check_psi(&KernelSpec::sum(1.1, vec![0.9, 0.6], vec![0.5, 1.3]), 53);
    }

    #[test]
    fn psi1_gradient_vanishes_at_symmetric_stationary_point() {
        // single inducing point placed exactly at the posterior mean: the
        // Gaussian exponent is stationary in mu
        let k = KernelSpec::rbf_ard(1.0, vec![1.0]);
        let q = VariationalLatentPosterior::new(
            DMatrix::from_element(1, 1, 0.4),
            DMatrix::from_element(1, 1, 0.3),
        )
        .unwrap();
        let z = DMatrix::from_element(1, 1, 0.4);
        let p1bar = DMatrix::from_element(1, 1, 1.0);
        let adj = PsiAdjoint {
            psi0: 0.0,
            psi1: Some(&p1bar),
            psi2: None,
        };
        let grad = k.psi_stats_vjp(&q, &z, &adj).unwrap();
        assert!(grad.d_mu[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn psi_stats_row_partitioning_is_deterministic() {
        let mut r = rng(61);
        let k = KernelSpec::sum(1.2, vec![0.8, 1.1], vec![0.5, 0.9]);
        let q = random_q(16, 2, &mut r);
        let z = DMatrix::from_fn(5, 2, |_, _| r.gen_range(-1.0..1.0));
        let a = k.psi_stats(&q, &z, false).unwrap();
        let b = k.psi_stats(&q, &z, false).unwrap();
        assert_eq!(a.psi0.to_bits(), b.psi0.to_bits());
        for (x, y) in a.psi2.iter().zip(b.psi2.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // sequential oracle: sum rows one by one
        let mut seq = DMatrix::zeros(5, 5);
        for i in 0..16 {
            let qi = VariationalLatentPosterior::new(
                DMatrix::from_fn(1, 2, |_, c| q.mu[(i, c)]),
                DMatrix::from_fn(1, 2, |_, c| q.s[(i, c)]),
            )
            .unwrap();
            seq += k.psi_stats(&qi, &z, false).unwrap().psi2;
        }
        assert!((&seq - &a.psi2).norm() <= 1e-12 * a.psi2.norm());
    }

    #[test]
    fn kernel_params_round_trip() {
        let mut k = KernelSpec::sum(1.5, vec![0.7, 2.0], vec![0.25, 4.0]);
        let p = k.params_log();
        assert_eq!(p.len(), k.n_params());
        k.set_params_log(&p).unwrap();
        let p2 = k.params_log();
        for (a, b) in p.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-15);
        }
        let v = DVector::from_vec(p);
        assert_eq!(v.len(), 5);
    }
}
