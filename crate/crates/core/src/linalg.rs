//! Dense symmetric linear algebra plus Kronecker-product structure exploitation.
//!
//! Matrices with Kronecker structure are kept as lists of dense factors and
//! applied to vectors mode by mode, so a product with an `n x n` logical
//! matrix costs `O(n * sum_i n_i)` instead of `O(n^2)`. Factor order is
//! (stochastic, spatial-1, ..., spatial-d_s) and all index arithmetic uses
//! row-major Kronecker ordering: the first factor owns the slowest index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative floor applied to eigenvalues when they are used in inverses.
pub const EIG_FLOOR_REL: f64 = 1e-12;

/// A matrix represented as a Kronecker product of dense square factors.
#[derive(Debug, Clone)]
pub struct KronMatrix {
    factors: Vec<DMatrix<f64>>,
}

impl KronMatrix {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument(
                "KronMatrix requires at least one factor".into(),
            ));
        }
        for (i, f) in factors.iter().enumerate() {
            if f.nrows() != f.ncols() {
                return Err(Error::DimensionMismatch {
                    op: "KronMatrix::new",
                    detail: format!("factor {i} is {}x{}, expected square", f.nrows(), f.ncols()),
                });
            }
        }
        Ok(KronMatrix { factors })
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    /// Logical row/column count: the product of the factor sizes.
    pub fn size(&self) -> usize {
        self.factors.iter().map(|f| f.nrows()).product()
    }

    pub fn factor_sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    /// `(kron factors) * v` without materializing the full matrix.
    pub fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.size() {
            return Err(Error::DimensionMismatch {
                op: "kron_matvec",
                detail: format!("vector length {} != logical size {}", v.len(), self.size()),
            });
        }
        let ops: Vec<FactorOp> = self.factors.iter().map(FactorOp::Mul).collect();
        let out = apply_kron_ops(&ops, v.as_slice())?;
        Ok(DVector::from_vec(out))
    }

    /// Column-wise application of [`KronMatrix::matvec`].
    pub fn matmat(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.size() {
            return Err(Error::DimensionMismatch {
                op: "kron_matmat",
                detail: format!("row count {} != logical size {}", m.nrows(), self.size()),
            });
        }
        let ops: Vec<FactorOp> = self.factors.iter().map(FactorOp::Mul).collect();
        apply_kron_ops_mat(&ops, m)
    }

    /// Dense expansion. Only sensible for small logical sizes (tests, oracles).
    pub fn expand_dense(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::from_element(1, 1, 1.0);
        for f in &self.factors {
            acc = kron_dense(&acc, f);
        }
        acc
    }
}

/// Dense Kronecker product of two matrices.
pub fn kron_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let v = a[(i, j)];
            if v == 0.0 {
                continue;
            }
            for p in 0..rb {
                for q in 0..cb {
                    out[(i * rb + p, j * cb + q)] = v * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Per-factor operation applied along one tensor mode.
#[derive(Clone, Copy)]
pub enum FactorOp<'a> {
    /// y = A u
    Mul(&'a DMatrix<f64>),
    /// y = A^T u
    TMul(&'a DMatrix<f64>),
    /// y = L^{-1} u with L lower triangular
    SolveLower(&'a DMatrix<f64>),
    /// y = L^{-T} u with L lower triangular
    SolveLowerT(&'a DMatrix<f64>),
    /// pass-through of the given mode size
    Identity(usize),
}

impl FactorOp<'_> {
    pub fn in_dim(&self) -> usize {
        match self {
            FactorOp::Mul(a) => a.ncols(),
            FactorOp::TMul(a) => a.nrows(),
            FactorOp::SolveLower(l) | FactorOp::SolveLowerT(l) => l.nrows(),
            FactorOp::Identity(n) => *n,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FactorOp::Mul(a) => a.nrows(),
            FactorOp::TMul(a) => a.ncols(),
            FactorOp::SolveLower(l) | FactorOp::SolveLowerT(l) => l.nrows(),
            FactorOp::Identity(n) => *n,
        }
    }
}

/// Applies one mode operation to the leading axis of a row-major buffer of
/// shape `[c, rest]`, producing the rotated row-major buffer `[rest, r]`.
fn apply_mode(op: &FactorOp, buf: &[f64], rest: usize) -> Result<Vec<f64>> {
    let c = op.in_dim();
    let r = op.out_dim();
    debug_assert_eq!(buf.len(), c * rest);
    let mut out = vec![0.0; rest * r];
    match op {
        FactorOp::Identity(_) => {
            for l in 0..c {
                let row = &buf[l * rest..(l + 1) * rest];
                for (t, &v) in row.iter().enumerate() {
                    out[t * r + l] = v;
                }
            }
        }
        FactorOp::Mul(a) => {
            for l in 0..c {
                let col = a.column(l);
                let row = &buf[l * rest..(l + 1) * rest];
                for (t, &v) in row.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let o = &mut out[t * r..(t + 1) * r];
                    for (j, oj) in o.iter_mut().enumerate() {
                        *oj += col[j] * v;
                    }
                }
            }
        }
        FactorOp::TMul(a) => {
            for l in 0..c {
                let arow: Vec<f64> = (0..r).map(|j| a[(l, j)]).collect();
                let row = &buf[l * rest..(l + 1) * rest];
                for (t, &v) in row.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let o = &mut out[t * r..(t + 1) * r];
                    for (j, oj) in o.iter_mut().enumerate() {
                        *oj += arow[j] * v;
                    }
                }
            }
        }
        FactorOp::SolveLower(lmat) => {
            check_diag(lmat)?;
            // forward substitution per trailing index
            for t in 0..rest {
                let o = &mut out[t * r..(t + 1) * r];
                for j in 0..c {
                    let mut s = buf[j * rest + t];
                    for l in 0..j {
                        s -= lmat[(j, l)] * o[l];
                    }
                    o[j] = s / lmat[(j, j)];
                }
            }
        }
        FactorOp::SolveLowerT(lmat) => {
            check_diag(lmat)?;
            for t in 0..rest {
                let o = &mut out[t * r..(t + 1) * r];
                for j in (0..c).rev() {
                    let mut s = buf[j * rest + t];
                    for l in (j + 1)..c {
                        s -= lmat[(l, j)] * o[l];
                    }
                    o[j] = s / lmat[(j, j)];
                }
            }
        }
    }
    Ok(out)
}

fn check_diag(l: &DMatrix<f64>) -> Result<()> {
    for i in 0..l.nrows() {
        if l[(i, i)] == 0.0 {
            return Err(Error::SingularTriangular(i));
        }
    }
    Ok(())
}

/// Applies `kron(op_0, ..., op_{F-1})` to a flat row-major vector.
pub fn apply_kron_ops(ops: &[FactorOp], x: &[f64]) -> Result<Vec<f64>> {
    let in_len: usize = ops.iter().map(|o| o.in_dim()).product();
    if x.len() != in_len {
        return Err(Error::DimensionMismatch {
            op: "apply_kron_ops",
            detail: format!("input length {} != expected {}", x.len(), in_len),
        });
    }
    let mut buf = x.to_vec();
    for op in ops {
        let rest = buf.len() / op.in_dim();
        buf = apply_mode(op, &buf, rest)?;
    }
    Ok(buf)
}

/// Column-wise [`apply_kron_ops`].
pub fn apply_kron_ops_mat(ops: &[FactorOp], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let out_len: usize = ops.iter().map(|o| o.out_dim()).product();
    let mut out = DMatrix::zeros(out_len, x.ncols());
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let y = apply_kron_ops(ops, &col)?;
        out.column_mut(j).copy_from_slice(&y);
    }
    Ok(out)
}

/// Per-factor gradients of the bilinear form `y^T (kron F_k) w`.
///
/// Returns one matrix `G_k` per factor such that
/// `d[y^T (kron F) w] = sum_k trace(G_k^T dF_k)`.
pub fn bilinear_factor_grads(
    y: &[f64],
    w: &[f64],
    factors: &[&DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let out_dims: Vec<usize> = factors.iter().map(|f| f.nrows()).collect();
    let in_dims: Vec<usize> = factors.iter().map(|f| f.ncols()).collect();
    let n_out: usize = out_dims.iter().product();
    let n_in: usize = in_dims.iter().product();
    if y.len() != n_out || w.len() != n_in {
        return Err(Error::DimensionMismatch {
            op: "bilinear_factor_grads",
            detail: format!(
                "y length {} (expected {}), w length {} (expected {})",
                y.len(),
                n_out,
                w.len(),
                n_in
            ),
        });
    }
    let mut grads = Vec::with_capacity(factors.len());
    for k in 0..factors.len() {
        // Apply every factor except k; mode k passes through at its input size.
        let ops: Vec<FactorOp> = factors
            .iter()
            .enumerate()
            .map(|(l, f)| {
                if l == k {
                    FactorOp::Identity(in_dims[l])
                } else {
                    FactorOp::Mul(f)
                }
            })
            .collect();
        let wt = apply_kron_ops(&ops, w)?;
        // wt has shape [out_0, .., in_k, .., out_{F-1}]; contract all modes
        // except k against y.
        let pre_y: usize = out_dims[..k].iter().product();
        let post_y: usize = out_dims[k + 1..].iter().product();
        let nk = out_dims[k];
        let mk = in_dims[k];
        let mut g = DMatrix::zeros(nk, mk);
        for pre in 0..pre_y {
            for a in 0..nk {
                for b in 0..mk {
                    let mut s = 0.0;
                    let ybase = (pre * nk + a) * post_y;
                    let wbase = (pre * mk + b) * post_y;
                    for post in 0..post_y {
                        s += y[ybase + post] * wt[wbase + post];
                    }
                    g[(a, b)] += s;
                }
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigenPair {
    /// Eigenvectors as columns; orthogonal.
    pub q: DMatrix<f64>,
    /// Eigenvalues, ascending.
    pub lambda: DVector<f64>,
}

/// Symmetric eigendecomposition. The input is symmetrized before the
/// decomposition; eigenvalues are returned in ascending order.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<EigenPair> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            op: "sym_eig",
            detail: format!("{}x{} not square", a.nrows(), a.ncols()),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut q = DMatrix::zeros(n, n);
    let mut lambda = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        q.column_mut(dst).copy_from(&eig.eigenvectors.column(src));
        lambda[dst] = eig.eigenvalues[src];
    }
    Ok(EigenPair { q, lambda })
}

/// Eigendecomposition of a Kronecker product of symmetric factors.
///
/// Returns the eigenvector factors and the composed eigenvalues in row-major
/// Kronecker order (not sorted).
pub fn kron_eig(k: &KronMatrix) -> Result<(KronMatrix, DVector<f64>)> {
    let mut q_factors = Vec::with_capacity(k.factors().len());
    let mut lambda_factors = Vec::with_capacity(k.factors().len());
    for f in k.factors() {
        let pair = sym_eig(f)?;
        q_factors.push(pair.q);
        lambda_factors.push(pair.lambda);
    }
    let lambda = compose_kron_diag(&lambda_factors);
    Ok((KronMatrix::new(q_factors)?, lambda))
}

/// Composes per-factor diagonals into the full Kronecker-ordered diagonal.
pub fn compose_kron_diag(factors: &[DVector<f64>]) -> DVector<f64> {
    let mut out = vec![1.0];
    for f in factors {
        let mut next = Vec::with_capacity(out.len() * f.len());
        for &o in &out {
            for &v in f.iter() {
                next.push(o * v);
            }
        }
        out = next;
    }
    DVector::from_vec(out)
}

/// Clamps eigenvalues below `EIG_FLOOR_REL * max` to that floor.
pub fn clamp_eigenvalues(lambda: &DVector<f64>) -> DVector<f64> {
    let max = lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = EIG_FLOOR_REL * max.max(0.0);
    lambda.map(|v| v.max(floor))
}

/// Lower-triangular Cholesky factor, with the diagonal jitter that was needed.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub l: DMatrix<f64>,
    /// Total diagonal jitter added to make the factorization succeed.
    pub jitter: f64,
}

/// Cholesky with escalating diagonal jitter: starts at `1e-10 * mean(diag)`,
/// multiplies by 10 per retry, gives up after 5 retries.
pub fn chol(a: &DMatrix<f64>, name: &str) -> Result<CholFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            op: "chol",
            detail: format!("{}x{} not square", a.nrows(), a.ncols()),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("chol input"));
    }
    let sym = (a + a.transpose()) * 0.5;
    if let Some(c) = nalgebra::Cholesky::new(sym.clone()) {
        return Ok(CholFactor {
            l: c.l(),
            jitter: 0.0,
        });
    }
    let mean_diag = sym.diagonal().iter().map(|v| v.abs()).sum::<f64>() / sym.nrows() as f64;
    let mut jitter = 1e-10 * mean_diag.max(f64::MIN_POSITIVE);
    for _ in 0..5 {
        let mut try_m = sym.clone();
        for i in 0..try_m.nrows() {
            try_m[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(try_m) {
            return Ok(CholFactor { l: c.l(), jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        name: name.to_string(),
        max_jitter: jitter / 10.0,
    })
}

/// Which side of the unknown the triangular matrix sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// solve `op(L) X = B`
    Left,
    /// solve `X op(L) = B`
    Right,
}

/// Triangular solve with a lower Cholesky factor; `transpose` selects
/// `op(L) = L^T`.
pub fn tri_solve(
    l: &CholFactor,
    b: &DMatrix<f64>,
    side: Side,
    transpose: bool,
) -> Result<DMatrix<f64>> {
    let lm = &l.l;
    let n = lm.nrows();
    check_diag(lm)?;
    match side {
        Side::Left => {
            if b.nrows() != n {
                return Err(Error::DimensionMismatch {
                    op: "tri_solve",
                    detail: format!("B has {} rows, L is {}x{}", b.nrows(), n, n),
                });
            }
            let mut x = b.clone();
            for j in 0..x.ncols() {
                let mut col: Vec<f64> = x.column(j).iter().copied().collect();
                if transpose {
                    for i in (0..n).rev() {
                        let mut s = col[i];
                        for k in (i + 1)..n {
                            s -= lm[(k, i)] * col[k];
                        }
                        col[i] = s / lm[(i, i)];
                    }
                } else {
                    for i in 0..n {
                        let mut s = col[i];
                        for k in 0..i {
                            s -= lm[(i, k)] * col[k];
                        }
                        col[i] = s / lm[(i, i)];
                    }
                }
                x.column_mut(j).copy_from_slice(&col);
            }
            Ok(x)
        }
        Side::Right => {
            // X op(L) = B  <=>  op(L)^T X^T = B^T
            let bt = b.transpose();
            let xt = tri_solve(l, &bt, Side::Left, !transpose)?;
            Ok(xt.transpose())
        }
    }
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn chol_solve(l: &CholFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let y = tri_solve(l, b, Side::Left, false)?;
    tri_solve(l, &y, Side::Left, true)
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub fn chol_inverse(l: &CholFactor) -> Result<DMatrix<f64>> {
    let n = l.l.nrows();
    chol_solve(l, &DMatrix::identity(n, n))
}
