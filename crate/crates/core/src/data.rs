//! Data generation for the elliptic problem: truncated Karhunen-Loeve
//! expansions, the two-layer warped-GP sampler for log-conductivity fields,
//! a piecewise-linear FEM solver on the unit square, and observation
//! subsampling.
//!
//! Grid nodes are ordered x-major (`flat = ix * n + iy`), matching the
//! (spatial-1, spatial-2) Kronecker ordering used by the models.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::sym_eig;

/// Sampled modes are scaled by the square root of the eigenvalue, so the
/// truncated covariance reconstructs the kernel matrix at full truncation.
pub const KLE_SCALING: &str = "sqrt_eigenvalue";

/// Parameters of the implicit stochastic prior (two-layer warped GP).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorConfig {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub l1: f64,
    pub l2: f64,
    pub d_kl1: usize,
    pub d_kl2: usize,
    /// Grid points per side.
    pub grid_n: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            sigma1_sq: 0.25,
            sigma2_sq: 1.0,
            l1: 2.0,
            l2: 0.1,
            d_kl1: 16,
            d_kl2: 32,
            grid_n: 33,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let n_s = self.grid_n * self.grid_n;
        if self.sigma1_sq <= 0.0 || self.sigma2_sq <= 0.0 || self.l1 <= 0.0 || self.l2 <= 0.0 {
            return Err(Error::InvalidArgument(
                "prior parameters must be positive".into(),
            ));
        }
        if self.grid_n < 2 {
            return Err(Error::InvalidArgument("grid_n must be at least 2".into()));
        }
        if self.d_kl1 == 0 || self.d_kl1 > n_s || self.d_kl2 == 0 || self.d_kl2 > n_s {
            return Err(Error::InvalidArgument(format!(
                "KL truncations must lie in 1..={n_s}"
            )));
        }
        Ok(())
    }

    /// The warping kernel `sigma1^2 exp(-sum((dx/l1)^2))` expressed as an
    /// ARD RBF (lengthscale `l1/sqrt(2)` per dimension).
    pub fn layer1_kernel(&self) -> KernelSpec {
        let l = self.l1 / 2.0_f64.sqrt();
        KernelSpec::RbfArd {
            variance: self.sigma1_sq,
            lengthscales: vec![l, l],
        }
    }

    /// The field kernel `sigma2^2 exp(-|dx|/l2)`.
    pub fn layer2_kernel(&self) -> KernelSpec {
        KernelSpec::Exponential {
            variance: self.sigma2_sq,
            lengthscale: self.l2,
        }
    }
}

/// Uniform grid coordinates on [0, 1]^2, x-major node order.
pub fn grid_points(n: usize) -> DMatrix<f64> {
    let h = 1.0 / (n - 1) as f64;
    DMatrix::from_fn(n * n, 2, |flat, c| {
        let ix = flat / n;
        let iy = flat % n;
        if c == 0 {
            ix as f64 * h
        } else {
            iy as f64 * h
        }
    })
}

/// One-dimensional grid factors (x then y coordinates) for a square grid.
pub fn grid_factors(n: usize) -> Vec<DVector<f64>> {
    let h = 1.0 / (n - 1) as f64;
    let coords = DVector::from_fn(n, |i, _| i as f64 * h);
    vec![coords.clone(), coords]
}

/// Truncated discrete Karhunen-Loeve basis.
#[derive(Debug, Clone)]
pub struct KleBasis {
    /// Retained eigenvalues, descending, non-negative.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors on the grid, one column per retained mode.
    pub modes: DMatrix<f64>,
    /// Mean field added to every sample.
    pub mean: DVector<f64>,
    /// Retained share of the total eigenvalue mass.
    pub energy_fraction: f64,
}

impl KleBasis {
    /// `mean + sum_i omega_i sqrt(lambda_i) phi_i`.
    pub fn sample(&self, omegas: &DVector<f64>) -> Result<DVector<f64>> {
        if omegas.len() != self.eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                op: "KleBasis::sample",
                detail: format!(
                    "{} coefficients for {} modes",
                    omegas.len(),
                    self.eigenvalues.len()
                ),
            });
        }
        let mut out = self.mean.clone();
        for (i, &w) in omegas.iter().enumerate() {
            let scale = self.eigenvalues[i].sqrt() * w;
            out.axpy(scale, &self.modes.column(i).clone_owned(), 1.0);
        }
        Ok(out)
    }
}

/// Discrete KLE of a kernel on the given points, truncated to the `d`
/// largest eigenvalues.
pub fn kle_decompose(kernel: &KernelSpec, points: &DMatrix<f64>, d: usize) -> Result<KleBasis> {
    let n = points.nrows();
    if d == 0 || d > n {
        return Err(Error::InvalidArgument(format!(
            "truncation {d} out of range 1..={n}"
        )));
    }
    let gram = kernel.gram(points, points)?;
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kle kernel matrix"));
    }
    let total: f64 = gram.trace();
    let eig = sym_eig(&gram)?;
    let mut eigenvalues = DVector::zeros(d);
    let mut modes = DMatrix::zeros(n, d);
    let max = eig.lambda[n - 1].max(0.0);
    for i in 0..d {
        let src = n - 1 - i;
        let lam = eig.lambda[src];
        if lam < -1e-10 * max {
            return Err(Error::NonFinite("kle produced a markedly negative eigenvalue"));
        }
        eigenvalues[i] = lam.max(0.0);
        modes.column_mut(i).copy_from(&eig.q.column(src));
    }
    let energy_fraction = eigenvalues.sum() / total.max(f64::MIN_POSITIVE);
    Ok(KleBasis {
        eigenvalues,
        modes,
        mean: DVector::zeros(n),
        energy_fraction,
    })
}

/// What a dataset's realizations contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    LogConductivity,
    SolutionHat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub prior: Option<PriorConfig>,
    pub generator_version: String,
    pub kle_scaling: String,
    pub kle_energy_layer1: Option<f64>,
    pub kle_energy_layer2_mean: Option<f64>,
    pub resample_events: u32,
}

/// Realizations of a scalar field on a tensor-product grid.
#[derive(Debug, Clone)]
pub struct FieldDataset {
    /// `n_xi x n_s`, one realization per row, nodes x-major.
    pub realizations: DMatrix<f64>,
    /// Spatial factor coordinates (x then y).
    pub grid: Vec<DVector<f64>>,
    pub kind: FieldKind,
    pub meta: DatasetMeta,
}

impl FieldDataset {
    pub fn n_s(&self) -> usize {
        self.grid.iter().map(|g| g.len()).product()
    }

    pub fn n_realizations(&self) -> usize {
        self.realizations.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations.ncols() != self.n_s() {
            return Err(Error::DimensionMismatch {
                op: "FieldDataset::validate",
                detail: format!(
                    "{} columns vs grid size {}",
                    self.realizations.ncols(),
                    self.n_s()
                ),
            });
        }
        if self.realizations.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field dataset"));
        }
        Ok(())
    }

    /// Keeps the first `n` realizations.
    pub fn truncated(&self, n: usize) -> Result<FieldDataset> {
        if n == 0 || n > self.n_realizations() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {n} of {} realizations",
                self.n_realizations()
            )));
        }
        Ok(FieldDataset {
            realizations: self.realizations.rows(0, n).clone_owned(),
            grid: self.grid.clone(),
            kind: self.kind,
            meta: self.meta.clone(),
        })
    }
}

fn sample_rng(seed: u64, index: u64, retry: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((index + 1) | (retry << 40));
    rng
}

/// Warped coordinates for one draw of the layer-1 coefficients
/// (`n_s x d_kl1 * 2` coefficients, one column block per coordinate).
fn warped_coordinates(
    basis1: &KleBasis,
    points: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n_s = points.nrows();
    let mut warped = DMatrix::zeros(n_s, 2);
    for c in 0..2 {
        let mut b = basis1.clone();
        b.mean = points.column(c).clone_owned();
        let coord = b.sample(&omega.column(c).clone_owned())?;
        warped.column_mut(c).copy_from(&coord);
    }
    Ok(warped)
}

/// Draws log-conductivity realizations from the implicit stochastic prior:
/// a layer-1 KLE warps the grid coordinates, then a fresh layer-2 KLE on the
/// warped coordinates generates the field. Deterministic per (seed, index);
/// degenerate warps are resampled up to 3 times.
pub fn sample_prior(cfg: &PriorConfig, n_samples: usize) -> Result<FieldDataset> {
    cfg.validate()?;
    let points = grid_points(cfg.grid_n);
    let basis1 = kle_decompose(&cfg.layer1_kernel(), &points, cfg.d_kl1)?;
    let layer2 = cfg.layer2_kernel();

    struct SampleOut {
        field: DVector<f64>,
        energy2: f64,
        retries: u32,
    }

    let samples: Vec<SampleOut> = (0..n_samples)
        .into_par_iter()
        .map(|t| -> Result<SampleOut> {
            let mut last_err = None;
            for retry in 0..4u64 {
                let mut rng = sample_rng(cfg.seed, t as u64, retry);
                let omega1 = DMatrix::from_fn(cfg.d_kl1, 2, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let warped = warped_coordinates(&basis1, &points, &omega1)?;
                match kle_decompose(&layer2, &warped, cfg.d_kl2) {
                    Ok(basis2) => {
                        let omega2 = DVector::from_fn(cfg.d_kl2, |_, _| {
                            rng.sample::<f64, _>(StandardNormal)
                        });
                        let field = basis2.sample(&omega2)?;
                        return Ok(SampleOut {
                            field,
                            energy2: basis2.energy_fraction,
                            retries: retry as u32,
                        });
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            Err(last_err.unwrap_or_else(|| {
                Error::NonFinite("layer-2 KLE failed with no recorded error")
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let n_s = cfg.grid_n * cfg.grid_n;
    let mut realizations = DMatrix::zeros(n_samples, n_s);
    let mut energy2_sum = 0.0;
    let mut resample_events = 0;
    for (t, s) in samples.iter().enumerate() {
        for p in 0..n_s {
            realizations[(t, p)] = s.field[p];
        }
        energy2_sum += s.energy2;
        resample_events += s.retries;
    }
    Ok(FieldDataset {
        realizations,
        grid: grid_factors(cfg.grid_n),
        kind: FieldKind::LogConductivity,
        meta: DatasetMeta {
            seed: cfg.seed,
            prior: Some(cfg.clone()),
            generator_version: env!("CARGO_PKG_VERSION").to_string(),
            kle_scaling: KLE_SCALING.to_string(),
            kle_energy_layer1: Some(basis1.energy_fraction),
            kle_energy_layer2_mean: Some(energy2_sum / n_samples.max(1) as f64),
            resample_events,
        },
    })
}

/// Boundary classification of a mesh node. Corners count as Dirichlet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Interior,
    /// `x_1 in {0, 1}`: `u = 1 - x_1`.
    Dirichlet,
    /// `x_2 in {0, 1}`: zero normal flux.
    Neumann,
}

/// Uniform triangular mesh on the unit square: each cell split along the
/// same diagonal, `2 (n-1)^2` elements.
#[derive(Debug, Clone)]
pub struct FemMesh {
    pub n: usize,
    pub nodes: DMatrix<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary: Vec<BoundaryKind>,
}

impl FemMesh {
    pub fn uniform(n: usize) -> Result<FemMesh> {
        if n < 2 {
            return Err(Error::InvalidArgument("mesh needs at least 2 nodes per side".into()));
        }
        let nodes = grid_points(n);
        let id = |ix: usize, iy: usize| ix * n + iy;
        let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
        for ix in 0..n - 1 {
            for iy in 0..n - 1 {
                triangles.push([id(ix, iy), id(ix + 1, iy), id(ix + 1, iy + 1)]);
                triangles.push([id(ix, iy), id(ix + 1, iy + 1), id(ix, iy + 1)]);
            }
        }
        let mut boundary = vec![BoundaryKind::Interior; n * n];
        for ix in 0..n {
            for iy in 0..n {
                let b = if ix == 0 || ix == n - 1 {
                    BoundaryKind::Dirichlet
                } else if iy == 0 || iy == n - 1 {
                    BoundaryKind::Neumann
                } else {
                    BoundaryKind::Interior
                };
                boundary[id(ix, iy)] = b;
            }
        }
        let mesh = FemMesh {
            n,
            nodes,
            triangles,
            boundary,
        };
        debug_assert!(mesh.triangles.iter().all(|t| mesh.signed_area(t) > 0.0));
        Ok(mesh)
    }

    fn signed_area(&self, t: &[usize; 3]) -> f64 {
        let p = |i: usize| (self.nodes[(t[i], 0)], self.nodes[(t[i], 1)]);
        let (x0, y0) = p(0);
        let (x1, y1) = p(1);
        let (x2, y2) = p(2);
        0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))
    }
}

/// Lower-band Cholesky solve for the SPD stiffness system.
struct BandChol {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandChol {
    /// `band_in[i * (bw+1) + (i - j)] = A[i][j]` for `0 <= i - j <= bw`.
    fn factor(n: usize, bw: usize, mut band: Vec<f64>) -> Result<BandChol> {
        let w = bw + 1;
        for j in 0..n {
            let start = j.saturating_sub(bw);
            for i in j..(j + bw + 1).min(n) {
                let mut sum = band[i * w + (i - j)];
                let kmin = start.max(i.saturating_sub(bw));
                for k in kmin..j {
                    sum -= band[i * w + (i - k)] * band[j * w + (j - k)];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::NotPositiveDefinite {
                            name: "fem stiffness".into(),
                            max_jitter: 0.0,
                        });
                    }
                    band[j * w] = sum.sqrt();
                } else {
                    band[i * w + (i - j)] = sum / band[j * w];
                }
            }
        }
        Ok(BandChol { n, bw, band })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let w = self.bw + 1;
        let mut x = b.clone();
        for i in 0..self.n {
            let mut sum = x[i];
            let kmin = i.saturating_sub(self.bw);
            for k in kmin..i {
                sum -= self.band[i * w + (i - k)] * x[k];
            }
            x[i] = sum / self.band[i * w];
        }
        for i in (0..self.n).rev() {
            let mut sum = x[i];
            let kmax = (i + self.bw + 1).min(self.n);
            for k in i + 1..kmax {
                sum -= self.band[k * w + (k - i)] * x[k];
            }
            x[i] = sum / self.band[i * w];
        }
        x
    }
}

#[derive(Debug, Clone)]
pub struct FemSolution {
    /// Nodal solution.
    pub u: DVector<f64>,
    /// `u - (1 - x_1)`.
    pub u_hat: DVector<f64>,
}

/// Piecewise-linear Galerkin solution of `-div(a grad u) = 0` with
/// `u = 1 - x_1` on the left/right edges and zero flux on top/bottom.
/// The conductivity of both triangles in a cell is the geometric mean of the
/// cell's four nodal values, which keeps the discrete operator exactly
/// equivariant under grid reflections.
pub fn fem_solve(log_a: &DVector<f64>, mesh: &FemMesh) -> Result<FemSolution> {
    let n = mesh.n;
    let n_s = n * n;
    if log_a.len() != n_s {
        return Err(Error::DimensionMismatch {
            op: "fem_solve",
            detail: format!("field has {} nodes, mesh has {}", log_a.len(), n_s),
        });
    }
    if log_a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fem conductivity field"));
    }
    let id = |ix: usize, iy: usize| ix * n + iy;

    // free dofs: all nodes with 0 < ix < n-1, numbered (ix-1) * n + iy
    let n_free = (n - 2) * n;
    let free_index = |node: usize| -> Option<usize> {
        let ix = node / n;
        let iy = node % n;
        if ix == 0 || ix == n - 1 {
            None
        } else {
            Some((ix - 1) * n + iy)
        }
    };
    let dirichlet_value = |node: usize| -> f64 { 1.0 - mesh.nodes[(node, 0)] };

    let bw = n + 1;
    let w = bw + 1;
    let mut band = vec![0.0; n_free * w];
    let mut rhs = DVector::zeros(n_free);

    // per-cell conductivity shared by its two triangles
    for ix in 0..n - 1 {
        for iy in 0..n - 1 {
            let corners = [id(ix, iy), id(ix + 1, iy), id(ix + 1, iy + 1), id(ix, iy + 1)];
            let a_cell =
                (corners.iter().map(|&c| log_a[c]).sum::<f64>() / 4.0).exp();
            for tri in [
                [corners[0], corners[1], corners[2]],
                [corners[0], corners[2], corners[3]],
            ] {
                // P1 stiffness on a triangle
                let p = |k: usize| (mesh.nodes[(tri[k], 0)], mesh.nodes[(tri[k], 1)]);
                let (x0, y0) = p(0);
                let (x1, y1) = p(1);
                let (x2, y2) = p(2);
                let area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
                let area = 0.5 * area2;
                let grads = [
                    ((y1 - y2) / area2, (x2 - x1) / area2),
                    ((y2 - y0) / area2, (x0 - x2) / area2),
                    ((y0 - y1) / area2, (x1 - x0) / area2),
                ];
                for r in 0..3 {
                    let Some(fr) = free_index(tri[r]) else { continue };
                    for c in 0..3 {
                        let k_rc =
                            a_cell * area * (grads[r].0 * grads[c].0 + grads[r].1 * grads[c].1);
                        match free_index(tri[c]) {
                            Some(fc) => {
                                if fr >= fc {
                                    band[fr * w + (fr - fc)] += k_rc;
                                }
                            }
                            None => {
                                rhs[fr] -= k_rc * dirichlet_value(tri[c]);
                            }
                        }
                    }
                }
            }
        }
    }

    let chol = BandChol::factor(n_free, bw, band)?;
    let u_free = chol.solve(&rhs);

    let mut u = DVector::zeros(n_s);
    for node in 0..n_s {
        u[node] = match free_index(node) {
            Some(f) => u_free[f],
            None => dirichlet_value(node),
        };
    }
    let u_hat = DVector::from_fn(n_s, |node, _| u[node] - (1.0 - mesh.nodes[(node, 0)]));
    Ok(FemSolution { u, u_hat })
}

/// Solves every realization of a log-conductivity dataset, returning the
/// mean-removed solutions. Enforces the discrete maximum principle
/// `u in [0, 1]` as a sanity gate on each solve.
pub fn solve_dataset(input: &FieldDataset) -> Result<FieldDataset> {
    if input.kind != FieldKind::LogConductivity {
        return Err(Error::InvalidArgument(
            "solve_dataset expects a log-conductivity dataset".into(),
        ));
    }
    input.validate()?;
    let n = input.grid[0].len();
    let mesh = FemMesh::uniform(n)?;
    let n_s = input.n_s();
    let rows: Vec<DVector<f64>> = (0..input.n_realizations())
        .into_par_iter()
        .map(|i| -> Result<DVector<f64>> {
            let log_a = DVector::from_fn(n_s, |p, _| input.realizations[(i, p)]);
            let sol = fem_solve(&log_a, &mesh)?;
            let (min, max) = sol
                .u
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if min < -1e-8 || max > 1.0 + 1e-8 {
                return Err(Error::OptimizerDiverged(format!(
                    "fem solution violates the maximum principle: range [{min}, {max}]"
                )));
            }
            Ok(sol.u_hat)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut realizations = DMatrix::zeros(input.n_realizations(), n_s);
    for (i, row) in rows.iter().enumerate() {
        for p in 0..n_s {
            realizations[(i, p)] = row[p];
        }
    }
    Ok(FieldDataset {
        realizations,
        grid: input.grid.clone(),
        kind: FieldKind::SolutionHat,
        meta: input.meta.clone(),
    })
}

/// Corner-aligned equispaced observation indices: `n_obs` points out of
/// `n_grid` per side.
pub fn obs_grid_indices(n_grid: usize, n_obs: usize) -> Result<Vec<usize>> {
    if n_obs < 2 || n_obs > n_grid {
        return Err(Error::InvalidArgument(format!(
            "observation count {n_obs} out of range 2..={n_grid}"
        )));
    }
    if (n_grid - 1) % (n_obs - 1) != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n_obs} observation points do not align with a {n_grid}-point grid"
        )));
    }
    let stride = (n_grid - 1) / (n_obs - 1);
    Ok((0..n_obs).map(|i| i * stride).collect())
}

/// Noisy observations of a nodal field on a Cartesian sub-grid.
pub struct Observations {
    /// Values at the sub-grid nodes (+ noise), row-major over factors.
    pub values: DVector<f64>,
    /// Observation coordinates per spatial factor.
    pub coords: Vec<DVector<f64>>,
    /// Flat indices into the full grid.
    pub flat_indices: Vec<usize>,
}

/// Subsamples a field at the given per-factor grid indices and adds seeded
/// white Gaussian noise.
pub fn subsample_observations(
    field: &DVector<f64>,
    grid: &[DVector<f64>],
    obs_indices: &[Vec<usize>],
    noise_sigma: f64,
    seed: u64,
) -> Result<Observations> {
    if grid.len() != obs_indices.len() {
        return Err(Error::DimensionMismatch {
            op: "subsample_observations",
            detail: "one index list per grid factor required".into(),
        });
    }
    for (g, idx) in grid.iter().zip(obs_indices) {
        if idx.iter().any(|&i| i >= g.len()) {
            return Err(Error::InvalidArgument(
                "observation index outside the grid".into(),
            ));
        }
    }
    let sizes: Vec<usize> = grid.iter().map(|g| g.len()).collect();
    let obs_sizes: Vec<usize> = obs_indices.iter().map(|v| v.len()).collect();
    let n_obs: usize = obs_sizes.iter().product();
    let strides: Vec<usize> = {
        let mut s = vec![1usize; sizes.len()];
        for k in (0..sizes.len().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * sizes[k + 1];
        }
        s
    };
    let mut flat_indices = Vec::with_capacity(n_obs);
    for flat in 0..n_obs {
        let mut rem = flat;
        let mut full = 0usize;
        for k in (0..obs_sizes.len()).rev() {
            let ik = rem % obs_sizes[k];
            rem /= obs_sizes[k];
            full += obs_indices[k][ik] * strides[k];
        }
        flat_indices.push(full);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0b5e_57a7);
    let values = DVector::from_fn(n_obs, |i, _| {
        let noise: f64 = rng.sample(StandardNormal);
        field[flat_indices[i]] + noise_sigma * noise
    });
    let coords = grid
        .iter()
        .zip(obs_indices)
        .map(|(g, idx)| DVector::from_fn(idx.len(), |i, _| g[idx[i]]))
        .collect();
    Ok(Observations {
        values,
        coords,
        flat_indices,
    })
}
