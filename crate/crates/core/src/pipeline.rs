//! Orchestration of the two-model and jointly-trained surrogate approaches:
//! training wiring, forward prediction, inverse prediction, the optional PCA
//! input model, and metric computation.
//!
//! Input fields are log-conductivities, outputs are mean-removed solutions;
//! both arrive as [`FieldDataset`]s from the data module.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::FieldDataset;
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, VariationalLatentPosterior};
use crate::model::{
    inducing_init_subset, pca_latent_init, SgplvmModel, TrainOutcome, TrainableFlags,
};
use crate::opt::OptimizerSettings;
use crate::predictive::{
    infer_latent, predict_marginalized, InferSettings, PredictOptions, PredictiveMoments,
    TestLatentPosterior,
};

/// Stochastic-kernel choice for a surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StochasticKernel {
    Rbf,
    Linear,
    Sum,
}

impl StochasticKernel {
    fn build(self, d_xi: usize, total_variance: f64) -> KernelSpec {
        let v = total_variance.max(1e-12);
        // whitened latents sit at squared distances ~2 d_xi, so ARD
        // lengthscales start at sqrt(d_xi) to keep initial correlations alive
        let l0 = (d_xi as f64).sqrt();
        match self {
            StochasticKernel::Rbf => KernelSpec::rbf_ard(v, vec![l0; d_xi]),
            StochasticKernel::Linear => KernelSpec::linear(vec![v / d_xi as f64; d_xi]),
            StochasticKernel::Sum => KernelSpec::sum(
                0.5 * v,
                vec![l0; d_xi],
                vec![0.5 * v / d_xi as f64; d_xi],
            ),
        }
    }
}

/// Construction and training choices shared by the pipelines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub kernel: StochasticKernel,
    /// Stochastic kernel of the two-model output submodel.
    pub output_kernel: StochasticKernel,
    /// Latent dimension; defaults to `min(n_xi / 2, 128)`.
    pub d_xi: Option<usize>,
    /// Stochastic inducing count; defaults to `min(n_xi / 2, 128)`.
    pub m_xi: Option<usize>,
    /// Initial latent posterior variance.
    pub s_init: f64,
    /// Initial lengthscale of the spatial exponential kernels.
    pub spatial_lengthscale_init: f64,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            kernel: StochasticKernel::Sum,
            output_kernel: StochasticKernel::Rbf,
            d_xi: None,
            m_xi: None,
            s_init: 0.1,
            spatial_lengthscale_init: 0.2,
            optimizer: OptimizerSettings::default(),
            seed: 0,
        }
    }
}

fn default_width(n_xi: usize) -> usize {
    (n_xi / 2).clamp(1, 128)
}

/// Reshapes a dataset into the model's `n x 1` column, rows ordered
/// (realization, spatial) to match the Kronecker layout.
pub fn dataset_column(data: &FieldDataset) -> DMatrix<f64> {
    let n_xi = data.n_realizations();
    let n_s = data.n_s();
    DMatrix::from_fn(n_xi * n_s, 1, |row, _| {
        data.realizations[(row / n_s, row % n_s)]
    })
}

fn grid_matrices(data: &FieldDataset) -> Vec<DMatrix<f64>> {
    data.grid
        .iter()
        .map(|g| DMatrix::from_fn(g.len(), 1, |i, _| g[i]))
        .collect()
}

fn population_variance(y: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Builds an untrained SGPLVM for a dataset column: PCA-initialized latents,
/// inducing inputs as a seeded subset of the latent means, noise precision
/// starting at `10 / var(Y)`. Starting the precision higher routinely tips
/// joint optimization into the signal-collapse optimum (kernel variance to
/// zero, noise soaking up everything), so the start is kept at moderate SNR.
pub fn build_sgplvm(
    y: DMatrix<f64>,
    x_s: Vec<DMatrix<f64>>,
    n_xi: usize,
    cfg: &SurrogateConfig,
) -> Result<SgplvmModel> {
    let d_xi = cfg.d_xi.unwrap_or_else(|| default_width(n_xi));
    let m_xi = cfg.m_xi.unwrap_or_else(|| default_width(n_xi)).min(n_xi);
    let mu = pca_latent_init(&y, n_xi, d_xi, cfg.seed)?;
    let q = VariationalLatentPosterior::new(
        mu.clone(),
        DMatrix::from_element(n_xi, d_xi, cfg.s_init),
    )?;
    let z = inducing_init_subset(&mu, m_xi, cfg.seed);
    let var_y = population_variance(&y);
    let kernel_xi = cfg.kernel.build(d_xi, var_y);
    let kernels_s = x_s
        .iter()
        .map(|_| KernelSpec::exponential(cfg.spatial_lengthscale_init))
        .collect();
    let beta = 10.0 / var_y.max(1e-12);
    SgplvmModel::new(
        y,
        x_s,
        q,
        z,
        kernel_xi,
        kernels_s,
        beta,
        TrainableFlags::default(),
    )
}

/// Deterministic linear dimensionality reduction used as the comparison
/// input model: orthonormal components, whitened scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaInputModel {
    pub mean: DVector<f64>,
    /// `n_s x d_xi`, orthonormal columns.
    pub components: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// Per-component whitening scale applied to raw scores.
    pub score_scale: DVector<f64>,
    pub d_xi: usize,
}

impl PcaInputModel {
    pub fn fit(data: &FieldDataset, d_xi: usize) -> Result<PcaInputModel> {
        let n_xi = data.n_realizations();
        let n_s = data.n_s();
        let mut mean = DVector::zeros(n_s);
        for p in 0..n_s {
            mean[p] = (0..n_xi).map(|i| data.realizations[(i, p)]).sum::<f64>() / n_xi as f64;
        }
        let mut centered = DMatrix::zeros(n_xi, n_s);
        for i in 0..n_xi {
            for p in 0..n_s {
                centered[(i, p)] = data.realizations[(i, p)] - mean[p];
            }
        }
        let gram = &centered * centered.transpose();
        let eig = crate::linalg::sym_eig(&gram)?;
        let max_lambda = eig.lambda[n_xi - 1].max(0.0);
        let mut kept = 0usize;
        for i in 0..d_xi.min(n_xi) {
            if eig.lambda[n_xi - 1 - i] > 1e-12 * max_lambda {
                kept += 1;
            }
        }
        if kept == 0 {
            return Err(Error::InvalidArgument(
                "pca: data has no variance to retain".into(),
            ));
        }
        let mut components = DMatrix::zeros(n_s, kept);
        let mut singular_values = DVector::zeros(kept);
        let mut score_scale = DVector::zeros(kept);
        for q in 0..kept {
            let src = n_xi - 1 - q;
            let sigma = eig.lambda[src].max(0.0).sqrt();
            singular_values[q] = sigma;
            let comp = centered.transpose() * eig.q.column(src) / sigma;
            components.column_mut(q).copy_from(&comp);
            // raw score std over realizations is sigma / sqrt(n_xi)
            score_scale[q] = (n_xi as f64).sqrt() / sigma;
        }
        Ok(PcaInputModel {
            mean,
            components,
            singular_values,
            score_scale,
            d_xi: kept,
        })
    }

    /// Whitened least-squares projection of a field.
    pub fn encode(&self, field: &DVector<f64>) -> Result<DVector<f64>> {
        if field.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                op: "PcaInputModel::encode",
                detail: format!("field has {} nodes, model {}", field.len(), self.mean.len()),
            });
        }
        let centered = field - &self.mean;
        let raw = self.components.transpose() * centered;
        Ok(DVector::from_fn(self.d_xi, |q, _| raw[q] * self.score_scale[q]))
    }

    /// Linear reconstruction of the field mean from whitened scores.
    pub fn decode_mean(&self, latent: &DVector<f64>) -> DVector<f64> {
        let mut field = self.mean.clone();
        for q in 0..self.d_xi {
            let coeff = latent[q] / self.score_scale[q];
            field.axpy(coeff, &self.components.column(q).clone_owned(), 1.0);
        }
        field
    }

    /// Propagates diagonal latent variances through the linear decoder.
    pub fn decode_variance(&self, s: &DVector<f64>) -> DVector<f64> {
        let n_s = self.mean.len();
        DVector::from_fn(n_s, |p, _| {
            (0..self.d_xi)
                .map(|q| {
                    let w = self.components[(p, q)] / self.score_scale[q];
                    s[q] * w * w
                })
                .sum()
        })
    }

    /// Latent posterior rows for the output model: whitened scores for every
    /// realization, near-deterministic variances.
    pub fn latent_posterior(&self, data: &FieldDataset) -> Result<VariationalLatentPosterior> {
        let n_xi = data.n_realizations();
        let n_s = data.n_s();
        let mut mu = DMatrix::zeros(n_xi, self.d_xi);
        for i in 0..n_xi {
            let field = DVector::from_fn(n_s, |p, _| data.realizations[(i, p)]);
            let scores = self.encode(&field)?;
            for q in 0..self.d_xi {
                mu[(i, q)] = scores[q];
            }
        }
        VariationalLatentPosterior::new(mu, DMatrix::from_element(n_xi, self.d_xi, PCA_LATENT_VAR))
    }
}

/// Near-deterministic posterior variance assigned to PCA latents.
pub const PCA_LATENT_VAR: f64 = 1e-6;

/// Input-side model of the two-model approach.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum InputModel {
    Sgplvm(SgplvmModel),
    Pca(PcaInputModel),
}

/// Two SGPLVM submodels sharing latent posteriors on solved realizations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoModelSurrogate {
    pub input_model: InputModel,
    pub output_model: SgplvmModel,
    /// Indices of the input realizations that were solved (rows kept in the
    /// output model).
    pub pruning: Vec<usize>,
}

/// A single SGPLVM over the concatenated (input, rescaled output) columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSurrogate {
    pub model: SgplvmModel,
    /// Scale that gave the output column unit variance.
    pub output_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TwoModelTraining {
    pub surrogate: TwoModelSurrogate,
    pub input_training: Option<TrainOutcome>,
    pub output_training: TrainOutcome,
}

/// Trains the two-model approach: full training of the input model, then
/// output-model training over inducing inputs and hyperparameters with the
/// copied latent posterior frozen.
pub fn train_two_model(
    data_in: &FieldDataset,
    data_out: &FieldDataset,
    solved: &[usize],
    cfg: &SurrogateConfig,
    use_pca_input: bool,
) -> Result<TwoModelTraining> {
    if solved.is_empty() {
        return Err(Error::InvalidArgument(
            "two-model training requires at least one solved realization".into(),
        ));
    }
    if solved.iter().any(|&i| i >= data_in.n_realizations()) {
        return Err(Error::InvalidArgument(
            "solved indices must reference input realizations".into(),
        ));
    }
    if data_out.n_realizations() != solved.len() {
        return Err(Error::DimensionMismatch {
            op: "train_two_model",
            detail: format!(
                "{} output realizations for {} solved indices",
                data_out.n_realizations(),
                solved.len()
            ),
        });
    }
    data_in.validate()?;
    data_out.validate()?;

    // input model
    let (input_model, input_training, latents) = if use_pca_input {
        let d_xi = cfg
            .d_xi
            .unwrap_or_else(|| default_width(data_in.n_realizations()));
        let pca = PcaInputModel::fit(data_in, d_xi)?;
        let q = pca.latent_posterior(data_in)?;
        (InputModel::Pca(pca), None, q)
    } else {
        let mut m = build_sgplvm(
            dataset_column(data_in),
            grid_matrices(data_in),
            data_in.n_realizations(),
            cfg,
        )?;
        let outcome = m.train(&cfg.optimizer)?;
        let q = m.q.clone();
        (InputModel::Sgplvm(m), Some(outcome), q)
    };

    // copy + prune the latent posterior rows for solved realizations
    let d_xi = latents.dim();
    let mut mu = DMatrix::zeros(solved.len(), d_xi);
    let mut s = DMatrix::zeros(solved.len(), d_xi);
    for (row, &src) in solved.iter().enumerate() {
        for c in 0..d_xi {
            mu[(row, c)] = latents.mu[(src, c)];
            s[(row, c)] = latents.s[(src, c)];
        }
    }
    let q_out = VariationalLatentPosterior::new(mu.clone(), s)?;

    // output model: RBF stochastic kernel, frozen latents
    let y_out = dataset_column(data_out);
    let var_y = population_variance(&y_out);
    let m_xi = cfg
        .m_xi
        .unwrap_or_else(|| default_width(data_in.n_realizations()))
        .min(solved.len());
    let z = inducing_init_subset(&mu, m_xi, cfg.seed ^ 0x007_007);
    let kernels_s = data_out
        .grid
        .iter()
        .map(|_| KernelSpec::exponential(cfg.spatial_lengthscale_init))
        .collect();
    let mut output_model = SgplvmModel::new(
        y_out,
        grid_matrices(data_out),
        q_out,
        z,
        cfg.output_kernel.build(d_xi, var_y),
        kernels_s,
        10.0 / var_y.max(1e-12),
        TrainableFlags {
            latents: false,
            ..TrainableFlags::default()
        },
    )?;
    let output_training = output_model.train(&cfg.optimizer)?;

    Ok(TwoModelTraining {
        surrogate: TwoModelSurrogate {
            input_model,
            output_model,
            pruning: solved.to_vec(),
        },
        input_training,
        output_training,
    })
}

/// A field observed on a Cartesian sub-grid.
#[derive(Debug, Clone)]
pub struct FieldObservation {
    /// Values, row-major over the observation factors.
    pub values: DVector<f64>,
    /// Observation coordinates per spatial factor.
    pub coords: Vec<DVector<f64>>,
}

impl FieldObservation {
    pub fn coords_matrices(&self) -> Vec<DMatrix<f64>> {
        self.coords
            .iter()
            .map(|c| DMatrix::from_fn(c.len(), 1, |i, _| c[i]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CasePrediction {
    pub moments: PredictiveMoments,
    pub latent: TestLatentPosterior,
    pub objective: f64,
}

/// Forward prediction with the two-model approach: infer the latent from
/// the input observation (noise precision tied to the input model), then
/// marginalize the output model over it.
pub fn forward_predict_two_model(
    s: &TwoModelSurrogate,
    input_obs: &FieldObservation,
    x_s_out_star: &[DMatrix<f64>],
    infer: &InferSettings,
    predict: &PredictOptions,
) -> Result<CasePrediction> {
    let latent = match &s.input_model {
        InputModel::Sgplvm(input) => {
            let (_, cache) = input.collapsed_bound()?;
            let y_star = DMatrix::from_column_slice(input_obs.values.len(), 1, input_obs.values.as_slice());
            let settings = InferSettings {
                optimize_beta_star: false,
                ..infer.clone()
            };
            let (q_star, _) = infer_latent(
                input,
                &cache,
                &y_star,
                &input_obs.coords_matrices(),
                &[true],
                &settings,
            )?;
            q_star
        }
        InputModel::Pca(pca) => {
            let scores = pca.encode(&input_obs.values)?;
            TestLatentPosterior::new(
                DMatrix::from_fn(1, pca.d_xi, |_, c| scores[c]),
                DMatrix::from_element(1, pca.d_xi, PCA_LATENT_VAR),
                s.output_model.beta,
            )?
        }
    };
    let (_, out_cache) = s.output_model.collapsed_bound()?;
    let transferred = TestLatentPosterior {
        beta_star: s.output_model.beta,
        ..latent.clone()
    };
    let moments = predict_marginalized(
        &s.output_model,
        &out_cache,
        &transferred,
        x_s_out_star,
        predict,
    )?;
    Ok(CasePrediction {
        moments,
        latent,
        objective: 0.0,
    })
}

/// Inverse prediction with the two-model approach: infer the latent from the
/// noisy partial output observation with the observation precision
/// optimized, then reconstruct the input field.
pub fn inverse_predict_two_model(
    s: &TwoModelSurrogate,
    y_obs: &FieldObservation,
    x_s_in_star: &[DMatrix<f64>],
    infer: &InferSettings,
    predict: &PredictOptions,
) -> Result<CasePrediction> {
    let (_, out_cache) = s.output_model.collapsed_bound()?;
    let y_star = DMatrix::from_column_slice(y_obs.values.len(), 1, y_obs.values.as_slice());
    let settings = InferSettings {
        optimize_beta_star: true,
        ..infer.clone()
    };
    let (q_star, objective) = infer_latent(
        &s.output_model,
        &out_cache,
        &y_star,
        &y_obs.coords_matrices(),
        &[true],
        &settings,
    )?;
    let moments = match &s.input_model {
        InputModel::Sgplvm(input) => {
            let (_, in_cache) = input.collapsed_bound()?;
            let transferred = TestLatentPosterior {
                beta_star: input.beta,
                ..q_star.clone()
            };
            predict_marginalized(input, &in_cache, &transferred, x_s_in_star, predict)?
        }
        InputModel::Pca(pca) => {
            let mu = DVector::from_fn(pca.d_xi, |q, _| q_star.mu_star[(0, q)]);
            let sv = DVector::from_fn(pca.d_xi, |q, _| q_star.s_star[(0, q)]);
            let mean = pca.decode_mean(&mu);
            let var = pca.decode_variance(&sv);
            let n_s = mean.len();
            PredictiveMoments {
                mean: DMatrix::from_fn(n_s, 1, |i, _| mean[i]),
                variance: DMatrix::from_fn(n_s, 1, |i, _| var[i].max(f64::MIN_POSITIVE)),
                covariance: None,
            }
        }
    };
    Ok(CasePrediction {
        moments,
        latent: q_star,
        objective,
    })
}

/// Trains the jointly-trained approach on concatenated input/output columns.
/// Requires matching grids and equal realization counts.
pub fn train_joint(
    data_in: &FieldDataset,
    data_out: &FieldDataset,
    cfg: &SurrogateConfig,
) -> Result<(JointSurrogate, TrainOutcome)> {
    if data_in.n_realizations() != data_out.n_realizations() {
        return Err(Error::InvalidArgument(
            "joint training requires equal input and output realization counts \
             (every input must be solved)"
                .into(),
        ));
    }
    if data_in.grid.len() != data_out.grid.len()
        || data_in
            .grid
            .iter()
            .zip(&data_out.grid)
            .any(|(a, b)| a != b)
    {
        return Err(Error::InvalidArgument(
            "joint training requires identical input and output spatial grids".into(),
        ));
    }
    data_in.validate()?;
    data_out.validate()?;

    let y_in = dataset_column(data_in);
    let y_out_raw = dataset_column(data_out);
    let output_scale = population_variance(&y_out_raw).sqrt().max(1e-12);
    let n = y_in.nrows();
    let y = DMatrix::from_fn(n, 2, |i, j| {
        if j == 0 {
            y_in[(i, 0)]
        } else {
            y_out_raw[(i, 0)] / output_scale
        }
    });
    let mut model = build_sgplvm(y, grid_matrices(data_in), data_in.n_realizations(), cfg)?;
    let outcome = model.train(&cfg.optimizer)?;
    Ok((
        JointSurrogate {
            model,
            output_scale,
        },
        outcome,
    ))
}

/// Forward prediction with the joint model: infer the latent from the input
/// column, predict the output column, undo the output rescaling.
pub fn forward_predict_joint(
    s: &JointSurrogate,
    input_obs: &FieldObservation,
    x_s_out_star: &[DMatrix<f64>],
    infer: &InferSettings,
    predict: &PredictOptions,
) -> Result<CasePrediction> {
    joint_predict(s, input_obs, x_s_out_star, infer, predict, true)
}

/// Inverse prediction with the joint model: infer the latent from the noisy
/// output column with the observation precision optimized, predict the input
/// column.
pub fn inverse_predict_joint(
    s: &JointSurrogate,
    y_obs: &FieldObservation,
    x_s_in_star: &[DMatrix<f64>],
    infer: &InferSettings,
    predict: &PredictOptions,
) -> Result<CasePrediction> {
    joint_predict(s, y_obs, x_s_in_star, infer, predict, false)
}

fn joint_predict(
    s: &JointSurrogate,
    obs: &FieldObservation,
    x_s_star: &[DMatrix<f64>],
    infer: &InferSettings,
    predict: &PredictOptions,
    forward: bool,
) -> Result<CasePrediction> {
    let (_, cache) = s.model.collapsed_bound()?;
    let n_obs = obs.values.len();
    let (obs_col, mask) = if forward {
        (0usize, [true, false])
    } else {
        (1usize, [false, true])
    };
    let mut y_star = DMatrix::zeros(n_obs, 2);
    for i in 0..n_obs {
        let v = if forward {
            obs.values[i]
        } else {
            obs.values[i] / s.output_scale
        };
        y_star[(i, obs_col)] = v;
    }
    let settings = InferSettings {
        optimize_beta_star: !forward,
        ..infer.clone()
    };
    let (q_star, objective) = infer_latent(
        &s.model,
        &cache,
        &y_star,
        &obs.coords_matrices(),
        &mask,
        &settings,
    )?;
    let transferred = TestLatentPosterior {
        beta_star: s.model.beta,
        ..q_star.clone()
    };
    let both = predict_marginalized(&s.model, &cache, &transferred, x_s_star, predict)?;
    let n_star = both.mean.nrows();
    let (col, scale) = if forward {
        (1usize, s.output_scale)
    } else {
        (0usize, 1.0)
    };
    let moments = PredictiveMoments {
        mean: DMatrix::from_fn(n_star, 1, |i, _| both.mean[(i, col)] * scale),
        variance: DMatrix::from_fn(n_star, 1, |i, _| both.variance[(i, col)] * scale * scale),
        covariance: None,
    };
    Ok(CasePrediction {
        moments,
        latent: q_star,
        objective,
    })
}

/// Scalar prediction metrics against a ground-truth field.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Median negative log predictive density over spatial points.
    pub mnlp: f64,
    /// Median log predictive density (the raw sign convention).
    pub mlp: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// RMSE plus median (negative) log predictive probability.
pub fn metrics(mean: &DVector<f64>, variance: &DVector<f64>, truth: &DVector<f64>) -> Result<Metrics> {
    if mean.len() != truth.len() || variance.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            op: "metrics",
            detail: format!(
                "mean {}, variance {}, truth {}",
                mean.len(),
                variance.len(),
                truth.len()
            ),
        });
    }
    if variance.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument(
            "metrics require strictly positive predictive variances".into(),
        ));
    }
    let n = truth.len() as f64;
    let mut sq = 0.0;
    let mut log_probs = Vec::with_capacity(truth.len());
    let two_pi = 2.0 * std::f64::consts::PI;
    for i in 0..truth.len() {
        let d = mean[i] - truth[i];
        sq += d * d;
        log_probs.push(-0.5 * (two_pi * variance[i]).ln() - d * d / (2.0 * variance[i]));
    }
    let mlp = median(&mut log_probs);
    Ok(Metrics {
        rmse: (sq / n).sqrt(),
        mnlp: -mlp,
        mlp,
    })
}

/// Fraction of points whose truth lies within `k` posterior standard
/// deviations of the predictive mean.
pub fn coverage(mean: &DVector<f64>, variance: &DVector<f64>, truth: &DVector<f64>, k: f64) -> f64 {
    let mut hits = 0usize;
    for i in 0..truth.len() {
        if (truth[i] - mean[i]).abs() <= k * variance[i].sqrt() {
            hits += 1;
        }
    }
    hits as f64 / truth.len() as f64
}
