//! Flat key-value experiment configuration with environment-variable
//! overrides (prefix `SGPLVM_`). Unknown keys are rejected so sweep files
//! stay honest.

use serde::Serialize;
use sgplvm_core::error::{Error, Result};
use sgplvm_core::opt::OptimizerSettings;
use sgplvm_core::pipeline::{StochasticKernel, SurrogateConfig};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PipelineKind {
    TwoModel,
    Joint,
    PcaBaseline,
}

impl PipelineKind {
    pub fn variant_name(self, kernel: StochasticKernel) -> String {
        match self {
            PipelineKind::PcaBaseline => "2M-PCA".to_string(),
            PipelineKind::TwoModel => format!("2M-{}", kernel_tag(kernel)),
            PipelineKind::Joint => format!("JM-{}", kernel_tag(kernel)),
        }
    }
}

fn kernel_tag(kernel: StochasticKernel) -> &'static str {
    match kernel {
        StochasticKernel::Linear => "Lin",
        StochasticKernel::Rbf => "RBF",
        StochasticKernel::Sum => "Sum",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub pipeline: PipelineKind,
    pub kernel: StochasticKernel,
    pub n_xi: Vec<usize>,
    pub grid_n: usize,
    pub d_kl1: usize,
    pub d_kl2: usize,
    pub m_xi: Option<usize>,
    pub d_xi: Option<usize>,
    pub opt_max_iters: usize,
    pub opt_tol: f64,
    pub infer_restarts: usize,
    pub infer_max_iters: usize,
    pub n_mog: usize,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    pub obs_n: usize,
    pub noise_frac: f64,
    pub out_dir: PathBuf,
    pub constant_a: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pipeline: PipelineKind::TwoModel,
            kernel: StochasticKernel::Sum,
            n_xi: vec![16, 32, 64],
            grid_n: 33,
            d_kl1: 16,
            d_kl2: 32,
            m_xi: None,
            d_xi: None,
            opt_max_iters: 2000,
            opt_tol: 1e-6,
            infer_restarts: 5,
            infer_max_iters: 200,
            n_mog: 100,
            seeds: vec![0],
            n_test: 50,
            obs_n: 5,
            noise_frac: 0.1,
            out_dir: PathBuf::from("runs/out"),
            constant_a: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses the config file text and applies `SGPLVM_*` environment
    /// overrides. Later occurrences win; unknown keys error out.
    pub fn parse(text: &str, env: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        for (key, value) in env {
            if let Some(stripped) = key.strip_prefix("SGPLVM_") {
                cfg.apply(&stripped.to_lowercase(), value.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key `{key}`: invalid {what} `{value}`"));
        match key {
            "pipeline" => {
                self.pipeline = match value {
                    "two_model" => PipelineKind::TwoModel,
                    "joint" => PipelineKind::Joint,
                    "pca_baseline" => PipelineKind::PcaBaseline,
                    _ => return Err(bad("pipeline")),
                }
            }
            "kernel" => {
                self.kernel = match value {
                    "linear" => StochasticKernel::Linear,
                    "rbf" => StochasticKernel::Rbf,
                    "sum" => StochasticKernel::Sum,
                    _ => return Err(bad("kernel")),
                }
            }
            "n_xi" => self.n_xi = parse_list(value).ok_or_else(|| bad("integer list"))?,
            "grid_n" => self.grid_n = value.parse().map_err(|_| bad("integer"))?,
            "d_kl1" => self.d_kl1 = value.parse().map_err(|_| bad("integer"))?,
            "d_kl2" => self.d_kl2 = value.parse().map_err(|_| bad("integer"))?,
            "m_xi" => self.m_xi = parse_optional(value).ok_or_else(|| bad("integer or `default`"))?,
            "d_xi" => self.d_xi = parse_optional(value).ok_or_else(|| bad("integer or `default`"))?,
            "opt_max_iters" => self.opt_max_iters = value.parse().map_err(|_| bad("integer"))?,
            "opt_tol" => self.opt_tol = value.parse().map_err(|_| bad("float"))?,
            "infer_restarts" => self.infer_restarts = value.parse().map_err(|_| bad("integer"))?,
            "infer_max_iters" => self.infer_max_iters = value.parse().map_err(|_| bad("integer"))?,
            "n_mog" => self.n_mog = value.parse().map_err(|_| bad("integer"))?,
            "seeds" => {
                self.seeds = parse_list(value).ok_or_else(|| bad("integer list"))?;
            }
            "n_test" => self.n_test = value.parse().map_err(|_| bad("integer"))?,
            "obs_n" => self.obs_n = value.parse().map_err(|_| bad("integer"))?,
            "noise_frac" => self.noise_frac = value.parse().map_err(|_| bad("float"))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "constant_a" => {
                self.constant_a = value.parse().map_err(|_| bad("bool"))?;
            }
            _ => {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_xi.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("n_xi and seeds must be non-empty".into()));
        }
        if self.grid_n < 3 {
            return Err(Error::Config("grid_n must be at least 3".into()));
        }
        let n_s = self.grid_n * self.grid_n;
        if self.d_kl1 == 0 || self.d_kl1 > n_s || self.d_kl2 == 0 || self.d_kl2 > n_s {
            return Err(Error::Config(format!(
                "KL truncations must lie in 1..={n_s}"
            )));
        }
        if self.obs_n < 2 || (self.grid_n - 1) % (self.obs_n - 1) != 0 {
            return Err(Error::Config(format!(
                "obs_n = {} does not align with grid_n = {}",
                self.obs_n, self.grid_n
            )));
        }
        if self.noise_frac < 0.0 || !self.noise_frac.is_finite() {
            return Err(Error::Config("noise_frac must be non-negative".into()));
        }
        if self.opt_tol <= 0.0 {
            return Err(Error::Config("opt_tol must be positive".into()));
        }
        if self.n_mog == 0 {
            return Err(Error::Config("n_mog must be at least 1".into()));
        }
        Ok(())
    }

    pub fn surrogate_config(&self, seed: u64) -> SurrogateConfig {
        SurrogateConfig {
            kernel: self.kernel,
            d_xi: self.d_xi,
            m_xi: self.m_xi,
            optimizer: OptimizerSettings {
                max_iters: self.opt_max_iters,
                tol: self.opt_tol,
                ..OptimizerSettings::default()
            },
            seed,
            ..SurrogateConfig::default()
        }
    }

    pub fn variant_name(&self) -> String {
        self.pipeline.variant_name(self.kernel)
    }

    /// Stable hash of the effective configuration.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        hex::encode(hasher.finalize())
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Option<Vec<T>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return None;
    }
    items.into_iter().map(|s| s.parse().ok()).collect()
}

fn parse_optional(value: &str) -> Option<Option<usize>> {
    if value == "default" || value == "0" {
        Some(None)
    } else {
        value.parse().ok().map(Some)
    }
}
