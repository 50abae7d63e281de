//! Command-line harness: dataset generation, surrogate training,
//! forward/inverse prediction sweeps, table aggregation, and the built-in
//! verification suites.

mod config;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use config::{ExperimentConfig, PipelineKind};
use sgplvm_core::data::{
    obs_grid_indices, sample_prior, solve_dataset, subsample_observations, FieldDataset,
    FieldKind, PriorConfig,
};
use sgplvm_core::error::{Error, Result};
use sgplvm_core::io::{
    dataset_hash, load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_atomic,
    Checkpoint, CheckpointHeader,
};
use sgplvm_core::pipeline::{
    coverage, forward_predict_joint, forward_predict_two_model, inverse_predict_joint,
    inverse_predict_two_model, metrics, train_joint, train_two_model, FieldObservation,
    InputModel,
};
use sgplvm_core::predictive::{InferSettings, PredictOptions};

#[derive(Parser)]
#[command(
    name = "sgplvm",
    about = "Kronecker-structured GP-LVM surrogates for forward and inverse elliptic problems",
    version
)]
struct Cli {
    /// Worker threads for data generation and per-case evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample log-conductivity fields from the stochastic prior and solve
    /// them with the FEM code.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the first config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured pipeline on a generated dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train_in/train_out datasets (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Number of training realizations (defaults to the largest n_xi).
        #[arg(long)]
        n_xi: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on test cases.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `forward` or `inverse`.
        #[arg(long)]
        direction: String,
        #[arg(long)]
        config: PathBuf,
        /// Directory holding test_in/test_out datasets.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate result files into a CSV table (mean and std per
    /// n_xi/variant).
    Table {
        #[arg(long)]
        out: PathBuf,
        results: Vec<PathBuf>,
    },
    /// Run the dense-oracle and gradient verification suites.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match run(cli.cmd) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { config, seed, out } => cmd_generate(&config, seed, out),
        Cmd::Train {
            config,
            data,
            n_xi,
            seed,
            out,
        } => cmd_train(&config, &data, n_xi, seed, out),
        Cmd::Predict {
            checkpoint,
            direction,
            config,
            data,
            seed,
            out,
        } => cmd_predict(&checkpoint, &direction, &config, &data, seed, out),
        Cmd::Table { out, results } => cmd_table(&out, &results),
        Cmd::Verify { seed } => cmd_verify(seed.unwrap_or(0)),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let env: BTreeMap<String, String> = std::env::vars().collect();
    ExperimentConfig::parse(&text, &env)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    dataset_hashes: Vec<String>,
    code_version: &'a str,
    seeds: Vec<u64>,
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::Malformed {
        path: "manifest".into(),
        detail: e.to_string(),
    })?;
    write_atomic(&dir.join("manifest.json"), &json)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn cmd_generate(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let pool = *cfg.n_xi.iter().max().expect("validated non-empty");
    let started = Instant::now();
    for &s in &cfg.seeds {
        let dir = out_dir.join(format!("seed{s}"));
        ensure_dir(&dir)?;
        let prior = PriorConfig {
            d_kl1: cfg.d_kl1,
            d_kl2: cfg.d_kl2,
            grid_n: cfg.grid_n,
            seed: s,
            ..PriorConfig::default()
        };
        let total = pool + cfg.n_test;
        let all_in = if cfg.constant_a {
            constant_dataset(&prior, total)?
        } else {
            sample_prior(&prior, total)?
        };
        let all_out = solve_dataset(&all_in)?;
        let split = |data: &FieldDataset, from: usize, count: usize| FieldDataset {
            realizations: data.realizations.rows(from, count).clone_owned(),
            grid: data.grid.clone(),
            kind: data.kind,
            meta: data.meta.clone(),
        };
        save_dataset(&split(&all_in, 0, pool), &dir.join("train_in"))?;
        save_dataset(&split(&all_out, 0, pool), &dir.join("train_out"))?;
        save_dataset(&split(&all_in, pool, cfg.n_test), &dir.join("test_in"))?;
        save_dataset(&split(&all_out, pool, cfg.n_test), &dir.join("test_out"))?;
        let hashes = vec![
            dataset_hash(&dir.join("train_in"))?,
            dataset_hash(&dir.join("train_out"))?,
            dataset_hash(&dir.join("test_in"))?,
            dataset_hash(&dir.join("test_out"))?,
        ];
        write_manifest(
            &dir,
            &Manifest {
                command: "generate",
                config_hash: cfg.config_hash(),
                dataset_hashes: hashes,
                code_version: env!("CARGO_PKG_VERSION"),
                seeds: vec![s],
            },
        )?;
        println!(
            "seed {s}: {} train + {} test realizations on a {}x{} grid \
             (layer-1 energy {:.4}, layer-2 mean energy {:.4}, resamples {})",
            pool,
            cfg.n_test,
            cfg.grid_n,
            cfg.grid_n,
            all_in.meta.kle_energy_layer1.unwrap_or(f64::NAN),
            all_in.meta.kle_energy_layer2_mean.unwrap_or(f64::NAN),
            all_in.meta.resample_events,
        );
    }
    println!("generate finished in {:.1?}", started.elapsed());
    Ok(())
}

fn constant_dataset(prior: &PriorConfig, n: usize) -> Result<FieldDataset> {
    prior.validate()?;
    let n_s = prior.grid_n * prior.grid_n;
    Ok(FieldDataset {
        realizations: DMatrix::zeros(n, n_s),
        grid: sgplvm_core::data::grid_factors(prior.grid_n),
        kind: FieldKind::LogConductivity,
        meta: sgplvm_core::data::DatasetMeta {
            seed: prior.seed,
            prior: Some(prior.clone()),
            generator_version: env!("CARGO_PKG_VERSION").to_string(),
            kle_scaling: sgplvm_core::data::KLE_SCALING.to_string(),
            kle_energy_layer1: None,
            kle_energy_layer2_mean: None,
            resample_events: 0,
        },
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(
    config: &Path,
    data: &Path,
    n_xi: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let n_xi = n_xi.unwrap_or(*cfg.n_xi.iter().max().unwrap());
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    ensure_dir(&out_dir)?;

    let train_in = load_dataset(&data.join("train_in"))?.truncated(n_xi)?;
    let train_out = load_dataset(&data.join("train_out"))?.truncated(n_xi)?;
    let hashes = vec![
        dataset_hash(&data.join("train_in"))?,
        dataset_hash(&data.join("train_out"))?,
    ];
    let scfg = cfg.surrogate_config(seed);
    let started = Instant::now();

    let (ckpt, bound, iterations) = match cfg.pipeline {
        PipelineKind::Joint => {
            let (surrogate, outcome) = train_joint(&train_in, &train_out, &scfg)?;
            (Checkpoint::Joint(surrogate), outcome.bound, outcome.iterations)
        }
        PipelineKind::TwoModel | PipelineKind::PcaBaseline => {
            let solved: Vec<usize> = (0..n_xi).collect();
            let use_pca = cfg.pipeline == PipelineKind::PcaBaseline;
            let trained = train_two_model(&train_in, &train_out, &solved, &scfg, use_pca)?;
            let mut iters = trained
                .input_training
                .map(|t| t.iterations)
                .unwrap_or_default();
            iters.extend(trained.output_training.iterations);
            (
                Checkpoint::TwoModel(trained.surrogate),
                trained.output_training.bound,
                iters,
            )
        }
    };

    let header = CheckpointHeader {
        kind: ckpt.kind().to_string(),
        dataset_hashes: hashes.clone(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: vec![seed],
        bound: Some(bound),
    };
    let ckpt_path = out_dir.join(format!("{}_n{}_s{}.ckpt", cfg.variant_name(), n_xi, seed));
    save_checkpoint(&ckpt, &header, &ckpt_path)?;

    let mut log = Vec::new();
    sgplvm_core::io::write_jsonl(&mut log, &iterations)?;
    write_atomic(&out_dir.join("train_log.jsonl"), &log)?;
    write_manifest(
        &out_dir,
        &Manifest {
            command: "train",
            config_hash: cfg.config_hash(),
            dataset_hashes: hashes,
            code_version: env!("CARGO_PKG_VERSION"),
            seeds: vec![seed],
        },
    )?;
    println!(
        "trained {} (n_xi = {n_xi}, seed = {seed}) in {:.1?}; bound {bound:.4}; checkpoint {}",
        cfg.variant_name(),
        started.elapsed(),
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

/// One evaluated test case; field vectors are included so downstream plots
/// can be made without rerunning inference.
#[derive(Debug, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    pub variant: String,
    pub direction: String,
    pub n_xi: usize,
    pub seed: u64,
    pub rmse: f64,
    pub mnlp: f64,
    pub mlp: f64,
    pub coverage_2s: f64,
    pub beta_star: Option<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseTiming {
    case: usize,
    runtime_s: f64,
}

fn case_seed(seed: u64, case: usize) -> u64 {
    seed ^ (case as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn cmd_predict(
    checkpoint: &Path,
    direction: &str,
    config: &Path,
    data: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    if direction != "forward" && direction != "inverse" {
        return Err(Error::InvalidArgument(format!(
            "direction must be `forward` or `inverse`, got `{direction}`"
        )));
    }
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    ensure_dir(&out_dir)?;
    let (ckpt, header) = load_checkpoint(checkpoint)?;
    let test_in = load_dataset(&data.join("test_in"))?;
    let test_out = load_dataset(&data.join("test_out"))?;
    let n_cases = cfg.n_test.min(test_in.n_realizations());

    let started = Instant::now();
    let results = evaluate_cases(&cfg, &ckpt, &test_in, &test_out, direction, seed, n_cases)?;

    let mut body = Vec::new();
    sgplvm_core::io::write_jsonl(&mut body, &results.records)?;
    let results_path = out_dir.join(format!("{direction}_results.jsonl"));
    write_atomic(&results_path, &body)?;
    let mut timing = Vec::new();
    sgplvm_core::io::write_jsonl(&mut timing, &results.timings)?;
    write_atomic(&out_dir.join(format!("{direction}_timings.jsonl")), &timing)?;
    write_manifest(
        &out_dir,
        &Manifest {
            command: "predict",
            config_hash: cfg.config_hash(),
            dataset_hashes: header.dataset_hashes.clone(),
            code_version: env!("CARGO_PKG_VERSION"),
            seeds: vec![seed],
        },
    )?;
    let mean_rmse = if results.records.is_empty() {
        f64::NAN
    } else {
        results.records.iter().map(|r| r.rmse).sum::<f64>() / results.records.len() as f64
    };
    println!(
        "{direction} evaluation of {} cases in {:.1?}; mean rmse {mean_rmse:.4}; results {}",
        results.records.len(),
        started.elapsed(),
        results_path.display()
    );
    Ok(())
}

struct EvaluatedCases {
    records: Vec<CaseResult>,
    timings: Vec<CaseTiming>,
}

fn n_xi_of(ckpt: &Checkpoint) -> usize {
    match ckpt {
        Checkpoint::Single(m) => m.n_xi(),
        Checkpoint::Joint(s) => s.model.n_xi(),
        Checkpoint::TwoModel(s) => match &s.input_model {
            InputModel::Sgplvm(m) => m.n_xi(),
            InputModel::Pca(_) => s.output_model.n_xi(),
        },
    }
}

/// Noise scale for inverse observations: 10% (noise_frac) of the standard
/// deviation of the training solutions stored in the checkpoint.
fn training_output_std(ckpt: &Checkpoint) -> f64 {
    match ckpt {
        Checkpoint::Joint(s) => s.output_scale,
        Checkpoint::TwoModel(s) => {
            let y = &s.output_model.y;
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        }
        Checkpoint::Single(m) => {
            let y = &m.y;
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        }
    }
}

fn evaluate_cases(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    test_in: &FieldDataset,
    test_out: &FieldDataset,
    direction: &str,
    seed: u64,
    n_cases: usize,
) -> Result<EvaluatedCases> {
    let variant = cfg.variant_name();
    let n_xi = n_xi_of(ckpt);
    let grid_in: Vec<DMatrix<f64>> = test_in
        .grid
        .iter()
        .map(|g| DMatrix::from_fn(g.len(), 1, |i, _| g[i]))
        .collect();
    let grid_out: Vec<DMatrix<f64>> = test_out
        .grid
        .iter()
        .map(|g| DMatrix::from_fn(g.len(), 1, |i, _| g[i]))
        .collect();
    let obs_idx = obs_grid_indices(cfg.grid_n, cfg.obs_n)?;
    let noise_sigma = cfg.noise_frac * training_output_std(ckpt);

    let case_outputs: Vec<(CaseResult, CaseTiming)> = (0..n_cases)
        .map(|case| -> Result<(CaseResult, CaseTiming)> {
            let t0 = Instant::now();
            let cseed = case_seed(seed, case);
            let infer = InferSettings {
                n_restarts: cfg.infer_restarts,
                seed: cseed,
                optimizer: sgplvm_core::opt::OptimizerSettings {
                    max_iters: cfg.infer_max_iters,
                    ..Default::default()
                },
                ..InferSettings::default()
            };
            let predict = PredictOptions {
                n_mog: cfg.n_mog,
                seed: cseed,
                ..PredictOptions::default()
            };
            let (pred, truth) = if direction == "forward" {
                let observation = FieldObservation {
                    values: DVector::from_fn(test_in.n_s(), |p, _| test_in.realizations[(case, p)]),
                    coords: test_in.grid.clone(),
                };
                let pred = match ckpt {
                    Checkpoint::TwoModel(s) => {
                        forward_predict_two_model(s, &observation, &grid_out, &infer, &predict)?
                    }
                    Checkpoint::Joint(s) => {
                        forward_predict_joint(s, &observation, &grid_out, &infer, &predict)?
                    }
                    Checkpoint::Single(_) => {
                        return Err(Error::InvalidArgument(
                            "single-model checkpoints are not a prediction pipeline".into(),
                        ))
                    }
                };
                let truth =
                    DVector::from_fn(test_out.n_s(), |p, _| test_out.realizations[(case, p)]);
                (pred, truth)
            } else {
                let field =
                    DVector::from_fn(test_out.n_s(), |p, _| test_out.realizations[(case, p)]);
                let obs = subsample_observations(
                    &field,
                    &test_out.grid,
                    &[obs_idx.clone(), obs_idx.clone()],
                    noise_sigma,
                    cseed,
                )?;
                let observation = FieldObservation {
                    values: obs.values,
                    coords: obs.coords,
                };
                let pred = match ckpt {
                    Checkpoint::TwoModel(s) => {
                        inverse_predict_two_model(s, &observation, &grid_in, &infer, &predict)?
                    }
                    Checkpoint::Joint(s) => {
                        inverse_predict_joint(s, &observation, &grid_in, &infer, &predict)?
                    }
                    Checkpoint::Single(_) => {
                        return Err(Error::InvalidArgument(
                            "single-model checkpoints are not a prediction pipeline".into(),
                        ))
                    }
                };
                let truth =
                    DVector::from_fn(test_in.n_s(), |p, _| test_in.realizations[(case, p)]);
                (pred, truth)
            };
            let mean = DVector::from_fn(truth.len(), |p, _| pred.moments.mean[(p, 0)]);
            let variance = DVector::from_fn(truth.len(), |p, _| pred.moments.variance[(p, 0)]);
            let m = metrics(&mean, &variance, &truth)?;
            let cov2 = coverage(&mean, &variance, &truth, 2.0);
            Ok((
                CaseResult {
                    case,
                    variant: variant.clone(),
                    direction: direction.to_string(),
                    n_xi,
                    seed,
                    rmse: m.rmse,
                    mnlp: m.mnlp,
                    mlp: m.mlp,
                    coverage_2s: cov2,
                    beta_star: (direction == "inverse").then_some(pred.latent.beta_star),
                    mean: mean.iter().copied().collect(),
                    variance: variance.iter().copied().collect(),
                },
                CaseTiming {
                    case,
                    runtime_s: t0.elapsed().as_secs_f64(),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let (records, timings) = case_outputs.into_iter().unzip();
    Ok(EvaluatedCases { records, timings })
}

// ---------------------------------------------------------------------------
// table
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct TableRow {
    variant: String,
    direction: String,
    n_xi: usize,
    rmse: f64,
    mnlp: f64,
}

fn cmd_table(out: &Path, results: &[PathBuf]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::InvalidArgument(
            "table requires at least one results file".into(),
        ));
    }
    let mut rows: Vec<TableRow> = Vec::new();
    for path in results {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            rows.push(serde_json::from_str(line).map_err(|e| Error::Malformed {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?);
        }
    }
    let mut directions: Vec<String> = rows.iter().map(|r| r.direction.clone()).collect();
    directions.sort();
    directions.dedup();
    let mut csv = String::new();
    for direction in &directions {
        let scale = if direction == "forward" { 100.0 } else { 1.0 };
        let subset: Vec<&TableRow> = rows.iter().filter(|r| &r.direction == direction).collect();
        let mut variants: Vec<String> = subset.iter().map(|r| r.variant.clone()).collect();
        variants.sort();
        variants.dedup();
        let mut sizes: Vec<usize> = subset.iter().map(|r| r.n_xi).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let label = if direction == "forward" {
            "mean RMSE x 10^2 (std)"
        } else {
            "mean RMSE (std)"
        };
        csv.push_str(&format!("# {direction}: {label}\n"));
        csv.push_str("n_xi");
        for v in &variants {
            csv.push_str(&format!(",{v},{v} mnlp"));
        }
        csv.push('\n');
        for &n in &sizes {
            csv.push_str(&n.to_string());
            for v in &variants {
                let cell: Vec<&&TableRow> = subset
                    .iter()
                    .filter(|r| r.n_xi == n && &r.variant == v)
                    .collect();
                if cell.is_empty() {
                    csv.push_str(",,");
                    continue;
                }
                let rmses: Vec<f64> = cell.iter().map(|r| r.rmse * scale).collect();
                let mnlps: Vec<f64> = cell.iter().map(|r| r.mnlp).collect();
                let (m1, s1) = mean_std(&rmses);
                let (m2, s2) = mean_std(&mnlps);
                csv.push_str(&format!(",{m1:.4} ({s1:.4}),{m2:.4} ({s2:.4})"));
            }
            csv.push('\n');
        }
    }
    write_atomic(out, csv.as_bytes())?;
    println!("wrote table {}", out.display());
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(seed: u64) -> Result<()> {
    let mut all_passed = true;
    let mut run = |reports: Vec<sgplvm_core::check::CheckReport>| {
        for rep in reports {
            println!(
                "[{}] {}: {}",
                if rep.passed { "PASS" } else { "FAIL" },
                rep.name,
                rep.detail
            );
            all_passed &= rep.passed;
        }
    };
    run(sgplvm_core::check::kron_oracle_suite(seed, 20)?);
    run(sgplvm_core::check::bound_oracle_suite(seed ^ 1)?);
    run(sgplvm_core::check::gradient_suite(seed ^ 2, 5)?);
    if all_passed {
        println!("verify: all checks passed");
        Ok(())
    } else {
        Err(Error::OptimizerDiverged(
            "verification suite reported failures".into(),
        ))
    }
}
