//! Desk-scale experiment presets and the evaluation helpers they share.
//!
//! A preset is an [`ExperimentConfig`] (dataset, network, loss, optimizer,
//! seed). [`run_experiment`] generates the data, trains, evaluates against
//! the matching classical baseline and returns tables ready to be written
//! as CSV. Nothing here touches the filesystem.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    algorithm_operator, certify_convergence, relative_performance, residual_reduction,
    sequence_stats,
};
use crate::baselines::{gmres_cycle, gmres_restarted, nk_gmres, rk_step, ButcherTableau, JVP_EPSILON};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseVector};
use crate::problems::{
    embed_problem, gen_chandrasekhar_dataset, gen_ivp_dataset_with, gen_linear_dataset,
    sample_rhs, BuiltinMatrix, ChandrasekharDatasetParams, ChandrasekharInstance, ChandrasekharProblem,
    Dataset, IvpDatasetParams, LinearDatasetParams, LinearProblem, ProblemFunction, ProblemInstance,
};
use crate::rng;
use crate::superstructure::{rollout, LayerMode, R2N2Config, R2N2Parameters};
use crate::training::{train, LossKind, LossSpec, TrainOptions, TrainingRun, WeightRule};

pub const PRESETS: [&str; 12] = [
    "fig4a",
    "fig4b",
    "fig5",
    "embedded",
    "fig6",
    "nk_conv",
    "fig7",
    "sm31_rhs",
    "sm31_noise",
    "sm31_spectrum",
    "sm31_random",
    "sm33",
];

/// Dimension of the random orthogonal embedding.
pub const EMBED_DIM: usize = 15;
/// Arbitrary right-hand sides are drawn from `[−w, w]^m` around zero.
pub const ARBITRARY_RHS_HALFWIDTH: f64 = 5.0;
pub const ARBITRARY_RHS_COUNT: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DatasetSpec {
    Linear(LinearDatasetParams),
    Chandrasekhar(ChandrasekharDatasetParams),
    Ivp(IvpDatasetParams),
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            Self::Linear(p) => gen_linear_dataset(p, seed),
            Self::Chandrasekhar(p) => gen_chandrasekhar_dataset(p, seed),
            Self::Ivp(p) => gen_ivp_dataset_with(p, seed),
        }
    }
}

/// Everything a preset run depends on. `seed` drives dataset sampling and
/// initialization (it overrides `training.seed`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub r2n2: R2N2Config,
    pub loss: LossSpec,
    pub training: TrainOptions,
    /// Outer iterations applied at evaluation time.
    pub eval_steps: usize,
    /// Where artifacts go; `None` lets the caller pick.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(Error::Invalid(format!("unknown preset `{}`", self.preset)));
        }
        self.r2n2.validate()?;
        self.loss.weights()?;
        if self.eval_steps == 0 {
            return Err(Error::Invalid("eval_steps must be >= 1".into()));
        }
        if !(self.training.adam.lr > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn builtin(id: u8) -> Result<linalg::DenseMatrix> {
    Ok(BuiltinMatrix::new(id)?.matrix())
}

fn linear_params(ids: &[u8]) -> LinearDatasetParams {
    LinearDatasetParams {
        matrices: ids.iter().map(|&i| BuiltinMatrix::new(i).expect("builtin id")).collect(),
        ..Default::default()
    }
}

/// Default configuration of a registered preset.
pub fn preset_config(name: &str) -> Result<ExperimentConfig> {
    let base_training = TrainOptions::default();
    let cfg = match name {
        "fig4a" | "fig4b" => ExperimentConfig {
            preset: name.into(),
            seed: 0,
            dataset: DatasetSpec::Linear(linear_params(if name == "fig4a" { &[1] } else { &[1, 2, 3] })),
            r2n2: R2N2Config::direct(4),
            loss: LossSpec::residual(1, WeightRule::Uniform),
            training: base_training,
            eval_steps: 1,
            out_dir: None,
        },
        "fig5" | "embedded" | "sm31_rhs" | "sm31_noise" | "sm31_spectrum" | "sm31_random" => ExperimentConfig {
            preset: name.into(),
            seed: 0,
            dataset: DatasetSpec::Linear(linear_params(&[1, 2, 3])),
            r2n2: R2N2Config::direct(4),
            loss: LossSpec::residual(3, WeightRule::PowerOfFour),
            training: base_training,
            eval_steps: if name == "sm31_rhs" { 30 } else { 5 },
            out_dir: None,
        },
        "fig6" | "nk_conv" => ExperimentConfig {
            preset: name.into(),
            seed: 0,
            dataset: DatasetSpec::Chandrasekhar(ChandrasekharDatasetParams::default()),
            r2n2: R2N2Config::direct(3),
            loss: LossSpec::residual(2, WeightRule::Uniform),
            training: base_training,
            eval_steps: if name == "fig6" { 2 } else { 8 },
            out_dir: None,
        },
        "fig7" => ExperimentConfig {
            preset: name.into(),
            seed: 0,
            dataset: DatasetSpec::Ivp(IvpDatasetParams::default()),
            r2n2: R2N2Config::direct(3),
            loss: LossSpec::integration(1),
            training: base_training,
            eval_steps: 5,
            out_dir: None,
        },
        "sm33" => ExperimentConfig {
            preset: name.into(),
            seed: 0,
            dataset: DatasetSpec::Linear(linear_params(&[1])),
            r2n2: R2N2Config::direct(2),
            loss: LossSpec {
                kind: LossKind::FinalIterate,
                steps: 5,
                weights: WeightRule::Uniform,
            },
            training: TrainOptions {
                layer_blocks: 0,
                output_blocks: 0,
                ..base_training
            },
            eval_steps: 6,
            out_dir: None,
        },
        other => return Err(Error::Invalid(format!("unknown preset `{other}`"))),
    };
    Ok(cfg)
}

/// A CSV-shaped result table. Numbers are stored as their shortest
/// round-trip decimal form so output is byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Parsed numeric column (non-numeric cells become NaN).
    pub fn numeric_column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i].parse().unwrap_or(f64::NAN)).collect())
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    ScatterRatio,
    ConvergenceLines,
    ErrorVsH,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRequest {
    pub table: String,
    pub kind: PlotKind,
    /// Draw a reference line of this slope (error-vs-h plots).
    pub guide_slope: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub datasets: Vec<(String, Dataset)>,
    pub runs: Vec<(String, TrainingRun)>,
    pub tables: Vec<Table>,
    pub plots: Vec<PlotRequest>,
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn diverged(&self) -> bool {
        self.runs.iter().any(|(_, r)| r.diverged)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Runs a preset end to end (minus file output).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.training.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.preset.as_str() {
        "fig4a" | "fig4b" => run_ratio_preset(cfg),
        "fig5" | "embedded" | "sm31_rhs" | "sm31_noise" | "sm31_spectrum" | "sm31_random" => {
            run_linear_multistep(cfg)
        }
        "fig6" | "nk_conv" => run_nonlinear(cfg),
        "fig7" => run_ivp(cfg),
        "sm33" => run_sm33(cfg),
        other => Err(Error::Invalid(format!("unknown preset `{other}`"))),
    })
}

fn empty_report(cfg: &ExperimentConfig) -> ExperimentReport {
    ExperimentReport {
        config: cfg.clone(),
        datasets: Vec::new(),
        runs: Vec::new(),
        tables: Vec::new(),
        plots: Vec::new(),
        summary: BTreeMap::new(),
    }
}

fn train_on(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TrainingRun> {
    train(dataset, &cfg.r2n2, &cfg.loss, &cfg.train_options())
}

fn linear_problem(inst: &ProblemInstance) -> Result<(&LinearProblem, Option<&str>)> {
    match inst {
        ProblemInstance::Linear { problem, matrix } => Ok((problem, matrix.as_deref())),
        _ => Err(Error::Invalid("expected a linear instance".into())),
    }
}

/// One-pass residual reductions of the network and of a single GMRES
/// cycle of the same dimension, both from `x_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioSample {
    pub delta_r2n2: f64,
    pub delta_gmres: f64,
    pub ratio: f64,
}

pub fn linear_ratio(params: &R2N2Parameters, cfg: &R2N2Config, problem: &LinearProblem) -> Result<RatioSample> {
    let x0 = vec![0.0; problem.b.len()];
    let trace = rollout(params, cfg, problem, &x0, 1)?;
    let delta_r2n2 = residual_reduction(problem, trace.final_iterate())?;
    let g = gmres_cycle(|v: &[f64]| linalg::mat_vec(&problem.a, v), &problem.b, &x0, cfg.n)?;
    let delta_gmres = residual_reduction(problem, &g.x)?;
    Ok(RatioSample {
        delta_r2n2,
        delta_gmres,
        ratio: relative_performance(delta_r2n2, delta_gmres)?,
    })
}

/// `‖f(x_k)‖`, `k = 0..=steps`; a diverged or failed rollout is padded with `+∞`.
pub fn r2n2_residual_norms(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x0: &[f64],
    steps: usize,
) -> Vec<f64> {
    let mut norms = match rollout(params, cfg, f, x0, steps) {
        Ok(t) => t.residual_norms,
        Err(_) => vec![linalg::norm2(&f.evaluate(x0).unwrap_or_default())],
    };
    norms.resize(steps + 1, f64::INFINITY);
    norms
}

/// Restarted GMRES residual norms `‖b − A x_k‖`, `k = 0..=steps`.
pub fn gmres_residual_norms(problem: &LinearProblem, n: usize, steps: usize) -> Result<Vec<f64>> {
    let xs = gmres_restarted(&problem.a, &problem.b, &vec![0.0; problem.b.len()], n, steps)?;
    xs.iter().map(|x| Ok(linalg::norm2(&problem.residual(x)?))).collect()
}

/// Newton–Krylov residual norms; failed steps are padded with `+∞`.
pub fn nk_residual_norms(f: &dyn ProblemFunction, x0: &[f64], n: usize, steps: usize) -> Vec<f64> {
    let mut norms = match nk_gmres(f, x0, n, JVP_EPSILON, steps) {
        Ok((_, norms)) => norms,
        Err(_) => vec![linalg::norm2(&f.evaluate(x0).unwrap_or_default())],
    };
    norms.resize(steps + 1, f64::INFINITY);
    norms
}

fn convergence_rows(table: &mut Table, label: &str, rows: &[Vec<f64>]) -> Result<()> {
    let stats = sequence_stats(rows)?;
    for k in 0..stats.mean.len() {
        table.push(vec![
            label.into(),
            k.to_string(),
            num(stats.mean[k]),
            num(stats.min[k]),
            num(stats.max[k]),
        ]);
    }
    Ok(())
}

const CONVERGENCE_COLUMNS: [&str; 5] = ["series", "k", "mean", "min", "max"];

fn run_ratio_preset(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = empty_report(cfg);
    let dataset = cfg.dataset.generate(cfg.seed)?;
    let run = train_on(cfg, &dataset)?;
    let test = dataset.test();
    let samples = test
        .par_iter()
        .map(|inst| {
            let (p, _) = linear_problem(inst)?;
            linear_ratio(&run.params, &cfg.r2n2, p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new("ratios", &["sample_id", "matrix", "delta_r2n2", "delta_gmres", "ratio"]);
    for (i, (inst, s)) in test.iter().zip(&samples).enumerate() {
        table.push(vec![
            i.to_string(),
            inst.label(),
            num(s.delta_r2n2),
            num(s.delta_gmres),
            num(s.ratio),
        ]);
    }
    let mean_ratio = samples.iter().map(|s| s.ratio).sum::<f64>() / samples.len().max(1) as f64;
    report.summary.insert("mean_ratio".into(), mean_ratio);
    report.plots.push(PlotRequest {
        table: "ratios".into(),
        kind: PlotKind::ScatterRatio,
        guide_slope: None,
    });
    report.tables.push(table);
    report.runs.push(("r2n2".into(), run));
    report.datasets.push(("dataset".into(), dataset));
    Ok(report)
}

/// Test right-hand sides of the first matrix in a linear dataset.
fn test_rhs(dataset: &Dataset) -> Result<Vec<DenseVector>> {
    let test = dataset.test();
    let first = match test.first() {
        Some(inst) => linear_problem(inst)?.1.map(str::to_string),
        None => return Ok(Vec::new()),
    };
    test.iter()
        .filter_map(|inst| match linear_problem(inst) {
            Ok((p, m)) if m.map(str::to_string) == first => Some(Ok(p.b.clone())),
            Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
        .collect()
}

fn r2n2_rows_for(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    problems: &[LinearProblem],
    steps: usize,
) -> Vec<Vec<f64>> {
    problems
        .par_iter()
        .map(|p| r2n2_residual_norms(params, cfg, p, &vec![0.0; p.b.len()], steps))
        .collect()
}

fn gmres_rows_for(problems: &[LinearProblem], n: usize, steps: usize) -> Result<Vec<Vec<f64>>> {
    problems.par_iter().map(|p| gmres_residual_norms(p, n, steps)).collect()
}

fn with_matrix(a: &linalg::DenseMatrix, rhs: &[DenseVector]) -> Result<Vec<LinearProblem>> {
    rhs.iter().map(|b| LinearProblem::new(a.clone(), b.clone())).collect()
}

/// Arbitrary right-hand sides around zero, `[−5, 5]^m`.
pub fn arbitrary_rhs(dim: usize, count: usize, seed: u64) -> Result<Vec<DenseVector>> {
    sample_rhs(&vec![0.0; dim], ARBITRARY_RHS_HALFWIDTH, count, seed ^ 0x05ee_d0b5)
}

fn run_linear_multistep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = empty_report(cfg);
    let dataset = cfg.dataset.generate(cfg.seed)?;
    let run = train_on(cfg, &dataset)?;
    let params = &run.params;
    let net = &cfg.r2n2;
    let steps = cfg.eval_steps;
    let n = net.n;
    let rhs = test_rhs(&dataset)?;
    let a1 = builtin(1)?;
    let base = with_matrix(&a1, &rhs)?;
    let mut table = Table::new("convergence", &CONVERGENCE_COLUMNS);
    let r2n2_base = r2n2_rows_for(params, net, &base, steps);

    match cfg.preset.as_str() {
        "fig5" => {
            convergence_rows(&mut table, "r2n2_A1", &r2n2_base)?;
            convergence_rows(&mut table, "gmres_A1", &gmres_rows_for(&base, n, steps)?)?;
            let b_all = arbitrary_rhs(a1.rows(), rhs.len().max(1), cfg.seed)?;
            let target = rhs.iter().map(|b| linalg::norm2(b)).sum::<f64>() / rhs.len().max(1) as f64;
            let scaled: Vec<DenseVector> = b_all
                .iter()
                .map(|b| linalg::scale(target / linalg::norm2(b), b))
                .collect();
            convergence_rows(&mut table, "r2n2_b_all", &r2n2_rows_for(params, net, &with_matrix(&a1, &scaled)?, steps))?;
            if let Ok(op) = algorithm_operator(params, net, &a1) {
                report.summary.insert("operator_norm_A1".into(), certify_convergence(&op)?.norm);
            }
        }
        "embedded" => {
            let q = linalg::haar_orthogonal(EMBED_DIM, cfg.seed)?;
            let embedded = base.iter().map(|p| embed_problem(p, &q)).collect::<Result<Vec<_>>>()?;
            convergence_rows(&mut table, "r2n2_A1", &r2n2_base)?;
            let emb_rows = r2n2_rows_for(params, net, &embedded, steps);
            convergence_rows(&mut table, "r2n2_embedded", &emb_rows)?;
            convergence_rows(&mut table, "gmres_embedded", &gmres_rows_for(&embedded, n, steps)?)?;
            let gap = r2n2_base
                .iter()
                .zip(&emb_rows)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            report.summary.insert("max_trace_gap".into(), gap);
        }
        "sm31_rhs" => {
            let b_all = arbitrary_rhs(a1.rows(), ARBITRARY_RHS_COUNT, cfg.seed)?;
            let probs = with_matrix(&a1, &b_all)?;
            let rows = r2n2_rows_for(params, net, &probs, steps);
            convergence_rows(&mut table, "r2n2_b_all", &rows)?;
            let train_rhs: Vec<DenseVector> = dataset
                .train()
                .iter()
                .filter_map(|i| match linear_problem(i) {
                    Ok((p, Some("A1"))) => Some(p.b.clone()),
                    _ => None,
                })
                .collect();
            convergence_rows(
                &mut table,
                "r2n2_b_train",
                &r2n2_rows_for(params, net, &with_matrix(&a1, &train_rhs)?, steps),
            )?;
            let converged = rows
                .iter()
                .filter(|r| r.last().is_some_and(|v| *v < 1e-6 * r[0]))
                .count();
            report.summary.insert("converged_fraction".into(), converged as f64 / rows.len() as f64);
        }
        "sm31_noise" | "sm31_spectrum" | "sm31_random" => {
            convergence_rows(&mut table, "r2n2_A1", &r2n2_base)?;
            let ids: &[u8] = match cfg.preset.as_str() {
                "sm31_noise" => &[12, 13, 14, 15, 16, 17, 18, 19],
                "sm31_spectrum" => &[4, 5, 6, 7],
                _ => &[8, 9, 10, 11],
            };
            let mut certs = Table::new("certification", &["matrix", "operator_norm", "status"]);
            for &id in ids {
                let a = builtin(id)?;
                let probs = with_matrix(&a, &rhs)?;
                convergence_rows(&mut table, &format!("r2n2_A{id}"), &r2n2_rows_for(params, net, &probs, steps))?;
                convergence_rows(&mut table, &format!("gmres_A{id}"), &gmres_rows_for(&probs, n, steps)?)?;
                let cert = certify_convergence(&algorithm_operator(params, net, &a)?)?;
                certs.push(vec![format!("A{id}"), num(cert.norm), format!("{:?}", cert.status)]);
            }
            report.tables.push(certs);
        }
        other => return Err(Error::Invalid(format!("`{other}` is not a multi-step linear preset"))),
    }
    let mean_last = r2n2_base.iter().map(|r| r[steps]).sum::<f64>() / r2n2_base.len().max(1) as f64;
    report.summary.insert("mean_final_residual_A1".into(), mean_last);
    report.plots.push(PlotRequest {
        table: "convergence".into(),
        kind: PlotKind::ConvergenceLines,
        guide_slope: None,
    });
    report.tables.push(table);
    report.runs.push(("r2n2".into(), run));
    report.datasets.push(("dataset".into(), dataset));
    Ok(report)
}

fn chandrasekhar_instance(inst: &ProblemInstance) -> Result<&ChandrasekharInstance> {
    match inst {
        ProblemInstance::Chandrasekhar(c) => Ok(c),
        _ => Err(Error::Invalid("expected a Chandrasekhar instance".into())),
    }
}

/// Per-sample residual norms of the network and of Newton–Krylov.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearSample {
    pub m: usize,
    pub c: f64,
    pub r2n2: Vec<f64>,
    pub nk: Vec<f64>,
}

impl NonlinearSample {
    /// Ratio of residual reductions after `k` iterations (`None` if NK made
    /// no progress).
    pub fn ratio(&self, k: usize) -> Option<f64> {
        let dr = self.r2n2[0] - self.r2n2[k];
        let dn = self.nk[0] - self.nk[k];
        relative_performance(dr, dn).ok()
    }
}

pub fn nonlinear_samples(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    instances: &[ChandrasekharInstance],
    steps: usize,
) -> Vec<NonlinearSample> {
    instances
        .par_iter()
        .map(|inst| NonlinearSample {
            m: inst.problem.m(),
            c: inst.problem.c(),
            r2n2: r2n2_residual_norms(params, cfg, &inst.problem, &inst.x0, steps),
            nk: nk_residual_norms(&inst.problem, &inst.x0, cfg.n, steps),
        })
        .collect()
}

/// Start points `mean + std·N(0, 1)` for each `(m, c)` pair.
pub fn chandrasekhar_instances(
    ms: &[usize],
    cs: &[f64],
    count: usize,
    mean: f64,
    std: f64,
    seed: u64,
) -> Result<Vec<ChandrasekharInstance>> {
    let params = ChandrasekharDatasetParams {
        ms: ms.to_vec(),
        cs: cs.to_vec(),
        samples_per: count,
        x0_mean: mean,
        x0_std: std,
    };
    gen_chandrasekhar_dataset(&params, seed)?
        .instances
        .iter()
        .map(|i| chandrasekhar_instance(i).cloned())
        .collect()
}

fn run_nonlinear(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = empty_report(cfg);
    let dataset = cfg.dataset.generate(cfg.seed)?;
    let run = train_on(cfg, &dataset)?;
    let params = &run.params;
    let net = &cfg.r2n2;
    let steps = cfg.eval_steps;
    let test: Vec<ChandrasekharInstance> = dataset
        .test()
        .iter()
        .map(|i| chandrasekhar_instance(i).cloned())
        .collect::<Result<_>>()?;
    let ds_params = match &cfg.dataset {
        DatasetSpec::Chandrasekhar(p) => p.clone(),
        _ => return Err(Error::Invalid("nonlinear presets need a Chandrasekhar dataset".into())),
    };

    if cfg.preset == "fig6" {
        let mut table = Table::new("ratios", &["sample_id", "m", "c", "k", "extrapolated", "delta_r2n2", "delta_nk", "ratio"]);
        let extra = chandrasekhar_instances(&ds_params.ms, &[0.85, 0.95], 10, ds_params.x0_mean, ds_params.x0_std, cfg.seed ^ 0xe7)?;
        let mut all = nonlinear_samples(params, net, &test, steps);
        let n_test = all.len();
        all.extend(nonlinear_samples(params, net, &extra, steps));
        for k in 1..=steps {
            let mut wins = 0;
            for (i, s) in all.iter().enumerate() {
                let ratio = s.ratio(k).unwrap_or(f64::NAN);
                if i < n_test && ratio > 1.0 {
                    wins += 1;
                }
                table.push(vec![
                    i.to_string(),
                    s.m.to_string(),
                    num(s.c),
                    k.to_string(),
                    (i >= n_test).to_string(),
                    num(s.r2n2[0] - s.r2n2[k]),
                    num(s.nk[0] - s.nk[k]),
                    num(ratio),
                ]);
            }
            report.summary.insert(format!("win_fraction_k{k}"), wins as f64 / n_test.max(1) as f64);
        }
        report.plots.push(PlotRequest {
            table: "ratios".into(),
            kind: PlotKind::ScatterRatio,
            guide_slope: None,
        });
        report.tables.push(table);
    } else {
        let mut table = Table::new("convergence", &CONVERGENCE_COLUMNS);
        let add = |table: &mut Table, label: &str, samples: &[NonlinearSample]| -> Result<()> {
            let r: Vec<Vec<f64>> = samples.iter().map(|s| s.r2n2.clone()).collect();
            let nk: Vec<Vec<f64>> = samples.iter().map(|s| s.nk.clone()).collect();
            convergence_rows(table, &format!("r2n2_{label}"), &r)?;
            convergence_rows(table, &format!("nk_{label}"), &nk)
        };
        add(&mut table, "test", &nonlinear_samples(params, net, &test, steps))?;
        let mean = ds_params.x0_mean;
        let std = ds_params.x0_std;
        let wide = chandrasekhar_instances(&ds_params.ms, &ds_params.cs, 10, mean, std * 10f64.sqrt(), cfg.seed ^ 0x1)?;
        add(&mut table, "x0_wide", &nonlinear_samples(params, net, &wide, steps))?;
        let shifted = chandrasekhar_instances(&ds_params.ms, &ds_params.cs, 10, 5.0 * mean, std, cfg.seed ^ 0x2)?;
        add(&mut table, "x0_shifted", &nonlinear_samples(params, net, &shifted, steps))?;
        let big = chandrasekhar_instances(&[100], &ds_params.cs, 10, mean, std, cfg.seed ^ 0x3)?;
        add(&mut table, "m100", &nonlinear_samples(params, net, &big, steps))?;
        report.plots.push(PlotRequest {
            table: "convergence".into(),
            kind: PlotKind::ConvergenceLines,
            guide_slope: None,
        });
        report.tables.push(table);
    }
    report.runs.push(("r2n2".into(), run));
    report.datasets.push(("dataset".into(), dataset));
    Ok(report)
}

/// Errors `‖x_k − x_k^t‖` of the network and of a classical tableau for
/// `k = 1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationSample {
    pub h: f64,
    pub r2n2: Vec<f64>,
    pub rk: Vec<f64>,
}

pub fn integration_samples(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    instances: &[&ProblemInstance],
    tableau: &ButcherTableau,
    steps: usize,
) -> Result<Vec<IntegrationSample>> {
    instances
        .par_iter()
        .map(|inst| {
            let ivp = match inst {
                ProblemInstance::Ivp(ivp) => ivp,
                _ => return Err(Error::Invalid("expected an IVP instance".into())),
            };
            let truth = ivp.reference_states(steps)?;
            let net = cfg.with_h(ivp.h);
            let trace = rollout(params, &net, ivp, &ivp.x0, steps)?;
            let f = ivp.rhs();
            let mut x = ivp.x0.clone();
            let mut rk = Vec::with_capacity(steps);
            let mut r2n2 = Vec::with_capacity(steps);
            for (k, t) in truth.iter().enumerate() {
                x = rk_step(&f, &x, ivp.h, tableau)?;
                rk.push(linalg::norm2(&linalg::sub(&x, t)));
                r2n2.push(match trace.iterates.get(k + 1) {
                    Some(xk) => linalg::norm2(&linalg::sub(xk, t)),
                    None => f64::INFINITY,
                });
            }
            Ok(IntegrationSample { h: ivp.h, r2n2, rk })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn log_log_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

/// Measured local order of a tableau on one van der Pol problem: slope of
/// the one-step error over step halvings from `h_max`.
pub fn rk_order_slope(tableau: &ButcherTableau, a: f64, x0: &[f64], h_max: f64, halvings: usize) -> Result<f64> {
    let f = crate::problems::VanDerPol { a };
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    let mut h = h_max;
    for _ in 0..=halvings {
        let truth = crate::baselines::reference_integrate(&f, x0, (0.0, h), 1e-13)?;
        let approx = rk_step(&f, x0, h, tableau)?;
        hs.push(h);
        errs.push(linalg::norm2(&linalg::sub(&truth, &approx)));
        h *= 0.5;
    }
    Ok(log_log_slope(&hs, &errs))
}

fn run_ivp(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = empty_report(cfg);
    let dataset = cfg.dataset.generate(cfg.seed)?;
    let run = train_on(cfg, &dataset)?;
    let steps = cfg.eval_steps;
    let test = dataset.test();
    let samples = integration_samples(&run.params, &cfg.r2n2, &test, &ButcherTableau::rk3(), steps)?;
    let mut table = Table::new("errors", &["sample_id", "h", "k", "error_r2n2", "error_rk3"]);
    for k in 1..=steps {
        for (i, s) in samples.iter().enumerate() {
            table.push(vec![i.to_string(), num(s.h), k.to_string(), num(s.r2n2[k - 1]), num(s.rk[k - 1])]);
        }
        let r: Vec<f64> = samples.iter().map(|s| s.r2n2[k - 1]).collect();
        let b: Vec<f64> = samples.iter().map(|s| s.rk[k - 1]).collect();
        report.summary.insert(format!("median_error_r2n2_k{k}"), median(&r));
        report.summary.insert(format!("median_error_rk3_k{k}"), median(&b));
    }
    let slope = rk_order_slope(&ButcherTableau::rk3(), 1.5, &[-3.5, 1.0], 0.08, 3)?;
    report.summary.insert("rk3_order_slope".into(), slope);
    report.plots.push(PlotRequest {
        table: "errors".into(),
        kind: PlotKind::ErrorVsH,
        guide_slope: Some(4.0),
    });
    report.tables.push(table);
    report.runs.push(("r2n2".into(), run));
    report.datasets.push(("dataset".into(), dataset));
    Ok(report)
}

/// Per-iteration output weights, final-iterate loss, one run per horizon
/// `T = 2..=loss.steps`. `layer_blocks = 0` / `output_blocks = 0` in the
/// training options mean "one block per iteration".
fn run_sm33(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = empty_report(cfg);
    let dataset = cfg.dataset.generate(cfg.seed)?;
    let rhs = test_rhs(&dataset)?;
    let a1 = builtin(1)?;
    let probs = with_matrix(&a1, &rhs)?;
    let n = cfg.r2n2.n;
    let steps = cfg.eval_steps;
    let mut table = Table::new("convergence", &CONVERGENCE_COLUMNS);
    convergence_rows(&mut table, "gmres_A1", &gmres_rows_for(&probs, n, steps)?)?;
    for t in 2..=cfg.loss.steps.max(2) {
        let loss = LossSpec {
            steps: t,
            ..cfg.loss.clone()
        };
        let mut opts = cfg.train_options();
        if opts.layer_blocks == 0 {
            opts.layer_blocks = t;
        }
        if opts.output_blocks == 0 {
            opts.output_blocks = t;
        }
        let run = train(&dataset, &cfg.r2n2, &loss, &opts)?;
        let rows = r2n2_rows_for(&run.params, &cfg.r2n2, &probs, steps);
        convergence_rows(&mut table, &format!("r2n2_T{t}"), &rows)?;
        report.runs.push((format!("r2n2_T{t}"), run));
    }
    report.plots.push(PlotRequest {
        table: "convergence".into(),
        kind: PlotKind::ConvergenceLines,
        guide_slope: None,
    });
    report.tables.push(table);
    report.datasets.push(("dataset".into(), dataset));
    Ok(report)
}

/// Random draws used by the gradient-check suite.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub family: &'static str,
    pub mode: LayerMode,
    pub n: usize,
    pub steps: usize,
    pub gap: f64,
}

/// Compares analytic and central-difference gradients on `count` random
/// configurations cycling through the three problem families, both layer
/// modes and rollouts of up to three iterations.
pub fn grad_check_suite(count: usize, seed: u64) -> Result<Vec<GradCheckCase>> {
    use crate::autodiff::{finite_diff_grad, grad_rollout_loss, relative_gap, SampleLoss, FD_GRAD_STEP};
    use crate::problems::IvpProblem;

    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(count);
    let a1 = LinearProblem::new(builtin(1)?, crate::problems::builtin_b_tilde())?;
    let mut i = 0;
    while out.len() < count {
        let family = i % 3;
        let mode = if (i / 3) % 2 == 0 { LayerMode::DirectEval } else { LayerMode::ForwardDiff };
        let n = 1 + (i % 4);
        let steps = 1 + (i % 3);
        i += 1;
        // Forward-difference layers use a larger ε here: with ε = 1e-8 the
        // forward pass itself carries ~1e-8 relative noise, which swamps a
        // central-difference oracle.
        let cfg = match mode {
            LayerMode::DirectEval => R2N2Config::direct(n),
            LayerMode::ForwardDiff => R2N2Config::forward_diff(n, 1e-3),
        };
        let params = R2N2Parameters::random_uniform(n, 1, 1, 0.3, &mut r);
        let weights: Vec<f64> = (1..=steps).map(|k| 4f64.powi(k as i32)).collect();
        let (name, f, cfg, x0, loss): (&'static str, Box<dyn ProblemFunction>, R2N2Config, DenseVector, SampleLoss) =
            match family {
                0 => ("linear", Box::new(a1.clone()), cfg, vec![0.0; 5], SampleLoss::residual(weights)),
                1 => {
                    let m = if r.random_bool(0.5) { 10 } else { 20 };
                    let c = r.random_range(0.5..0.95);
                    let x0: DenseVector = (0..m).map(|_| r.random_range(0.9..1.1)).collect();
                    (
                        "chandrasekhar",
                        Box::new(ChandrasekharProblem::new(c, m)?),
                        cfg,
                        x0,
                        SampleLoss::residual(weights),
                    )
                }
                _ => {
                    let h = r.random_range(0.01..0.1);
                    let ivp = IvpProblem::new(
                        r.random_range(1.35..1.65),
                        vec![r.random_range(-4.0..-3.0), r.random_range(0.0..2.0)],
                        h,
                        0.0,
                    )?;
                    let t = ivp.reference_states(steps)?;
                    let x0 = ivp.x0.clone();
                    ("ivp", Box::new(ivp), cfg.with_h(h), x0, SampleLoss::targets(weights, t))
                }
            };
        let (_, g) = match grad_rollout_loss(&params, &cfg, f.as_ref(), &x0, &loss) {
            Ok(v) => v,
            // Draw again if the random parameters hit a pole.
            Err(Error::Pole { .. }) => continue,
            Err(e) => return Err(e),
        };
        let fd = match finite_diff_grad(&params, &cfg, f.as_ref(), &x0, &loss, FD_GRAD_STEP) {
            Ok(v) => v,
            Err(Error::Pole { .. }) => continue,
            Err(e) => return Err(e),
        };
        out.push(GradCheckCase {
            family: name,
            mode,
            n,
            steps,
            gap: relative_gap(&g, &fd),
        });
    }
    Ok(out)
}
