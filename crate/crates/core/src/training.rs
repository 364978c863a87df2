//! Losses, Adam, and the full-batch training loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_rollout_loss, rollout_loss, SampleLoss};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseVector};
use crate::problems::{Dataset, ProblemInstance};
use crate::rng;
use crate::superstructure::{ParamsFile, R2N2Config, R2N2Parameters, RolloutTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "values")]
pub enum WeightRule {
    Uniform,
    /// `w_k = 4^k`.
    PowerOfFour,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    /// `Σ_k w_k ‖f(x_k)‖²`.
    ResidualSum,
    /// `Σ_k w_k ‖x_k − x_k^t‖²`.
    TargetSum,
    /// `Σ_k ‖x_k − x_k^t‖² / h^p`; `p` defaults to the superstructure depth.
    IntegrationWeighted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        order: Option<f64>,
    },
    /// Only the last iterate counts: residual for equations, target error
    /// for initial-value problems.
    FinalIterate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Rollout length `T`.
    pub steps: usize,
    pub weights: WeightRule,
}

impl LossSpec {
    pub fn residual(steps: usize, weights: WeightRule) -> Self {
        Self {
            kind: LossKind::ResidualSum,
            steps,
            weights,
        }
    }

    pub fn integration(steps: usize) -> Self {
        Self {
            kind: LossKind::IntegrationWeighted { order: None },
            steps,
            weights: WeightRule::Uniform,
        }
    }

    /// `w_1 .. w_T` from the weight rule (before any per-sample factor).
    pub fn weights(&self) -> Result<Vec<f64>> {
        let t = self.steps;
        if t == 0 {
            return Err(Error::Invalid("loss horizon T must be >= 1".into()));
        }
        Ok(match &self.weights {
            WeightRule::Uniform => vec![1.0; t],
            WeightRule::PowerOfFour => (1..=t).map(|k| 4f64.powi(k as i32)).collect(),
            WeightRule::Custom(w) => {
                if w.len() != t {
                    return Err(Error::Invalid(format!("{} custom weights for T = {t}", w.len())));
                }
                w.clone()
            }
        })
    }

    /// Per-sample loss, including targets where the loss needs them.
    pub fn sample_loss(&self, inst: &ProblemInstance, n: usize) -> Result<SampleLoss> {
        let base = self.weights()?;
        let t = self.steps;
        match &self.kind {
            LossKind::ResidualSum => Ok(SampleLoss::residual(base)),
            LossKind::TargetSum => Ok(SampleLoss::targets(base, targets_for(inst, t)?)),
            LossKind::IntegrationWeighted { order } => {
                let h = inst
                    .step_size()
                    .ok_or_else(|| Error::Unsupported("integration loss needs a timestep".into()))?;
                let p = order.unwrap_or(n as f64);
                let w = base.iter().map(|w| w / h.powf(p)).collect();
                Ok(SampleLoss::targets(w, targets_for(inst, t)?))
            }
            LossKind::FinalIterate => {
                let mut w = vec![0.0; t];
                w[t - 1] = 1.0;
                if inst.is_equation() {
                    Ok(SampleLoss::residual(w))
                } else {
                    Ok(SampleLoss::targets(w, targets_for(inst, t)?))
                }
            }
        }
    }
}

/// Ground truth for target losses: reference states for IVPs, the exact
/// solution at every iterate for linear systems.
fn targets_for(inst: &ProblemInstance, steps: usize) -> Result<Vec<DenseVector>> {
    match inst {
        ProblemInstance::Ivp(ivp) => ivp.reference_states(steps),
        ProblemInstance::Linear { problem, .. } => Ok(vec![problem.solve()?; steps]),
        ProblemInstance::Chandrasekhar(_) => Err(Error::Unsupported(
            "target losses need a known solution".into(),
        )),
    }
}

fn batch_mean(per_sample: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = per_sample.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// `(1/N) Σ_i Σ_k w_k ‖f(x_k^i)‖²` from recorded residual norms.
pub fn loss_residual(traces: &[RolloutTrace], weights: &[f64]) -> f64 {
    batch_mean(traces.iter().map(|t| {
        weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * t.residual_norms.get(i + 1).map_or(f64::INFINITY, |r| r * r))
            .sum()
    }))
}

/// `(1/N) Σ_i Σ_k w_k ‖x_k^i − x_k^{t,i}‖²`.
pub fn loss_target(traces: &[RolloutTrace], targets: &[Vec<DenseVector>], weights: &[f64]) -> f64 {
    batch_mean(traces.iter().zip(targets).map(|(t, tg)| {
        weights
            .iter()
            .zip(tg)
            .enumerate()
            .map(|(i, (w, x_t))| match t.iterates.get(i + 1) {
                Some(x) => w * linalg::dot(&linalg::sub(x, x_t), &linalg::sub(x, x_t)),
                None => f64::INFINITY,
            })
            .sum()
    }))
}

/// `(1/N) Σ_i Σ_k ‖x_k^i − x_k^{t,i}‖² / h_i^p`.
pub fn loss_integration(traces: &[RolloutTrace], targets: &[Vec<DenseVector>], hs: &[f64], p: f64) -> f64 {
    batch_mean(traces.iter().zip(targets).zip(hs).map(|((t, tg), h)| {
        let w = vec![1.0 / h.powf(p); tg.len()];
        loss_target(std::slice::from_ref(t), std::slice::from_ref(tg), &w)
    }))
}

/// `(1/N) Σ_i ‖f(x_T^i)‖²`, or `‖x_T^i − x_T^{t,i}‖²` when targets are given.
pub fn loss_final_iterate(traces: &[RolloutTrace], targets: Option<&[DenseVector]>) -> f64 {
    match targets {
        None => batch_mean(traces.iter().map(|t| {
            if t.diverged {
                f64::INFINITY
            } else {
                t.residual_norms.last().map_or(f64::INFINITY, |r| r * r)
            }
        })),
        Some(tg) => batch_mean(traces.iter().zip(tg).map(|(t, x_t)| {
            if t.diverged {
                return f64::INFINITY;
            }
            let d = linalg::sub(t.final_iterate(), x_t);
            linalg::dot(&d, &d)
        })),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut R2N2Parameters, grad: &R2N2Parameters) -> Result<()> {
    if !params.same_shape(grad) || state.m.len() != params.len() {
        return Err(Error::Dimension("Adam state, parameters and gradient differ in shape".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Initial coefficients are drawn from `U(−w, w)`.
    pub init_half_width: f64,
    /// Test loss is recorded every `eval_every` epochs and after the last.
    pub eval_every: usize,
    /// Worker threads for per-sample gradients; `None` uses rayon's default.
    /// Results do not depend on this value.
    pub threads: Option<usize>,
    /// Coefficient blocks for layers and outputs (1 = shared, `T` = one
    /// block per iteration).
    pub layer_blocks: usize,
    pub output_blocks: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 5000,
            adam: AdamConfig::default(),
            seed: 0,
            init_half_width: 0.1,
            eval_every: 10,
            threads: None,
            layer_blocks: 1,
            output_blocks: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub config: R2N2Config,
    pub loss: LossSpec,
    pub options: TrainOptions,
    /// One record per completed epoch; the train loss is measured before
    /// that epoch's update.
    pub history: Vec<EpochRecord>,
    pub params: R2N2Parameters,
    pub diverged: bool,
}

impl TrainingRun {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.train_loss)
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.test_loss)
    }

    pub fn manifest(&self) -> TrainingManifest {
        TrainingManifest {
            config: self.config,
            loss: self.loss.clone(),
            options: self.options.clone(),
            epochs_completed: self.history.len(),
            diverged: self.diverged,
            final_train_loss: self.final_train_loss(),
            final_test_loss: self.final_test_loss(),
            params: ParamsFile::new(&self.params, &self.config),
        }
    }
}

/// JSON summary of a run (the per-epoch history goes to CSV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub config: R2N2Config,
    pub loss: LossSpec,
    pub options: TrainOptions,
    pub epochs_completed: usize,
    pub diverged: bool,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub params: ParamsFile,
}

/// A dataset instance prepared for repeated rollouts.
#[derive(Debug, Clone)]
pub struct PreparedSample<'a> {
    pub instance: &'a ProblemInstance,
    pub config: R2N2Config,
    pub x0: DenseVector,
    pub loss: SampleLoss,
}

/// Pairs each instance with its scaling `h` and per-sample loss.
pub fn prepare_samples<'a>(
    instances: &[&'a ProblemInstance],
    cfg: &R2N2Config,
    spec: &LossSpec,
) -> Result<Vec<PreparedSample<'a>>> {
    instances
        .iter()
        .map(|inst| {
            let config = match inst.step_size() {
                Some(h) => cfg.with_h(h),
                None => *cfg,
            };
            Ok(PreparedSample {
                instance: inst,
                config,
                x0: inst.x0(),
                loss: spec.sample_loss(inst, cfg.n)?,
            })
        })
        .collect()
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Pole { .. } | Error::NonFinite(_))
}

/// Batch-mean loss (no gradient). Samples that hit a pole count as `+∞`.
pub fn evaluate_loss(params: &R2N2Parameters, samples: &[PreparedSample<'_>]) -> Result<f64> {
    let values = samples
        .par_iter()
        .map(|s| match rollout_loss(params, &s.config, s.instance.function(), &s.x0, &s.loss) {
            Err(e) if is_divergence(&e) => Ok(f64::INFINITY),
            other => other,
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_mean(values.into_iter()))
}

/// Batch-mean loss and gradient. Per-sample results are gathered in index
/// order and summed sequentially, so the result is independent of the
/// thread count.
pub fn batch_gradient(
    params: &R2N2Parameters,
    samples: &[PreparedSample<'_>],
) -> Result<(f64, R2N2Parameters)> {
    let per_sample = samples
        .par_iter()
        .map(|s| match grad_rollout_loss(params, &s.config, s.instance.function(), &s.x0, &s.loss) {
            Err(e) if is_divergence(&e) => Ok((f64::INFINITY, params.zeros_like())),
            other => other,
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for (v, g) in &per_sample {
        total += v;
        grad.axpy(1.0, g)?;
    }
    let scale = 1.0 / samples.len().max(1) as f64;
    grad.scale(scale);
    Ok((total * scale, grad))
}

/// Trains from `U(−w, w)` initial coefficients drawn with `opts.seed`.
pub fn train(dataset: &Dataset, cfg: &R2N2Config, spec: &LossSpec, opts: &TrainOptions) -> Result<TrainingRun> {
    let mut r = rng::substream(opts.seed, 0x7261_696e);
    let init = R2N2Parameters::random_uniform(
        cfg.n,
        opts.layer_blocks,
        opts.output_blocks,
        opts.init_half_width,
        &mut r,
    );
    train_from(dataset, cfg, spec, opts, init)
}

pub fn train_from(
    dataset: &Dataset,
    cfg: &R2N2Config,
    spec: &LossSpec,
    opts: &TrainOptions,
    init: R2N2Parameters,
) -> Result<TrainingRun> {
    cfg.validate()?;
    if init.n() != cfg.n {
        return Err(Error::Dimension("initial parameters do not match n".into()));
    }
    let train_set = dataset.train();
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let train_samples = prepare_samples(&train_set, cfg, spec)?;
    let test_samples = prepare_samples(&dataset.test(), cfg, spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;

    let mut params = init;
    let mut adam = AdamState::new(opts.adam, params.len());
    let mut history = Vec::with_capacity(opts.epochs);
    let mut diverged = false;
    let eval_every = opts.eval_every.max(1);

    pool.install(|| -> Result<()> {
        for epoch in 1..=opts.epochs {
            let (loss, grad) = batch_gradient(&params, &train_samples)?;
            let ok = loss.is_finite() && grad.iter().all(|g| g.is_finite());
            let last = epoch == opts.epochs || !ok;
            let test_loss = if (epoch % eval_every == 0 || last) && !test_samples.is_empty() {
                Some(evaluate_loss(&params, &test_samples)?)
            } else {
                None
            };
            history.push(EpochRecord {
                epoch,
                train_loss: loss,
                test_loss,
            });
            if !ok {
                diverged = true;
                break;
            }
            adam_step(&mut adam, &mut params, &grad)?;
        }
        Ok(())
    })?;

    Ok(TrainingRun {
        config: *cfg,
        loss: spec.clone(),
        options: opts.clone(),
        history,
        params,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{gen_ivp_dataset, gen_linear_dataset, BuiltinMatrix, LinearDatasetParams};
    use crate::superstructure::rollout;

    fn small_linear() -> Dataset {
        gen_linear_dataset(
            &LinearDatasetParams {
                matrices: vec![BuiltinMatrix::new(1).unwrap()],
                samples: 20,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn weight_rules() {
        let s = LossSpec::residual(3, WeightRule::PowerOfFour);
        assert_eq!(s.weights().unwrap(), vec![4.0, 16.0, 64.0]);
        let s = LossSpec::residual(2, WeightRule::Custom(vec![1.0]));
        assert!(s.weights().is_err());
        assert!(LossSpec::residual(0, WeightRule::Uniform).weights().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = R2N2Parameters::new(vec![vec![0.0]], vec![1.0, -1.0]).unwrap();
        let mut g = p.zeros_like();
        g.set_flat(&[3.0, -0.5, 0.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), p.len());
        adam_step(&mut st, &mut p, &g).unwrap();
        let flat = p.to_flat();
        assert!((flat[0] + 1e-3).abs() < 1e-9);
        assert!((flat[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(flat[2], -1.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // Loss = Σ (p_i − 1)², gradient 2(p − 1).
        let mut p = R2N2Parameters::zeros(3);
        let mut st = AdamState::new(AdamConfig { lr: 0.05, ..Default::default() }, p.len());
        for _ in 0..2000 {
            let mut g = p.clone();
            g.iter_mut().for_each(|v| *v = 2.0 * (*v - 1.0));
            adam_step(&mut st, &mut p, &g).unwrap();
        }
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn loss_functions_agree_with_sample_losses() {
        let ds = small_linear();
        let cfg = R2N2Config::direct(3);
        let spec = LossSpec::residual(2, WeightRule::PowerOfFour);
        let params = R2N2Parameters::random_uniform(3, 1, 1, 0.1, &mut rng::seeded(9));
        let samples = prepare_samples(&ds.train(), &cfg, &spec).unwrap();
        let traces: Vec<_> = samples
            .iter()
            .map(|s| rollout(&params, &s.config, s.instance.function(), &s.x0, 2).unwrap())
            .collect();
        let a = loss_residual(&traces, &spec.weights().unwrap());
        let b = evaluate_loss(&params, &samples).unwrap();
        assert!((a - b).abs() < 1e-12 * b);
        let c = loss_final_iterate(&traces, None);
        let w = LossSpec { kind: LossKind::FinalIterate, ..spec.clone() };
        let d = evaluate_loss(&params, &prepare_samples(&ds.train(), &cfg, &w).unwrap()).unwrap();
        assert!((c - d).abs() < 1e-12 * d);
    }

    #[test]
    fn integration_loss_agrees_with_sample_losses() {
        let ds = gen_ivp_dataset(6, 1).unwrap();
        let cfg = R2N2Config::direct(3);
        let spec = LossSpec::integration(1);
        let params = R2N2Parameters::random_uniform(3, 1, 1, 0.1, &mut rng::seeded(2));
        let all: Vec<&ProblemInstance> = ds.instances.iter().collect();
        let samples = prepare_samples(&all, &cfg, &spec).unwrap();
        let traces: Vec<_> = samples
            .iter()
            .map(|s| rollout(&params, &s.config, s.instance.function(), &s.x0, 1).unwrap())
            .collect();
        let targets: Vec<_> = samples.iter().map(|s| s.loss.targets.clone().unwrap()).collect();
        let hs: Vec<f64> = all.iter().map(|i| i.step_size().unwrap()).collect();
        let a = loss_integration(&traces, &targets, &hs, 3.0);
        let b = evaluate_loss(&params, &samples).unwrap();
        assert!((a - b).abs() < 1e-10 * b);
        let flat: Vec<_> = targets.iter().map(|t| t[0].clone()).collect();
        assert!(loss_final_iterate(&traces, Some(&flat)) > 0.0);
    }

    #[test]
    fn training_reduces_loss_and_is_thread_independent() {
        let ds = small_linear();
        let cfg = R2N2Config::direct(2);
        let spec = LossSpec::residual(1, WeightRule::Uniform);
        let mut opts = TrainOptions {
            epochs: 60,
            adam: AdamConfig { lr: 0.01, ..Default::default() },
            seed: 4,
            threads: Some(1),
            ..Default::default()
        };
        let one = train(&ds, &cfg, &spec, &opts).unwrap();
        opts.threads = Some(3);
        let three = train(&ds, &cfg, &spec, &opts).unwrap();
        assert_eq!(one.history.len(), 60);
        assert!(!one.diverged);
        assert!(one.history[59].train_loss < one.history[0].train_loss);
        assert_eq!(one.params, three.params);
        assert_eq!(one.history, three.history);
        assert!(one.final_test_loss().is_some());
    }

    #[test]
    fn huge_learning_rate_is_flagged() {
        let ds = small_linear();
        let cfg = R2N2Config::direct(1);
        let spec = LossSpec::residual(10, WeightRule::Uniform);
        let opts = TrainOptions {
            epochs: 200,
            adam: AdamConfig { lr: 50.0, ..Default::default() },
            ..Default::default()
        };
        let run = train(&ds, &cfg, &spec, &opts).unwrap();
        assert!(run.diverged);
        assert!(run.history.len() < 200);
        assert!(!run.history.last().unwrap().train_loss.is_finite());
    }

    #[test]
    fn manifest_round_trips() {
        let ds = small_linear();
        let run = train(
            &ds,
            &R2N2Config::direct(2),
            &LossSpec::residual(1, WeightRule::Uniform),
            &TrainOptions { epochs: 3, ..Default::default() },
        )
        .unwrap();
        let m = run.manifest();
        let json = serde_json::to_string(&m).unwrap();
        let back: TrainingManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let (p, _) = back.params.into_parts().unwrap();
        assert_eq!(p, run.params);
    }
}
