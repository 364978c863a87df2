//! Forward pass of the recursively recurrent superstructure.
//!
//! One pass maps an iterate `x_k` to `x_{k+1}`:
//!
//! ```text
//! v_0  = f(x_k)
//! x'_j = x_k + h Σ_{l<j} θ_{j,l} v_l          j = 1..n-1
//! v_j  = f(x'_j)
//! x_{k+1} = x_k + h Σ_j θ_{n,j} v_j
//! ```
//!
//! In forward-difference mode the inner layers instead compute a direction
//! `d_j = Σ_{l<j} θ_{j,l} v_l` and return `v_j = (f(x_k + ε d_j) − v_0)/ε`,
//! reusing `v_0`. The scaling `h` is not applied in that mode.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseVector};
use crate::problems::ProblemFunction;

/// Residual norm above which a rollout is stopped and flagged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerMode {
    DirectEval,
    ForwardDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2N2Config {
    pub n: usize,
    pub h: f64,
    pub layer_mode: LayerMode,
    pub epsilon: f64,
}

impl R2N2Config {
    pub fn direct(n: usize) -> Self {
        Self {
            n,
            h: 1.0,
            layer_mode: LayerMode::DirectEval,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn forward_diff(n: usize, epsilon: f64) -> Self {
        Self {
            n,
            h: 1.0,
            layer_mode: LayerMode::ForwardDiff,
            epsilon,
        }
    }

    pub fn with_h(self, h: f64) -> Self {
        Self { h, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Invalid("superstructure needs n >= 1".into()));
        }
        if !self.h.is_finite() {
            return Err(Error::Invalid("scaling h must be finite".into()));
        }
        if self.layer_mode == LayerMode::ForwardDiff && !(self.epsilon > 0.0) {
            return Err(Error::Invalid(format!("epsilon = {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Trainable coefficients.
///
/// `layers[b][j-1][l]` is `θ_{j,l}` (`l < j`) of block `b`; `outputs[b][j]`
/// is `θ_{n,j}`. With a single block every outer iteration shares the
/// coefficients. With `T` blocks, iteration `k` uses block `min(k, T-1)`.
/// Layer and output blocks are indexed independently, so a single layer
/// block with `T` output blocks relaxes only the output weights.
#[derive(Debug, Clone, PartialEq)]
pub struct R2N2Parameters {
    n: usize,
    layers: Vec<Vec<Vec<f64>>>,
    outputs: Vec<Vec<f64>>,
}

/// Gradient of a scalar loss with respect to [`R2N2Parameters`]; same shape.
pub type ParameterGradient = R2N2Parameters;

impl R2N2Parameters {
    pub fn zeros(n: usize) -> Self {
        Self::zeros_per_iteration(n, 1, 1)
    }

    /// `layer_blocks` and `output_blocks` must each be 1 or the number of
    /// relaxed iterations.
    pub fn zeros_per_iteration(n: usize, layer_blocks: usize, output_blocks: usize) -> Self {
        let layer = (1..n).map(|j| vec![0.0; j]).collect::<Vec<_>>();
        Self {
            n,
            layers: vec![layer; layer_blocks.max(1)],
            outputs: vec![vec![0.0; n]; output_blocks.max(1)],
        }
    }

    pub fn from_blocks(n: usize, layers: Vec<Vec<Vec<f64>>>, outputs: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { n, layers, outputs };
        p.validate()?;
        Ok(p)
    }

    /// Single-block parameters.
    pub fn new(layers: Vec<Vec<f64>>, output: Vec<f64>) -> Result<Self> {
        let n = output.len();
        Self::from_blocks(n, vec![layers], vec![output])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.layers.is_empty() || self.outputs.is_empty() {
            return Err(Error::Invalid("empty parameter set".into()));
        }
        for block in &self.layers {
            if block.len() != self.n - 1 {
                return Err(Error::Dimension(format!(
                    "{} layer rows for n = {}",
                    block.len(),
                    self.n
                )));
            }
            for (j, row) in block.iter().enumerate() {
                if row.len() != j + 1 {
                    return Err(Error::Dimension(format!(
                        "layer {} has {} coefficients, expected {}",
                        j + 1,
                        row.len(),
                        j + 1
                    )));
                }
            }
        }
        if self.outputs.iter().any(|o| o.len() != self.n) {
            return Err(Error::Dimension("output block length differs from n".into()));
        }
        if !self.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }

    /// Entries drawn from `U(−half_width, half_width)`.
    pub fn random_uniform<R: Rng>(
        n: usize,
        layer_blocks: usize,
        output_blocks: usize,
        half_width: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros_per_iteration(n, layer_blocks, output_blocks);
        if half_width > 0.0 {
            p.iter_mut()
                .for_each(|v| *v = rng.random_range(-half_width..half_width));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.iter_mut().for_each(|v| *v = 0.0);
        z
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layer_block_count(&self) -> usize {
        self.layers.len()
    }

    pub fn output_block_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_per_iteration(&self) -> bool {
        self.layers.len() > 1 || self.outputs.len() > 1
    }

    pub fn layer_block_index(&self, iteration: usize) -> usize {
        iteration.min(self.layers.len() - 1)
    }

    pub fn output_block_index(&self, iteration: usize) -> usize {
        iteration.min(self.outputs.len() - 1)
    }

    /// Layer coefficients applied at outer iteration `iteration` (0-based).
    pub fn layers_at(&self, iteration: usize) -> &[Vec<f64>] {
        &self.layers[self.layer_block_index(iteration)]
    }

    pub fn output_at(&self, iteration: usize) -> &[f64] {
        &self.outputs[self.output_block_index(iteration)]
    }

    pub fn layer_blocks(&self) -> &[Vec<Vec<f64>>] {
        &self.layers
    }

    pub fn output_blocks(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn layer_blocks_mut(&mut self) -> &mut [Vec<Vec<f64>>] {
        &mut self.layers
    }

    pub fn output_blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.outputs
    }

    /// Total number of scalar coefficients.
    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalars in a fixed order: layer blocks (row-major) then output blocks.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|b| b.iter().flatten())
            .chain(self.outputs.iter().flatten())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|b| b.iter_mut().flatten())
            .chain(self.outputs.iter_mut().flatten())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        self.iter_mut().zip(flat).for_each(|(p, v)| *p = *v);
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n
            && self.layers.len() == other.layers.len()
            && self.outputs.len() == other.outputs.len()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension("parameter shapes differ".into()));
        }
        self.iter_mut()
            .zip(other.iter())
            .for_each(|(a, b)| *a += alpha * b);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// What one forward pass evaluated, kept for the reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PassRecord {
    /// `v_0 .. v_{n-1}`.
    pub v: Vec<DenseVector>,
    /// Arguments handed to `f` by layers `1..n-1` (`x'_j`, or
    /// `x_k + ε d_j` in forward-difference mode).
    pub args: Vec<DenseVector>,
    /// Forward-difference directions `d_j`; empty in direct mode.
    pub directions: Vec<DenseVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    /// `x_0 .. x_T` (shorter when the rollout diverged).
    pub iterates: Vec<DenseVector>,
    pub passes: Vec<PassRecord>,
    /// `‖f(x_k)‖` for every stored iterate.
    pub residual_norms: Vec<f64>,
    pub diverged: bool,
}

impl RolloutTrace {
    pub fn steps(&self) -> usize {
        self.passes.len()
    }

    pub fn final_iterate(&self) -> &DenseVector {
        self.iterates.last().expect("trace holds x_0")
    }
}

/// Direct-evaluation layer: `x'_j = x_k + h Σ θ_{j,l} v_l`, `v_j = f(x'_j)`.
pub fn layer_forward(
    theta_j: &[f64],
    h: f64,
    f: &dyn ProblemFunction,
    x_k: &[f64],
    v_list: &[DenseVector],
) -> Result<(DenseVector, DenseVector)> {
    if v_list.len() < theta_j.len() {
        return Err(Error::Dimension(format!(
            "layer needs {} previous outputs, got {}",
            theta_j.len(),
            v_list.len()
        )));
    }
    let mut x_prime = x_k.to_vec();
    for (theta, v) in theta_j.iter().zip(v_list) {
        linalg::axpy(h * theta, v, &mut x_prime);
    }
    let v = f.evaluate(&x_prime)?;
    Ok((x_prime, v))
}

/// Forward-difference layer. Returns `(x_k + ε d_j, d_j, v_j)`.
pub fn layer_forward_fd(
    theta_j: &[f64],
    epsilon: f64,
    f: &dyn ProblemFunction,
    x_k: &[f64],
    v0: &[f64],
    v_list: &[DenseVector],
) -> Result<(DenseVector, DenseVector, DenseVector)> {
    if v_list.len() < theta_j.len() {
        return Err(Error::Dimension(format!(
            "layer needs {} previous outputs, got {}",
            theta_j.len(),
            v_list.len()
        )));
    }
    let mut direction = vec![0.0; x_k.len()];
    for (theta, v) in theta_j.iter().zip(v_list) {
        linalg::axpy(*theta, v, &mut direction);
    }
    let mut arg = x_k.to_vec();
    linalg::axpy(epsilon, &direction, &mut arg);
    let fx = f.evaluate(&arg)?;
    let v = fx
        .iter()
        .zip(v0)
        .map(|(a, b)| (a - b) / epsilon)
        .collect();
    Ok((arg, direction, v))
}

/// `x_{k+1} = x_k + h Σ θ_{n,j} v_j`.
pub fn output_layer(theta_n: &[f64], h: f64, x_k: &[f64], v_list: &[DenseVector]) -> Result<DenseVector> {
    if v_list.len() != theta_n.len() {
        return Err(Error::Dimension(format!(
            "output layer with {} weights and {} inputs",
            theta_n.len(),
            v_list.len()
        )));
    }
    let mut x = x_k.to_vec();
    for (theta, v) in theta_n.iter().zip(v_list) {
        linalg::axpy(h * theta, v, &mut x);
    }
    Ok(x)
}

/// Effective scaling for a configuration (forward-difference mode ignores `h`).
pub fn effective_h(cfg: &R2N2Config) -> f64 {
    match cfg.layer_mode {
        LayerMode::DirectEval => cfg.h,
        LayerMode::ForwardDiff => 1.0,
    }
}

/// One outer iteration. `iteration` selects the coefficient block.
pub fn forward_pass(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x_k: &[f64],
    iteration: usize,
) -> Result<(DenseVector, PassRecord)> {
    forward_pass_with_v0(params, cfg, f, x_k, iteration, None)
}

/// Same as [`forward_pass`] but reuses a known `f(x_k)`.
pub(crate) fn forward_pass_with_v0(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x_k: &[f64],
    iteration: usize,
    v0: Option<DenseVector>,
) -> Result<(DenseVector, PassRecord)> {
    if params.n() != cfg.n {
        return Err(Error::Dimension(format!(
            "parameters for n = {} used with n = {}",
            params.n(),
            cfg.n
        )));
    }
    let layers = params.layers_at(iteration);
    let theta_out = params.output_at(iteration);
    let v0 = match v0 {
        Some(v) => v,
        None => f.evaluate(x_k)?,
    };
    let mut record = PassRecord {
        v: Vec::with_capacity(cfg.n),
        args: Vec::with_capacity(cfg.n.saturating_sub(1)),
        directions: Vec::new(),
    };
    record.v.push(v0);
    for theta_j in layers {
        match cfg.layer_mode {
            LayerMode::DirectEval => {
                let (arg, v) = layer_forward(theta_j, cfg.h, f, x_k, &record.v)?;
                record.args.push(arg);
                record.v.push(v);
            }
            LayerMode::ForwardDiff => {
                let (arg, dir, v) =
                    layer_forward_fd(theta_j, cfg.epsilon, f, x_k, &record.v[0], &record.v)?;
                record.args.push(arg);
                record.directions.push(dir);
                record.v.push(v);
            }
        }
    }
    let x_next = output_layer(theta_out, effective_h(cfg), x_k, &record.v)?;
    Ok((x_next, record))
}

/// `T` chained passes. `f(x_{k+1})` doubles as `v_0` of the next pass, so
/// the rollout costs `T·n + 1` evaluations (the last one only measures the
/// final residual).
pub fn rollout(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x0: &[f64],
    steps: usize,
) -> Result<RolloutTrace> {
    if steps == 0 {
        return Err(Error::Invalid("rollout needs T >= 1".into()));
    }
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut fx = f.evaluate(&x)?;
    let mut trace = RolloutTrace {
        iterates: vec![x.clone()],
        passes: Vec::with_capacity(steps),
        residual_norms: vec![linalg::norm2(&fx)],
        diverged: false,
    };
    for k in 0..steps {
        let (next, record) = forward_pass_with_v0(params, cfg, f, &x, k, Some(fx))?;
        let f_next = f.evaluate(&next)?;
        let norm = linalg::norm2(&f_next);
        trace.passes.push(record);
        trace.iterates.push(next.clone());
        trace.residual_norms.push(norm);
        if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD || next.iter().any(|v| !v.is_finite()) {
            trace.diverged = true;
            break;
        }
        x = next;
        fx = f_next;
    }
    Ok(trace)
}

/// Direct-evaluation parameters (with `h = 1`) that reproduce a
/// forward-difference configuration exactly:
///
/// ```text
/// θ_{j,0} = ε θ̃_{j,0} − Σ_{l≥1} θ̃_{j,l}     θ_{j,l} = θ̃_{j,l}
/// θ_{n,0} = θ̃_{n,0} − Σ_{j≥1} θ̃_{n,j}/ε     θ_{n,j} = θ̃_{n,j}/ε
/// ```
///
/// Direct layer `j` then evaluates `f` at exactly `x_k + ε d_j`, so its
/// output is `v_0 + ε ṽ_j`.
pub fn fd_params_to_direct(
    params_fd: &R2N2Parameters,
    cfg: &R2N2Config,
) -> Result<(R2N2Parameters, R2N2Config)> {
    if cfg.layer_mode != LayerMode::ForwardDiff {
        return Err(Error::Invalid("fd_params_to_direct expects a forward-difference config".into()));
    }
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut out = params_fd.clone();
    for block in out.layer_blocks_mut() {
        for row in block.iter_mut() {
            let tail: f64 = row[1..].iter().sum();
            row[0] = eps * row[0] - tail;
        }
    }
    for theta_out in out.output_blocks_mut() {
        let tail: f64 = theta_out[1..].iter().sum();
        theta_out[0] -= tail / eps;
        for t in theta_out[1..].iter_mut() {
            *t /= eps;
        }
    }
    let direct = R2N2Config {
        layer_mode: LayerMode::DirectEval,
        h: 1.0,
        ..*cfg
    };
    Ok((out, direct))
}

/// On-disk form: configuration plus coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub n: usize,
    pub h: f64,
    pub layer_mode: LayerMode,
    pub epsilon: f64,
    pub theta_layers: Vec<Vec<f64>>,
    pub theta_out: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_iteration: Option<PerIterationBlocks>,
}

/// Per-iteration blocks. `theta_layers` is absent when the layer
/// coefficients are shared across iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerIterationBlocks {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_layers: Option<Vec<Vec<Vec<f64>>>>,
    pub theta_out: Vec<Vec<f64>>,
}

impl ParamsFile {
    pub fn new(params: &R2N2Parameters, cfg: &R2N2Config) -> Self {
        let per_iteration = params.is_per_iteration().then(|| PerIterationBlocks {
            theta_layers: (params.layer_block_count() > 1).then(|| params.layers.clone()),
            theta_out: params.outputs.clone(),
        });
        Self {
            n: cfg.n,
            h: cfg.h,
            layer_mode: cfg.layer_mode,
            epsilon: cfg.epsilon,
            theta_layers: params.layers[0].clone(),
            theta_out: params.outputs[0].clone(),
            per_iteration,
        }
    }

    pub fn into_parts(self) -> Result<(R2N2Parameters, R2N2Config)> {
        let cfg = R2N2Config {
            n: self.n,
            h: self.h,
            layer_mode: self.layer_mode,
            epsilon: self.epsilon,
        };
        cfg.validate()?;
        let params = match self.per_iteration {
            None => R2N2Parameters::from_blocks(self.n, vec![self.theta_layers], vec![self.theta_out])?,
            Some(per) => {
                let layers = per.theta_layers.unwrap_or_else(|| vec![self.theta_layers]);
                R2N2Parameters::from_blocks(self.n, layers, per.theta_out)?
            }
        };
        Ok((params, cfg))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Serde(e.to_string()))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::problems::{builtin_b_tilde, builtin_matrix_by_name, ChandrasekharProblem, LinearProblem};
    use crate::rng;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<F> {
        inner: F,
        calls: AtomicUsize,
    }

    impl<F: ProblemFunction> Counting<F> {
        fn new(inner: F) -> Self {
            Self {
                inner,
                calls: AtomicUsize::new(0),
            }
        }
        fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl<F: ProblemFunction> ProblemFunction for Counting<F> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn evaluate(&self, x: &[f64]) -> Result<DenseVector> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.evaluate(x)
        }
        fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix> {
            self.inner.jacobian(x)
        }
    }

    /// Scalar `f(x) = x²`.
    struct Square;

    impl ProblemFunction for Square {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64]) -> Result<DenseVector> {
            Ok(vec![x[0] * x[0]])
        }
        fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix> {
            DenseMatrix::from_row_major(1, 1, vec![2.0 * x[0]])
        }
    }

    struct Zero(usize);

    impl ProblemFunction for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn evaluate(&self, _: &[f64]) -> Result<DenseVector> {
            Ok(vec![0.0; self.0])
        }
        fn jacobian(&self, _: &[f64]) -> Result<DenseMatrix> {
            Ok(DenseMatrix::zeros(self.0, self.0))
        }
    }

    fn a1_problem() -> LinearProblem {
        LinearProblem::new(builtin_matrix_by_name("A1").unwrap(), builtin_b_tilde()).unwrap()
    }

    fn random_params(n: usize, seed: u64) -> R2N2Parameters {
        R2N2Parameters::random_uniform(n, 1, 1, 1.0, &mut rng::seeded(seed))
    }

    #[test]
    fn zero_layer_weights_reproduce_v0() {
        let p = a1_problem();
        let x = vec![0.3, -0.2, 0.1, 0.0, 1.0];
        let v0 = p.evaluate(&x).unwrap();
        let (xp, v) = layer_forward(&[0.0, 0.0], 1.0, &p, &x, &[v0.clone(), v0.clone()]).unwrap();
        assert_eq!(xp, x);
        assert_eq!(v, v0);
    }

    #[test]
    fn linear_layer_adds_a_times_v0() {
        let p = a1_problem();
        let x = vec![0.0; 5];
        let v0 = p.evaluate(&x).unwrap();
        let (_, v1) = layer_forward(&[1.0], 1.0, &p, &x, std::slice::from_ref(&v0)).unwrap();
        let av0 = linalg::mat_vec(&p.a, &v0).unwrap();
        let expected = linalg::add(&v0, &av0);
        assert!(linalg::norm_inf(&linalg::sub(&v1, &expected)) < 1e-14);
    }

    #[test]
    fn zero_scaling_collapses_layers() {
        let p = a1_problem();
        let x = vec![0.5; 5];
        let v0 = p.evaluate(&x).unwrap();
        let (_, v) = layer_forward(&[3.0], 0.0, &p, &x, std::slice::from_ref(&v0)).unwrap();
        assert_eq!(v, v0);
    }

    #[test]
    fn fd_layer_cases() {
        let p = a1_problem();
        let x = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let v0 = p.evaluate(&x).unwrap();
        let (_, _, v) = layer_forward_fd(&[0.0], 1e-8, &p, &x, &v0, std::slice::from_ref(&v0)).unwrap();
        assert!(v.iter().all(|e| *e == 0.0));

        // Affine f: v = A d up to cancellation roundoff.
        let (_, d, v) = layer_forward_fd(&[0.7], 1e-8, &p, &x, &v0, std::slice::from_ref(&v0)).unwrap();
        let ad = linalg::mat_vec(&p.a, &d).unwrap();
        assert!(linalg::norm_inf(&linalg::sub(&v, &ad)) < 1e-6 * linalg::norm_inf(&ad));

        // f(x) = x² at x = 1 in direction 1 → derivative 2.
        let v0 = Square.evaluate(&[1.0]).unwrap();
        let (_, _, v) = layer_forward_fd(&[1.0], 1e-8, &Square, &[1.0], &v0, std::slice::from_ref(&v0)).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn output_layer_cases() {
        let x = vec![1.0, 2.0];
        let vs = vec![vec![1.0, 1.0], vec![0.5, -0.5]];
        assert_eq!(output_layer(&[0.0, 0.0], 1.0, &x, &vs).unwrap(), x);

        // n = 1, θ = −1, x_k = 0, f = Ax − b: x_1 = b.
        let p = a1_problem();
        let v0 = p.evaluate(&[0.0; 5]).unwrap();
        let x1 = output_layer(&[-1.0], 1.0, &[0.0; 5], &[v0]).unwrap();
        assert_eq!(x1, p.b);

        let once = output_layer(&[0.3, -0.2], 1.0, &x, &vs).unwrap();
        let twice = output_layer(&[0.6, -0.4], 1.0, &x, &vs).unwrap();
        for i in 0..2 {
            assert!(((twice[i] - x[i]) - 2.0 * (once[i] - x[i])).abs() < 1e-15);
        }
        assert!(output_layer(&[1.0], 1.0, &x, &vs).is_err());
    }

    /// Projection residual of `v` onto `span{r, A r, ..., A^j r}`.
    fn krylov_projection_residual(a: &DenseMatrix, r: &[f64], j: usize, v: &[f64]) -> f64 {
        let mut cols = vec![r.to_vec()];
        for _ in 0..j {
            let next = linalg::mat_vec(a, cols.last().unwrap()).unwrap();
            cols.push(next);
        }
        let basis = DenseMatrix::from_columns(&cols).unwrap();
        let coef = linalg::least_squares(&basis, v).unwrap();
        let fit = linalg::mat_vec(&basis, &coef).unwrap();
        linalg::norm2(&linalg::sub(&fit, v)) / linalg::norm2(v).max(1e-300)
    }

    #[test]
    fn layer_outputs_lie_in_the_krylov_subspace() {
        let p = a1_problem();
        let cfg = R2N2Config::direct(4);
        for seed in 0..20 {
            let params = random_params(4, seed);
            let x = vec![0.0; 5];
            let (_, rec) = forward_pass(&params, &cfg, &p, &x, 0).unwrap();
            let r0 = p.evaluate(&x).unwrap();
            for (j, v) in rec.v.iter().enumerate() {
                assert!(krylov_projection_residual(&p.a, &r0, j, v) < 1e-10);
            }
        }
    }

    #[test]
    fn zero_function_keeps_iterate() {
        let params = random_params(3, 1);
        let x = vec![1.0, -2.0, 0.5];
        let (next, _) = forward_pass(&params, &R2N2Config::direct(3), &Zero(3), &x, 0).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn evaluation_budget_per_pass_and_rollout() {
        let n = 4;
        let params = random_params(n, 3);
        let x = vec![0.0; 5];

        let f = Counting::new(a1_problem());
        forward_pass(&params, &R2N2Config::direct(n), &f, &x, 0).unwrap();
        assert_eq!(f.calls(), n);

        // v_0 is shared by every forward-difference layer.
        let f = Counting::new(a1_problem());
        forward_pass(&params, &R2N2Config::forward_diff(n, 1e-6), &f, &x, 0).unwrap();
        assert_eq!(f.calls(), n);

        let f = Counting::new(a1_problem());
        let small = R2N2Parameters::random_uniform(n, 1, 1, 0.1, &mut rng::seeded(0));
        let trace = rollout(&small, &R2N2Config::direct(n), &f, &x, 6).unwrap();
        assert!(!trace.diverged);
        assert_eq!(f.calls(), 6 * n + 1);
    }

    #[test]
    fn rollout_cases() {
        let p = a1_problem();
        let cfg = R2N2Config::direct(3);
        let params = R2N2Parameters::random_uniform(3, 1, 1, 0.1, &mut rng::seeded(5));
        let x0 = vec![0.0; 5];
        let trace = rollout(&params, &cfg, &p, &x0, 1).unwrap();
        let (x1, rec) = forward_pass(&params, &cfg, &p, &x0, 0).unwrap();
        assert_eq!(trace.iterates[1], x1);
        assert_eq!(trace.passes[0], rec);

        let zero = R2N2Parameters::zeros(3);
        let trace = rollout(&zero, &cfg, &p, &x0, 4).unwrap();
        assert!(trace.iterates.iter().all(|x| *x == x0));
        assert!(trace.residual_norms.windows(2).all(|w| w[0] == w[1]));
        assert!(rollout(&zero, &cfg, &p, &x0, 0).is_err());
    }

    #[test]
    fn rollout_flags_divergence() {
        let p = a1_problem();
        let mut params = R2N2Parameters::zeros(1);
        params.output_blocks_mut()[0][0] = 50.0;
        let trace = rollout(&params, &R2N2Config::direct(1), &p, &[0.0; 5], 100).unwrap();
        assert!(trace.diverged);
        assert!(trace.steps() < 100);
    }

    #[test]
    fn per_iteration_blocks_reuse_the_last() {
        let mut params = R2N2Parameters::zeros_per_iteration(2, 3, 3);
        for (b, out) in params.output_blocks_mut().iter_mut().enumerate() {
            out[0] = b as f64;
        }
        assert!(std::ptr::eq(params.output_at(2), params.output_at(7)));
        assert!(std::ptr::eq(params.layers_at(2), params.layers_at(100)));
        assert_eq!(params.output_at(5)[0], 2.0);
        assert_eq!(params.output_at(1)[0], 1.0);

        let shared = R2N2Parameters::zeros_per_iteration(2, 1, 4);
        assert!(std::ptr::eq(shared.layers_at(0), shared.layers_at(3)));
        assert!(!std::ptr::eq(shared.output_at(0), shared.output_at(3)));
    }

    #[test]
    fn parameters_run_on_any_dimension() {
        let params = random_params(4, 9);
        let cfg = R2N2Config::direct(4);
        for m in [5, 15, 100] {
            let p = ChandrasekharProblem::new(0.9, m).unwrap();
            let small = R2N2Parameters::random_uniform(4, 1, 1, 0.1, &mut rng::seeded(m as u64));
            assert!(rollout(&small, &cfg, &p, &vec![1.0; m], 2).is_ok());
        }
        let _ = params;
    }

    #[test]
    fn fd_transform_examples() {
        let cfg = R2N2Config::forward_diff(3, 1e-4);
        let mut only_first = R2N2Parameters::zeros(3);
        only_first.layer_blocks_mut()[0][1][0] = 2.0;
        let (direct, dcfg) = fd_params_to_direct(&only_first, &cfg).unwrap();
        assert_eq!(direct.layers_at(0)[1][0], 2.0 * 1e-4);
        assert_eq!(dcfg.layer_mode, LayerMode::DirectEval);
        assert_eq!(dcfg.h, 1.0);
        assert!(fd_params_to_direct(&only_first, &R2N2Config::direct(3)).is_err());
    }

    #[test]
    fn fd_transform_is_exact_for_2x2_affine_for_any_epsilon() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.5, 3.0]]).unwrap();
        let p = LinearProblem::new(a, vec![1.0, -1.0]).unwrap();
        for eps in [1e-2, 0.5, 3.0] {
            let cfg = R2N2Config::forward_diff(3, eps);
            let fd = random_params(3, 17);
            let (direct, dcfg) = fd_params_to_direct(&fd, &cfg).unwrap();
            let x = vec![0.3, -0.7];
            let (a_next, _) = forward_pass(&fd, &cfg, &p, &x, 0).unwrap();
            let (b_next, _) = forward_pass(&direct, &dcfg, &p, &x, 0).unwrap();
            assert!(linalg::norm_inf(&linalg::sub(&a_next, &b_next)) < 1e-12);
        }
    }

    #[test]
    fn params_file_round_trip_is_bit_exact() {
        let mut r = rng::seeded(77);
        let params = R2N2Parameters::random_uniform(4, 3, 3, 1.0, &mut r);
        let cfg = R2N2Config::direct(4).with_h(0.1 + 0.2);
        let file = ParamsFile::new(&params, &cfg);
        let (back, back_cfg) = ParamsFile::from_json(&file.to_json().unwrap())
            .unwrap()
            .into_parts()
            .unwrap();
        assert_eq!(back_cfg, cfg);
        assert!(back.iter().zip(params.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let shared = R2N2Parameters::random_uniform(3, 1, 4, 1.0, &mut r);
        let file = ParamsFile::new(&shared, &R2N2Config::direct(3));
        let json = file.to_json().unwrap();
        let (back, _) = ParamsFile::from_json(&json).unwrap().into_parts().unwrap();
        assert_eq!(back, shared);
    }

    #[test]
    fn malformed_params_are_rejected() {
        assert!(R2N2Parameters::new(vec![vec![1.0, 2.0]], vec![0.0, 0.0]).is_err());
        assert!(R2N2Parameters::new(vec![vec![1.0]], vec![0.0, f64::NAN]).is_err());
        assert!(R2N2Parameters::new(vec![vec![1.0]], vec![0.0, 0.0]).is_ok());
    }

    proptest! {
        #[test]
        fn fd_transform_matches_forward_diff_on_affine(seed in 0u64..10_000) {
            let p = a1_problem();
            let cfg = R2N2Config::forward_diff(4, 1e-8);
            let fd = random_params(4, seed);
            let (direct, dcfg) = fd_params_to_direct(&fd, &cfg).unwrap();
            let x = vec![0.2, -0.1, 0.4, 1.0, -0.5];
            let (a_next, a_rec) = forward_pass(&fd, &cfg, &p, &x, 0).unwrap();
            let (b_next, b_rec) = forward_pass(&direct, &dcfg, &p, &x, 0).unwrap();
            let scale = linalg::norm_inf(&a_next).max(1.0);
            prop_assert!(linalg::norm_inf(&linalg::sub(&a_next, &b_next)) < 1e-6 * scale);
            for j in 1..4 {
                let recovered: Vec<f64> = b_rec.v[j].iter().zip(&b_rec.v[0]).map(|(a, b)| (a - b) / 1e-8).collect();
                let s = linalg::norm_inf(&a_rec.v[j]).max(1e-12);
                prop_assert!(linalg::norm_inf(&linalg::sub(&recovered, &a_rec.v[j])) < 1e-6 * s.max(1.0));
            }
        }
    }
}
