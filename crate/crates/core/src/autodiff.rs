//! Reverse-mode gradients of rollout losses with respect to the
//! superstructure coefficients.
//!
//! The sweep is hand-written: every pass records the vectors it evaluated,
//! and the adjoint walks the passes backwards using only
//! [`ProblemFunction::jacobian_transpose_vec`]. Adjoints flow through the
//! iterates, so later losses influence earlier coefficient blocks.

use crate::error::{Error, Result};
use crate::linalg::{self, DenseVector};
use crate::problems::ProblemFunction;
use crate::superstructure::{
    effective_h, rollout, LayerMode, ParameterGradient, R2N2Config, R2N2Parameters, RolloutTrace,
};

pub const FD_GRAD_STEP: f64 = 1e-6;

/// Weighted loss of one rollout.
///
/// `weights[k-1]` multiplies the term at `x_k`, `k = 1..=T`; the rollout
/// length is `weights.len()`. Without targets the term is `‖f(x_k)‖²`,
/// with targets it is `‖x_k − targets[k-1]‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub weights: Vec<f64>,
    pub targets: Option<Vec<DenseVector>>,
}

impl SampleLoss {
    pub fn residual(weights: Vec<f64>) -> Self {
        Self {
            weights,
            targets: None,
        }
    }

    pub fn targets(weights: Vec<f64>, targets: Vec<DenseVector>) -> Self {
        Self {
            weights,
            targets: Some(targets),
        }
    }

    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Invalid("loss needs at least one weighted iterate".into()));
        }
        if let Some(t) = &self.targets {
            if t.len() != self.weights.len() {
                return Err(Error::Dimension(format!(
                    "{} targets for {} weights",
                    t.len(),
                    self.weights.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[doc(hidden)]
pub struct GradOptions {
    /// Drops the dependence of inner-layer outputs on `x_k` (deliberately
    /// wrong; exists so tests can show the check catches it).
    pub skip_state_term: bool,
}

/// Per-iterate residual or error vectors `e_k`, `k = 1..=T`, so that the
/// loss is `Σ w_k ‖e_k‖²`.
fn error_vectors(
    trace: &RolloutTrace,
    f: &dyn ProblemFunction,
    loss: &SampleLoss,
) -> Result<Vec<DenseVector>> {
    let t = loss.steps();
    (1..=t)
        .map(|k| match &loss.targets {
            Some(targets) => Ok(linalg::sub(&trace.iterates[k], &targets[k - 1])),
            None if k < t => Ok(trace.passes[k].v[0].clone()),
            None => f.evaluate(&trace.iterates[k]),
        })
        .collect()
}

fn weighted_sum(weights: &[f64], errors: &[DenseVector]) -> f64 {
    weights
        .iter()
        .zip(errors)
        .map(|(w, e)| w * linalg::dot(e, e))
        .sum()
}

/// Loss value of one rollout; `+∞` when the rollout diverged.
pub fn rollout_loss(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x0: &[f64],
    loss: &SampleLoss,
) -> Result<f64> {
    loss.validate()?;
    let trace = rollout(params, cfg, f, x0, loss.steps())?;
    if trace.diverged {
        return Ok(f64::INFINITY);
    }
    Ok(weighted_sum(&loss.weights, &error_vectors(&trace, f, loss)?))
}

/// Loss value and its exact gradient. A diverged rollout yields `+∞` and a
/// zero gradient.
pub fn grad_rollout_loss(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x0: &[f64],
    loss: &SampleLoss,
) -> Result<(f64, ParameterGradient)> {
    grad_rollout_loss_with(params, cfg, f, x0, loss, GradOptions::default())
}

#[doc(hidden)]
pub fn grad_rollout_loss_with(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x0: &[f64],
    loss: &SampleLoss,
    opts: GradOptions,
) -> Result<(f64, ParameterGradient)> {
    loss.validate()?;
    let steps = loss.steps();
    let trace = rollout(params, cfg, f, x0, steps)?;
    let mut grad = params.zeros_like();
    if trace.diverged {
        return Ok((f64::INFINITY, grad));
    }
    let errors = error_vectors(&trace, f, loss)?;
    let value = weighted_sum(&loss.weights, &errors);

    let n = cfg.n;
    let h = effective_h(cfg);
    let eps = cfg.epsilon;
    let fd = cfg.layer_mode == LayerMode::ForwardDiff;

    // Adjoint of a loss term at x_k, before any Jacobian is applied.
    // Residual terms need J(x_k)ᵀ, which is folded into the v_0 product.
    let scaled_error = |k: usize| linalg::scale(2.0 * loss.weights[k - 1], &errors[k - 1]);

    let mut x_bar = match loss.targets {
        Some(_) => scaled_error(steps),
        None => f.jacobian_transpose_vec(&trace.iterates[steps], &scaled_error(steps))?,
    };

    for k in (0..steps).rev() {
        let rec = &trace.passes[k];
        let x_k = &trace.iterates[k];
        let lb = params.layer_block_index(k);
        let ob = params.output_block_index(k);
        let theta_out = params.output_at(k);
        let layers = params.layers_at(k);

        let mut v_bar = vec![vec![0.0; x_k.len()]; n];
        let mut xk_bar = x_bar.clone();
        for j in 0..n {
            grad.output_blocks_mut()[ob][j] += h * linalg::dot(&x_bar, &rec.v[j]);
            linalg::axpy(h * theta_out[j], &x_bar, &mut v_bar[j]);
        }

        for j in (1..n).rev() {
            let theta_j = &layers[j - 1];
            let arg = &rec.args[j - 1];
            let a = f.jacobian_transpose_vec(arg, &v_bar[j])?;
            let (coef_scale, dir_bar) = if fd {
                if !opts.skip_state_term {
                    linalg::axpy(1.0 / eps, &a, &mut xk_bar);
                    let vj = v_bar[j].clone();
                    linalg::axpy(-1.0 / eps, &vj, &mut v_bar[0]);
                }
                (1.0, a)
            } else {
                if !opts.skip_state_term {
                    linalg::axpy(1.0, &a, &mut xk_bar);
                }
                (h, a)
            };
            let row = &mut grad.layer_blocks_mut()[lb][j - 1];
            for l in 0..j {
                row[l] += coef_scale * linalg::dot(&dir_bar, &rec.v[l]);
            }
            for l in 0..j {
                linalg::axpy(coef_scale * theta_j[l], &dir_bar, &mut v_bar[l]);
            }
        }

        if k == 0 {
            break;
        }
        // v_0 = f(x_k); a residual term at x_k shares the same Jacobian.
        let mut w0 = v_bar[0].clone();
        let e = scaled_error(k);
        if loss.targets.is_some() {
            linalg::axpy(1.0, &e, &mut xk_bar);
        } else {
            linalg::axpy(1.0, &e, &mut w0);
        }
        let contrib = f.jacobian_transpose_vec(x_k, &w0)?;
        linalg::axpy(1.0, &contrib, &mut xk_bar);
        x_bar = xk_bar;
    }
    Ok((value, grad))
}

/// Central-difference gradient of [`rollout_loss`], one coefficient at a time.
pub fn finite_diff_grad(
    params: &R2N2Parameters,
    cfg: &R2N2Config,
    f: &dyn ProblemFunction,
    x0: &[f64],
    loss: &SampleLoss,
    step: f64,
) -> Result<ParameterGradient> {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut shifted = base.clone();
        shifted[i] = base[i] + step;
        probe.set_flat(&shifted)?;
        let plus = rollout_loss(&probe, cfg, f, x0, loss)?;
        shifted[i] = base[i] - step;
        probe.set_flat(&shifted)?;
        let minus = rollout_loss(&probe, cfg, f, x0, loss)?;
        out.push((plus - minus) / (2.0 * step));
    }
    let mut g = params.zeros_like();
    g.set_flat(&out)?;
    Ok(g)
}

/// `‖a − b‖∞ / ‖b‖∞` over all coefficients.
pub fn relative_gap(a: &ParameterGradient, b: &ParameterGradient) -> f64 {
    let num = a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.max_abs();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
