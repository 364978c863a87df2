//! Problem classes: linear systems, the discretized Chandrasekhar
//! H-equation, and the van der Pol initial-value problem.

mod builtin;
mod dataset;

pub use builtin::{
    builtin_b_tilde, builtin_matrix, builtin_matrix_by_name, BuiltinMatrix, B_TILDE, DELTA_LAMBDA,
    LAMBDA,
};
pub use dataset::{
    embed_problem, gen_chandrasekhar_dataset, gen_ivp_dataset, gen_ivp_dataset_with, gen_linear_dataset,
    gen_linear_matrix, gen_random_symmetric_matrix, sample_rhs, ChandrasekharDatasetParams,
    Dataset, IvpDatasetParams, LinearDatasetParams, Split, TRAIN_FRACTION,
};

use serde::{Deserialize, Serialize};

use crate::baselines::{reference_integrate, REFERENCE_TOL};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector};

/// A vector field `f: R^m -> R^m` with an analytic Jacobian.
///
/// The superstructure only ever calls [`evaluate`](Self::evaluate); the
/// Jacobian feeds the reverse pass.
pub trait ProblemFunction: Sync {
    fn dim(&self) -> usize;

    fn evaluate(&self, x: &[f64]) -> Result<DenseVector>;

    fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix>;

    /// `J(x)ᵀ w`. Override when the transpose product is cheaper than
    /// forming `J`.
    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64]) -> Result<DenseVector> {
        self.jacobian(x)?.mat_t_vec(w)
    }
}

impl<F: ProblemFunction + ?Sized> ProblemFunction for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64]) -> Result<DenseVector> {
        (**self).evaluate(x)
    }
    fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix> {
        (**self).jacobian(x)
    }
    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64]) -> Result<DenseVector> {
        (**self).jacobian_transpose_vec(x, w)
    }
}

fn check_len(x: &[f64], dim: usize) -> Result<()> {
    if x.len() == dim {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "argument of length {} for a {dim}-dimensional problem",
            x.len()
        )))
    }
}

/// `A x = b`, evaluated as `f(x) = A x − b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProblem {
    pub a: DenseMatrix,
    pub b: DenseVector,
}

impl LinearProblem {
    pub fn new(a: DenseMatrix, b: DenseVector) -> Result<Self> {
        if !a.is_square() || a.rows() != b.len() {
            return Err(Error::Dimension(format!(
                "linear problem with {}x{} matrix and length-{} rhs",
                a.rows(),
                a.cols(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn residual(&self, x: &[f64]) -> Result<DenseVector> {
        let mut r = linalg::mat_vec(&self.a, x)?;
        linalg::axpy(-1.0, &self.b, &mut r);
        Ok(r)
    }

    pub fn solve(&self) -> Result<DenseVector> {
        linalg::solve(&self.a, &self.b)
    }
}

impl ProblemFunction for LinearProblem {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn evaluate(&self, x: &[f64]) -> Result<DenseVector> {
        self.residual(x)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix> {
        check_len(x, self.dim())?;
        Ok(self.a.clone())
    }

    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64]) -> Result<DenseVector> {
        check_len(x, self.dim())?;
        self.a.mat_t_vec(w)
    }
}

/// `A_c[j, i] = c μ_j / (2m (μ_j + μ_i))` with midpoints `μ_i = (i − ½)/m`.
pub fn chandrasekhar_matrix(c: f64, m: usize) -> Result<DenseMatrix> {
    if m == 0 {
        return Err(Error::Invalid("Chandrasekhar discretization needs m >= 1".into()));
    }
    let mu: Vec<f64> = (1..=m).map(|i| (i as f64 - 0.5) / m as f64).collect();
    let mut a = DenseMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..m {
            a[(j, i)] = c * mu[j] / (2.0 * m as f64 * (mu[j] + mu[i]));
        }
    }
    Ok(a)
}

/// Discretized Chandrasekhar H-equation, `f(x)_j = x_j − 1/(1 − (A_c x)_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChandrasekharParams", into = "ChandrasekharParams")]
pub struct ChandrasekharProblem {
    c: f64,
    m: usize,
    a_c: DenseMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChandrasekharParams {
    c: f64,
    m: usize,
}

impl TryFrom<ChandrasekharParams> for ChandrasekharProblem {
    type Error = Error;

    fn try_from(p: ChandrasekharParams) -> Result<Self> {
        Self::new(p.c, p.m)
    }
}

impl From<ChandrasekharProblem> for ChandrasekharParams {
    fn from(p: ChandrasekharProblem) -> Self {
        Self { c: p.c, m: p.m }
    }
}

impl ChandrasekharProblem {
    /// `c` must lie in `[0, 1)`; `c = 0` is accepted as the degenerate
    /// linear case.
    pub fn new(c: f64, m: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&c) {
            return Err(Error::Invalid(format!("Chandrasekhar c = {c} outside [0, 1)")));
        }
        Ok(Self {
            c,
            m,
            a_c: chandrasekhar_matrix(c, m)?,
        })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a_c
    }

    /// `1 − (A_c x)_j`, checked for poles.
    fn denominators(&self, x: &[f64]) -> Result<DenseVector> {
        check_len(x, self.m)?;
        let ax = linalg::mat_vec(&self.a_c, x)?;
        ax.into_iter()
            .enumerate()
            .map(|(j, v)| {
                let d = 1.0 - v;
                if d == 0.0 || !d.is_finite() {
                    Err(Error::Pole {
                        component: j,
                        denominator: d,
                    })
                } else {
                    Ok(d)
                }
            })
            .collect()
    }
}

pub fn chandrasekhar_residual(p: &ChandrasekharProblem, x: &[f64]) -> Result<DenseVector> {
    let d = p.denominators(x)?;
    Ok(x.iter().zip(&d).map(|(xj, dj)| xj - 1.0 / dj).collect())
}

/// `J[j, i] = δ_ji − A_c[j, i] / (1 − (A_c x)_j)²`
pub fn chandrasekhar_jacobian(p: &ChandrasekharProblem, x: &[f64]) -> Result<DenseMatrix> {
    let d = p.denominators(x)?;
    let mut jac = DenseMatrix::identity(p.m);
    for j in 0..p.m {
        let s = 1.0 / (d[j] * d[j]);
        for i in 0..p.m {
            jac[(j, i)] -= p.a_c[(j, i)] * s;
        }
    }
    Ok(jac)
}

impl ProblemFunction for ChandrasekharProblem {
    fn dim(&self) -> usize {
        self.m
    }

    fn evaluate(&self, x: &[f64]) -> Result<DenseVector> {
        chandrasekhar_residual(self, x)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix> {
        chandrasekhar_jacobian(self, x)
    }

    fn jacobian_transpose_vec(&self, x: &[f64], w: &[f64]) -> Result<DenseVector> {
        let d = self.denominators(x)?;
        check_len(w, self.m)?;
        let scaled: DenseVector = w.iter().zip(&d).map(|(wj, dj)| wj / (dj * dj)).collect();
        let at = self.a_c.mat_t_vec(&scaled)?;
        Ok(linalg::sub(w, &at))
    }
}

pub fn vdp_rhs(a: f64, x: &[f64]) -> Result<DenseVector> {
    check_len(x, 2)?;
    Ok(vec![x[1], a * (1.0 - x[0] * x[0]) * x[1] - x[0]])
}

pub fn vdp_jacobian(a: f64, x: &[f64]) -> Result<DenseMatrix> {
    check_len(x, 2)?;
    DenseMatrix::from_row_major(
        2,
        2,
        vec![0.0, 1.0, -2.0 * a * x[0] * x[1] - 1.0, a * (1.0 - x[0] * x[0])],
    )
}

/// Right-hand side of the van der Pol oscillator with coefficient `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanDerPol {
    pub a: f64,
}

impl ProblemFunction for VanDerPol {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, x: &[f64]) -> Result<DenseVector> {
        vdp_rhs(self.a, x)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix> {
        vdp_jacobian(self.a, x)
    }
}

/// One van der Pol initial-value problem integrated with fixed step `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvpProblem {
    pub a: f64,
    pub x0: DenseVector,
    pub h: f64,
    pub t0: f64,
}

impl IvpProblem {
    pub fn new(a: f64, x0: DenseVector, h: f64, t0: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::Invalid(format!("timestep h = {h} must be positive")));
        }
        check_len(&x0, 2)?;
        Ok(Self { a, x0, h, t0 })
    }

    pub fn rhs(&self) -> VanDerPol {
        VanDerPol { a: self.a }
    }

    /// Ground-truth states at `t0 + k h`, `k = 1..=steps`.
    pub fn reference_states(&self, steps: usize) -> Result<Vec<DenseVector>> {
        let f = self.rhs();
        let mut out = Vec::with_capacity(steps);
        let mut x = self.x0.clone();
        for _ in 0..steps {
            x = reference_integrate(&f, &x, (0.0, self.h), REFERENCE_TOL)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Nonlinear equation instance: a Chandrasekhar problem and a start point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChandrasekharInstance {
    pub problem: ChandrasekharProblem,
    pub x0: DenseVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemInstance {
    Linear {
        #[serde(flatten)]
        problem: LinearProblem,
        /// Name of the builtin matrix the instance was built from, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<String>,
    },
    Chandrasekhar(ChandrasekharInstance),
    Ivp(IvpProblem),
}

impl ProblemInstance {
    pub fn linear(problem: LinearProblem, matrix: Option<String>) -> Self {
        Self::Linear { problem, matrix }
    }

    pub fn dim(&self) -> usize {
        self.function().dim()
    }

    pub fn function(&self) -> &dyn ProblemFunction {
        match self {
            Self::Linear { problem, .. } => problem,
            Self::Chandrasekhar(inst) => &inst.problem,
            Self::Ivp(ivp) => ivp,
        }
    }

    /// Initial iterate: zero for linear systems, the sampled point otherwise.
    pub fn x0(&self) -> DenseVector {
        match self {
            Self::Linear { problem, .. } => vec![0.0; problem.b.len()],
            Self::Chandrasekhar(inst) => inst.x0.clone(),
            Self::Ivp(ivp) => ivp.x0.clone(),
        }
    }

    /// Problem-supplied scaling `h` (the timestep for IVPs).
    pub fn step_size(&self) -> Option<f64> {
        match self {
            Self::Ivp(ivp) => Some(ivp.h),
            _ => None,
        }
    }

    /// True when `‖f(x)‖` measures distance to a solution.
    pub fn is_equation(&self) -> bool {
        !matches!(self, Self::Ivp(_))
    }

    pub fn label(&self) -> String {
        match self {
            Self::Linear { matrix, .. } => matrix.clone().unwrap_or_else(|| "linear".into()),
            Self::Chandrasekhar(inst) => {
                format!("m={},c={}", inst.problem.m(), inst.problem.c())
            }
            Self::Ivp(ivp) => format!("a={:.4},h={:.4}", ivp.a, ivp.h),
        }
    }
}

impl ProblemFunction for IvpProblem {
    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, x: &[f64]) -> Result<DenseVector> {
        vdp_rhs(self.a, x)
    }

    fn jacobian(&self, x: &[f64]) -> Result<DenseMatrix> {
        vdp_jacobian(self.a, x)
    }
}

/// Central-difference Jacobian, column by column.
pub fn finite_difference_jacobian(
    f: &dyn ProblemFunction,
    x: &[f64],
    step: f64,
) -> Result<DenseMatrix> {
    let m = f.dim();
    let mut cols = Vec::with_capacity(m);
    let mut xp = x.to_vec();
    for i in 0..m {
        xp[i] = x[i] + step;
        let fp = f.evaluate(&xp)?;
        xp[i] = x[i] - step;
        let fm = f.evaluate(&xp)?;
        xp[i] = x[i];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect());
    }
    DenseMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn jacobian_rel_error(f: &dyn ProblemFunction, x: &[f64]) -> f64 {
        let analytic = f.jacobian(x).unwrap();
        let fd = finite_difference_jacobian(f, x, 1e-6).unwrap();
        analytic.sub(&fd).unwrap().max_abs() / analytic.max_abs().max(1e-300)
    }

    #[test]
    fn chandrasekhar_matrix_hand_values() {
        let a = chandrasekhar_matrix(0.9, 2).unwrap();
        assert!((a[(0, 0)] - 0.1125).abs() < 1e-15);
        assert!((a[(0, 1)] - 0.05625).abs() < 1e-15);
        assert_eq!(chandrasekhar_matrix(0.0, 4).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn chandrasekhar_weighted_symmetry_is_exact() {
        let m = 10;
        let a = chandrasekhar_matrix(0.9, m).unwrap();
        let mu: Vec<f64> = (1..=m).map(|i| (i as f64 - 0.5) / m as f64).collect();
        for j in 0..m {
            for i in 0..m {
                let lhs = a[(j, i)] / mu[j];
                let rhs = a[(i, j)] / mu[i];
                assert!((lhs - rhs).abs() <= 1e-15 * lhs.abs(), "({j},{i})");
            }
        }
    }

    #[test]
    fn chandrasekhar_residual_cases() {
        let p0 = ChandrasekharProblem::new(0.0, 3).unwrap();
        let x = [0.5, 2.0, -1.0];
        assert_eq!(chandrasekhar_residual(&p0, &x).unwrap(), vec![-0.5, 1.0, -2.0]);
        assert_eq!(chandrasekhar_residual(&p0, &[1.0; 3]).unwrap(), vec![0.0; 3]);

        let p = ChandrasekharProblem::new(0.9, 2).unwrap();
        let f = chandrasekhar_residual(&p, &[1.0, 1.0]).unwrap();
        let expected = 1.0 - 1.0 / (1.0 - 0.16875);
        assert!((f[0] - expected).abs() < 1e-15);
        assert!((1.0f64 / (1.0 - 0.16875) - 1.203007).abs() < 1e-6);
    }

    #[test]
    fn chandrasekhar_pole_is_reported() {
        let p = ChandrasekharProblem::new(0.9, 2).unwrap();
        // Row 0 of A_c sums to 0.16875, so x = 1/0.16875 puts a pole in row 0.
        let x = [1.0 / 0.16875; 2];
        match chandrasekhar_residual(&p, &x) {
            Err(Error::Pole { component, .. }) => assert_eq!(component, 0),
            Ok(v) => {
                // Rounding may leave a tiny nonzero denominator.
                assert!(v[0].abs() > 1e12);
            }
            Err(e) => panic!("unexpected {e}"),
        }
        assert!(ChandrasekharProblem::new(1.0, 4).is_err());
    }

    #[test]
    fn chandrasekhar_jacobian_limits_and_fd() {
        let p0 = ChandrasekharProblem::new(0.0, 4).unwrap();
        assert_eq!(chandrasekhar_jacobian(&p0, &[0.3; 4]).unwrap(), DenseMatrix::identity(4));
        let p = ChandrasekharProblem::new(0.9, 10).unwrap();
        assert!(jacobian_rel_error(&p, &[1.0; 10]) < 1e-5);
    }

    #[test]
    fn chandrasekhar_transpose_product_matches_dense() {
        let p = ChandrasekharProblem::new(0.935, 20).unwrap();
        let mut r = rng::seeded(5);
        let x: Vec<f64> = (0..20).map(|_| r.random_range(0.5..1.5)).collect();
        let w: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
        let dense = p.jacobian(&x).unwrap().mat_t_vec(&w).unwrap();
        let fast = p.jacobian_transpose_vec(&x, &w).unwrap();
        assert!(linalg::norm_inf(&linalg::sub(&dense, &fast)) < 1e-14);
    }

    #[test]
    fn vdp_examples() {
        assert_eq!(vdp_rhs(1.0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(vdp_rhs(1.0, &[1.0, 1.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(vdp_rhs(1.5, &[0.0, 2.0]).unwrap(), vec![2.0, 3.0]);
        let j = vdp_jacobian(1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(j.to_rows(), vec![vec![0.0, 1.0], vec![-1.0, 1.0]]);
        let j0 = vdp_jacobian(0.0, &[0.7, -0.2]).unwrap();
        assert_eq!(j0.to_rows(), vec![vec![0.0, 1.0], vec![-1.0, 0.0]]);
    }

    #[test]
    fn every_analytic_jacobian_matches_central_differences() {
        let mut r = rng::seeded(2024);
        let linear = LinearProblem::new(builtin_matrix_by_name("A1").unwrap(), builtin_b_tilde())
            .unwrap();
        let chand = ChandrasekharProblem::new(0.905, 10).unwrap();
        for _ in 0..100 {
            let x5: Vec<f64> = (0..5).map(|_| r.random_range(-5.0..5.0)).collect();
            assert!(jacobian_rel_error(&linear, &x5) < 1e-5);

            let x10: Vec<f64> = (0..10).map(|_| r.random_range(0.2..1.8)).collect();
            assert!(jacobian_rel_error(&chand, &x10) < 1e-5);

            let a = r.random_range(1.35..1.65);
            let x2 = [r.random_range(-4.0..4.0), r.random_range(-3.0..3.0)];
            assert!(jacobian_rel_error(&VanDerPol { a }, &x2) < 1e-5);
        }
    }

    #[test]
    fn ivp_rejects_nonpositive_step() {
        assert!(IvpProblem::new(1.5, vec![-3.5, 1.0], 0.0, 0.0).is_err());
        assert!(IvpProblem::new(1.5, vec![-3.5, 1.0], 0.05, 0.0).is_ok());
    }

    #[test]
    fn instance_serde_round_trip() {
        let inst = ProblemInstance::Chandrasekhar(ChandrasekharInstance {
            problem: ChandrasekharProblem::new(0.875, 3).unwrap(),
            x0: vec![1.0, 0.9, 1.1],
        });
        let s = serde_json::to_string(&inst).unwrap();
        let back: ProblemInstance = serde_json::from_str(&s).unwrap();
        assert_eq!(back, inst);
    }
}
