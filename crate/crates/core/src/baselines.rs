//! Classical solvers the superstructure is compared against: Arnoldi/GMRES,
//! Newton–Krylov with finite-difference Jacobian products, explicit
//! Runge–Kutta steps and an adaptive Dormand–Prince reference integrator.

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::problems::ProblemFunction;

/// Arnoldi stops when the orthogonalized candidate shrinks below this
/// fraction of its norm before orthogonalization.
pub const BREAKDOWN_TOL: f64 = 1e-14;
pub const JVP_EPSILON: f64 = 1e-8;
/// Tolerance used for ground-truth trajectories.
pub const REFERENCE_TOL: f64 = 1e-12;
pub const MIN_STEP: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    /// Strictly lower-triangular stage coefficients, `a[i][j]` for `j < i`.
    pub a: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub nodes: Vec<f64>,
    pub order: usize,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn forward_euler() -> Self {
        Self {
            a: vec![vec![]],
            weights: vec![1.0],
            nodes: vec![0.0],
            order: 1,
        }
    }

    /// Kutta's third-order method.
    pub fn rk3() -> Self {
        Self {
            a: vec![vec![], vec![0.5], vec![-1.0, 2.0]],
            weights: vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            nodes: vec![0.0, 0.5, 1.0],
            order: 3,
        }
    }

    pub fn rk4() -> Self {
        Self {
            a: vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            weights: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            nodes: vec![0.0, 0.5, 0.5, 1.0],
            order: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.a.len() != s || self.nodes.len() != s {
            return Err(Error::Dimension("inconsistent Butcher tableau".into()));
        }
        if self.a.iter().enumerate().any(|(i, row)| row.len() != i) {
            return Err(Error::Dimension("tableau must be explicit".into()));
        }
        Ok(())
    }
}

/// One explicit Runge–Kutta step of an autonomous system.
pub fn rk_step(
    f: &dyn ProblemFunction,
    x: &[f64],
    h: f64,
    tableau: &ButcherTableau,
) -> Result<DenseVector> {
    tableau.validate()?;
    let mut ks: Vec<DenseVector> = Vec::with_capacity(tableau.stages());
    for row in &tableau.a {
        let mut arg = x.to_vec();
        for (coef, k) in row.iter().zip(&ks) {
            linalg::axpy(h * coef, k, &mut arg);
        }
        ks.push(f.evaluate(&arg)?);
    }
    let mut next = x.to_vec();
    for (w, k) in tableau.weights.iter().zip(&ks) {
        linalg::axpy(h * w, k, &mut next);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovBasis {
    /// Orthonormal columns `q_1, q_2, ...`.
    pub vectors: Vec<DenseVector>,
    /// Upper Hessenberg matrix of size `(k+1) × k` (rows stored densely).
    pub hessenberg: DenseMatrix,
    /// `‖r_0‖`.
    pub beta: f64,
    pub breakdown: bool,
}

impl KrylovBasis {
    pub fn dim(&self) -> usize {
        self.hessenberg.cols()
    }
}

/// Arnoldi with modified Gram–Schmidt, `steps` matrix–vector products.
///
/// On breakdown the basis stops early; the Hessenberg matrix keeps its
/// final (zero) subdiagonal row so the small least-squares problem is
/// still well posed.
pub fn arnoldi<A>(mut apply: A, r0: &[f64], steps: usize) -> Result<KrylovBasis>
where
    A: FnMut(&[f64]) -> Result<DenseVector>,
{
    let beta = linalg::norm2(r0);
    if !beta.is_finite() {
        return Err(Error::NonFinite("Arnoldi start vector".into()));
    }
    if beta == 0.0 {
        return Ok(KrylovBasis {
            vectors: Vec::new(),
            hessenberg: DenseMatrix::zeros(1, 0),
            beta,
            breakdown: true,
        });
    }
    let mut q = vec![linalg::scale(1.0 / beta, r0)];
    let mut h_cols: Vec<DenseVector> = Vec::with_capacity(steps);
    let mut breakdown = false;
    for j in 0..steps {
        let mut w = apply(&q[j])?;
        let w_norm = linalg::norm2(&w);
        let mut col = vec![0.0; j + 2];
        for (i, qi) in q.iter().enumerate() {
            let hij = linalg::dot(&w, qi);
            col[i] = hij;
            linalg::axpy(-hij, qi, &mut w);
        }
        let next = linalg::norm2(&w);
        if !next.is_finite() {
            return Err(Error::NonFinite("Arnoldi candidate".into()));
        }
        h_cols.push(col);
        if next <= BREAKDOWN_TOL * w_norm || next == 0.0 {
            breakdown = true;
            break;
        }
        h_cols[j][j + 1] = next;
        q.push(linalg::scale(1.0 / next, &w));
    }
    let k = h_cols.len();
    let mut entries = vec![0.0; (k + 1) * k];
    for (j, col) in h_cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            entries[i * k + j] = *v;
        }
    }
    let h = DenseMatrix::from_row_major(k + 1, k, entries)?;
    if breakdown {
        q.truncate(k);
    }
    Ok(KrylovBasis {
        vectors: q,
        hessenberg: h,
        beta,
        breakdown,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmresCycle {
    pub x: DenseVector,
    /// `‖b − A x‖` predicted by the Givens recursion.
    pub residual_norm: f64,
    pub krylov_dim: usize,
    pub breakdown: bool,
}

/// Minimizes `‖β e_1 − H y‖` with Givens rotations.
fn hessenberg_least_squares(h: &DenseMatrix, beta: f64) -> Result<(DenseVector, f64)> {
    let k = h.cols();
    let mut r = h.to_rows();
    let mut g = vec![0.0; k + 1];
    g[0] = beta;
    for j in 0..k {
        let (a, b) = (r[j][j], r[j + 1][j]);
        let rho = a.hypot(b);
        if rho == 0.0 {
            continue;
        }
        let (c, s) = (a / rho, b / rho);
        for col in j..k {
            let (u, v) = (r[j][col], r[j + 1][col]);
            r[j][col] = c * u + s * v;
            r[j + 1][col] = -s * u + c * v;
        }
        let (u, v) = (g[j], g[j + 1]);
        g[j] = c * u + s * v;
        g[j + 1] = -s * u + c * v;
    }
    // Skip exactly singular trailing diagonal entries (possible only on
    // breakdown with a singular operator).
    let mut rank = k;
    while rank > 0 && r[rank - 1][rank - 1].abs() <= linalg::RANK_TOL * beta.max(1.0) * 1e-6 {
        rank -= 1;
    }
    let mut y = vec![0.0; k];
    for i in (0..rank).rev() {
        let mut s = g[i];
        for j in i + 1..rank {
            s -= r[i][j] * y[j];
        }
        y[i] = s / r[i][i];
    }
    let resid = g[rank..].iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((y, resid))
}

/// One GMRES cycle of dimension `n` from `x0`: one product for the initial
/// residual plus `n` Arnoldi products (fewer on breakdown).
pub fn gmres_cycle<A>(apply: A, b: &[f64], x0: &[f64], n: usize) -> Result<GmresCycle>
where
    A: FnMut(&[f64]) -> Result<DenseVector>,
{
    let mut apply = apply;
    let ax0 = apply(x0)?;
    gmres_cycle_from_residual(&mut apply, &linalg::sub(b, &ax0), x0, n)
}

fn gmres_cycle_from_residual<A>(apply: &mut A, r0: &[f64], x0: &[f64], n: usize) -> Result<GmresCycle>
where
    A: FnMut(&[f64]) -> Result<DenseVector>,
{
    let basis = arnoldi(&mut *apply, r0, n)?;
    let mut x = x0.to_vec();
    if basis.beta == 0.0 {
        return Ok(GmresCycle {
            x,
            residual_norm: 0.0,
            krylov_dim: 0,
            breakdown: true,
        });
    }
    let (y, residual_norm) = hessenberg_least_squares(&basis.hessenberg, basis.beta)?;
    for (yi, qi) in y.iter().zip(&basis.vectors) {
        linalg::axpy(*yi, qi, &mut x);
    }
    Ok(GmresCycle {
        x,
        residual_norm,
        krylov_dim: basis.dim(),
        breakdown: basis.breakdown,
    })
}

/// GMRES restarted every `n` iterations; returns `x_0 .. x_T`.
pub fn gmres_restarted(
    a: &DenseMatrix,
    b: &[f64],
    x0: &[f64],
    n: usize,
    cycles: usize,
) -> Result<Vec<DenseVector>> {
    let mut xs = vec![x0.to_vec()];
    for _ in 0..cycles {
        let x = xs.last().unwrap();
        let r = linalg::sub(b, &linalg::mat_vec(a, x)?);
        let cycle = gmres_cycle_from_residual(&mut |v: &[f64]| linalg::mat_vec(a, v), &r, x, n)?;
        xs.push(cycle.x);
    }
    Ok(xs)
}

/// `(f(x + ε z) − f(x)) / ε` with `fx = f(x)` supplied.
pub fn jacobian_vector_fd(
    f: &dyn ProblemFunction,
    x: &[f64],
    fx: &[f64],
    z: &[f64],
    epsilon: f64,
) -> Result<DenseVector> {
    let mut arg = x.to_vec();
    linalg::axpy(epsilon, z, &mut arg);
    let fz = f.evaluate(&arg)?;
    Ok(fz.iter().zip(fx).map(|(a, b)| (a - b) / epsilon).collect())
}

/// One Newton–Krylov step: GMRES of dimension `n` on `J Δ = −f(x_k)` from
/// `Δ = 0`, matrix-free with forward differences, full step.
/// Uses `n + 1` evaluations of `f`.
pub fn nk_gmres_step(f: &dyn ProblemFunction, x_k: &[f64], n: usize, epsilon: f64) -> Result<DenseVector> {
    let fx = f.evaluate(x_k)?;
    nk_gmres_step_with(f, x_k, &fx, n, epsilon)
}

fn nk_gmres_step_with(
    f: &dyn ProblemFunction,
    x_k: &[f64],
    fx: &[f64],
    n: usize,
    epsilon: f64,
) -> Result<DenseVector> {
    let rhs = linalg::scale(-1.0, fx);
    let zero = vec![0.0; x_k.len()];
    let mut apply = |z: &[f64]| jacobian_vector_fd(f, x_k, fx, z, epsilon);
    let cycle = gmres_cycle_from_residual(&mut apply, &rhs, &zero, n)?;
    Ok(linalg::add(x_k, &cycle.x))
}

/// `T` Newton–Krylov steps; returns `x_0 .. x_T` and `‖f(x_k)‖`.
pub fn nk_gmres(
    f: &dyn ProblemFunction,
    x0: &[f64],
    n: usize,
    epsilon: f64,
    steps: usize,
) -> Result<(Vec<DenseVector>, Vec<f64>)> {
    let mut xs = vec![x0.to_vec()];
    let mut fx = f.evaluate(x0)?;
    let mut norms = vec![linalg::norm2(&fx)];
    for _ in 0..steps {
        let next = nk_gmres_step_with(f, xs.last().unwrap(), &fx, n, epsilon)?;
        fx = f.evaluate(&next)?;
        norms.push(linalg::norm2(&fx));
        xs.push(next);
    }
    Ok((xs, norms))
}

// Dormand–Prince 5(4) coefficients (autonomous, so the nodes are unused).
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand–Prince 5(4) with PI step control (`atol = rtol = tol`).
/// Returns the state at `t_span.1`.
pub fn reference_integrate(
    f: &dyn ProblemFunction,
    x0: &[f64],
    t_span: (f64, f64),
    tol: f64,
) -> Result<DenseVector> {
    let (t0, t1) = t_span;
    if !(tol > 0.0) || !(t1 >= t0) {
        return Err(Error::Invalid(format!("bad integration request {t_span:?}, tol {tol}")));
    }
    let mut x = x0.to_vec();
    if t1 == t0 {
        return Ok(x);
    }
    let dim = x.len();
    let mut t = t0;
    let mut k1 = f.evaluate(&x)?;
    // Initial step from the local scale of the solution.
    let scale = |y: &[f64], i: usize| tol + tol * y[i].abs();
    let d0 = (0..dim).map(|i| (x[i] / scale(&x, i)).powi(2)).sum::<f64>().sqrt() / (dim as f64).sqrt();
    let d1 = (0..dim).map(|i| (k1[i] / scale(&x, i)).powi(2)).sum::<f64>().sqrt() / (dim as f64).sqrt();
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(t1 - t0);
    let mut err_prev: f64 = 1e-4;
    let (alpha, beta) = (0.7 / 5.0, 0.4 / 5.0);
    let mut ks: Vec<DenseVector> = vec![vec![0.0; dim]; 7];
    loop {
        if h < MIN_STEP {
            return Err(Error::StepUnderflow { t, h });
        }
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        ks[0] = k1.clone();
        for s in 1..7 {
            let mut arg = x.clone();
            for (j, kj) in ks.iter().enumerate().take(s) {
                let c = DP_A[s][j];
                if c != 0.0 {
                    linalg::axpy(h * c, kj, &mut arg);
                }
            }
            ks[s] = f.evaluate(&arg)?;
        }
        let mut x5 = x.clone();
        let mut err_vec = vec![0.0; dim];
        for s in 0..7 {
            linalg::axpy(h * DP_B5[s], &ks[s], &mut x5);
            linalg::axpy(h * (DP_B5[s] - DP_B4[s]), &ks[s], &mut err_vec);
        }
        let err = ((0..dim)
            .map(|i| {
                let sc = tol + tol * x[i].abs().max(x5[i].abs());
                (err_vec[i] / sc).powi(2)
            })
            .sum::<f64>()
            / dim as f64)
            .sqrt();
        if !err.is_finite() {
            h *= 0.2;
            continue;
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            x = x5;
            k1 = ks[6].clone();
            if last {
                return Ok(x);
            }
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-alpha) * err_prev.powf(beta)).clamp(0.2, 5.0)
            };
            err_prev = err.max(1e-4);
            h *= fac;
        } else {
            h *= (0.9 * err.powf(-alpha)).clamp(0.2, 1.0);
        }
    }
}

/// States at `t0 + k h`, `k = 1..=steps`, each from the previous one.
pub fn reference_trajectory(
    f: &dyn ProblemFunction,
    x0: &[f64],
    h: f64,
    steps: usize,
    tol: f64,
) -> Result<Vec<DenseVector>> {
    let mut out = Vec::with_capacity(steps);
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = reference_integrate(f, &x, (0.0, h), tol)?;
        out.push(x.clone());
    }
    Ok(out)
}
