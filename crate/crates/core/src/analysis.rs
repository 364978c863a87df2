//! Metrics and the linear convergence certificate.
//!
//! On `f(x) = A x − b` one direct-mode pass propagates the residual as
//! `r_{k+1} = (I + Σ_i ζ_i A^i) r_k`, where the `ζ_i` are polynomials in the
//! coefficients and `h` only. [`theta_to_zeta`] expands them exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::problems::{LinearProblem, ProblemFunction};
use crate::superstructure::{fd_params_to_direct, LayerMode, R2N2Config, R2N2Parameters, RolloutTrace};

/// Half-width of the band around 1 reported as marginal.
pub const MARGINAL_BAND: f64 = 1e-9;

/// `‖b‖ − ‖A x̂ − b‖`: progress made from `x_0 = 0`.
pub fn residual_reduction(problem: &LinearProblem, x_hat: &[f64]) -> Result<f64> {
    Ok(linalg::norm2(&problem.b) - linalg::norm2(&problem.residual(x_hat)?))
}

/// `‖f(x_0)‖ − ‖f(x_k)‖`.
pub fn residual_reduction_nk(f: &dyn ProblemFunction, x0: &[f64], x_k: &[f64]) -> Result<f64> {
    Ok(linalg::norm2(&f.evaluate(x0)?) - linalg::norm2(&f.evaluate(x_k)?))
}

/// Ratio of residual reductions; above 1 the method beat the baseline.
pub fn relative_performance(delta_method: f64, delta_baseline: f64) -> Result<f64> {
    if delta_baseline == 0.0 {
        return Err(Error::Invalid("baseline made no progress; ratio undefined".into()));
    }
    Ok(delta_method / delta_baseline)
}

/// `ζ_1 .. ζ_n` of the residual propagation polynomial.
///
/// With `v_j = p_j(A) r`, the layers give `p_0 = 1` and
/// `p_j = 1 + h Σ_{l<j} θ_{j,l} z p_l`; the output layer then yields
/// `I + h Σ_j θ_{n,j} A p_j(A)`. Forward-difference parameters are first
/// mapped to their direct equivalent.
pub fn theta_to_zeta(params: &R2N2Parameters, cfg: &R2N2Config) -> Result<Vec<f64>> {
    if params.is_per_iteration() {
        return Err(Error::Unsupported(
            "per-iteration parameters define a different operator at every iteration".into(),
        ));
    }
    if cfg.layer_mode == LayerMode::ForwardDiff {
        let (direct, dcfg) = fd_params_to_direct(params, cfg)?;
        return theta_to_zeta(&direct, &dcfg);
    }
    let n = cfg.n;
    let h = cfg.h;
    let layers = params.layers_at(0);
    let theta_out = params.output_at(0);
    // polys[j][i] = coefficient of z^i in p_j.
    let mut polys: Vec<Vec<f64>> = Vec::with_capacity(n);
    polys.push(vec![1.0]);
    for theta_j in layers {
        let j = polys.len();
        let mut p = vec![0.0; j + 1];
        p[0] = 1.0;
        for (l, theta) in theta_j.iter().enumerate() {
            for (i, c) in polys[l].iter().enumerate() {
                p[i + 1] += h * theta * c;
            }
        }
        polys.push(p);
    }
    let mut zeta = vec![0.0; n];
    for (theta, p) in theta_out.iter().zip(&polys) {
        for (i, c) in p.iter().enumerate() {
            zeta[i] += h * theta * c;
        }
    }
    Ok(zeta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmOperator {
    /// `I + Σ ζ_i A^i`.
    pub matrix: DenseMatrix,
    pub zeta: Vec<f64>,
}

impl AlgorithmOperator {
    pub fn apply(&self, r: &[f64]) -> Result<Vec<f64>> {
        linalg::mat_vec(&self.matrix, r)
    }
}

pub fn algorithm_operator(params: &R2N2Parameters, cfg: &R2N2Config, a: &DenseMatrix) -> Result<AlgorithmOperator> {
    if !a.is_square() {
        return Err(Error::Dimension("algorithm operator needs a square matrix".into()));
    }
    let zeta = theta_to_zeta(params, cfg)?;
    let mut matrix = DenseMatrix::identity(a.rows());
    let mut power = DenseMatrix::identity(a.rows());
    for z in &zeta {
        power = power.mat_mul(a)?;
        matrix = matrix.add(&power.scaled(*z))?;
    }
    Ok(AlgorithmOperator { matrix, zeta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Convergent,
    Marginal,
    NotConvergent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub norm: f64,
    pub status: ConvergenceStatus,
}

impl Certification {
    /// Strict `norm < 1`, regardless of the marginal label.
    pub fn convergent(&self) -> bool {
        self.norm < 1.0
    }
}

/// Spectral norm of the operator; below 1 every right-hand side converges.
pub fn certify_convergence(op: &AlgorithmOperator) -> Result<Certification> {
    let norm = linalg::spectral_norm(&op.matrix)?;
    let status = if (norm - 1.0).abs() <= MARGINAL_BAND {
        ConvergenceStatus::Marginal
    } else if norm < 1.0 {
        ConvergenceStatus::Convergent
    } else {
        ConvergenceStatus::NotConvergent
    };
    Ok(Certification { norm, status })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Per-iteration mean/min/max over equally long sequences.
pub fn sequence_stats(rows: &[Vec<f64>]) -> Result<TraceStats> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Invalid("no traces to summarize".into()))?;
    let len = first.len();
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::Dimension("traces have different lengths".into()));
    }
    let count = rows.len() as f64;
    let mut stats = TraceStats {
        mean: vec![0.0; len],
        min: vec![f64::INFINITY; len],
        max: vec![f64::NEG_INFINITY; len],
    };
    for row in rows {
        for (k, v) in row.iter().enumerate() {
            stats.mean[k] += v / count;
            stats.min[k] = stats.min[k].min(*v);
            stats.max[k] = stats.max[k].max(*v);
        }
    }
    Ok(stats)
}

/// Residual-norm statistics over rollouts; ragged (diverged) traces are an error.
pub fn convergence_trace_stats(traces: &[RolloutTrace]) -> Result<TraceStats> {
    let rows: Vec<Vec<f64>> = traces.iter().map(|t| t.residual_norms.clone()).collect();
    sequence_stats(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{builtin_b_tilde, builtin_matrix_by_name, gen_random_symmetric_matrix};
    use crate::rng;
    use crate::superstructure::{forward_pass, rollout};
    use proptest::prelude::*;

    fn random_params(n: usize, seed: u64, w: f64) -> R2N2Parameters {
        R2N2Parameters::random_uniform(n, 1, 1, w, &mut rng::seeded(seed))
    }

    #[test]
    fn reduction_examples() {
        let p = LinearProblem::new(builtin_matrix_by_name("A1").unwrap(), builtin_b_tilde()).unwrap();
        let exact = p.solve().unwrap();
        let nb = linalg::norm2(&p.b);
        assert!((residual_reduction(&p, &exact).unwrap() - nb).abs() < 1e-12);
        assert_eq!(residual_reduction(&p, &[0.0; 5]).unwrap(), 0.0);
        let worse = linalg::scale(-1.0, &exact);
        assert!(residual_reduction(&p, &worse).unwrap() < 0.0);
        assert_eq!(residual_reduction_nk(&p, &[0.0; 5], &[0.0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn relative_performance_examples() {
        assert_eq!(relative_performance(2.0, 2.0).unwrap(), 1.0);
        assert!(relative_performance(3.0, 2.0).unwrap() > 1.0);
        assert!(relative_performance(1.0, 0.0).is_err());
        for s in [0.5, 4.0, 1024.0] {
            assert_eq!(
                relative_performance(1.7 * s, 2.3 * s).unwrap(),
                relative_performance(1.7, 2.3).unwrap()
            );
        }
    }

    #[test]
    fn zeta_hand_expansions() {
        let p1 = R2N2Parameters::new(vec![], vec![-0.4]).unwrap();
        assert_eq!(theta_to_zeta(&p1, &R2N2Config::direct(1)).unwrap(), vec![-0.4]);

        let p2 = R2N2Parameters::new(vec![vec![0.3]], vec![0.5, -0.2]).unwrap();
        let z = theta_to_zeta(&p2, &R2N2Config::direct(2)).unwrap();
        assert!((z[0] - (0.5 - 0.2)).abs() < 1e-15);
        assert!((z[1] - (-0.2 * 0.3)).abs() < 1e-15);

        let per = R2N2Parameters::zeros_per_iteration(2, 1, 3);
        assert!(matches!(
            theta_to_zeta(&per, &R2N2Config::direct(2)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn zero_parameters_give_identity() {
        let a = builtin_matrix_by_name("A3").unwrap();
        let op = algorithm_operator(&R2N2Parameters::zeros(3), &R2N2Config::direct(3), &a).unwrap();
        assert_eq!(op.matrix, DenseMatrix::identity(5));
        let cert = certify_convergence(&op).unwrap();
        assert!((cert.norm - 1.0).abs() < 1e-12);
        assert!(!cert.convergent());
        assert_eq!(cert.status, ConvergenceStatus::Marginal);
    }

    /// Residual of `x_k = 0` is `−b`; fit `ζ` from one pass on the probes.
    fn zeta_by_fitting(params: &R2N2Parameters, cfg: &R2N2Config, probes: &[(DenseMatrix, Vec<f64>)]) -> Vec<f64> {
        let n = cfg.n;
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for (a, r) in probes {
            let b = linalg::scale(-1.0, r);
            let p = LinearProblem::new(a.clone(), b).unwrap();
            let (x1, _) = forward_pass(params, cfg, &p, &vec![0.0; r.len()], 0).unwrap();
            let r1 = p.evaluate(&x1).unwrap();
            let mut cols = Vec::new();
            let mut v = r.clone();
            for _ in 0..n {
                v = linalg::mat_vec(a, &v).unwrap();
                cols.push(v.clone());
            }
            for i in 0..r.len() {
                rows.push(cols.iter().map(|c| c[i]).collect::<Vec<f64>>());
                rhs.push(r1[i] - r[i]);
            }
        }
        let m = DenseMatrix::from_rows(&rows).unwrap();
        linalg::least_squares(&m, &rhs).unwrap()
    }

    #[test]
    fn zeta_matches_fitting_on_two_probes() {
        let probes: Vec<(DenseMatrix, Vec<f64>)> = [11u64, 12]
            .iter()
            .map(|&s| {
                let q = linalg::haar_orthogonal(6, s).unwrap();
                let d = DenseMatrix::from_diagonal(&[0.5, 0.7, 0.9, 1.1, 1.3, 1.5]);
                let a = q.mat_mul(&d).unwrap().mat_mul(&q.transpose()).unwrap();
                (a, vec![1.0, -0.5, 0.25, 0.8, -1.2, 0.3])
            })
            .collect();
        for seed in 0..20 {
            let n = 1 + (seed % 4) as usize;
            let params = random_params(n, seed, 1.0);
            let cfg = R2N2Config::direct(n).with_h(0.7);
            let exact = theta_to_zeta(&params, &cfg).unwrap();
            let fit = zeta_by_fitting(&params, &cfg, &probes);
            for (a, b) in exact.iter().zip(&fit) {
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{exact:?} vs {fit:?}");
            }
        }
    }

    #[test]
    fn trace_stats_examples() {
        let s = sequence_stats(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(s.mean, s.min);
        assert_eq!(s.mean, s.max);
        let s = sequence_stats(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(s.mean, vec![2.0, 2.0]);
        assert!(sequence_stats(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(sequence_stats(&[]).is_err());
        let s = sequence_stats(&[vec![3.0, 2.0, 1.0], vec![6.0, 5.0, 0.5]]).unwrap();
        assert!(s.mean.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn certified_operator_contracts_rollout_residuals() {
        let a = builtin_matrix_by_name("A1").unwrap();
        // One Richardson-like step with a small coefficient contracts an SPD matrix.
        let params = R2N2Parameters::new(vec![], vec![-0.2]).unwrap();
        let cfg = R2N2Config::direct(1);
        let op = algorithm_operator(&params, &cfg, &a).unwrap();
        let cert = certify_convergence(&op).unwrap();
        assert!(cert.convergent());
        let mut r = rng::seeded(2);
        for _ in 0..20 {
            let b: Vec<f64> = (0..5).map(|_| rand::Rng::random_range(&mut r, -5.0..5.0)).collect();
            let p = LinearProblem::new(a.clone(), b).unwrap();
            let t = rollout(&params, &cfg, &p, &[0.0; 5], 10).unwrap();
            for w in t.residual_norms.windows(2) {
                assert!(w[1] <= cert.norm * w[0] + 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn operator_identity(seed in 0u64..1_000_000, n in 1usize..6, dim in 2usize..9) {
            let raw = gen_random_symmetric_matrix(dim, seed).unwrap();
            let a = raw.scaled(1.5 / linalg::spectral_norm(&raw).unwrap());
            let mut r = rng::seeded(seed ^ 0xabc);
            let b: Vec<f64> = (0..dim).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
            let x: Vec<f64> = (0..dim).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
            let params = random_params(n, seed, 0.5);
            let cfg = R2N2Config::direct(n).with_h(0.9);
            let p = LinearProblem::new(a.clone(), b).unwrap();
            let rk = p.evaluate(&x).unwrap();
            let (x1, _) = forward_pass(&params, &cfg, &p, &x, 0).unwrap();
            let r1 = p.evaluate(&x1).unwrap();
            let op = algorithm_operator(&params, &cfg, &a).unwrap();
            let pred = op.apply(&rk).unwrap();
            prop_assert!(linalg::norm2(&linalg::sub(&pred, &r1)) < 1e-10 * linalg::norm2(&rk));
        }
    }
}
