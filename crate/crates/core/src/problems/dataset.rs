use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BuiltinMatrix, ChandrasekharInstance, ChandrasekharProblem, IvpProblem, LinearProblem, ProblemInstance};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::rng::{self, GENERATOR_TAG};

pub const TRAIN_FRACTION: f64 = 0.70;

// Independent streams per draw type under one seed.
const STREAM_MATRIX: u64 = 1;
const STREAM_RHS: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_IVP: u64 = 4;
const STREAM_X0: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffled 70/30 split of `0..count`, train size rounded down. Both
    /// index lists are returned sorted.
    pub fn random(count: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(&mut rng::substream(seed, STREAM_SPLIT));
        let n_train = (TRAIN_FRACTION * count as f64).floor() as usize;
        let mut train = idx[..n_train].to_vec();
        let mut test = idx[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self { train, test }
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        let mut seen = vec![false; count];
        for &i in self.train.iter().chain(&self.test) {
            if i >= count || seen[i] {
                return Err(Error::Invalid(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid("split does not cover every instance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub generator_tag: String,
    pub seed: u64,
    pub params: serde_json::Value,
    pub instances: Vec<ProblemInstance>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        instances: Vec<ProblemInstance>,
        split: Split,
        seed: u64,
        params: serde_json::Value,
    ) -> Result<Self> {
        split.validate(instances.len())?;
        Ok(Self {
            generator_tag: GENERATOR_TAG.to_string(),
            seed,
            params,
            instances,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn train(&self) -> Vec<&ProblemInstance> {
        self.split.train.iter().map(|&i| &self.instances[i]).collect()
    }

    pub fn test(&self) -> Vec<&ProblemInstance> {
        self.split.test.iter().map(|&i| &self.instances[i]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(s)?;
        ds.split.validate(ds.instances.len())?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Serde(e.to_string()))?;
        Self::from_json(&s)
    }
}

/// `A = ÃᵀÃ + diag(λ)` with `Ã_ij ~ N(0, sigma²)`.
pub fn gen_linear_matrix(sigma: f64, lambda: &[f64], seed: u64) -> Result<DenseMatrix> {
    let m = lambda.len();
    let mut r = rng::substream(seed, STREAM_MATRIX);
    let entries: Vec<f64> = (0..m * m)
        .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut r))
        .collect();
    let noise = DenseMatrix::from_row_major(m, m, entries)?;
    let gram = noise.transpose().mat_mul(&noise)?;
    gram.add(&DenseMatrix::from_diagonal(lambda))
}

/// `A = ÃÃᵀ` with `σ ~ U(0, 5)` and `Ã_ij ~ U(0, σ)`.
pub fn gen_random_symmetric_matrix(dim: usize, seed: u64) -> Result<DenseMatrix> {
    let mut r = rng::substream(seed, STREAM_MATRIX);
    let sigma: f64 = r.random_range(0.0..5.0);
    let entries: Vec<f64> = (0..dim * dim).map(|_| r.random::<f64>() * sigma).collect();
    let noise = DenseMatrix::from_row_major(dim, dim, entries)?;
    noise.mat_mul(&noise.transpose())
}

/// `b_i = b̃ + b'_i` with `b'_i ~ U(−w, w)^m`.
pub fn sample_rhs(b_tilde: &[f64], noise_halfwidth: f64, count: usize, seed: u64) -> Result<Vec<DenseVector>> {
    if !(noise_halfwidth >= 0.0) {
        return Err(Error::Invalid(format!("noise half-width {noise_halfwidth} < 0")));
    }
    let mut r = rng::substream(seed, STREAM_RHS);
    Ok((0..count)
        .map(|_| {
            b_tilde
                .iter()
                .map(|b| {
                    if noise_halfwidth == 0.0 {
                        *b
                    } else {
                        b + r.random_range(-noise_halfwidth..noise_halfwidth)
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDatasetParams {
    pub matrices: Vec<BuiltinMatrix>,
    /// Number of right-hand sides; each is paired with every matrix.
    pub samples: usize,
    pub noise_halfwidth: f64,
    pub b_mean: DenseVector,
}

impl Default for LinearDatasetParams {
    fn default() -> Self {
        Self {
            matrices: vec![BuiltinMatrix::new(1).expect("A1")],
            samples: 200,
            noise_halfwidth: 1.0,
            b_mean: super::builtin_b_tilde(),
        }
    }
}

/// Pairs one set of sampled right-hand sides with each listed matrix. The
/// split is drawn over right-hand sides so test vectors are unseen for
/// every matrix.
pub fn gen_linear_dataset(params: &LinearDatasetParams, seed: u64) -> Result<Dataset> {
    let rhs = sample_rhs(&params.b_mean, params.noise_halfwidth, params.samples, seed)?;
    let rhs_split = Split::random(params.samples, seed);
    let mut instances = Vec::with_capacity(rhs.len() * params.matrices.len());
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for id in &params.matrices {
        let a = id.matrix();
        for (i, b) in rhs.iter().enumerate() {
            let idx = instances.len();
            instances.push(ProblemInstance::linear(
                LinearProblem::new(a.clone(), b.clone())?,
                Some(id.to_string()),
            ));
            if rhs_split.train.binary_search(&i).is_ok() {
                split.train.push(idx);
            } else {
                split.test.push(idx);
            }
        }
    }
    Dataset::new(instances, split, seed, serde_json::to_value(params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvpDatasetParams {
    pub count: usize,
    pub a_range: (f64, f64),
    pub x1_range: (f64, f64),
    pub x2_range: (f64, f64),
    pub h_range: (f64, f64),
}

impl Default for IvpDatasetParams {
    fn default() -> Self {
        Self {
            count: 200,
            a_range: (1.35, 1.65),
            x1_range: (-4.0, -3.0),
            x2_range: (0.0, 2.0),
            h_range: (0.01, 0.1),
        }
    }
}

/// Van der Pol instances with uniform `a`, `x0` and equidistant `h`.
pub fn gen_ivp_dataset(count: usize, seed: u64) -> Result<Dataset> {
    gen_ivp_dataset_with(&IvpDatasetParams {
        count,
        ..Default::default()
    }, seed)
}

pub fn gen_ivp_dataset_with(params: &IvpDatasetParams, seed: u64) -> Result<Dataset> {
    let count = params.count;
    if count == 0 {
        return Err(Error::Invalid("IVP dataset needs count >= 1".into()));
    }
    let mut r = rng::substream(seed, STREAM_IVP);
    let (h_lo, h_hi) = params.h_range;
    let instances = (0..count)
        .map(|i| {
            let h = if count == 1 {
                h_lo
            } else {
                h_lo + (h_hi - h_lo) * i as f64 / (count - 1) as f64
            };
            let a = r.random_range(params.a_range.0..params.a_range.1);
            let x1 = r.random_range(params.x1_range.0..params.x1_range.1);
            let x2 = r.random_range(params.x2_range.0..params.x2_range.1);
            IvpProblem::new(a, vec![x1, x2], h, 0.0).map(ProblemInstance::Ivp)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(instances, Split::random(count, seed), seed, serde_json::to_value(params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChandrasekharDatasetParams {
    pub ms: Vec<usize>,
    pub cs: Vec<f64>,
    pub samples_per: usize,
    /// Every component of the mean start point.
    pub x0_mean: f64,
    /// Per-component standard deviation of the start point.
    pub x0_std: f64,
}

impl Default for ChandrasekharDatasetParams {
    fn default() -> Self {
        Self {
            ms: vec![10, 20],
            cs: vec![0.875, 0.905, 0.935],
            samples_per: 50,
            x0_mean: 1.0,
            x0_std: 0.2,
        }
    }
}

/// One block of `samples_per` start points for every `(m, c)` pair.
pub fn gen_chandrasekhar_dataset(params: &ChandrasekharDatasetParams, seed: u64) -> Result<Dataset> {
    let mut r = rng::substream(seed, STREAM_X0);
    let mut instances = Vec::new();
    for &m in &params.ms {
        for &c in &params.cs {
            let problem = ChandrasekharProblem::new(c, m)?;
            for _ in 0..params.samples_per {
                let x0 = (0..m)
                    .map(|_| params.x0_mean + params.x0_std * Distribution::<f64>::sample(&StandardNormal, &mut r))
                    .collect();
                instances.push(ProblemInstance::Chandrasekhar(ChandrasekharInstance {
                    problem: problem.clone(),
                    x0,
                }));
            }
        }
    }
    let split = Split::random(instances.len(), seed);
    Dataset::new(instances, split, seed, serde_json::to_value(params)?)
}

/// `(Q Ā Qᵀ, Q b̄)` with `Ā`, `b̄` zero-padded to `Q`'s dimension.
pub fn embed_problem(p: &LinearProblem, q: &DenseMatrix) -> Result<LinearProblem> {
    if !q.is_square() || q.rows() < p.b.len() {
        return Err(Error::Dimension(format!(
            "embedding a {}-dimensional problem with a {}x{} matrix",
            p.b.len(),
            q.rows(),
            q.cols()
        )));
    }
    let defect = q.orthogonality_defect();
    if defect > 1e-10 {
        return Err(Error::Invalid(format!("embedding matrix not orthogonal (defect {defect:e})")));
    }
    let dim = q.rows();
    let a = p.a.zero_padded(dim)?;
    let mut b = p.b.clone();
    b.resize(dim, 0.0);
    let qa = q.mat_mul(&a)?.mat_mul(&q.transpose())?;
    LinearProblem::new(qa, linalg::mat_vec(q, &b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::haar_orthogonal;
    use crate::problems::builtin_matrix_by_name;

    #[test]
    fn zero_noise_matrix_is_diagonal() {
        let lambda = [1.0, 0.75, 0.5, 0.1, 0.1];
        assert_eq!(gen_linear_matrix(0.0, &lambda, 3).unwrap(), DenseMatrix::from_diagonal(&lambda));
    }

    #[test]
    fn generated_matrices_are_spd_and_reproducible() {
        let lambda = [1.0, 0.75, 0.5, 0.1, 0.1];
        for seed in 0..50 {
            let a = gen_linear_matrix(0.1, &lambda, seed).unwrap();
            assert!(a.is_symmetric(1e-15));
            assert!(linalg::cholesky(&a).is_some());
            assert_eq!(a, gen_linear_matrix(0.1, &lambda, seed).unwrap());
        }
        let s = gen_random_symmetric_matrix(5, 8).unwrap();
        assert!(s.is_symmetric(1e-12));
    }

    #[test]
    fn generated_matrix_eigenvalues_are_positive() {
        // Shifted power iteration gives λ_min = s − λ_max(sI − A).
        let a = gen_linear_matrix(0.1, &[1.0, 0.75, 0.5, 0.1, 0.1], 42).unwrap();
        let top = linalg::spectral_norm(&a).unwrap();
        let shifted = DenseMatrix::identity(5).scaled(top).sub(&a).unwrap();
        let lambda_min = top - linalg::spectral_norm(&shifted).unwrap();
        assert!(lambda_min > 0.0);
    }

    #[test]
    fn rhs_sampling_bounds() {
        let bt = super::super::builtin_b_tilde();
        for b in sample_rhs(&bt, 0.0, 10, 1).unwrap() {
            assert_eq!(b, bt);
        }
        for b in sample_rhs(&bt, 1.0, 500, 2).unwrap() {
            for (x, m) in b.iter().zip(&bt) {
                assert!((x - m).abs() <= 1.0);
            }
        }
        for b in sample_rhs(&[0.0; 5], 5.0, 500, 3).unwrap() {
            assert!(b.iter().all(|x| (-5.0..=5.0).contains(x)));
        }
        assert!(sample_rhs(&bt, -1.0, 1, 0).is_err());
    }

    #[test]
    fn ivp_dataset_ranges_and_split() {
        let ds = gen_ivp_dataset(101, 7).unwrap();
        assert_eq!(ds.split.train.len(), 70);
        assert_eq!(ds.split.test.len(), 31);
        let mut hs = Vec::new();
        for inst in &ds.instances {
            let ProblemInstance::Ivp(p) = inst else { panic!() };
            assert!((1.35..=1.65).contains(&p.a));
            assert!((0.01..=0.1 + 1e-15).contains(&p.h));
            assert!((-4.0..=-3.0).contains(&p.x0[0]));
            assert!((0.0..=2.0).contains(&p.x0[1]));
            hs.push(p.h);
        }
        assert_eq!(hs[0], 0.01);
        assert!((hs[100] - 0.1).abs() < 1e-15);
        let d = hs[1] - hs[0];
        assert!(hs.windows(2).all(|w| ((w[1] - w[0]) - d).abs() < 1e-15));
    }

    #[test]
    fn chandrasekhar_dataset_layout_and_statistics() {
        let params = ChandrasekharDatasetParams {
            samples_per: 40,
            ..Default::default()
        };
        let ds = gen_chandrasekhar_dataset(&params, 11).unwrap();
        assert_eq!(ds.len(), 6 * 40);
        let combos: std::collections::BTreeSet<String> = ds.instances.iter().map(|i| i.label()).collect();
        assert_eq!(combos.len(), 6);

        let mut sum = 0.0;
        let mut count = 0usize;
        for inst in &ds.instances {
            let ProblemInstance::Chandrasekhar(c) = inst else { panic!() };
            sum += c.x0.iter().sum::<f64>();
            count += c.x0.len();
        }
        let mean = sum / count as f64;
        assert!((mean - 1.0).abs() < 3.0 * 0.2 / (count as f64).sqrt());

        let extrap = ChandrasekharDatasetParams {
            cs: vec![0.85, 0.95],
            ..params
        };
        assert_eq!(gen_chandrasekhar_dataset(&extrap, 1).unwrap().len(), 2 * 2 * 40);
    }

    #[test]
    fn linear_dataset_split_is_over_rhs() {
        let params = LinearDatasetParams {
            matrices: ["A1", "A2", "A3"].iter().map(|s| s.parse().unwrap()).collect(),
            samples: 20,
            ..Default::default()
        };
        let ds = gen_linear_dataset(&params, 5).unwrap();
        assert_eq!(ds.len(), 60);
        assert_eq!(ds.split.train.len(), 42);
        ds.split.validate(60).unwrap();
        // The same right-hand side lands on the same side of the split for every matrix.
        for &i in &ds.split.train {
            assert!(ds.split.train.contains(&((i + 20) % 60)));
        }
    }

    #[test]
    fn dataset_json_round_trip_and_reproducibility() {
        let ds = gen_chandrasekhar_dataset(
            &ChandrasekharDatasetParams {
                samples_per: 3,
                ..Default::default()
            },
            99,
        )
        .unwrap();
        let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
        let again = gen_chandrasekhar_dataset(
            &ChandrasekharDatasetParams {
                samples_per: 3,
                ..Default::default()
            },
            99,
        )
        .unwrap();
        assert_eq!(again.to_json().unwrap(), ds.to_json().unwrap());
    }

    #[test]
    fn embedding_with_identity_is_noop() {
        let p = LinearProblem::new(builtin_matrix_by_name("A1").unwrap(), super::super::builtin_b_tilde()).unwrap();
        let e = embed_problem(&p, &DenseMatrix::identity(5)).unwrap();
        assert_eq!(e, p);
    }

    #[test]
    fn embedded_solution_is_rotated_padded_solution() {
        let p = LinearProblem::new(builtin_matrix_by_name("A1").unwrap(), super::super::builtin_b_tilde()).unwrap();
        let q = haar_orthogonal(15, 0).unwrap();
        let e = embed_problem(&p, &q).unwrap();
        let mut x = p.solve().unwrap();
        x.resize(15, 0.0);
        let expected = linalg::mat_vec(&q, &x).unwrap();
        // The padded block is singular, so compare residuals instead of solving.
        let r = e.residual(&expected).unwrap();
        assert!(linalg::norm_inf(&r) < 1e-12);
    }

    #[test]
    fn embedding_rejects_non_orthogonal() {
        let p = LinearProblem::new(DenseMatrix::identity(2), vec![1.0, 1.0]).unwrap();
        let not_q = DenseMatrix::identity(3).scaled(2.0);
        assert!(matches!(embed_problem(&p, &not_q), Err(Error::Invalid(_))));
    }
}
