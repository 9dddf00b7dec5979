// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrmConfig {
    /// Added to the covariance diagonal before inversion.
    pub ridge: f64,
    /// Components kept when there are no more points than dimensions.
    pub pca_dims: usize,
    /// Subtract the isotropic background term.
    pub background: bool,
}

impl Default for SrmConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            pca_dims: 32,
            background: true,
        }
    }
}

/// Relative Mahalanobis score: squared Mahalanobis distance under the
/// fitted Gaussian minus that under an isotropic Gaussian with the same
/// mean and total variance.
#[derive(Clone, Debug)]
pub struct Srm {
    /// Rows are the kept principal axes, when reduction applies.
    projection: Option<DMatrix<f64>>,
    mean: DVector<f64>,
    cholesky: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// `tr(Σ) / d`, or `None` without the background term.
    background_variance: Option<f64>,
    dim: usize,
}

impl Srm {
    pub fn fit(data: &[Vec<f64>], config: &SrmConfig) -> Result<Self> {
        let n = data.len();
        if n < 2 {
            return Err(Error::Empty("SRM needs at least two points"));
        }
        let dim = data[0].len();
        if dim == 0 || data.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape("ragged or empty feature vectors".into()));
        }
        let x = DMatrix::from_fn(n, dim, |i, j| data[i][j]);
        let (x, projection) = if n <= dim {
            let kept = config.pca_dims.min(dim);
            if n <= kept {
                return Err(Error::InvalidArgument(format!(
                    "{n} points cannot fit a Gaussian in {kept} dimensions"
                )));
            }
            let (mean, cov) = moments(&x);
            let eig = cov.symmetric_eigen();
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let p = DMatrix::from_fn(kept, dim, |r, c| eig.eigenvectors[(c, order[r])]);
            let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
            (centered * p.transpose(), Some(p))
        } else {
            (x, None)
        };
        let (mean, cov) = moments(&x);
        let d = cov.nrows();
        let trace = cov.trace();
        let regularized = cov + DMatrix::identity(d, d) * config.ridge;
        let cholesky = regularized
            .cholesky()
            .ok_or_else(|| Error::Undefined("covariance is singular after regularization".into()))?;
        let background_variance = if config.background {
            if !(trace > 0.0) {
                return Err(Error::Undefined("zero total variance".into()));
            }
            Some(trace / d as f64)
        } else {
            None
        };
        Ok(Self {
            projection,
            mean,
            cholesky,
            background_variance,
            dim,
        })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("query of length {}", x.len())));
        }
        let v = DVector::from_column_slice(x);
        let v = match &self.projection {
            Some(p) => p * v,
            None => v,
        };
        let c = v - &self.mean;
        let class = c.dot(&self.cholesky.solve(&c));
        let background = self.background_variance.map_or(0.0, |s| c.norm_squared() / s);
        Ok(class - background)
    }
}

/// Mean and maximum-likelihood covariance of the rows.
fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n;
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::stats::auroc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn score_at_mean_and_identity_case() {
        // four corners of a square: mean 0, covariance I
        let data = vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, -1.0]];
        let srm = Srm::fit(&data, &SrmConfig::default()).unwrap();
        assert_eq!(srm.score(&[0.0, 0.0]).unwrap(), 0.0);
        let plain = Srm::fit(
            &data,
            &SrmConfig {
                background: false,
                ..Default::default()
            },
        )
        .unwrap();
        let s = plain.score(&[2.0, -3.0]).unwrap();
        assert!((s - 13.0).abs() < 1e-4, "{s}");
        // relative score with isotropic class covariance cancels
        assert!(srm.score(&[2.0, -3.0]).unwrap().abs() < 1e-4);
    }

    #[test]
    fn shifted_cluster_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut draw = |shift: f64, sx: f64| -> Vec<f64> {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            vec![sx * a + shift, b]
        };
        let train: Vec<Vec<f64>> = (0..200).map(|_| draw(0.0, 3.0)).collect();
        let srm = Srm::fit(&train, &SrmConfig::default()).unwrap();
        let normal: Vec<f64> = (0..200).map(|_| srm.score(&draw(0.0, 3.0)).unwrap()).collect();
        // five standard deviations along the low-variance axis
        let shifted: Vec<f64> = (0..200)
            .map(|_| {
                let mut x = draw(0.0, 3.0);
                x[1] += 5.0;
                srm.score(&x).unwrap()
            })
            .collect();
        assert!(auroc(&shifted, &normal).unwrap() >= 0.95);
        assert!(train.iter().all(|x| srm.score(x).unwrap().is_finite()));
    }

    #[test]
    fn reduces_wide_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..64).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let srm = Srm::fit(&data, &SrmConfig::default()).unwrap();
        assert!(data.iter().all(|x| srm.score(x).unwrap().is_finite()));
        assert!(Srm::fit(&data[..20], &SrmConfig::default()).is_err());
    }
}
