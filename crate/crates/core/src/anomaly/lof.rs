// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

/// k-distances below this are raised to it, so exact duplicates give
/// density ratios of 1 instead of 0/0.
pub const MIN_K_DISTANCE: f64 = 1e-12;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Local outlier factor.
///
/// Neighborhoods are the `k` nearest training points by distance (ties by
/// index) and include the point itself when it is in the training set, so
/// scoring a training point as a query reproduces its fitted value.
#[derive(Clone, Debug, PartialEq)]
pub struct Lof {
    k: usize,
    points: Vec<Vec<f64>>,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

impl Lof {
    pub fn fit(data: &[Vec<f64>], k: usize) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::Empty("LOF needs at least two points"));
        }
        if k == 0 || k > data.len() - 1 {
            return Err(Error::OutOfRange(format!("k = {k} with {} points", data.len())));
        }
        let dim = data[0].len();
        if data.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape("ragged feature vectors".into()));
        }
        let mut lof = Self {
            k,
            points: data.to_vec(),
            k_distance: Vec::new(),
            lrd: Vec::new(),
        };
        let neighborhoods: Vec<Vec<(usize, f64)>> = data.iter().map(|x| lof.neighbors(x)).collect();
        lof.k_distance = neighborhoods
            .iter()
            .map(|n| n.last().expect("k >= 1").1.max(MIN_K_DISTANCE))
            .collect();
        lof.lrd = neighborhoods.iter().map(|n| lof.density(n)).collect();
        Ok(lof)
    }

    /// Default `k = 20`, clipped to `n - 1`.
    pub fn fit_default(data: &[Vec<f64>]) -> Result<Self> {
        Self::fit(data, 20.min(data.len().saturating_sub(1)).max(1))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn neighbors(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut d: Vec<(usize, f64)> = self.points.iter().enumerate().map(|(i, p)| (i, distance(x, p))).collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d.truncate(self.k);
        d
    }

    fn density(&self, neighbors: &[(usize, f64)]) -> f64 {
        let reach: f64 = neighbors.iter().map(|&(o, d)| d.max(self.k_distance[o])).sum();
        neighbors.len() as f64 / reach
    }

    /// Mean neighbor density over own density; about 1 for inliers.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.points[0].len() {
            return Err(Error::Shape(format!("query of length {}", x.len())));
        }
        let n = self.neighbors(x);
        let own = self.density(&n);
        let mean: f64 = n.iter().map(|&(o, _)| self.lrd[o]).sum::<f64>() / n.len() as f64;
        Ok(mean / own)
    }
}
