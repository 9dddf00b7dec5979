// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Average unsuccessful-search path length in a binary search tree of `n`
/// nodes: `2 H(n-1) - 2 (n-1) / n`, with `c(0) = c(1) = 0`.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let harmonic: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
    2.0 * harmonic - 2.0 * (n - 1) as f64 / n as f64
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf {
        size: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn grow(data: &[Vec<f64>], sample: Vec<usize>, limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = Tree { nodes: Vec::new() };
        tree.build(data, sample, 0, limit, rng);
        tree
    }

    fn build(&mut self, data: &[Vec<f64>], points: Vec<usize>, depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: points.len() });
        if depth >= limit || points.len() <= 1 {
            return id;
        }
        let dim = data[points[0]].len();
        let feature = rng.random_range(0..dim);
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            (lo.min(data[p][feature]), hi.max(data[p][feature]))
        });
        if lo == hi {
            return id;
        }
        let threshold = rng.random_range(lo..hi);
        let (l, r): (Vec<usize>, Vec<usize>) = points.into_iter().partition(|&p| data[p][feature] < threshold);
        let left = self.build(data, l, depth + 1, limit, rng);
        let right = self.build(data, r, depth + 1, limit, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth as f64 + average_path_length(size),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[feature] < threshold { left } else { right };
                    depth += 1;
                }
            }
        }
    }
}

/// Isolation forest; scores near 1 are anomalous, well below 0.5 normal.
#[derive(Clone, Debug, PartialEq)]
pub struct IsolationForest {
    trees: Vec<Tree>,
    subsample: usize,
    dim: usize,
}

impl IsolationForest {
    /// `subsample` is clipped to the number of points.
    pub fn fit(data: &[Vec<f64>], n_trees: usize, subsample: usize, seed: u64) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::Empty("isolation forest needs at least two points"));
        }
        if n_trees == 0 || subsample < 2 {
            return Err(Error::InvalidArgument("need n_trees >= 1 and subsample >= 2".into()));
        }
        let dim = data[0].len();
        if dim == 0 || data.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape("ragged or empty feature vectors".into()));
        }
        let psi = subsample.min(data.len());
        let limit = (psi as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..n_trees)
            .map(|_| {
                let sample = index::sample(&mut rng, data.len(), psi).into_vec();
                Tree::grow(data, sample, limit, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            subsample: psi,
            dim,
        })
    }

    /// `2^(-E[h(x)] / c(psi))`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("query of length {} for {} features", x.len(), self.dim)));
        }
        let mean = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        Ok(2f64.powf(-mean / average_path_length(self.subsample)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent reference: boxed recursive trees drawn from the
    /// generator in the same order.
    fn reference_scores(data: &[Vec<f64>], queries: &[Vec<f64>], n_trees: usize, psi: usize, seed: u64) -> Vec<f64> {
        fn c(n: usize) -> f64 {
            if n < 2 {
                0.0
            } else {
                let mut h = 0.0;
                for i in 1..n {
                    h += 1.0 / i as f64;
                }
                2.0 * h - 2.0 * (n as f64 - 1.0) / n as f64
            }
        }
        enum T {
            L(usize),
            S(usize, f64, Box<T>, Box<T>),
        }
        fn grow(data: &[Vec<f64>], pts: &[usize], e: usize, lim: usize, rng: &mut ChaCha8Rng) -> T {
            if e >= lim || pts.len() < 2 {
                return T::L(pts.len());
            }
            let q = rng.random_range(0..data[0].len());
            let vals: Vec<f64> = pts.iter().map(|&i| data[i][q]).collect();
            let mn = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mn == mx {
                return T::L(pts.len());
            }
            let p = rng.random_range(mn..mx);
            let l: Vec<usize> = pts.iter().copied().filter(|&i| data[i][q] < p).collect();
            let r: Vec<usize> = pts.iter().copied().filter(|&i| data[i][q] >= p).collect();
            let lt = grow(data, &l, e + 1, lim, rng);
            let rt = grow(data, &r, e + 1, lim, rng);
            T::S(q, p, Box::new(lt), Box::new(rt))
        }
        fn path(t: &T, x: &[f64], e: usize) -> f64 {
            match t {
                T::L(n) => e as f64 + c(*n),
                T::S(q, p, l, r) => {
                    if x[*q] < *p {
                        path(l, x, e + 1)
                    } else {
                        path(r, x, e + 1)
                    }
                }
            }
        }
        let psi = psi.min(data.len());
        let mut lim = 0;
        while (1usize << lim) < psi {
            lim += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trees = Vec::new();
        for _ in 0..n_trees {
            let s = index::sample(&mut rng, data.len(), psi).into_vec();
            trees.push(grow(data, &s, 0, lim, &mut rng));
        }
        queries
            .iter()
            .map(|x| {
                let m: f64 = trees.iter().map(|t| path(t, x, 0)).sum::<f64>() / n_trees as f64;
                (-m / c(psi) * std::f64::consts::LN_2).exp()
            })
            .collect()
    }

    #[test]
    fn c_of_two_is_one() {
        assert_eq!(average_path_length(2), 1.0);
        assert_eq!(average_path_length(1), 0.0);
        assert!((average_path_length(3) - (2.0 * 1.5 - 4.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_on_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (n, dim, psi) in [(5, 1, 4), (12, 2, 8), (30, 3, 256), (20, 4, 16)] {
            let data: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let mut queries = data.clone();
            queries.push(vec![5.0; dim]);
            let forest = IsolationForest::fit(&data, 25, psi, 3).unwrap();
            let want = reference_scores(&data, &queries, 25, psi, 3);
            for (q, w) in queries.iter().zip(&want) {
                assert!((forest.score(q).unwrap() - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn outlier_and_degenerate_cases() {
        let mut data: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 - 10.0) * 0.01]).collect();
        data.push(vec![100.0]);
        let forest = IsolationForest::fit(&data, 100, 256, 0).unwrap();
        let far = forest.score(&[100.0]).unwrap();
        assert!(data[..20].iter().all(|x| forest.score(x).unwrap() < far));

        let same = vec![vec![1.0, 2.0]; 8];
        let forest = IsolationForest::fit(&same, 50, 256, 1).unwrap();
        let a = forest.score(&[1.0, 2.0]).unwrap();
        assert_eq!(a, forest.score(&[40.0, -3.0]).unwrap());
        assert!(IsolationForest::fit(&same[..1], 10, 256, 0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let data: Vec<Vec<f64>> = (0..15).map(|i| vec![i as f64, (i * i) as f64 % 7.0]).collect();
        let a = IsolationForest::fit(&data, 30, 8, 9).unwrap();
        let b = IsolationForest::fit(&data, 30, 8, 9).unwrap();
        assert_eq!(a, b);
    }
}
