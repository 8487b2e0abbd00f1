//! Lloyd's k-means with k-means++ seeding, used to split a single anomaly
//! label into pseudo-classes.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster id in `0..k` for every row.
    pub assignment: Vec<usize>,
    pub centres: Matrix,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Sum of squared distances from each row to its assigned centre.
pub fn inertia(points: &Matrix, centres: &Matrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(points.row(i), centres.row(c)))
        .sum()
}

fn nearest(point: &[f64], centres: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centres.rows() {
        let d = sq_dist(point, centres.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeding<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centres = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centres.row_mut(0).copy_from_slice(points.row(first));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centres.row(0))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(rng),
            // Every point coincides with a chosen centre.
            Err(_) => rng.random_range(0..n),
        };
        centres.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centres.row(c)));
        }
    }
    centres
}

/// Clusters the rows of `points` into `k` groups.
///
/// Runs until the assignment stops changing or [`MAX_ITERATIONS`] is hit.
/// An empty cluster is re-seeded at the point farthest from its current
/// centre.
pub fn kmeans_split(points: &Matrix, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.rows();
    if k < 2 {
        return Err(Error::Config(format!("k-means needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("k-means with k = {k} on only {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = plus_plus_seeding(points, k, &mut rng);
    let mut assignment: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centres).0).collect();
    let mut history = vec![inertia(points, &centres, &assignment)];
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        // Update step.
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        // Repair empty clusters.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(points.row(i), centres.row(assignment[i]))))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centres.row_mut(c).copy_from_slice(points.row(far.0));
            }
        }
        // Assignment step; ties keep the current cluster.
        let mut changed = false;
        for i in 0..n {
            let current = sq_dist(points.row(i), centres.row(assignment[i]));
            let (best, d) = nearest(points.row(i), &centres);
            if d < current && best != assignment[i] {
                assignment[i] = best;
                changed = true;
            }
        }
        history.push(inertia(points, &centres, &assignment));
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        assignment,
        centres,
        inertia_history: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn obvious_bipartition() {
        let pts = Matrix::column(&[0.0, 0.1, 10.0, 10.1]);
        let r = kmeans_split(&pts, 2, 3).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
    }

    #[test]
    fn identical_points_terminate() {
        let pts = Matrix::filled(10, 3, 1.5);
        let r = kmeans_split(&pts, 2, 0).unwrap();
        assert!(r.iterations <= MAX_ITERATIONS);
        let mut used: Vec<usize> = r.assignment.clone();
        used.dedup();
        assert_eq!(used.len(), 1);
        assert_eq!(r.inertia(), 0.0);
    }

    #[test]
    fn bad_arguments() {
        assert!(kmeans_split(&Matrix::zeros(5, 2), 1, 0).is_err());
        assert!(kmeans_split(&Matrix::zeros(2, 2), 3, 0).is_err());
    }

    #[test]
    fn inertia_monotone_and_beats_random_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let k = 2 + trial % 3;
            let centres: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)))
                .collect();
            let mut data = Vec::new();
            for i in 0..120 {
                let (cx, cy) = centres[i % k];
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                data.extend([cx + dx, cy + dy]);
            }
            let pts = Matrix::from_vec(120, 2, data).unwrap();
            let r = kmeans_split(&pts, k, trial as u64).unwrap();
            for w in r.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.inertia_history);
            }
            let random: Vec<usize> = (0..120).map(|_| rng.random_range(0..k)).collect();
            let mut sums = Matrix::zeros(k, 2);
            let mut counts = vec![0.0f64; k];
            for (i, &c) in random.iter().enumerate() {
                counts[c] += 1.0;
                sums.set(c, 0, sums.get(c, 0) + pts.get(i, 0));
                sums.set(c, 1, sums.get(c, 1) + pts.get(i, 1));
            }
            for c in 0..k {
                for j in 0..2 {
                    sums.set(c, j, sums.get(c, j) / counts[c].max(1.0));
                }
            }
            assert!(r.inertia() <= inertia(&pts, &sums, &random));
        }
    }
}
