//! Embedding prototyping: k-means clustering of a client's node embeddings
//! into C centroids, and the one-time all-to-all prototype broadcast that
//! lets generator training run without any further inter-client traffic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fed::CommLedger;
use crate::nn::Matrix;

/// A client's cluster centroids over its node embeddings; the only artifact
/// shared across clients for generator training.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub owner: usize,
    /// C x d_z.
    pub centroids: Matrix,
    pub member_counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn c(&self) -> usize {
        self.centroids.rows()
    }

    pub fn d_z(&self) -> usize {
        self.centroids.cols()
    }
}

pub struct KmeansResult {
    /// C x d_z.
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Objective (sum of squared distances to the assigned centroid) after
    /// each assignment step; non-increasing.
    pub objective: Vec<f64>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding, Euclidean metric. Runs until
/// the assignment reaches a fixpoint or `max_iters`; an emptied cluster is
/// re-seeded from the point farthest from its currently assigned centroid.
pub fn kmeans(z: &Matrix, c: usize, max_iters: usize, seed: u64) -> Result<KmeansResult> {
    let n = z.rows();
    let d = z.cols();
    if c == 0 || n < c {
        return Err(Error::Argument(format!(
            "kmeans needs at least C={} points, got {}",
            c, n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++: first centroid uniform, then D^2-weighted.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(c);
    centroids.push(z.row(rng.gen_range(0..n)).to_vec());
    let mut best_d2: Vec<f64> = (0..n).map(|i| dist_sq(z.row(i), &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = best_d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        };
        centroids.push(z.row(next).to_vec());
        for i in 0..n {
            best_d2[i] = best_d2[i].min(dist_sq(z.row(i), centroids.last().unwrap()));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut objective = Vec::new();
    for _ in 0..max_iters.max(1) {
        // assignment step
        let mut obj = 0.0;
        let mut changed = false;
        for i in 0..n {
            let (mut best, mut best_k) = (f64::INFINITY, 0);
            for (k, cent) in centroids.iter().enumerate() {
                let d2 = dist_sq(z.row(i), cent);
                if d2 < best {
                    best = d2;
                    best_k = k;
                }
            }
            if assignments[i] != best_k {
                assignments[i] = best_k;
                changed = true;
            }
            obj += best;
        }
        let first = objective.is_empty();
        objective.push(obj);
        if !changed && !first {
            break;
        }
        // update step
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, &x) in sums[assignments[i]].iter_mut().zip(z.row(i)) {
                *s += x;
            }
        }
        for k in 0..c {
            if counts[k] > 0 {
                let inv = 1.0 / counts[k] as f64;
                centroids[k] = sums[k].iter().map(|s| s * inv).collect();
            } else {
                // farthest-point reseeding keeps C clusters alive
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist_sq(z.row(a), &centroids[assignments[a]])
                            .partial_cmp(&dist_sq(z.row(b), &centroids[assignments[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[k] = z.row(far).to_vec();
            }
        }
    }

    let centroids = Matrix::from_fn(c, d, |k, j| centroids[k][j]);
    Ok(KmeansResult {
        centroids,
        assignments,
        objective,
    })
}

/// Cluster a client's embeddings (one row per retained node) into C
/// prototypes.
pub fn build_prototypes(owner: usize, z: &Matrix, c: usize, seed: u64) -> Result<PrototypeSet> {
    let km = kmeans(z, c, 100, seed)?;
    let mut member_counts = vec![0usize; c];
    for &a in &km.assignments {
        member_counts[a] += 1;
    }
    Ok(PrototypeSet {
        owner,
        centroids: km.centroids,
        member_counts,
    })
}

/// One-time all-to-all prototype exchange. Returns, per client, the full
/// list of M sets (own set first is not guaranteed; sets keep their owner
/// ids). Records M x C x d_z transferred values under "prototype_broadcast";
/// a single-client federation transfers nothing.
pub fn broadcast_prototypes(
    sets: &[PrototypeSet],
    ledger: &mut CommLedger,
) -> Vec<Vec<PrototypeSet>> {
    let m = sets.len();
    if m > 1 {
        let values: u64 = sets.iter().map(|s| (s.c() * s.d_z()) as u64).sum();
        ledger.record("prototype_broadcast", m as u64, values);
    } else {
        ledger.record("prototype_broadcast", 0, 0);
    }
    (0..m).map(|_| sets.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_data(seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(40, 3, |i, _| {
            let center = if i < 20 { 0.0 } else { 5.0 };
            center + rng.gen_range(-0.5..0.5)
        })
    }

    fn objective_of(z: &Matrix, centroids: &Matrix, assign: &[usize]) -> f64 {
        (0..z.rows())
            .map(|i| dist_sq(z.row(i), centroids.row(assign[i])))
            .sum()
    }

    #[test]
    fn c_one_is_column_mean() {
        let z = blob_data(0);
        let km = kmeans(&z, 1, 100, 1).unwrap();
        for j in 0..z.cols() {
            let mean: f64 = (0..z.rows()).map(|i| z.get(i, j)).sum::<f64>() / z.rows() as f64;
            assert!((km.centroids.get(0, j) - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn distinct_repeated_points_recovered_exactly() {
        // 3 distinct points, each repeated 5 times
        let pts = [[0.0, 0.0], [1.0, 5.0], [-3.0, 2.0]];
        let z = Matrix::from_fn(15, 2, |i, j| pts[i % 3][j]);
        let km = kmeans(&z, 3, 100, 7).unwrap();
        assert!(*km.objective.last().unwrap() < 1e-18);
        for i in 0..15 {
            assert!(dist_sq(z.row(i), km.centroids.row(km.assignments[i])) < 1e-18);
        }
    }

    #[test]
    fn beats_random_assignment_baselines() {
        let z = blob_data(3);
        let km = kmeans(&z, 2, 100, 5).unwrap();
        let fitted = *km.objective.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let assign: Vec<usize> = (0..z.rows()).map(|_| rng.gen_range(0..2)).collect();
            // centroids = means of the random assignment
            let mut sums = vec![vec![0.0; z.cols()]; 2];
            let mut counts = [0usize; 2];
            for i in 0..z.rows() {
                counts[assign[i]] += 1;
                for j in 0..z.cols() {
                    sums[assign[i]][j] += z.get(i, j);
                }
            }
            let cents = Matrix::from_fn(2, z.cols(), |k, j| {
                if counts[k] > 0 {
                    sums[k][j] / counts[k] as f64
                } else {
                    0.0
                }
            });
            let baseline = objective_of(&z, &cents, &assign);
            assert!(fitted <= baseline + 1e-9);
        }
    }

    #[test]
    fn objective_history_non_increasing() {
        let z = blob_data(11);
        let km = kmeans(&z, 4, 100, 2).unwrap();
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn centroid_recomputation_matches() {
        let z = blob_data(17);
        let km = kmeans(&z, 3, 100, 4).unwrap();
        let mut sums = vec![vec![0.0; z.cols()]; 3];
        let mut counts = vec![0usize; 3];
        for i in 0..z.rows() {
            counts[km.assignments[i]] += 1;
            for j in 0..z.cols() {
                sums[km.assignments[i]][j] += z.get(i, j);
            }
        }
        for k in 0..3 {
            assert!(counts[k] > 0);
            for j in 0..z.cols() {
                assert!((km.centroids.get(k, j) - sums[k][j] / counts[k] as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn n_equals_c_each_point_its_own_prototype() {
        let pts = [[0.0, 0.0], [1.0, 5.0], [-3.0, 2.0], [9.0, 9.0]];
        let z = Matrix::from_fn(4, 2, |i, j| pts[i][j]);
        let set = build_prototypes(0, &z, 4, 3).unwrap();
        assert_eq!(set.member_counts, vec![1, 1, 1, 1]);
        // every point is some centroid
        for i in 0..4 {
            let hit = (0..4).any(|k| dist_sq(z.row(i), set.centroids.row(k)) < 1e-18);
            assert!(hit);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let z = Matrix::zeros(2, 3);
        assert!(kmeans(&z, 3, 100, 0).is_err());
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let z = blob_data(23);
        let a = build_prototypes(1, &z, 3, 9).unwrap();
        let b = build_prototypes(1, &z, 3, 9).unwrap();
        assert!(a.centroids.max_abs_diff(&b.centroids) == 0.0);
        assert_eq!(a.member_counts, b.member_counts);
    }

    #[test]
    fn member_counts_sum_to_n() {
        let z = blob_data(29);
        let set = build_prototypes(0, &z, 5, 1).unwrap();
        assert_eq!(set.member_counts.iter().sum::<usize>(), z.rows());
    }

    #[test]
    fn non_singleton_centroids_are_aggregates() {
        let z = blob_data(31);
        let km = kmeans(&z, 2, 100, 6).unwrap();
        let mut counts = vec![0usize; 2];
        for &a in &km.assignments {
            counts[a] += 1;
        }
        for k in 0..2 {
            if counts[k] > 1 {
                for i in 0..z.rows() {
                    assert!(dist_sq(z.row(i), km.centroids.row(k)) > 1e-12);
                }
            }
        }
    }

    #[test]
    fn broadcast_records_m_c_dz_values() {
        let z = blob_data(37);
        let sets: Vec<PrototypeSet> = (0..3)
            .map(|owner| build_prototypes(owner, &z, 10, owner as u64).unwrap())
            .collect();
        // widen to d_z = 128 by padding with zeros to match the arithmetic
        let sets: Vec<PrototypeSet> = sets
            .into_iter()
            .map(|s| PrototypeSet {
                owner: s.owner,
                centroids: Matrix::from_fn(10, 128, |i, j| {
                    if j < 3 {
                        s.centroids.get(i, j)
                    } else {
                        0.0
                    }
                }),
                member_counts: s.member_counts,
            })
            .collect();
        let mut ledger = CommLedger::new();
        let views = broadcast_prototypes(&sets, &mut ledger);
        assert_eq!(ledger.phase("prototype_broadcast").values, 3 * 10 * 128);
        assert_eq!(views.len(), 3);
        for view in &views {
            assert_eq!(view.len(), 3);
            for j in 0..3 {
                assert!(view[j].centroids.max_abs_diff(&sets[j].centroids) == 0.0);
                assert_eq!(view[j].owner, sets[j].owner);
            }
        }
    }

    #[test]
    fn single_client_broadcast_transfers_nothing() {
        let z = blob_data(41);
        let set = build_prototypes(0, &z, 4, 0).unwrap();
        let mut ledger = CommLedger::new();
        broadcast_prototypes(&[set], &mut ledger);
        assert_eq!(ledger.phase("prototype_broadcast").values, 0);
    }
}
