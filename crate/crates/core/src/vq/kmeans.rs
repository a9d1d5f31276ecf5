//! Lloyd's k-means with k-means++ seeding, used to initialize codebooks.

use log::warn;
use rand::Rng;
use rayon::prelude::*;

use super::{Codebook, VqError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iters: 25,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub codebook: Codebook,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, c)| {
            let d = f64::from(*x) - c;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    'entries: for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let mut d = 0.0;
        for (x, cj) in point.iter().zip(c) {
            let diff = f64::from(*x) - cj;
            d += diff * diff;
            if d >= best.1 {
                continue 'entries;
            }
        }
        best = (k, d);
    }
    best
}

fn seed_plus_plus<R: Rng + ?Sized>(data: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(point(first).iter().map(|&v| f64::from(v)));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(point(i), &centroids[..dim]))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // rounding can walk past the last positive weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(point(pick).iter().map(|&v| f64::from(v)));
        let c = &centroids[start..];
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = sq_dist(point(i), c);
            if nd < *d {
                *d = nd;
            }
        });
    }
    centroids
}

/// Cluster `data` (row-major, `dim` columns) into `entries` centroids.
///
/// When `entries` exceeds the number of points, the surplus entries are
/// copies of randomly chosen points.
pub fn kmeans_init<R: Rng + ?Sized>(
    data: &[f32],
    dim: usize,
    entries: usize,
    rng: &mut R,
    opts: &KMeansOptions,
) -> Result<KMeans, VqError> {
    if dim == 0 || entries == 0 {
        return Err(VqError::EmptyCodebook);
    }
    if !data.len().is_multiple_of(dim) {
        return Err(VqError::Shape { len: data.len(), dim });
    }
    let n = data.len() / dim;
    if n == 0 {
        return Err(VqError::EmptyData);
    }
    let k = entries.min(n);
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut centroids = seed_plus_plus(data, dim, k, rng);
    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        let assign: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(point(i), &centroids, dim))
            .collect();
        objective.push(assign.iter().map(|a| a.1).sum());

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += f64::from(v);
            }
        }

        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    next[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }

        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            // farthest points first; a point can seed only one cluster
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| assign[b].1.total_cmp(&assign[a].1).then(a.cmp(&b)));
            for (&c, &p) in empty.iter().zip(&order) {
                let src = assign[p].0;
                for j in 0..dim {
                    next[c * dim + j] = f64::from(point(p)[j]);
                }
                // the donor loses the point; its mean must be recomputed
                counts[src] -= 1;
                counts[c] = 1;
                if counts[src] > 0 {
                    for j in 0..dim {
                        sums[src * dim + j] -= f64::from(point(p)[j]);
                        next[src * dim + j] = sums[src * dim + j] / counts[src] as f64;
                    }
                }
            }
        }

        let movement = centroids
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < opts.tol {
            converged = true;
            break;
        }
    }

    let mut vectors: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    if entries > n {
        warn!("k-means: {entries} entries requested for {n} points; duplicating random points");
        for _ in n..entries {
            let p = rng.random_range(0..n);
            vectors.extend_from_slice(point(p));
        }
    }
    let codebook = Codebook::new(dim, vectors)?;
    Ok(KMeans {
        codebook,
        objective,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn objective(data: &[f32], dim: usize, cb: &Codebook) -> f64 {
        data.chunks_exact(dim).map(|p| cb.nearest(p).unwrap().1).sum()
    }

    /// Best 2-clustering by enumerating every bipartition.
    fn exhaustive_two_clusters(points: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let mut cents = vec![];
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<_> = (0..n).filter(|&i| (mask >> i & 1 == 1) == side).collect();
                let m = members.len() as f64;
                let c = [
                    members.iter().map(|&i| points[i][0]).sum::<f64>() / m,
                    members.iter().map(|&i| points[i][1]).sum::<f64>() / m,
                ];
                cost += members
                    .iter()
                    .map(|&i| (points[i][0] - c[0]).powi(2) + (points[i][1] - c[1]).powi(2))
                    .sum::<f64>();
                cents.push(c);
            }
            if cost < best.0 {
                best = (cost, cents);
            }
        }
        best
    }

    #[test]
    fn two_obvious_clusters() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let (cost, want) = exhaustive_two_clusters(&pts);
        assert_eq!(cost, 1.0);
        let data: Vec<f32> = pts.iter().flatten().map(|&v| v as f32).collect();
        for seed in 0..10 {
            let km = kmeans_init(&data, 2, 2, &mut rng::stream(seed, &[]), &KMeansOptions::default()).unwrap();
            let mut got: Vec<[f32; 2]> = (0..2)
                .map(|k| [km.codebook.vector(k)[0], km.codebook.vector(k)[1]])
                .collect();
            got.sort_by(|a, b| a[0].total_cmp(&b[0]));
            let mut want = want.clone();
            want.sort_by(|a, b| a[0].total_cmp(&b[0]));
            for (g, w) in got.iter().zip(&want) {
                assert_eq!([g[0] as f64, g[1] as f64], *w);
            }
            assert!(km.converged);
        }
    }

    #[test]
    fn one_centroid_per_point() {
        let data: Vec<f32> = (0..20).map(|i| (i * i) as f32 * 0.37).collect();
        let km = kmeans_init(&data, 2, 10, &mut rng::stream(1, &[]), &KMeansOptions::default()).unwrap();
        assert_eq!(objective(&data, 2, &km.codebook), 0.0);
        for p in data.chunks_exact(2) {
            assert!((0..10).any(|k| km.codebook.vector(k) == p));
        }
    }

    #[test]
    fn surplus_entries_are_data_points() {
        let data = vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0];
        let km = kmeans_init(&data, 2, 8, &mut rng::stream(2, &[]), &KMeansOptions::default()).unwrap();
        assert_eq!(km.codebook.entries(), 8);
        for k in 0..8 {
            assert!(data.chunks_exact(2).any(|p| p == km.codebook.vector(k)));
        }
    }

    #[test]
    fn rejects_empty_data() {
        assert_eq!(
            kmeans_init(&[], 3, 4, &mut rng::stream(0, &[]), &KMeansOptions::default()).unwrap_err(),
            VqError::EmptyData
        );
    }

    #[test]
    fn identical_points() {
        let data = vec![1.5f32; 30];
        let km = kmeans_init(&data, 3, 4, &mut rng::stream(3, &[]), &KMeansOptions::default()).unwrap();
        assert_eq!(objective(&data, 3, &km.codebook), 0.0);
    }

    #[test]
    fn converged_centroids_are_cluster_means() {
        let mut r = rng::stream(5, &[]);
        let data: Vec<f32> = (0..600).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let opts = KMeansOptions {
            max_iters: 500,
            tol: 1e-9,
        };
        let km = kmeans_init(&data, 3, 8, &mut rng::stream(6, &[]), &opts).unwrap();
        assert!(km.converged);
        let cb = &km.codebook;
        let mut sums = [[0.0f64; 3]; 8];
        let mut counts = [0usize; 8];
        for p in data.chunks_exact(3) {
            let k = cb.nearest(p).unwrap().0;
            counts[k] += 1;
            for j in 0..3 {
                sums[k][j] += f64::from(p[j]);
            }
        }
        for k in 0..8 {
            assert!(counts[k] > 0);
            for j in 0..3 {
                let mean = sums[k][j] / counts[k] as f64;
                assert!((mean - f64::from(cb.vector(k)[j])).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn objective_never_increases(
            seed in any::<u64>(),
            n in 5usize..120,
            dim in 1usize..5,
            entries in 1usize..12,
        ) {
            let mut r = rng::stream(seed, &[0]);
            // heavy-tailed mixture so empty clusters and reseeding occur
            let data: Vec<f32> = (0..n * dim)
                .map(|_| {
                    let v: f32 = r.random_range(-1.0..1.0);
                    if r.random_bool(0.1) { v * 50.0 } else { v }
                })
                .collect();
            let km = kmeans_init(&data, dim, entries, &mut rng::stream(seed, &[1]),
                &KMeansOptions { max_iters: 50, tol: 0.0 }).unwrap();
            for w in km.objective.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", km.objective);
            }
        }
    }
}
