//! Spherical k-means over unit-norm rows, plus small-cluster pruning.
//!
//! Seeding is k-means++ with squared cosine distance weights. Updates use
//! mean directions. The objective (mean cosine distance of points to their
//! centroids) is recorded after every assignment pass; under this loop
//! structure the trace is nonincreasing up to rounding, which the tests pin
//! down.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::parallel;

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the relative objective improvement falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 8,
            max_iters: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k` unit rows.
    pub centroids: Matrix,
    /// Cluster index per input row, consistent with `centroids`.
    pub assignments: Vec<u32>,
    /// Objective after each assignment pass (seeding pass included).
    pub objective_trace: Vec<f64>,
    /// Empty clusters revived by farthest-point reseeding.
    pub reseeds: usize,
}

/// How far a row may drift from unit norm before clustering refuses it.
const NORM_TOL: f64 = 1e-4;

pub fn spherical_kmeans(data: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = data.rows();
    let d = data.cols();
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < cfg.k {
        return Err(Error::Config(format!(
            "cannot form {} clusters from {n} rows",
            cfg.k
        )));
    }
    if cfg.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    if !cfg.tol.is_finite() || cfg.tol < 0.0 {
        return Err(Error::Config(format!("tol {} must be finite and >= 0", cfg.tol)));
    }
    for i in 0..n {
        let norm = crate::features::row_norm(data.row(i));
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Validation(format!(
                "row {i} has norm {norm:.6}, clustering expects unit rows"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_plus_plus(data, cfg.k, &mut rng);
    let mut assignments = assign(data, &centroids);
    let mut objective_trace = vec![objective(data, &centroids, &assignments)];
    let mut reseeds = 0usize;

    for _ in 0..cfg.max_iters {
        let stats = update_centroids(data, &assignments, cfg.k, d);
        centroids = stats.centroids;
        if !stats.empty.is_empty() {
            reseeds += stats.empty.len();
            reseed_farthest(data, &mut centroids, &assignments, &stats.empty);
        }
        assignments = assign(data, &centroids);
        let obj = objective(data, &centroids, &assignments);
        let prev = *objective_trace.last().unwrap();
        objective_trace.push(obj);
        if (prev - obj).abs() <= cfg.tol * prev.max(f64::EPSILON) {
            break;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        objective_trace,
        reseeds,
    })
}

/// k-means++ seeding with squared cosine-distance weights.
fn seed_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let d = data.cols();
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(data.row(first));

    // Squared distance to the nearest chosen centroid so far.
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            let dist = cosine_distance(data.row(i), centroids.row(0));
            dist * dist
        })
        .collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All mass already covered (duplicate points); any row works.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for i in 0..n {
            let dist = cosine_distance(data.row(i), centroids.row(c));
            let sq = dist * dist;
            if sq < d2[i] {
                d2[i] = sq;
            }
        }
    }
    centroids
}

/// Nearest-centroid assignment; ties go to the lower cluster index.
/// Chunked so the result is identical for any worker count.
fn assign(data: &Matrix, centroids: &Matrix) -> Vec<u32> {
    parallel::map_indexed(data.rows(), |i| {
        let row = data.row(i);
        let mut best = 0u32;
        let mut best_dot = dot(row, centroids.row(0));
        for c in 1..centroids.rows() {
            let d = dot(row, centroids.row(c));
            if d > best_dot {
                best_dot = d;
                best = c as u32;
            }
        }
        best
    })
}

struct UpdateStats {
    centroids: Matrix,
    empty: Vec<usize>,
}

/// Mean-direction update. Clusters with no members, or whose member sum
/// cancels to zero, are reported as empty.
fn update_centroids(data: &Matrix, assignments: &[u32], k: usize, d: usize) -> UpdateStats {
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a as usize] += 1;
        let row = data.row(i);
        let sum = &mut sums[a as usize * d..(a as usize + 1) * d];
        for (s, &x) in sum.iter_mut().zip(row) {
            *s += x as f64;
        }
    }
    let mut centroids = Matrix::zeros(k, d);
    let mut empty = Vec::new();
    for c in 0..k {
        let sum = &sums[c * d..(c + 1) * d];
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if counts[c] == 0 || norm <= f64::EPSILON {
            empty.push(c);
            continue;
        }
        for (out, &s) in centroids.row_mut(c).iter_mut().zip(sum) {
            *out = (s / norm) as f32;
        }
    }
    UpdateStats { centroids, empty }
}

/// Revive empty clusters at the points farthest from their own centroids.
/// Each reseed takes a distinct point; ties go to the lower row index.
fn reseed_farthest(data: &Matrix, centroids: &mut Matrix, assignments: &[u32], empty: &[usize]) {
    let mut dist: Vec<f64> = (0..data.rows())
        .map(|i| cosine_distance(data.row(i), centroids.row(assignments[i] as usize)))
        .collect();
    for &c in empty {
        let (far, _) = dist
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bd), (i, &d)| {
                if d > bd {
                    (i, d)
                } else {
                    (bi, bd)
                }
            });
        centroids.row_mut(c).copy_from_slice(data.row(far));
        dist[far] = f64::NEG_INFINITY;
    }
}

fn objective(data: &Matrix, centroids: &Matrix, assignments: &[u32]) -> f64 {
    if data.rows() == 0 {
        return 0.0;
    }
    let total: f64 = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| cosine_distance(data.row(i), centroids.row(a as usize)))
        .sum();
    total / data.rows() as f64
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine distance for unit vectors: `1 - a.b`.
fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - dot(a, b)
}

pub fn cluster_sizes(assignments: &[u32], k: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a as usize] += 1;
    }
    sizes
}

/// Drop clusters below `min_size`: their members become unassigned and take
/// no further part in graph construction.
pub fn prune_small(assignments: &[u32], k: usize, min_size: usize) -> Vec<Option<u32>> {
    let sizes = cluster_sizes(assignments, k);
    assignments
        .iter()
        .map(|&a| {
            if sizes[a as usize] >= min_size {
                Some(a)
            } else {
                None
            }
        })
        .collect()
}

/// Member lists per cluster from a pruned assignment, ascending node ids.
pub fn members_by_cluster(parent_of: &[Option<u32>], k: usize) -> Vec<Vec<u32>> {
    let mut members = vec![Vec::new(); k];
    for (i, a) in parent_of.iter().enumerate() {
        if let Some(a) = a {
            members[*a as usize].push(i as u32);
        }
    }
    members
}
