use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PerceptionError;

const MOTION_TOL: f64 = 1e-9;
const MAX_JUMP_CANDIDATES: usize = 16;
/// Pairwise exchanges and jumps are only tried on inputs up to this size.
const SMALL_INPUT: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub centroids: Vec<DVector<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub objective: f64,
    /// Objective after seeding and after every iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments.iter().enumerate().filter(move |(_, &a)| a == cluster).map(|(i, _)| i)
    }
}

fn objective(points: &[DVector<f64>], centroids: &[DVector<f64>], assignments: &[usize]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| (p - &centroids[a]).norm_squared()).sum()
}

fn nearest(p: &DVector<f64>, centroids: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Index drawn with probability proportional to `weights`.
fn draw_weighted(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && r < w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Greedy distance-weighted seeding: each new centre is the best of a few
/// candidates drawn with probability proportional to the squared distance
/// to the closest centre so far.
fn seed_centroids(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &points[chosen[0]]).norm_squared()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut best: Option<(usize, f64, Vec<f64>)> = None;
            for _ in 0..trials {
                let c = draw_weighted(&d2, total, rng);
                let next: Vec<f64> = points.iter().zip(&d2).map(|(p, &d)| d.min((p - &points[c]).norm_squared())).collect();
                let potential: f64 = next.iter().sum();
                if best.as_ref().is_none_or(|b| potential < b.1) {
                    best = Some((c, potential, next));
                }
            }
            let (c, _, next) = best.expect("at least one trial");
            d2 = next;
            c
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// One sweep of single-point moves, each taken only when it lowers the
/// objective. Centroids stay the means of their clusters.
fn hartigan_pass(points: &[DVector<f64>], centroids: &mut [DVector<f64>], assignments: &mut [usize], f: f64) -> bool {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let tol = 1e-12 * (1.0 + f);
    let mut moved = false;
    for (i, p) in points.iter().enumerate() {
        let from = assignments[i];
        let na = counts[from] as f64;
        if counts[from] < 2 {
            continue;
        }
        let leave = na / (na - 1.0) * (p - &centroids[from]).norm_squared();
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in centroids.iter().enumerate() {
            if j == from {
                continue;
            }
            let nb = counts[j] as f64;
            let delta = nb / (nb + 1.0) * (p - c).norm_squared() - leave;
            if delta < -tol && best.is_none_or(|(_, d)| delta < d) {
                best = Some((j, delta));
            }
        }
        if let Some((to, _)) = best {
            let nb = counts[to] as f64;
            centroids[from] = (&centroids[from] * na - p) / (na - 1.0);
            centroids[to] = (&centroids[to] * nb + p) / (nb + 1.0);
            counts[from] -= 1;
            counts[to] += 1;
            assignments[i] = to;
            moved = true;
        }
    }
    moved
}

/// One sweep of pairwise exchanges between clusters, each taken only when it
/// lowers the objective. Swapping `p` out for `q` changes a cluster's sum of
/// squares by `|q - m|^2 - |p - m|^2 - |q - p|^2 / n`.
fn swap_pass(points: &[DVector<f64>], centroids: &mut [DVector<f64>], assignments: &mut [usize], f: f64) -> bool {
    let mut counts = vec![0usize; centroids.len()];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let tol = 1e-12 * (1.0 + f);
    let mut moved = false;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (a, b) = (assignments[i], assignments[j]);
            if a == b {
                continue;
            }
            let (p, q) = (&points[i], &points[j]);
            let pq = (q - p).norm_squared();
            let da = (q - &centroids[a]).norm_squared() - (p - &centroids[a]).norm_squared() - pq / counts[a] as f64;
            let db = (p - &centroids[b]).norm_squared() - (q - &centroids[b]).norm_squared() - pq / counts[b] as f64;
            if da + db < -tol {
                let shift = q - p;
                centroids[a] += &shift / counts[a] as f64;
                centroids[b] -= &shift / counts[b] as f64;
                assignments.swap(i, j);
                moved = true;
            }
        }
    }
    moved
}

/// Lloyd iterations from the given centres, then single-point moves and
/// pairwise exchanges until none helps. Returns the objective after every
/// iteration.
fn refine(points: &[DVector<f64>], centroids: &mut Vec<DVector<f64>>, assignments: &mut [usize], max_iter: usize) -> Vec<f64> {
    let (n, k, dim) = (points.len(), centroids.len(), points[0].len());
    let mut f = objective(points, centroids, assignments);
    let mut history = Vec::new();
    while history.len() < max_iter {
        let mut next = centroids.clone();
        let mut counts = vec![0usize; k];
        let mut sums = vec![DVector::zeros(dim); k];
        for (p, &a) in points.iter().zip(assignments.iter()) {
            counts[a] += 1;
            sums[a] += p;
        }
        for j in 0..k {
            if counts[j] > 0 {
                next[j] = &sums[j] / counts[j] as f64;
            }
        }
        // an empty cluster takes over the worst-fitted point
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n).filter(|&i| counts[assignments[i]] > 1).max_by(|&a, &b| {
                    let da = (&points[a] - &next[assignments[a]]).norm_squared();
                    let db = (&points[b] - &next[assignments[b]]).norm_squared();
                    da.total_cmp(&db).then(b.cmp(&a))
                });
                if let Some(i) = far {
                    counts[assignments[i]] -= 1;
                    assignments[i] = j;
                    counts[j] = 1;
                    next[j] = points[i].clone();
                }
            }
        }
        if objective(points, &next, assignments) > f {
            break;
        }
        let motion = centroids.iter().zip(&next).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        *centroids = next;
        for (i, p) in points.iter().enumerate() {
            let cur = (p - &centroids[assignments[i]]).norm_squared();
            let j = nearest(p, centroids);
            if (p - &centroids[j]).norm_squared() < cur {
                assignments[i] = j;
            }
        }
        f = objective(points, centroids, assignments);
        history.push(f);
        if motion < MOTION_TOL {
            break;
        }
    }
    while history.len() < max_iter
        && (hartigan_pass(points, centroids, assignments, f) || (n <= SMALL_INPUT && swap_pass(points, centroids, assignments, f)))
    {
        f = objective(points, centroids, assignments);
        history.push(f);
    }
    history
}

/// Seeded clustering: local refinement, then on small inputs jumps that move
/// one centre onto a data point and refine again, kept only when they lower
/// the objective.
pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterResult, PerceptionError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(PerceptionError::InvalidK { k, points: n });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(PerceptionError::DimensionMismatch { expected: dim, found: p.len() });
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(PerceptionError::InvalidConfig("non-finite point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut f = objective(points, &centroids, &assignments);
    let mut history = vec![f];
    history.extend(refine(points, &mut centroids, &mut assignments, max_iter));
    f = *history.last().expect("history starts with the seeded objective");

    // worst-fitted points first
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let da = (&points[a] - &centroids[assignments[a]]).norm_squared();
        let db = (&points[b] - &centroids[assignments[b]]).norm_squared();
        db.total_cmp(&da).then(a.cmp(&b))
    });
    order.truncate(MAX_JUMP_CANDIDATES);
    let mut improved = k > 1 && n <= SMALL_INPUT;
    while improved && history.len() <= max_iter {
        improved = false;
        'jumps: for j in 0..k {
            for &i in &order {
                let mut c = centroids.clone();
                c[j] = points[i].clone();
                let mut a: Vec<usize> = points.iter().map(|p| nearest(p, &c)).collect();
                let trial = refine(points, &mut c, &mut a, max_iter);
                let g = trial.last().copied().unwrap_or_else(|| objective(points, &c, &a));
                if g < f - 1e-12 * (1.0 + f) {
                    (centroids, assignments, f) = (c, a, g);
                    history.push(f);
                    improved = true;
                    break 'jumps;
                }
            }
        }
    }
    let iterations = history.len() - 1;
    Ok(ClusterResult { k, centroids, assignments, objective: f, history, iterations })
}

/// Best of `restarts` seeded runs.
pub fn kmeans_restarts(
    points: &[DVector<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<ClusterResult, PerceptionError> {
    let mut best: Option<ClusterResult> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, k, seed.wrapping_add(r as u64), max_iter)?;
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
pub(crate) fn brute_force_objective(points: &[DVector<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let assign: Vec<usize> = (0..n)
            .map(|_| {
                let a = c % k;
                c /= k;
                a
            })
            .collect();
        let mut f = 0.0;
        for j in 0..k {
            let members: Vec<&DVector<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().fold(DVector::zeros(points[0].len()), |acc, p| acc + *p) / members.len() as f64;
            f += members.iter().map(|p| (*p - &mean).norm_squared()).sum::<f64>();
        }
        best = best.min(f);
    }
    best
}
