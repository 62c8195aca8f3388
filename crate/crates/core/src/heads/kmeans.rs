//! Lloyd's K-Means with k-means++ seeding.
//!
//! Empty clusters are re-seeded at the point farthest from its assigned
//! center; distance ties always resolve to the lowest index, so a run is a
//! pure function of the points and the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KMeansInit {
    PlusPlus,
    Random,
}

impl std::str::FromStr for KMeansInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans++" | "plusplus" => Ok(KMeansInit::PlusPlus),
            "random" => Ok(KMeansInit::Random),
            other => Err(Error::Config(format!("unknown kmeans init {other:?}"))),
        }
    }
}

impl std::fmt::Display for KMeansInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KMeansInit::PlusPlus => "kmeans++",
            KMeansInit::Random => "random",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub n_clusters: usize,
    pub max_iters: usize,
    pub init: KMeansInit,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_clusters: 50,
            max_iters: 100,
            init: KMeansInit::PlusPlus,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Tensor,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.rows() {
        let d = sq_dist(p, centers.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &Tensor, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = points.rows();
    let mut chosen = vec![rng.gen_range(0..k)];
    let mut d2: Vec<f64> = (0..k).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < n {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if r < d {
                    pick = Some(i);
                    break;
                }
                r -= d;
            }
            // rounding can leave r just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            (0..k).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for i in 0..k {
            d2[i] = d2[i].min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen
}

fn seed_random(k: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..k).collect();
    for i in 0..n {
        let j = rng.gen_range(i..k);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Clusters the rows of `points` into `cfg.n_clusters` groups.
pub fn kmeans(points: &Tensor, cfg: &ClusterConfig) -> Result<KMeansResult> {
    let k = points.rows();
    let n = cfg.n_clusters;
    if n == 0 || n > k {
        return Err(Error::Config(format!("cannot form {n} clusters from {k} points")));
    }
    let d = points.cols();
    let mut rng = SeedTree::new(cfg.seed).rng();
    let init = match cfg.init {
        KMeansInit::PlusPlus => seed_plus_plus(points, n, &mut rng),
        KMeansInit::Random => seed_random(k, n, &mut rng),
    };
    let mut centers = points.select_rows(&init);
    let mut assignments = vec![usize::MAX; k];
    let mut inertia = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iters.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..k {
            let (j, dist) = nearest(points.row(i), &centers);
            total += dist;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            converged = true;
            break;
        }
        update_centers(points, &assignments, &mut centers, n, d, true);
    }
    if !converged {
        update_centers(points, &assignments, &mut centers, n, d, false);
    }
    Ok(KMeansResult {
        assignments,
        centers,
        inertia,
        converged,
    })
}

fn update_centers(points: &Tensor, assignments: &[usize], centers: &mut Tensor, n: usize, d: usize, reseed: bool) {
    let mut sums = vec![0.0; n * d];
    let mut counts = vec![0usize; n];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    let mut taken = Vec::new();
    for j in 0..n {
        if counts[j] > 0 {
            for (c, s) in centers.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *c = s / counts[j] as f64;
            }
        } else if reseed {
            // farthest point from its own center, measured before this update
            let mut best = (usize::MAX, -1.0);
            for (i, &a) in assignments.iter().enumerate() {
                if taken.contains(&i) {
                    continue;
                }
                let dist = sq_dist(points.row(i), centers.row(a));
                if dist > best.1 {
                    best = (i, dist);
                }
            }
            if best.0 != usize::MAX {
                taken.push(best.0);
                let p = points.row(best.0).to_vec();
                centers.row_mut(j).copy_from_slice(&p);
            }
        }
    }
}
