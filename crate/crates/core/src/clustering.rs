//! Lloyd's k-means with k-means++ seeding.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{derive_seed, rng_from_seed, Error, Result, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative cost improvement falls below this.
    pub tol: f64,
    /// Independent k-means++ restarts; the cheapest run wins.
    pub restarts: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
            restarts: 1,
        }
    }
}

impl KmeansConfig {
    pub fn with_seed(seed: u64) -> Self {
        KmeansConfig {
            seed,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansResult {
    pub centers: Vec<Vec<f64>>,
    /// Σ_p min_i ‖p − c_i‖² for the returned centers.
    pub cost: f64,
    pub assignment: Vec<usize>,
    /// Cost after each assignment step of the winning run.
    pub cost_history: Vec<f64>,
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Result<()> {
    if centers.is_empty() {
        return Err(Error::domain("no centers given"));
    }
    let dim = centers[0].len();
    if centers.iter().chain(points).any(|p| p.len() != dim) {
        return Err(Error::domain("points and centers must share one dimension"));
    }
    Ok(())
}

/// Index and squared distance of the nearest center for each point; ties
/// resolve to the lowest center index.
pub fn nearest_center_sq_dists(
    points: &[Vec<f64>],
    centers: &[Vec<f64>],
) -> Result<Vec<(usize, f64)>> {
    check_dims(points, centers)?;
    Ok(points.iter().map(|p| nearest(p, centers)).collect())
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, squared_distance(p, &centers[0]));
    for (i, c) in centers.iter().enumerate().skip(1) {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its nearest center.
pub fn kmeans_cost(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Result<f64> {
    Ok(nearest_center_sq_dists(points, centers)?
        .iter()
        .map(|&(_, d)| d)
        .sum())
}

pub fn kmeans(points: &[Vec<f64>], k: usize, config: &KmeansConfig) -> Result<KmeansResult> {
    if points.is_empty() {
        return Err(Error::domain("k-means on an empty point set"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::domain(format!(
            "k = {k} must lie in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::domain("points must share one dimension"));
    }
    let mut best: Option<KmeansResult> = None;
    for restart in 0..config.restarts.max(1) {
        let mut rng = rng_from_seed(derive_seed(config.seed, restart as u64));
        let run = lloyd(points, plus_plus_seeds(points, k, &mut rng), config);
        if best.as_ref().map_or(true, |b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let idx = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point already sits on a center
            Err(_) => rng.gen_range(0..points.len()),
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, config: &KmeansConfig) -> KmeansResult {
    let k = centers.len();
    let dim = points[0].len();
    let mut history = Vec::new();
    let mut iter = 0;
    loop {
        let nearest: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centers)).collect();
        let cost: f64 = nearest.iter().map(|&(_, d)| d).sum();
        let converged = match history.last() {
            Some(&prev) => prev - cost <= config.tol * prev,
            None => false,
        };
        history.push(cost);
        if converged || cost == 0.0 || iter >= config.max_iters {
            return KmeansResult {
                centers,
                cost,
                assignment: nearest.iter().map(|&(i, _)| i).collect(),
                cost_history: history,
            };
        }
        iter += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&nearest) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut d2: Vec<f64> = nearest.iter().map(|&(_, d)| d).collect();
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            } else {
                // reseed at the currently worst-served point
                let far = (0..points.len()).fold(0, |b, i| if d2[i] > d2[b] { i } else { b });
                centers[c] = points[far].clone();
                d2[far] = 0.0;
            }
        }
    }
}
