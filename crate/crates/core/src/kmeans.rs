//! Lloyd's K-means with seeded k-means++ initialization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Objective (sum of squared distances to the assigned centroid) after
    /// each iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a centroid already
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, c));
        }
    }
    centroids
}

/// Clusters `points` into `k` groups. Terminates when assignments stop
/// changing or after `max_iter` iterations. A cluster left empty is re-seeded
/// with the point farthest from its own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientData(format!("{} points for k = {k}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidShape("points have differing dimensionality".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter.max(1) {
        let mut next: Vec<usize> = Vec::with_capacity(points.len());
        let mut dist: Vec<f64> = Vec::with_capacity(points.len());
        for p in points {
            let (c, d) = nearest(p, &centroids);
            next.push(c);
            dist.push(d);
        }
        if next == assignments {
            converged = true;
            break;
        }
        let mut sizes = vec![0usize; k];
        for &c in &next {
            sizes[c] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| sizes[next[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                })
                .ok_or_else(|| Error::InsufficientData("cannot re-seed an empty cluster".into()))?;
            sizes[next[far]] -= 1;
            next[far] = empty;
            sizes[empty] = 1;
            dist[far] = 0.0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &c) in points.iter().zip(&next) {
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((centroid, mut s), &n) in centroids.iter_mut().zip(sums).zip(&sizes) {
            s.iter_mut().for_each(|v| *v /= n as f64);
            *centroid = s;
        }
        objective.push(points.iter().zip(&next).map(|(p, &c)| squared_distance(p, &centroids[c])).sum());
        assignments = next;
    }
    Ok(KMeans {
        assignments,
        centroids,
        objective,
        converged,
    })
}
