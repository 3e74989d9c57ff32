use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

pub const DEFAULT_K: usize = 20;

/// Centroids in raw `(lat, lon)` degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoClusterModel {
    pub centroids: Vec<(f64, f64)>,
}

impl GeoClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid; ties go to the lower index.
    pub fn predict(&self, lat: f64, lon: f64) -> usize {
        nearest(&self.centroids, (lat, lon)).0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub model: GeoClusterModel,
    pub labels: Vec<usize>,
    /// Objective after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one assignment")
    }
}

fn sq(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn nearest(centroids: &[(f64, f64)], p: (f64, f64)) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = sq(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn count_distinct(points: &[(f64, f64)]) -> usize {
    let mut keys: Vec<(u64, u64)> = points.iter().map(|p| ((p.0 + 0.0).to_bits(), (p.1 + 0.0).to_bits())).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn seed_centroids<R: Rng + ?Sized>(points: &[(f64, f64)], k: usize, rng: &mut R) -> Vec<(f64, f64)> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| sq(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random_range(0.0..total);
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        let c = points[pick.expect("a point away from every centroid exists")];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(sq(p, c));
        }
    }
    centroids
}

/// Lloyd's algorithm on raw degrees with k-means++ seeding. Stops when
/// assignments stop changing or after `max_iters` updates. A cluster that
/// empties keeps its previous centroid.
pub fn geo_kmeans(points: &[(f64, f64)], k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Numeric("kmeans input coordinates".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::Contract(format!("{distinct} distinct points cannot form {k} clusters")));
    }
    let mut rng = stream(seed, "kmeans");
    let mut centroids = seed_centroids(points, k, &mut rng);
    let assign = |c: &[(f64, f64)]| -> (Vec<usize>, f64) {
        let mut obj = 0.0;
        let labels = points
            .iter()
            .map(|&p| {
                let (j, d) = nearest(c, p);
                obj += d;
                j
            })
            .collect();
        (labels, obj)
    };
    let (mut labels, obj) = assign(&centroids);
    let mut trace = vec![obj];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &l) in points.iter().zip(&labels) {
            sums[l].0 += p.0;
            sums[l].1 += p.1;
            sums[l].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        let (next, obj) = assign(&centroids);
        trace.push(obj);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(KMeansFit { model: GeoClusterModel { centroids }, labels, objective_trace: trace, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut r = stream(seed, "pts");
        (0..n).map(|_| (r.random_range(-60.0..60.0), r.random_range(-180.0..180.0))).collect()
    }

    #[test]
    fn k_equals_n_is_exact() {
        let pts = random_points(7, 1);
        let fit = geo_kmeans(&pts, 7, 50, 3).unwrap();
        assert_eq!(fit.objective(), 0.0);
        let mut labels = fit.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, (0..7).collect::<Vec<_>>());
        for (i, &p) in pts.iter().enumerate() {
            assert_eq!(fit.model.centroids[fit.labels[i]], p);
        }
    }

    #[test]
    fn k_one_is_the_mean() {
        let pts = random_points(31, 2);
        let fit = geo_kmeans(&pts, 1, 50, 0).unwrap();
        let n = pts.len() as f64;
        let mean = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        assert_eq!(fit.model.centroids, vec![mean]);
        assert!(fit.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = vec![(1.0, 1.0), (1.0, 1.0), (2.0, 2.0)];
        assert!(matches!(geo_kmeans(&pts, 3, 10, 0), Err(Error::Contract(_))));
        assert!(geo_kmeans(&pts, 2, 10, 0).is_ok());
    }

    #[test]
    fn objective_non_increasing_and_beats_random_assignments() {
        let pts = random_points(60, 5);
        let fit = geo_kmeans(&pts, 3, 100, 1).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "{:?}", fit.objective_trace);
        }
        let mut r = stream(7, "mc");
        for _ in 0..50 {
            let labels: Vec<usize> = (0..pts.len()).map(|_| r.random_range(0..3)).collect();
            let mut obj = 0.0;
            for j in 0..3 {
                let members: Vec<_> = pts.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(p, _)| *p).collect();
                if members.is_empty() {
                    continue;
                }
                let m = members.len() as f64;
                let c = (members.iter().map(|p| p.0).sum::<f64>() / m, members.iter().map(|p| p.1).sum::<f64>() / m);
                obj += members.iter().map(|&p| sq(p, c)).sum::<f64>();
            }
            assert!(fit.objective() <= obj);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let pts = random_points(40, 9);
        assert_eq!(geo_kmeans(&pts, 4, 30, 2).unwrap(), geo_kmeans(&pts, 4, 30, 2).unwrap());
        let fit = geo_kmeans(&pts, 4, 30, 2).unwrap();
        assert_eq!(fit.model.predict(pts[0].0, pts[0].1), fit.labels[0]);
    }
}
