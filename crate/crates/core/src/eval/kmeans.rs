use rand::Rng as _;

use crate::error::{CdalError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_ITERS: usize = 200;
pub const SHIFT_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(points: &[&[f64]], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let (n, d, k) = (points.len(), points[0].len(), centroids.len());
    let mut assignments = vec![0; n];
    let mut iterations = 0;
    loop {
        for (i, p) in points.iter().enumerate() {
            assignments[i] = nearest(p, &centroids).0;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            // an empty cluster keeps its centroid
            if counts[j] > 0 {
                let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                shift = shift.max(sq(&next, &centroids[j]).sqrt());
                centroids[j] = next;
            }
        }
        if shift < SHIFT_TOL || iterations >= MAX_ITERS {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    let inertia = points.iter().zip(&assignments).map(|(p, &a)| sq(p, &centroids[a])).sum();
    KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    }
}

/// Lloyd's algorithm from k-means++ seeds, keeping the lowest-inertia restart.
pub fn kmeans_full(features: &Tensor, k: usize, restarts: usize, rng: &mut Rng) -> Result<KMeansResult> {
    if features.rank() != 2 {
        return Err(CdalError::shape("kmeans", format!("features must be [n,d], got {:?}", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if k == 0 || k > n {
        return Err(CdalError::InvalidArgument(format!("kmeans: k={k} with {n} points")));
    }
    let points: Vec<&[f64]> = features.data().chunks(d).collect();
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(&points, plus_plus(&points, k, rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(features: &Tensor, k: usize, restarts: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    Ok(kmeans_full(features, k, restarts, rng)?.assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn pts(v: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![v.len(), 2], v.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn separated_pairs() {
        let x = pts(&[[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 10.1]]);
        let a = kmeans(&x, 2, 3, &mut rng::stream(0, "km")).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let x = pts(&[[0.0, 1.0], [2.0, 3.0], [5.0, -1.0], [4.0, 4.0], [1.0, 1.5]]);
        let r = kmeans_full(&x, 5, 4, &mut rng::stream(1, "km")).unwrap();
        assert!(r.inertia < 1e-20);
    }

    #[test]
    fn errors() {
        let x = pts(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(kmeans(&x, 3, 1, &mut rng::stream(0, "km")).is_err());
        assert!(kmeans(&x, 0, 1, &mut rng::stream(0, "km")).is_err());
    }

    fn bipartition_inertia(v: &[[f64; 2]]) -> f64 {
        let n = v.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << (n - 1)) {
            let mut total = 0.0;
            for side in [true, false] {
                let members: Vec<&[f64; 2]> =
                    (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).map(|i| &v[i]).collect();
                let m = members.len() as f64;
                let cx = members.iter().map(|p| p[0]).sum::<f64>() / m;
                let cy = members.iter().map(|p| p[1]).sum::<f64>() / m;
                total += members.iter().map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sum::<f64>();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn twelve_point_plane_matches_exhaustive_bipartition() {
        let mut r = rng::stream(2, "plane");
        let v: Vec<[f64; 2]> = (0..12).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let got = kmeans_full(&pts(&v), 2, 10, &mut rng::stream(3, "km")).unwrap();
        assert!(got.inertia <= bipartition_inertia(&v) + 1e-9);
    }

    #[test]
    fn deterministic_under_seed() {
        let mut r = rng::stream(5, "det");
        let v: Vec<[f64; 2]> = (0..40).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let a = kmeans(&pts(&v), 4, 3, &mut rng::stream(9, "km")).unwrap();
        let b = kmeans(&pts(&v), 4, 3, &mut rng::stream(9, "km")).unwrap();
        assert_eq!(a, b);
    }
}
