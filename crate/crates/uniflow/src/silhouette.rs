//! Silhouette score: a quantitative clustering-quality metric used where a
//! t-SNE scatter plot would be eyeballed at larger scale. For each point,
//! s = (b - a) / max(a, b) with a = mean intra-cluster distance and b = the
//! smallest mean distance to any other cluster; the score is the mean of s
//! over all points. Singleton clusters contribute s = 0.

use crate::tensor::{NumericsError, Result};

fn bad(detail: String) -> NumericsError {
    NumericsError::InvalidArgument { context: "silhouette_score".into(), detail }
}

fn euclidean(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Mean silhouette over all points, Euclidean distance. Labels must be
/// cluster indices 0..k with at least two non-empty clusters.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n == 0 {
        return Err(bad("no points".into()));
    }
    if labels.len() != n {
        return Err(bad(format!("{n} points but {} labels", labels.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(bad("points have inconsistent dimensions".into()));
    }
    let k = labels.iter().copied().max().unwrap() + 1;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(bad("need at least two non-empty clusters".into()));
    }

    // dist_sum[i][c] = sum of distances from point i to every point in
    // cluster c, filled in one pass over unordered pairs
    let mut dist_sum = vec![vec![0.0f64; k]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&points[i], &points[j]);
            dist_sum[i][labels[j]] += d;
            dist_sum[j][labels[i]] += d;
        }
    }

    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if counts[own] <= 1 {
            continue; // s = 0 by convention
        }
        let a = dist_sum[i][own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| dist_sum[i][c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-point implementation of the definition, structured
    /// differently from the production code (no pair pass, no sums cache).
    fn oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let n = points.len();
        let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        let mut total = 0.0;
        for i in 0..n {
            let own = labels[i];
            let own_others: Vec<usize> =
                (0..n).filter(|&j| j != i && labels[j] == own).collect();
            if own_others.is_empty() {
                continue;
            }
            let a = own_others.iter().map(|&j| euclidean(&points[i], &points[j])).sum::<f64>()
                / own_others.len() as f64;
            let mut b = f64::INFINITY;
            for &c in &clusters {
                if c == own {
                    continue;
                }
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                let m = members.iter().map(|&j| euclidean(&points[i], &points[j])).sum::<f64>()
                    / members.len() as f64;
                b = b.min(m);
            }
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn matches_brute_force_oracle_on_30_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = i % 3;
            let center = [c as f64 * 4.0, -(c as f64) * 2.0, 1.0];
            points.push(center.iter().map(|&m| m + rng.gen::<f64>()).collect::<Vec<f64>>());
            labels.push(c);
        }
        let got = silhouette_score(&points, &labels).unwrap();
        let want = oracle(&points, &labels);
        assert!((got - want).abs() < 1e-9, "got {got}, oracle {want}");
    }

    #[test]
    fn two_tight_separated_clusters_score_by_hand() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let labels = vec![0, 0, 1, 1];
        // every point: a = 1, b = (10 + sqrt(101)) / 2
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        let want = (b - 1.0) / b;
        let got = silhouette_score(&points, &labels).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_score_near_zero_and_tight_clusters_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            points.push(vec![c as f64 * 100.0 + rng.gen::<f64>(), rng.gen::<f64>()]);
            labels.push(c);
        }
        let tight = silhouette_score(&points, &labels).unwrap();
        assert!(tight > 0.95, "separated clusters: {tight}");
        let random: Vec<usize> = (0..60).map(|_| rng.gen_range(0..2)).collect();
        let shuffled = silhouette_score(&points, &random).unwrap();
        assert!(shuffled < 0.5, "random labels: {shuffled}");
        assert!(tight > shuffled);
    }

    #[test]
    fn singleton_cluster_contributes_zero() {
        let points = vec![vec![0.0], vec![0.1], vec![5.0]];
        let labels = vec![0, 0, 1];
        // points 0 and 1: a = 0.1, b = mean dist to {5.0}; point 2 singleton
        let s0 = (5.0 - 0.1) / 5.0;
        let s1 = (4.9 - 0.1) / 4.9;
        let want = (s0 + s1 + 0.0) / 3.0;
        let got = silhouette_score(&points, &labels).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(silhouette_score(&[], &[]).is_err());
        assert!(silhouette_score(&[vec![0.0]], &[0, 1]).is_err());
        assert!(silhouette_score(&[vec![0.0], vec![1.0]], &[0, 0]).is_err());
        assert!(silhouette_score(&[vec![0.0], vec![1.0, 2.0]], &[0, 1]).is_err());
    }
}
