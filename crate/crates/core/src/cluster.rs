//! k-means staging, external clustering metrics and PCA projection.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::nn::Matrix;
use crate::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// `K × width`.
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning run.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(p, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let width = points.first().map_or(0, Vec::len);
    if width == 0 {
        return Err(Error::Argument(
            "points must be nonempty with positive width".into(),
        ));
    }
    if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.len() != width) {
        return Err(Error::dim(
            "kmeans",
            width,
            format!("{} at point {i}", p.len()),
        ));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Argument("points contain non-finite values".into()));
    }
    Ok(width)
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let width = points[0].len();
    let mut centroids = Matrix::zeros(k, width);
    let first = rng.random_range(0..points.len());
    centroids.row_mut(0).copy_from_slice(&points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.row_mut(c).copy_from_slice(&points[idx]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[idx]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> ClusterResult {
    let width = points[0].len();
    let mut centroids = plus_plus_seed(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            changed |= assignments[i] != c;
            assignments[i] = c;
            dists[i] = d;
        }
        let inertia: f64 = dists.iter().sum();
        history.push(inertia);
        iterations += 1;
        if !changed || iterations >= max_iters {
            return ClusterResult {
                assignments,
                centroids,
                inertia,
                iterations,
                history,
            };
        }
        let mut sums = Matrix::zeros(k, width);
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
        // Empty clusters take the point farthest from its current centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, centroids.row(assignments[i]))))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
                centroids.row_mut(c).copy_from_slice(&points[far]);
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
            }
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` by inertia,
/// ties going to the lowest restart index.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterResult> {
    if k == 0 || restarts == 0 || max_iters == 0 {
        return Err(Error::Argument(
            "k, restarts and max_iters must be positive".into(),
        ));
    }
    if points.len() < k {
        return Err(Error::Argument(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    check_points(points)?;
    let runs: Vec<ClusterResult> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(points, k, max_iters, &mut rng)
        })
        .collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "assignments ({}) and labels ({}) differ in length",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("cannot score an empty clustering".into()));
    }
    Ok(())
}

/// Dense contingency table with rows = clusters, columns = labels.
fn contingency(a: &[usize], b: &[usize]) -> Vec<Vec<usize>> {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut t = vec![vec![0usize; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        t[i][j] += 1;
    }
    t
}

/// Fraction of items that carry their cluster's majority label.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(assignments, labels)?;
    let t = contingency(assignments, labels);
    let hit: usize = t
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(hit as f64 / assignments.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(C; L) / (H(C) + H(L))`, natural logs. Two single-cluster partitions
/// score 1; exactly one single-cluster partition scores 0.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(assignments, labels)?;
    let n = assignments.len() as f64;
    let t = contingency(assignments, labels);
    let rows: Vec<usize> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..t[0].len())
        .map(|j| t.iter().map(|r| r[j]).sum())
        .collect();
    let single_a = rows.iter().filter(|&&c| c > 0).count() == 1;
    let single_b = cols.iter().filter(|&&c| c > 0).count() == 1;
    match (single_a, single_b) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let ha = entropy(rows.iter().copied(), n);
    let hb = entropy(cols.iter().copied(), n);
    let mut mi = 0.0;
    for (i, row) in t.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index. When both partitions are all-one-cluster or
/// all-singletons the index is undefined and reported as 1.
pub fn ari(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(assignments, labels)?;
    if assignments.len() < 2 {
        return Err(Error::Argument("ARI needs at least two items".into()));
    }
    let t = contingency(assignments, labels);
    let index: f64 = t.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = t.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: f64 = (0..t[0].len())
        .map(|j| choose2(t.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = sum_a * sum_b / choose2(assignments.len());
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub purity: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn evaluate(assignments: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        purity: purity(assignments, labels)?,
        nmi: nmi(assignments, labels)?,
        ari: ari(assignments, labels)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// One row per point, `dims` wide.
    pub coords: Vec<Vec<f64>>,
    /// Orthonormal components, `dims × width`.
    pub components: Matrix,
    pub mean: Vec<f64>,
    /// Share of total variance per component, non-increasing.
    pub explained: Vec<f64>,
}

/// Principal-component projection onto the top `dims` directions of the
/// sample covariance. Each component's largest-magnitude entry is positive.
pub fn pca_project(points: &[Vec<f64>], dims: usize) -> Result<Projection> {
    if points.len() < 2 {
        return Err(Error::Argument("PCA needs at least two points".into()));
    }
    let width = check_points(points)?;
    if dims == 0 || dims > width {
        return Err(Error::Argument(format!(
            "cannot project width {width} onto {dims} dimensions"
        )));
    }
    let n = points.len();
    let mean: Vec<f64> = (0..width)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, width, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    let mut components = Matrix::zeros(dims, width);
    let mut explained = Vec::with_capacity(dims);
    for (r, &idx) in order.iter().take(dims).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let pivot = (0..width).fold(0, |b, j| if col[j].abs() > col[b].abs() { j } else { b });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..width {
            components.set(r, j, sign * col[j]);
        }
        let lambda = eig.eigenvalues[idx].max(0.0);
        explained.push(if total > 0.0 { lambda / total } else { 0.0 });
    }
    let coords = (0..n)
        .map(|i| {
            let row: Vec<f64> = centered.row(i).iter().copied().collect();
            components.matvec(&row)
        })
        .collect();
    Ok(Projection {
        coords,
        components,
        mean,
        explained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_points(rng: &mut ChaCha8Rng, n: usize, w: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..w).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect()
    }

    #[test]
    fn kmeans_trivial_cases() {
        let pts = vec![vec![0.0, 0.0], vec![10.0, 10.0]];
        let r = kmeans(&pts, 2, 100, 1, 3).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_ne!(r.assignments[0], r.assignments[1]);

        let pts = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]];
        let r = kmeans(&pts, 1, 100, 1, 1).unwrap();
        assert_eq!(r.centroids.row(0), &[3.0, 1.0]);
        assert!(matches!(
            kmeans(&pts, 4, 100, 1, 1),
            Err(Error::Argument(_))
        ));
    }

    // Global optimum over all 2^8 two-way splits; each split's cost uses its own means.
    fn exhaustive_two_means(pts: &[Vec<f64>]) -> f64 {
        let n = pts.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<&Vec<f64>> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| &pts[i])
                    .collect();
                let w = pts[0].len();
                let m: Vec<f64> = (0..w)
                    .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                    .collect();
                cost += members.iter().map(|p| sq_dist(p, &m)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn kmeans_reaches_exhaustive_optimum_on_eight_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for trial in 0..30 {
            let pts = rand_points(&mut rng, 8, 2);
            let r = kmeans(&pts, 2, 100, trial, 10).unwrap();
            let opt = exhaustive_two_means(&pts);
            assert!(
                (r.inertia - opt).abs() <= 1e-9 * (1.0 + opt),
                "trial {trial}: {} vs {opt}",
                r.inertia
            );
        }
    }

    #[test]
    fn kmeans_history_monotone_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..30 {
            let n = rng.random_range(5..60);
            let pts = rand_points(&mut rng, n, 3);
            let k = rng.random_range(1..5);
            let r = kmeans(&pts, k, 300, trial, 4).unwrap();
            assert!(r
                .history
                .windows(2)
                .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
            assert!(r.assignments.iter().all(|&a| a < k));
            for (p, &a) in pts.iter().zip(&r.assignments) {
                let (_, d) = nearest(p, &r.centroids);
                assert!(sq_dist(p, r.centroids.row(a)) <= d + 1e-12);
            }
            for c in 0..k {
                let members: Vec<&Vec<f64>> = pts
                    .iter()
                    .zip(&r.assignments)
                    .filter(|(_, &a)| a == c)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for j in 0..3 {
                    let m = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                    assert!((r.centroids.get(c, j) - m).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn kmeans_handles_duplicates_and_is_deterministic() {
        let pts = vec![vec![1.0]; 6];
        let r = kmeans(&pts, 3, 50, 0, 3).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts = rand_points(&mut rng, 50, 4);
        assert_eq!(
            kmeans(&pts, 3, 300, 9, 5).unwrap(),
            kmeans(&pts, 3, 300, 9, 5).unwrap()
        );
    }

    // Definition-level recomputations used as oracles.
    fn purity_oracle(a: &[usize], l: &[usize]) -> f64 {
        let mut total = 0;
        for c in 0..=*a.iter().max().unwrap() {
            let best = (0..=*l.iter().max().unwrap())
                .map(|y| (0..a.len()).filter(|&i| a[i] == c && l[i] == y).count())
                .max()
                .unwrap();
            total += best;
        }
        total as f64 / a.len() as f64
    }

    fn nmi_oracle(a: &[usize], l: &[usize]) -> f64 {
        let n = a.len() as f64;
        let p = |f: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| f(i)).count() as f64 / n;
        let ka = *a.iter().max().unwrap() + 1;
        let kl = *l.iter().max().unwrap() + 1;
        let h = |k: usize, v: &[usize]| -> f64 {
            (0..k)
                .map(|c| p(&|i| v[i] == c))
                .filter(|&q| q > 0.0)
                .map(|q| -q * q.ln())
                .sum()
        };
        let (ha, hl) = (h(ka, a), h(kl, l));
        if ha == 0.0 && hl == 0.0 {
            return 1.0;
        }
        if ha == 0.0 || hl == 0.0 {
            return 0.0;
        }
        let mut mi = 0.0;
        for c in 0..ka {
            for y in 0..kl {
                let pj = p(&|i| a[i] == c && l[i] == y);
                if pj > 0.0 {
                    mi += pj * (pj / (p(&|i| a[i] == c) * p(&|i| l[i] == y))).ln();
                }
            }
        }
        2.0 * mi / (ha + hl)
    }

    fn ari_oracle(a: &[usize], l: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut in_a, mut in_l) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sl = l[i] == l[j];
                both += (sa && sl) as u8 as f64;
                in_a += sa as u8 as f64;
                in_l += sl as u8 as f64;
            }
        }
        let pairs = (n * (n - 1) / 2) as f64;
        let expected = in_a * in_l / pairs;
        let max = (in_a + in_l) / 2.0;
        if max == expected {
            1.0
        } else {
            (both - expected) / (max - expected)
        }
    }

    fn all_assignments(n: usize, k: usize) -> Vec<Vec<usize>> {
        let total = k.pow(n as u32);
        (0..total)
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let d = code % k;
                        code /= k;
                        d
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn metrics_match_definitions_over_all_small_partitions() {
        for n in 2..=6 {
            let labelings = [
                (0..n).map(|i| i % 2).collect::<Vec<_>>(),
                (0..n).map(|i| i % 3).collect(),
                (0..n).map(|i| usize::from(i >= n / 2)).collect(),
                vec![0; n],
            ];
            for a in all_assignments(n, 3) {
                for l in &labelings {
                    assert!((purity(&a, l).unwrap() - purity_oracle(&a, l)).abs() < 1e-12);
                    assert!(
                        (nmi(&a, l).unwrap() - nmi_oracle(&a, l)).abs() < 1e-12,
                        "{a:?} {l:?}"
                    );
                    assert!(
                        (ari(&a, l).unwrap() - ari_oracle(&a, l)).abs() < 1e-12,
                        "{a:?} {l:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(purity(&[2, 2, 0, 1], &[0, 0, 1, 2]).unwrap(), 1.0);
        assert!((purity(&[0, 0, 0], &[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(nmi(&[0, 1, 1, 2], &[5, 3, 3, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        // Contingency {{2,1},{1,2}}.
        let a = [0, 0, 0, 1, 1, 1];
        let l = [0, 0, 1, 0, 1, 1];
        let (p1, p2) = (2.0f64 / 6.0, 1.0f64 / 6.0);
        let mi = 2.0 * p1 * (p1 / 0.25).ln() + 2.0 * p2 * (p2 / 0.25).ln();
        let h = 2f64.ln();
        assert!((nmi(&a, &l).unwrap() - mi / h).abs() < 1e-12);
        assert_eq!(ari(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(matches!(ari(&[0], &[0]), Err(Error::Argument(_))));
        assert!(matches!(purity(&[0, 1], &[0]), Err(Error::Argument(_))));
        assert!(matches!(nmi(&[0, 1], &[0]), Err(Error::Argument(_))));
    }

    #[test]
    fn ari_of_random_partitions_centers_on_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut sum = 0.0;
        for _ in 0..500 {
            let a: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
            sum += ari(&a, &b).unwrap();
        }
        assert!((sum / 500.0).abs() < 0.02);
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn metrics_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..30 {
            let n = rng.random_range(2..=8);
            let k = rng.random_range(1..=4);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let base = evaluate(&a, &l).unwrap();
            for perm in permutations(k) {
                let b: Vec<usize> = a.iter().map(|&c| perm[c]).collect();
                let m = evaluate(&b, &l).unwrap();
                assert!((m.purity - base.purity).abs() < 1e-12);
                assert!((m.nmi - base.nmi).abs() < 1e-12);
                assert!((m.ari - base.ari).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn purity_lower_bound_and_ranges(
            pairs in proptest::collection::vec((0usize..4, 0usize..3), 2..40)
        ) {
            let (a, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = evaluate(&a, &l).unwrap();
            let max_class = (0..3).map(|y| l.iter().filter(|&&v| v == y).count()).max().unwrap();
            prop_assert!(m.purity >= max_class as f64 / a.len() as f64 - 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.purity));
            prop_assert!((0.0..=1.0).contains(&m.nmi));
            prop_assert!((-1.0..=1.0).contains(&m.ari));
        }
    }

    #[test]
    fn pca_collinear_and_completeness() {
        let pts: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, 2.0 * i as f64 + 1.0])
            .collect();
        let p = pca_project(&pts, 2).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-9);
        assert!(p.explained[1].abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let pts = rand_points(&mut rng, 12, 4);
        let p = pca_project(&pts, 4).unwrap();
        for (x, c) in pts.iter().zip(&p.coords) {
            for j in 0..4 {
                let back: f64 = (0..4).map(|r| c[r] * p.components.get(r, j)).sum();
                assert!((back - (x[j] - p.mean[j])).abs() < 1e-9);
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..4)
                    .map(|j| p.components.get(a, j) * p.components.get(b, j))
                    .sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
        assert!(p.explained.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(pca_project(&pts, 5), Err(Error::Argument(_))));
        assert!(matches!(pca_project(&pts[..1], 1), Err(Error::Argument(_))));
    }

    // Covariance by loops, eigenvectors by power iteration with deflation.
    fn power_iteration_oracle(pts: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
        let n = pts.len();
        let w = pts[0].len();
        let mean: Vec<f64> = (0..w)
            .map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let mut cov = vec![vec![0.0; w]; w];
        for p in pts {
            for a in 0..w {
                for b in 0..w {
                    cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]) / (n as f64 - 1.0);
                }
            }
        }
        let mut vecs = Vec::new();
        for _ in 0..dims {
            let mut v: Vec<f64> = (0..w).map(|j| 1.0 + j as f64 * 0.37).collect();
            for _ in 0..100_000 {
                let mut nv: Vec<f64> = (0..w)
                    .map(|a| (0..w).map(|b| cov[a][b] * v[b]).sum())
                    .collect();
                let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
                nv.iter_mut().for_each(|x| *x /= norm);
                let diff: f64 = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
                v = nv;
                if diff < 1e-10 {
                    break;
                }
            }
            let lambda: f64 = (0..w)
                .map(|a| v[a] * (0..w).map(|b| cov[a][b] * v[b]).sum::<f64>())
                .sum();
            for a in 0..w {
                for b in 0..w {
                    cov[a][b] -= lambda * v[a] * v[b];
                }
            }
            vecs.push(v);
        }
        pts.iter()
            .map(|p| {
                vecs.iter()
                    .map(|v| (0..w).map(|j| v[j] * (p[j] - mean[j])).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn pca_matches_power_iteration_up_to_sign() {
        let pts = vec![
            vec![2.0, 0.1, -1.0],
            vec![-1.5, 0.4, 0.3],
            vec![0.7, -2.2, 1.1],
            vec![3.1, 1.0, -0.4],
            vec![-0.9, 0.5, 2.0],
        ];
        let p = pca_project(&pts, 2).unwrap();
        let oracle = power_iteration_oracle(&pts, 2);
        for r in 0..2 {
            let sign = if p.coords[0][r] * oracle[0][r] < 0.0 {
                -1.0
            } else {
                1.0
            };
            for i in 0..5 {
                assert!(
                    (p.coords[i][r] - sign * oracle[i][r]).abs() < 1e-6,
                    "component {r}"
                );
            }
        }
    }
}
