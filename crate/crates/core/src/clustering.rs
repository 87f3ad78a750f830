//! Spherical (cosine) k-means, confidence scoring, top-α confident sets and
//! silhouette-based estimation of the number of clusters.

use crate::error::{Error, Result};
use crate::numerics::{argmax_low, dot, norm, EmbeddingBatch, Matrix, SeededRng};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Result of one clustering pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// Refresh counter; set by the caller that schedules clusterings.
    pub iteration: usize,
    /// `K × d`, unit-norm rows.
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Cosine between each sample and its assigned center.
    pub confidences: Vec<f64>,
    /// Mean of `confidences`.
    pub inertia: f64,
    /// `Σ_i (1 - s_i)` after every assignment step, in order.
    pub objective_trace: Vec<f64>,
}

impl ClusterState {
    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clusters()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Rename cluster `k` to `mapping[k]`, moving centers along with labels.
    pub fn relabel(&self, mapping: &[usize]) -> ClusterState {
        let k = self.num_clusters();
        assert_eq!(mapping.len(), k);
        let mut centers = Matrix::zeros(k, self.centers.cols());
        for (old, &new) in mapping.iter().enumerate() {
            centers.row_mut(new).copy_from_slice(self.centers.row(old));
        }
        ClusterState {
            iteration: self.iteration,
            centers,
            assignments: self.assignments.iter().map(|&a| mapping[a]).collect(),
            confidences: self.confidences.clone(),
            inertia: self.inertia,
            objective_trace: self.objective_trace.clone(),
        }
    }
}

/// Per-cluster lists of the most confident members.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentSet {
    pub alpha: f64,
    /// `members[k]` holds sample indices of cluster `k`, most confident first.
    pub members: Vec<Vec<usize>>,
}

impl ConfidentSet {
    pub fn total(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    /// Per-sample membership mask for a population of `n` samples.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &i in self.members.iter().flatten() {
            mask[i] = true;
        }
        mask
    }
}

fn check_dims(x: &EmbeddingBatch, centers: &Matrix) -> Result<()> {
    if x.cols() != centers.cols() {
        return Err(Error::Dimension(format!(
            "samples have {} features, centers have {}",
            x.cols(),
            centers.cols()
        )));
    }
    if centers.rows() == 0 {
        return Err(Error::InvalidParameter("no cluster centers".into()));
    }
    Ok(())
}

/// Nearest center by cosine for every sample; ties go to the lowest index.
///
/// Inputs are assumed unit norm, so the cosine is a plain inner product.
pub fn assign_and_score(x: &EmbeddingBatch, centers: &Matrix) -> Result<(Vec<usize>, Vec<f64>)> {
    check_dims(x, centers)?;
    let mut assignments = Vec::with_capacity(x.rows());
    let mut confidences = Vec::with_capacity(x.rows());
    for row in x.row_iter() {
        let (k, s) = argmax_low(centers.row_iter().map(|c| dot(row, c))).expect("nonempty centers");
        assignments.push(k);
        confidences.push(s);
    }
    Ok((assignments, confidences))
}

/// Greedy k-means++ seeding with `1 - cos` as the (already squared)
/// distance: each step draws `2 + ln k` candidates and keeps the one that
/// lowers the total potential most.
fn seed_centers(x: &EmbeddingBatch, k: usize, rng: &mut SeededRng) -> Matrix {
    let n = x.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let dist_to = |c: usize| -> Vec<f64> {
        x.row_iter()
            .map(|r| (1.0 - dot(r, x.row(c))).max(0.0))
            .collect()
    };
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.below(n));
    let mut dist = dist_to(chosen[0]);
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            chosen.push((0..n).find(|i| !chosen.contains(i)).unwrap_or(0));
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            let cand = pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap());
            let merged: Vec<f64> = dist.iter().zip(dist_to(cand)).map(|(a, b)| a.min(b)).collect();
            let potential: f64 = merged.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, merged));
            }
        }
        let (_, next, merged) = best.expect("at least one trial");
        chosen.push(next);
        dist = merged;
    }
    x.select_rows(&chosen)
}

/// Normalized cluster means. Empty clusters (and clusters whose mean
/// vanishes) are re-seeded at the least confident samples.
fn update_centers(
    x: &EmbeddingBatch,
    k: usize,
    assignments: &[usize],
    confidences: &[f64],
) -> Matrix {
    let d = x.cols();
    let mut centers = Matrix::zeros(k, d);
    for (i, &a) in assignments.iter().enumerate() {
        for (c, v) in centers.row_mut(a).iter_mut().zip(x.row(i)) {
            *c += v;
        }
    }
    let mut by_confidence: Vec<usize> = (0..x.rows()).collect();
    by_confidence.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    let mut reseed = by_confidence.into_iter();
    for c in 0..k {
        let row = centers.row_mut(c);
        let n = norm(row);
        if n > 1e-12 {
            row.iter_mut().for_each(|v| *v /= n);
        } else if let Some(i) = reseed.next() {
            row.copy_from_slice(x.row(i));
        }
    }
    centers
}

fn objective(confidences: &[f64]) -> f64 {
    confidences.iter().map(|s| 1.0 - s).sum()
}

/// Spherical k-means with k-means++ seeding.
///
/// Stops when no assignment changes, when the largest center movement
/// (`1 - cos(old, new)`) drops below `tol`, or after `max_iter` updates.
pub fn cosine_kmeans(
    x: &EmbeddingBatch,
    k: usize,
    rng: &mut SeededRng,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterState> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if x.rows() < k {
        return Err(Error::InsufficientSamples {
            samples: x.rows(),
            clusters: k,
        });
    }
    let mut centers = seed_centers(x, k, rng);
    let (mut assignments, mut confidences) = assign_and_score(x, &centers)?;
    let mut trace = vec![objective(&confidences)];

    for _ in 0..max_iter {
        let next = update_centers(x, k, &assignments, &confidences);
        let movement = centers
            .row_iter()
            .zip(next.row_iter())
            .map(|(a, b)| 1.0 - dot(a, b))
            .fold(0.0, f64::max);
        centers = next;
        let (a, s) = assign_and_score(x, &centers)?;
        let changes = a.iter().zip(&assignments).filter(|(p, q)| p != q).count();
        assignments = a;
        confidences = s;
        trace.push(objective(&confidences));
        if changes == 0 || movement < tol {
            break;
        }
    }

    let inertia = confidences.iter().sum::<f64>() / confidences.len() as f64;
    Ok(ClusterState {
        iteration: 0,
        centers,
        assignments,
        confidences,
        inertia,
        objective_trace: trace,
    })
}

/// Best of `restarts` k-means runs (highest inertia, earliest on ties),
/// each on its own substream of `seed`.
pub fn cosine_kmeans_restarts(
    x: &EmbeddingBatch,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterState> {
    let mut best: Option<ClusterState> = None;
    for r in 0..restarts.max(1) {
        let mut rng = SeededRng::substream(seed, r as u64);
        let state = cosine_kmeans(x, k, &mut rng, max_iter, tol)?;
        if best.as_ref().is_none_or(|b| state.inertia > b.inertia) {
            best = Some(state);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Keep the `ceil(alpha · |D_k|)` most confident members of every cluster.
/// Equal confidences are ordered by sample index.
pub fn select_top_alpha(state: &ClusterState, alpha: f64) -> Result<ConfidentSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); state.num_clusters()];
    for (i, &a) in state.assignments.iter().enumerate() {
        members[a].push(i);
    }
    let s = &state.confidences;
    for list in &mut members {
        list.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        // The slack keeps products like 0.6 * 5 from rounding up past 3.
        let keep = ((alpha * list.len() as f64) - 1e-9).ceil() as usize;
        list.truncate(keep.max(usize::from(!list.is_empty())));
    }
    Ok(ConfidentSet { alpha, members })
}

/// Mean silhouette under cosine distance. Singletons score 0.
pub fn mean_silhouette(x: &EmbeddingBatch, assignments: &[usize], k: usize) -> f64 {
    let n = x.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = x.row(i);
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += 1.0 - dot(xi, x.row(j));
            }
        }
        let own = assignments[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    total / n as f64
}

/// Restarts used per candidate K in [`estimate_k`].
const ESTIMATE_RESTARTS: usize = 3;

/// Pick the K in `[k_min, k_max]` with the highest mean cosine silhouette.
/// Every candidate is clustered from the same seed; ties go to the smaller K.
pub fn estimate_k(
    x: &EmbeddingBatch,
    k_min: usize,
    k_max: usize,
    rng: &SeededRng,
) -> Result<usize> {
    if k_min < 2 || k_max < k_min {
        return Err(Error::InvalidParameter(format!(
            "invalid K range [{k_min}, {k_max}]: need 2 <= k_min <= k_max"
        )));
    }
    if x.rows() < k_max {
        return Err(Error::InsufficientSamples {
            samples: x.rows(),
            clusters: k_max,
        });
    }
    if k_min == k_max {
        return Ok(k_min);
    }
    let mut best = (k_min, f64::NEG_INFINITY);
    for k in k_min..=k_max {
        let state = cosine_kmeans_restarts(
            x,
            k,
            rng.seed(),
            ESTIMATE_RESTARTS,
            DEFAULT_MAX_ITER,
            DEFAULT_TOL,
        )?;
        let score = mean_silhouette(x, &state.assignments, k);
        if score > best.1 + 1e-12 {
            best = (k, score);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;

    fn unit_rows(rows: &[Vec<f64>]) -> Matrix {
        l2_normalize_rows(&Matrix::from_rows(rows).unwrap(), 1e-12).0
    }

    fn random_unit(n: usize, d: usize, rng: &mut SeededRng) -> Matrix {
        let data = (0..n * d).map(|_| rng.normal()).collect();
        l2_normalize_rows(&Matrix::from_vec(n, d, data).unwrap(), 1e-12).0
    }

    /// Tight bundle of `n` points around `dir` with isotropic noise `sigma`.
    fn bundle(dir: &[f64], n: usize, sigma: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| dir.iter().map(|v| v + sigma * rng.normal()).collect())
            .collect()
    }

    #[test]
    fn singleton_clusters_when_n_equals_k() {
        let mut rng = SeededRng::new(3);
        let x = random_unit(6, 4, &mut rng);
        let st = cosine_kmeans(&x, 6, &mut SeededRng::new(1), 100, 1e-6).unwrap();
        assert!((st.inertia - 1.0).abs() < 1e-12);
        let mut seen = st.assignments.clone();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn antipodal_bundles_split_exactly() {
        let mut rng = SeededRng::new(9);
        let dir: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let neg: Vec<f64> = dir.iter().map(|v| -v).collect();
        let mut rows = bundle(&dir, 50, 0.01, &mut rng);
        rows.extend(bundle(&neg, 50, 0.01, &mut rng));
        let x = unit_rows(&rows);
        let st = cosine_kmeans(&x, 2, &mut SeededRng::new(4), 100, 1e-6).unwrap();
        let first = st.assignments[0];
        assert!(st.assignments[..50].iter().all(|&a| a == first));
        assert!(st.assignments[50..].iter().all(|&a| a != first));
    }

    #[test]
    fn single_cluster_is_normalized_mean() {
        let mut rng = SeededRng::new(5);
        let x = random_unit(30, 4, &mut rng);
        let st = cosine_kmeans(&x, 1, &mut SeededRng::new(0), 100, 1e-6).unwrap();
        let mut mean = vec![0.0; 4];
        for r in x.row_iter() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        let n = norm(&mean);
        for (c, m) in st.centers.row(0).iter().zip(&mean) {
            assert!((c - m / n).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples() {
        let x = unit_rows(&[vec![1.0, 0.0]]);
        assert!(matches!(
            cosine_kmeans(&x, 2, &mut SeededRng::new(0), 10, 1e-6),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn assignment_basic_cases() {
        let centers = unit_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let x = unit_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]);
        let (a, s) = assign_and_score(&x, &centers).unwrap();
        assert_eq!(a, vec![2, 0]);
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(assign_and_score(&unit_rows(&[vec![1.0, 0.0]]), &centers).is_err());
    }

    #[test]
    fn assignment_matches_exhaustive_scan() {
        let mut rng = SeededRng::new(77);
        let x = random_unit(10, 5, &mut rng);
        let c = random_unit(3, 5, &mut rng);
        let (a, s) = assign_and_score(&x, &c).unwrap();
        for i in 0..10 {
            let mut best = 0;
            for k in 1..3 {
                let cand: f64 = (0..5).map(|j| x.get(i, j) * c.get(k, j)).sum();
                let cur: f64 = (0..5).map(|j| x.get(i, j) * c.get(best, j)).sum();
                if cand > cur {
                    best = k;
                }
            }
            assert_eq!(a[i], best);
            let want: f64 = (0..5).map(|j| x.get(i, j) * c.get(best, j)).sum();
            assert!((s[i] - want).abs() < 1e-12);
        }
    }

    fn state_from(assignments: Vec<usize>, confidences: Vec<f64>, k: usize) -> ClusterState {
        ClusterState {
            iteration: 0,
            centers: Matrix::zeros(k, 2),
            inertia: 0.0,
            objective_trace: vec![],
            assignments,
            confidences,
        }
    }

    #[test]
    fn top_alpha_full_inclusion() {
        let st = state_from(vec![0, 1, 0, 1, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5], 2);
        let cs = select_top_alpha(&st, 1.0).unwrap();
        let mut m0 = cs.members[0].clone();
        m0.sort();
        assert_eq!(m0, vec![0, 2]);
        assert_eq!(cs.total(), 5);
    }

    #[test]
    fn top_alpha_counts_and_ties() {
        let st = state_from(vec![0; 10], (0..10).map(|i| i as f64 / 10.0).collect(), 1);
        assert_eq!(select_top_alpha(&st, 0.8).unwrap().members[0].len(), 8);

        // Sort-and-cut oracle: 0.9 first, then the two 0.8s by index.
        let st = state_from(vec![0; 5], vec![0.8, 0.9, 0.2, 0.8, 0.7], 1);
        let cs = select_top_alpha(&st, 0.6).unwrap();
        assert_eq!(cs.members[0], vec![1, 0, 3]);
    }

    #[test]
    fn top_alpha_rejects_out_of_range() {
        let st = state_from(vec![0], vec![1.0], 1);
        assert!(select_top_alpha(&st, 0.0).is_err());
        assert!(select_top_alpha(&st, 1.5).is_err());
        assert!(select_top_alpha(&st, f64::NAN).is_err());
    }

    #[test]
    fn estimate_k_degenerate_range() {
        let mut rng = SeededRng::new(1);
        let x = random_unit(20, 4, &mut rng);
        assert_eq!(estimate_k(&x, 5, 5, &rng).unwrap(), 5);
        assert!(estimate_k(&x, 1, 5, &rng).is_err());
        assert!(estimate_k(&x, 6, 5, &rng).is_err());
    }

    #[test]
    fn estimate_k_antipodal_pair() {
        let mut rng = SeededRng::new(21);
        let dir = vec![0.0, 1.0, 0.0, 0.0];
        let neg: Vec<f64> = dir.iter().map(|v| -v).collect();
        let mut rows = bundle(&dir, 40, 0.05, &mut rng);
        rows.extend(bundle(&neg, 40, 0.05, &mut rng));
        let x = unit_rows(&rows);
        assert_eq!(estimate_k(&x, 2, 5, &SeededRng::new(3)).unwrap(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn assignment_equals_brute_force(n in 1usize..200, k in 1usize..10, seed in any::<u64>()) {
                let mut rng = SeededRng::new(seed);
                let x = random_unit(n, 6, &mut rng);
                let c = random_unit(k, 6, &mut rng);
                let (a, s) = assign_and_score(&x, &c).unwrap();
                for i in 0..n {
                    let scores: Vec<f64> = (0..k).map(|j| dot(x.row(i), c.row(j))).collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!((s[i] - max).abs() <= 1e-12);
                    prop_assert!((scores[a[i]] - max).abs() <= 1e-12);
                }
            }

            #[test]
            fn kmeans_objective_never_increases(n in 5usize..80, k in 1usize..6, seed in any::<u64>()) {
                prop_assume!(n >= k);
                let mut rng = SeededRng::new(seed);
                let x = random_unit(n, 4, &mut rng);
                let st = cosine_kmeans(&x, k, &mut rng, 100, 1e-9).unwrap();
                for w in st.objective_trace.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", st.objective_trace);
                }
                for (i, &a) in st.assignments.iter().enumerate() {
                    prop_assert!(a < k);
                    prop_assert!((st.confidences[i] - dot(x.row(i), st.centers.row(a))).abs() <= 1e-10);
                }
                for c in st.centers.row_iter() {
                    prop_assert!((norm(c) - 1.0).abs() <= 1e-10);
                }
            }

            #[test]
            fn kmeans_is_reproducible(n in 5usize..60, k in 1usize..5, seed in any::<u64>()) {
                prop_assume!(n >= k);
                let x = random_unit(n, 3, &mut SeededRng::new(seed));
                let a = cosine_kmeans(&x, k, &mut SeededRng::new(seed ^ 1), 100, 1e-6).unwrap();
                let b = cosine_kmeans(&x, k, &mut SeededRng::new(seed ^ 1), 100, 1e-6).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn confident_sets_dominate(n in 1usize..120, k in 1usize..6, alpha in 0.01f64..=1.0, seed in any::<u64>()) {
                let mut rng = SeededRng::new(seed);
                let assignments: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
                // Coarse grid so ties actually occur.
                let confidences: Vec<f64> = (0..n).map(|_| rng.below(7) as f64 / 6.0).collect();
                let st = state_from(assignments.clone(), confidences.clone(), k);
                let cs = select_top_alpha(&st, alpha).unwrap();
                let mut expected_total = 0;
                for c in 0..k {
                    let pop: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
                    let want = ((alpha * pop.len() as f64) - 1e-9).ceil() as usize;
                    let want = if pop.is_empty() { 0 } else { want.max(1) };
                    expected_total += want;
                    let inside = &cs.members[c];
                    prop_assert_eq!(inside.len(), want);
                    prop_assert!(inside.iter().all(|&i| assignments[i] == c));
                    for w in inside.windows(2) {
                        prop_assert!(confidences[w[0]] >= confidences[w[1]]);
                    }
                    let min_in = inside.iter().map(|&i| confidences[i]).fold(f64::INFINITY, f64::min);
                    for &i in pop.iter().filter(|i| !inside.contains(i)) {
                        prop_assert!(confidences[i] <= min_in);
                        if confidences[i] == min_in {
                            // Tie at the cut: the lower index must be inside.
                            prop_assert!(inside.iter().filter(|&&j| confidences[j] == min_in).all(|&j| j < i));
                        }
                    }
                }
                prop_assert_eq!(cs.total(), expected_total);
            }
        }
    }
}
