//! Clustering accuracy under an optimal cluster-to-class matching, and
//! neural-collapse diagnostics against a prototype set.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::etf::{nearest_prototype, EtfPrototypeSet};
use crate::numerics::{argmax_low, dot, norm, EmbeddingBatch, Matrix};
use crate::scm::{contingency, solve_assignment, ContingencyMatrix, PermutationMap};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GcdAccuracy {
    pub all: f64,
    /// 0.0 when no sample belongs to an old class.
    pub old: f64,
    /// 0.0 when no sample belongs to a new class.
    pub new: f64,
    pub correct_all: usize,
    pub correct_old: usize,
    pub correct_new: usize,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
    /// Predicted cluster -> ground-truth class.
    #[serde(skip)]
    pub matching: PermutationMap,
}

/// Accuracy of `pred` against `gt` under one optimal matching shared by the
/// old and new subsets.
///
/// Among matchings with the maximal total, the one with most correct
/// old-class samples is chosen, which makes every reported number invariant
/// to how `pred` names its clusters.
pub fn gcd_accuracy(pred: &[usize], gt: &[usize], old_classes: &[usize]) -> Result<GcdAccuracy> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    let k_pred = pred.iter().max().unwrap() + 1;
    let k_gt = gt.iter().chain(old_classes).max().unwrap() + 1;
    let old: BTreeSet<usize> = old_classes.iter().copied().collect();

    let counts = contingency(pred, gt, k_pred, k_gt)?;
    let scale = pred.len() as u64 + 1;
    let mut weighted = Vec::with_capacity(k_pred * k_gt);
    for r in 0..k_pred {
        for c in 0..k_gt {
            let n = counts.get(r, c);
            weighted.push(n * scale + if old.contains(&c) { n } else { 0 });
        }
    }
    let table = ContingencyMatrix::from_counts(k_pred, k_gt, weighted)?;
    let matching = solve_assignment(&table);

    let (mut correct_old, mut correct_new, mut n_old) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        let is_old = old.contains(&g);
        n_old += usize::from(is_old);
        if matching.get(p) == Some(g) {
            if is_old {
                correct_old += 1;
            } else {
                correct_new += 1;
            }
        }
    }
    let n_all = pred.len();
    let n_new = n_all - n_old;
    let frac = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(GcdAccuracy {
        all: frac(correct_old + correct_new, n_all),
        old: frac(correct_old, n_old),
        new: frac(correct_new, n_new),
        correct_all: correct_old + correct_new,
        correct_old,
        correct_new,
        n_all,
        n_old,
        n_new,
        matching,
    })
}

/// Fraction of positions whose label changed.
pub fn flip_rate(before: &[usize], after: &[usize]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            left: before.len(),
            right: after.len(),
        });
    }
    if before.is_empty() {
        return Ok(0.0);
    }
    let flips = before.iter().zip(after).filter(|(a, b)| a != b).count();
    Ok(flips as f64 / before.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NcMetrics {
    /// Mean over classes of the within-class mean squared distance.
    pub nc1_within_var: f64,
    /// `tr(Σ_W) / tr(Σ_B)`.
    pub nc1_ratio: f64,
    /// Largest deviation of a centered-mean pair cosine from `-1/(K-1)`.
    pub nc2_pair_dev: f64,
    /// Mean cosine between each centered class mean and its prototype.
    pub nc3_self_duality: f64,
    /// Agreement of nearest-prototype and nearest-class-mean decisions.
    pub nc4_agreement: f64,
}

/// Average of rows relative to the first one, so identical rows give an
/// exact mean.
fn shifted_mean<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut reference: Option<&[f64]> = None;
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for r in rows {
        let base = *reference.get_or_insert(r);
        for j in 0..d {
            acc[j] += r[j] - base[j];
        }
        n += 1;
    }
    let base = reference.expect("at least one row");
    (0..d).map(|j| base[j] + acc[j] / n as f64).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neural-collapse diagnostics for embeddings `e` with class `labels`,
/// where class `k` is paired with prototype `k`.
///
/// The global mean is the mean of class means.
pub fn nc_metrics(e: &EmbeddingBatch, labels: &[usize], etf: &EtfPrototypeSet) -> Result<NcMetrics> {
    let k = etf.num_classes();
    let d = etf.dim();
    if e.cols() != d {
        return Err(Error::Dimension(format!(
            "embeddings have {} columns, prototypes {d}",
            e.cols()
        )));
    }
    if labels.len() != e.rows() {
        return Err(Error::LengthMismatch {
            left: e.rows(),
            right: labels.len(),
        });
    }
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                bound: k,
            });
        }
        members[l].push(i);
    }
    if let Some(class) = members.iter().position(Vec::is_empty) {
        return Err(Error::DegenerateClass { class });
    }

    let means: Vec<Vec<f64>> = members
        .iter()
        .map(|m| shifted_mean(m.iter().map(|&i| e.row(i)), d))
        .collect();
    let within = members
        .iter()
        .zip(&means)
        .map(|(m, mu)| m.iter().map(|&i| sq_dist(e.row(i), mu)).sum::<f64>() / m.len() as f64)
        .sum::<f64>()
        / k as f64;
    let global = shifted_mean(means.iter().map(Vec::as_slice), d);
    let centered: Vec<Vec<f64>> = means
        .iter()
        .map(|mu| mu.iter().zip(&global).map(|(a, b)| a - b).collect())
        .collect();
    let between = centered.iter().map(|c| dot(c, c)).sum::<f64>() / k as f64;
    let nc1_ratio = if between > 0.0 {
        within / between
    } else if within == 0.0 {
        0.0
    } else {
        return Err(Error::DegenerateInput("class means coincide".into()));
    };

    let unit: Vec<Vec<f64>> = centered
        .iter()
        .map(|c| {
            let n = norm(c);
            if n > 0.0 {
                c.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; d]
            }
        })
        .collect();
    let target = -1.0 / (k as f64 - 1.0);
    let mut nc2: f64 = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            nc2 = nc2.max((dot(&unit[a], &unit[b]) - target).abs());
        }
    }
    let nc3 = (0..k).map(|c| dot(&unit[c], etf.prototype(c))).sum::<f64>() / k as f64;

    let mean_matrix = Matrix::from_rows(&means)?;
    let mut agree = 0usize;
    for i in 0..e.rows() {
        let by_proto = nearest_prototype(e.row(i), etf)?;
        let by_mean = argmax_low(mean_matrix.row_iter().map(|mu| -sq_dist(e.row(i), mu)))
            .expect("nonempty")
            .0;
        agree += usize::from(by_proto == by_mean);
    }

    Ok(NcMetrics {
        nc1_within_var: within,
        nc1_ratio,
        nc2_pair_dev: nc2,
        nc3_self_duality: nc3,
        nc4_agreement: agree as f64 / e.rows() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::build_etf;
    use crate::numerics::SeededRng;
    use crate::scm::oracle;

    #[test]
    fn hand_instance() {
        // Two old classes, one novel class with a single error.
        let gt = [0, 0, 1, 1, 2, 2];
        let pred = [0, 0, 1, 1, 2, 0];
        let acc = gcd_accuracy(&pred, &gt, &[0, 1]).unwrap();
        assert_eq!(acc.all, 5.0 / 6.0);
        assert_eq!(acc.old, 1.0);
        assert_eq!(acc.new, 0.5);
    }

    #[test]
    fn relabeled_perfect_prediction_scores_one() {
        let gt = [0, 1, 2, 3, 0, 1, 2, 3];
        let pred: Vec<usize> = gt.iter().map(|&g| (g + 2) % 4).collect();
        let acc = gcd_accuracy(&pred, &gt, &[0, 1]).unwrap();
        assert_eq!((acc.all, acc.old, acc.new), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_subsets_report_zero() {
        let acc = gcd_accuracy(&[0, 1], &[0, 1], &[0, 1]).unwrap();
        assert_eq!((acc.all, acc.old, acc.new, acc.n_new), (1.0, 1.0, 0.0, 0));
        assert!(gcd_accuracy(&[], &[], &[0]).is_err());
        assert!(gcd_accuracy(&[0], &[0, 1], &[0]).is_err());
    }

    #[test]
    fn more_clusters_than_classes() {
        let acc = gcd_accuracy(&[0, 1, 2, 3], &[0, 0, 1, 1], &[0]).unwrap();
        assert_eq!(acc.all, 0.5);
    }

    #[test]
    fn flip_rate_counts_changes() {
        assert_eq!(flip_rate(&[0, 1, 2, 3], &[0, 1, 3, 2]).unwrap(), 0.5);
        assert_eq!(flip_rate(&[], &[]).unwrap(), 0.0);
        assert!(flip_rate(&[0], &[]).is_err());
    }

    fn collapsed(etf: &EtfPrototypeSet, per: &[usize]) -> (Matrix, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, &n) in per.iter().enumerate() {
            for _ in 0..n {
                rows.push(etf.prototype(c).to_vec());
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn perfect_collapse() {
        let etf = build_etf(16, 5, 3).unwrap();
        let (e, y) = collapsed(&etf, &[4, 4, 4, 4, 4]);
        let nc = nc_metrics(&e, &y, &etf).unwrap();
        assert_eq!(nc.nc1_within_var, 0.0);
        assert_eq!(nc.nc1_ratio, 0.0);
        assert!(nc.nc2_pair_dev < 1e-12);
        assert!((nc.nc3_self_duality - 1.0).abs() < 1e-12);
        assert_eq!(nc.nc4_agreement, 1.0);
    }

    #[test]
    fn unbalanced_collapse_is_still_perfect() {
        let etf = build_etf(8, 4, 1).unwrap();
        let (e, y) = collapsed(&etf, &[1, 7, 2, 5]);
        let nc = nc_metrics(&e, &y, &etf).unwrap();
        assert_eq!(nc.nc1_within_var, 0.0);
        assert!((nc.nc3_self_duality - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_classes_lower_self_duality() {
        let etf = build_etf(8, 3, 1).unwrap();
        let (e, _) = collapsed(&etf, &[2, 2, 2]);
        let y = vec![1, 1, 0, 0, 2, 2];
        let nc = nc_metrics(&e, &y, &etf).unwrap();
        // Two of three class means sit on another prototype: cos = -1/2.
        assert!((nc.nc3_self_duality - 0.0).abs() < 1e-12);
        assert!((nc.nc4_agreement - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nc_metrics_errors() {
        let etf = build_etf(8, 3, 1).unwrap();
        let (e, _) = collapsed(&etf, &[1, 1, 1]);
        assert!(matches!(
            nc_metrics(&e, &[0, 0, 1], &etf),
            Err(Error::DegenerateClass { class: 2 })
        ));
        assert!(matches!(nc_metrics(&e, &[0, 1, 5], &etf), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn within_variance_of_noisy_classes() {
        let etf = build_etf(4, 2, 0).unwrap();
        let e = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let nc = nc_metrics(&e, &[0, 0, 1, 1], &etf).unwrap();
        // Each sample is at squared distance 1/2 from its class mean.
        assert!((nc.nc1_within_var - 0.5).abs() < 1e-15);
        // Class means at ±(1/4)(1,1,-1,-1) around the centroid: tr(Σ_B) = 1/4.
        assert!((nc.nc1_ratio - 2.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
            proptest::collection::vec(0..k, n)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn invariant_under_pred_relabeling(
                (gt, pred) in (1usize..30).prop_flat_map(|n| (labels(n, 5), labels(n, 5))),
                perm_seed in any::<u64>(),
            ) {
                let mut perm: Vec<usize> = (0..5).collect();
                SeededRng::new(perm_seed).shuffle(&mut perm);
                let renamed: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
                let a = gcd_accuracy(&pred, &gt, &[0, 1, 2]).unwrap();
                let b = gcd_accuracy(&renamed, &gt, &[0, 1, 2]).unwrap();
                prop_assert_eq!((a.all, a.old, a.new), (b.all, b.old, b.new));
            }

            #[test]
            fn total_matches_exhaustive_optimum(
                (gt, pred) in (1usize..25).prop_flat_map(|n| (labels(n, 4), labels(n, 4))),
            ) {
                let acc = gcd_accuracy(&pred, &gt, &[0, 1]).unwrap();
                let k_pred = pred.iter().max().unwrap() + 1;
                let k_gt = gt.iter().max().unwrap().max(&1) + 1;
                let k = k_pred.max(k_gt);
                let table = contingency(&pred, &gt, k, k).unwrap();
                let (best, _) = oracle::best(&table);
                prop_assert_eq!(acc.correct_all as u64, best);
            }

            #[test]
            fn accuracy_bounds(
                (gt, pred) in (1usize..25).prop_flat_map(|n| (labels(n, 6), labels(n, 6))),
            ) {
                let acc = gcd_accuracy(&pred, &gt, &[0, 1, 2]).unwrap();
                for v in [acc.all, acc.old, acc.new] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert_eq!(acc.n_old + acc.n_new, gt.len());
            }
        }
    }
}
