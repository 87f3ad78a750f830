use ncgcd::etf::build_etf;
use ncgcd::evaluation::{flip_rate, gcd_accuracy, nc_metrics};
use ncgcd::numerics::l2_normalize_rows;
use ncgcd::scm::{agreement, match_iterations};
use ncgcd::{Matrix, SeededRng};
use proptest::prelude::*;

#[test]
fn random_prediction_scores_near_chance() {
    let mut rng = SeededRng::new(11);
    let n = 10_000;
    let gt: Vec<usize> = (0..n).map(|_| rng.below(5)).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.below(5)).collect();
    let acc = gcd_accuracy(&pred, &gt, &[0, 1]).unwrap();
    assert!((acc.all - 0.2).abs() < 0.05, "{}", acc.all);
}

#[test]
fn isotropic_features_have_no_self_duality() {
    let (k, d, per) = (5, 64, 100);
    let etf = build_etf(d, k, 1).unwrap();
    let mut rng = SeededRng::new(12);
    let raw = Matrix::from_vec(k * per, d, (0..k * per * d).map(|_| rng.normal()).collect()).unwrap();
    let e = l2_normalize_rows(&raw, 1e-12).0;
    let labels: Vec<usize> = (0..k * per).map(|i| i % k).collect();
    let nc = nc_metrics(&e, &labels, &etf).unwrap();
    assert!(nc.nc3_self_duality.abs() < 0.1, "{}", nc.nc3_self_duality);
}

#[test]
fn antipodal_pair_is_an_etf() {
    let etf = build_etf(8, 2, 3).unwrap();
    let mut rng = SeededRng::new(13);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let c = i % 2;
        let noisy: Vec<f64> = etf.prototype(c).iter().map(|v| v + 0.05 * rng.normal()).collect();
        rows.push(noisy);
        labels.push(c);
    }
    let e = l2_normalize_rows(&Matrix::from_rows(&rows).unwrap(), 1e-12).0;
    let nc = nc_metrics(&e, &labels, &etf).unwrap();
    assert!(nc.nc2_pair_dev < 1e-9, "{}", nc.nc2_pair_dev);
}

#[test]
fn flip_rate_examples() {
    assert_eq!(flip_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
    assert_eq!(flip_rate(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
    let a: Vec<usize> = (0..10).collect();
    let mut b = a.clone();
    b[3] = 9;
    assert_eq!(flip_rate(&a, &b).unwrap(), 0.1);
}

#[test]
fn corrupted_relabeling_is_recovered() {
    let mut rng = SeededRng::new(14);
    let prev: Vec<usize> = (0..200).map(|_| rng.below(5)).collect();
    let shift = [3, 0, 4, 1, 2];
    let mut cur: Vec<usize> = prev.iter().map(|&l| shift[l]).collect();
    for i in (0..200).step_by(10) {
        cur[i] = rng.below(5);
    }
    let (_, relabeled) = match_iterations(&cur, &prev, 5).unwrap();
    assert!(agreement(&relabeled, &prev) >= 180);
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0..k, n)
}

proptest! {
    #[test]
    fn subset_counts_add_up(
        (gt, pred) in (1usize..60).prop_flat_map(|n| (labels(n, 6), labels(n, 8))),
    ) {
        let acc = gcd_accuracy(&pred, &gt, &[0, 2, 4]).unwrap();
        prop_assert_eq!(acc.correct_all, acc.correct_old + acc.correct_new);
        let weighted = acc.old * acc.n_old as f64 + acc.new * acc.n_new as f64;
        prop_assert!((acc.all * acc.n_all as f64 - weighted).abs() < 1e-9);
    }
}
