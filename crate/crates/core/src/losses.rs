//! Training objectives with closed-form gradients with respect to the
//! embedding rows.
//!
//! Every loss takes a full batch matrix and marks participating rows
//! through per-row `Option` targets, so the gradients of different terms
//! always share one shape and compose by plain addition.

use crate::error::{Error, Result};
use crate::etf::EtfPrototypeSet;
use crate::numerics::{dot, EmbeddingBatch, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Same shape as the embedding input of the loss.
    pub grad: Matrix,
    /// Set when the loss had nothing to act on and was defined as 0.
    pub empty: bool,
}

impl LossValue {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
            empty: true,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.is_finite()
    }
}

fn check_targets(e: &Matrix, targets: &[Option<usize>], p: &EtfPrototypeSet) -> Result<()> {
    if targets.len() != e.rows() {
        return Err(Error::LengthMismatch {
            left: e.rows(),
            right: targets.len(),
        });
    }
    if e.cols() != p.dim() {
        return Err(Error::Dimension(format!(
            "embeddings have {} columns, prototypes have dimension {}",
            e.cols(),
            p.dim()
        )));
    }
    let k = p.num_classes();
    for (index, t) in targets.iter().enumerate() {
        if let Some(label) = *t {
            if label >= k {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    bound: k,
                });
            }
        }
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance of confident samples to their cluster's prototype.
///
/// Averaged within each cluster, then across the clusters that have at
/// least one selected row (equal cluster weight). Rows with `None` do not
/// participate. With nothing selected the loss is 0 and `empty` is set.
pub fn etf_unsup_loss(
    e: &EmbeddingBatch,
    targets: &[Option<usize>],
    p: &EtfPrototypeSet,
) -> Result<LossValue> {
    check_targets(e, targets, p)?;
    let mut counts = vec![0usize; p.num_classes()];
    for &k in targets.iter().flatten() {
        counts[k] += 1;
    }
    let active = counts.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return Ok(LossValue::zero(e.rows(), e.cols()));
    }
    let mut per_cluster = vec![0.0; p.num_classes()];
    let mut grad = Matrix::zeros(e.rows(), e.cols());
    for (i, t) in targets.iter().enumerate() {
        let Some(k) = *t else { continue };
        let proto = p.prototype(k);
        per_cluster[k] += squared_distance(e.row(i), proto);
        let w = 2.0 / (counts[k] * active) as f64;
        for ((g, x), q) in grad.row_mut(i).iter_mut().zip(e.row(i)).zip(proto) {
            *g = w * (x - q);
        }
    }
    let value = per_cluster
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .sum::<f64>()
        / active as f64;
    Ok(LossValue {
        value,
        grad,
        empty: false,
    })
}

/// Mean squared distance of labeled samples to their mapped prototypes.
pub fn etf_sup_loss(
    e: &EmbeddingBatch,
    y_etf: &[Option<usize>],
    p: &EtfPrototypeSet,
) -> Result<LossValue> {
    check_targets(e, y_etf, p)?;
    let n = y_etf.iter().flatten().count();
    if n == 0 {
        return Err(Error::InvalidInput(
            "supervised alignment needs at least one labeled sample".into(),
        ));
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(e.rows(), e.cols());
    let w = 2.0 / n as f64;
    for (i, t) in y_etf.iter().enumerate() {
        let Some(k) = *t else { continue };
        let proto = p.prototype(k);
        value += squared_distance(e.row(i), proto);
        for ((g, x), q) in grad.row_mut(i).iter_mut().zip(e.row(i)).zip(proto) {
            *g = w * (x - q);
        }
    }
    Ok(LossValue {
        value: value / n as f64,
        grad,
        empty: false,
    })
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {w}")))
    }
}

/// `a·x + b·y` for both value and gradient.
fn blend(x: &LossValue, a: f64, y: &LossValue, b: f64) -> Result<LossValue> {
    if x.grad.shape() != y.grad.shape() {
        return Err(Error::Dimension(format!(
            "cannot combine gradients of shape {:?} and {:?}",
            x.grad.shape(),
            y.grad.shape()
        )));
    }
    let mut grad = x.grad.clone();
    grad.scale_in_place(a);
    grad.add_scaled(&y.grad, b);
    Ok(LossValue {
        value: a * x.value + b * y.value,
        grad,
        empty: x.empty && y.empty,
    })
}

/// `(1 - γ)·u + γ·s`.
pub fn etf_combined(u: &LossValue, s: &LossValue, gamma: f64) -> Result<LossValue> {
    check_weight("gamma", gamma)?;
    // Exact pass-through at the endpoints.
    if gamma == 0.0 && u.grad.shape() == s.grad.shape() {
        return Ok(u.clone());
    }
    if gamma == 1.0 && u.grad.shape() == s.grad.shape() {
        return Ok(s.clone());
    }
    blend(u, 1.0 - gamma, s, gamma)
}

/// `(1 - λ)·u + λ·s`.
pub fn rep_combined(u: &LossValue, s: &LossValue, lambda: f64) -> Result<LossValue> {
    check_weight("lambda", lambda)?;
    if lambda == 0.0 && u.grad.shape() == s.grad.shape() {
        return Ok(u.clone());
    }
    if lambda == 1.0 && u.grad.shape() == s.grad.shape() {
        return Ok(s.clone());
    }
    blend(u, 1.0 - lambda, s, lambda)
}

/// `β·etf + rep`.
pub fn total_loss(etf: &LossValue, rep: &LossValue, beta: f64) -> Result<LossValue> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    blend(etf, beta, rep, 1.0)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("temperature must be > 0, got {tau}")))
    }
}

/// Scaled similarities `z_i · z_j / τ` and the per-row log-sum-exp over
/// `j != i`.
fn logits(z: &Matrix, tau: f64) -> (Matrix, Vec<f64>) {
    let m = z.rows();
    let mut s = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = dot(z.row(i), z.row(j)) / tau;
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    let lse = (0..m)
        .map(|i| {
            let row = s.row(i);
            let max = (0..m)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..m).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
            max + sum.ln()
        })
        .collect();
    (s, lse)
}

/// Push `dL/dS_ij` coefficients back to the rows: `S_ij = z_i·z_j/τ`.
fn accumulate(grad: &mut Matrix, z: &Matrix, i: usize, j: usize, coeff: f64) {
    let d = z.cols();
    for c in 0..d {
        let gi = grad.get(i, c) + coeff * z.get(j, c);
        grad.set(i, c, gi);
        let gj = grad.get(j, c) + coeff * z.get(i, c);
        grad.set(j, c, gj);
    }
}

/// The doubled-batch contrastive loss between two views.
///
/// Row `i` of `e` and row `i` of `e_aug` are positives. Each of the `2B`
/// embeddings is an anchor; its denominator runs over the other `2B - 1`
/// embeddings (positive included). The gradient is returned for the stacked
/// `[e; e_aug]` batch, `2B × d`.
pub fn info_nce_unsup(e: &EmbeddingBatch, e_aug: &EmbeddingBatch, tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    if e.shape() != e_aug.shape() {
        return Err(Error::Dimension(format!(
            "views have shapes {:?} and {:?}",
            e.shape(),
            e_aug.shape()
        )));
    }
    let b = e.rows();
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "contrastive batch needs at least 2 samples, got {b}"
        )));
    }
    let z = e.vstack(e_aug)?;
    let m = 2 * b;
    let (s, lse) = logits(&z, tau);
    let mut value = 0.0;
    let mut grad = Matrix::zeros(m, z.cols());
    let scale = 1.0 / (tau * m as f64);
    for a in 0..m {
        let pos = (a + b) % m;
        value += lse[a] - s.get(a, pos);
        for j in (0..m).filter(|&j| j != a) {
            let softmax = (s.get(a, j) - lse[a]).exp();
            let w = softmax - if j == pos { 1.0 } else { 0.0 };
            accumulate(&mut grad, &z, a, j, w * scale);
        }
    }
    Ok(LossValue {
        value: value / m as f64,
        grad,
        empty: false,
    })
}

/// Supervised contrastive loss over a context batch.
///
/// Rows with `Some(label)` are anchors; an anchor's positives are the other
/// rows with the same label, and its denominator spans every other row of
/// the context. Anchors without positives are skipped; when none remain the
/// loss is 0 and `empty` is set.
pub fn supcon(e: &EmbeddingBatch, labels: &[Option<usize>], tau: f64) -> Result<LossValue> {
    check_tau(tau)?;
    if labels.len() != e.rows() {
        return Err(Error::LengthMismatch {
            left: e.rows(),
            right: labels.len(),
        });
    }
    let m = e.rows();
    let positives: Vec<Vec<usize>> = (0..m)
        .map(|i| match labels[i] {
            Some(y) => (0..m).filter(|&h| h != i && labels[h] == Some(y)).collect(),
            None => Vec::new(),
        })
        .collect();
    let anchors: Vec<usize> = (0..m).filter(|&i| !positives[i].is_empty()).collect();
    if anchors.is_empty() {
        return Ok(LossValue::zero(m, e.cols()));
    }
    let (s, lse) = logits(e, tau);
    let mut value = 0.0;
    let mut grad = Matrix::zeros(m, e.cols());
    let scale = 1.0 / (tau * anchors.len() as f64);
    for &i in &anchors {
        let h = &positives[i];
        let inv_h = 1.0 / h.len() as f64;
        value += lse[i] - inv_h * h.iter().map(|&j| s.get(i, j)).sum::<f64>();
        for j in (0..m).filter(|&j| j != i) {
            let softmax = (s.get(i, j) - lse[i]).exp();
            let w = softmax - if labels[j] == labels[i] { inv_h } else { 0.0 };
            accumulate(&mut grad, e, i, j, w * scale);
        }
    }
    Ok(LossValue {
        value: value / anchors.len() as f64,
        grad,
        empty: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::build_etf;
    use crate::numerics::{l2_normalize_rows, SeededRng};
    use crate::testing::{finite_difference, relative_error};

    fn random_unit(n: usize, d: usize, rng: &mut SeededRng) -> Matrix {
        let data = (0..n * d).map(|_| rng.normal()).collect();
        l2_normalize_rows(&Matrix::from_vec(n, d, data).unwrap(), 1e-12).0
    }

    fn at_prototypes(p: &EtfPrototypeSet, labels: &[usize]) -> Matrix {
        p.as_rows().select_rows(labels)
    }

    #[test]
    fn unsup_zero_at_collapse() {
        let p = build_etf(6, 4, 1).unwrap();
        let labels = [0, 1, 1, 3, 2];
        let e = at_prototypes(&p, &labels);
        let t: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let l = etf_unsup_loss(&e, &t, &p).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad.frobenius_norm(), 0.0);
    }

    #[test]
    fn unsup_antipodal_is_four() {
        let p = build_etf(4, 3, 2).unwrap();
        let neg: Vec<f64> = p.prototype(1).iter().map(|v| -v).collect();
        let e = Matrix::from_rows(&[neg]).unwrap();
        let l = etf_unsup_loss(&e, &[Some(1)], &p).unwrap();
        assert!((l.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unsup_empty_selection_is_flagged_zero() {
        let p = build_etf(4, 3, 2).unwrap();
        let e = Matrix::zeros(3, 4);
        let l = etf_unsup_loss(&e, &[None, None, None], &p).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.empty);
    }

    #[test]
    fn unsup_uses_equal_cluster_weights() {
        let p = build_etf(4, 2, 0).unwrap();
        let neg0: Vec<f64> = p.prototype(0).iter().map(|v| -v).collect();
        // Cluster 0: one sample at distance 4, one at 0. Cluster 1: one at 0.
        let e = Matrix::from_rows(&[neg0, p.prototype(0).to_vec(), p.prototype(1).to_vec()])
            .unwrap();
        let l = etf_unsup_loss(&e, &[Some(0), Some(0), Some(1)], &p).unwrap();
        assert!((l.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sup_orthogonal_is_two_and_empty_errors() {
        let p = build_etf(4, 2, 3).unwrap();
        // Any unit vector orthogonal to p_0.
        let mut v: Vec<f64> = (0..4).map(|i| i as f64 + 1.0).collect();
        let proj = dot(&v, p.prototype(0));
        v.iter_mut().zip(p.prototype(0)).for_each(|(a, b)| *a -= proj * b);
        let n = crate::numerics::norm(&v);
        v.iter_mut().for_each(|a| *a /= n);
        let e = Matrix::from_rows(&[v]).unwrap();
        let l = etf_sup_loss(&e, &[Some(0)], &p).unwrap();
        assert!((l.value - 2.0).abs() < 1e-12);
        assert!(matches!(etf_sup_loss(&e, &[None], &p), Err(Error::InvalidInput(_))));
    }

    fn scalar(value: f64) -> LossValue {
        LossValue {
            value,
            grad: Matrix::from_rows(&[vec![value, -value]]).unwrap(),
            empty: false,
        }
    }

    #[test]
    fn combinations() {
        let (u, s) = (scalar(4.0), scalar(2.0));
        assert_eq!(etf_combined(&u, &s, 0.0).unwrap(), u);
        assert_eq!(etf_combined(&u, &s, 1.0).unwrap(), s);
        assert!((etf_combined(&u, &s, 0.5).unwrap().value - 3.0).abs() < 1e-15);
        assert!(etf_combined(&u, &s, 1.5).is_err());

        let (u, s) = (scalar(1.0), scalar(3.0));
        assert_eq!(rep_combined(&u, &s, 0.0).unwrap(), u);
        assert_eq!(rep_combined(&u, &s, 1.0).unwrap(), s);
        assert!((rep_combined(&u, &s, 0.35).unwrap().value - 1.7).abs() < 1e-12);

        let t = total_loss(&scalar(2.0), &scalar(3.0), 1.0).unwrap();
        assert_eq!(t.value, 5.0);
        assert_eq!(total_loss(&scalar(2.0), &scalar(3.0), 0.0).unwrap().value, 3.0);
        assert!(total_loss(&scalar(2.0), &scalar(3.0), -0.1).is_err());
    }

    #[test]
    fn info_nce_closed_form() {
        let tau = 0.07;
        let e = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let l = info_nce_unsup(&e, &e, tau).unwrap();
        let t = 1.0 / tau;
        let want = -(t.exp() / (t.exp() + 2.0)).ln();
        assert!((l.value - want).abs() < 1e-12);
    }

    #[test]
    fn info_nce_high_temperature_limit() {
        let mut rng = SeededRng::new(8);
        let e = random_unit(4, 6, &mut rng);
        let a = random_unit(4, 6, &mut rng);
        let l = info_nce_unsup(&e, &a, 1e6).unwrap();
        assert!((l.value - 7f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn info_nce_errors() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(info_nce_unsup(&e, &e, 0.1).is_err());
        let e2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(info_nce_unsup(&e2, &e2, 0.0).is_err());
    }

    #[test]
    fn supcon_closed_form() {
        let tau = 0.07;
        let e = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let l = supcon(&e, &[Some(0), Some(0), None, None], tau).unwrap();
        let t = 1.0 / tau;
        let want = -(t.exp() / (t.exp() + 2.0)).ln();
        assert!((l.value - want).abs() < 1e-12);
    }

    #[test]
    fn supcon_skips_unique_labels() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = supcon(&e, &[Some(0), Some(1)], 0.1).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.empty);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(2024);
        let p = build_etf(16, 4, 5).unwrap();
        for _ in 0..5 {
            let e = random_unit(20, 16, &mut rng);
            let t: Vec<Option<usize>> = (0..20)
                .map(|_| (rng.uniform() < 0.7).then(|| rng.below(4)))
                .collect();
            let f = |m: &Matrix| etf_unsup_loss(m, &t, &p).unwrap().value;
            let g = etf_unsup_loss(&e, &t, &p).unwrap().grad;
            assert!(relative_error(&g, &finite_difference(&e, 1e-5, f)) < 1e-6);

            let f = |m: &Matrix| etf_sup_loss(m, &t, &p).unwrap().value;
            let g = etf_sup_loss(&e, &t, &p).unwrap().grad;
            assert!(relative_error(&g, &finite_difference(&e, 1e-5, f)) < 1e-6);

            let v = random_unit(8, 16, &mut rng);
            let w = random_unit(8, 16, &mut rng);
            let stacked = v.vstack(&w).unwrap();
            let split = |m: &Matrix| {
                let top = m.select_rows(&(0..8).collect::<Vec<_>>());
                let bot = m.select_rows(&(8..16).collect::<Vec<_>>());
                info_nce_unsup(&top, &bot, 0.07).unwrap().value
            };
            let g = info_nce_unsup(&v, &w, 0.07).unwrap().grad;
            assert!(relative_error(&g, &finite_difference(&stacked, 1e-5, split)) < 1e-5);

            let labels: Vec<Option<usize>> = (0..16)
                .map(|_| (rng.uniform() < 0.6).then(|| rng.below(3)))
                .collect();
            let f = |m: &Matrix| supcon(m, &labels, 0.07).unwrap().value;
            let g = supcon(&stacked, &labels, 0.07).unwrap().grad;
            assert!(relative_error(&g, &finite_difference(&stacked, 1e-5, f)) < 1e-5);
        }
    }

    #[test]
    fn total_gradient_is_componentwise_sum() {
        let mut rng = SeededRng::new(6);
        let p = build_etf(8, 4, 1).unwrap();
        let e = random_unit(6, 8, &mut rng);
        let a = random_unit(6, 8, &mut rng);
        let z = e.vstack(&a).unwrap();
        let t: Vec<Option<usize>> = (0..12).map(|i| (i < 6).then_some(i % 4)).collect();
        let etf = etf_unsup_loss(&z, &t, &p).unwrap();
        let rep = info_nce_unsup(&e, &a, 0.07).unwrap();
        let tot = total_loss(&etf, &rep, 0.5).unwrap();
        let mut manual = etf.grad.clone();
        manual.scale_in_place(0.5);
        manual.add_scaled(&rep.grad, 1.0);
        assert!(tot.grad.max_abs_diff(&manual) <= 1e-12);
        assert!((tot.value - (0.5 * etf.value + rep.value)).abs() <= 1e-12);
    }

    #[test]
    fn info_nce_is_permutation_equivariant() {
        let mut rng = SeededRng::new(17);
        let e = random_unit(6, 5, &mut rng);
        let a = random_unit(6, 5, &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let base = info_nce_unsup(&e, &a, 0.1).unwrap();
        let moved = info_nce_unsup(&e.select_rows(&perm), &a.select_rows(&perm), 0.1).unwrap();
        assert!((base.value - moved.value).abs() <= 1e-12);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..5 {
                assert!((moved.grad.get(new_row, c) - base.grad.get(old_row, c)).abs() <= 1e-12);
                assert!(
                    (moved.grad.get(new_row + 6, c) - base.grad.get(old_row + 6, c)).abs() <= 1e-12
                );
            }
        }
    }
}
