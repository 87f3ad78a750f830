//! Semantic consistency matching.
//!
//! Finds the one-to-one relabeling that maximizes agreement between two
//! labelings, either consecutive clusterings or clusters vs. ground truth.
//! The solver is Kuhn-Munkres on integer profits; among all optimal
//! permutations the lexicographically smallest one is returned.

use crate::error::{Error, Result};

/// Co-occurrence counts: `get(k, m)` is the number of samples labeled `k`
/// in the first labeling and `m` in the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyMatrix {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
}

impl ContingencyMatrix {
    /// Build directly from a row-major profit table.
    pub fn from_counts(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} contingency needs {} counts, got {}",
                rows * cols,
                counts.len()
            )));
        }
        Ok(Self { rows, cols, counts })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.counts[r * self.cols + c]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// A one-to-one map from row labels to column labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMap {
    /// `mapping[k]` is the column matched to row `k`, or `None` when `k` was
    /// paired with a padding column (more rows than columns).
    pub mapping: Vec<Option<usize>>,
    pub cols: usize,
    /// Total agreement `Σ_k counts[k][σ(k)]`.
    pub score: u64,
}

impl PermutationMap {
    pub fn identity(k: usize) -> Self {
        Self {
            mapping: (0..k).map(Some).collect(),
            cols: k,
            score: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.mapping.len()
    }

    pub fn get(&self, k: usize) -> Option<usize> {
        self.mapping.get(k).copied().flatten()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(k, m)| *m == Some(k))
    }

    /// Dense form for square maps.
    pub fn to_dense(&self) -> Option<Vec<usize>> {
        self.mapping.iter().copied().collect()
    }

    /// Inverse lookup: the row mapped onto column `c`.
    pub fn preimage(&self, c: usize) -> Option<usize> {
        self.mapping.iter().position(|m| *m == Some(c))
    }
}

fn check_labels(labels: &[usize], bound: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= bound) {
        Some(index) => Err(Error::LabelOutOfRange {
            index,
            label: labels[index],
            bound,
        }),
        None => Ok(()),
    }
}

pub fn contingency(
    labels_a: &[usize],
    labels_b: &[usize],
    k_a: usize,
    k_b: usize,
) -> Result<ContingencyMatrix> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::LengthMismatch {
            left: labels_a.len(),
            right: labels_b.len(),
        });
    }
    check_labels(labels_a, k_a)?;
    check_labels(labels_b, k_b)?;
    let mut counts = vec![0u64; k_a * k_b];
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        counts[a * k_b + b] += 1;
    }
    Ok(ContingencyMatrix {
        rows: k_a,
        cols: k_b,
        counts,
    })
}

/// Square min-cost assignment (Jonker-Volgenant style shortest augmenting
/// paths). Returns the row-to-column matching and the final duals.
fn hungarian(cost: &[i64], n: usize) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    let inf = i64::MAX / 4;
    // 1-based, index 0 is the virtual source column.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_col = vec![0usize; n];
    for j in 1..=n {
        row_col[col_row[j] - 1] = j - 1;
    }
    (row_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Rewrite an optimal matching into the lexicographically smallest optimal
/// one. Optimal matchings are exactly the perfect matchings on edges that
/// are tight under the optimal duals, so each row greedily takes its
/// smallest tight column that still admits a perfect completion.
fn lexicographic_minimum(
    cost: &[i64],
    n: usize,
    u: &[i64],
    v: &[i64],
    mut row_col: Vec<usize>,
) -> Vec<usize> {
    let tight = |r: usize, c: usize| u[r] + v[c] == cost[r * n + c];
    let mut col_row = vec![0usize; n];
    for (r, &c) in row_col.iter().enumerate() {
        col_row[c] = r;
    }
    let mut col_fixed = vec![false; n];
    let mut parent = vec![usize::MAX; n];

    for r in 0..n {
        for c in 0..n {
            if col_fixed[c] || !tight(r, c) {
                continue;
            }
            if row_col[r] == c {
                break;
            }
            // Reroute: free row `r2` (currently on `c`) must reach column
            // `c0` (currently on `r`) by an alternating path of tight edges
            // through unfixed rows and columns.
            let r2 = col_row[c];
            let c0 = row_col[r];
            parent.iter_mut().for_each(|p| *p = usize::MAX);
            let mut queue = std::collections::VecDeque::from([r2]);
            let mut found = false;
            'bfs: while let Some(x) = queue.pop_front() {
                for y in 0..n {
                    if col_fixed[y] || y == c || parent[y] != usize::MAX || !tight(x, y) {
                        continue;
                    }
                    parent[y] = x;
                    if y == c0 {
                        found = true;
                        break 'bfs;
                    }
                    queue.push_back(col_row[y]);
                }
            }
            if !found {
                continue;
            }
            let mut y = c0;
            loop {
                let x = parent[y];
                let prev = row_col[x];
                row_col[x] = y;
                col_row[y] = x;
                if x == r2 {
                    break;
                }
                y = prev;
            }
            row_col[r] = c;
            col_row[c] = r;
            break;
        }
        col_fixed[row_col[r]] = true;
    }
    row_col
}

/// Maximum-agreement one-to-one matching of rows to columns.
///
/// Rectangular tables are padded to square with zero profit. Among
/// permutations with the optimal score the lexicographically smallest
/// (over the padded square) is returned.
pub fn solve_assignment(profit: &ContingencyMatrix) -> PermutationMap {
    let n = profit.rows.max(profit.cols);
    if n == 0 {
        return PermutationMap {
            mapping: Vec::new(),
            cols: profit.cols,
            score: 0,
        };
    }
    let mut cost = vec![0i64; n * n];
    for r in 0..profit.rows {
        for c in 0..profit.cols {
            cost[r * n + c] = -(profit.get(r, c) as i64);
        }
    }
    let (row_col, u, v) = hungarian(&cost, n);
    let row_col = lexicographic_minimum(&cost, n, &u, &v, row_col);

    let mapping: Vec<Option<usize>> = row_col[..profit.rows]
        .iter()
        .map(|&c| (c < profit.cols).then_some(c))
        .collect();
    let score = mapping
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| profit.get(r, c)))
        .sum();
    PermutationMap {
        mapping,
        cols: profit.cols,
        score,
    }
}

/// Number of positions where the two labelings agree.
pub fn agreement(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

/// Match the current clustering onto the previous one.
///
/// `σ(k)` is the previous label matched to current label `k`; the returned
/// labels are `σ(labels_t[i])`, i.e. the current clustering expressed in the
/// previous iteration's label space.
pub fn match_iterations(
    labels_t: &[usize],
    labels_prev: &[usize],
    k: usize,
) -> Result<(PermutationMap, Vec<usize>)> {
    let table = contingency(labels_t, labels_prev, k, k)?;
    let sigma = solve_assignment(&table);
    let dense = sigma.to_dense().expect("square matching is total");
    let relabeled = labels_t.iter().map(|&l| dense[l]).collect();
    Ok((sigma, relabeled))
}

/// Map each ground-truth class to a distinct predicted cluster, maximizing
/// the number of labeled samples whose cluster matches their class's image.
/// Classes left without a cluster (more classes than clusters) map to `None`.
pub fn map_supervised_labels(
    pred_on_labeled: &[usize],
    gt: &[usize],
    k_pred: usize,
    k_gt: usize,
) -> Result<PermutationMap> {
    let table = contingency(gt, pred_on_labeled, k_gt, k_pred)?;
    Ok(solve_assignment(&table))
}
