//! Simplex equiangular tight frame prototypes.
//!
//! `P = sqrt(K/(K-1)) · U · (I_K - 1·1ᵀ/K)` for a `d × K` matrix `U` with
//! orthonormal columns. The columns of `P` are unit vectors with pairwise
//! inner product `-1/(K-1)`; they are built once and never updated.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{argmax_low, dot, norm, orthonormal_columns, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct EtfPrototypeSet {
    dim: usize,
    num_classes: usize,
    seed: u64,
    /// `d × K`, column `k` is prototype `p_k`.
    prototypes: Matrix,
    /// The orthonormal frame `U` the prototypes were rotated by.
    basis: Matrix,
    /// `K × d` copy of the prototypes, for row-wise access.
    rows: Matrix,
}

impl EtfPrototypeSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The `d × K` prototype matrix.
    pub fn matrix(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Prototype `k` as a slice of length `d`.
    pub fn prototype(&self, k: usize) -> &[f64] {
        self.rows.row(k)
    }

    /// Prototypes as rows (`K × d`).
    pub fn as_rows(&self) -> &Matrix {
        &self.rows
    }

    /// Write as CSV: a `d,K,seed` line followed by `d` lines of `K` values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_writer(file);
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record([
            self.dim.to_string(),
            self.num_classes.to_string(),
            self.seed.to_string(),
        ])
        .map_err(csv_err)?;
        for r in 0..self.dim {
            w.write_record(self.prototypes.row(r).iter().map(|v| format!("{v:?}")))
                .map_err(csv_err)?;
        }
        let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a CSV written by [`write_csv`](Self::write_csv).
    ///
    /// The stored prototypes must match a rebuild from `(d, K, seed)` bit for
    /// bit; anything else is reported as a parse error.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_reader(file);
        let mut records = reader.records();
        let header = match records.next() {
            Some(Ok(rec)) => rec,
            Some(Err(e)) => return Err(Error::parse(path, "line 1", e.to_string())),
            None => return Err(Error::parse(path, "line 1", "empty file")),
        };
        if header.len() != 3 {
            return Err(Error::parse(path, "line 1", "expected header d,K,seed"));
        }
        let field = |i: usize| -> Result<u64> {
            header[i]
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::parse(path, format!("line 1, field {}", i + 1), e.to_string()))
        };
        let d = field(0)? as usize;
        let k = field(1)? as usize;
        let seed = field(2)?;

        let mut values = Vec::with_capacity(d * k);
        for (r, rec) in records.enumerate() {
            let line = r + 2;
            let rec = rec.map_err(|e| Error::parse(path, format!("line {line}"), e.to_string()))?;
            if rec.len() != k {
                return Err(Error::parse(
                    path,
                    format!("line {line}"),
                    format!("expected {k} values, found {}", rec.len()),
                ));
            }
            for (c, s) in rec.iter().enumerate() {
                let v: f64 = s.trim().parse().map_err(|e: std::num::ParseFloatError| {
                    Error::parse(path, format!("line {line}, column {}", c + 1), e.to_string())
                })?;
                values.push(v);
            }
        }
        if values.len() != d * k {
            return Err(Error::parse(
                path,
                format!("line {}", values.len() / k.max(1) + 2),
                format!("expected {d} prototype rows"),
            ));
        }
        let stored = Matrix::from_vec(d, k, values)
            .map_err(|e| Error::parse(path, "body", e.to_string()))?;
        let rebuilt = build_etf(d, k, seed)?;
        if rebuilt.prototypes.as_slice() != stored.as_slice() {
            return Err(Error::parse(
                path,
                "body",
                "prototypes do not match the construction for the recorded seed",
            ));
        }
        Ok(rebuilt)
    }
}

/// Construct the `K`-class simplex ETF in `d` dimensions.
pub fn build_etf(d: usize, k: usize, seed: u64) -> Result<EtfPrototypeSet> {
    if k < 2 {
        return Err(Error::InvalidClassCount(k));
    }
    if d < k {
        return Err(Error::Dimension(format!(
            "simplex ETF with K={k} needs d >= K so that U has K orthonormal columns, got d={d}"
        )));
    }
    let basis = orthonormal_columns(d, k, &mut SeededRng::new(seed))?;
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    let mut prototypes = Matrix::zeros(d, k);
    for r in 0..d {
        let row = basis.row(r);
        let mean = row.iter().sum::<f64>() / k as f64;
        for (c, u) in row.iter().enumerate() {
            prototypes.set(r, c, scale * (u - mean));
        }
    }
    let rows = prototypes.transpose();
    Ok(EtfPrototypeSet {
        dim: d,
        num_classes: k,
        seed,
        prototypes,
        basis,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtfReport {
    pub max_norm_dev: f64,
    pub max_pair_dev: f64,
    pub pass: bool,
}

/// Check unit norms and the `-1/(K-1)` pairwise law on a prototype matrix.
pub fn verify_prototypes(prototypes: &Matrix, tol: f64) -> EtfReport {
    let cols: Vec<Vec<f64>> = (0..prototypes.cols()).map(|c| prototypes.column(c)).collect();
    let k = cols.len();
    let target = -1.0 / (k as f64 - 1.0);
    let max_norm_dev = cols
        .iter()
        .map(|c| (norm(c) - 1.0).abs())
        .fold(0.0, f64::max);
    let mut max_pair_dev: f64 = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            max_pair_dev = max_pair_dev.max((dot(&cols[i], &cols[j]) - target).abs());
        }
    }
    EtfReport {
        max_norm_dev,
        max_pair_dev,
        pass: max_norm_dev <= tol && max_pair_dev <= tol,
    }
}

pub fn verify_etf(p: &EtfPrototypeSet, tol: f64) -> EtfReport {
    verify_prototypes(p.matrix(), tol)
}

/// Index of the prototype with the largest inner product; ties go to the
/// lowest index.
pub fn nearest_prototype(e: &[f64], p: &EtfPrototypeSet) -> Result<usize> {
    if e.len() != p.dim() {
        return Err(Error::Dimension(format!(
            "embedding has {} entries, prototypes live in dimension {}",
            e.len(),
            p.dim()
        )));
    }
    let (best, _) = argmax_low((0..p.num_classes()).map(|k| dot(e, p.prototype(k))))
        .expect("at least two prototypes");
    Ok(best)
}
