//! Synthetic sphere-mixture problems, the labeled/unlabeled known/novel
//! split, feature-space augmentation, and embedding file formats.
//!
//! Two on-disk embedding formats are supported:
//!
//! * CSV: a header row `f0,...,f{d-1}` with an optional trailing `label`
//!   column, then one row per sample.
//! * RAW: `NCGD`, u32 version 1, u64 N, u64 d, u8 has_labels, then `N·d`
//!   little-endian f64 (row-major) and, if flagged, `N` little-endian i64
//!   labels.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, norm, EmbeddingBatch, Matrix, SeededRng};

const RAW_MAGIC: &[u8; 4] = b"NCGD";
const RAW_VERSION: u32 = 1;
const RAW_HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

/// Pairwise cosine ceiling between generated class directions.
const MAX_DIRECTION_COSINE: f64 = 0.8;
const MAX_DIRECTION_ATTEMPTS: usize = 10_000;

/// Draw `n_per_class` samples around each of `k` random unit directions.
///
/// Each sample is `normalize(direction + N(0, 1/kappa · I))`, a tangent-noise
/// stand-in for a von Mises-Fisher draw with concentration `kappa`. Samples
/// are ordered class by class.
pub fn sample_sphere_mixture(
    k: usize,
    d: usize,
    kappa: f64,
    n_per_class: usize,
    rng: &mut SeededRng,
) -> Result<(Matrix, Vec<usize>)> {
    if k < 2 {
        return Err(Error::InvalidClassCount(k));
    }
    if d < 3 {
        return Err(Error::Dimension(format!("sphere mixture needs d >= 3, got {d}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be > 0, got {kappa}")));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidParameter("n_per_class must be at least 1".into()));
    }

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(k);
    while directions.len() < k {
        let mut attempts = 0;
        let dir = loop {
            attempts += 1;
            if attempts > MAX_DIRECTION_ATTEMPTS {
                return Err(Error::InvalidParameter(format!(
                    "could not place {k} directions in d={d} with pairwise cosine < {MAX_DIRECTION_COSINE}"
                )));
            }
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            if directions.iter().all(|u| dot(u, &v) < MAX_DIRECTION_COSINE) {
                break v;
            }
        };
        directions.push(dir);
    }

    let sigma = 1.0 / kappa.sqrt();
    let mut data = Vec::with_capacity(k * n_per_class * d);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for (c, dir) in directions.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(dir.iter().map(|v| v + sigma * rng.normal()));
            labels.push(c);
        }
    }
    let raw = Matrix::from_vec(k * n_per_class, d, data)?;
    Ok((l2_normalize_rows(&raw, 1e-12).0, labels))
}

/// `normalize(x + N(0, sigma²))`, row-wise.
pub fn augment(x: &EmbeddingBatch, sigma: f64, rng: &mut SeededRng) -> Result<EmbeddingBatch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v += sigma * rng.normal();
    }
    Ok(l2_normalize_rows(&out, 1e-12).0)
}

/// Which classes are known, and which samples carry a visible label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub known_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub labeled_indices: Vec<usize>,
}

impl SplitSpec {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::parse(path, format!("line {}, column {}", e.line(), e.column()), e.to_string())
        })
    }

    /// Conventional sidecar location next to a dataset file.
    pub fn sidecar_path(data: &Path) -> PathBuf {
        data.with_extension("split.json")
    }
}

/// A generalized category discovery problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GcdDataset {
    pub features: Matrix,
    pub labeled_mask: Vec<bool>,
    /// Ground truth for every sample; only used for supervision where
    /// `labeled_mask` is set, and for evaluation.
    pub gt_labels: Vec<usize>,
    pub known_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

impl GcdDataset {
    /// Assemble and validate a dataset from features, labels and a split.
    pub fn new(features: Matrix, gt_labels: Vec<usize>, split: &SplitSpec) -> Result<Self> {
        let n = features.rows();
        if gt_labels.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: gt_labels.len(),
            });
        }
        let known: BTreeSet<usize> = split.known_classes.iter().copied().collect();
        let novel: BTreeSet<usize> = split.novel_classes.iter().copied().collect();
        if let Some(c) = known.intersection(&novel).next() {
            return Err(Error::InvalidSplit(format!("class {c} is both known and novel")));
        }
        if known.is_empty() {
            return Err(Error::InvalidSplit("no known classes".into()));
        }
        let present: BTreeSet<usize> = gt_labels.iter().copied().collect();
        if let Some(c) = present.iter().find(|c| !known.contains(c) && !novel.contains(c)) {
            return Err(Error::InvalidSplit(format!("class {c} is neither known nor novel")));
        }
        if let Some(c) = known.iter().chain(&novel).find(|c| !present.contains(c)) {
            return Err(Error::InvalidSplit(format!("class {c} has no samples")));
        }
        let mut labeled_mask = vec![false; n];
        for &i in &split.labeled_indices {
            if i >= n {
                return Err(Error::InvalidSplit(format!("labeled index {i} out of range")));
            }
            if !known.contains(&gt_labels[i]) {
                return Err(Error::InvalidSplit(format!(
                    "sample {i} is labeled but its class {} is not known",
                    gt_labels[i]
                )));
            }
            labeled_mask[i] = true;
        }
        if !labeled_mask.iter().any(|&m| m) {
            return Err(Error::InvalidSplit("no labeled samples".into()));
        }
        Ok(Self {
            features,
            labeled_mask,
            gt_labels,
            known_classes: known.into_iter().collect(),
            novel_classes: novel.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.known_classes.len() + self.novel_classes.len()
    }

    pub fn visible_label(&self, i: usize) -> Option<usize> {
        self.labeled_mask[i].then(|| self.gt_labels[i])
    }

    /// Position of a class within the sorted known-class list.
    pub fn known_index(&self, class: usize) -> Option<usize> {
        self.known_classes.binary_search(&class).ok()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled_mask[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled_mask[i]).collect()
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            known_classes: self.known_classes.clone(),
            novel_classes: self.novel_classes.clone(),
            labeled_indices: self.labeled_indices(),
        }
    }

    /// Load a RAW or CSV dataset (labels required) plus its split sidecar.
    pub fn load(data: &Path, split: &Path) -> Result<Self> {
        let loaded = load_embeddings(data, EmbeddingFormat::from_path(data))?;
        let labels = loaded.labels.ok_or_else(|| {
            Error::InvalidInput(format!("{} carries no labels", data.display()))
        })?;
        GcdDataset::new(loaded.features, labels, &SplitSpec::read_json(split)?)
    }
}

/// Split classes into known/novel and label part of every known class.
///
/// `round(K · known_class_fraction)` classes, drawn at random, become known;
/// within each, `round(labeled_fraction · count)` random samples are labeled.
pub fn gcd_split(
    features: Matrix,
    labels: Vec<usize>,
    known_class_fraction: f64,
    labeled_fraction: f64,
    rng: &mut SeededRng,
) -> Result<GcdDataset> {
    for (name, f) in [
        ("known_class_fraction", known_class_fraction),
        ("labeled_fraction", labeled_fraction),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {f}")));
        }
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n_known = (classes.len() as f64 * known_class_fraction).round() as usize;
    if n_known == 0 {
        return Err(Error::InvalidSplit(format!(
            "known_class_fraction {known_class_fraction} of {} classes leaves no known class",
            classes.len()
        )));
    }
    let mut order = classes.clone();
    rng.shuffle(&mut order);
    let mut known: Vec<usize> = order[..n_known].to_vec();
    known.sort_unstable();
    let novel: Vec<usize> = classes.iter().copied().filter(|c| !known.contains(c)).collect();

    let mut labeled = Vec::new();
    for &c in &known {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut members);
        let take = (members.len() as f64 * labeled_fraction).round() as usize;
        labeled.extend_from_slice(&members[..take]);
    }
    if labeled.is_empty() {
        return Err(Error::InvalidSplit(format!(
            "labeled_fraction {labeled_fraction} labels no samples"
        )));
    }
    labeled.sort_unstable();
    let split = SplitSpec {
        known_classes: known,
        novel_classes: novel,
        labeled_indices: labeled,
    };
    GcdDataset::new(features, labels, &split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Csv,
    Raw,
}

impl EmbeddingFormat {
    /// `.csv` files are CSV, everything else is RAW.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EmbeddingFormat::Csv,
            _ => EmbeddingFormat::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEmbeddings {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    /// Rows that had (near) zero norm and were replaced on load.
    pub degenerate: Vec<usize>,
}

/// Read embeddings and L2-normalize their rows.
pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<LoadedEmbeddings> {
    let (raw, labels) = match format {
        EmbeddingFormat::Raw => read_raw(path)?,
        EmbeddingFormat::Csv => read_csv(path)?,
    };
    let (features, flags) = l2_normalize_rows(&raw, 1e-12);
    let degenerate = (0..flags.len()).filter(|&i| flags[i]).collect();
    Ok(LoadedEmbeddings {
        features,
        labels,
        degenerate,
    })
}

pub fn save_embeddings(
    path: &Path,
    format: EmbeddingFormat,
    x: &Matrix,
    labels: Option<&[usize]>,
) -> Result<()> {
    match format {
        EmbeddingFormat::Raw => fs::write(path, encode_raw(x, labels)?).map_err(|e| Error::io(path, e)),
        EmbeddingFormat::Csv => write_csv(path, x, labels),
    }
}

pub fn encode_raw(x: &Matrix, labels: Option<&[usize]>) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if l.len() != x.rows() {
            return Err(Error::LengthMismatch {
                left: x.rows(),
                right: l.len(),
            });
        }
    }
    let n_labels = labels.map_or(0, <[usize]>::len);
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 8 * (x.as_slice().len() + n_labels));
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    out.push(u8::from(labels.is_some()));
    for v in x.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in labels.unwrap_or(&[]) {
        out.extend_from_slice(&(l as i64).to_le_bytes());
    }
    Ok(out)
}

/// Decode a RAW buffer without normalizing. Errors name the byte offset.
pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<(Matrix, Option<Vec<usize>>)> {
    let err = |offset: usize, msg: String| Error::parse(path, format!("byte {offset}"), msg);
    if bytes.len() < RAW_HEADER_LEN {
        return Err(err(bytes.len(), format!("truncated header, need {RAW_HEADER_LEN} bytes")));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(err(0, "bad magic, expected NCGD".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RAW_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let has_labels = match bytes[24] {
        0 => false,
        1 => true,
        other => return Err(err(24, format!("has_labels must be 0 or 1, got {other}"))),
    };
    if n == 0 || d == 0 {
        return Err(err(8, format!("empty shape {n}x{d}")));
    }
    let values = n
        .checked_mul(d)
        .and_then(|v| v.checked_add(if has_labels { n } else { 0 }))
        .ok_or_else(|| err(8, "shape overflows".into()))?;
    let expected = RAW_HEADER_LEN + 8 * values;
    if bytes.len() < expected {
        let whole = (bytes.len() - RAW_HEADER_LEN) / 8;
        return Err(err(
            RAW_HEADER_LEN + 8 * whole,
            format!("truncated payload, expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(err(expected, "trailing bytes after payload".into()));
    }
    let word = |i: usize| -> [u8; 8] {
        let at = RAW_HEADER_LEN + 8 * i;
        bytes[at..at + 8].try_into().unwrap()
    };
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let v = f64::from_le_bytes(word(i));
        if !v.is_finite() {
            return Err(err(
                RAW_HEADER_LEN + 8 * i,
                format!("non-finite value at row {}, column {}", i / d, i % d),
            ));
        }
        data.push(v);
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let l = i64::from_le_bytes(word(n * d + i));
            if l < 0 {
                return Err(err(
                    RAW_HEADER_LEN + 8 * (n * d + i),
                    format!("negative label {l} for row {i}"),
                ));
            }
            labels.push(l as usize);
        }
        Some(labels)
    } else {
        None
    };
    Ok((Matrix::from_raw(n, d, data), labels))
}

pub fn read_raw(path: &Path) -> Result<(Matrix, Option<Vec<usize>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path)
}

fn write_csv(path: &Path, x: &Matrix, labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("f{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..x.rows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path) -> Result<(Matrix, Option<Vec<usize>>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, "line 1", e.to_string()))?
        .clone();
    let has_labels = header.iter().next_back().is_some_and(|h| h.trim() == "label");
    let d = header.len() - usize::from(has_labels);
    if d == 0 {
        return Err(Error::parse(path, "line 1", "no feature columns"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::parse(path, format!("row {row}"), e.to_string()))?;
        for (c, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field.trim().parse().map_err(|e: std::num::ParseFloatError| {
                Error::parse(path, format!("row {row}, column {}", c + 1), e.to_string())
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    format!("row {row}, column {}", c + 1),
                    "non-finite value",
                ));
            }
            data.push(v);
        }
        if has_labels {
            let l: usize = rec[d].trim().parse().map_err(|e: std::num::ParseIntError| {
                Error::parse(path, format!("row {row}, column {}", d + 1), e.to_string())
            })?;
            labels.push(l);
        }
    }
    let n = data.len() / d;
    if n == 0 {
        return Err(Error::parse(path, "row 1", "no samples"));
    }
    Ok((Matrix::from_raw(n, d, data), has_labels.then_some(labels)))
}
