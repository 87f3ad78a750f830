//! Two-layer projection head: `normalize(W2 · gelu(W1 · x + b1) + b2)`,
//! with a hand-written backward pass and plain SGD with weight decay.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, SeededRng};

/// Rows whose pre-normalization norm is at or below this are degenerate.
pub const NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

const CHECKPOINT_MAGIC: &[u8; 4] = b"NCHK";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 4 + 4 + 5 * 8;

/// GeLU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    /// `hidden × d_in`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_out × hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    // Bumped on every mutation; forward caches are tagged with it.
    version: u64,
}

/// Gradients with the same layout as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl HeadGrads {
    fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Everything [`backward`] needs from one [`forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Matrix,
    pre_hidden: Matrix,
    hidden: Matrix,
    norms: Vec<f64>,
    output: Matrix,
    pub degenerate: Vec<bool>,
}

fn xavier(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| (2.0 * rng.uniform() - 1.0) * a).collect();
    Matrix::from_raw(rows, cols, data)
}

pub fn init_head(d_in: usize, hidden: usize, d_out: usize, rng: &mut SeededRng) -> Result<HeadParams> {
    if d_in == 0 || hidden == 0 || d_out == 0 {
        return Err(Error::Dimension(format!(
            "head dimensions must be positive, got {d_in}/{hidden}/{d_out}"
        )));
    }
    let w1 = xavier(hidden, d_in, rng);
    let w2 = xavier(d_out, hidden, rng);
    Ok(HeadParams {
        d_in,
        hidden,
        d_out,
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; d_out],
        seed: rng.seed(),
        step: 0,
        version: 0,
    })
}

/// `x · wᵀ + b`, row by row.
fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = dot(xi, w.row(j)) + b[j];
        }
    }
    out
}

pub fn forward(p: &HeadParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.cols() != p.d_in {
        return Err(Error::Dimension(format!(
            "head expects {} input features, got {}",
            p.d_in,
            x.cols()
        )));
    }
    let pre_hidden = affine(x, &p.w1, &p.b1);
    let mut hidden = pre_hidden.clone();
    hidden.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let raw = affine(&hidden, &p.w2, &p.b2);

    let mut output = raw;
    let mut norms = Vec::with_capacity(x.rows());
    let mut degenerate = vec![false; x.rows()];
    for (i, flag) in degenerate.iter_mut().enumerate() {
        let row = output.row_mut(i);
        let n = norm(row);
        norms.push(n);
        if n <= NORM_EPS {
            row.fill(0.0);
            row[0] = 1.0;
            *flag = true;
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    let cache = ForwardCache {
        version: p.version,
        input: x.clone(),
        pre_hidden,
        hidden,
        norms,
        output: output.clone(),
        degenerate,
    };
    Ok((output, cache))
}

/// Embed without keeping a cache.
pub fn embed(p: &HeadParams, x: &Matrix) -> Result<Matrix> {
    forward(p, x).map(|(e, _)| e)
}

/// Gradient of the scalar `⟨de, e⟩` with respect to every parameter and to
/// the input, through the row normalization `(I - ê êᵀ) / ‖v‖`.
///
/// Degenerate rows (those replaced by the normalization fallback) pass no
/// gradient.
pub fn backward(p: &HeadParams, cache: &ForwardCache, de: &Matrix) -> Result<(HeadGrads, Matrix)> {
    if cache.version != p.version {
        return Err(Error::StaleCache {
            cache: cache.version,
            params: p.version,
        });
    }
    if de.shape() != cache.output.shape() {
        return Err(Error::Dimension(format!(
            "upstream gradient has shape {:?}, output has {:?}",
            de.shape(),
            cache.output.shape()
        )));
    }
    let n = de.rows();
    let mut dv = Matrix::zeros(n, p.d_out);
    for i in 0..n {
        if cache.degenerate[i] {
            continue;
        }
        let e = cache.output.row(i);
        let g = de.row(i);
        let along = dot(e, g);
        let inv = 1.0 / cache.norms[i];
        for ((o, gi), ei) in dv.row_mut(i).iter_mut().zip(g).zip(e) {
            *o = (gi - along * ei) * inv;
        }
    }

    let mut gw2 = Matrix::zeros(p.d_out, p.hidden);
    let mut gb2 = vec![0.0; p.d_out];
    let mut dh = Matrix::zeros(n, p.hidden);
    for i in 0..n {
        let h = cache.hidden.row(i);
        for (o, &g) in dv.row(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb2[o] += g;
            for (w, hv) in gw2.row_mut(o).iter_mut().zip(h) {
                *w += g * hv;
            }
            for (d, wv) in dh.row_mut(i).iter_mut().zip(p.w2.row(o)) {
                *d += g * wv;
            }
        }
    }

    let mut gw1 = Matrix::zeros(p.hidden, p.d_in);
    let mut gb1 = vec![0.0; p.hidden];
    let mut dx = Matrix::zeros(n, p.d_in);
    for i in 0..n {
        let x = cache.input.row(i);
        let pre = cache.pre_hidden.row(i);
        for j in 0..p.hidden {
            let g = dh.get(i, j) * gelu_grad(pre[j]);
            if g == 0.0 {
                continue;
            }
            gb1[j] += g;
            for (w, xv) in gw1.row_mut(j).iter_mut().zip(x) {
                *w += g * xv;
            }
            for (d, wv) in dx.row_mut(i).iter_mut().zip(p.w1.row(j)) {
                *d += g * wv;
            }
        }
    }

    Ok((
        HeadGrads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
        dx,
    ))
}

/// `w ← w − lr·(g + weight_decay·w)`; biases are not decayed.
pub fn sgd_step(p: &mut HeadParams, grads: &HeadGrads, lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate must be > 0, got {lr}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "weight decay must be >= 0, got {weight_decay}"
        )));
    }
    if grads.w1.shape() != p.w1.shape()
        || grads.w2.shape() != p.w2.shape()
        || grads.b1.len() != p.b1.len()
        || grads.b2.len() != p.b2.len()
    {
        return Err(Error::Dimension("gradient shapes do not match the head".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("projection head"));
    }
    let decay = |w: &mut Matrix, g: &Matrix| {
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *wv -= lr * (gv + weight_decay * *wv);
        }
    };
    decay(&mut p.w1, &grads.w1);
    decay(&mut p.w2, &grads.w2);
    for (b, g) in p.b1.iter_mut().zip(&grads.b1) {
        *b -= lr * g;
    }
    for (b, g) in p.b2.iter_mut().zip(&grads.b2) {
        *b -= lr * g;
    }
    p.step += 1;
    p.version += 1;
    Ok(())
}

impl HeadParams {
    /// Assemble parameters from explicit tensors.
    pub fn from_parts(
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let (hidden, d_in) = w1.shape();
        let d_out = w2.rows();
        if w2.cols() != hidden || b1.len() != hidden || b2.len() != d_out {
            return Err(Error::Dimension("inconsistent head tensor shapes".into()));
        }
        Ok(Self {
            d_in,
            hidden,
            d_out,
            w1,
            b1,
            w2,
            b2,
            seed,
            step: 0,
            version: 0,
        })
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    /// Flat little-endian checkpoint: `NCHK`, u32 version, u64 d_in, hidden,
    /// d_out, step, seed, then W1, b1, W2, b2 as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n: usize = self.tensors().iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.d_in as u64, self.hidden as u64, self.d_out as u64, self.step, self.seed] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, msg: &str| Error::parse(path, format!("byte {offset}"), msg);
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(err(bytes.len(), "truncated checkpoint header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err(0, "bad magic, expected NCHK"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(err(4, &format!("unsupported checkpoint version {version}")));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let (d_in, hidden, d_out, step, seed) =
            (word(0) as usize, word(1) as usize, word(2) as usize, word(3), word(4));
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(err(8, "zero head dimension"));
        }
        let sizes = [hidden * d_in, hidden, d_out * hidden, d_out];
        let expected = CHECKPOINT_HEADER_LEN + 8 * sizes.iter().sum::<usize>();
        if bytes.len() < expected {
            let offset = CHECKPOINT_HEADER_LEN + (bytes.len() - CHECKPOINT_HEADER_LEN) / 8 * 8;
            return Err(err(offset, &format!("truncated payload, expected {expected} bytes")));
        }
        if bytes.len() > expected {
            return Err(err(expected, "trailing bytes after payload"));
        }
        let mut offset = CHECKPOINT_HEADER_LEN;
        let mut tensors = Vec::with_capacity(4);
        for size in sizes {
            let mut t = Vec::with_capacity(size);
            for _ in 0..size {
                let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(err(offset, "non-finite parameter"));
                }
                t.push(v);
                offset += 8;
            }
            tensors.push(t);
        }
        let b2 = tensors.pop().unwrap();
        let w2 = Matrix::from_raw(d_out, hidden, tensors.pop().unwrap());
        let b1 = tensors.pop().unwrap();
        let w1 = Matrix::from_raw(hidden, d_in, tensors.pop().unwrap());
        let mut p = HeadParams::from_parts(w1, b1, w2, b2, seed)?;
        p.step = step;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
