//! Dense kernels shared by every network in the crate.
//!
//! Vectors are plain `f64` slices; weight matrices are row-major [`Matrix`]
//! values. Every reduction uses a fixed lane assignment (element `j` always
//! accumulates into lane `j % LANES`), so appending zero-weighted columns to a
//! matrix never changes the bits of the result.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LANES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Column vector (`n x 1`), the storage used for biases and peepholes.
    pub fn column(data: Vec<f64>) -> Self {
        Matrix {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    /// `out += W x`.
    pub fn mul_vec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += Wᵀ y`.
    pub fn mul_t_vec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &g) in y.iter().enumerate() {
            if g != 0.0 {
                axpy(g, self.row(r), out);
            }
        }
    }

    /// `W += y xᵀ`.
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (r, &g) in y.iter().enumerate() {
            if g != 0.0 {
                axpy(g, x, self.row_mut(r));
            }
        }
    }
}

/// Inner product with a fixed lane layout (see module docs).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    for (k, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[k] += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::shape(format!(
            "affine: W is {}x{} but x has dim {}",
            w.rows(),
            w.cols(),
            x.len()
        )));
    }
    if w.rows() != b.len() {
        return Err(Error::shape(format!(
            "affine: W is {}x{} but b has dim {}",
            w.rows(),
            w.cols(),
            b.len()
        )));
    }
    let mut out = vec![0.0; w.rows()];
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(r), x) + b[r];
    }
    Ok(out)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(x: &mut [f64]) {
    assert!(!x.is_empty(), "softmax of an empty vector");
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Hadamard,
    Add,
}

/// Applies a unary (`Sigmoid`, `Tanh`) or binary (`Hadamard`, `Add`) kernel.
pub fn elementwise(op: Elementwise, args: &[&[f64]]) -> Result<Vec<f64>> {
    match op {
        Elementwise::Sigmoid | Elementwise::Tanh => {
            let [x] = args else {
                return Err(Error::shape(format!("{op:?} takes one operand, got {}", args.len())));
            };
            let f = if op == Elementwise::Sigmoid { sigmoid } else { f64::tanh };
            Ok(x.iter().map(|&v| f(v)).collect())
        }
        Elementwise::Hadamard | Elementwise::Add => {
            let [a, b] = args else {
                return Err(Error::shape(format!("{op:?} takes two operands, got {}", args.len())));
            };
            if a.len() != b.len() {
                return Err(Error::shape(format!(
                    "{op:?}: operand dims {} and {}",
                    a.len(),
                    b.len()
                )));
            }
            Ok(a.iter()
                .zip(b.iter())
                .map(|(x, y)| if op == Elementwise::Hadamard { x * y } else { x + y })
                .collect())
        }
    }
}

/// Named access to every trainable block of a network.
///
/// Two values of the same architecture and shape enumerate their blocks in
/// the same order, which is what lets a gradient container mirror its model.
pub trait Parameters {
    fn blocks(&self) -> Vec<(String, &Matrix)>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn zero(&mut self) {
        for (_, m) in self.blocks_mut() {
            m.fill(0.0);
        }
    }

    /// Multiplies every entry by `factor`.
    fn scale(&mut self, factor: f64) {
        for (_, m) in self.blocks_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    /// Sum of squares of every entry.
    fn squared_norm(&self) -> f64 {
        self.blocks().iter().map(|(_, m)| m.sum_squares()).sum()
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    blocks: Vec<(String, &'a Matrix)>,
) -> impl Iterator<Item = (String, &'a Matrix)> + 'a {
    let prefix = prefix.to_string();
    blocks.into_iter().map(move |(n, m)| (format!("{prefix}.{n}"), m))
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    blocks: Vec<(String, &'a mut Matrix)>,
) -> impl Iterator<Item = (String, &'a mut Matrix)> + 'a {
    let prefix = prefix.to_string();
    blocks.into_iter().map(move |(n, m)| (format!("{prefix}.{n}"), m))
}

/// Plain SGD with global-norm clipping. There are no per-parameter buffers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, clip_norm: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {learning_rate}")));
        }
        if !(clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {clip_norm}")));
        }
        Ok(OptimizerState {
            learning_rate,
            clip_norm,
        })
    }
}

/// One clipped SGD update. Returns the global gradient norm before clipping.
pub fn sgd_step<P, G>(params: &mut P, grads: &G, state: &OptimizerState) -> Result<f64>
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    let gblocks = grads.blocks();
    let mut sq = 0.0;
    for (name, g) in &gblocks {
        if !g.is_finite() {
            return Err(Error::Training(format!("non-finite gradient in block {name}")));
        }
        sq += g.sum_squares();
    }
    let norm = sq.sqrt();
    let scale = if norm > state.clip_norm {
        state.clip_norm / norm
    } else {
        1.0
    };
    let step = state.learning_rate * scale;

    let pblocks = params.blocks_mut();
    if pblocks.len() != gblocks.len() {
        return Err(Error::shape(format!(
            "{} parameter blocks but {} gradient blocks",
            pblocks.len(),
            gblocks.len()
        )));
    }
    for ((pname, p), (gname, g)) in pblocks.into_iter().zip(&gblocks) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "parameter {pname} is {:?} but gradient {gname} is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if step != 0.0 {
            axpy(-step, g.as_slice(), p.as_mut_slice());
        }
    }
    Ok(norm)
}
