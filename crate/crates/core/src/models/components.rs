use rand::Rng;

use crate::math::{softmax_in_place, Matrix, Parameters};

/// Word embedding table, one row per vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Matrix,
}

impl Embedding {
    pub fn uniform<R: Rng + ?Sized>(vocab_size: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        Embedding {
            table: Matrix::uniform(vocab_size, dim, scale, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn lookup(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }

    pub fn accumulate(&mut self, id: usize, grad: &[f64]) {
        for (g, d) in self.table.row_mut(id).iter_mut().zip(grad) {
            *g += d;
        }
    }
}

impl Parameters for Embedding {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("table".into(), &self.table)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("table".into(), &mut self.table)]
    }
}

/// `softmax(W h + b)` over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    pub w: Matrix,
    pub b: Matrix,
}

impl SoftmaxHead {
    pub fn uniform<R: Rng + ?Sized>(vocab_size: usize, input_dim: usize, scale: f64, rng: &mut R) -> Self {
        SoftmaxHead {
            w: Matrix::uniform(vocab_size, input_dim, scale, rng),
            b: Matrix::uniform(vocab_size, 1, scale, rng),
        }
    }

    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        let mut logits = self.b.as_slice().to_vec();
        self.w.mul_vec_acc(h, &mut logits);
        softmax_in_place(&mut logits);
        logits
    }

    /// Gradient of `scale · (-ln p[target])` given the forward output `p`.
    /// Accumulates into `grads` and returns the gradient on `h`.
    pub fn backward(&self, h: &[f64], p: &[f64], target: usize, scale: f64, grads: &mut SoftmaxHead) -> Vec<f64> {
        let mut dlogits: Vec<f64> = p.iter().map(|v| v * scale).collect();
        dlogits[target] -= scale;
        grads.w.add_outer(&dlogits, h);
        for (g, d) in grads.b.as_mut_slice().iter_mut().zip(&dlogits) {
            *g += d;
        }
        let mut dh = vec![0.0; h.len()];
        self.w.mul_t_vec_acc(&dlogits, &mut dh);
        dh
    }
}

impl Parameters for SoftmaxHead {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// Linear regression head `W h + b` (no output nonlinearity).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub w: Matrix,
    pub b: Matrix,
}

impl LinearHead {
    pub fn uniform<R: Rng + ?Sized>(output_dim: usize, input_dim: usize, scale: f64, rng: &mut R) -> Self {
        LinearHead {
            w: Matrix::uniform(output_dim, input_dim, scale, rng),
            b: Matrix::uniform(output_dim, 1, scale, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        let mut y = self.b.as_slice().to_vec();
        self.w.mul_vec_acc(h, &mut y);
        y
    }

    pub fn backward(&self, h: &[f64], dy: &[f64], grads: &mut LinearHead) -> Vec<f64> {
        grads.w.add_outer(dy, h);
        for (g, d) in grads.b.as_mut_slice().iter_mut().zip(dy) {
            *g += d;
        }
        let mut dh = vec![0.0; h.len()];
        self.w.mul_t_vec_acc(dy, &mut dh);
        dh
    }
}

impl Parameters for LinearHead {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// Squared-error gradient `scale · 2 (y - z) / m` and the loss `Σ (y - z)² / m`.
pub(crate) fn mse_grad(y: &[f64], z: &[f64], scale: f64) -> (f64, Vec<f64>) {
    let m = y.len() as f64;
    let mut loss = 0.0;
    let grad = y
        .iter()
        .zip(z)
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            scale * 2.0 * d / m
        })
        .collect();
    (loss / m, grad)
}
