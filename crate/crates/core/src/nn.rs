//! Row-wise building blocks shared by the encoder and the decoder layer:
//! layer norm, a two-layer GELU MLP, attention projections and seeded
//! initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::TokenMatrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn unit(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }

    pub fn apply(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        if x.cols() != self.dim() {
            return Err(shape_err!(
                "layer norm over {} for {} columns",
                self.dim(),
                x.cols()
            ));
        }
        x.map_rows(|r| self.apply_row(r))
    }
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// `gelu(x·W1 + b1)·W2 + b2`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: TokenMatrix,
    pub b1: Vec<f64>,
    pub w2: TokenMatrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        let hidden = self.w1.cols();
        let mut h = self.b1.clone();
        for (i, &x) in row.iter().enumerate() {
            for (o, w) in h.iter_mut().zip(self.w1.row(i)) {
                *o += x * w;
            }
        }
        debug_assert_eq!(h.len(), hidden);
        let mut out = self.b2.clone();
        for (j, &a) in h.iter().enumerate() {
            let a = gelu(a);
            for (o, w) in out.iter_mut().zip(self.w2.row(j)) {
                *o += a * w;
            }
        }
        out
    }

    pub fn apply(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        if x.cols() != self.w1.rows() {
            return Err(shape_err!(
                "mlp input {} for {} columns",
                self.w1.rows(),
                x.cols()
            ));
        }
        x.map_rows(|r| self.apply_row(r))
    }
}

/// Multi-head projections, all `d_model × d_model` with `d_model = heads · head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: TokenMatrix,
    pub wk: TokenMatrix,
    pub wv: TokenMatrix,
    pub wo: TokenMatrix,
}

impl AttentionWeights {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ] {
            if w.rows() != d || w.cols() != d {
                return Err(shape_err!(
                    "{name} is {}x{}, expected {d}x{d}",
                    w.rows(),
                    w.cols()
                ));
            }
        }
        Ok(())
    }

    /// Per-head slices of `x·W`.
    pub fn project_heads(&self, x: &TokenMatrix, w: &TokenMatrix) -> Result<Vec<TokenMatrix>> {
        let full = x.matmul(w)?;
        (0..self.heads)
            .map(|h| full.column_block(h * self.head_dim, self.head_dim))
            .collect()
    }

    pub fn seeded(heads: usize, head_dim: usize, init: &mut Init) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::InvalidArgument(
                "heads and head_dim must be positive".into(),
            ));
        }
        let d = heads * head_dim;
        Ok(Self {
            heads,
            head_dim,
            wq: init.fan_in(d, d)?,
            wk: init.fan_in(d, d)?,
            wv: init.fan_in(d, d)?,
            wo: init.fan_in(d, d)?,
        })
    }
}

/// Numerically stable softmax in place. Entries equal to `−∞` get weight 0;
/// a row with every entry at `−∞` is left as all zeros.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Deterministic Gaussian initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z * std
    }

    pub fn vector(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| self.normal(std)).collect()
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Result<TokenMatrix> {
        let data = self.vector(rows * cols, std);
        TokenMatrix::new(rows, cols, data)
    }

    /// Unit-variance-preserving weights: `N(0, 1/fan_in)`.
    pub fn fan_in(&mut self, rows: usize, cols: usize) -> Result<TokenMatrix> {
        self.matrix(rows, cols, 1.0 / (rows as f64).sqrt())
    }

    pub fn mlp(&mut self, dim: usize, hidden: usize) -> Result<Mlp> {
        Ok(Mlp {
            w1: self.fan_in(dim, hidden)?,
            b1: self.vector(hidden, 0.02),
            w2: self.fan_in(hidden, dim)?,
            b2: self.vector(dim, 0.02),
        })
    }

    pub fn layer_norm(&mut self, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: (0..dim).map(|_| 1.0 + self.normal(0.05)).collect(),
            beta: self.vector(dim, 0.02),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_stable_and_normalized() {
        let mut row = [1000.0, 1000.0, f64::NEG_INFINITY];
        softmax_in_place(&mut row);
        assert_eq!(row, [0.5, 0.5, 0.0]);
        let mut blocked = [f64::NEG_INFINITY; 2];
        softmax_in_place(&mut blocked);
        assert_eq!(blocked, [0.0, 0.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let ln = LayerNorm::unit(4);
        let out = ln.apply_row(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + LAYER_NORM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Init::new(3).matrix(4, 4, 1.0).unwrap();
        let b = Init::new(3).matrix(4, 4, 1.0).unwrap();
        let c = Init::new(4).matrix(4, 4, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!(gelu(-10.0).abs() < 1e-12);
    }
}
