//! Dense row-major `f64` matrix used for token embeddings and every
//! intermediate of the attention paths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense real matrix; row `t` is the embedding of token `t`.
///
/// Always at least 1×1 with finite entries. Immutable from the outside:
/// every operation returns a new matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for TokenMatrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        TokenMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<TokenMatrix> for RawMatrix {
    fn from(m: TokenMatrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl fmt::Debug for TokenMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "TokenMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(shape_err!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of finite arithmetic on finite inputs.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert!(rows > 0 && cols > 0 && data.len() == rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix row by row from a generator.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> TokenMatrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_parts(self.cols, self.rows, data)
    }

    /// `self · other`
    pub fn matmul(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        if self.cols != other.rows {
            return Err(shape_err!(
                "matmul {}x{} by {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let out_row = &mut out[r * n..(r + 1) * n];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(self.rows, n, out))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        if self.cols != other.cols {
            return Err(shape_err!(
                "matmul_t {}x{} by ({}x{})^T",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for s in 0..other.rows {
                out.push(dot(a, other.row(s)));
            }
        }
        Ok(Self::from_parts(self.rows, other.rows, out))
    }

    pub fn add(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &TokenMatrix) -> Result<TokenMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &TokenMatrix, f: impl Fn(f64, f64) -> f64) -> Result<TokenMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err!(
                "elementwise op on {}x{} and {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        TokenMatrix::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Result<TokenMatrix> {
        TokenMatrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<TokenMatrix> {
        if bias.len() != self.cols {
            return Err(shape_err!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            ));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        TokenMatrix::new(out.rows, out.cols, out.data)
    }

    /// Columns `start..start + width`, e.g. one attention head.
    pub fn column_block(&self, start: usize, width: usize) -> Result<TokenMatrix> {
        if width == 0 || start + width > self.cols {
            return Err(shape_err!(
                "column block {start}..{} of {} columns",
                start + width,
                self.cols
            ));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Self::from_parts(self.rows, width, data))
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn hcat(blocks: &[TokenMatrix]) -> Result<TokenMatrix> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("hcat of zero blocks".into()))?;
        let rows = first.rows;
        if let Some(b) = blocks.iter().find(|b| b.rows != rows) {
            return Err(shape_err!("hcat rows {} vs {}", b.rows, rows));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Self::from_parts(rows, cols, data))
    }

    /// Applies `f` to every row independently.
    pub fn map_rows(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<TokenMatrix> {
        let mut data = Vec::new();
        let mut cols = None;
        for r in 0..self.rows {
            let out = f(self.row(r));
            match cols {
                None => cols = Some(out.len()),
                Some(c) if c != out.len() => {
                    return Err(shape_err!(
                        "row op produced {} then {} columns",
                        c,
                        out.len()
                    ))
                }
                _ => {}
            }
            data.extend(out);
        }
        TokenMatrix::new(self.rows, cols.unwrap_or(0), data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn relative_error(&self, reference: &TokenMatrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        Ok(diff / reference.frobenius_norm().max(f64::MIN_POSITIVE))
    }

    pub fn max_abs_diff(&self, other: &TokenMatrix) -> Result<f64> {
        Ok(self
            .sub(other)?
            .data
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs())))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
