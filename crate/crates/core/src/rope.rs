//! Rotary position embedding tables and additive attention masks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Per-head rotary configuration. Component `k` rotates coordinates
/// `(2k, 2k + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "rope dim must be even and > 0, got {dim}"
            )));
        }
        if !base.is_finite() || base <= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "rope base must be > 1, got {base}"
            )));
        }
        Ok(Self { dim, base })
    }

    /// Angular frequency of component `k`: `base^(−2k/dim)`.
    pub fn frequency(&self, k: usize) -> f64 {
        self.base.powf(-2.0 * k as f64 / self.dim as f64)
    }
}

/// Rotation angles `θ[m][k] = pos_m · base^(−2k/D_head)` with cached
/// cosines and sines, one row per sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeAngles {
    components: usize,
    positions: Vec<usize>,
    theta: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeAngles {
    pub fn new(cfg: &RopeConfig, positions: &[usize]) -> Self {
        let components = cfg.dim / 2;
        let freqs: Vec<f64> = (0..components).map(|k| cfg.frequency(k)).collect();
        let mut theta = Vec::with_capacity(positions.len() * components);
        for &p in positions {
            theta.extend(freqs.iter().map(|f| p as f64 * f));
        }
        let cos = theta.iter().map(|t| t.cos()).collect();
        let sin = theta.iter().map(|t| t.sin()).collect();
        Self {
            components,
            positions: positions.to_vec(),
            theta,
            cos,
            sin,
        }
    }

    /// Angles for positions `0..n`.
    pub fn sequential(cfg: &RopeConfig, n: usize) -> Self {
        let positions: Vec<usize> = (0..n).collect();
        Self::new(cfg, &positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn head_dim(&self) -> usize {
        self.components * 2
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    #[inline]
    pub fn theta(&self, m: usize, k: usize) -> f64 {
        self.theta[m * self.components + k]
    }

    #[inline]
    pub fn cos(&self, m: usize, k: usize) -> f64 {
        self.cos[m * self.components + k]
    }

    #[inline]
    pub fn sin(&self, m: usize, k: usize) -> f64 {
        self.sin[m * self.components + k]
    }
}

/// Additive `N × N` mask with entries `0` (keep) or `−∞` (block).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn from_entries(n: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != n * n {
            return Err(shape_err!(
                "mask needs {} entries, got {}",
                n * n,
                entries.len()
            ));
        }
        let mut blocked = Vec::with_capacity(entries.len());
        for &e in entries {
            if e == 0.0 {
                blocked.push(false);
            } else if e == f64::NEG_INFINITY {
                blocked.push(true);
            } else {
                return Err(Error::InvalidArgument(format!(
                    "mask entry {e} is not 0 or -inf"
                )));
            }
        }
        Ok(Self { n, blocked })
    }

    /// Query `m` may attend to key `n` only when `n <= m`.
    pub fn causal(n: usize) -> Self {
        let mut blocked = Vec::with_capacity(n * n);
        for m in 0..n {
            blocked.extend((0..n).map(|k| k > m));
        }
        Self { n, blocked }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_blocked(&self, m: usize, n: usize) -> bool {
        self.blocked[m * self.n + n]
    }

    #[inline]
    pub fn entry(&self, m: usize, n: usize) -> f64 {
        if self.is_blocked(m, n) {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }

    pub(crate) fn check_size(mask: Option<&AttentionMask>, n: usize) -> Result<()> {
        match mask {
            Some(m) if m.n != n => Err(shape_err!("mask is {}x{} for a sequence of {n}", m.n, m.n)),
            _ => Ok(()),
        }
    }
}
