//! Brute-force reference implementations.
//!
//! Everything here works on the fully expanded sequence with plain nested
//! loops and its own rotation, softmax, layer norm and MLP arithmetic. Only
//! the data types and the one-hot map algebra are shared with the fast
//! paths, so agreement between the two is meaningful.

use crate::error::{shape_err, Result};
use crate::matrix::TokenMatrix;
use crate::merge_map::SizeVector;
use crate::nn::{AttentionWeights, LayerNorm, Mlp};
use crate::rope::{AttentionMask, RopeAngles};
use crate::vtu::{DecoderWeights, UniqueSequence};

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &TokenMatrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn from_rows(rows: Rows) -> Result<TokenMatrix> {
    TokenMatrix::from_rows(&rows)
}

fn project(x: &Rows, w: &TokenMatrix, col_start: usize, width: usize) -> Rows {
    x.iter()
        .map(|row| {
            (col_start..col_start + width)
                .map(|c| {
                    let mut s = 0.0;
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w.get(i, c);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Rotates component `k = (2k, 2k+1)` of every row by `θ[m][k]`.
fn rotate(x: &Rows, angles: &RopeAngles) -> Rows {
    x.iter()
        .enumerate()
        .map(|(m, row)| {
            let mut out = row.clone();
            for k in 0..row.len() / 2 {
                let t = angles.theta(m, k);
                let (c, s) = (t.cos(), t.sin());
                let (a, b) = (row[2 * k], row[2 * k + 1]);
                out[2 * k] = a * c - b * s;
                out[2 * k + 1] = a * s + b * c;
            }
            out
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let finite_max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if finite_max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&v| (v - finite_max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `RoPE(Q)·RoPE(K)ᵀ` for one head on the full sequence.
pub fn full_rope_similarity(
    q: &TokenMatrix,
    k: &TokenMatrix,
    angles: &RopeAngles,
) -> Result<TokenMatrix> {
    if q.rows() != angles.len() || k.rows() != angles.len() || q.cols() != k.cols() {
        return Err(shape_err!(
            "oracle similarity: q {}x{}, k {}x{}, {} angles",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            angles.len()
        ));
    }
    let qr = rotate(&to_rows(q), angles);
    let kr = rotate(&to_rows(k), angles);
    let a = qr
        .iter()
        .map(|qm| {
            kr.iter()
                .map(|kn| qm.iter().zip(kn).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    from_rows(a)
}

/// Masked `softmax(RoPE(Q)RoPE(K)ᵀ/√d)·V` for one head.
pub fn full_rope_head_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    angles: &RopeAngles,
    mask: Option<&AttentionMask>,
) -> Result<TokenMatrix> {
    let n = q.rows();
    AttentionMask::check_size(mask, n)?;
    if v.rows() != n {
        return Err(shape_err!(
            "oracle attention: {} value rows for {n} queries",
            v.rows()
        ));
    }
    let sim = full_rope_similarity(q, k, angles)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| sim.get(m, j) * scale + mask.map_or(0.0, |mk| mk.entry(m, j)))
            .collect();
        let w = softmax(&logits);
        let row = (0..v.cols())
            .map(|c| (0..n).map(|j| w[j] * v.get(j, c)).sum())
            .collect();
        out.push(row);
    }
    from_rows(out)
}

/// Multi-head RoPE attention on the full sequence, followed by the output
/// projection.
pub fn full_rope_attention(
    e: &TokenMatrix,
    angles: &RopeAngles,
    weights: &AttentionWeights,
    mask: Option<&AttentionMask>,
) -> Result<TokenMatrix> {
    weights.validate()?;
    if e.cols() != weights.d_model() {
        return Err(shape_err!(
            "oracle attention: width {} vs d_model {}",
            e.cols(),
            weights.d_model()
        ));
    }
    let x = to_rows(e);
    let dh = weights.head_dim;
    let mut heads = Vec::with_capacity(weights.heads);
    for h in 0..weights.heads {
        let q = from_rows(project(&x, &weights.wq, h * dh, dh))?;
        let k = from_rows(project(&x, &weights.wk, h * dh, dh))?;
        let v = from_rows(project(&x, &weights.wv, h * dh, dh))?;
        heads.push(to_rows(&full_rope_head_attention(
            &q, &k, &v, angles, mask,
        )?));
    }
    let concat: Rows = (0..e.rows())
        .map(|r| heads.iter().flat_map(|h| h[r].iter().copied()).collect())
        .collect();
    from_rows(project(&concat, &weights.wo, 0, weights.d_model()))
}

/// Group average of full-sequence attention over the expanded input: the
/// definition that unique-token attention must reproduce.
pub fn reference_vtu(
    seq: &UniqueSequence,
    weights: &AttentionWeights,
    angles: &RopeAngles,
    mask: Option<&AttentionMask>,
) -> Result<TokenMatrix> {
    let e = seq.map.expand(&seq.e_un)?;
    let f = full_rope_attention(&e, angles, weights, mask)?;
    seq.map.remerge_average(&f)
}

fn oracle_layer_norm(ln: &LayerNorm, x: &Rows) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let denom = (var + crate::nn::LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / denom * ln.gamma[i] + ln.beta[i])
                .collect()
        })
        .collect()
}

fn oracle_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn oracle_mlp(mlp: &Mlp, x: &Rows) -> Rows {
    let hidden: Rows = project(x, &mlp.w1, 0, mlp.w1.cols())
        .into_iter()
        .map(|h| {
            h.iter()
                .zip(&mlp.b1)
                .map(|(a, b)| oracle_gelu(a + b))
                .collect()
        })
        .collect();
    project(&hidden, &mlp.w2, 0, mlp.w2.cols())
        .into_iter()
        .map(|o| o.iter().zip(&mlp.b2).map(|(a, b)| a + b).collect())
        .collect()
}

fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Full-length pre-norm decoder layer where the only deviation from the
/// plain layer is that the attention output is group-averaged before the
/// residual add. Returns the group average of the layer output.
pub fn reference_decoder_layer(
    seq: &UniqueSequence,
    weights: &DecoderWeights,
    angles: &RopeAngles,
    mask: Option<&AttentionMask>,
) -> Result<TokenMatrix> {
    let e = seq.map.expand(&seq.e_un)?;
    let e_rows = to_rows(&e);
    let normed = from_rows(oracle_layer_norm(&weights.ln_attn, &e_rows))?;
    let attn = full_rope_attention(&normed, angles, &weights.attn, mask)?;
    let attn_avg = seq.map.expand(&seq.map.remerge_average(&attn)?)?;
    let h = add_rows(&e_rows, &to_rows(&attn_avg));
    let out = add_rows(
        &h,
        &oracle_mlp(&weights.mlp, &oracle_layer_norm(&weights.ln_mlp, &h)),
    );
    seq.map.remerge_average(&from_rows(out)?)
}

/// Plain pre-norm decoder layer on a full sequence, no averaging at all.
pub fn full_decoder_layer(
    e: &TokenMatrix,
    weights: &DecoderWeights,
    angles: &RopeAngles,
    mask: Option<&AttentionMask>,
) -> Result<TokenMatrix> {
    let e_rows = to_rows(e);
    let normed = from_rows(oracle_layer_norm(&weights.ln_attn, &e_rows))?;
    let attn = full_rope_attention(&normed, angles, &weights.attn, mask)?;
    let h = add_rows(&e_rows, &to_rows(&attn));
    from_rows(add_rows(
        &h,
        &oracle_mlp(&weights.mlp, &oracle_layer_norm(&weights.ln_mlp, &h)),
    ))
}

/// Row-wise op on the full sequence followed by the group average.
pub fn reference_pointwise(
    seq: &UniqueSequence,
    op: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<TokenMatrix> {
    let e = to_rows(&seq.map.expand(&seq.e_un)?);
    let applied: Rows = e.iter().map(|r| op(r)).collect();
    seq.map.remerge_average(&from_rows(applied)?)
}

/// Layer norm applied by the oracle's own arithmetic.
pub fn layer_norm_rows(ln: &LayerNorm, x: &TokenMatrix) -> Result<TokenMatrix> {
    from_rows(oracle_layer_norm(ln, &to_rows(x)))
}

/// MLP applied by the oracle's own arithmetic.
pub fn mlp_rows(mlp: &Mlp, x: &TokenMatrix) -> Result<TokenMatrix> {
    from_rows(oracle_mlp(mlp, &to_rows(x)))
}

/// Attention of one query against keys/values where entry `j` is literally
/// repeated `sizes[j]` times.
pub fn duplicated_attention(
    q_row: &[f64],
    k_un: &TokenMatrix,
    v_un: &TokenMatrix,
    sizes: &SizeVector,
    scale: f64,
) -> Result<Vec<f64>> {
    if k_un.rows() != sizes.len() || v_un.rows() != sizes.len() {
        return Err(shape_err!(
            "duplicated attention: {} sizes for {} keys",
            sizes.len(),
            k_un.rows()
        ));
    }
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (j, &s) in sizes.as_slice().iter().enumerate() {
        for _ in 0..s {
            keys.push(k_un.row(j));
            values.push(v_un.row(j));
        }
    }
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q_row.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let w = softmax(&logits);
    Ok((0..v_un.cols())
        .map(|c| values.iter().zip(&w).map(|(v, wi)| wi * v[c]).sum())
        .collect())
}

/// k-th largest score (1-indexed) by full sort; `+∞` for `k = 0`, `−∞` when
/// `k` covers every score.
pub fn reference_threshold(scores: &[f64], k: usize) -> f64 {
    if k == 0 {
        return f64::INFINITY;
    }
    if k >= scores.len() {
        return f64::NEG_INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("scores are finite"));
    sorted[k - 1]
}
