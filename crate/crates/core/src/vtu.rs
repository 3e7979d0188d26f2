//! Attention over unique tokens that reproduces RoPE attention over the
//! full, redundant sequence.
//!
//! For every rotary component `k` the full similarity decomposes as
//!
//! ```text
//! A_k = C_k M G_k Mᵀ C_k + S_k M G_k Mᵀ S_k + S_k M X_k Mᵀ C_k − C_k M X_k Mᵀ S_k
//! G_k = Q1 K1ᵀ + Q2 K2ᵀ,   X_k = Q1 K2ᵀ − Q2 K1ᵀ   (unique rows only)
//! ```
//!
//! with `C_k`, `S_k` diagonal in the cosines/sines of each position's angle.
//! The diagonal factors differ per component, so the sum over components is
//! taken only after expansion. Queries, keys and values are never projected
//! for more than the `N_un` unique rows.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::TokenMatrix;
use crate::merge_map::MergeMap;
use crate::nn::{softmax_in_place, AttentionWeights, Init, LayerNorm, Mlp};
use crate::rope::{AttentionMask, RopeAngles};

/// Unique embeddings plus the map that expands them to the full sequence.
/// Positions of the full sequence are `0..map.n_full()`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniqueSequence {
    pub e_un: TokenMatrix,
    pub map: MergeMap,
}

impl UniqueSequence {
    pub fn new(e_un: TokenMatrix, map: MergeMap) -> Result<Self> {
        if e_un.rows() != map.num_groups() {
            return Err(shape_err!(
                "{} unique rows for a map with {} groups",
                e_un.rows(),
                map.num_groups()
            ));
        }
        Ok(Self { e_un, map })
    }

    pub fn n_full(&self) -> usize {
        self.map.n_full()
    }

    pub fn n_unique(&self) -> usize {
        self.map.num_groups()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.n_full()).collect()
    }

    pub fn expand(&self) -> Result<TokenMatrix> {
        self.map.expand(&self.e_un)
    }
}

/// One entry of the rotary similarity for a single 2-d component:
/// `(q1k1 + q2k2)·cos(dθ) + (q1k2 − q2k1)·sin(dθ)`.
pub fn rope_similarity_entry(q: [f64; 2], k: [f64; 2], dtheta: f64) -> f64 {
    (q[0] * k[0] + q[1] * k[1]) * dtheta.cos() + (q[0] * k[1] - q[1] * k[0]) * dtheta.sin()
}

fn check_even(q: &TokenMatrix, k: &TokenMatrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(shape_err!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        ));
    }
    if !q.cols().is_multiple_of(2) {
        return Err(shape_err!("rotary head dimension {} is odd", q.cols()));
    }
    Ok(())
}

/// Per-component gram pair `(G_k, X_k)` for component `k`, each
/// `rows(q) × rows(k)`, row-major.
fn component_grams(q: &TokenMatrix, k: &TokenMatrix, comp: usize) -> (Vec<f64>, Vec<f64>) {
    let (nq, nk) = (q.rows(), k.rows());
    let mut g = Vec::with_capacity(nq * nk);
    let mut x = Vec::with_capacity(nq * nk);
    for a in 0..nq {
        let (q1, q2) = (q.get(a, 2 * comp), q.get(a, 2 * comp + 1));
        for b in 0..nk {
            let (k1, k2) = (k.get(b, 2 * comp), k.get(b, 2 * comp + 1));
            g.push(q1 * k1 + q2 * k2);
            x.push(q1 * k2 - q2 * k1);
        }
    }
    (g, x)
}

/// `QKᵀ = Σ_k (Q1K1ᵀ + Q2K2ᵀ)` and `Q×Kᵀ = Σ_k (Q1K2ᵀ − Q2K1ᵀ)` summed over
/// all components. These totals equal the similarity only when every
/// position has the same angle; [`vtu_similarity`] works per component.
pub fn gram_pair(q_un: &TokenMatrix, k_un: &TokenMatrix) -> Result<(TokenMatrix, TokenMatrix)> {
    check_even(q_un, k_un)?;
    let size = q_un.rows() * k_un.rows();
    let (mut g_tot, mut x_tot) = (vec![0.0; size], vec![0.0; size]);
    for comp in 0..q_un.cols() / 2 {
        let (g, x) = component_grams(q_un, k_un, comp);
        g_tot.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
        x_tot.iter_mut().zip(&x).for_each(|(t, v)| *t += v);
    }
    Ok((
        TokenMatrix::new(q_un.rows(), k_un.rows(), g_tot)?,
        TokenMatrix::new(q_un.rows(), k_un.rows(), x_tot)?,
    ))
}

/// Scalar multiplications spent in the similarity stage of one head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimilarityCost {
    /// `G_k`, `X_k` on unique rows: `4·N_un²` per component.
    pub gram: u64,
    /// Row-side diagonal scaling of the gathered grams: `4·N·N_un` per component.
    pub left: u64,
    /// Column-side scaling into the `N × N` result: `2·N²` per component.
    pub right: u64,
}

impl SimilarityCost {
    pub fn total(&self) -> u64 {
        self.gram + self.left + self.right
    }
}

/// Full `N × N` RoPE similarity rebuilt from unique queries and keys.
pub fn vtu_similarity(
    q_un: &TokenMatrix,
    k_un: &TokenMatrix,
    map: &MergeMap,
    angles: &RopeAngles,
) -> Result<TokenMatrix> {
    vtu_similarity_counted(q_un, k_un, map, angles).map(|(a, _)| a)
}

pub fn vtu_similarity_counted(
    q_un: &TokenMatrix,
    k_un: &TokenMatrix,
    map: &MergeMap,
    angles: &RopeAngles,
) -> Result<(TokenMatrix, SimilarityCost)> {
    check_even(q_un, k_un)?;
    let n = map.n_full();
    let n_un = map.num_groups();
    if q_un.rows() != n_un || k_un.rows() != n_un {
        return Err(shape_err!(
            "q/k have {}/{} rows for {n_un} unique tokens",
            q_un.rows(),
            k_un.rows()
        ));
    }
    if angles.len() != n || angles.head_dim() != q_un.cols() {
        return Err(shape_err!(
            "angles cover {} positions x {} dims, need {n} x {}",
            angles.len(),
            angles.head_dim(),
            q_un.cols()
        ));
    }
    let owner = map.owners();
    let mut a = vec![0.0; n * n];
    let mut cost = SimilarityCost::default();
    let mut left_cos = vec![0.0; n_un];
    let mut left_sin = vec![0.0; n_un];
    for comp in 0..q_un.cols() / 2 {
        let (g, x) = component_grams(q_un, k_un, comp);
        cost.gram += 4 * (n_un * n_un) as u64;
        for m in 0..n {
            let (cm, sm) = (angles.cos(m, comp), angles.sin(m, comp));
            let gm = owner[m];
            let (g_row, x_row) = (
                &g[gm * n_un..(gm + 1) * n_un],
                &x[gm * n_un..(gm + 1) * n_un],
            );
            // (C M G + S M X) and (S M G − C M X), row m
            for j in 0..n_un {
                left_cos[j] = cm * g_row[j] + sm * x_row[j];
                left_sin[j] = sm * g_row[j] - cm * x_row[j];
            }
            let a_row = &mut a[m * n..(m + 1) * n];
            for (col, out) in a_row.iter_mut().enumerate() {
                let j = owner[col];
                *out += left_cos[j] * angles.cos(col, comp) + left_sin[j] * angles.sin(col, comp);
            }
        }
        cost.left += 4 * (n * n_un) as u64;
        cost.right += 2 * (n * n) as u64;
    }
    Ok((TokenMatrix::new(n, n, a)?, cost))
}

/// One head of unique-token attention: rebuilds the masked softmax over the
/// full sequence, multiplies by `M·V_un` and group-averages the result.
/// Returns `N_un × head_dim`.
pub fn vtu_head_attention(
    q_un: &TokenMatrix,
    k_un: &TokenMatrix,
    v_un: &TokenMatrix,
    map: &MergeMap,
    angles: &RopeAngles,
    mask: Option<&AttentionMask>,
) -> Result<TokenMatrix> {
    let n = map.n_full();
    let n_un = map.num_groups();
    AttentionMask::check_size(mask, n)?;
    if v_un.rows() != n_un {
        return Err(shape_err!(
            "{} value rows for {n_un} unique tokens",
            v_un.rows()
        ));
    }
    let sim = vtu_similarity(q_un, k_un, map, angles)?;
    let scale = 1.0 / (q_un.cols() as f64).sqrt();
    let owner = map.owners();

    // (MᵀM)⁻¹ Mᵀ · smax(A/√d) · M, an N_un × N_un mixing matrix
    let mut mix = vec![0.0; n_un * n_un];
    let mut row = vec![0.0; n];
    for m in 0..n {
        for (col, r) in row.iter_mut().enumerate() {
            *r = sim.get(m, col) * scale + mask.map_or(0.0, |mk| mk.entry(m, col));
        }
        softmax_in_place(&mut row);
        let target = &mut mix[owner[m] * n_un..(owner[m] + 1) * n_un];
        for (col, &w) in row.iter().enumerate() {
            target[owner[col]] += w;
        }
    }
    for (j, g) in map.groups().iter().enumerate() {
        let inv = 1.0 / g.len() as f64;
        mix[j * n_un..(j + 1) * n_un]
            .iter_mut()
            .for_each(|v| *v *= inv);
    }
    TokenMatrix::new(n_un, n_un, mix)?.matmul(v_un)
}

/// Multi-head unique-token RoPE attention with output projection. The map
/// is carried through unchanged.
pub fn vtu_attention(
    seq: &UniqueSequence,
    weights: &AttentionWeights,
    angles: &RopeAngles,
    mask: Option<&AttentionMask>,
) -> Result<UniqueSequence> {
    weights.validate()?;
    if seq.e_un.cols() != weights.d_model() {
        return Err(shape_err!(
            "embedding width {} vs d_model {}",
            seq.e_un.cols(),
            weights.d_model()
        ));
    }
    let qs = weights.project_heads(&seq.e_un, &weights.wq)?;
    let ks = weights.project_heads(&seq.e_un, &weights.wk)?;
    let vs = weights.project_heads(&seq.e_un, &weights.wv)?;
    let heads = qs
        .iter()
        .zip(&ks)
        .zip(&vs)
        .map(|((q, k), v)| vtu_head_attention(q, k, v, &seq.map, angles, mask))
        .collect::<Result<Vec<_>>>()?;
    let out = TokenMatrix::hcat(&heads)?.matmul(&weights.wo)?;
    UniqueSequence::new(out, seq.map.clone())
}

/// Applies a row-wise operator to the unique rows only.
pub fn lift_pointwise(
    op: impl Fn(&[f64]) -> Vec<f64>,
    seq: &UniqueSequence,
) -> Result<UniqueSequence> {
    UniqueSequence::new(seq.e_un.map_rows(op)?, seq.map.clone())
}

/// Pre-norm decoder block: attention, then a GELU MLP, each with a residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub attn: AttentionWeights,
    pub ln_attn: LayerNorm,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderWeights {
    pub fn seeded(heads: usize, head_dim: usize, mlp_hidden: usize, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let attn = AttentionWeights::seeded(heads, head_dim, &mut init)?;
        let d = attn.d_model();
        Ok(Self {
            ln_attn: init.layer_norm(d),
            ln_mlp: init.layer_norm(d),
            mlp: init.mlp(d, mlp_hidden)?,
            attn,
        })
    }
}

/// `h = x + attn(LN(x))`, `out = h + MLP(LN(h))`, with attention computed on
/// unique tokens and every row-wise op lifted.
pub fn decoder_layer_vtu(
    seq: &UniqueSequence,
    weights: &DecoderWeights,
    angles: &RopeAngles,
    mask: Option<&AttentionMask>,
) -> Result<UniqueSequence> {
    let normed = lift_pointwise(|r| weights.ln_attn.apply_row(r), seq)?;
    let attn = vtu_attention(&normed, &weights.attn, angles, mask)?;
    let h = UniqueSequence::new(seq.e_un.add(&attn.e_un)?, seq.map.clone())?;
    let mlp = lift_pointwise(|r| weights.mlp.apply_row(&weights.ln_mlp.apply_row(r)), &h)?;
    UniqueSequence::new(h.e_un.add(&mlp.e_un)?, seq.map.clone())
}

/// Analytic attention cost in MFLOPs: multiply-accumulates of the similarity
/// grams only. Full attention forms `QKᵀ` (`N²·D`); unique-token attention
/// forms both `QKᵀ` and `Q×Kᵀ` on unique rows (`2·N_un²·D`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub n_full: usize,
    pub n_unique: usize,
    pub d_total: usize,
    pub full_mflops: f64,
    pub vtu_mflops: f64,
}

impl FlopsReport {
    pub const CSV_HEADER: &'static str = "n_full,n_unique,d_total,full_mflops,vtu_mflops";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.1}",
            self.n_full, self.n_unique, self.d_total, self.full_mflops, self.vtu_mflops
        )
    }
}

pub fn flops_model(n: usize, n_un: usize, heads: usize, head_dim: usize) -> Result<FlopsReport> {
    if n_un > n {
        return Err(Error::InvalidArgument(format!("n_un={n_un} exceeds n={n}")));
    }
    let d = heads * head_dim;
    Ok(FlopsReport {
        n_full: n,
        n_unique: n_un,
        d_total: d,
        full_mflops: (n * n * d) as f64 / 1e6,
        vtu_mflops: (2 * n_un * n_un * d) as f64 / 1e6,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeConfig;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn entry_examples() {
        assert!(rope_similarity_entry([1.0, 0.0], [1.0, 0.0], FRAC_PI_2).abs() < 1e-16);
        assert_eq!(
            rope_similarity_entry([0.3, -2.0], [1.5, 0.25], 0.0),
            0.3 * 1.5 - 2.0 * 0.25
        );
        assert!((rope_similarity_entry([1.0, 0.0], [0.0, 1.0], FRAC_PI_2) - 1.0).abs() < 1e-16);
    }

    #[test]
    fn gram_pair_examples() {
        let q = TokenMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let (g, x) = gram_pair(&q, &q).unwrap();
        assert_eq!((g.get(0, 0), x.get(0, 0)), (1.0, 0.0));

        let k = TokenMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let (g, x) = gram_pair(&q, &k).unwrap();
        assert_eq!((g.get(0, 0), x.get(0, 0)), (0.0, 1.0));

        let odd = TokenMatrix::from_rows(&[[1.0, 0.0, 2.0]]).unwrap();
        assert!(matches!(gram_pair(&odd, &odd), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_gram_is_antisymmetric_for_shared_input() {
        let q = Init::new(5).matrix(6, 8, 1.0).unwrap();
        let (g, x) = gram_pair(&q, &q).unwrap();
        assert!(g.max_abs_diff(&g.transpose()).unwrap() < 1e-14);
        assert!(x.add(&x.transpose()).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn zero_angles_give_plain_gram() {
        let cfg = RopeConfig::new(4, 10000.0).unwrap();
        let mut init = Init::new(6);
        let q = init.matrix(5, 4, 1.0).unwrap();
        let k = init.matrix(5, 4, 1.0).unwrap();
        let map = MergeMap::identity(5).unwrap();
        let angles = RopeAngles::new(&cfg, &[0; 5]);
        let a = vtu_similarity(&q, &k, &map, &angles).unwrap();
        assert!(a.max_abs_diff(&q.matmul_t(&k).unwrap()).unwrap() < 1e-13);
    }

    #[test]
    fn duplicated_token_rows_differ_by_position() {
        let cfg = RopeConfig::new(4, 100.0).unwrap();
        let mut init = Init::new(7);
        let q = init.matrix(2, 4, 1.0).unwrap();
        let k = init.matrix(2, 4, 1.0).unwrap();
        let map = MergeMap::new(3, vec![vec![0, 2], vec![1]]).unwrap();
        let a = vtu_similarity(&q, &k, &map, &RopeAngles::sequential(&cfg, 3)).unwrap();
        assert_ne!(a.row(0), a.row(2));
    }

    #[test]
    fn similarity_cost_counts() {
        let cfg = RopeConfig::new(8, 10000.0).unwrap();
        let mut init = Init::new(8);
        let q = init.matrix(3, 8, 1.0).unwrap();
        let k = init.matrix(3, 8, 1.0).unwrap();
        let map = MergeMap::from_labels(&[0, 1, 0, 2, 2, 1, 0]).unwrap();
        let (_, cost) =
            vtu_similarity_counted(&q, &k, &map, &RopeAngles::sequential(&cfg, 7)).unwrap();
        // d = 8: gram 2·d·N_un², left 2·d·N·N_un, right d·N²
        assert_eq!(cost.gram, 2 * 8 * 9);
        assert_eq!(cost.left, 2 * 8 * 7 * 3);
        assert_eq!(cost.right, 8 * 49);
    }

    #[test]
    fn flops_formula() {
        let r = flops_model(10, 10, 2, 4).unwrap();
        assert_eq!(r.vtu_mflops, 2.0 * r.full_mflops);
        assert_eq!(r.csv_line(), "10,10,8,0.0,0.0");
        assert!(flops_model(3, 4, 1, 2).is_err());
    }

    #[test]
    fn lift_commutes_with_expand() {
        let map = MergeMap::from_labels(&[0, 1, 0, 1, 2]).unwrap();
        let e_un = Init::new(9).matrix(3, 4, 1.0).unwrap();
        let seq = UniqueSequence::new(e_un, map).unwrap();
        let same = lift_pointwise(|r| r.to_vec(), &seq).unwrap();
        assert_eq!(same, seq);
        let doubled = lift_pointwise(|r| r.iter().map(|v| 2.0 * v).collect(), &seq).unwrap();
        assert_eq!(
            doubled.expand().unwrap(),
            seq.expand().unwrap().scale(2.0).unwrap()
        );
    }
}
