//! Per-layer dynamic token merging.
//!
//! Tokens are split alternately into a source side `A` (odd positions) and a
//! destination side `B` (even positions). Every source proposes one edge to
//! its most similar destination; edges are then kept either by a similarity
//! threshold (dynamic merging) or by a fixed top-`r` budget. Kept sources are
//! folded into their destinations with size-weighted averaging, so a merged
//! token always equals the mean of every original token it absorbed.

use std::cmp::Ordering;

use crate::error::{shape_err, Error, Result};
use crate::matrix::{dot, TokenMatrix};
use crate::merge_map::{MergeMap, SizeVector};
use crate::nn::softmax_in_place;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteSplit {
    pub set_a: Vec<usize>,
    pub set_b: Vec<usize>,
}

impl BipartiteSplit {
    pub fn len(&self) -> usize {
        self.set_a.len() + self.set_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Even positions go to `B`, odd positions to `A`.
///
/// With `protect_first`, position 0 can never be a merge source. It stays a
/// valid destination.
pub fn split_alternating(n: usize, protect_first: bool) -> Result<BipartiteSplit> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "bipartite split needs n >= 2, got {n}"
        )));
    }
    let (mut set_a, mut set_b): (Vec<usize>, Vec<usize>) = (0..n).partition(|p| p % 2 == 1);
    if protect_first && set_a.first() == Some(&0) {
        set_a.remove(0);
        set_b.insert(0, 0);
    }
    Ok(BipartiteSplit { set_a, set_b })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeSet(pub Vec<Edge>);

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.0
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|e| e.score)
    }
}

/// Head-averaged, L2-normalized keys. Dot products of the result are cosine
/// similarities.
pub fn similarity_keys(per_head_keys: &[TokenMatrix]) -> Result<TokenMatrix> {
    let first = per_head_keys
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attention heads".into()))?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut data = vec![0.0; rows * cols];
    for k in per_head_keys {
        if k.rows() != rows || k.cols() != cols {
            return Err(shape_err!(
                "head keys {}x{} vs {rows}x{cols}",
                k.rows(),
                k.cols()
            ));
        }
        for (d, v) in data.iter_mut().zip(k.data()) {
            *d += v;
        }
    }
    for row in data.chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    TokenMatrix::new(rows, cols, data)
}

/// One edge per source: its best destination by key dot product, ties to
/// the lowest destination index.
pub fn bipartite_scores(keys: &TokenMatrix, split: &BipartiteSplit) -> Result<EdgeSet> {
    if keys.rows() != split.len() {
        return Err(shape_err!(
            "{} key rows for a split over {} tokens",
            keys.rows(),
            split.len()
        ));
    }
    let mut edges = Vec::with_capacity(split.set_a.len());
    for &src in &split.set_a {
        let mut best: Option<(usize, f64)> = None;
        for &dst in &split.set_b {
            let s = dot(keys.row(src), keys.row(dst));
            match best {
                Some((bd, bs)) if s < bs || (s == bs && dst > bd) => {}
                _ => best = Some((dst, s)),
            }
        }
        if let Some((dst, score)) = best {
            edges.push(Edge { src, dst, score });
        }
    }
    Ok(EdgeSet(edges))
}

/// Keeps edges with `score >= tau`, preserving order.
pub fn select_edges_threshold(edges: &EdgeSet, tau: f64) -> EdgeSet {
    EdgeSet(edges.0.iter().copied().filter(|e| e.score >= tau).collect())
}

/// Keeps the `min(r, |edges|)` highest-scoring edges (ties to the lowest
/// source), preserving the original order.
pub fn select_edges_topr(edges: &EdgeSet, r: usize) -> EdgeSet {
    if r >= edges.len() {
        return edges.clone();
    }
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&edges.0[i], &edges.0[j]);
        b.score.total_cmp(&a.score).then_with(|| a.src.cmp(&b.src))
    });
    let mut keep = order[..r].to_vec();
    keep.sort_unstable();
    EdgeSet(keep.into_iter().map(|i| edges.0[i]).collect())
}

/// Folds every selected source into its destination.
///
/// Sources are folded in ascending order, each fold replacing the
/// destination by the size-weighted mean and adding the sizes. The returned
/// map groups this layer's input positions into the surviving tokens; the
/// output rows follow the map's group order.
pub fn apply_merge(
    x: &TokenMatrix,
    layer_sizes: &SizeVector,
    selected: &EdgeSet,
) -> Result<(TokenMatrix, MergeMap)> {
    let n = x.rows();
    if layer_sizes.len() != n {
        return Err(shape_err!("{} sizes for {} tokens", layer_sizes.len(), n));
    }
    let mut edges = selected.0.clone();
    edges.sort_by_key(|e| e.src);

    let mut is_src = vec![false; n];
    let mut is_dst = vec![false; n];
    for e in &edges {
        if e.src >= n || e.dst >= n {
            return Err(Error::Logic(format!(
                "edge {}->{} out of range for {n} tokens",
                e.src, e.dst
            )));
        }
        if e.src == e.dst {
            return Err(Error::Logic(format!("self edge at {}", e.src)));
        }
        if is_src[e.src] {
            return Err(Error::Logic(format!("token {} is merged twice", e.src)));
        }
        is_src[e.src] = true;
        is_dst[e.dst] = true;
    }
    if let Some(p) = (0..n).find(|&p| is_src[p] && is_dst[p]) {
        return Err(Error::Logic(format!(
            "token {p} is both a source and a destination"
        )));
    }

    let mut rows: Vec<Vec<f64>> = (0..n).map(|t| x.row(t).to_vec()).collect();
    let mut weight: Vec<f64> = layer_sizes.as_slice().iter().map(|&s| s as f64).collect();
    let mut label: Vec<usize> = (0..n).collect();
    for e in &edges {
        let (ws, wd) = (weight[e.src], weight[e.dst]);
        let total = ws + wd;
        let src_row = std::mem::take(&mut rows[e.src]);
        for (d, s) in rows[e.dst].iter_mut().zip(&src_row) {
            *d = (s * ws + *d * wd) / total;
        }
        weight[e.dst] = total;
        label[e.src] = e.dst;
    }

    let map = MergeMap::from_labels(&label)?;
    let mut data = Vec::with_capacity(map.num_groups() * x.cols());
    for g in map.groups() {
        let survivor = label[g[0]];
        data.extend_from_slice(&rows[survivor]);
    }
    Ok((TokenMatrix::new(map.num_groups(), x.cols(), data)?, map))
}

/// Sizes after a merge step: each survivor's size is the sum of the sizes of
/// the tokens in its group.
pub fn merged_sizes(layer_sizes: &SizeVector, layer_map: &MergeMap) -> Result<SizeVector> {
    if layer_map.n_full() != layer_sizes.len() {
        return Err(shape_err!(
            "map over {} tokens for {} sizes",
            layer_map.n_full(),
            layer_sizes.len()
        ));
    }
    SizeVector::new(
        layer_map
            .groups()
            .iter()
            .map(|g| g.iter().map(|&p| layer_sizes.as_slice()[p]).sum())
            .collect(),
    )
}

/// `softmax(q·kᵀ·scale + log(sizes)) · v` for one head.
pub fn size_weighted_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    sizes: &SizeVector,
    scale: f64,
) -> Result<TokenMatrix> {
    let n = sizes.len();
    if k.rows() != n || v.rows() != n {
        return Err(shape_err!(
            "keys {} / values {} rows for {n} sizes",
            k.rows(),
            v.rows()
        ));
    }
    if q.cols() != k.cols() {
        return Err(shape_err!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        ));
    }
    let log_sizes: Vec<f64> = sizes.as_slice().iter().map(|&s| (s as f64).ln()).collect();
    let mut out = Vec::with_capacity(q.rows() * v.cols());
    let mut logits = vec![0.0; n];
    for i in 0..q.rows() {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = dot(q.row(i), k.row(j)) * scale + log_sizes[j];
        }
        softmax_in_place(&mut logits);
        let mut acc = vec![0.0; v.cols()];
        for (j, &w) in logits.iter().enumerate() {
            for (a, x) in acc.iter_mut().zip(v.row(j)) {
                *a += w * x;
            }
        }
        out.extend(acc);
    }
    TokenMatrix::new(q.rows(), v.cols(), out)
}

/// Sort order used when ranking scores: descending, total order on floats.
pub(crate) fn desc(a: &f64, b: &f64) -> Ordering {
    b.total_cmp(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix::from_rows(rows).unwrap()
    }

    fn edges(v: &[(usize, usize, f64)]) -> EdgeSet {
        EdgeSet(
            v.iter()
                .map(|&(src, dst, score)| Edge { src, dst, score })
                .collect(),
        )
    }

    #[test]
    fn alternating_split() {
        let s = split_alternating(4, true).unwrap();
        assert_eq!((s.set_a, s.set_b), (vec![1, 3], vec![0, 2]));
        let s = split_alternating(5, false).unwrap();
        assert_eq!((s.set_a, s.set_b), (vec![1, 3], vec![0, 2, 4]));
        let s = split_alternating(2, true).unwrap();
        assert_eq!((s.set_a, s.set_b), (vec![1], vec![0]));
        assert!(matches!(
            split_alternating(1, true),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn scores_hand_examples() {
        let split = split_alternating(4, true).unwrap();
        let k = mat(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(
            bipartite_scores(&k, &split).unwrap(),
            edges(&[(1, 0, 1.0), (3, 2, 1.0)])
        );

        let k = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8], &[1.0, 0.0]]);
        assert_eq!(
            bipartite_scores(&k, &split).unwrap(),
            edges(&[(1, 2, 0.8), (3, 0, 1.0)])
        );

        let k = mat(&[
            &[1.0, 0.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
        ]);
        let e = bipartite_scores(&k, &split).unwrap();
        assert!(e.scores().all(|s| s == 0.0));
        // all-zero ties resolve to the lowest destination
        assert!(e.edges().iter().all(|e| e.dst == 0));

        assert!(matches!(
            bipartite_scores(&k, &split_alternating(3, true).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn threshold_selection() {
        let e = edges(&[(1, 0, 1.0), (3, 2, 0.8)]);
        assert_eq!(select_edges_threshold(&e, 0.9), edges(&[(1, 0, 1.0)]));
        assert!(select_edges_threshold(&e, f64::INFINITY).is_empty());
        assert_eq!(select_edges_threshold(&e, f64::NEG_INFINITY), e);
        assert_eq!(select_edges_threshold(&e, 0.8).len(), 2);
    }

    #[test]
    fn topr_selection() {
        let e = edges(&[(1, 0, 0.9), (3, 0, 0.8), (5, 2, 0.95)]);
        assert_eq!(
            select_edges_topr(&e, 2),
            edges(&[(1, 0, 0.9), (5, 2, 0.95)])
        );
        assert!(select_edges_topr(&e, 0).is_empty());
        assert_eq!(select_edges_topr(&e, 7), e);
        let tied = edges(&[(1, 0, 0.5), (3, 0, 0.5), (5, 0, 0.5)]);
        assert_eq!(
            select_edges_topr(&tied, 2),
            edges(&[(1, 0, 0.5), (3, 0, 0.5)])
        );
    }

    #[test]
    fn merge_weighted_update() {
        let x = mat(&[&[2.0, 0.0], &[0.0, 2.0]]);
        let sizes = SizeVector::new(vec![1, 3]).unwrap();
        let (y, map) = apply_merge(&x, &sizes, &edges(&[(0, 1, 1.0)])).unwrap();
        assert_eq!(y, mat(&[&[0.5, 1.5]]));
        assert_eq!(map.groups(), &[vec![0, 1]]);

        let (y, map) = apply_merge(&x, &sizes, &EdgeSet::default()).unwrap();
        assert_eq!(y, x);
        assert!(map.is_identity());

        let eq = SizeVector::ones(2).unwrap();
        let (y, _) = apply_merge(
            &mat(&[&[1.0, 3.0], &[5.0, -1.0]]),
            &eq,
            &edges(&[(1, 0, 0.0)]),
        )
        .unwrap();
        assert_eq!(y, mat(&[&[3.0, 1.0]]));
    }

    #[test]
    fn merge_orders_survivors_by_smallest_member() {
        // token 1 merges into 4, so survivor 4 owns position 1 and comes before 2
        let x = TokenMatrix::from_fn(5, 1, |r, _| r as f64).unwrap();
        let sizes = SizeVector::ones(5).unwrap();
        let (y, map) = apply_merge(&x, &sizes, &edges(&[(1, 4, 0.9)])).unwrap();
        assert_eq!(map.groups(), &[vec![0], vec![1, 4], vec![2], vec![3]]);
        assert_eq!(y.data(), &[0.0, 2.5, 2.0, 3.0]);
        assert_eq!(
            merged_sizes(&sizes, &map).unwrap().as_slice(),
            &[1, 2, 1, 1]
        );
    }

    #[test]
    fn merge_rejects_invalid_edges() {
        let x = TokenMatrix::zeros(4, 1).unwrap();
        let s = SizeVector::ones(4).unwrap();
        for bad in [
            edges(&[(1, 9, 0.0)]),
            edges(&[(1, 1, 0.0)]),
            edges(&[(1, 0, 0.0), (1, 2, 0.0)]),
            edges(&[(1, 0, 0.0), (3, 1, 0.0)]),
        ] {
            assert!(matches!(apply_merge(&x, &s, &bad), Err(Error::Logic(_))));
        }
    }

    #[test]
    fn size_weighted_softmax_hand_value() {
        let q = mat(&[&[0.0]]);
        let k = mat(&[&[1.0], &[2.0]]);
        let v = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = SizeVector::new(vec![2, 1]).unwrap();
        let out = size_weighted_attention(&q, &k, &v, &s, 1.0).unwrap();
        assert!((out.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unit_sizes_are_standard_attention() {
        let q = TokenMatrix::from_fn(3, 2, |r, c| (r + 2 * c) as f64 * 0.3 - 0.4).unwrap();
        let k = TokenMatrix::from_fn(3, 2, |r, c| (r * c) as f64 * 0.2 + 0.1).unwrap();
        let v = TokenMatrix::from_fn(3, 2, |r, c| (r as f64 - c as f64) * 0.7).unwrap();
        let s = SizeVector::ones(3).unwrap();
        let out = size_weighted_attention(&q, &k, &v, &s, 0.5).unwrap();
        for i in 0..3 {
            let mut w: Vec<f64> = (0..3).map(|j| dot(q.row(i), k.row(j)) * 0.5).collect();
            softmax_in_place(&mut w);
            for c in 0..2 {
                let expect: f64 = (0..3).map(|j| w[j] * v.get(j, c)).sum();
                assert_eq!(out.get(i, c), expect);
            }
        }
    }

    proptest! {
        #[test]
        fn fold_yields_size_weighted_mean_of_participants(
            vals in proptest::collection::vec(-5.0f64..5.0, 6),
            sizes in proptest::collection::vec(1usize..6, 6),
        ) {
            // sources 1, 3, 5 all into destination 0
            let x = TokenMatrix::new(6, 1, vals.clone()).unwrap();
            let s = SizeVector::new(sizes.clone()).unwrap();
            let sel = edges(&[(5, 0, 0.1), (1, 0, 0.3), (3, 0, 0.2)]);
            let (y, map) = apply_merge(&x, &s, &sel).unwrap();
            let members = [0usize, 1, 3, 5];
            let w: f64 = members.iter().map(|&p| sizes[p] as f64).sum();
            let mean: f64 = members.iter().map(|&p| vals[p] * sizes[p] as f64).sum::<f64>() / w;
            prop_assert!((y.get(0, 0) - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            prop_assert_eq!(map.groups()[0].clone(), members.to_vec());
            prop_assert_eq!(merged_sizes(&s, &map).unwrap().total(), s.total());
            prop_assert_eq!(y.rows(), 6 - sel.len());
        }

        #[test]
        fn full_bipartite_merge_keeps_destinations(n in 2usize..40, seed in 0u64..500) {
            let keys = TokenMatrix::from_fn(n, 3, |r, c| ((seed + 1) as f64 * (r as f64 + 1.1) * (c as f64 + 0.7)).cos()).unwrap();
            let split = split_alternating(n, true).unwrap();
            let e = bipartite_scores(&keys, &split).unwrap();
            let kept = select_edges_threshold(&e, f64::NEG_INFINITY);
            let (y, _) = apply_merge(&keys, &SizeVector::ones(n).unwrap(), &kept).unwrap();
            prop_assert_eq!(y.rows(), n.div_ceil(2));
        }
    }
}
