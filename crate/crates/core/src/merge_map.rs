//! One-hot mapping algebra between a full token sequence and its unique
//! (merged) tokens.
//!
//! A [`MergeMap`] partitions the original positions `0..n_full` into
//! groups. Viewed as a matrix `M ∈ {0,1}^{N×N_un}` it has exactly one 1 per
//! row, so every product with it is a gather or a scatter-add and costs
//! `O(N·cols)`; the dense form is only materialized on request.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::TokenMatrix;

/// Partition of `0..n_full` into disjoint, nonempty, sorted groups, ordered
/// by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMergeMap", into = "RawMergeMap")]
pub struct MergeMap {
    n_full: usize,
    groups: Vec<Vec<usize>>,
    owner: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawMergeMap {
    n_full: usize,
    groups: Vec<Vec<usize>>,
}

impl TryFrom<RawMergeMap> for MergeMap {
    type Error = Error;
    fn try_from(raw: RawMergeMap) -> Result<Self> {
        MergeMap::new(raw.n_full, raw.groups)
    }
}

impl From<MergeMap> for RawMergeMap {
    fn from(m: MergeMap) -> Self {
        RawMergeMap {
            n_full: m.n_full,
            groups: m.groups,
        }
    }
}

/// Group sizes `|P[j]|`, in group order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeVector(Vec<usize>);

impl SizeVector {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "sizes must be a nonempty list of positive counts".into(),
            ));
        }
        Ok(Self(sizes))
    }

    pub fn ones(n: usize) -> Result<Self> {
        Self::new(vec![1; n])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

impl MergeMap {
    /// Validates and canonicalizes: members are sorted, groups are ordered by
    /// their minimum position.
    pub fn new(n_full: usize, mut groups: Vec<Vec<usize>>) -> Result<Self> {
        if n_full == 0 {
            return Err(Error::InvalidArgument(
                "merge map over zero positions".into(),
            ));
        }
        let mut owner = vec![usize::MAX; n_full];
        for (j, g) in groups.iter_mut().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidArgument(format!("group {j} is empty")));
            }
            g.sort_unstable();
            for &p in g.iter() {
                if p >= n_full {
                    return Err(Error::InvalidArgument(format!(
                        "position {p} out of range for n_full={n_full}"
                    )));
                }
                if owner[p] != usize::MAX {
                    return Err(Error::InvalidArgument(format!(
                        "position {p} appears in more than one group"
                    )));
                }
                owner[p] = j;
            }
        }
        if let Some(p) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::InvalidArgument(format!(
                "position {p} is not covered"
            )));
        }
        groups.sort_unstable_by_key(|g| g[0]);
        for (j, g) in groups.iter().enumerate() {
            for &p in g {
                owner[p] = j;
            }
        }
        Ok(Self {
            n_full,
            groups,
            owner,
        })
    }

    /// Builds a map from a per-position group label; labels only need to be
    /// consistent, not contiguous.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let mut by_label = std::collections::BTreeMap::<usize, Vec<usize>>::new();
        for (p, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(p);
        }
        Self::new(labels.len(), by_label.into_values().collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("identity map needs n >= 1".into()));
        }
        Self::new(n, (0..n).map(|p| vec![p]).collect())
    }

    pub fn n_full(&self) -> usize {
        self.n_full
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Index of the group that owns original position `p`.
    #[inline]
    pub fn group_of(&self, p: usize) -> usize {
        self.owner[p]
    }

    /// Group index for every original position, i.e. the column of the 1 in
    /// each row of `M`.
    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    pub fn is_identity(&self) -> bool {
        self.groups.len() == self.n_full
    }

    pub fn sizes(&self) -> SizeVector {
        SizeVector(self.groups.iter().map(Vec::len).collect())
    }

    /// Dense `N × N_un` one-hot view of the map.
    pub fn to_dense(&self) -> TokenMatrix {
        let mut data = vec![0.0; self.n_full * self.groups.len()];
        for (p, &j) in self.owner.iter().enumerate() {
            data[p * self.groups.len() + j] = 1.0;
        }
        TokenMatrix::from_parts(self.n_full, self.groups.len(), data)
    }

    /// `M · e_un`: copies each unique row to every position of its group.
    pub fn expand(&self, e_un: &TokenMatrix) -> Result<TokenMatrix> {
        if e_un.rows() != self.num_groups() {
            return Err(shape_err!(
                "expand: {} unique rows for {} groups",
                e_un.rows(),
                self.num_groups()
            ));
        }
        let mut data = Vec::with_capacity(self.n_full * e_un.cols());
        for &j in &self.owner {
            data.extend_from_slice(e_un.row(j));
        }
        Ok(TokenMatrix::from_parts(self.n_full, e_un.cols(), data))
    }

    /// `(MᵀM)⁻¹ Mᵀ y`: mean of the rows of `y` within each group.
    pub fn remerge_average(&self, y: &TokenMatrix) -> Result<TokenMatrix> {
        if y.rows() != self.n_full {
            return Err(shape_err!(
                "remerge: {} rows for a map over {} positions",
                y.rows(),
                self.n_full
            ));
        }
        let cols = y.cols();
        let mut data = vec![0.0; self.groups.len() * cols];
        for (j, g) in self.groups.iter().enumerate() {
            let acc = &mut data[j * cols..(j + 1) * cols];
            for &p in g {
                for (a, v) in acc.iter_mut().zip(y.row(p)) {
                    *a += v;
                }
            }
            let inv = 1.0 / g.len() as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        Ok(TokenMatrix::from_parts(self.groups.len(), cols, data))
    }

    /// Composition of two merge steps: `inner` groups original positions,
    /// `outer` groups the groups of `inner`.
    pub fn compose(outer: &MergeMap, inner: &MergeMap) -> Result<MergeMap> {
        if outer.n_full != inner.num_groups() {
            return Err(shape_err!(
                "compose: outer covers {} positions but inner has {} groups",
                outer.n_full,
                inner.num_groups()
            ));
        }
        let groups = outer
            .groups
            .iter()
            .map(|og| {
                og.iter()
                    .flat_map(|&j| inner.groups[j].iter().copied())
                    .collect()
            })
            .collect();
        MergeMap::new(inner.n_full, groups)
    }
}

pub fn merge_map_identity(n: usize) -> Result<MergeMap> {
    MergeMap::identity(n)
}

pub fn expand(m: &MergeMap, e_un: &TokenMatrix) -> Result<TokenMatrix> {
    m.expand(e_un)
}

pub fn remerge_average(m: &MergeMap, y: &TokenMatrix) -> Result<TokenMatrix> {
    m.remerge_average(y)
}

pub fn compose(outer: &MergeMap, inner: &MergeMap) -> Result<MergeMap> {
    MergeMap::compose(outer, inner)
}

pub fn sizes(m: &MergeMap) -> SizeVector {
    m.sizes()
}
