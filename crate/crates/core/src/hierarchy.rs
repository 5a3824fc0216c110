//! Average-linkage (UPGMA) agglomerative clustering over angular distances.
//!
//! Node ids follow the usual stepwise-dendrogram convention: leaves are
//! `0..n`, and the cluster created by step `k` is node `n + k`.
//!
//! Ties between candidate pairs at the same distance are broken by the
//! smallest `(min node id, max node id)`. Both [`upgma_linkage`] and
//! [`naive_upgma_oracle`] apply this rule, so they produce identical merge
//! sequences on inputs without floating-point near-ties.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{distance_unchecked, PoolError, ScenePool, MAX_DISTANCE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HierarchyError {
    #[error("leaf index {index} out of range for {n} leaves")]
    InvalidLeaf { index: usize, n: usize },
    #[error("invalid distance matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid dendrogram: {0}")]
    InvalidDendrogram(String),
    #[error("invalid cluster labels: {0}")]
    InvalidAssignment(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Upper triangle of a symmetric distance matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedDistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CondensedDistanceMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self, HierarchyError> {
        let expected = n * n.saturating_sub(1) / 2;
        if entries.len() != expected {
            return Err(HierarchyError::InvalidMatrix(format!(
                "{} entries for n = {n}, expected {expected}",
                entries.len()
            )));
        }
        if let Some((k, d)) = entries.iter().enumerate().find(|(_, d)| !(0.0..=MAX_DISTANCE).contains(*d)) {
            return Err(HierarchyError::InvalidMatrix(format!("entry {k} = {d} outside [0, π]")));
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        self.n * i - i * (i + 1) / 2 + (j - i - 1)
    }

    /// Distance between points `i` and `j`; zero on the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.entries[self.offset(i, j)],
            std::cmp::Ordering::Greater => self.entries[self.offset(j, i)],
        }
    }
}

/// All pairwise angular distances of a fully embedded pool.
pub fn pairwise_distances(pool: &ScenePool) -> Result<CondensedDistanceMatrix, HierarchyError> {
    let vectors = pool.embeddings()?;
    let n = vectors.len();
    if n == 0 {
        return Err(HierarchyError::InvalidMatrix("pool is empty".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| distance_unchecked(vectors[i], vectors[j])).collect())
        .collect();
    Ok(CondensedDistanceMatrix { n, entries: rows.concat() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    /// The smaller of the two merged node ids.
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

/// A stepwise dendrogram: `n - 1` merges in non-decreasing height order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDendrogram", into = "RawDendrogram")]
pub struct Dendrogram {
    n: usize,
    steps: Vec<MergeStep>,
}

#[derive(Serialize, Deserialize)]
struct RawDendrogram {
    n: usize,
    steps: Vec<MergeStep>,
}

impl TryFrom<RawDendrogram> for Dendrogram {
    type Error = HierarchyError;

    fn try_from(raw: RawDendrogram) -> Result<Self, Self::Error> {
        Dendrogram::from_steps(raw.n, raw.steps)
    }
}

impl From<Dendrogram> for RawDendrogram {
    fn from(d: Dendrogram) -> Self {
        RawDendrogram { n: d.n, steps: d.steps }
    }
}

impl Dendrogram {
    /// Validates node references, sizes, and monotone heights.
    pub fn from_steps(n: usize, steps: Vec<MergeStep>) -> Result<Self, HierarchyError> {
        let bad = |m: String| Err(HierarchyError::InvalidDendrogram(m));
        if n == 0 {
            return bad("no leaves".into());
        }
        if steps.len() != n - 1 {
            return bad(format!("{} steps for {n} leaves", steps.len()));
        }
        let mut sizes = vec![1usize; n];
        let mut merged = vec![false; 2 * n - 1];
        let mut last = 0.0f64;
        for (k, s) in steps.iter().enumerate() {
            let node_count = n + k;
            if s.left == s.right || s.left >= node_count || s.right >= node_count {
                return bad(format!("step {k} references invalid nodes ({}, {})", s.left, s.right));
            }
            if merged[s.left] || merged[s.right] {
                return bad(format!("step {k} reuses an already merged node"));
            }
            if !s.height.is_finite() || s.height < 0.0 {
                return bad(format!("step {k} has height {}", s.height));
            }
            if s.height < last {
                return bad(format!("step {k} height {} below previous {last}", s.height));
            }
            if s.size != sizes[s.left] + sizes[s.right] {
                return bad(format!("step {k} size {} inconsistent with children", s.size));
            }
            merged[s.left] = true;
            merged[s.right] = true;
            sizes.push(s.size);
            last = s.height;
        }
        Ok(Self { n, steps })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> &[MergeStep] {
        &self.steps
    }

    pub fn heights(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.height)
    }

    fn node_height(&self, node: usize) -> f64 {
        if node < self.n {
            0.0
        } else {
            self.steps[node - self.n].height
        }
    }

    fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; 2 * self.n - 1];
        for (k, s) in self.steps.iter().enumerate() {
            parent[s.left] = Some(self.n + k);
            parent[s.right] = Some(self.n + k);
        }
        parent
    }

    /// Height of the lowest node containing both leaves.
    pub fn cophenetic_distance(&self, i: usize, j: usize) -> Result<f64, HierarchyError> {
        for index in [i, j] {
            if index >= self.n {
                return Err(HierarchyError::InvalidLeaf { index, n: self.n });
            }
        }
        if i == j {
            return Ok(0.0);
        }
        let parent = self.parents();
        let mut on_path = vec![false; parent.len()];
        let mut node = Some(i);
        while let Some(x) = node {
            on_path[x] = true;
            node = parent[x];
        }
        let mut node = Some(j);
        while let Some(x) = node {
            if on_path[x] {
                return Ok(self.node_height(x));
            }
            node = parent[x];
        }
        unreachable!("a complete dendrogram has a single root")
    }

    /// All cophenetic distances at once, in condensed layout.
    pub fn cophenetic_matrix(&self) -> CondensedDistanceMatrix {
        let n = self.n;
        let mut entries = vec![0.0; n * (n - 1) / 2];
        let offset = |i: usize, j: usize| n * i - i * (i + 1) / 2 + (j - i - 1);
        let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for s in &self.steps {
            let left = std::mem::take(&mut members[s.left]);
            let right = std::mem::take(&mut members[s.right]);
            for &a in &left {
                for &b in &right {
                    let (i, j) = if a < b { (a, b) } else { (b, a) };
                    entries[offset(i, j)] = s.height;
                }
            }
            let mut joined = left;
            joined.extend(right);
            members.push(joined);
        }
        CondensedDistanceMatrix { n, entries }
    }

    /// Cuts the dendrogram at `tau`: two leaves share a cluster iff their
    /// cophenetic distance is at most `tau`.
    pub fn flat_clusters(&self, tau: f64) -> ClusterAssignment {
        let n = self.n;
        let mut uf = UnionFind::new(n);
        // any leaf below a node stands in for it
        let mut witness: Vec<usize> = (0..n).collect();
        for s in &self.steps {
            let (a, b) = (witness[s.left], witness[s.right]);
            if s.height <= tau {
                uf.union(a, b);
            }
            witness.push(a);
        }
        let mut label_of_root = vec![0usize; n];
        let mut next = 0;
        let labels = (0..n)
            .map(|leaf| {
                let root = uf.find(leaf);
                if label_of_root[root] == 0 {
                    next += 1;
                    label_of_root[root] = next;
                }
                label_of_root[root]
            })
            .collect();
        ClusterAssignment { tau, labels }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Free-function form of [`Dendrogram::cophenetic_distance`].
pub fn cophenetic_distance(dend: &Dendrogram, i: usize, j: usize) -> Result<f64, HierarchyError> {
    dend.cophenetic_distance(i, j)
}

/// Free-function form of [`Dendrogram::flat_clusters`].
pub fn flat_clusters(dend: &Dendrogram, tau: f64) -> ClusterAssignment {
    dend.flat_clusters(tau)
}

/// Flat cluster labels at one threshold. Labels run `1..=k` and are assigned
/// in order of each cluster's first leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub tau: f64,
    labels: Vec<usize>,
}

impl ClusterAssignment {
    /// Accepts labels already in canonical form: `1..=k`, numbered in order
    /// of first occurrence.
    pub fn from_labels(tau: f64, labels: Vec<usize>) -> Result<Self, HierarchyError> {
        let mut next = 1;
        for (leaf, &l) in labels.iter().enumerate() {
            if l == next {
                next += 1;
            } else if l == 0 || l > next {
                return Err(HierarchyError::InvalidAssignment(format!("leaf {leaf} has label {l}, expected at most {next}")));
            }
        }
        Ok(Self { tau, labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, leaf: usize) -> Option<usize> {
        self.labels.get(leaf).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Cluster sizes indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count()];
        for &l in &self.labels {
            sizes[l - 1] += 1;
        }
        sizes
    }

    /// Members of every cluster, indexed by `label - 1`, each in leaf order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut clusters = vec![Vec::new(); self.cluster_count()];
        for (leaf, &l) in self.labels.iter().enumerate() {
            clusters[l - 1].push(leaf);
        }
        clusters
    }

    pub fn cluster_size_of(&self, leaf: usize) -> Option<usize> {
        let l = self.label(leaf)?;
        Some(self.labels.iter().filter(|&&x| x == l).count())
    }
}

/// Key under which pairs are compared: distance, then the tie rule.
fn pair_key(d: f64, a: usize, b: usize) -> (f64, usize, usize) {
    (d, a.min(b), a.max(b))
}

fn key_less(x: (f64, usize, usize), y: (f64, usize, usize)) -> bool {
    x.0 < y.0 || (x.0 == y.0 && (x.1, x.2) < (y.1, y.2))
}

/// UPGMA linkage.
///
/// Keeps, for every live cluster, its nearest live partner among clusters
/// with a larger node id. A merged cluster always receives the largest id so
/// far, which means only rows whose cached partner was consumed need a full
/// rescan. Typical cost is O(n²).
pub fn upgma_linkage(d: &CondensedDistanceMatrix) -> Dendrogram {
    let n = d.n();
    assert!(n >= 1, "linkage needs at least one point");
    // Full square working matrix indexed by slot. A slot keeps the id of the
    // cluster currently stored in it.
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = d.get(i, j);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    let mut active = vec![true; n];
    let mut node = (0..n).collect::<Vec<_>>();
    let mut size = vec![1usize; n];

    let rescan = |s: usize, active: &[bool], node: &[usize], dist: &[f64]| -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for t in 0..n {
            if !active[t] || node[t] <= node[s] {
                continue;
            }
            let cand = dist[s * n + t];
            match best {
                Some((bd, bt)) if !key_less((cand, node[t], 0), (bd, node[bt], 0)) => {}
                _ => best = Some((cand, t)),
            }
        }
        best
    };
    let mut nearest: Vec<Option<(f64, usize)>> = (0..n).map(|s| rescan(s, &active, &node, &dist)).collect();

    let mut steps = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n.saturating_sub(1) {
        let mut chosen: Option<(usize, usize, (f64, usize, usize))> = None;
        for s in 0..n {
            if !active[s] {
                continue;
            }
            if let Some((dd, t)) = nearest[s] {
                let key = pair_key(dd, node[s], node[t]);
                if chosen.is_none_or(|(_, _, ck)| key_less(key, ck)) {
                    chosen = Some((s, t, key));
                }
            }
        }
        let (a, b, (height, _, _)) = chosen.expect("live pair while clusters remain");
        let (sa, sb) = (size[a], size[b]);
        steps.push(MergeStep { left: node[a].min(node[b]), right: node[a].max(node[b]), height, size: sa + sb });

        // New cluster lives in slot a.
        active[b] = false;
        nearest[b] = None;
        let (wa, wb) = (sa as f64, sb as f64);
        for t in 0..n {
            if !active[t] || t == a {
                continue;
            }
            let merged = (wa * dist[a * n + t] + wb * dist[b * n + t]) / (wa + wb);
            // the mean of values >= height is >= height; keep rounding from
            // breaking monotonicity
            let merged = merged.max(height);
            dist[a * n + t] = merged;
            dist[t * n + a] = merged;
        }
        node[a] = n + k;
        size[a] = sa + sb;
        nearest[a] = None;
        for s in 0..n {
            if !active[s] || s == a {
                continue;
            }
            match nearest[s] {
                Some((_, t)) if t == a || t == b => nearest[s] = rescan(s, &active, &node, &dist),
                Some((bd, _)) => {
                    // new node has the largest id, so it only wins strictly
                    if dist[s * n + a] < bd {
                        nearest[s] = Some((dist[s * n + a], a));
                    }
                }
                None => nearest[s] = rescan(s, &active, &node, &dist),
            }
        }
    }
    Dendrogram { n, steps }
}

/// Textbook UPGMA: every step recomputes each inter-cluster mean from the raw
/// point pairs. O(n³) per step in the worst case; a reference for tests.
pub fn naive_upgma_oracle(d: &CondensedDistanceMatrix) -> Dendrogram {
    let n = d.n();
    assert!(n >= 1, "linkage needs at least one point");
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut steps = Vec::new();
    for k in 0..n - 1 {
        let mut best: Option<(usize, usize, (f64, usize, usize))> = None;
        for x in 0..clusters.len() {
            for y in (x + 1)..clusters.len() {
                let (ix, px) = &clusters[x];
                let (iy, py) = &clusters[y];
                let total: f64 = px.iter().flat_map(|&p| py.iter().map(move |&q| d.get(p, q))).sum();
                let mean = total / (px.len() * py.len()) as f64;
                let key = pair_key(mean, *ix, *iy);
                if best.is_none_or(|(_, _, bk)| key_less(key, bk)) {
                    best = Some((x, y, key));
                }
            }
        }
        let (x, y, (height, left, right)) = best.expect("at least two clusters");
        let (_, py) = clusters.remove(y);
        let (_, px) = clusters.remove(x);
        let size = px.len() + py.len();
        steps.push(MergeStep { left, right, height, size });
        clusters.push((n + k, px.into_iter().chain(py).collect()));
    }
    Dendrogram { n, steps }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingVector, SceneRecord};
    use approx::assert_abs_diff_eq;

    fn planar_pool(degrees: &[f64]) -> ScenePool {
        let records = degrees
            .iter()
            .enumerate()
            .map(|(i, deg)| {
                let r = deg.to_radians();
                SceneRecord::new(format!("p{i}")).with_embedding(EmbeddingVector::new(vec![r.cos(), r.sin()]).unwrap())
            })
            .collect();
        ScenePool::new(2, records).unwrap()
    }

    fn four_point() -> CondensedDistanceMatrix {
        pairwise_distances(&planar_pool(&[0.0, 5.0, 90.0, 95.0])).unwrap()
    }

    #[test]
    fn condensed_indexing() {
        let m = CondensedDistanceMatrix::new(4, vec![1.0, 2.0, 3.0, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(3, 0), 3.0);
        assert_eq!(m.get(1, 2), 0.4);
        assert_eq!(m.get(2, 3), 0.6);
        assert_eq!(m.get(2, 2), 0.0);
        assert!(CondensedDistanceMatrix::new(4, vec![0.0; 5]).is_err());
        assert!(CondensedDistanceMatrix::new(2, vec![4.0]).is_err());
        assert!(CondensedDistanceMatrix::new(2, vec![f64::NAN]).is_err());
    }

    #[test]
    fn four_point_distances() {
        let m = four_point();
        let expected = [5.0, 90.0, 95.0, 85.0, 90.0, 5.0].map(|d: f64| d.to_radians());
        assert_eq!(m.entries().len(), 6);
        for (got, want) in m.entries().iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(m.get(0, 1), 0.0873, epsilon = 1e-4);
        assert_abs_diff_eq!(m.get(1, 2), 1.4835, epsilon = 1e-4);
    }

    #[test]
    fn single_point_has_empty_matrix_and_no_steps() {
        let m = pairwise_distances(&planar_pool(&[10.0])).unwrap();
        assert!(m.entries().is_empty());
        let d = upgma_linkage(&m);
        assert!(d.steps().is_empty());
        assert_eq!(d.flat_clusters(0.0).labels(), &[1]);
    }

    #[test]
    fn missing_embedding_is_error() {
        let pool = ScenePool::new(2, vec![SceneRecord::new("x")]).unwrap();
        assert!(matches!(pairwise_distances(&pool), Err(HierarchyError::Pool(PoolError::MissingEmbedding(_)))));
    }

    #[test]
    fn four_point_linkage_trace() {
        let d = upgma_linkage(&four_point());
        let s = d.steps();
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].left, s[0].right, s[0].size), (0, 1, 2));
        assert_eq!((s[1].left, s[1].right, s[1].size), (2, 3, 2));
        assert_eq!((s[2].left, s[2].right, s[2].size), (4, 5, 4));
        assert_abs_diff_eq!(s[0].height, 0.087266, epsilon = 1e-6);
        assert_abs_diff_eq!(s[1].height, 0.087266, epsilon = 1e-6);
        assert_abs_diff_eq!(s[2].height, 1.570796, epsilon = 1e-6);
        assert_eq!(naive_upgma_oracle(&four_point()).steps().len(), 3);
        assert_same_structure(&d, &naive_upgma_oracle(&four_point()));
    }

    #[test]
    fn two_points() {
        let m = CondensedDistanceMatrix::new(2, vec![0.4]).unwrap();
        let d = upgma_linkage(&m);
        assert_eq!(d.steps(), &[MergeStep { left: 0, right: 1, height: 0.4, size: 2 }]);
    }

    #[test]
    fn equilateral_tie_merges_lowest_ids_first() {
        let m = CondensedDistanceMatrix::new(3, vec![0.5; 3]).unwrap();
        for d in [upgma_linkage(&m), naive_upgma_oracle(&m)] {
            assert_eq!((d.steps()[0].left, d.steps()[0].right), (0, 1));
            assert_eq!((d.steps()[1].left, d.steps()[1].right), (2, 3));
        }
        // five equidistant points: the tie rule fixes the whole sequence
        let m = CondensedDistanceMatrix::new(5, vec![0.5; 10]).unwrap();
        let fast = upgma_linkage(&m);
        assert_eq!(fast, naive_upgma_oracle(&m));
        let pairs: Vec<_> = fast.steps().iter().map(|s| (s.left, s.right)).collect();
        assert_eq!(pairs, vec![(0, 1), (2, 3), (4, 5), (6, 7)]);
    }

    #[test]
    fn cophenetic_examples() {
        let d = upgma_linkage(&four_point());
        assert_abs_diff_eq!(d.cophenetic_distance(0, 1).unwrap(), 0.087266, epsilon = 1e-6);
        assert_abs_diff_eq!(d.cophenetic_distance(0, 2).unwrap(), 1.570796, epsilon = 1e-6);
        assert_eq!(d.cophenetic_distance(3, 3).unwrap(), 0.0);
        assert_eq!(d.cophenetic_distance(0, 4), Err(HierarchyError::InvalidLeaf { index: 4, n: 4 }));
        let m = d.cophenetic_matrix();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), d.cophenetic_distance(i, j).unwrap());
            }
        }
    }

    #[test]
    fn flat_cluster_examples() {
        let d = upgma_linkage(&four_point());
        assert_eq!(d.flat_clusters(0.5).labels(), &[1, 1, 2, 2]);
        assert_eq!(d.flat_clusters(0.0).labels(), &[1, 2, 3, 4]);
        assert_eq!(d.flat_clusters(1.6).labels(), &[1, 1, 1, 1]);
        assert_eq!(d.flat_clusters(0.5).sizes(), vec![2, 2]);
        assert_eq!(d.flat_clusters(0.5).clusters(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn labels_follow_first_occurrence() {
        // leaves 1 and 3 close, 0 and 2 far from everything
        let m = CondensedDistanceMatrix::new(4, vec![2.0, 2.5, 2.0, 2.0, 0.1, 2.2]).unwrap();
        let a = upgma_linkage(&m).flat_clusters(0.5);
        assert_eq!(a.labels(), &[1, 2, 3, 2]);
    }

    #[test]
    fn dendrogram_json_shape_and_validation() {
        let d = upgma_linkage(&CondensedDistanceMatrix::new(2, vec![0.25]).unwrap());
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, r#"{"n":2,"steps":[{"left":0,"right":1,"height":0.25,"size":2}]}"#);
        let back: Dendrogram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        let bad = r#"{"n":3,"steps":[{"left":0,"right":1,"height":0.5,"size":2},{"left":2,"right":3,"height":0.4,"size":3}]}"#;
        assert!(serde_json::from_str::<Dendrogram>(bad).is_err());
        let bad_size = r#"{"n":2,"steps":[{"left":0,"right":1,"height":0.5,"size":3}]}"#;
        assert!(serde_json::from_str::<Dendrogram>(bad_size).is_err());
    }

    pub(crate) fn assert_same_structure(a: &Dendrogram, b: &Dendrogram) {
        assert_eq!(a.n(), b.n());
        for (k, (x, y)) in a.steps().iter().zip(b.steps()).enumerate() {
            assert_eq!((x.left, x.right, x.size), (y.left, y.right, y.size), "step {k}");
            assert!((x.height - y.height).abs() <= 1e-9, "step {k}: {} vs {}", x.height, y.height);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit_pool(dim: usize, raw: &[f64]) -> ScenePool {
            let records = raw
                .chunks(dim)
                .enumerate()
                .map(|(i, c)| SceneRecord::new(format!("s{i}")).with_embedding(EmbeddingVector::new(c.to_vec()).unwrap()))
                .collect();
            ScenePool::new(dim, records).unwrap()
        }

        fn pool_strategy() -> impl Strategy<Value = ScenePool> {
            (2usize..13, prop::sample::select(vec![2usize, 3, 8])).prop_flat_map(|(n, dim)| {
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), n).prop_filter_map(
                    "non-zero rows",
                    move |rows| {
                        if rows.iter().any(|r| r.iter().all(|x| x.abs() < 1e-3)) {
                            return None;
                        }
                        Some(unit_pool(dim, &rows.concat()))
                    },
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn matches_oracle(pool in pool_strategy()) {
                let m = pairwise_distances(&pool).unwrap();
                assert_same_structure(&upgma_linkage(&m), &naive_upgma_oracle(&m));
            }

            #[test]
            fn heights_monotone_and_valid(pool in pool_strategy()) {
                let d = upgma_linkage(&pairwise_distances(&pool).unwrap());
                prop_assert!(d.heights().zip(d.heights().skip(1)).all(|(a, b)| a <= b));
                prop_assert!(Dendrogram::from_steps(d.n(), d.steps().to_vec()).is_ok());
            }

            #[test]
            fn cut_agrees_with_cophenetic(pool in pool_strategy(), tau in 0.0f64..3.2) {
                let d = upgma_linkage(&pairwise_distances(&pool).unwrap());
                let a = d.flat_clusters(tau);
                for i in 0..d.n() {
                    for j in (i + 1)..d.n() {
                        let c = d.cophenetic_distance(i, j).unwrap();
                        prop_assert_eq!(a.label(i) == a.label(j), c <= tau);
                    }
                }
                let labels = a.labels();
                let mut seen = 0;
                for &l in labels {
                    prop_assert!(l <= seen + 1);
                    seen = seen.max(l);
                }
            }

            #[test]
            fn coarser_tau_refines(pool in pool_strategy(), t1 in 0.0f64..3.2, t2 in 0.0f64..3.2) {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let d = upgma_linkage(&pairwise_distances(&pool).unwrap());
                let (fine, coarse) = (d.flat_clusters(lo), d.flat_clusters(hi));
                prop_assert!(fine.cluster_count() >= coarse.cluster_count());
                for i in 0..d.n() {
                    for j in 0..d.n() {
                        if fine.label(i) == fine.label(j) {
                            prop_assert_eq!(coarse.label(i), coarse.label(j));
                        }
                    }
                }
            }

            #[test]
            fn permutation_equivariant(pool in pool_strategy(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let n = pool.len();
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let shuffled = ScenePool::new(
                    pool.dim(),
                    perm.iter().map(|&i| pool.records()[i].clone()).collect(),
                ).unwrap();
                let c0 = upgma_linkage(&pairwise_distances(&pool).unwrap()).cophenetic_matrix();
                let c1 = upgma_linkage(&pairwise_distances(&shuffled).unwrap()).cophenetic_matrix();
                for a in 0..n {
                    for b in 0..n {
                        prop_assert!((c1.get(a, b) - c0.get(perm[a], perm[b])).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
