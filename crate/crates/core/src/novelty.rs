//! End-to-end novelty detection: distances, linkage, flat cut, singletons.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{PoolError, ScenePool};
use crate::hierarchy::{pairwise_distances, upgma_linkage, ClusterAssignment, Dendrogram, HierarchyError};

pub const REPORT_SCHEMA: &str = "scene-novelty/novelty-report@1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoveltyError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("tau must be a non-negative number, got {0}")]
    InvalidTau(f64),
    #[error("min_cluster_size must be at least 1")]
    InvalidMinClusterSize,
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("report invariant violated: {0}")]
    Inconsistent(String),
}

/// Detection knobs beyond `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyOptions {
    /// Flat clusters with at most this many members count as "not a cluster"
    /// and their scenes are reported as novel. `1` means strict singletons.
    pub min_cluster_size: usize,
}

impl Default for NoveltyOptions {
    fn default() -> Self {
        Self { min_cluster_size: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneStatus {
    pub label: usize,
    pub is_novel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub schema: String,
    pub tau: f64,
    pub min_cluster_size: usize,
    pub pool_size: usize,
    pub cluster_count: usize,
    /// Novel scene ids in pool order.
    pub novelty_ids: Vec<String>,
    /// Cluster size to number of clusters of that size.
    pub cluster_sizes: BTreeMap<usize, usize>,
    pub per_scene: BTreeMap<String, SceneStatus>,
}

impl NoveltyReport {
    pub fn validate(&self) -> Result<(), NoveltyError> {
        let fail = |m: String| Err(NoveltyError::Inconsistent(m));
        let m = self.min_cluster_size;
        let novel_from_hist: usize = self.cluster_sizes.iter().filter(|(s, _)| **s <= m).map(|(s, c)| s * c).sum();
        let clustered: usize = self.cluster_sizes.iter().filter(|(s, _)| **s > m).map(|(s, c)| s * c).sum();
        let clusters: usize = self.cluster_sizes.values().sum();
        if self.novelty_ids.len() != novel_from_hist {
            return fail(format!("{} novelty ids but {novel_from_hist} scenes in small clusters", self.novelty_ids.len()));
        }
        if self.novelty_ids.len() + clustered != self.pool_size {
            return fail(format!("{} novel + {clustered} clustered != pool size {}", self.novelty_ids.len(), self.pool_size));
        }
        if clusters != self.cluster_count {
            return fail(format!("histogram has {clusters} clusters, report says {}", self.cluster_count));
        }
        if self.per_scene.len() != self.pool_size {
            return fail(format!("{} per-scene entries for pool of {}", self.per_scene.len(), self.pool_size));
        }
        let flagged = self.per_scene.values().filter(|s| s.is_novel).count();
        if flagged != self.novelty_ids.len() || self.novelty_ids.iter().any(|id| !self.per_scene.get(id).is_some_and(|s| s.is_novel)) {
            return fail("per-scene novelty flags disagree with novelty_ids".into());
        }
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tau               {}", self.tau);
        let _ = writeln!(out, "min cluster size  {}", self.min_cluster_size);
        let _ = writeln!(out, "pool size         {}", self.pool_size);
        let _ = writeln!(out, "clusters          {}", self.cluster_count);
        let _ = writeln!(out, "novel scenes      {}", self.novelty_ids.len());
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>12}  {:>8}", "cluster size", "count");
        for (size, count) in &self.cluster_sizes {
            let _ = writeln!(out, "{size:>12}  {count:>8}");
        }
        if !self.novelty_ids.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<32}  {:>6}", "novel scene", "label");
            for id in &self.novelty_ids {
                let _ = writeln!(out, "{id:<32}  {:>6}", self.per_scene[id].label);
            }
        }
        out
    }
}

/// A pool together with its dendrogram, so several thresholds can be cut
/// without recomputing the linkage.
#[derive(Debug, Clone)]
pub struct NoveltyAnalysis<'p> {
    pool: &'p ScenePool,
    dendrogram: Dendrogram,
}

impl<'p> NoveltyAnalysis<'p> {
    pub fn new(pool: &'p ScenePool) -> Result<Self, NoveltyError> {
        if pool.is_empty() {
            return Err(NoveltyError::EmptyPool);
        }
        let distances = pairwise_distances(pool)?;
        Ok(Self { pool, dendrogram: upgma_linkage(&distances) })
    }

    pub fn pool(&self) -> &'p ScenePool {
        self.pool
    }

    pub fn dendrogram(&self) -> &Dendrogram {
        &self.dendrogram
    }

    pub fn assignment(&self, tau: f64) -> Result<ClusterAssignment, NoveltyError> {
        check_tau(tau)?;
        Ok(self.dendrogram.flat_clusters(tau))
    }

    pub fn report(&self, tau: f64, options: NoveltyOptions) -> Result<NoveltyReport, NoveltyError> {
        let assignment = self.assignment(tau)?;
        build_report(self.pool, &assignment, options)
    }
}

fn check_tau(tau: f64) -> Result<(), NoveltyError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(NoveltyError::InvalidTau(tau));
    }
    Ok(())
}

/// Algorithm entry point: novelty set of `pool` at threshold `tau`.
pub fn detect_novelty(pool: &ScenePool, tau: f64, options: NoveltyOptions) -> Result<NoveltyReport, NoveltyError> {
    check_tau(tau)?;
    NoveltyAnalysis::new(pool)?.report(tau, options)
}

/// Ids of scenes whose flat cluster has a single member, in pool order.
pub fn singleton_set(assignment: &ClusterAssignment, pool: &ScenePool) -> Vec<String> {
    small_cluster_members(assignment, pool, 1)
}

fn small_cluster_members(assignment: &ClusterAssignment, pool: &ScenePool, max_size: usize) -> Vec<String> {
    let sizes = assignment.sizes();
    pool.records()
        .iter()
        .zip(assignment.labels())
        .filter(|(_, &l)| sizes[l - 1] <= max_size)
        .map(|(r, _)| r.id.clone())
        .collect()
}

pub fn build_report(
    pool: &ScenePool,
    assignment: &ClusterAssignment,
    options: NoveltyOptions,
) -> Result<NoveltyReport, NoveltyError> {
    if options.min_cluster_size == 0 {
        return Err(NoveltyError::InvalidMinClusterSize);
    }
    if assignment.len() != pool.len() {
        return Err(NoveltyError::Inconsistent(format!(
            "assignment covers {} leaves, pool has {}",
            assignment.len(),
            pool.len()
        )));
    }
    let sizes = assignment.sizes();
    let mut cluster_sizes = BTreeMap::new();
    for &s in &sizes {
        *cluster_sizes.entry(s).or_insert(0) += 1;
    }
    let per_scene = pool
        .records()
        .iter()
        .zip(assignment.labels())
        .map(|(r, &label)| (r.id.clone(), SceneStatus { label, is_novel: sizes[label - 1] <= options.min_cluster_size }))
        .collect();
    let report = NoveltyReport {
        schema: REPORT_SCHEMA.into(),
        tau: assignment.tau,
        min_cluster_size: options.min_cluster_size,
        pool_size: pool.len(),
        cluster_count: sizes.len(),
        novelty_ids: small_cluster_members(assignment, pool, options.min_cluster_size),
        cluster_sizes,
        per_scene,
    };
    report.validate()?;
    Ok(report)
}
