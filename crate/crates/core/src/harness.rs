//! Experiment protocol: near-homogeneous sets with one planted scene, trials
//! at a fixed threshold, threshold sweeps, and synthetic pools that stand in
//! for real embedded datasets.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_distance, EmbeddingVector, PoolError, SceneRecord, ScenePool};
use crate::novelty::{NoveltyAnalysis, NoveltyError, NoveltyOptions};
use crate::seed;

/// Placement attempts before a synthetic geometry is declared infeasible.
pub const MAX_PLACEMENT_ATTEMPTS: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("antithesis set is empty")]
    EmptyAntithesis,
    #[error("scene id {0:?} occurs in both base and antithesis sets")]
    IdCollision(String),
    #[error("base record {id:?} already carries the source tag {tag:?}")]
    TagCollision { id: String, tag: String },
    #[error("base and antithesis dims differ ({base} vs {antithesis})")]
    DimMismatch { base: usize, antithesis: usize },
    #[error("tau grid is empty")]
    EmptyGrid,
    #[error("tau grid must be ascending and non-negative")]
    InvalidGrid,
    #[error("planted scene {0:?} is not in the set")]
    MissingPlanted(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("cannot place {what} after {attempts} attempts")]
    InfeasibleGeometry { what: String, attempts: u64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Novelty(#[from] NoveltyError),
}

/// A homogeneous pool plus exactly one scene drawn from its antithesis.
#[derive(Debug, Clone, PartialEq)]
pub struct NearHomogeneousSet {
    pub base: ScenePool,
    pub planted_id: String,
    pub planted_source_tag: String,
}

impl NearHomogeneousSet {
    /// Wraps an existing pool whose planted scene is already known.
    pub fn from_pool(pool: ScenePool, planted_id: impl Into<String>, source_tag: impl Into<String>) -> Result<Self, HarnessError> {
        let planted_id = planted_id.into();
        let planted_source_tag = source_tag.into();
        if pool.position(&planted_id).is_none() {
            return Err(HarnessError::MissingPlanted(planted_id));
        }
        if let Some(r) = pool.records().iter().find(|r| r.id != planted_id && r.tags.contains(&planted_source_tag)) {
            return Err(HarnessError::TagCollision { id: r.id.clone(), tag: planted_source_tag });
        }
        Ok(Self { base: pool, planted_id, planted_source_tag })
    }
}

/// `base_set` plus one uniformly drawn antithesis scene, inserted at a
/// uniformly drawn position. The planted record gains `source_tag`.
pub fn build_near_homogeneous(
    base_set: &ScenePool,
    antithesis_set: &ScenePool,
    source_tag: &str,
    seed: u64,
) -> Result<NearHomogeneousSet, HarnessError> {
    if antithesis_set.is_empty() {
        return Err(HarnessError::EmptyAntithesis);
    }
    if !base_set.is_empty() && base_set.dim() != antithesis_set.dim() {
        return Err(HarnessError::DimMismatch { base: base_set.dim(), antithesis: antithesis_set.dim() });
    }
    if let Some(r) = base_set.records().iter().find(|r| r.tags.contains(source_tag)) {
        return Err(HarnessError::TagCollision { id: r.id.clone(), tag: source_tag.into() });
    }
    let mut rng = seed::rng(seed, &[0x504c_414e]);
    let pick = rng.gen_range(0..antithesis_set.len());
    let mut planted = antithesis_set.records()[pick].clone();
    if base_set.position(&planted.id).is_some() {
        return Err(HarnessError::IdCollision(planted.id));
    }
    planted.tags.insert(source_tag.to_string());
    let planted_id = planted.id.clone();
    let at = rng.gen_range(0..=base_set.len());
    let mut records = base_set.records().to_vec();
    records.insert(at, planted);
    Ok(NearHomogeneousSet {
        base: ScenePool::new(antithesis_set.dim(), records)?,
        planted_id,
        planted_source_tag: source_tag.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub tau: f64,
    pub novel_set_size: usize,
    pub planted_recovered: bool,
    pub novelty_ids: Vec<String>,
}

pub fn run_trial(set: &NearHomogeneousSet, tau: f64, options: NoveltyOptions) -> Result<TrialResult, HarnessError> {
    let analysis = NoveltyAnalysis::new(&set.base)?;
    trial_from(&analysis, &set.planted_id, tau, options)
}

fn trial_from(
    analysis: &NoveltyAnalysis<'_>,
    planted_id: &str,
    tau: f64,
    options: NoveltyOptions,
) -> Result<TrialResult, HarnessError> {
    let report = analysis.report(tau, options)?;
    Ok(TrialResult {
        tau,
        novel_set_size: report.novelty_ids.len(),
        planted_recovered: report.novelty_ids.iter().any(|id| id == planted_id),
        novelty_ids: report.novelty_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub trials: Vec<TrialResult>,
    /// Threshold with the smallest novelty set that still contains the
    /// planted scene (smallest such threshold on ties). `None` when no grid
    /// point recovers it; the full curve is kept either way.
    pub selected_tau: Option<f64>,
}

impl SweepResult {
    pub fn selected_trial(&self) -> Option<&TrialResult> {
        let tau = self.selected_tau?;
        self.trials.iter().find(|t| t.tau == tau)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,novel_set_size,planted_recovered\n");
        for t in &self.trials {
            let _ = writeln!(out, "{},{},{}", t.tau, t.novel_set_size, t.planted_recovered);
        }
        out
    }
}

/// One trial per grid point over a single shared linkage.
pub fn sweep_tau(set: &NearHomogeneousSet, grid: &[f64], options: NoveltyOptions) -> Result<SweepResult, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    if grid.iter().any(|t| t.is_nan() || *t < 0.0) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::InvalidGrid);
    }
    let analysis = NoveltyAnalysis::new(&set.base)?;
    let trials = grid
        .par_iter()
        .map(|&tau| trial_from(&analysis, &set.planted_id, tau, options))
        .collect::<Result<Vec<_>, _>>()?;
    let selected_tau = trials
        .iter()
        .filter(|t| t.planted_recovered)
        // replace only on a strictly smaller set: ties keep the smaller tau
        .fold(None::<&TrialResult>, |best, t| match best {
            Some(b) if b.novel_set_size <= t.novel_set_size => Some(b),
            _ => Some(t),
        })
        .map(|t| t.tau);
    Ok(SweepResult { grid: grid.to_vec(), trials, selected_tau })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapSpec {
    pub center_seed: u64,
    /// Maximum angle (radians) between a member and the cap center.
    pub angular_radius: f64,
    pub count: usize,
    /// Ground-truth tags for every member; defaults to `cluster-<index>`.
    #[serde(default)]
    pub tags: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub center_seed: u64,
    /// Minimum angle (radians) to every cap center.
    pub min_separation: f64,
    /// Defaults to `outlier-<index>`.
    #[serde(default)]
    pub tags: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clusters: Vec<CapSpec>,
    #[serde(default)]
    pub outliers: Vec<OutlierSpec>,
    /// Minimum angle between any two cap centers, if enforced.
    #[serde(default)]
    pub min_center_separation: Option<f64>,
}

impl SyntheticSpec {
    /// Three tight caps of 166/167/167 scenes, centers at least 1.2 rad
    /// apart, and one outlier at least 0.6 rad from every center.
    pub fn three_caps_one_outlier() -> Self {
        let cap = |i: u64, count| CapSpec { center_seed: i, angular_radius: 0.05, count, tags: None };
        Self {
            clusters: vec![cap(0, 166), cap(1, 167), cap(2, 167)],
            outliers: vec![OutlierSpec { center_seed: 1000, min_separation: 0.6, tags: None }],
            min_center_separation: Some(1.2),
        }
    }

    fn validate(&self, dim: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if dim < 2 {
            return bad(format!("dim must be at least 2, got {dim}"));
        }
        let open_angle = |x: f64| x > 0.0 && x < std::f64::consts::PI;
        for (i, c) in self.clusters.iter().enumerate() {
            if c.count == 0 {
                return bad(format!("cluster {i} has count 0"));
            }
            if !open_angle(c.angular_radius) {
                return bad(format!("cluster {i} radius {} outside (0, π)", c.angular_radius));
            }
        }
        for (i, o) in self.outliers.iter().enumerate() {
            if !open_angle(o.min_separation) {
                return bad(format!("outlier {i} separation {} outside (0, π)", o.min_separation));
            }
        }
        if let Some(s) = self.min_center_separation {
            if !open_angle(s) {
                return bad(format!("center separation {s} outside (0, π)"));
            }
        }
        Ok(())
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector at angle `theta` from unit vector `center`, in a random
/// direction.
fn point_at_angle<R: Rng>(rng: &mut R, center: &[f64], theta: f64) -> Vec<f64> {
    loop {
        let mut u = random_unit(rng, center.len());
        let proj: f64 = u.iter().zip(center).map(|(a, b)| a * b).sum();
        u.iter_mut().zip(center).for_each(|(a, b)| *a -= proj * b);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            let (s, c) = theta.sin_cos();
            return center.iter().zip(&u).map(|(ci, ui)| c * ci + s * ui / norm).collect();
        }
    }
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos()
}

fn stored(components: Vec<f64>) -> Result<EmbeddingVector, HarnessError> {
    EmbeddingVector::new(components)
        .and_then(|e| e.quantized())
        .map_err(|e| HarnessError::InvalidSpec(format!("degenerate sample: {e}")))
}

/// Samples a pool of unit vectors in angular caps plus isolated outliers.
///
/// Components are rounded to `f32` so the pool survives a save/load cycle
/// unchanged. Record order: cap members (cap by cap), then outliers.
pub fn generate_synthetic_pool(spec: &SyntheticSpec, dim: usize, seed: u64) -> Result<ScenePool, HarnessError> {
    spec.validate(dim)?;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.clusters.len());
    for (i, cap) in spec.clusters.iter().enumerate() {
        let center = (0..MAX_PLACEMENT_ATTEMPTS)
            .map(|attempt| random_unit(&mut seed::rng(seed, &[1, cap.center_seed, attempt]), dim))
            .find(|c| spec.min_center_separation.is_none_or(|s| centers.iter().all(|o| angle(o, c) >= s)))
            .ok_or_else(|| HarnessError::InfeasibleGeometry {
                what: format!("cluster {i} center"),
                attempts: MAX_PLACEMENT_ATTEMPTS,
            })?;
        centers.push(center);
    }

    let mut records = Vec::new();
    for (i, (cap, center)) in spec.clusters.iter().zip(&centers).enumerate() {
        let tags = cap.tags.clone().unwrap_or_else(|| vec![format!("cluster-{i}")]);
        let mut rng = seed::rng(seed, &[2, i as u64]);
        for k in 0..cap.count {
            let theta = rng.gen_range(0.0..cap.angular_radius);
            let v = point_at_angle(&mut rng, center, theta);
            records.push(SceneRecord::new(format!("c{i}-{k:04}")).with_tags(tags.iter().cloned()).with_embedding(stored(v)?));
        }
    }
    for (j, out) in spec.outliers.iter().enumerate() {
        let tags = out.tags.clone().unwrap_or_else(|| vec![format!("outlier-{j}")]);
        let v = (0..MAX_PLACEMENT_ATTEMPTS)
            .map(|attempt| random_unit(&mut seed::rng(seed, &[3, out.center_seed, attempt]), dim))
            .find(|v| centers.iter().all(|c| angle(c, v) >= out.min_separation))
            .ok_or_else(|| HarnessError::InfeasibleGeometry {
                what: format!("outlier {j}"),
                attempts: MAX_PLACEMENT_ATTEMPTS,
            })?;
        records.push(SceneRecord::new(format!("o{j}")).with_tags(tags).with_embedding(stored(v)?));
    }
    Ok(ScenePool::new(dim, records)?)
}

/// Splits a pool into the records carrying `tag` and the rest, keeping order.
pub fn partition_by_tag(pool: &ScenePool, tag: &str) -> Result<(ScenePool, ScenePool), HarnessError> {
    let (with, without): (Vec<_>, Vec<_>) = pool.records().iter().cloned().partition(|r| r.tags.contains(tag));
    Ok((ScenePool::new(pool.dim(), with)?, ScenePool::new(pool.dim(), without)?))
}

/// Distinct tags across a pool, sorted.
pub fn tag_universe(pool: &ScenePool) -> BTreeSet<String> {
    pool.records().iter().flat_map(|r| r.tags.iter().cloned()).collect()
}

/// Smallest angular distance from `record` to any other record of `pool`.
pub fn nearest_neighbor_distance(pool: &ScenePool, id: &str) -> Result<f64, HarnessError> {
    let target = pool.by_id(id).ok_or_else(|| PoolError::UnknownId(id.into()))?;
    let e = target.embedding.as_ref().ok_or_else(|| PoolError::MissingEmbedding(id.into()))?;
    let mut best = f64::INFINITY;
    for r in pool.records().iter().filter(|r| r.id != id) {
        let o = r.embedding.as_ref().ok_or_else(|| PoolError::MissingEmbedding(r.id.clone()))?;
        best = best.min(cosine_distance(e, o).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?);
    }
    Ok(best)
}
