//! Natural-language explanations of why a scene was flagged as novel.
//!
//! The novel scene is captioned alongside one sampled member of every
//! non-singleton cluster, and a language model is asked which features of the
//! novel caption are absent from all the others. With `consensus_k > 1` the
//! sampling is repeated under derived seeds and a final call merges the
//! candidate explanations.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, ResponseCache};
use crate::embedding::{SceneRecord, ScenePool};
use crate::hierarchy::ClusterAssignment;
use crate::prompt::{format_block, BlockRole, PromptSet, PromptSetInfo, RenderContext, TemplateError};
use crate::providers::{caption_image, complete_text, Captioner, ProviderError, TextCompleter};
use crate::seed::{derive_seed, rng};

pub const EXPLANATION_SCHEMA: &str = "scene-novelty/explanation@1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sampling,
    Caption,
    Difference,
    Consensus,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Sampling => "sampling",
            Stage::Caption => "caption",
            Stage::Difference => "difference",
            Stage::Consensus => "consensus",
        })
    }
}

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("unknown scene id {0:?}")]
    UnknownScene(String),
    #[error("scene {id:?} is not a singleton (cluster size {size})")]
    NotSingleton { id: String, size: usize },
    #[error("assignment covers {assignment} scenes but the pool has {pool}")]
    SizeMismatch { assignment: usize, pool: usize },
    #[error("consensus_k must be at least 1")]
    InvalidConsensusK,
    #[error("caption of scene {scene_id:?} failed: {source}")]
    Caption { scene_id: String, source: ProviderError },
    #[error("{stage} call failed: {source}")]
    Completion { stage: Stage, source: ProviderError },
    #[error("{stage} prompt: {source}")]
    Template { stage: Stage, source: TemplateError },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl ExplainError {
    pub fn stage(&self) -> Stage {
        match self {
            ExplainError::UnknownScene(_)
            | ExplainError::NotSingleton { .. }
            | ExplainError::SizeMismatch { .. }
            | ExplainError::InvalidConsensusK
            | ExplainError::ThreadPool(_) => Stage::Sampling,
            ExplainError::Caption { .. } | ExplainError::Cache(_) => Stage::Caption,
            ExplainError::Completion { stage, .. } | ExplainError::Template { stage, .. } => *stage,
        }
    }

    pub fn provider_error(&self) -> Option<&ProviderError> {
        match self {
            ExplainError::Caption { source, .. } | ExplainError::Completion { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: String,
    pub text: String,
    pub provider_id: String,
}

/// One sampled scene per cluster label, excluding the novel scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentativeSample {
    pub novel_id: String,
    pub representatives: BTreeMap<usize, String>,
}

/// Draws one member uniformly from each non-singleton cluster. Other
/// singletons are skipped unless `include_co_novel` is set.
pub fn sample_representatives(
    assignment: &ClusterAssignment,
    pool: &ScenePool,
    novel_id: &str,
    seed: u64,
    include_co_novel: bool,
) -> Result<RepresentativeSample, ExplainError> {
    if assignment.len() != pool.len() {
        return Err(ExplainError::SizeMismatch { assignment: assignment.len(), pool: pool.len() });
    }
    let novel = pool.position(novel_id).ok_or_else(|| ExplainError::UnknownScene(novel_id.into()))?;
    let clusters = assignment.clusters();
    let novel_label = assignment.labels()[novel];
    let size = clusters[novel_label - 1].len();
    if size != 1 {
        return Err(ExplainError::NotSingleton { id: novel_id.into(), size });
    }
    let mut rng = rng(seed, &[]);
    let mut representatives = BTreeMap::new();
    for (i, members) in clusters.iter().enumerate() {
        let label = i + 1;
        if label == novel_label || (members.len() == 1 && !include_co_novel) {
            continue;
        }
        let pick = *members.choose(&mut rng).expect("clusters are non-empty");
        representatives.insert(label, pool.records()[pick].id.clone());
    }
    Ok(RepresentativeSample { novel_id: novel_id.into(), representatives })
}

/// Caption client plus the cache that makes each (scene, provider, prompt)
/// call happen once.
pub struct CaptionService<'a> {
    pub client: &'a dyn Captioner,
    pub cache: &'a ResponseCache,
    pub prompt: &'a str,
}

impl CaptionService<'_> {
    pub fn caption_scene(&self, scene: &SceneRecord) -> Result<CaptionRecord, ExplainError> {
        let provider_id = self.client.provider_id();
        if let Some(hit) = self.cache.get(&scene.id, &provider_id, self.prompt)? {
            log::debug!("caption cache hit for {}", scene.id);
            return Ok(CaptionRecord { scene_id: scene.id.clone(), text: hit.text, provider_id });
        }
        let text = caption_image(self.client, scene, self.prompt)
            .map_err(|source| ExplainError::Caption { scene_id: scene.id.clone(), source })?;
        self.cache.put(&scene.id, &provider_id, self.prompt, &text)?;
        Ok(CaptionRecord { scene_id: scene.id.clone(), text, provider_id })
    }
}

/// Free-function form of [`CaptionService::caption_scene`].
pub fn caption_scene(
    scene: &SceneRecord,
    client: &dyn Captioner,
    cache: &ResponseCache,
    prompt: &str,
) -> Result<CaptionRecord, ExplainError> {
    CaptionService { client, cache, prompt }.caption_scene(scene)
}

/// Fills the difference template, or the describe template when there is
/// nothing to compare against.
pub fn build_difference_prompt(novel: &CaptionRecord, reps: &[CaptionRecord], prompts: &PromptSet) -> Result<String, ExplainError> {
    let novel_block = format_block(&BlockRole::Novel, &novel.text);
    let rendered = if reps.is_empty() {
        prompts.describe.render(&RenderContext::default().value("novel", novel_block))
    } else {
        let items = reps
            .iter()
            .enumerate()
            .map(|(i, r)| BTreeMap::from([("reference".to_string(), format_block(&BlockRole::Reference(i + 1), &r.text))]))
            .collect();
        prompts.difference.render(&RenderContext::default().value("novel", novel_block).list("references", items))
    };
    rendered.map_err(|source| ExplainError::Template { stage: Stage::Difference, source })
}

pub fn build_consensus_prompt(candidates: &[String], prompts: &PromptSet) -> Result<String, ExplainError> {
    let items = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| BTreeMap::from([("candidate".to_string(), format_block(&BlockRole::Candidate(i + 1), c))]))
        .collect();
    prompts
        .consensus
        .render(&RenderContext::default().list("candidates", items))
        .map_err(|source| ExplainError::Template { stage: Stage::Consensus, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub consensus_k: usize,
    pub include_co_novel: bool,
    /// Upper bound on concurrent caption calls.
    pub parallelism: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { consensus_k: 1, include_co_novel: false, parallelism: 4 }
    }
}

/// One pass of sample, caption, and difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRun {
    pub seed: u64,
    pub sample: RepresentativeSample,
    pub representatives: Vec<CaptionRecord>,
    pub prompt: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub schema: String,
    pub novel_id: String,
    pub seed: u64,
    pub novel_caption: CaptionRecord,
    /// Representatives and prompt of the first run.
    pub representatives: Vec<CaptionRecord>,
    pub prompt: String,
    /// Final answer: the single run's difference, or the consensus.
    pub explanation: String,
    pub consensus_runs: usize,
    pub runs: Vec<ExplanationRun>,
    pub consensus_prompt: Option<String>,
    pub completion_provider: String,
    pub prompts: PromptSetInfo,
}

pub struct Explainer<'a> {
    pub captioner: &'a dyn Captioner,
    pub completer: &'a dyn TextCompleter,
    pub cache: &'a ResponseCache,
    pub prompts: &'a PromptSet,
    pub options: ExplainOptions,
}

impl Explainer<'_> {
    pub fn explain(
        &self,
        pool: &ScenePool,
        assignment: &ClusterAssignment,
        novel_id: &str,
        seed: u64,
    ) -> Result<ExplanationResult, ExplainError> {
        let k = self.options.consensus_k;
        if k == 0 {
            return Err(ExplainError::InvalidConsensusK);
        }
        let samples = (0..k as u64)
            .map(|r| {
                let s = derive_seed(seed, &[r]);
                sample_representatives(assignment, pool, novel_id, s, self.options.include_co_novel).map(|x| (s, x))
            })
            .collect::<Result<Vec<_>, _>>()?;

        // caption every distinct scene once, in a bounded pool
        let mut needed: BTreeSet<&str> = BTreeSet::from([novel_id]);
        for (_, sample) in &samples {
            needed.extend(sample.representatives.values().map(String::as_str));
        }
        let needed: Vec<&str> = needed.into_iter().collect();
        let service = CaptionService { client: self.captioner, cache: self.cache, prompt: &self.prompts.caption };
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(self.options.parallelism.max(1))
            .build()
            .map_err(|e| ExplainError::ThreadPool(e.to_string()))?;
        let captions: Vec<CaptionRecord> = threads.install(|| {
            needed
                .par_iter()
                .map(|id| {
                    let scene = pool.by_id(id).ok_or_else(|| ExplainError::UnknownScene((*id).into()))?;
                    service.caption_scene(scene)
                })
                .collect::<Result<_, _>>()
        })?;
        let by_id: BTreeMap<&str, &CaptionRecord> = captions.iter().map(|c| (c.scene_id.as_str(), c)).collect();
        let novel_caption = by_id[novel_id].clone();

        let mut runs = Vec::with_capacity(k);
        for (s, sample) in samples {
            let reps: Vec<CaptionRecord> = sample.representatives.values().map(|id| by_id[id.as_str()].clone()).collect();
            let prompt = build_difference_prompt(&novel_caption, &reps, self.prompts)?;
            let explanation = complete_text(self.completer, &prompt)
                .map_err(|source| ExplainError::Completion { stage: Stage::Difference, source })?;
            runs.push(ExplanationRun { seed: s, sample, representatives: reps, prompt, explanation });
        }

        let (explanation, consensus_prompt) = if k == 1 {
            (runs[0].explanation.clone(), None)
        } else {
            let candidates: Vec<String> = runs.iter().map(|r| r.explanation.clone()).collect();
            let prompt = build_consensus_prompt(&candidates, self.prompts)?;
            let text = complete_text(self.completer, &prompt)
                .map_err(|source| ExplainError::Completion { stage: Stage::Consensus, source })?;
            (text, Some(prompt))
        };

        Ok(ExplanationResult {
            schema: EXPLANATION_SCHEMA.into(),
            novel_id: novel_id.into(),
            seed,
            novel_caption,
            representatives: runs[0].representatives.clone(),
            prompt: runs[0].prompt.clone(),
            explanation,
            consensus_runs: k,
            runs,
            consensus_prompt,
            completion_provider: self.completer.provider_id(),
            prompts: self.prompts.info(),
        })
    }
}

/// Free-function form of [`Explainer::explain`].
#[allow(clippy::too_many_arguments)]
pub fn explain_novelty(
    pool: &ScenePool,
    assignment: &ClusterAssignment,
    novel_id: &str,
    captioner: &dyn Captioner,
    completer: &dyn TextCompleter,
    seed: u64,
    consensus_k: usize,
    cache: &ResponseCache,
) -> Result<ExplanationResult, ExplainError> {
    let prompts = PromptSet::builtin();
    Explainer { captioner, completer, cache, prompts: &prompts, options: ExplainOptions { consensus_k, ..Default::default() } }
        .explain(pool, assignment, novel_id, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::prompt::parse_blocks;
    use crate::providers::{mock_tokens, MockCaptioner, MockCompleter, NO_DIFFERENCE};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Pool whose layout matches `labels`; scene `i` gets `tags[labels[i]-1]`.
    fn labelled_pool(labels: &[usize], tags: &[Vec<&str>]) -> (ScenePool, ClusterAssignment) {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                SceneRecord::new(format!("s{i}"))
                    .with_tags(tags[l - 1].iter().copied())
                    .with_embedding(EmbeddingVector::new(vec![1.0, i as f64]).unwrap())
            })
            .collect();
        let pool = ScenePool::new(2, records).unwrap();
        (pool, ClusterAssignment::from_labels(0.3, labels.to_vec()).unwrap())
    }

    fn run(pool: &ScenePool, a: &ClusterAssignment, novel: &str, seed: u64, k: usize) -> ExplanationResult {
        explain_novelty(pool, a, novel, &MockCaptioner, &MockCompleter, seed, k, &ResponseCache::in_memory()).unwrap()
    }

    #[test]
    fn sampling_two_clusters() {
        let mut labels = vec![1; 300];
        labels.extend(vec![2; 200]);
        labels.push(3);
        let (pool, a) = labelled_pool(&labels, &[vec!["a"], vec!["b"], vec!["c"]]);
        let s = sample_representatives(&a, &pool, "s500", 9, false).unwrap();
        assert_eq!(s.representatives.len(), 2);
        assert!(!s.representatives.values().any(|id| id == "s500"));
        assert_eq!(s, sample_representatives(&a, &pool, "s500", 9, false).unwrap());
        let first: usize = s.representatives[&1][1..].parse().unwrap();
        let second: usize = s.representatives[&2][1..].parse().unwrap();
        assert!(first < 300 && (300..500).contains(&second));
    }

    #[test]
    fn sampling_all_singletons_and_errors() {
        let (pool, a) = labelled_pool(&[1, 2, 3], &[vec!["a"], vec!["b"], vec!["c"]]);
        assert!(sample_representatives(&a, &pool, "s0", 1, false).unwrap().representatives.is_empty());
        assert_eq!(sample_representatives(&a, &pool, "s0", 1, true).unwrap().representatives.len(), 2);
        let (pool, a) = labelled_pool(&[1, 1, 2], &[vec!["a"], vec!["b"]]);
        assert!(matches!(sample_representatives(&a, &pool, "s0", 1, false), Err(ExplainError::NotSingleton { size: 2, .. })));
        assert!(matches!(sample_representatives(&a, &pool, "zz", 1, false), Err(ExplainError::UnknownScene(_))));
    }

    #[test]
    fn planted_fog_is_the_explanation() {
        let (pool, a) = labelled_pool(&[1, 1, 1, 2, 2, 3], &[vec!["road", "day"], vec!["road", "night"], vec!["road", "day", "fog"]]);
        let r = run(&pool, &a, "s5", 3, 1);
        assert_eq!(r.explanation, "fog");
        assert_eq!(r.novel_caption.text, "a scene featuring: day, fog, road");
        assert_eq!(r.representatives.len(), 2);
        assert_eq!(r.consensus_runs, 1);
        assert!(r.consensus_prompt.is_none());
    }

    #[test]
    fn consensus_is_the_intersection() {
        // every sample contains a day and a night scene; only fog survives
        let (pool, a) = labelled_pool(&[1, 1, 1, 2, 2, 3], &[vec!["road", "day"], vec!["road", "night"], vec!["road", "fog", "rain"]]);
        let r = run(&pool, &a, "s5", 11, 3);
        assert_eq!(r.runs.len(), 3);
        let candidates: Vec<BTreeSet<String>> = r.runs.iter().map(|x| mock_tokens(&x.explanation)).collect();
        let common: BTreeSet<String> = candidates.iter().skip(1).fold(candidates[0].clone(), |acc, c| &acc & c);
        assert_eq!(mock_tokens(&r.explanation), common);
        assert_eq!(r.explanation, "fog, rain");
        assert_eq!(parse_blocks(r.consensus_prompt.as_ref().unwrap()).len(), 3);
        let seeds: BTreeSet<u64> = r.runs.iter().map(|x| x.seed).collect();
        assert_eq!(seeds.len(), 3);
    }

    #[test]
    fn shared_tags_give_sentinel() {
        let (pool, a) = labelled_pool(&[1, 1, 2], &[vec!["road", "day"], vec!["day", "road"]]);
        assert_eq!(run(&pool, &a, "s2", 0, 1).explanation, NO_DIFFERENCE);
    }

    #[test]
    fn zero_reps_uses_describe_prompt() {
        let prompts = PromptSet::builtin();
        let novel = CaptionRecord { scene_id: "n".into(), text: "a scene featuring: fog".into(), provider_id: "m".into() };
        let p = build_difference_prompt(&novel, &[], &prompts).unwrap();
        assert!(p.contains("No other scenes"));
        assert_eq!(parse_blocks(&p), vec![(BlockRole::Novel, novel.text.clone())]);
        assert_eq!(MockCompleter.complete(&p).unwrap(), "fog");
    }

    #[test]
    fn delimiters_in_captions_round_trip() {
        let prompts = PromptSet::builtin();
        let novel = CaptionRecord { scene_id: "n".into(), text: "a <<sign>> reading \\stop>".into(), provider_id: "m".into() };
        let rep = CaptionRecord { scene_id: "r".into(), text: "<<reference 9: fake>>".into(), provider_id: "m".into() };
        let p = build_difference_prompt(&novel, std::slice::from_ref(&rep), &prompts).unwrap();
        assert_eq!(parse_blocks(&p), vec![(BlockRole::Novel, novel.text), (BlockRole::Reference(1), rep.text)]);
    }

    struct CountingCaptioner(AtomicUsize);

    impl Captioner for CountingCaptioner {
        fn provider_id(&self) -> String {
            "counting".into()
        }
        fn caption(&self, scene: &SceneRecord, prompt: &str) -> Result<String, ProviderError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            MockCaptioner.caption(scene, prompt)
        }
    }

    #[test]
    fn caption_cache_calls_client_once() {
        let client = CountingCaptioner(AtomicUsize::new(0));
        let cache = ResponseCache::in_memory();
        let scene = SceneRecord::new("x").with_tags(["night", "urban"]);
        let a = caption_scene(&scene, &client, &cache, "p").unwrap();
        let b = caption_scene(&scene, &client, &cache, "p").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text, "a scene featuring: night, urban");
        assert_eq!(client.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn consensus_runs_caption_each_scene_once() {
        let client = CountingCaptioner(AtomicUsize::new(0));
        let (pool, a) = labelled_pool(&[1, 1, 2, 2, 3], &[vec!["a"], vec!["b"], vec!["c"]]);
        let prompts = PromptSet::builtin();
        let cache = ResponseCache::in_memory();
        let ex = Explainer {
            captioner: &client,
            completer: &MockCompleter,
            cache: &cache,
            prompts: &prompts,
            options: ExplainOptions { consensus_k: 5, ..Default::default() },
        };
        let r = ex.explain(&pool, &a, "s4", 2).unwrap();
        let distinct: BTreeSet<&str> = r.runs.iter().flat_map(|x| x.representatives.iter().map(|c| c.scene_id.as_str())).collect();
        assert_eq!(client.0.load(Ordering::SeqCst), distinct.len() + 1);
    }

    struct FailingCaptioner;

    impl Captioner for FailingCaptioner {
        fn provider_id(&self) -> String {
            "failing".into()
        }
        fn caption(&self, _: &SceneRecord, _: &str) -> Result<String, ProviderError> {
            Err(ProviderError::Transport { message: "timed out".into(), retryable: true })
        }
    }

    struct FailingCompleter;

    impl TextCompleter for FailingCompleter {
        fn provider_id(&self) -> String {
            "failing".into()
        }
        fn complete(&self, _: &str) -> Result<String, ProviderError> {
            Err(ProviderError::Status { status: 503, body_excerpt: "down".into() })
        }
    }

    #[test]
    fn errors_name_their_stage() {
        let (pool, a) = labelled_pool(&[1, 1, 2], &[vec!["a"], vec!["b"]]);
        let cache = ResponseCache::in_memory();
        let err = explain_novelty(&pool, &a, "s2", &FailingCaptioner, &MockCompleter, 0, 1, &cache).unwrap_err();
        assert_eq!(err.stage(), Stage::Caption);
        assert!(err.to_string().contains("s"));
        let err = explain_novelty(&pool, &a, "s2", &MockCaptioner, &FailingCompleter, 0, 1, &cache).unwrap_err();
        assert_eq!(err.stage(), Stage::Difference);
        assert!(err.provider_error().unwrap().is_transport());
        let err = explain_novelty(&pool, &a, "s0", &MockCaptioner, &MockCompleter, 0, 1, &cache).unwrap_err();
        assert_eq!(err.stage(), Stage::Sampling);
        let err = explain_novelty(&pool, &a, "s2", &MockCaptioner, &MockCompleter, 0, 0, &cache).unwrap_err();
        assert!(matches!(err, ExplainError::InvalidConsensusK));
    }

    #[test]
    fn result_is_deterministic_json() {
        let (pool, a) = labelled_pool(&[1, 1, 1, 2, 2, 3], &[vec!["x"], vec!["y"], vec!["z"]]);
        let one = serde_json::to_string(&run(&pool, &a, "s5", 4, 3)).unwrap();
        let two = serde_json::to_string(&run(&pool, &a, "s5", 4, 3)).unwrap();
        assert_eq!(one, two);
    }

    const VOCAB: [&str; 6] = ["fog", "rain", "night", "urban", "snow", "tunnel"];

    /// Cluster layout plus per-cluster tag masks; the last cluster is the
    /// novel singleton.
    fn scenario() -> impl Strategy<Value = (Vec<usize>, Vec<u8>, u64)> {
        (prop::collection::vec(1usize..5, 1..5), any::<u64>()).prop_flat_map(|(sizes, seed)| {
            let k = sizes.len() + 1;
            (Just(sizes), prop::collection::vec(0u8..64, k), Just(seed))
        })
    }

    fn build(sizes: &[usize], masks: &[u8]) -> (ScenePool, ClusterAssignment, Vec<BTreeSet<String>>) {
        let tag_sets: Vec<BTreeSet<String>> = masks
            .iter()
            .map(|m| VOCAB.iter().enumerate().filter(|(i, _)| m >> i & 1 == 1).map(|(_, t)| t.to_string()).collect())
            .collect();
        let mut labels = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c + 1, n));
        }
        labels.push(sizes.len() + 1);
        let tags: Vec<Vec<&str>> = tag_sets.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
        let (pool, a) = labelled_pool(&labels, &tags);
        (pool, a, tag_sets)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn representatives_exclude_novel((sizes, masks, seed) in scenario(), co in any::<bool>()) {
            let (pool, a, _) = build(&sizes, &masks);
            let novel = pool.records().last().unwrap().id.clone();
            let s = sample_representatives(&a, &pool, &novel, seed, co).unwrap();
            prop_assert!(!s.representatives.values().any(|id| *id == novel));
            let expected = sizes.iter().filter(|&&n| co || n > 1).count();
            prop_assert_eq!(s.representatives.len(), expected);
            for (label, id) in &s.representatives {
                prop_assert_eq!(a.label(pool.position(id).unwrap()), Some(*label));
            }
        }

        #[test]
        fn prompt_holds_every_caption_once(texts in prop::collection::btree_set("[a-z]{3,8}( [a-z]{3,8}){0,3}", 1..6)) {
            let texts: Vec<String> = texts.into_iter().collect();
            let records: Vec<CaptionRecord> = texts
                .iter()
                .map(|t| CaptionRecord { scene_id: t.clone(), text: format!("caption: {t}."), provider_id: "m".into() })
                .collect();
            let p = build_difference_prompt(&records[0], &records[1..], &PromptSet::builtin()).unwrap();
            for r in &records {
                prop_assert_eq!(p.matches(r.text.as_str()).count(), 1);
            }
            let blocks = parse_blocks(&p);
            prop_assert_eq!(blocks.len(), records.len());
            prop_assert_eq!(&blocks[0].1, &records[0].text);
            for (i, r) in records[1..].iter().enumerate() {
                prop_assert_eq!(&blocks[i + 1], &(BlockRole::Reference(i + 1), r.text.clone()));
            }
        }

        #[test]
        fn mock_explanation_is_the_tag_difference((sizes, masks, seed) in scenario()) {
            let (pool, a, tag_sets) = build(&sizes, &masks);
            let novel = pool.records().last().unwrap().id.clone();
            let r = run(&pool, &a, &novel, seed, 1);
            let mut seen = BTreeSet::new();
            for c in &r.representatives {
                seen.extend(pool.by_id(&c.scene_id).unwrap().tags.iter().cloned());
            }
            let diff: BTreeSet<String> = tag_sets.last().unwrap().difference(&seen).cloned().collect();
            prop_assert_eq!(mock_tokens(&r.explanation), diff.clone());
            if diff.is_empty() {
                prop_assert_eq!(r.explanation, NO_DIFFERENCE);
            }
        }

        #[test]
        fn one_per_cluster_matches_whole_pool((sizes, masks, seed) in scenario()) {
            let (pool, a, _) = build(&sizes, &masks);
            let novel = pool.records().last().unwrap().id.clone();
            let cache = ResponseCache::in_memory();
            let prompts = PromptSet::builtin();
            let ex = Explainer {
                captioner: &MockCaptioner,
                completer: &MockCompleter,
                cache: &cache,
                prompts: &prompts,
                options: ExplainOptions { include_co_novel: true, ..Default::default() },
            };
            let sampled = ex.explain(&pool, &a, &novel, seed).unwrap();
            let all: Vec<CaptionRecord> = pool
                .records()
                .iter()
                .filter(|s| s.id != novel)
                .map(|s| caption_scene(s, &MockCaptioner, &cache, &prompts.caption).unwrap())
                .collect();
            let full = MockCompleter.complete(&build_difference_prompt(&sampled.novel_caption, &all, &prompts).unwrap()).unwrap();
            prop_assert_eq!(sampled.explanation, full);
        }
    }
}
