use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scene_novelty::cache::ResponseCache;
use scene_novelty::embedding::{SceneRecord, ScenePool};
use scene_novelty::explain::{ExplainOptions, Explainer, ExplanationResult};
use scene_novelty::harness::{generate_synthetic_pool, sweep_tau, CapSpec, NearHomogeneousSet, OutlierSpec, SweepResult, SyntheticSpec, TrialResult};
use scene_novelty::novelty::{NoveltyAnalysis, NoveltyOptions, NoveltyReport};
use scene_novelty::pool_io::{load_pool, save_pool, PoolFormat};
use scene_novelty::prompt::PromptSet;
use scene_novelty::providers::{
    embed_image, read_source, Captioner, ImageEmbedder, MockCaptioner, MockCompleter, MockEmbedder, TextCompleter, WireCaptioner,
    WireCompleter, WireEmbedder,
};
use serde::{Deserialize, Serialize};

use crate::config::{OutputFormat, RunConfig, DEFAULT_MOCK_DIM};
use crate::error::{CliError, CliResult};
use crate::output::{safe_file_stem, to_json, RunOutput, SWEEP_SCHEMA, TRIAL_SCHEMA};

fn load(cfg: &RunConfig, out: &mut RunOutput) -> CliResult<(PathBuf, ScenePool)> {
    let path = cfg.pool_path()?.to_path_buf();
    let format = cfg.pool_format(&path)?;
    let pool = load_pool(&path, format)?;
    out.record_input(&path)?;
    log::info!("loaded {} scenes (dim {}) from {}", pool.len(), pool.dim(), path.display());
    Ok((path, pool))
}

fn label_for(cfg: &RunConfig, pool_path: &Path) -> String {
    cfg.label.clone().unwrap_or_else(|| pool_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

/// The planted scene named by `planted_id` and/or `planted_tag`, if any.
fn planted(cfg: &RunConfig, pool: &ScenePool) -> CliResult<Option<NearHomogeneousSet>> {
    let by_tag = match &cfg.planted_tag {
        None => None,
        Some(tag) => {
            let carriers: Vec<&SceneRecord> = pool.records().iter().filter(|r| r.tags.contains(tag)).collect();
            match carriers.as_slice() {
                [one] => Some(one.id.clone()),
                [] => return Err(CliError::Data(format!("no scene carries planted_tag {tag:?}"))),
                many => return Err(CliError::Data(format!("{} scenes carry planted_tag {tag:?}; expected one", many.len()))),
            }
        }
    };
    let id = match (&cfg.planted_id, by_tag) {
        (Some(a), Some(b)) if *a != b => {
            return Err(CliError::Data(format!("planted_id {a:?} disagrees with planted_tag carrier {b:?}")));
        }
        (Some(a), _) => a.clone(),
        (None, Some(b)) => b,
        (None, None) => return Ok(None),
    };
    let tag = cfg.planted_tag.clone().unwrap_or_default();
    Ok(Some(NearHomogeneousSet::from_pool(pool.clone(), id, tag)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialEnvelope {
    pub schema: String,
    pub label: String,
    pub seed: u64,
    pub planted_id: String,
    pub planted_tag: Option<String>,
    pub min_cluster_size: usize,
    pub result: TrialResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEnvelope {
    pub schema: String,
    pub label: String,
    pub seed: u64,
    pub planted_id: String,
    pub planted_tag: Option<String>,
    pub min_cluster_size: usize,
    /// `"selected"` or `"no selection"`.
    pub selection: String,
    pub result: SweepResult,
}

fn per_scene_csv(report: &NoveltyReport) -> CliResult<String> {
    let sizes = |label: usize| report.per_scene.values().filter(|s| s.label == label).count();
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(["id", "label", "cluster_size", "is_novel"]).map_err(err)?;
    for (id, s) in &report.per_scene {
        w.write_record([id.as_str(), &s.label.to_string(), &sizes(s.label).to_string(), &s.is_novel.to_string()]).map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn detect(cfg: &RunConfig) -> CliResult<String> {
    let tau = cfg.single_tau()?;
    let options = NoveltyOptions { min_cluster_size: cfg.min_cluster_size()? };
    let mut out = RunOutput::create(&cfg.out_dir(), "detect")?;
    let (pool_path, pool) = load(cfg, &mut out)?;
    let set = planted(cfg, &pool)?;
    let analysis = NoveltyAnalysis::new(&pool)?;
    let report = analysis.report(tau, options)?;
    out.write_json("report.json", &report)?;
    out.write("report.txt", &report.render_text())?;
    out.write_json("dendrogram.json", analysis.dendrogram())?;
    if let Some(set) = set {
        let result = TrialResult {
            tau,
            novel_set_size: report.novelty_ids.len(),
            planted_recovered: report.novelty_ids.contains(&set.planted_id),
            novelty_ids: report.novelty_ids.clone(),
        };
        let env = TrialEnvelope {
            schema: TRIAL_SCHEMA.into(),
            label: label_for(cfg, &pool_path),
            seed: cfg.seed(),
            planted_id: set.planted_id.clone(),
            planted_tag: cfg.planted_tag.clone(),
            min_cluster_size: options.min_cluster_size,
            result,
        };
        out.write_json("trial.json", &env)?;
    }
    out.finish(cfg)?;
    match cfg.format() {
        OutputFormat::Json => to_json(&report),
        OutputFormat::Text => Ok(report.render_text()),
        OutputFormat::Csv => per_scene_csv(&report),
    }
}

fn sweep_text(env: &SweepEnvelope) -> String {
    let mut s = format!("sweep {} (planted {})\n", env.label, env.planted_id);
    s.push_str("     tau  novel_set_size  planted_recovered\n");
    for t in &env.result.trials {
        let mark = if Some(t.tau) == env.result.selected_tau { "  <- selected" } else { "" };
        let _ = writeln!(s, "{:>8}  {:>14}  {}{}", t.tau, t.novel_set_size, t.planted_recovered, mark);
    }
    match env.result.selected_tau {
        Some(t) => {
            let _ = writeln!(s, "selected tau: {t}");
        }
        None => s.push_str("no selection: no tau in the grid recovers the planted scene\n"),
    }
    s
}

pub fn sweep(cfg: &RunConfig) -> CliResult<String> {
    let grid = cfg.grid()?;
    let options = NoveltyOptions { min_cluster_size: cfg.min_cluster_size()? };
    if cfg.planted_id.is_none() && cfg.planted_tag.is_none() {
        return Err(CliError::Config("sweep needs planted_id or planted_tag".into()));
    }
    let mut out = RunOutput::create(&cfg.out_dir(), "sweep")?;
    let (pool_path, pool) = load(cfg, &mut out)?;
    let set = planted(cfg, &pool)?.ok_or_else(|| CliError::Internal("planted scene unresolved".into()))?;
    let result = sweep_tau(&set, &grid, options)?;
    let env = SweepEnvelope {
        schema: SWEEP_SCHEMA.into(),
        label: label_for(cfg, &pool_path),
        seed: cfg.seed(),
        planted_id: set.planted_id.clone(),
        planted_tag: cfg.planted_tag.clone(),
        min_cluster_size: options.min_cluster_size,
        selection: if result.selected_tau.is_some() { "selected" } else { "no selection" }.into(),
        result,
    };
    out.write_json("sweep.json", &env)?;
    out.write("sweep.csv", &env.result.to_csv())?;
    out.finish(cfg)?;
    match cfg.format() {
        OutputFormat::Json => to_json(&env),
        OutputFormat::Csv => Ok(env.result.to_csv()),
        OutputFormat::Text => Ok(sweep_text(&env)),
    }
}

fn prompt_set(cfg: &RunConfig) -> CliResult<PromptSet> {
    match &cfg.explain.templates_dir {
        None => Ok(PromptSet::builtin()),
        Some(dir) => Ok(PromptSet::load_dir(dir, cfg.explain.templates_version.as_deref().unwrap_or("custom"))?),
    }
}

#[derive(Serialize)]
struct ExplainSummary<'a> {
    novel_id: &'a str,
    explanation: &'a str,
    file: String,
}

pub fn explain(cfg: &RunConfig, report_path: Option<&Path>) -> CliResult<String> {
    let consensus_k = cfg.consensus_k()?;
    let prompts = prompt_set(cfg)?;
    let mut out = RunOutput::create(&cfg.out_dir(), "explain")?;

    // thresholds come from a detect report when one is given
    let prior: Option<NoveltyReport> = match report_path {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("reading {}: {e}", p.display())))?;
            let r: NoveltyReport = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            r.validate().map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            out.record_input(p)?;
            Some(r)
        }
    };
    let (tau, m) = match &prior {
        Some(r) => (r.tau, r.min_cluster_size),
        None => (cfg.single_tau()?, cfg.min_cluster_size()?),
    };
    let (pool_path, pool) = load(cfg, &mut out)?;
    let analysis = NoveltyAnalysis::new(&pool)?;
    let report = analysis.report(tau, NoveltyOptions { min_cluster_size: m })?;
    if let Some(r) = &prior {
        if r.novelty_ids != report.novelty_ids || r.pool_size != report.pool_size {
            return Err(CliError::Data("detect report does not match the pool".into()));
        }
    }
    let assignment = analysis.assignment(tau)?;

    let mut targets: Vec<String> = report.novelty_ids.clone();
    if let Some(only) = &cfg.explain.ids {
        let wanted: BTreeSet<&String> = only.iter().collect();
        if let Some(missing) = only.iter().find(|id| !report.novelty_ids.contains(id)) {
            return Err(CliError::Data(format!("{missing:?} is not in the novelty set")));
        }
        targets.retain(|id| wanted.contains(id));
    }
    let (singles, skipped): (Vec<String>, Vec<String>) =
        targets.into_iter().partition(|id| pool.position(id).and_then(|i| assignment.cluster_size_of(i)) == Some(1));
    for id in &skipped {
        log::warn!("{id} is novel but not a singleton; explanations need a singleton scene");
    }

    let cache = match &cfg.explain.cache_dir {
        Some(dir) => ResponseCache::on_disk(dir).map_err(|e| CliError::Data(e.to_string()))?,
        None => ResponseCache::in_memory(),
    };
    let (captioner, completer): (Box<dyn Captioner>, Box<dyn TextCompleter>) = if cfg.mock() {
        (Box::new(MockCaptioner), Box::new(MockCompleter))
    } else {
        let base = pool_path.parent().map(Path::to_path_buf);
        (
            Box::new(WireCaptioner::new(cfg.client("caption")?.clone(), base)?),
            Box::new(WireCompleter::new(cfg.client("complete")?.clone())?),
        )
    };
    let explainer = Explainer {
        captioner: captioner.as_ref(),
        completer: completer.as_ref(),
        cache: &cache,
        prompts: &prompts,
        options: ExplainOptions {
            consensus_k,
            include_co_novel: cfg.explain.include_co_novel.unwrap_or(false),
            parallelism: cfg.explain.parallelism.unwrap_or(4),
        },
    };

    let mut results: Vec<(String, ExplanationResult)> = Vec::new();
    for id in &singles {
        let r = explainer.explain(&pool, &assignment, id, cfg.seed())?;
        let file = format!("explanation-{}.json", safe_file_stem(id));
        out.write_json(&file, &r)?;
        results.push((file, r));
    }
    let notice = if report.novelty_ids.is_empty() {
        Some(format!("no novelty ids at tau {tau}; no explanations written"))
    } else if singles.is_empty() {
        Some("no singleton novelty ids to explain; no explanations written".to_string())
    } else {
        None
    };
    if let Some(n) = &notice {
        eprintln!("notice: {n}");
        out.extra.insert("notice".into(), n.clone().into());
    }
    out.extra.insert("skipped_non_singleton".into(), serde_json::json!(skipped));
    out.extra.insert("prompts".into(), serde_json::to_value(prompts.info()).map_err(|e| CliError::Internal(e.to_string()))?);
    out.extra.insert("tau".into(), tau.into());
    out.finish(cfg)?;

    Ok(match cfg.format() {
        OutputFormat::Json => {
            let summary: Vec<ExplainSummary> =
                results.iter().map(|(f, r)| ExplainSummary { novel_id: &r.novel_id, explanation: &r.explanation, file: f.clone() }).collect();
            to_json(&summary)?
        }
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let err = |e: csv::Error| CliError::Internal(e.to_string());
            w.write_record(["novel_id", "explanation"]).map_err(err)?;
            for (_, r) in &results {
                w.write_record([&r.novel_id, &r.explanation]).map_err(err)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?).map_err(|e| CliError::Internal(e.to_string()))?
        }
        OutputFormat::Text => results.iter().map(|(_, r)| format!("{}: {}\n", r.novel_id, r.explanation)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub source: String,
    pub tau: Option<f64>,
    pub novel_set_size: Option<usize>,
    pub planted_recovered: bool,
    pub note: String,
}

fn read_row(path: &Path) -> CliResult<(String, ReportRow)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("").to_string();
    let bad = |e: serde_json::Error| CliError::Data(format!("{}: {e}", path.display()));
    let source = path.display().to_string();
    let row = match schema.as_str() {
        TRIAL_SCHEMA => {
            let t: TrialEnvelope = serde_json::from_value(value).map_err(bad)?;
            ReportRow {
                label: t.label,
                source,
                tau: Some(t.result.tau),
                novel_set_size: Some(t.result.novel_set_size),
                planted_recovered: t.result.planted_recovered,
                note: String::new(),
            }
        }
        SWEEP_SCHEMA => {
            let s: SweepEnvelope = serde_json::from_value(value).map_err(bad)?;
            match s.result.selected_trial() {
                Some(t) => ReportRow {
                    label: s.label.clone(),
                    source,
                    tau: Some(t.tau),
                    novel_set_size: Some(t.novel_set_size),
                    planted_recovered: t.planted_recovered,
                    note: format!("best of {} thresholds", s.result.grid.len()),
                },
                None => ReportRow {
                    label: s.label,
                    source,
                    tau: None,
                    novel_set_size: None,
                    planted_recovered: false,
                    note: "no selection".into(),
                },
            }
        }
        "" => return Err(CliError::Data(format!("{}: no schema field", path.display()))),
        other => return Err(CliError::Data(format!("{}: unsupported schema {other:?}", path.display()))),
    };
    Ok((schema, row))
}

pub fn table_text(rows: &[ReportRow]) -> String {
    let mut s = String::from("| Set category | Novel set size | Planted recovered | tau |\n|---|---|---|---|\n");
    for r in rows {
        let size = r.novel_set_size.map_or("-".to_string(), |n| n.to_string());
        let tau = r.tau.map_or("-".to_string(), |t| t.to_string());
        let rec = if r.planted_recovered { "yes" } else { "no" };
        let _ = writeln!(s, "| {} | {} | {} | {} |", r.label, size, rec, tau);
    }
    s
}

fn table_csv(rows: &[ReportRow]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(["set_category", "novel_set_size", "planted_recovered", "tau", "note"]).map_err(err)?;
    for r in rows {
        let size = r.novel_set_size.map_or(String::new(), |n| n.to_string());
        let tau = r.tau.map_or(String::new(), |t| t.to_string());
        w.write_record([r.label.as_str(), &size, &r.planted_recovered.to_string(), &tau, &r.note]).map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> CliResult<String> {
    if inputs.is_empty() {
        return Err(CliError::Config("report needs at least one result file".into()));
    }
    let mut out = RunOutput::create(&cfg.out_dir(), "report")?;
    let mut rows = Vec::new();
    let mut schemas = BTreeSet::new();
    for p in inputs {
        let (schema, row) = read_row(p)?;
        out.record_input(p)?;
        schemas.insert(schema);
        rows.push(row);
    }
    if schemas.len() > 1 {
        return Err(CliError::Data(format!("inputs mix result schemas {schemas:?}; report one schema version at a time")));
    }
    out.write("table.txt", &table_text(&rows))?;
    out.write("table.csv", &table_csv(&rows)?)?;
    out.write_json("table.json", &rows)?;
    out.finish(cfg)?;
    match cfg.format() {
        OutputFormat::Json => to_json(&rows),
        OutputFormat::Csv => table_csv(&rows),
        OutputFormat::Text => Ok(table_text(&rows)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Three tight caps plus one outlier tagged `outlier-0`.
    ThreeCaps,
    /// Three caps sharing `road`, plus an outlier that alone carries `fog`.
    PlantedFog,
}

pub fn preset_spec(p: Preset) -> SyntheticSpec {
    let mut spec = SyntheticSpec::three_caps_one_outlier();
    if p == Preset::PlantedFog {
        let tags = |t: &[&str]| Some(t.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let caps = [["road", "day"], ["road", "night"], ["road", "rain"]];
        spec.clusters = spec
            .clusters
            .into_iter()
            .zip(caps)
            .map(|(c, t)| CapSpec { tags: tags(&t), ..c })
            .collect();
        spec.outliers = spec.outliers.into_iter().map(|o| OutlierSpec { tags: tags(&["road", "fog"]), ..o }).collect();
    }
    spec
}

fn pool_output(cfg: &RunConfig, output: Option<&Path>, format: Option<PoolFormat>) -> CliResult<(PathBuf, PoolFormat)> {
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir().join("pool.jsonl"));
    let format = format.or_else(|| PoolFormat::from_path(&path)).unwrap_or(PoolFormat::Jsonl);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("creating {}: {e}", parent.display())))?;
    }
    Ok((path, format))
}

fn summary(pool: &ScenePool, path: &Path, format: OutputFormat) -> CliResult<String> {
    let value = serde_json::json!({ "pool": path.display().to_string(), "scenes": pool.len(), "dim": pool.dim() });
    Ok(match format {
        OutputFormat::Json => to_json(&value)?,
        OutputFormat::Csv => format!("pool,scenes,dim\n{},{},{}\n", path.display(), pool.len(), pool.dim()),
        OutputFormat::Text => format!("wrote {} scenes (dim {}) to {}\n", pool.len(), pool.dim(), path.display()),
    })
}

pub fn synth(cfg: &RunConfig, preset: Option<Preset>, dim: Option<usize>, output: Option<&Path>, format: Option<PoolFormat>) -> CliResult<String> {
    let spec = match (preset, &cfg.synth.spec) {
        (Some(p), _) => preset_spec(p),
        (None, Some(s)) => s.clone(),
        (None, None) => preset_spec(Preset::ThreeCaps),
    };
    let dim = dim.or(cfg.synth.dim).unwrap_or(DEFAULT_MOCK_DIM);
    let mut out = RunOutput::create(&cfg.out_dir(), "synth")?;
    let pool = generate_synthetic_pool(&spec, dim, cfg.seed())?;
    let (path, pool_format) = pool_output(cfg, output, format)?;
    save_pool(&pool, &path, pool_format)?;
    out.note_output(&path.display().to_string());
    out.extra.insert("spec".into(), serde_json::to_value(&spec).map_err(|e| CliError::Internal(e.to_string()))?);
    out.extra.insert("dim".into(), dim.into());
    out.finish(cfg)?;
    summary(&pool, &path, cfg.format())
}

#[derive(Debug, Deserialize)]
struct IngestRow {
    id: String,
    source_uri: String,
    #[serde(default)]
    tags: String,
}

pub fn ingest(cfg: &RunConfig, input: &Path, output: Option<&Path>, format: Option<PoolFormat>) -> CliResult<String> {
    let mut out = RunOutput::create(&cfg.out_dir(), "ingest")?;
    let mut reader = csv::Reader::from_path(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let rows: Vec<IngestRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    out.record_input(input)?;
    let (embedder, expected): (Box<dyn ImageEmbedder>, Option<usize>) = if cfg.mock() {
        let dim = cfg.mock_dim.unwrap_or(DEFAULT_MOCK_DIM);
        (Box::new(MockEmbedder { dim, seed: cfg.seed() }), Some(dim))
    } else {
        let client = WireEmbedder::new(cfg.client("embed")?.clone())?;
        let health = client.health()?;
        if health.status != "ok" {
            return Err(CliError::Transport(format!("embedding service reports status {:?}", health.status)));
        }
        out.extra.insert("embed_model".into(), health.model.clone().into());
        (Box::new(client), Some(health.dim))
    };
    out.extra.insert("embed_provider".into(), embedder.provider_id().into());
    let base = input.parent();
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let scene = SceneRecord::new(row.id).with_source(row.source_uri).with_tags(row.tags.split(';').map(str::trim).filter(|t| !t.is_empty()));
        let bytes = read_source(&scene, base).map_err(|e| CliError::Data(e.to_string()))?;
        let v = embed_image(embedder.as_ref(), &scene.id, &bytes, expected).map_err(|e| match CliError::from(e) {
            CliError::Data(m) => CliError::Data(format!("scene {:?}: {m}", scene.id)),
            other => other,
        })?;
        records.push(scene.with_embedding(v));
    }
    let dim = expected.unwrap_or(0);
    let pool = ScenePool::new(dim, records).map_err(|e| CliError::Data(e.to_string()))?;
    let (path, pool_format) = pool_output(cfg, output, format)?;
    save_pool(&pool, &path, pool_format)?;
    out.note_output(&path.display().to_string());
    out.finish(cfg)?;
    summary(&pool, &path, cfg.format())
}
