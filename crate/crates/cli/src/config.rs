//! Run configuration: a TOML file, then command-line overrides.
//!
//! Relative paths inside the file are resolved against the file's directory.
//!
//! ```toml
//! seed = 7
//! pool = "pool.jsonl"
//! tau = 0.3
//! min_cluster_size = 1
//! planted_tag = "outlier-0"
//!
//! [explain]
//! consensus_k = 3
//!
//! [clients.caption]
//! endpoint = "http://localhost:8080"
//! auth_token_env = "CAPTION_TOKEN"
//! ```

use std::path::{Path, PathBuf};

use scene_novelty::harness::SyntheticSpec;
use scene_novelty::pool_io::PoolFormat;
use scene_novelty::providers::ClientConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_MOCK_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    pub consensus_k: Option<usize>,
    pub include_co_novel: Option<bool>,
    pub parallelism: Option<usize>,
    /// On-disk response cache. In-memory when absent.
    pub cache_dir: Option<PathBuf>,
    /// Directory with caption.txt, difference.txt, describe.txt, consensus.txt.
    pub templates_dir: Option<PathBuf>,
    pub templates_version: Option<String>,
    /// Restrict explanations to these novelty ids.
    pub ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsSection {
    pub embed: Option<ClientConfig>,
    pub caption: Option<ClientConfig>,
    pub complete: Option<ClientConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub dim: Option<usize>,
    pub spec: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub mock: Option<bool>,
    pub out_dir: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    /// Set category shown by `report`.
    pub label: Option<String>,
    pub pool: Option<PathBuf>,
    pub pool_format: Option<PoolFormat>,
    pub tau: Option<f64>,
    pub tau_grid: Option<Vec<f64>>,
    pub min_cluster_size: Option<usize>,
    pub planted_id: Option<String>,
    pub planted_tag: Option<String>,
    /// Embedding width of the mock embedder.
    pub mock_dim: Option<usize>,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub clients: ClientsSection,
    #[serde(default)]
    pub synth: SynthSection,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.out_dir);
        rebase(base, &mut cfg.pool);
        rebase(base, &mut cfg.explain.cache_dir);
        rebase(base, &mut cfg.explain.templates_dir);
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn mock(&self) -> bool {
        self.mock.unwrap_or(false)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn format(&self) -> OutputFormat {
        self.format.unwrap_or_default()
    }

    pub fn min_cluster_size(&self) -> CliResult<usize> {
        match self.min_cluster_size.unwrap_or(1) {
            0 => Err(CliError::Config("min_cluster_size must be at least 1".into())),
            m => Ok(m),
        }
    }

    pub fn pool_path(&self) -> CliResult<&Path> {
        self.pool.as_deref().ok_or_else(|| CliError::Config("no pool given (set `pool` or pass --pool)".into()))
    }

    pub fn pool_format(&self, path: &Path) -> CliResult<PoolFormat> {
        match self.pool_format.or_else(|| PoolFormat::from_path(path)) {
            Some(f) => Ok(f),
            None => Err(CliError::Config(format!("cannot infer pool format of {}; set pool_format", path.display()))),
        }
    }

    /// The single threshold for detect and explain.
    pub fn single_tau(&self) -> CliResult<f64> {
        match (self.tau, &self.tau_grid) {
            (Some(_), Some(_)) => Err(CliError::Config("both tau and tau_grid are set; this command takes tau".into())),
            (None, _) => Err(CliError::Config("tau is required".into())),
            (Some(t), None) => check_tau(t),
        }
    }

    pub fn grid(&self) -> CliResult<Vec<f64>> {
        match (self.tau, &self.tau_grid) {
            (Some(_), Some(_)) => Err(CliError::Config("both tau and tau_grid are set; sweep takes tau_grid".into())),
            (_, None) => Err(CliError::Config("tau_grid is required".into())),
            (None, Some(g)) => {
                if g.is_empty() {
                    return Err(CliError::Config("tau_grid is empty".into()));
                }
                for &t in g {
                    check_tau(t)?;
                }
                if g.windows(2).any(|w| w[0] > w[1]) {
                    return Err(CliError::Config("tau_grid must be ascending".into()));
                }
                Ok(g.clone())
            }
        }
    }

    pub fn consensus_k(&self) -> CliResult<usize> {
        match self.explain.consensus_k.unwrap_or(1) {
            0 => Err(CliError::Config("consensus_k must be at least 1".into())),
            k => Ok(k),
        }
    }

    pub fn client(&self, which: &str) -> CliResult<&ClientConfig> {
        let c = match which {
            "embed" => &self.clients.embed,
            "caption" => &self.clients.caption,
            _ => &self.clients.complete,
        };
        let c = c.as_ref().ok_or_else(|| CliError::Config(format!("[clients.{which}] is required without --mock")))?;
        c.validate().map_err(|e| CliError::Config(format!("[clients.{which}]: {e}")))?;
        Ok(c)
    }
}

fn check_tau(t: f64) -> CliResult<f64> {
    if t.is_finite() && t >= 0.0 {
        Ok(t)
    } else {
        Err(CliError::Config(format!("tau must be a finite non-negative number, got {t}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config_and_rebases_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
seed = 7
pool = "data/pool.jsonl"
tau = 0.3
[explain]
consensus_k = 3
[clients.complete]
endpoint = "http://localhost:1/"
auth_token_env = "TOKEN"
[synth]
dim = 16
[synth.spec]
clusters = [{ center_seed = 0, angular_radius = 0.05, count = 3 }]
"#,
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.seed(), 7);
        assert_eq!(c.pool.as_deref(), Some(dir.path().join("data/pool.jsonl").as_path()));
        assert_eq!(c.single_tau().unwrap(), 0.3);
        assert_eq!(c.consensus_k().unwrap(), 3);
        assert!(c.client("complete").is_ok());
        assert!(c.client("caption").is_err());
        assert_eq!(c.synth.spec.unwrap().clusters[0].count, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "taux = 1.0\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn tau_rules() {
        let mut c = RunConfig { tau: Some(-0.1), ..Default::default() };
        assert!(c.single_tau().is_err());
        c.tau = Some(0.5);
        c.tau_grid = Some(vec![0.1]);
        assert!(c.single_tau().is_err());
        assert!(c.grid().is_err());
        c.tau = None;
        assert_eq!(c.grid().unwrap(), vec![0.1]);
        c.tau_grid = Some(vec![]);
        assert!(c.grid().is_err());
        c.tau_grid = Some(vec![0.5, 0.2]);
        assert!(c.grid().is_err());
    }
}
