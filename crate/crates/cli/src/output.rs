use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA: &str = "scene-novelty/manifest@1";
pub const TRIAL_SCHEMA: &str = "scene-novelty/trial@1";
pub const SWEEP_SCHEMA: &str = "scene-novelty/sweep@1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema: &'static str,
    command: &'a str,
    tool_version: &'static str,
    core_version: &'static str,
    seed: u64,
    mock: bool,
    config_sha256: String,
    config: &'a RunConfig,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    extra: &'a BTreeMap<String, serde_json::Value>,
}

/// Collects everything one command writes, then records it in
/// `manifest.json`.
pub struct RunOutput {
    dir: PathBuf,
    command: &'static str,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunOutput {
    pub fn create(dir: &Path, command: &'static str) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), command, inputs: Vec::new(), outputs: Vec::new(), extra: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn record_input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        self.inputs.push(InputRecord { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn note_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))?;
        self.note_output(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let s = to_json(value)?;
        self.write(name, &s)
    }

    pub fn finish(mut self, config: &RunConfig) -> CliResult<()> {
        self.outputs.sort();
        let config_json = serde_json::to_vec(config).map_err(|e| CliError::Internal(e.to_string()))?;
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA,
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            core_version: scene_novelty::VERSION,
            seed: config.seed(),
            mock: config.mock(),
            config_sha256: sha256_hex(&config_json),
            config,
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.outputs),
            extra: &self.extra,
        };
        let s = to_json(&manifest)?;
        let path = self.path("manifest.json");
        std::fs::write(&path, s).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
    }
}

/// File name for an id that may contain path separators.
pub fn safe_file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_filesystem_safe() {
        assert_eq!(safe_file_stem("a/b c:d"), "a_b_c_d");
        assert_eq!(safe_file_stem("o0-0001"), "o0-0001");
    }

    #[test]
    fn manifest_lists_outputs_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = RunOutput::create(dir.path(), "detect").unwrap();
        out.write("b.txt", "b").unwrap();
        out.write("a.txt", "a").unwrap();
        out.finish(&RunConfig::default()).unwrap();
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["outputs"], serde_json::json!(["a.txt", "b.txt"]));
        assert_eq!(m["seed"], 0);
        assert_eq!(m["command"], "detect");
    }
}
