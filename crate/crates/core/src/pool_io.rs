//! Pool interchange formats.
//!
//! JSONL: a header line `{"format": "scene-pool", "version": 1, "dim": D}`
//! followed by one `{"id", "source_uri", "tags", "vec"}` object per line.
//!
//! Binary (`SPB1`), little-endian throughout:
//!
//! ```text
//! magic  "SPB1"
//! u32    dim
//! u64    count
//! count x {
//!     u16 id_len,  id bytes (UTF-8)
//!     u16 uri_len, uri bytes (UTF-8)
//!     u16 tag_count, tag_count x { u16 len, bytes }
//!     dim x f32
//! }
//! ```
//!
//! Both formats store components as `f32`. The binary format has no slot for
//! a missing embedding, so saving an unembedded record as binary is an error.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingVector, PoolError, SceneRecord, ScenePool};

pub const BINARY_MAGIC: &[u8; 4] = b"SPB1";
pub const JSONL_FORMAT_NAME: &str = "scene-pool";
pub const JSONL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolFormat {
    Jsonl,
    Binary,
}

impl PoolFormat {
    /// `.jsonl`/`.json` map to JSONL, `.spb`/`.bin` to binary.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "json" | "ndjson" => Some(Self::Jsonl),
            "spb" | "bin" => Some(Self::Binary),
            _ => None,
        }
    }
}

impl std::str::FromStr for PoolFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "binary" | "spb" => Ok(Self::Binary),
            other => Err(format!("unknown pool format {other:?} (expected jsonl or binary)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PoolIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: byte offset {offset}: {message}")]
    Binary { path: PathBuf, offset: u64, message: String },
    #[error("{path}: record {id:?}: {source}")]
    InvalidEmbedding {
        path: PathBuf,
        id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: PoolError,
    },
    #[error("record {id:?}: {message}")]
    Unrepresentable { id: String, message: String },
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    version: u32,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    id: String,
    #[serde(default)]
    source_uri: String,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    vec: Option<Vec<f32>>,
}

pub fn load_pool(path: &Path, format: PoolFormat) -> Result<ScenePool, PoolIoError> {
    let file = File::open(path).map_err(|source| PoolIoError::Io { path: path.into(), source })?;
    let reader = BufReader::new(file);
    match format {
        PoolFormat::Jsonl => read_jsonl(reader, path),
        PoolFormat::Binary => read_binary(reader, path),
    }
}

pub fn save_pool(pool: &ScenePool, path: &Path, format: PoolFormat) -> Result<(), PoolIoError> {
    if format == PoolFormat::Binary {
        check_binary_representable(pool)?;
    }
    let io_err = |source| PoolIoError::Io { path: path.into(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    match format {
        PoolFormat::Jsonl => write_jsonl(pool, &mut writer),
        PoolFormat::Binary => write_binary(pool, &mut writer),
    }
    .and_then(|()| writer.flush())
    .map_err(io_err)
}

fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<ScenePool, PoolIoError> {
    let parse = |line: usize, message: String| PoolIoError::Parse { path: path.into(), line, message };
    let mut dim = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| PoolIoError::Io { path: path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(dim) = dim else {
            let header: JsonlHeader =
                serde_json::from_str(&line).map_err(|e| parse(lineno, format!("bad header: {e}")))?;
            if header.format != JSONL_FORMAT_NAME {
                return Err(parse(lineno, format!("unexpected format {:?}", header.format)));
            }
            if header.version != JSONL_VERSION {
                return Err(parse(lineno, format!("unsupported version {}", header.version)));
            }
            dim = Some(header.dim);
            continue;
        };
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
        let embedding = match rec.vec {
            Some(components) => {
                if components.len() != dim {
                    return Err(PoolIoError::Invalid {
                        path: path.into(),
                        source: PoolError::DimMismatch { id: rec.id, declared: dim, found: components.len() },
                    });
                }
                let e = EmbeddingVector::from_f32(&components).map_err(|source| {
                    PoolIoError::InvalidEmbedding { path: path.into(), id: rec.id.clone(), source }
                })?;
                Some(e)
            }
            None => None,
        };
        records.push(SceneRecord {
            id: rec.id,
            source_uri: rec.source_uri,
            tags: rec.tags.into_iter().collect(),
            embedding,
        });
    }
    ScenePool::new(dim.unwrap_or(0), records).map_err(|source| PoolIoError::Invalid { path: path.into(), source })
}

fn write_jsonl<W: Write>(pool: &ScenePool, w: &mut W) -> io::Result<()> {
    let header = JsonlHeader { format: JSONL_FORMAT_NAME.into(), version: JSONL_VERSION, dim: pool.dim() };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for r in pool.records() {
        let rec = JsonlRecord {
            id: r.id.clone(),
            source_uri: r.source_uri.clone(),
            tags: r.tags.iter().cloned().collect(),
            vec: r.embedding.as_ref().map(EmbeddingVector::to_f32),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn check_binary_representable(pool: &ScenePool) -> Result<(), PoolIoError> {
    let too_long = |id: &str, what: &str| PoolIoError::Unrepresentable {
        id: id.to_string(),
        message: format!("{what} exceeds {} bytes", u16::MAX),
    };
    if u32::try_from(pool.dim()).is_err() {
        return Err(PoolIoError::Unrepresentable { id: String::new(), message: "dim exceeds u32".into() });
    }
    for r in pool.records() {
        if r.embedding.is_none() {
            return Err(PoolIoError::Unrepresentable {
                id: r.id.clone(),
                message: "binary format requires an embedding for every record".into(),
            });
        }
        if r.id.len() > u16::MAX as usize {
            return Err(too_long(&r.id, "id"));
        }
        if r.source_uri.len() > u16::MAX as usize {
            return Err(too_long(&r.id, "source_uri"));
        }
        if r.tags.len() > u16::MAX as usize || r.tags.iter().any(|t| t.len() > u16::MAX as usize) {
            return Err(too_long(&r.id, "tag list"));
        }
    }
    Ok(())
}

fn write_binary<W: Write>(pool: &ScenePool, w: &mut W) -> io::Result<()> {
    fn put_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
        w.write_all(&(s.len() as u16).to_le_bytes())?;
        w.write_all(s.as_bytes())
    }
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(pool.dim() as u32).to_le_bytes())?;
    w.write_all(&(pool.len() as u64).to_le_bytes())?;
    for r in pool.records() {
        put_str(w, &r.id)?;
        put_str(w, &r.source_uri)?;
        w.write_all(&(r.tags.len() as u16).to_le_bytes())?;
        for t in &r.tags {
            put_str(w, t)?;
        }
        // checked in check_binary_representable
        let e = r.embedding.as_ref().expect("embedded record");
        for c in e.to_f32() {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

struct ByteCursor<'p, R> {
    inner: R,
    offset: u64,
    path: &'p Path,
}

impl<R: Read> ByteCursor<'_, R> {
    fn err(&self, message: impl Into<String>) -> PoolIoError {
        PoolIoError::Binary { path: self.path.into(), offset: self.offset, message: message.into() }
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], PoolIoError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| self.err(format!("reading {what}: {e}")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn string(&mut self, what: &str) -> Result<String, PoolIoError> {
        let len = u16::from_le_bytes(self.take::<2>(what)?) as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| self.err(format!("reading {what}: {e}")))?;
        let s = String::from_utf8(buf).map_err(|_| self.err(format!("{what} is not UTF-8")))?;
        self.offset += len as u64;
        Ok(s)
    }
}

fn read_binary<R: Read>(reader: R, path: &Path) -> Result<ScenePool, PoolIoError> {
    let mut cur = ByteCursor { inner: reader, offset: 0, path };
    let magic = cur.take::<4>("magic")?;
    if &magic != BINARY_MAGIC {
        return Err(PoolIoError::Binary { path: path.into(), offset: 0, message: "bad magic".into() });
    }
    let dim = u32::from_le_bytes(cur.take::<4>("dim")?) as usize;
    let count = u64::from_le_bytes(cur.take::<8>("count")?);
    let mut records = Vec::new();
    for _ in 0..count {
        let id = cur.string("id")?;
        let source_uri = cur.string("source_uri")?;
        let tag_count = u16::from_le_bytes(cur.take::<2>("tag count")?);
        let tags = (0..tag_count).map(|_| cur.string("tag")).collect::<Result<_, _>>()?;
        let mut components = Vec::with_capacity(dim);
        for _ in 0..dim {
            components.push(f32::from_le_bytes(cur.take::<4>("component")?));
        }
        let embedding = EmbeddingVector::from_f32(&components)
            .map_err(|source| PoolIoError::InvalidEmbedding { path: path.into(), id: id.clone(), source })?;
        records.push(SceneRecord { id, source_uri, tags, embedding: Some(embedding) });
    }
    let mut trailing = [0u8; 1];
    if cur.inner.read(&mut trailing).map_err(|e| cur.err(e.to_string()))? != 0 {
        return Err(cur.err("trailing bytes after last record"));
    }
    ScenePool::new(dim, records).map_err(|source| PoolIoError::Invalid { path: path.into(), source })
}
