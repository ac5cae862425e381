//! On-disk formats: binary feature files, the dataset manifest, frame
//! labels, caption JSON lines, score CSVs and parameter checkpoints.
//!
//! Every writer holds an exclusive lock on the destination while writing.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use mvad_autograd::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoders::SnippetFeatures;
use crate::error::FeatureFileError;
use crate::modality::ModalityId;
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"MVADFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 24;

/// Writes `bytes` to `path` under an exclusive lock.
pub fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .map_err(io)?;
    f.lock().map_err(io)?;
    f.set_len(0).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.flush().map_err(io)?;
    f.unlock().map_err(io)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// One modality's snippet features as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub rows: u32,
    pub cols: u32,
    pub frames_per_snippet: u32,
    /// Row-major, `rows * cols` values.
    pub data: Vec<f32>,
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

impl FeatureFile {
    pub fn from_tensor(t: &Tensor, frames_per_snippet: u32) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "feature tensor must be a matrix, got {:?}",
                t.shape()
            )));
        }
        let too_big = |n: usize| {
            u32::try_from(n).map_err(|_| Error::Contract(format!("dimension {n} exceeds u32")))
        };
        Ok(Self {
            rows: too_big(t.rows())?,
            cols: too_big(t.cols())?,
            frames_per_snippet,
            data: t.data().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::matrix(self.rows as usize, self.cols as usize, data).expect("validated at decode")
    }

    pub fn to_features(&self, modality: ModalityId) -> Result<SnippetFeatures> {
        SnippetFeatures::new(modality, self.to_tensor())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [
            FEATURE_VERSION,
            self.rows,
            self.cols,
            self.frames_per_snippet,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FeatureFileError> {
        if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
            return Err(FeatureFileError::BadMagic {
                found: bytes[..bytes.len().min(8)].to_vec(),
            });
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(FeatureFileError::TruncatedHeader {
                expected: FEATURE_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let version = u32_at(bytes, 8);
        if version != FEATURE_VERSION {
            return Err(FeatureFileError::UnsupportedVersion {
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        let rows = u32_at(bytes, 12);
        let cols = u32_at(bytes, 16);
        let frames_per_snippet = u32_at(bytes, 20);
        for (field, value, offset) in [
            ("rows", rows, 12),
            ("cols", cols, 16),
            ("frames_per_snippet", frames_per_snippet, 20),
        ] {
            if value == 0 {
                return Err(FeatureFileError::Zero { field, offset });
            }
        }
        let expected = (rows as usize)
            .checked_mul(cols as usize)
            .and_then(|n| n.checked_mul(4))
            .ok_or(FeatureFileError::Overflow { rows, cols })?;
        let payload = &bytes[FEATURE_HEADER_LEN..];
        if payload.len() < expected {
            return Err(FeatureFileError::TruncatedPayload {
                offset: FEATURE_HEADER_LEN,
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(FeatureFileError::TrailingBytes {
                offset: FEATURE_HEADER_LEN + expected,
                extra: payload.len() - expected,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self {
            rows,
            cols,
            frames_per_snippet,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        Self::decode(&bytes).map_err(|source| Error::Feature {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_locked(path, &self.encode())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One video of the dataset. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub split: Split,
    pub label: u8,
    pub features: BTreeMap<ModalityId, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<VideoRecord>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> std::result::Result<Self, String> {
        let mut m: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut ids = std::collections::HashSet::new();
        for v in &self.videos {
            if !ids.insert(&v.id) {
                return Err(format!("duplicate video id `{}`", v.id));
            }
            if v.label > 1 {
                return Err(format!(
                    "video `{}` has label {}, expected 0 or 1",
                    v.id, v.label
                ));
            }
            if v.features.is_empty() {
                return Err(format!("video `{}` lists no feature files", v.id));
            }
            if v.split == Split::Test && v.frame_labels.is_none() {
                return Err(format!("test video `{}` has no frame labels", v.id));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &root).map_err(|m| Error::parse(path, 0, m))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_locked(path, self.to_json().as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    /// Reads the requested modalities of one video; returns the features and
    /// the frames per snippet (which must agree across modalities).
    pub fn load_features(
        &self,
        video: &VideoRecord,
        modalities: impl IntoIterator<Item = ModalityId>,
    ) -> Result<(Vec<SnippetFeatures>, u32)> {
        let mut out = Vec::new();
        let mut fps = None;
        for m in modalities {
            let rel = video.features.get(&m).ok_or_else(|| {
                Error::Config(format!("video `{}` has no {m} feature file", video.id))
            })?;
            let path = self.resolve(rel);
            let file = FeatureFile::read(&path)?;
            match fps {
                None => fps = Some(file.frames_per_snippet),
                Some(f) if f != file.frames_per_snippet => {
                    return Err(Error::Alignment(format!(
                        "video `{}`: {m} has {} frames per snippet, expected {f}",
                        video.id, file.frames_per_snippet
                    )))
                }
                _ => {}
            }
            out.push(file.to_features(m)?);
        }
        let fps = fps.ok_or_else(|| Error::Config("no modalities requested".into()))?;
        Ok((out, fps))
    }
}

/// One `0`/`1` per line; blank lines are ignored.
pub fn parse_frame_labels(text: &str) -> std::result::Result<Vec<bool>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "" => {}
            "0" => out.push(false),
            "1" => out.push(true),
            other => return Err((i + 1, format!("expected 0 or 1, found `{other}`"))),
        }
    }
    if out.is_empty() {
        return Err((0, "no frame labels".into()));
    }
    Ok(out)
}

pub fn format_frame_labels(labels: &[bool]) -> String {
    labels
        .iter()
        .map(|&l| if l { "1\n" } else { "0\n" })
        .collect()
}

pub fn read_frame_labels(path: &Path) -> Result<Vec<bool>> {
    parse_frame_labels(&read_text(path)?).map_err(|(line, m)| Error::parse(path, line, m))
}

pub fn write_frame_labels(path: &Path, labels: &[bool]) -> Result<()> {
    write_locked(path, format_frame_labels(labels).as_bytes())
}

/// Parses JSON lines; blank lines are skipped, errors carry 1-based lines.
pub fn parse_jsonl<T: DeserializeOwned>(
    text: &str,
) -> std::result::Result<Vec<T>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}

pub fn format_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(&read_text(path)?).map_err(|(line, m)| Error::parse(path, line, m))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_locked(path, format_jsonl(items).as_bytes())
}

/// One row of a score CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video_id: String,
    pub snippet_index: usize,
    pub s: f64,
    pub p: Option<f64>,
    pub s_hat: f64,
}

pub fn format_scores(rows: &[ScoreRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    if rows.is_empty() {
        w.write_record(["video_id", "snippet_index", "s", "p", "s_hat"])
            .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn parse_scores(text: &str) -> std::result::Result<Vec<ScoreRow>, (usize, String)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| (1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["video_id", "snippet_index", "s", "p", "s_hat"] {
        return Err((
            1,
            format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| (i + 2, e.to_string())))
        .collect()
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    parse_scores(&read_text(path)?).map_err(|(line, m)| Error::parse(path, line, m))
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_locked(path, format_scores(rows).as_bytes())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MVADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameters plus string metadata describing how to rebuild the
/// model that owns them.
///
/// Layout (little-endian): magic, version `u32`, metadata length `u32`,
/// metadata as UTF-8 `key=value` lines, parameter count `u32`, then per
/// parameter: name length `u32`, name bytes, rank `u32`, dims `u32` each,
/// values as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Decode {
            what: "checkpoint",
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        match self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
        {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(format!(
                "need {n} more bytes, {} left",
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.bytes.len() - self.pos {
            return self.fail(format!("length {n} runs past the end"));
        }
        Ok(n)
    }
}

impl Checkpoint {
    pub fn from_store(meta: BTreeMap<String, String>, store: &ParamStore) -> Self {
        Self {
            meta,
            params: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Copies values into a store with the same names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Contract(format!("model has no parameter `{name}`")))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, {:?} in the model",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put(&mut out, CHECKPOINT_VERSION);
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        put(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            c.pos = 0;
            return c.fail("bad magic");
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return c.fail(format!("unsupported version {version}"));
        }
        let n = c.len()?;
        let meta_start = c.pos;
        let meta_text = std::str::from_utf8(c.take(n)?).or_else(|e| {
            c.pos = meta_start + e.valid_up_to();
            c.fail("metadata is not UTF-8")
        })?;
        let mut meta = BTreeMap::new();
        for line in meta_text.split_terminator('\n') {
            let (k, v) = match line.split_once('=') {
                Some(kv) => kv,
                None => return c.fail(format!("metadata line without `=`: {line:?}")),
            };
            meta.insert(k.to_string(), v.to_string());
        }
        let count = c.u32()?;
        let mut params = Vec::new();
        for _ in 0..count {
            let n = c.len()?;
            let name = match std::str::from_utf8(c.take(n)?) {
                Ok(s) => s.to_string(),
                Err(_) => return c.fail("parameter name is not UTF-8"),
            };
            let rank = c.u32()? as usize;
            if rank > 2 {
                return c.fail(format!("parameter `{name}` has rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len() - c.pos));
            let Some(numel) = numel else {
                return c.fail(format!(
                    "parameter `{name}` of shape {shape:?} runs past the end"
                ));
            };
            let data = c
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if c.pos != bytes.len() {
            return c.fail(format!("{} trailing bytes", bytes.len() - c.pos));
        }
        Ok(Self { meta, params })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?).map_err(|e| match e {
            Error::Decode {
                offset, message, ..
            } => Error::parse(path, 0, format!("byte {offset}: {message}")),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_locked(path, &self.encode())
    }
}
