//! Checkpoint archives: a single file holding every named tensor of a model
//! (and optimizer moments) as `.tnsr` payloads, a text manifest mapping
//! names to dtypes/shapes, and a `meta.txt` of scalar key=value entries.
//! Writes are atomic (temp file + rename); round-trips are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{decode_tensor, encode_tensor, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TSCK";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";
pub const META_NAME: &str = "meta.txt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint archive")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("truncated archive while reading {0}")]
    Truncated(&'static str),
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("duplicate entry {0:?}")]
    DuplicateEntry(String),
    #[error("archive is missing its manifest")]
    MissingManifest,
    #[error("manifest line {0:?} is malformed")]
    MalformedManifest(String),
    #[error("manifest mismatch for {name:?}: manifest says {expected}, archive holds {actual}")]
    ManifestMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("manifest lists {0:?} but the archive has no such tensor")]
    ManifestOrphan(String),
    #[error("tensor {0:?} is absent from the manifest")]
    Unlisted(String),
    #[error("checkpoint has no tensor named {0:?}")]
    MissingTensor(String),
    #[error("shape mismatch for {name:?}: store expects {expected:?}, checkpoint has {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("meta line {0:?} is malformed (expected key=value)")]
    BadMeta(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn dtype_name(t: &Tensor) -> &'static str {
    match t {
        Tensor::F32(_) => "f32",
        Tensor::U8(_) => "u8",
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn manifest_line_for(name: &str, t: &Tensor) -> String {
    format!("{name} {} {}", dtype_name(t), shape_string(t.shape()))
}

/// An in-memory checkpoint: ordered named tensors plus scalar metadata.
#[derive(Debug, Default)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate checkpoint tensor {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push((name, tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn render_manifest(&self) -> String {
        let mut out = String::new();
        for (name, t) in &self.tensors {
            out.push_str(&manifest_line_for(name, t));
            out.push('\n');
        }
        out
    }

    fn render_meta(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let manifest_bytes = self.render_manifest().into_bytes();
        let meta_bytes = self.render_meta().into_bytes();
        let encoded: Vec<Vec<u8>> = self
            .tensors
            .iter()
            .map(|(_, t)| encode_tensor(t))
            .collect::<Result<_, _>>()?;
        let mut entries: Vec<(&str, &[u8])> = Vec::with_capacity(self.tensors.len() + 2);
        entries.push((MANIFEST_NAME, &manifest_bytes));
        entries.push((META_NAME, &meta_bytes));
        for ((name, _), payload) in self.tensors.iter().zip(&encoded) {
            entries.push((name, payload));
        }
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, payload) in entries {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(payload.len() as u64).to_le_bytes())?;
            w.write_all(payload)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Truncated("magic"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| CheckpointError::Truncated("version"))?;
        if byte[0] != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(byte[0]));
        }
        let mut count_bytes = [0u8; 4];
        r.read_exact(&mut count_bytes)
            .map_err(|_| CheckpointError::Truncated("entry count"))?;
        let count = u32::from_le_bytes(count_bytes);
        let mut manifest: Option<String> = None;
        let mut meta_text = String::new();
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let mut len2 = [0u8; 2];
            r.read_exact(&mut len2)
                .map_err(|_| CheckpointError::Truncated("entry name length"))?;
            let name_len = u16::from_le_bytes(len2) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| CheckpointError::Truncated("entry name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
            let mut len8 = [0u8; 8];
            r.read_exact(&mut len8)
                .map_err(|_| CheckpointError::Truncated("entry length"))?;
            let payload_len = u64::from_le_bytes(len8) as usize;
            let mut payload = vec![0u8; payload_len];
            r.read_exact(&mut payload)
                .map_err(|_| CheckpointError::Truncated("entry payload"))?;
            match name.as_str() {
                MANIFEST_NAME => {
                    manifest =
                        Some(String::from_utf8(payload).map_err(|_| CheckpointError::BadName)?)
                }
                META_NAME => {
                    meta_text = String::from_utf8(payload).map_err(|_| CheckpointError::BadName)?
                }
                _ => {
                    if ck.index.contains_key(&name) {
                        return Err(CheckpointError::DuplicateEntry(name));
                    }
                    let tensor = decode_tensor(&payload)?;
                    ck.push(name, tensor);
                }
            }
        }
        let manifest = manifest.ok_or(CheckpointError::MissingManifest)?;
        validate_manifest(&manifest, &ck)?;
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::BadMeta(line.to_string()))?;
            ck.meta.push((k.to_string(), v.to_string()));
        }
        Ok(ck)
    }

    /// Atomic save: write to a sibling temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn validate_manifest(manifest: &str, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut listed: HashMap<&str, (&str, &str)> = HashMap::new();
    for line in manifest.lines() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let (name, dtype, shape) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(d), Some(s), None) => (n, d, s),
            _ => return Err(CheckpointError::MalformedManifest(line.to_string())),
        };
        listed.insert(name, (dtype, shape));
    }
    for (name, tensor) in ck.tensors() {
        let Some(&(dtype, shape)) = listed.get(name) else {
            return Err(CheckpointError::Unlisted(name.to_string()));
        };
        let actual = format!("{} {}", dtype_name(tensor), shape_string(tensor.shape()));
        let expected = format!("{dtype} {shape}");
        if actual != expected {
            return Err(CheckpointError::ManifestMismatch {
                name: name.to_string(),
                expected,
                actual,
            });
        }
        listed.remove(name);
    }
    if let Some((orphan, _)) = listed.into_iter().next() {
        return Err(CheckpointError::ManifestOrphan(orphan.to_string()));
    }
    Ok(())
}

/// Copy every parameter and buffer of a store into the checkpoint under its
/// registered name.
pub fn pack_store(ck: &mut Checkpoint, store: &ParamStore) {
    for (id, entry) in store.iter() {
        let _: ParamId = id;
        ck.push(entry.name.clone(), Tensor::F32(store.value(id).clone()));
    }
}

/// Restore every store entry from same-named checkpoint tensors.
/// Extra checkpoint tensors (e.g. optimizer moments) are ignored here.
pub fn unpack_store(ck: &Checkpoint, store: &mut ParamStore) -> Result<(), CheckpointError> {
    for id in 0..store.len() {
        let name = store.name(id).to_string();
        let tensor = ck
            .tensor(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let value = match tensor {
            Tensor::F32(a) => a.clone(),
            Tensor::U8(_) => {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: store.value(id).shape().to_vec(),
                    actual: tensor.shape().to_vec(),
                })
            }
        };
        if value.shape() != store.value(id).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: store.value(id).shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        store.set_value(id, value);
    }
    Ok(())
}
