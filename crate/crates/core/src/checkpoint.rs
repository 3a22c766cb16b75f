//! Binary tensor checkpoints with a JSON sidecar manifest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "FORACKPT"
//! version    u32       1
//! config     6 × u64   n_layers, d_model, n_heads, d_ff, vocab, seq_len
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   rows     u64
//!   cols     u64
//!   data     rows·cols × f64, row-major
//! ```
//!
//! The manifest `<path>.json` lists tensor names, shapes and byte offsets,
//! the SHA-256 of the binary file, and free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterPair, AdapterSet};
use crate::error::{ForaError, Result};
use crate::fisher::SelectionSet;
use crate::linalg::Matrix;
use crate::model::{BaseWeights, ModelConfig, Module, Slot};

pub const MAGIC: &[u8; 8] = b"FORACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of the first data element.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize tensors to bytes and build the matching manifest.
pub fn encode(
    config: &ModelConfig,
    tensors: &[(String, &Matrix)],
    kind: &str,
    meta: serde_json::Value,
) -> (Vec<u8>, Manifest) {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        config.n_layers,
        config.d_model,
        config.n_heads,
        config.d_ff,
        config.vocab,
        config.seq_len,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset: out.len(),
        });
        out.extend_from_slice(&m.to_le_bytes());
    }
    let manifest = Manifest {
        format: "fora-checkpoint".into(),
        version: VERSION,
        kind: kind.into(),
        config: *config,
        tensors: entries,
        sha256: sha256_hex(&out),
        meta,
    };
    (out, manifest)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> ForaError {
        ForaError::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.fail("size does not fit in usize"))
    }
}

/// Parse a checkpoint from bytes. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(ModelConfig, Vec<(String, Matrix)>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        n_layers: r.u64()?,
        d_model: r.u64()?,
        n_heads: r.u64()?,
        d_ff: r.u64()?,
        vocab: r.u64()?,
        seq_len: r.u64()?,
    };
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u64()?;
        let cols = r.u64()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.fail("tensor size overflows"))?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Matrix::new(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok((config, tensors))
}

/// Write the binary file and its manifest.
pub fn write(
    path: &Path,
    config: &ModelConfig,
    tensors: &[(String, &Matrix)],
    kind: &str,
    meta: serde_json::Value,
) -> Result<Manifest> {
    let (bytes, manifest) = encode(config, tensors, kind, meta);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &bytes)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Read the binary file and check it against its manifest.
pub fn read(path: &Path) -> Result<(Manifest, Vec<(String, Matrix)>)> {
    let bytes = fs::read(path)?;
    let manifest = read_manifest(path)?;
    if sha256_hex(&bytes) != manifest.sha256 {
        return Err(ForaError::Checkpoint {
            path: path.to_path_buf(),
            reason: "checksum does not match manifest".into(),
        });
    }
    let (config, tensors) = decode(&bytes, path)?;
    if config != manifest.config {
        return Err(ForaError::Checkpoint {
            path: path.to_path_buf(),
            reason: "config header does not match manifest".into(),
        });
    }
    Ok((manifest, tensors))
}

pub fn save_base(path: &Path, weights: &BaseWeights, meta: serde_json::Value) -> Result<Manifest> {
    write(path, &weights.config, &weights.named_tensors(), "base", meta)
}

pub fn load_base(path: &Path) -> Result<BaseWeights> {
    let (manifest, tensors) = read(path)?;
    if manifest.kind != "base" {
        return Err(ForaError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a base checkpoint, found {}", manifest.kind),
        });
    }
    BaseWeights::from_named(manifest.config, tensors.into_iter().collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    selection: SelectionSet,
    slots: Vec<AdapterSlotMeta>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterSlotMeta {
    layer: usize,
    module: Module,
    scaling: f64,
    constrained: bool,
}

fn adapter_name(slot: Slot, factor: &str) -> String {
    format!("adapters.{}.{}.{factor}", slot.layer, slot.module.name())
}

pub fn save_adapters(
    path: &Path,
    config: &ModelConfig,
    adapters: &AdapterSet,
    extra: serde_json::Value,
) -> Result<Manifest> {
    let selection = adapters
        .selection()
        .cloned()
        .unwrap_or_else(|| SelectionSet::empty(config.n_layers));
    let mut tensors = Vec::new();
    let mut slots = Vec::new();
    for p in adapters.iter() {
        tensors.push((adapter_name(p.slot, "a"), &p.a));
        tensors.push((adapter_name(p.slot, "b"), &p.b));
        slots.push(AdapterSlotMeta {
            layer: p.slot.layer,
            module: p.slot.module,
            scaling: p.scaling,
            constrained: p.constrained,
        });
    }
    let meta = serde_json::to_value(AdapterMeta {
        selection,
        slots,
        extra,
    })?;
    write(path, config, &tensors, "adapters", meta)
}

pub fn load_adapters(path: &Path) -> Result<(ModelConfig, AdapterSet)> {
    let (manifest, tensors) = read(path)?;
    let bad = |reason: String| ForaError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if manifest.kind != "adapters" {
        return Err(bad(format!("expected an adapter checkpoint, found {}", manifest.kind)));
    }
    let meta: AdapterMeta = serde_json::from_value(manifest.meta.clone())?;
    let mut map: BTreeMap<String, Matrix> = tensors.into_iter().collect();
    let mut pairs = Vec::with_capacity(meta.slots.len());
    for s in &meta.slots {
        let slot = Slot::new(s.layer, s.module);
        let a = map
            .remove(&adapter_name(slot, "a"))
            .ok_or_else(|| bad(format!("missing A for {slot}")))?;
        let b = map
            .remove(&adapter_name(slot, "b"))
            .ok_or_else(|| bad(format!("missing B for {slot}")))?;
        pairs.push(AdapterPair {
            slot,
            a,
            b,
            scaling: s.scaling,
            constrained: s.constrained,
        });
    }
    let set = if pairs.is_empty() {
        AdapterSet::empty()
    } else {
        AdapterSet::from_pairs(meta.selection, pairs)?
    };
    set.validate_against(&manifest.config)?;
    Ok((manifest.config, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseInit;
    use crate::adapter::{init_adapters, AdapterSpec, BInit};
    use crate::rng::RngStream;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab: 9,
            seq_len: 5,
        }
    }

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[[1.5, -2.0]]);
        let (bytes, manifest) = encode(&cfg(), &[("x".into(), &m)], "base", serde_json::Value::Null);
        assert_eq!(&bytes[..8], b"FORACKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        // 8 + 4 + 48 + 4 + 4 + 1 + 8 + 8 = 85
        assert_eq!(manifest.tensors[0].offset, 85);
        assert_eq!(f64::from_le_bytes(bytes[85..93].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 85 + 16);
    }

    #[test]
    fn base_and_adapters_survive_disk() {
        let dir = tempfile::tempdir().unwrap();
        let w = BaseWeights::random(cfg(), 1, BaseInit::default()).unwrap();
        let p = dir.path().join("base.bin");
        save_base(&p, &w, serde_json::json!({"seed": 1})).unwrap();
        assert_eq!(load_base(&p).unwrap(), w);

        let spec = AdapterSpec {
            r: 2,
            alpha_lora: 4.0,
            constrained: true,
            b_init: BInit::Orthonormal,
        };
        let set = init_adapters(&w.config, &SelectionSet::all(2), spec, &mut RngStream::new(2, 5)).unwrap();
        let q = dir.path().join("adapters.bin");
        save_adapters(&q, &w.config, &set, serde_json::Value::Null).unwrap();
        let (c, back) = load_adapters(&q).unwrap();
        assert_eq!(c, w.config);
        assert_eq!(back, set);
    }

    #[test]
    fn corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let w = BaseWeights::random(cfg(), 1, BaseInit::default()).unwrap();
        let p = dir.path().join("base.bin");
        save_base(&p, &w, serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[100] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_base(&p), Err(ForaError::Checkpoint { .. })));
        assert!(decode(&bytes[..50], &p).is_err());
        assert!(decode(b"NOTACKPTxxxx", &p).is_err());
    }
}
