//! Versioned binary tensor container: JSON header with an offset table
//! followed by raw little-endian f64 payloads, 8-byte aligned so the layout
//! is memory-mappable. Shared by checkpoints, bank deltas, and feature
//! caches; files are published with an atomic rename.

use crate::error::{CoreError, Result};
use crate::schedule::ScheduleConfig;
use crate::unet::{UNetConfig, UNetParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CFTC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload region.
    pub offset: u64,
    /// Element count (f64).
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub format_version: u32,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

pub struct ContainerWriter {
    header: ContainerHeader,
    payload: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(kind: &str) -> Self {
        ContainerWriter {
            header: ContainerHeader {
                kind: kind.to_string(),
                format_version: FORMAT_VERSION,
                meta: BTreeMap::new(),
                tensors: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    pub fn meta(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.header.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) -> &mut Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor {name}");
        let offset = self.payload.len() as u64;
        for v in data {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len: data.len() as u64,
        });
        self
    }

    /// Serialize and publish atomically (write to a temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
            }
        }
        let header_json = serde_json::to_vec(&self.header)
            .map_err(|e| CoreError::format(path, e.to_string()))?;
        let mut buf = Vec::with_capacity(24 + header_json.len() + self.payload.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_json);
        while buf.len() % 8 != 0 {
            buf.push(0);
        }
        buf.extend_from_slice(&self.payload);
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
            f.write_all(&buf).map_err(|e| CoreError::io(&tmp, e))?;
            f.sync_all().map_err(|e| CoreError::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }
}

pub struct ContainerReader {
    pub header: ContainerHeader,
    path: std::path::PathBuf,
    payload_start: u64,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|e| CoreError::io(path, e))?;
        if &magic != MAGIC {
            return Err(CoreError::format(path, "bad magic, not a container file"));
        }
        let mut v = [0u8; 4];
        f.read_exact(&mut v).map_err(|e| CoreError::io(path, e))?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(CoreError::format(
                path,
                format!("unsupported container version {version}"),
            ));
        }
        let mut l = [0u8; 8];
        f.read_exact(&mut l).map_err(|e| CoreError::io(path, e))?;
        let header_len = u64::from_le_bytes(l);
        let mut header_json = vec![0u8; header_len as usize];
        f.read_exact(&mut header_json).map_err(|e| CoreError::io(path, e))?;
        let header: ContainerHeader = serde_json::from_slice(&header_json)
            .map_err(|e| CoreError::format(path, e.to_string()))?;
        let mut payload_start = 16 + header_len;
        if payload_start % 8 != 0 {
            payload_start += 8 - payload_start % 8;
        }
        Ok(ContainerReader { header, path: path.to_path_buf(), payload_start })
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.header
            .meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CoreError::format(&self.path, format!("missing meta key {key:?}")))
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CoreError::format(&self.path, format!("missing tensor {name:?}")))
    }

    pub fn read_tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = self.entry(name)?.clone();
        let mut f = std::fs::File::open(&self.path).map_err(|e| CoreError::io(&self.path, e))?;
        f.seek(SeekFrom::Start(self.payload_start + entry.offset))
            .map_err(|e| CoreError::io(&self.path, e))?;
        let mut raw = vec![0u8; entry.len as usize * 8];
        f.read_exact(&mut raw).map_err(|e| CoreError::io(&self.path, e))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((entry.shape, data))
    }

    pub fn read_all(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
        let mut out = BTreeMap::new();
        for t in &self.header.tensors {
            out.insert(t.name.clone(), self.read_tensor(&t.name)?);
        }
        Ok(out)
    }
}

/// SHA-256 of a file's contents as lowercase hex.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(crate::unet::hex_string(&h.finalize()))
}

// ---------------------------------------------------------------------------
// Checkpoints: denoiser weights + schedule constants + layer registry.
// ---------------------------------------------------------------------------

pub fn save_checkpoint(
    path: &Path,
    params: &UNetParams,
    schedule: &ScheduleConfig,
) -> Result<()> {
    let mut w = ContainerWriter::new("checkpoint");
    w.meta("unet_config", serde_json::to_string(&params.cfg).unwrap());
    w.meta("schedule", serde_json::to_string(schedule).unwrap());
    w.meta("layers", serde_json::to_string(&params.registry()).unwrap());
    w.meta("content_hash", params.content_hash());
    params.for_each_param_shaped(&mut |name, shape, data| {
        w.tensor(name, shape, data);
    });
    w.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(UNetParams, ScheduleConfig)> {
    let r = ContainerReader::open(path)?;
    if r.header.kind != "checkpoint" {
        return Err(CoreError::format(path, format!("kind {:?} is not a checkpoint", r.header.kind)));
    }
    let cfg: UNetConfig = serde_json::from_str(r.meta("unet_config")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let schedule: ScheduleConfig = serde_json::from_str(r.meta("schedule")?)
        .map_err(|e| CoreError::format(path, e.to_string()))?;
    let mut params = UNetParams::new(cfg, 0)?;
    let map = r.read_all()?;
    params.load_map(&map)?;
    let stored_hash = r.meta("content_hash")?;
    let actual = params.content_hash();
    if stored_hash != actual {
        return Err(CoreError::format(path, "checkpoint content hash mismatch"));
    }
    Ok((params, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;

    #[test]
    fn container_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.cftc");
        let mut w = ContainerWriter::new("test");
        w.meta("alpha", "1");
        w.tensor("a", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        w.tensor("b", &[1], &[-0.5]);
        w.save(&path).unwrap();
        let r = ContainerReader::open(&path).unwrap();
        assert_eq!(r.header.kind, "test");
        assert_eq!(r.meta("alpha").unwrap(), "1");
        let (shape, data) = r.read_tensor("a").unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (shape, data) = r.read_tensor("b").unwrap();
        assert_eq!(shape, vec![1]);
        assert_eq!(data, vec![-0.5]);
        assert!(r.read_tensor("missing").is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bitexact() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        let params = UNetParams::new(UNetConfig::tiny(), 123).unwrap();
        let sched = ScheduleConfig::default();
        save_checkpoint(&path, &params, &sched).unwrap();
        let (loaded, sched2) = load_checkpoint(&path).unwrap();
        assert_eq!(sched, sched2);
        assert_eq!(params, loaded);
        assert_eq!(params.content_hash(), loaded.content_hash());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(ContainerReader::open(&path).is_err());
    }
}
