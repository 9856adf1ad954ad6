//! Binary checkpoint: `PIACKPT\0`, u32 version, then length-prefixed
//! sections, all little-endian:
//!
//! ```text
//! manifest   u64 len, UTF-8 `key = value` lines (sorted)
//! tensors    u64 count, each: u32 name len, name, u32 rank, u64 dims.., u64 len, f64 data..
//! velocity   same layout as tensors
//! history    u64 count, f64..
//! rng        32-byte seed, u64 stream, u128 word position
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::engine::NamedTensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form metadata; the trainers record `stage`, `model_config` and
    /// `train_config` here.
    pub manifest: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
    pub velocity: Vec<NamedTensor>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    /// Mean loss per completed epoch.
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn stage(&self) -> Option<&str> {
        self.manifest.get("stage").map(String::as_str)
    }

    /// Detector configuration recorded by the trainer.
    pub fn model_config(&self) -> Result<crate::model::PiaNetConfig> {
        let text = self
            .manifest
            .get("model_config")
            .ok_or_else(|| Error::data("checkpoint manifest has no model_config"))?;
        let cfg: crate::model::PiaNetConfig =
            serde_json::from_str(text).map_err(|e| Error::data(format!("checkpoint model_config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let mut manifest = self.manifest.clone();
        manifest.insert("epoch".into(), self.epoch.to_string());
        let text: String = manifest.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for set in [&self.tensors, &self.velocity] {
            out.extend_from_slice(&(set.len() as u64).to_le_bytes());
            for t in set {
                out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
                out.extend_from_slice(t.name.as_bytes());
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for d in &t.shape {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
                for x in &t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.loss_history.len() as u64).to_le_bytes());
        for x in &self.loss_history {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(8, "version", &format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let len = r.len("manifest length", 1)?;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "manifest")?)
            .map_err(|_| r.err(at, "manifest", "not UTF-8"))?
            .to_string();
        let mut manifest = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| r.err(at, "manifest", &format!("line {} is not `key = value`", i + 1)))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let epoch = manifest
            .remove("epoch")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| r.err(at, "manifest", "missing or bad epoch"))?;
        let tensors = r.tensors("tensors")?;
        let velocity = r.tensors("velocity")?;
        let n = r.len("history length", 8)?;
        let loss_history = (0..n).map(|_| r.f64("history")).collect::<Result<Vec<_>>>()?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailer", &format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            manifest,
            tensors,
            velocity,
            epoch,
            rng: RngState { seed, stream, word_pos },
            loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, at: usize, field: &str, detail: &str) -> Error {
        Error::parse(self.source, format!("byte {at} ({field})"), detail)
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.err(
                self.pos,
                field,
                &format!("truncated: needs {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    /// A count whose payload (`unit` bytes each) must fit in the rest of the file.
    fn len(&mut self, field: &str, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(field)?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > left) {
            return Err(self.err(at, field, &format!("declares {n} entries, only {left} bytes left")));
        }
        Ok(n as usize)
    }

    fn tensors(&mut self, section: &str) -> Result<Vec<NamedTensor>> {
        let count = self.len(&format!("{section} count"), 4)?;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let at = self.pos;
            let nlen = self.u32(&format!("{section}[{i}] name length"))? as usize;
            let name = std::str::from_utf8(self.take(nlen, &format!("{section}[{i}] name"))?)
                .map_err(|_| self.err(at, section, "tensor name is not UTF-8"))?
                .to_string();
            let rank = self.u32(&format!("{name} rank"))? as usize;
            if rank > 8 {
                return Err(self.err(at, &name, &format!("rank {rank} is not plausible")));
            }
            let shape = (0..rank)
                .map(|_| self.u64(&format!("{name} shape")).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let at_len = self.pos;
            let len = self.len(&format!("{name} length"), 8)?;
            let declared = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if declared != Some(len) {
                return Err(self.err(
                    at_len,
                    &name,
                    &format!("shape {shape:?} does not match payload of {len} values"),
                ));
            }
            let data = (0..len).map(|_| self.f64(&name)).collect::<Result<Vec<_>>>()?;
            out.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}
