//! Binary checkpoints.
//!
//! ```text
//! "MFCK"  u32 version
//! u32 header length, UTF-8 JSON header
//! u32 parameter count
//! per parameter, in name order:
//!   u32 name length, name, u32 rank, u32 dims…, f64 values (all little-endian)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::focus::{FocusConfig, FocusModel};
use crate::hred::{Hred, HredConfig};
use crate::numerics::{ParameterSet, Tensor};
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hred,
    Focus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    /// The model configuration as it was used.
    pub config: serde_json::Value,
    pub vocab: Vocabulary,
    pub seed: u64,
    /// Generator state at save time, if the run had one to carry forward.
    pub rng_state: Option<Rng>,
    /// Free-form run metadata (training settings, provenance).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterSet,
}

fn put_u32(out: &mut Vec<u8>, x: usize, what: &str) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::contract(format!("{what} does not fit in 32 bits")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(what.to_string()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

impl Checkpoint {
    pub fn from_hred(model: &Hred, vocab: &Vocabulary, seed: u64, rng_state: Option<Rng>) -> Result<Self> {
        Ok(Self {
            header: CheckpointHeader {
                kind: ModelKind::Hred,
                config: serde_json::to_value(model.config())?,
                vocab: vocab.clone(),
                seed,
                rng_state,
                meta: serde_json::Value::Null,
            },
            params: model.params().clone(),
        })
    }

    pub fn from_focus(model: &FocusModel, vocab: &Vocabulary, seed: u64, rng_state: Option<Rng>) -> Result<Self> {
        Ok(Self {
            header: CheckpointHeader {
                kind: ModelKind::Focus,
                config: serde_json::to_value(model.config())?,
                vocab: vocab.clone(),
                seed,
                rng_state,
                meta: serde_json::Value::Null,
            },
            params: model.params().clone(),
        })
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.header.meta = meta;
        self
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Data(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_hred(&self) -> Result<Hred> {
        self.expect_kind(ModelKind::Hred)?;
        let cfg: HredConfig = serde_json::from_value(self.header.config.clone())?;
        Hred::from_params(cfg, self.params.clone())
    }

    pub fn to_focus(&self) -> Result<FocusModel> {
        self.expect_kind(ModelKind::Focus)?;
        let cfg: FocusConfig = serde_json::from_value(self.header.config.clone())?;
        FocusModel::from_params(cfg, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, header.len(), "header length")?;
        out.extend_from_slice(&header);
        put_u32(&mut out, self.params.len(), "parameter count")?;
        for (_, name, t) in self.params.iter() {
            put_u32(&mut out, name.len(), "name length")?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank(), "rank")?;
            for &d in t.shape() {
                put_u32(&mut out, d, "dimension")?;
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses checkpoint bytes; `source` only labels errors.
    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(source.to_path_buf()));
        }
        r.pos = 4;
        let version = r.u32("version")? as u32;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = r.u32("header length")?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)?;
        let count = r.u32("parameter count")?;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let nlen = r.u32(&format!("name of parameter #{i}"))?;
            let name = std::str::from_utf8(r.take(nlen, &format!("name of parameter #{i}"))?)
                .map_err(|e| Error::Data(format!("parameter #{i} name is not UTF-8: {e}")))?
                .to_string();
            let what = format!("parameter `{name}`");
            let rank = r.u32(&what)?;
            let shape = (0..rank).map(|_| r.u32(&what)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Data(format!("{what} is impossibly large")))?;
            let raw = r.take(n, &what)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header,
            params: ParameterSet::from_tensors(tensors)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}
