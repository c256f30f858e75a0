//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "HOPECKPT" | u32 version
//! u64 len | JSON label block      (language, schema)
//! u64 len | JSON config block     (backbone, head, dropout scale, metadata)
//! u64 len | JSON tokenizer block
//! u64 tensor count
//! per tensor: u32 name len | name | u64 rows | u64 cols | rows·cols f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::corpus::{LabelSchema, Language};
use crate::encoder::BackboneConfig;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::heads::HeadConfig;
use crate::model::{ModelBundle, Tokenizer, TokenizerSpec};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"HOPECKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LabelBlock {
    language: Language,
    schema: LabelSchema,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    backbone: BackboneConfig,
    head: HeadConfig,
    dropout_scale: f64,
    metadata: BTreeMap<String, String>,
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&bytes);
    Ok(())
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + bundle.params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_json(
        &mut out,
        &LabelBlock {
            language: bundle.language,
            schema: bundle.schema.clone(),
        },
    )?;
    put_json(
        &mut out,
        &ConfigBlock {
            backbone: bundle.backbone.clone(),
            head: bundle.head.clone(),
            dropout_scale: bundle.dropout_scale,
            metadata: bundle.metadata.clone(),
        },
    )?;
    put_json(&mut out, &bundle.tokenizer.to_spec())?;
    out.extend_from_slice(&(bundle.params.len() as u64).to_le_bytes());
    for (_, name, m) in bundle.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self, what: &str) -> Result<T> {
        let n = self.len()?;
        serde_json::from_slice(self.take(n)?).map_err(|e| Error::Checkpoint(format!("{what} block: {e}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let labels: LabelBlock = r.json("label")?;
    let config: ConfigBlock = r.json("config")?;
    let tokenizer = Tokenizer::from_spec(r.json::<TokenizerSpec>("tokenizer")?)?;
    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.len()?;
        let cols = r.len()?;
        let len = rows
            .checked_mul(cols)
            .filter(|l| l.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(name, Matrix::from_vec(rows, cols, data))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let bundle = ModelBundle {
        language: labels.language,
        schema: labels.schema,
        backbone: config.backbone,
        head: config.head,
        tokenizer,
        dropout_scale: config.dropout_scale,
        params,
        metadata: config.metadata,
    };
    bundle.model()?;
    Ok(bundle)
}

pub fn save(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &to_bytes(bundle)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
