//! Delta checkpoints: only the trainable parameters of an adapted model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PETL" | version u16 | arch fingerprint u64 | tag_len u32 | tag (UTF-8 JSON)
//! entry_count u32 | entries... | crc32 u32 of every preceding byte
//! entry: name_len u32 | name (UTF-8) | dtype u8 | ndim u8 | dims u64 × ndim | values
//! ```
//!
//! The whole file is verified before anything is applied to a model.

use std::collections::BTreeSet;
use std::path::Path;

use petl_core::backbone::{ArchConfig, Backbone, Head, HeadConfig};
use petl_core::petl::{AdaptedModel, Method};
use petl_core::tensor::{ParamStore, Parameter};
use petl_core::{DType, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PETL";
pub const FORMAT_VERSION: u16 = 1;

/// What a checkpoint file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    /// Trainable parameters of an adapted model.
    Delta,
    /// Every parameter of a backbone, e.g. after a merge.
    Full,
    /// Task head parameters.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tag {
    pub content: Content,
    pub method: Method,
    pub use_layers: usize,
    /// Prefix banks saved after baking.
    #[serde(default)]
    pub baked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadConfig>,
}

/// Stable hash over the architecture shape; seeds and weights excluded.
pub fn fingerprint(arch: &ArchConfig) -> u64 {
    let canonical = format!(
        "family={};d_model={};n_layers={};n_heads={};ff_mult={};conv_kernel={}",
        arch.family.as_str(),
        arch.d_model,
        arch.n_layers,
        arch.n_heads,
        arch.ff_mult,
        arch.conv_kernel
    );
    let digest = Sha256::digest(canonical.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; exact for both supported dtypes.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub fingerprint: u64,
    pub tag: Tag,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }
}

fn entry_of<T: Scalar>(p: &Parameter<T>) -> Entry {
    Entry {
        name: p.name.clone(),
        dtype: T::DTYPE,
        shape: p.tensor.shape().to_vec(),
        values: p.tensor.data().iter().map(|&v| Scalar::to_f64(v)).collect(),
    }
}

pub fn encode(fingerprint: u64, tag: &Tag, entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&fingerprint.to_le_bytes());
    let tag = serde_json::to_vec(tag).map_err(|e| Error::Integrity(format!("tag: {e}")))?;
    out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    out.extend_from_slice(&tag);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.tag());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.values {
            match e.dtype {
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and fully verifies a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a PETL checkpoint".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 6 };
    let fingerprint = r.u64("fingerprint")?;
    let tag_len = r.u32("tag length")? as usize;
    let tag: Tag = serde_json::from_slice(r.take(tag_len, "tag")?).map_err(|e| Error::Integrity(format!("tag: {e}")))?;
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    let mut names = BTreeSet::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Integrity("entry name is not UTF-8".into()))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Integrity(format!("duplicate entry `{name}`")));
        }
        let dtype = DType::from_tag(r.u8("dtype")?).ok_or_else(|| Error::Integrity(format!("`{name}`: unknown dtype")))?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("`{name}`: shape overflows")))?;
        let width = dtype.size_of();
        let raw = r.take(
            n.checked_mul(width).ok_or_else(|| Error::Integrity("size overflow".into()))?,
            "values",
        )?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        entries.push(Entry {
            name,
            dtype,
            shape,
            values,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        version,
        fingerprint,
        tag,
        entries,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn baked<T: Scalar>(model: &AdaptedModel<T>) -> bool {
    model.prefix_bank().is_some_and(|b| b.baked.is_some())
}

/// Trainable backbone parameters followed by every injected parameter
/// (including a baked prefix), in name order.
pub fn delta_entries<T: Scalar>(model: &AdaptedModel<T>) -> Vec<Entry> {
    let mut entries: Vec<Entry> = model.base().params().trainable().map(entry_of).collect();
    entries.extend(model.injected().iter().map(entry_of));
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    entries
}

pub fn delta_bytes<T: Scalar>(model: &AdaptedModel<T>) -> Result<Vec<u8>> {
    let base = model.base();
    let tag = Tag {
        content: Content::Delta,
        method: *model.method(),
        use_layers: base.use_layers(),
        baked: baked(model),
        head: None,
    };
    encode(fingerprint(base.config()), &tag, &delta_entries(model))
}

pub fn save_delta<T: Scalar>(model: &AdaptedModel<T>, path: &Path) -> Result<()> {
    write_file(path, &delta_bytes(model)?)
}

fn check_fingerprint(ckpt: &Checkpoint, arch: &ArchConfig) -> Result<()> {
    let expected = fingerprint(arch);
    if ckpt.fingerprint != expected {
        return Err(Error::Fingerprint {
            expected,
            found: ckpt.fingerprint,
        });
    }
    Ok(())
}

fn expect_content(ckpt: &Checkpoint, content: Content) -> Result<()> {
    if ckpt.tag.content != content {
        return Err(Error::Integrity(format!(
            "expected a {content:?} checkpoint, found {:?}",
            ckpt.tag.content
        )));
    }
    Ok(())
}

/// Checks that `entries` cover exactly `targets` with matching shapes and
/// dtypes, then copies the values. Nothing is written unless every entry
/// checks out.
fn apply<T: Scalar>(entries: &[Entry], targets: &[&Parameter<T>]) -> Result<()> {
    let wanted: BTreeSet<&str> = targets.iter().map(|p| p.name.as_str()).collect();
    let found: BTreeSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    if let Some(missing) = wanted.difference(&found).next() {
        return Err(Error::Integrity(format!("missing entry `{missing}`")));
    }
    if let Some(extra) = found.difference(&wanted).next() {
        return Err(Error::Integrity(format!("unexpected entry `{extra}`")));
    }
    let mut pairs = Vec::with_capacity(entries.len());
    for e in entries {
        let p = targets.iter().find(|p| p.name == e.name).expect("name sets are equal");
        if p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::Integrity(format!(
                "`{}`: shape {:?} does not match model shape {:?}",
                e.name,
                e.shape,
                p.tensor.shape()
            )));
        }
        if e.dtype != T::DTYPE {
            return Err(Error::Integrity(format!("`{}`: dtype {:?}, model uses {:?}", e.name, e.dtype, T::DTYPE)));
        }
        pairs.push((p, e));
    }
    for (p, e) in pairs {
        for (dst, &src) in p.tensor.data_mut().iter_mut().zip(&e.values) {
            *dst = T::from_f64(src);
        }
    }
    Ok(())
}

/// Rebuilds an adapted model from `base` and a verified delta image.
pub fn load_delta_bytes<T: Scalar>(base: Backbone<T>, bytes: &[u8]) -> Result<AdaptedModel<T>> {
    let ckpt = decode(bytes)?;
    expect_content(&ckpt, Content::Delta)?;
    check_fingerprint(&ckpt, base.config())?;
    let base = base.with_use_layers(ckpt.tag.use_layers)?;
    let mut model = AdaptedModel::inject(base, ckpt.tag.method)?;
    if ckpt.tag.baked {
        model.bake_prefix()?;
    }
    let targets: Vec<&Parameter<T>> = model
        .base()
        .params()
        .trainable()
        .chain(model.injected().iter())
        .collect();
    apply(&ckpt.entries, &targets)?;
    Ok(model)
}

pub fn load_delta<T: Scalar>(base: Backbone<T>, path: &Path) -> Result<AdaptedModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_delta_bytes(base, &bytes)
}

fn store_entries<T: Scalar>(store: &ParamStore<T>) -> Vec<Entry> {
    store.iter().map(entry_of).collect()
}

pub fn save_head<T: Scalar>(head: &Head<T>, arch: &ArchConfig, path: &Path) -> Result<()> {
    let tag = Tag {
        content: Content::Head,
        method: Method::Probing,
        use_layers: 0,
        baked: false,
        head: Some(*head.config()),
    };
    write_file(path, &encode(fingerprint(arch), &tag, &store_entries(head.params()))?)
}

pub fn load_head<T: Scalar>(arch: &ArchConfig, path: &Path) -> Result<Head<T>> {
    let ckpt = read_file(path)?;
    expect_content(&ckpt, Content::Head)?;
    check_fingerprint(&ckpt, arch)?;
    let config = ckpt
        .tag
        .head
        .ok_or_else(|| Error::Integrity("head checkpoint without head config".into()))?;
    let head = Head::new(config, arch.d_model, 0)?;
    let targets: Vec<&Parameter<T>> = head.params().iter().collect();
    apply(&ckpt.entries, &targets)?;
    Ok(head)
}

/// Every backbone parameter, for models whose state lives entirely in the
/// backbone (e.g. after a merge).
pub fn save_full<T: Scalar>(model: &AdaptedModel<T>, path: &Path) -> Result<()> {
    let base = model.base();
    let tag = Tag {
        content: Content::Full,
        method: *model.method(),
        use_layers: base.use_layers(),
        baked: false,
        head: None,
    };
    write_file(path, &encode(fingerprint(base.config()), &tag, &store_entries(base.params()))?)
}

/// Restores a full checkpoint onto an identically shaped backbone.
pub fn load_full<T: Scalar>(base: Backbone<T>, path: &Path) -> Result<Backbone<T>> {
    let ckpt = read_file(path)?;
    expect_content(&ckpt, Content::Full)?;
    check_fingerprint(&ckpt, base.config())?;
    let base = base.with_use_layers(ckpt.tag.use_layers)?;
    let targets: Vec<&Parameter<T>> = base.params().iter().collect();
    apply(&ckpt.entries, &targets)?;
    Ok(base)
}
