//! Versioned binary snapshot files.
//!
//! A file holds one or more records, each an architecture plus its
//! parameter tensors. All integers and floats are little-endian:
//!
//! ```text
//! file    := magic "MIAS" | version u32 (=1) | record_count u32 | record*
//! record  := tag str | epoch u64 | meta str | layer_count u32 | layer*
//!            | tensor_count u32 | tensor*
//! str     := byte_len u32 | UTF-8 bytes
//! layer   := kind u8, then by kind:
//!              0 dense   : in_dim u64 | out_dim u64
//!              1 relu    : (nothing)
//!              2 dropout : keep_prob f64
//!              3 conv1d  : rows u64 | width u64 | kernels u64
//!                          | kernel_width u64 | stride u64
//! tensor  := ndim u32 | dim u64 * ndim | value f64 * product(dims)
//! ```
//!
//! Target models are single-record files tagged `target`. Attack networks
//! store one record per sub-network and carry their layout as JSON in the
//! first record's `meta`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MiaError, Result};
use crate::nn::{LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MIAS";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters of a target model at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub epoch: u64,
    pub params: Vec<Tensor>,
    pub arch: Vec<LayerSpec>,
}

impl ModelSnapshot {
    pub fn from_network(net: &Network, epoch: u64) -> Self {
        ModelSnapshot {
            epoch,
            params: net.params().to_vec(),
            arch: net.layers().to_vec(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        Network::from_params(self.arch.clone(), self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path, &[self.to_record("target", String::new())])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut records = read_records(path)?;
        if records.len() != 1 {
            return Err(MiaError::Malformed(format!(
                "expected one model record, found {}",
                records.len()
            )));
        }
        let r = records.remove(0);
        let snap = ModelSnapshot {
            epoch: r.epoch,
            params: r.params,
            arch: r.arch,
        };
        snap.to_network()?;
        Ok(snap)
    }

    pub fn to_record(&self, tag: &str, meta: String) -> SnapshotRecord {
        SnapshotRecord {
            tag: tag.to_string(),
            epoch: self.epoch,
            meta,
            arch: self.arch.clone(),
            params: self.params.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotRecord {
    pub tag: String,
    pub epoch: u64,
    pub meta: String,
    pub arch: Vec<LayerSpec>,
    pub params: Vec<Tensor>,
}

pub fn encode_records(records: &[SnapshotRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, records.len() as u32);
    for r in records {
        put_str(&mut out, &r.tag);
        put_u64(&mut out, r.epoch);
        put_str(&mut out, &r.meta);
        put_u32(&mut out, r.arch.len() as u32);
        for layer in &r.arch {
            match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    out.push(0);
                    put_u64(&mut out, in_dim as u64);
                    put_u64(&mut out, out_dim as u64);
                }
                LayerSpec::Relu => out.push(1),
                LayerSpec::Dropout { keep_prob } => {
                    out.push(2);
                    out.extend_from_slice(&keep_prob.to_le_bytes());
                }
                LayerSpec::Conv1dRows {
                    rows,
                    width,
                    kernels,
                    kernel_width,
                    stride,
                } => {
                    out.push(3);
                    for v in [rows, width, kernels, kernel_width, stride] {
                        put_u64(&mut out, v as u64);
                    }
                }
            }
        }
        put_u32(&mut out, r.params.len() as u32);
        for t in &r.params {
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<SnapshotRecord>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(MiaError::Malformed("bad magic, not a snapshot file".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(MiaError::Malformed(format!(
            "unsupported snapshot version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = cur.u32()?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag = cur.string()?;
        let epoch = cur.u64()?;
        let meta = cur.string()?;
        let layers = cur.u32()?;
        let mut arch = Vec::with_capacity(layers as usize);
        for _ in 0..layers {
            let layer = match cur.take(1)?[0] {
                0 => LayerSpec::Dense {
                    in_dim: cur.usize()?,
                    out_dim: cur.usize()?,
                },
                1 => LayerSpec::Relu,
                2 => LayerSpec::Dropout { keep_prob: cur.f64()? },
                3 => LayerSpec::Conv1dRows {
                    rows: cur.usize()?,
                    width: cur.usize()?,
                    kernels: cur.usize()?,
                    kernel_width: cur.usize()?,
                    stride: cur.usize()?,
                },
                k => return Err(MiaError::Malformed(format!("unknown layer kind {k}"))),
            };
            arch.push(layer);
        }
        let tensors = cur.u32()?;
        let mut params = Vec::with_capacity(tensors as usize);
        for _ in 0..tensors {
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.usize()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= (bytes.len() - cur.pos) / 8).ok_or_else(|| {
                MiaError::Malformed(format!("tensor shape {shape:?} exceeds file size"))
            })?;
            let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(shape, data)?);
        }
        records.push(SnapshotRecord {
            tag,
            epoch,
            meta,
            arch,
            params,
        });
    }
    if cur.pos != bytes.len() {
        return Err(MiaError::Malformed(format!(
            "{} trailing bytes after last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(records)
}

pub fn write_records(path: impl AsRef<Path>, records: &[SnapshotRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_records(records))?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<SnapshotRecord>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_records(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MiaError::Malformed("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| MiaError::Malformed("dimension overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| MiaError::Malformed("string is not UTF-8".into()))
    }
}
