//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic "MFNC" | u32 version | u32 len + architecture JSON
//! u32 tensor count
//! per tensor: u32 len + name | u8 dtype | u8 rank | rank × u64 dims | payload
//! u32 len + metadata JSON
//! ```
//!
//! Parameters keep their own names; batch-norm statistics are stored under
//! `buffer:<name>` and optimizer moments under `optim.first:<name>` and
//! `optim.second:<name>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::NetDescriptor;
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MFNC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

const BUFFER_PREFIX: &str = "buffer:";
const FIRST_PREFIX: &str = "optim.first:";
const SECOND_PREFIX: &str = "optim.second:";

/// Free-form run metadata stored alongside the tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub iteration: u64,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub dataset_mean: Option<[f64; 3]>,
    /// Names of frozen parameters.
    #[serde(default)]
    pub frozen: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaRecord {
    #[serde(flatten)]
    meta: CheckpointMeta,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: Option<NetDescriptor>,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        optimizer: Option<&OptimizerState>,
        mut meta: CheckpointMeta,
    ) -> Checkpoint {
        meta.frozen = net
            .params()
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| p.name.clone())
            .collect();
        Checkpoint {
            descriptor: net.descriptor().cloned(),
            params: net
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            buffers: net
                .buffers()
                .iter()
                .map(|b| (b.name.clone(), b.value.clone()))
                .collect(),
            optimizer: optimizer.cloned(),
            meta,
        }
    }

    /// Rebuild the network described by the checkpoint and copy every tensor in.
    pub fn build_network(&self) -> Result<Network> {
        let d = self.descriptor.as_ref().ok_or_else(|| {
            Error::format(
                "architecture",
                "checkpoint carries no architecture descriptor",
            )
        })?;
        let mut net = d.build(&mut SeededRng::new(0))?;
        self.restore_into(&mut net)?;
        Ok(net)
    }

    /// Copy all parameters, buffers and frozen flags into a network with the
    /// same registry. Every name must match.
    pub fn restore_into(&self, net: &mut Network) -> Result<()> {
        let expected: Vec<&str> = net.param_names().collect();
        if expected.len() != self.params.len()
            || expected.iter().any(|n| !self.params.contains_key(*n))
        {
            return Err(Error::format(
                "tensors",
                "parameter names do not match the network",
            ));
        }
        for (name, t) in &self.params {
            net.set_param(name, t.clone())?;
            net.set_trainable(name, !self.meta.frozen.contains(name))?;
        }
        for (name, t) in &self.buffers {
            let slot = net
                .buffer_mut(name)
                .ok_or_else(|| Error::format("tensors", format!("unknown buffer `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    fn records(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        out.extend(
            self.buffers
                .iter()
                .map(|(n, t)| (format!("{BUFFER_PREFIX}{n}"), t)),
        );
        if let Some(o) = &self.optimizer {
            out.extend(
                o.first
                    .iter()
                    .map(|(n, t)| (format!("{FIRST_PREFIX}{n}"), t)),
            );
            out.extend(
                o.second
                    .iter()
                    .map(|(n, t)| (format!("{SECOND_PREFIX}{n}"), t)),
            );
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let arch = match &self.descriptor {
            Some(d) => serde_json::to_vec(d).expect("descriptor serializes"),
            None => Vec::new(),
        };
        write_bytes(w, &arch)?;
        let records = self.records();
        w.write_all(&(records.len() as u32).to_le_bytes())?;
        for (name, t) in records {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&[DTYPE_F64, t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        let meta = MetaRecord {
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: o.kind,
                step: o.step,
            }),
        };
        write_bytes(w, &serde_json::to_vec(&meta).expect("metadata serializes"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let arch = r.bytes("architecture")?;
        let descriptor = if arch.is_empty() {
            None
        } else {
            Some(
                serde_json::from_slice(arch)
                    .map_err(|e| Error::format("architecture", e.to_string()))?,
            )
        };
        let count = r.u32("tensor count")?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for _ in 0..count {
            let name = std::str::from_utf8(r.bytes("tensor name")?)
                .map_err(|_| Error::format("tensor name", "not valid UTF-8"))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            let rank = r.take(1, "rank")?[0] as usize;
            if rank == 0 {
                return Err(Error::format("rank", format!("tensor `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dims")?;
                if d == 0 || d > u32::MAX as u64 {
                    return Err(Error::format(
                        "dims",
                        format!("tensor `{name}` has dimension {d}"),
                    ));
                }
                shape.push(d as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("dims", format!("tensor `{name}` is too large")))?;
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => r
                    .take(
                        len.checked_mul(8)
                            .ok_or_else(|| Error::format("payload", "too large"))?,
                        "payload",
                    )?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DTYPE_F32 => r
                    .take(
                        len.checked_mul(4)
                            .ok_or_else(|| Error::format("payload", "too large"))?,
                        "payload",
                    )?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                other => {
                    return Err(Error::format(
                        "dtype",
                        format!("unknown dtype code {other} for `{name}`"),
                    ))
                }
            };
            let t = Tensor::from_vec(shape, data)?;
            let (map, key) = if let Some(n) = name.strip_prefix(BUFFER_PREFIX) {
                (&mut buffers, n.to_string())
            } else if let Some(n) = name.strip_prefix(FIRST_PREFIX) {
                (&mut first, n.to_string())
            } else if let Some(n) = name.strip_prefix(SECOND_PREFIX) {
                (&mut second, n.to_string())
            } else {
                (&mut params, name.clone())
            };
            if map.insert(key, t).is_some() {
                return Err(Error::format(
                    "tensor name",
                    format!("duplicate tensor `{name}`"),
                ));
            }
        }
        let record: MetaRecord = serde_json::from_slice(r.bytes("metadata")?)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(Error::format("metadata", "trailing bytes after metadata"));
        }
        let optimizer = match record.optimizer {
            Some(h) => Some(OptimizerState {
                kind: h.kind,
                step: h.step,
                first,
                second,
            }),
            None if first.is_empty() && second.is_empty() => None,
            None => {
                return Err(Error::format(
                    "metadata",
                    "optimizer moments without optimizer header",
                ))
            }
        };
        Ok(Checkpoint {
            descriptor,
            params,
            buffers,
            optimizer,
            meta: record.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!("truncated at byte {}: need {n} more bytes", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn bytes(&mut self, field: &str) -> Result<&'a [u8]> {
        let n = self.u32(field)? as usize;
        self.take(n, field)
    }
}

pub fn save_checkpoint(
    net: &Network,
    optimizer: Option<&OptimizerState>,
    meta: CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    Checkpoint::from_network(net, optimizer, meta).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
