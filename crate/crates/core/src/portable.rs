//! Portable binary files for parameters and importance maps.
//!
//! All integers and floats are little-endian; floats are stored as raw IEEE-754
//! bits so a write/read cycle is lossless. Layout of a file:
//!
//! ```text
//! file    := "MASP" version:u16 record_count:u32 record*
//! record  := kind:u8 scope:u8 name_len:u16 name:utf8
//!            [kind = 2: method:u8 samples_seen:u64 n_tasks:u32 task_samples:u64*n_tasks]
//!            n_segments:u32 segment* value_count:u64 value:f64*value_count
//! segment := layer_kind:u8 head_id:u32 index:u32 in_dim:u32 out_dim:u32 activation:u8
//! ```
//!
//! `kind` is 1 for a parameter vector and 2 for an importance map. `scope` is
//! 0 when every parameter is stored and 1 when only trunk entries are stored
//! (heads read back as zero). `layer_kind` is 0 for trunk, 1 for head;
//! `activation` is 0 for ReLU, 1 for Identity. Segment offsets follow from
//! their order. See `docs/weight-format.md`.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::importance::{Estimator, ImportanceMap};
use crate::nn::{Activation, FlatParams, HeadId, LayerId, ParamLayout, Segment};

pub const MAGIC: &[u8; 4] = b"MASP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    TrunkOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Params {
        name: String,
        scope: Scope,
        params: FlatParams,
    },
    Importance {
        name: String,
        scope: Scope,
        map: ImportanceMap,
    },
}

impl Record {
    pub fn name(&self) -> &str {
        match self {
            Record::Params { name, .. } | Record::Importance { name, .. } => name,
        }
    }

    /// Number of floats this record stores.
    pub fn stored_values(&self) -> usize {
        let (scope, v) = match self {
            Record::Params { scope, params, .. } => (*scope, params),
            Record::Importance { scope, map, .. } => (*scope, map.omega()),
        };
        match scope {
            Scope::All => v.len(),
            Scope::TrunkOnly => v.layout().trunk_len(),
        }
    }
}

fn put_layout(out: &mut Vec<u8>, layout: &ParamLayout) {
    out.extend_from_slice(&(layout.segments().len() as u32).to_le_bytes());
    for s in layout.segments() {
        let (kind, head, index) = match s.layer {
            LayerId::Trunk(i) => (0u8, 0u32, i as u32),
            LayerId::Head(h, i) => (1u8, h.0, i as u32),
        };
        out.push(kind);
        out.extend_from_slice(&head.to_le_bytes());
        out.extend_from_slice(&index.to_le_bytes());
        out.extend_from_slice(&(s.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(s.out_dim as u32).to_le_bytes());
        out.push(match s.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }
}

fn put_values(out: &mut Vec<u8>, v: &FlatParams, scope: Scope) {
    let mask = v.layout().trunk_mask();
    let stored: Vec<f64> = match scope {
        Scope::All => v.values().to_vec(),
        Scope::TrunkOnly => v
            .values()
            .iter()
            .zip(mask)
            .filter(|(_, &t)| t)
            .map(|(x, _)| *x)
            .collect(),
    };
    out.extend_from_slice(&(stored.len() as u64).to_le_bytes());
    for x in stored {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let (kind, scope, name) = match r {
            Record::Params { scope, name, .. } => (1u8, *scope, name),
            Record::Importance { scope, name, .. } => (2u8, *scope, name),
        };
        out.push(kind);
        out.push(match scope {
            Scope::All => 0,
            Scope::TrunkOnly => 1,
        });
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let values = match r {
            Record::Params { params, .. } => params,
            Record::Importance { map, .. } => {
                out.push(map.method().code());
                out.extend_from_slice(&map.samples_seen().to_le_bytes());
                let tasks = map.raw_task_samples();
                out.extend_from_slice(&(tasks.len() as u32).to_le_bytes());
                for t in tasks {
                    out.extend_from_slice(&t.to_le_bytes());
                }
                map.omega()
            }
        };
        put_layout(&mut out, values.layout());
        put_values(&mut out, values, scope);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {n} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn bad(&self, message: String) -> Error {
        Error::Parse {
            offset: self.pos,
            message,
        }
    }
}

fn read_layout(r: &mut Reader<'_>) -> Result<ParamLayout> {
    let n = r.u32("segment count")? as usize;
    let mut segments = Vec::with_capacity(n.min(1 << 16));
    let mut offset = 0;
    for _ in 0..n {
        let kind = r.u8("segment kind")?;
        let head = r.u32("head id")?;
        let index = r.u32("layer index")? as usize;
        let in_dim = r.u32("in_dim")? as usize;
        let out_dim = r.u32("out_dim")? as usize;
        let activation = match r.u8("activation")? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            a => return Err(r.bad(format!("unknown activation code {a}"))),
        };
        let layer = match kind {
            0 => LayerId::Trunk(index),
            1 => LayerId::Head(HeadId(head), index),
            k => return Err(r.bad(format!("unknown segment kind {k}"))),
        };
        let len = in_dim * out_dim + out_dim;
        segments.push(Segment {
            layer,
            offset,
            len,
            in_dim,
            out_dim,
            activation,
        });
        offset += len;
    }
    ParamLayout::new(segments)
}

fn read_values(r: &mut Reader<'_>, layout: Arc<ParamLayout>, scope: Scope) -> Result<FlatParams> {
    let count = r.u64("value count")? as usize;
    let want = match scope {
        Scope::All => layout.len(),
        Scope::TrunkOnly => layout.trunk_len(),
    };
    if count != want {
        return Err(r.bad(format!("layout needs {want} values, record has {count}")));
    }
    let raw = r.take(count * 8, "values")?;
    let stored = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let values = match scope {
        Scope::All => stored.collect(),
        Scope::TrunkOnly => {
            let mut v = vec![0.0; layout.len()];
            for (i, x) in layout
                .trunk_indices()
                .collect::<Vec<_>>()
                .into_iter()
                .zip(stored)
            {
                v[i] = x;
            }
            v
        }
    };
    FlatParams::new(values, layout)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected MASP".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let n = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..n {
        let kind = r.u8("record kind")?;
        let scope = match r.u8("scope")? {
            0 => Scope::All,
            1 => Scope::TrunkOnly,
            s => return Err(r.bad(format!("unknown scope {s}"))),
        };
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| r.bad("record name is not UTF-8".into()))?;
        match kind {
            1 => {
                let layout = Arc::new(read_layout(&mut r)?);
                let params = read_values(&mut r, layout, scope)?;
                records.push(Record::Params {
                    name,
                    scope,
                    params,
                });
            }
            2 => {
                let code = r.u8("method")?;
                let method = Estimator::from_code(code)
                    .ok_or_else(|| r.bad(format!("unknown estimator code {code}")))?;
                let seen = r.u64("samples_seen")?;
                let n_tasks = r.u32("task count")? as usize;
                let mut tasks = Vec::with_capacity(n_tasks.min(1 << 16));
                for _ in 0..n_tasks {
                    tasks.push(r.u64("task samples")?);
                }
                let layout = Arc::new(read_layout(&mut r)?);
                let omega = read_values(&mut r, layout, scope)?;
                let map = ImportanceMap::from_parts(method, omega, seen, tasks)?;
                records.push(Record::Importance { name, scope, map });
            }
            k => return Err(r.bad(format!("unknown record kind {k}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn write_file(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode(records))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_file(path: &Path) -> Result<Vec<Record>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
