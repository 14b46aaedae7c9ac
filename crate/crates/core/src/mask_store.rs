//! Sparse checkpoints: only the unmasked scalars, as `(row, col, value)`.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! "IDMK"            4 bytes magic
//! version           u32 (= 1)
//! block count       u32
//! per block:
//!   name length     u32
//!   name            UTF-8 bytes
//!   entry count     u32
//!   entries         count × (row u32, col u32, value f64 bits)
//! ```
//!
//! Blocks follow registry order and tensors without entries are omitted.
//! Entries are strictly increasing in `(row, col)`. Vectors use
//! `row = offset, col = 0`. Each entry costs exactly 16 bytes.

use crate::codec::{put_f64, put_str, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::model::{Model, ParamId};
use crate::selection::MaskSet;
use std::fmt::Write as _;

pub const MAGIC: &[u8; 4] = b"IDMK";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 12;
pub const ENTRY_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: u32,
    pub col: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCheckpoint {
    pub version: u32,
    pub blocks: Vec<Block>,
}

impl SparseCheckpoint {
    /// Collects the values of `mask` from `model`.
    pub fn from_model(model: &Model, mask: &MaskSet) -> Result<Self> {
        let mut blocks: Vec<Block> = Vec::new();
        let mut current: Option<usize> = None;
        for id in mask.ids() {
            let Some(param) = model.params().get(id.tensor) else {
                return Err(Error::Usage(format!("{id:?} addresses no tensor")));
            };
            if id.offset >= param.value.len() {
                return Err(Error::Usage(format!(
                    "{id:?} is outside '{}' ({} scalars)",
                    param.name,
                    param.value.len()
                )));
            }
            if current != Some(id.tensor) {
                blocks.push(Block {
                    name: param.name.clone(),
                    entries: Vec::new(),
                });
                current = Some(id.tensor);
            }
            let cols = param.value.cols();
            let (row, col) = if param.value.rank() >= 2 {
                (id.offset / cols, id.offset % cols)
            } else {
                (id.offset, 0)
            };
            blocks.last_mut().unwrap().entries.push(Entry {
                row: to_u32(row, "row index")?,
                col: to_u32(col, "column index")?,
                value: model.value(id),
            });
        }
        Ok(SparseCheckpoint {
            version: VERSION,
            blocks,
        })
    }

    pub fn entry_count(&self) -> usize {
        self.blocks.iter().map(|b| b.entries.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.entry_count() * ENTRY_BYTES);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_u32(&mut out, to_u32(self.blocks.len(), "block count")?);
        for block in &self.blocks {
            put_str(&mut out, &block.name)?;
            put_u32(&mut out, to_u32(block.entries.len(), "entry count")?);
            for e in &block.entries {
                put_u32(&mut out, e.row);
                put_u32(&mut out, e.col);
                put_f64(&mut out, e.value);
            }
        }
        Ok(out)
    }

    /// Overwrites the addressed scalars of `model`; everything else is kept.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        // Validate everything before touching the model.
        let mut writes: Vec<(ParamId, f64)> = Vec::with_capacity(self.entry_count());
        for block in &self.blocks {
            let tensor = model.find(&block.name).ok_or_else(|| Error::Apply {
                tensor: block.name.clone(),
                index: None,
                message: "no such tensor in the model".into(),
            })?;
            let value = &model.params()[tensor].value;
            let (rows, cols) = if value.rank() >= 2 {
                (value.shape()[0], value.shape()[1])
            } else {
                (value.len(), 1)
            };
            for e in &block.entries {
                let (r, c) = (e.row as usize, e.col as usize);
                if r >= rows || c >= cols {
                    return Err(Error::Apply {
                        tensor: block.name.clone(),
                        index: Some((e.row.into(), e.col.into())),
                        message: format!("out of range for shape {:?}", value.shape()),
                    });
                }
                writes.push((ParamId::new(tensor, r * cols + c), e.value));
            }
        }
        for (id, v) in writes {
            model.param_mut(id.tensor).value.data_mut()[id.offset] = v;
        }
        Ok(())
    }

    /// Human-readable dump: `tensor,row,col,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tensor,row,col,value\n");
        for b in &self.blocks {
            for e in &b.entries {
                let _ = writeln!(out, "{},{},{},{}", b.name, e.row, e.col, e.value);
            }
        }
        out
    }
}

/// Canonical sparse encoding of `model` restricted to `mask`.
pub fn encode(model: &Model, mask: &MaskSet) -> Result<Vec<u8>> {
    SparseCheckpoint::from_model(model, mask)?.to_bytes()
}

/// Parses and validates a sparse checkpoint stream.
pub fn decode(bytes: &[u8]) -> Result<SparseCheckpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count.min(r.remaining() / 8));
    let mut names = std::collections::BTreeSet::new();
    for _ in 0..count {
        let block_at = r.offset();
        let name = r.string("block name")?;
        if !names.insert(name.clone()) {
            return Err(Error::Format {
                offset: block_at,
                block: Some(name),
                message: "duplicate block".into(),
            });
        }
        let n = r.u32("entry count")? as usize;
        if n == 0 {
            return Err(Error::Format {
                offset: r.offset() - 4,
                block: Some(name),
                message: "empty block".into(),
            });
        }
        let mut entries = Vec::with_capacity(n.min(r.remaining() / ENTRY_BYTES));
        let mut prev: Option<(u32, u32)> = None;
        for _ in 0..n {
            let at = r.offset();
            let with_block = |e: Error| match e {
                Error::Format {
                    offset, message, ..
                } => Error::Format {
                    offset,
                    block: Some(name.clone()),
                    message,
                },
                other => other,
            };
            let row = r.u32("entry").map_err(with_block)?;
            let col = r.u32("entry").map_err(with_block)?;
            let value = r.f64("entry").map_err(with_block)?;
            if let Some(p) = prev {
                if (row, col) <= p {
                    let message = if (row, col) == p {
                        format!("duplicate entry ({row}, {col})")
                    } else {
                        format!("entry ({row}, {col}) out of order after {p:?}")
                    };
                    return Err(Error::Format {
                        offset: at,
                        block: Some(name),
                        message,
                    });
                }
            }
            prev = Some((row, col));
            entries.push(Entry { row, col, value });
        }
        blocks.push(Block { name, entries });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes"));
    }
    Ok(SparseCheckpoint { version, blocks })
}

/// Loads `bytes` onto a copy of `pretrained`.
pub fn apply(bytes: &[u8], pretrained: &Model) -> Result<Model> {
    let ckpt = decode(bytes)?;
    let mut model = pretrained.clone();
    ckpt.apply(&mut model)?;
    Ok(model)
}
