//! A frozen tier that keeps KV pairs in a file.
//!
//! Layout, all little-endian: the magic `KVFSPILL`, then `u32` version,
//! layers, heads and head_dim. Fixed-size records follow, each a `u64`
//! position (`u64::MAX` marks a free slot) and then the keys and the values
//! as `f64`, layer-major. Freed slots are reused.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use kvfreeze_core::{Error, FrozenTier, KvPair, KvShape};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"KVFSPILL";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;
const FREE: u64 = u64::MAX;

#[derive(Debug)]
pub struct SpillTier {
    file: File,
    shape: KvShape,
    slots: BTreeMap<usize, u64>,
    free: Vec<u64>,
    next_slot: u64,
}

fn tier_err(e: std::io::Error) -> Error {
    Error::Tier(format!("spill file: {e}"))
}

fn record_len(shape: KvShape) -> u64 {
    8 + 16 * shape.len() as u64
}

fn encode(position: u64, kv: Option<&KvPair>, shape: KvShape) -> Vec<u8> {
    let mut buf = Vec::with_capacity(record_len(shape) as usize);
    buf.extend_from_slice(&position.to_le_bytes());
    match kv {
        Some(kv) => {
            for x in kv.keys.iter().chain(&kv.values) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        None => buf.resize(record_len(shape) as usize, 0),
    }
    buf
}

fn decode(buf: &[u8], shape: KvShape) -> (u64, KvPair) {
    let position = u64::from_le_bytes(buf[..8].try_into().unwrap());
    let mut floats = buf[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let keys = floats.by_ref().take(shape.len()).collect();
    let values = floats.collect();
    (position, KvPair { keys, values })
}

impl SpillTier {
    /// Creates (or truncates) the spill file.
    pub fn create(path: &Path, shape: KvShape) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            shape.layers as u32,
            shape.heads as u32,
            shape.head_dim as u32,
        ] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&header)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            file,
            shape,
            slots: BTreeMap::new(),
            free: Vec::new(),
            next_slot: 0,
        })
    }

    fn offset(&self, slot: u64) -> u64 {
        HEADER_LEN + slot * record_len(self.shape)
    }

    fn write_slot(&mut self, slot: u64, bytes: &[u8]) -> std::io::Result<()> {
        self.file.seek(SeekFrom::Start(self.offset(slot)))?;
        self.file.write_all(bytes)
    }

    fn read_slot(&self, slot: u64) -> std::io::Result<Vec<u8>> {
        let mut f = &self.file;
        f.seek(SeekFrom::Start(self.offset(slot)))?;
        let mut buf = vec![0; record_len(self.shape) as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn load(&self, position: usize) -> kvfreeze_core::Result<(u64, KvPair)> {
        let slot = *self
            .slots
            .get(&position)
            .ok_or_else(|| Error::Tier(format!("position {position} not spilled")))?;
        let (stored, kv) = decode(&self.read_slot(slot).map_err(tier_err)?, self.shape);
        if stored != position as u64 {
            return Err(Error::Tier(format!(
                "slot {slot} holds position {stored}, expected {position}"
            )));
        }
        Ok((slot, kv))
    }

    /// Bytes of the file, header included.
    pub fn file_len(&self) -> u64 {
        self.offset(self.next_slot)
    }
}

impl FrozenTier for SpillTier {
    fn stash(&mut self, position: usize, kv: KvPair) -> kvfreeze_core::Result<()> {
        if self.slots.contains_key(&position) {
            return Err(Error::Tier(format!("position {position} spilled twice")));
        }
        if kv.keys.len() != self.shape.len() || kv.values.len() != self.shape.len() {
            return Err(Error::Tier(format!(
                "position {position} has the wrong kv shape"
            )));
        }
        let slot = self.free.pop().unwrap_or_else(|| {
            self.next_slot += 1;
            self.next_slot - 1
        });
        self.write_slot(slot, &encode(position as u64, Some(&kv), self.shape))
            .map_err(tier_err)?;
        self.slots.insert(position, slot);
        Ok(())
    }

    fn fetch(&mut self, position: usize) -> kvfreeze_core::Result<KvPair> {
        let (slot, kv) = self.load(position)?;
        self.write_slot(slot, &FREE.to_le_bytes())
            .map_err(tier_err)?;
        self.slots.remove(&position);
        self.free.push(slot);
        Ok(kv)
    }

    fn peek(&self, position: usize) -> kvfreeze_core::Result<KvPair> {
        self.load(position).map(|(_, kv)| kv)
    }

    fn len(&self) -> usize {
        self.slots.len()
    }
}

/// Reads a spill file: its shape and every live record, in slot order.
pub fn read_spill(path: &Path) -> Result<(KvShape, Vec<(usize, KvPair)>)> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let bad = |reason: &str| HarnessError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: reason.into(),
    };
    if bytes.len() < HEADER_LEN as usize || &bytes[..8] != MAGIC {
        return Err(bad("not a spill file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(bad("unsupported version"));
    }
    let shape = KvShape::new(word(1) as usize, word(2) as usize, word(3) as usize);
    let body = &bytes[HEADER_LEN as usize..];
    let rec = record_len(shape) as usize;
    if body.len() % rec != 0 {
        return Err(bad("truncated record"));
    }
    Ok(body
        .chunks_exact(rec)
        .map(|c| decode(c, shape))
        .filter(|(p, _)| *p != FREE)
        .map(|(p, kv)| (p as usize, kv))
        .collect())
    .map(|records| (shape, records))
}
