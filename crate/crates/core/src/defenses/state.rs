//! Cross-round defender memory and its on-disk snapshot.
//!
//! `defender_state.bin` layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "FSDS"
//! version  u32      1
//! count    u64      number of client histories
//! repeated count times, ascending client id:
//!   client_id  u64
//!   len        u64
//!   values     len x f64 (IEEE-754 binary64)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FSDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DefenderState {
    /// Accumulated update deltas per client id (Foolsgold).
    pub foolsgold_history: BTreeMap<usize, Vec<f64>>,
}

impl DefenderState {
    pub fn is_empty(&self) -> bool {
        self.foolsgold_history.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.foolsgold_history.len() as u64).to_le_bytes());
        for (&id, values) in &self.foolsgold_history {
            out.extend_from_slice(&(id as u64).to_le_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(4)? != MAGIC {
            return Err(Error::StateFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::StateFormat(format!("unsupported version {version}")));
        }
        let count = cursor.u64()?;
        let mut foolsgold_history = BTreeMap::new();
        for _ in 0..count {
            let id = cursor.u64()? as usize;
            let len = cursor.u64()? as usize;
            let values = (0..len)
                .map(|_| {
                    Ok(f64::from_le_bytes(
                        cursor.take(8)?.try_into().expect("8 bytes"),
                    ))
                })
                .collect::<Result<Vec<f64>>>()?;
            foolsgold_history.insert(id, values);
        }
        if cursor.pos != bytes.len() {
            return Err(Error::StateFormat("trailing bytes".into()));
        }
        Ok(Self { foolsgold_history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::StateFormat("truncated".into()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
