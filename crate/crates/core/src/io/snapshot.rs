//! Binary snapshot files.
//!
//! Layout, all little-endian:
//! `b"DOSN"`, version `u32`, `nx u32`, `ny u32`, field count `u32`, time `f64`,
//! then per field a staggering byte, a `u16` name length and the UTF-8 name,
//! then every field's `nx * ny` values as `f64` in header order.
//! Values are stored bit-exactly, so a round trip is lossless.

use std::path::Path;

use thiserror::Error;

use crate::dyncore::{ModelState, LEAF_ETA, LEAF_T, LEAF_U, LEAF_V};
use crate::grid::{Field, GridError, GridSpec, Staggering};

pub const MAGIC: [u8; 4] = *b"DOSN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported snapshot version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated snapshot: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after snapshot payload")]
    Trailing(usize),
    #[error("snapshot shape {found:?} does not match grid {expected:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("malformed snapshot header: {0}")]
    Header(String),
    #[error("snapshot lacks field '{0}'")]
    MissingField(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn stag_code(s: Staggering) -> u8 {
    match s {
        Staggering::Center => 0,
        Staggering::UFace => 1,
        Staggering::VFace => 2,
        Staggering::Corner => 3,
    }
}

fn stag_from(c: u8) -> Option<Staggering> {
    Some(match c {
        0 => Staggering::Center,
        1 => Staggering::UFace,
        2 => Staggering::VFace,
        3 => Staggering::Corner,
        _ => return None,
    })
}

/// Named fields on one grid shape at one model time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub nx: usize,
    pub ny: usize,
    pub fields: Vec<(String, Field)>,
}

impl Snapshot {
    pub fn from_state(s: &ModelState) -> Self {
        Snapshot {
            time: s.time,
            nx: s.u.nx(),
            ny: s.u.ny(),
            fields: s
                .fields()
                .into_iter()
                .map(|(n, f)| (n.to_string(), f.clone()))
                .collect(),
        }
    }

    pub fn field(&self, name: &str) -> Result<&Field, SnapshotError> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| SnapshotError::MissingField(name.to_string()))
    }

    /// Model state on `grid`; the shape and staggerings must match.
    pub fn to_state(&self, grid: &GridSpec) -> Result<ModelState, SnapshotError> {
        if (self.nx, self.ny) != (grid.nx, grid.ny) {
            return Err(SnapshotError::Shape {
                expected: (grid.nx, grid.ny),
                found: (self.nx, self.ny),
            });
        }
        let state = ModelState {
            u: self.field(LEAF_U)?.clone(),
            v: self.field(LEAF_V)?.clone(),
            eta: self.field(LEAF_ETA)?.clone(),
            t: self.field(LEAF_T)?.clone(),
            time: self.time,
        };
        for ((_, f), want) in state.fields().into_iter().zip([
            Staggering::UFace,
            Staggering::VFace,
            Staggering::Center,
            Staggering::Center,
        ]) {
            if f.staggering() != want {
                return Err(GridError::StaggeringMismatch {
                    left: want,
                    right: f.staggering(),
                }
                .into());
            }
        }
        Ok(state)
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.nx * self.ny;
        let mut out = Vec::with_capacity(32 + self.fields.len() * (16 + 8 * n));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.nx as u32).to_le_bytes());
        out.extend_from_slice(&(self.ny as u32).to_le_bytes());
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.time.to_le_bytes());
        for (name, f) in &self.fields {
            out.push(stag_code(f.staggering()));
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        for (_, f) in &self.fields {
            for x in f.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(SnapshotError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SnapshotError::Version(version));
        }
        let nx = r.u32()? as usize;
        let ny = r.u32()? as usize;
        let count = r.u32()? as usize;
        let time = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if nx == 0 || ny == 0 {
            return Err(SnapshotError::Header(format!("empty shape {nx}x{ny}")));
        }
        let mut header = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let code = r.take(1)?[0];
            let stag = stag_from(code)
                .ok_or_else(|| SnapshotError::Header(format!("unknown staggering code {code}")))?;
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| SnapshotError::Header("field name is not UTF-8".into()))?
                .to_string();
            header.push((name, stag));
        }
        let n = nx * ny;
        let expected = r.pos + count * n * 8;
        if bytes.len() < expected {
            return Err(SnapshotError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let mut fields = Vec::with_capacity(count);
        for (name, stag) in header {
            let data = r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            fields.push((name, Field::from_vec(nx, ny, stag, data)?));
        }
        if r.pos != bytes.len() {
            return Err(SnapshotError::Trailing(bytes.len() - r.pos));
        }
        Ok(Snapshot { time, nx, ny, fields })
    }

    pub fn bit_eq(&self, other: &Snapshot) -> bool {
        self.time.to_bits() == other.time.to_bits()
            && (self.nx, self.ny) == (other.nx, other.ny)
            && self.fields.len() == other.fields.len()
            && self
                .fields
                .iter()
                .zip(&other.fields)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos + k;
        if end > self.bytes.len() {
            return Err(SnapshotError::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<(), SnapshotError> {
    std::fs::write(path, snap.encode())?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, SnapshotError> {
    Snapshot::decode(&std::fs::read(path)?)
}

pub fn write_state(path: &Path, state: &ModelState) -> Result<(), SnapshotError> {
    write_snapshot(path, &Snapshot::from_state(state))
}

pub fn read_state(path: &Path, grid: &GridSpec) -> Result<ModelState, SnapshotError> {
    read_snapshot(path)?.to_state(grid)
}
