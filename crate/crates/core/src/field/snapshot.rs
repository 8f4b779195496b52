//! Binary field snapshots (`.dfld`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "DFLD"  version:u32
//! payload:
//!   n:u32 m:u32 d:u32 flags:u32          flags bit 0 = cutoff present
//!   horizon:f64 margin:f64 cutoff:f64 problem_hash:u64
//!   n x (min:f64 max:f64 count:u64)
//!   slice_count:u64
//!   slice_count x (t:f64 has_z:u32 reserved:u32 u:[f64; nodes*m] z:[f64; nodes*m*d]?)
//! crc32(payload):u32
//! ```

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{Axis, BuildMeta, DecouplingFieldApprox, FieldSlice, GridError, SpatialGrid};

pub const MAGIC: &[u8; 4] = b"DFLD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a field snapshot (bad magic)")]
    Magic,
    #[error("unsupported snapshot version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated snapshot: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum failure: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid grid in snapshot: {0}")]
    Grid(#[from] GridError),
    #[error("invalid snapshot header: {0}")]
    Header(String),
}

pub fn write_snapshot(field: &DecouplingFieldApprox) -> Vec<u8> {
    let mut p = Vec::new();
    let put_u32 = |p: &mut Vec<u8>, v: u32| p.extend_from_slice(&v.to_le_bytes());
    let put_u64 = |p: &mut Vec<u8>, v: u64| p.extend_from_slice(&v.to_le_bytes());
    let put_f64 = |p: &mut Vec<u8>, v: f64| p.extend_from_slice(&v.to_le_bytes());
    put_u32(&mut p, field.n as u32);
    put_u32(&mut p, field.m as u32);
    put_u32(&mut p, field.d as u32);
    put_u32(&mut p, u32::from(field.meta.cutoff.is_some()));
    put_f64(&mut p, field.horizon);
    put_f64(&mut p, field.meta.margin);
    put_f64(&mut p, field.meta.cutoff.unwrap_or(0.0));
    put_u64(&mut p, field.problem_hash);
    for a in field.grid.axes() {
        put_f64(&mut p, a.min);
        put_f64(&mut p, a.max);
        put_u64(&mut p, a.count as u64);
    }
    put_u64(&mut p, field.slices.len() as u64);
    for s in &field.slices {
        put_f64(&mut p, s.t);
        put_u32(&mut p, u32::from(s.z().is_some()));
        put_u32(&mut p, 0);
        for &v in s.u_values() {
            put_f64(&mut p, v);
        }
        if let Some(z) = s.z_values() {
            for &v in z {
                put_f64(&mut p, v);
            }
        }
    }
    let crc = crc32fast::hash(&p);
    let mut out = Vec::with_capacity(p.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&p);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    total: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], SnapshotError> {
        if self.pos + k > self.buf.len() {
            return Err(SnapshotError::Truncated {
                needed: self.pos + k,
                have: self.total,
            });
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, SnapshotError> {
        let bytes = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| SnapshotError::Header("value count overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_snapshot(bytes: &[u8]) -> Result<DecouplingFieldApprox, SnapshotError> {
    if bytes.len() < 8 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            SnapshotError::Magic
        } else {
            SnapshotError::Truncated {
                needed: 8,
                have: bytes.len(),
            }
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(SnapshotError::Magic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(SnapshotError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    // Walk the layout once to learn the expected length, so truncation is
    // told apart from corruption before the checksum is compared.
    let body = &bytes[8..];
    let mut c = Cursor {
        buf: body,
        pos: 0,
        total: bytes.len(),
    };
    let n = c.u32()? as usize;
    let m = c.u32()? as usize;
    let d = c.u32()? as usize;
    let flags = c.u32()?;
    let horizon = c.f64()?;
    let margin = c.f64()?;
    let cutoff = c.f64()?;
    let problem_hash = c.u64()?;
    if n == 0 || n > 3 || m == 0 || d == 0 {
        return Err(SnapshotError::Header(format!(
            "dimensions n={n} m={m} d={d}"
        )));
    }
    let mut axes = Vec::with_capacity(n);
    for _ in 0..n {
        let (min, max, count) = (c.f64()?, c.f64()?, c.u64()? as usize);
        axes.push(Axis::new(min, max, count));
    }
    let grid = Arc::new(SpatialGrid::new(axes)?);
    let count = c.u64()? as usize;
    let nodes = grid.len();
    let mut raw = Vec::new();
    for _ in 0..count.min(body.len()) {
        let t = c.f64()?;
        let has_z = c.u32()? != 0;
        let _reserved = c.u32()?;
        let u = c.f64s(nodes * m)?;
        let z = if has_z {
            Some(c.f64s(nodes * m * d)?)
        } else {
            None
        };
        raw.push((t, u, z));
    }
    if raw.len() != count {
        return Err(SnapshotError::Header(format!("slice count {count}")));
    }
    let payload_len = c.pos;
    let stored = c.u32()?;
    let computed = crc32fast::hash(&body[..payload_len]);
    if stored != computed {
        return Err(SnapshotError::Checksum { stored, computed });
    }
    if count == 0 {
        return Err(SnapshotError::Header("no slices".into()));
    }
    let slices = raw
        .into_iter()
        .map(|(t, u, z)| FieldSlice::new(t, grid.clone(), m, d, u, z))
        .collect();
    Ok(DecouplingFieldApprox {
        n,
        m,
        d,
        horizon,
        problem_hash,
        grid,
        slices,
        meta: BuildMeta {
            margin,
            cutoff: (flags & 1 == 1).then_some(cutoff),
        },
    })
}

pub fn save(field: &DecouplingFieldApprox, path: impl AsRef<Path>) -> Result<(), SnapshotError> {
    fs::write(path, write_snapshot(field))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DecouplingFieldApprox, SnapshotError> {
    read_snapshot(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_field() -> DecouplingFieldApprox {
        let grid = Arc::new(
            SpatialGrid::new(vec![Axis::new(-1.0, 1.0, 5), Axis::new(0.0, 2.0, 3)]).unwrap(),
        );
        let top = FieldSlice::from_fn(1.0, grid.clone(), 2, 1, |x| vec![x[0], x[1].sin()]);
        let z: Vec<f64> = (0..grid.len() * 2).map(|k| k as f64 * 0.1).collect();
        let next = FieldSlice::new(0.5, grid.clone(), 2, 1, top.u_values().to_vec(), Some(z));
        DecouplingFieldApprox {
            n: 2,
            m: 2,
            d: 1,
            horizon: 1.0,
            problem_hash: 0xdead_beef,
            grid,
            slices: vec![top, next],
            meta: BuildMeta {
                margin: 0.1,
                cutoff: Some(4.0),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = sample_field();
        let bytes = write_snapshot(&f);
        let back = read_snapshot(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(write_snapshot(&back), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.dfld");
        save(&f, &path).unwrap();
        assert_eq!(load(&path).unwrap(), f);
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = write_snapshot(&sample_field());
        let k = bytes.len() - 20;
        bytes[k] ^= 0x40;
        assert!(matches!(
            read_snapshot(&bytes),
            Err(SnapshotError::Checksum { .. })
        ));
    }

    #[test]
    fn header_only_is_truncated() {
        let bytes = write_snapshot(&sample_field());
        // magic, version, fixed header, two axes, slice count
        let header = 8 + 16 + 32 + 2 * 24 + 8;
        assert!(matches!(
            read_snapshot(&bytes[..header]),
            Err(SnapshotError::Truncated { .. })
        ));
        assert!(matches!(
            read_snapshot(&bytes[..bytes.len() - 1]),
            Err(SnapshotError::Truncated { .. })
        ));
    }

    #[test]
    fn version_and_magic() {
        let mut bytes = write_snapshot(&sample_field());
        bytes[4] = 9;
        assert!(matches!(
            read_snapshot(&bytes),
            Err(SnapshotError::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(read_snapshot(&bytes), Err(SnapshotError::Magic)));
    }
}
