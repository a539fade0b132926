//! Raw float snapshot files shared by grids, planes and debug volumes.
//!
//! Layout (little endian): 4-byte magic, `u32` version, three `u32`
//! dimensions, six `f32` header values (a bounding box for volumes), then
//! the payload as consecutive `f32` planes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub dims: [u32; 3],
    pub extra: [f32; 6],
}

impl SnapshotHeader {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn write_snapshot(path: &Path, header: &SnapshotHeader, planes: &[&[f32]]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&header.magic)?;
    put(&header.version.to_le_bytes())?;
    for d in header.dims {
        put(&d.to_le_bytes())?;
    }
    for v in header.extra {
        put(&v.to_le_bytes())?;
    }
    let n = header.element_count();
    for plane in planes {
        if plane.len() != n {
            return Err(Error::Argument(format!(
                "snapshot plane has {} values, header expects {n}",
                plane.len()
            )));
        }
        let mut buf = Vec::with_capacity(n * 4);
        for v in plane.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a snapshot with `plane_count` payload planes, checking the magic.
pub fn read_snapshot(
    path: &Path,
    magic: [u8; 4],
    plane_count: usize,
) -> Result<(SnapshotHeader, Vec<Vec<f32>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut word = [0u8; 4];
    let mut next = |r: &mut BufReader<File>| -> Result<[u8; 4]> {
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        Ok(word)
    };
    let got_magic = next(&mut r)?;
    if got_magic != magic {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            got_magic
        )));
    }
    let version = u32::from_le_bytes(next(&mut r)?);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        *d = u32::from_le_bytes(next(&mut r)?);
    }
    let mut extra = [0f32; 6];
    for e in extra.iter_mut() {
        *e = f32::from_le_bytes(next(&mut r)?);
    }
    let header = SnapshotHeader {
        magic,
        version,
        dims,
        extra,
    };
    let n = header.element_count();
    let mut planes = Vec::with_capacity(plane_count);
    for _ in 0..plane_count {
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
        planes.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    Ok((header, planes))
}
