//! Binary grid container: magic, edge, level, slot count, feature width,
//! keys, features and occupancy, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{SparseGrid, VoxelKey};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPGRID01";

pub fn write_grid_to(w: &mut impl Write, grid: &SparseGrid) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&grid.edge.to_le_bytes())?;
    w.write_all(&grid.level.to_le_bytes())?;
    w.write_all(&(grid.len() as u64).to_le_bytes())?;
    w.write_all(&(grid.width as u64).to_le_bytes())?;
    for k in grid.keys() {
        for c in [k.i, k.j, k.k] {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    for v in grid.features.iter().chain(&grid.occupancy) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::parse(what, format!("truncated grid: {e}")))?;
    Ok(b)
}

pub fn read_grid_from(r: &mut impl Read, what: &str) -> Result<SparseGrid> {
    if &take::<8>(r, what)? != MAGIC {
        return Err(Error::parse(what, "not a grid file"));
    }
    let edge = f64::from_le_bytes(take(r, what)?);
    let level = u32::from_le_bytes(take(r, what)?);
    let n = u64::from_le_bytes(take(r, what)?) as usize;
    let width = u64::from_le_bytes(take(r, what)?) as usize;
    let mut keys = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let i = i32::from_le_bytes(take(r, what)?);
        let j = i32::from_le_bytes(take(r, what)?);
        let k = i32::from_le_bytes(take(r, what)?);
        keys.push(VoxelKey::new(i, j, k));
    }
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        (0..count)
            .map(|_| Ok(f64::from_le_bytes(take(r, what)?)))
            .collect()
    };
    let features = read_f64s(n * width)?;
    let occupancy = read_f64s(n)?;
    SparseGrid::from_parts(edge, level, width, keys, features, occupancy)
}

pub fn write_grid(grid: &SparseGrid, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_grid_to(&mut w, grid)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<SparseGrid> {
    let f = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    read_grid_from(&mut std::io::BufReader::new(f), &path.display().to_string())
}
