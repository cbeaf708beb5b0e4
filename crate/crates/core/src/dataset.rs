//! Binary grid dataset files.
//!
//! Layout: 8-byte magic `SBSPGRID`, version byte, grid side `n` byte,
//! little-endian `u32` record count, then one record per grid: a length byte
//! followed by that many little-endian bytes of the cell mask (bit
//! `ring * n + row`).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{OccupancyGrid, SensorGeometry};

pub const MAGIC: &[u8; 8] = b"SBSPGRID";
pub const VERSION: u8 = 1;

fn mask_bytes(n: usize) -> usize {
    (n * n).div_ceil(8)
}

pub fn write_dataset<W: Write>(mut out: W, grids: &[OccupancyGrid], geometry: &SensorGeometry) -> Result<()> {
    let n = geometry.n();
    let count = u32::try_from(grids.len()).map_err(|_| Error::contract("too many grids for one file"))?;
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION, n as u8])?;
    out.write_all(&count.to_le_bytes())?;
    let len = mask_bytes(n);
    for g in grids {
        if g.n() != n {
            return Err(Error::contract(format!("grid of side {} in a {n}x{n} dataset", g.n())));
        }
        out.write_all(&[len as u8])?;
        out.write_all(&g.mask().to_le_bytes()[..len])?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R, geometry: &SensorGeometry) -> Result<Vec<OccupancyGrid>> {
    let bad = |reason: String| Error::Corrupt {
        path: "<dataset>".into(),
        reason,
    };
    let mut header = [0u8; 14];
    input
        .read_exact(&mut header)
        .map_err(|e| bad(format!("short header: {e}")))?;
    if &header[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    if header[8] != VERSION {
        return Err(bad(format!("unsupported version {}", header[8])));
    }
    let n = header[9] as usize;
    if n != geometry.n() {
        return Err(bad(format!("dataset grid side {n}, geometry expects {}", geometry.n())));
    }
    let count = u32::from_le_bytes(header[10..14].try_into().expect("4 bytes")) as usize;
    let cells = n * n;
    let mut grids = Vec::with_capacity(count);
    for i in 0..count {
        let mut len = [0u8; 1];
        input
            .read_exact(&mut len)
            .map_err(|_| bad(format!("truncated at record {i}")))?;
        let len = len[0] as usize;
        if len == 0 || len > 8 {
            return Err(bad(format!("record {i} has length {len}")));
        }
        let mut buf = [0u8; 8];
        input
            .read_exact(&mut buf[..len])
            .map_err(|_| bad(format!("truncated at record {i}")))?;
        let mask = u64::from_le_bytes(buf);
        if cells < 64 && mask >> cells != 0 {
            return Err(bad(format!("record {i} sets bits beyond {cells} cells")));
        }
        grids.push(OccupancyGrid::from_mask(mask, *geometry));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last record".into()));
    }
    Ok(grids)
}

pub fn save_dataset(path: &Path, grids: &[OccupancyGrid], geometry: &SensorGeometry) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + grids.len() * 5);
    write_dataset(&mut buf, grids, geometry)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path, geometry: &SensorGeometry) -> Result<Vec<OccupancyGrid>> {
    let bytes = std::fs::read(path)?;
    read_dataset(bytes.as_slice(), geometry).map_err(|e| match e {
        Error::Corrupt { reason, .. } => Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}
