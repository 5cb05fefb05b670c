//! MVOL: little-endian volume container.
//!
//! Layout: magic `MVOL`, u32 version (=1), u32 dims[3], u32 channels,
//! f32 spacing[3], then channels x N f32 values in x-fastest order.
//! NaN encodes a missing entry; in memory the mask is authoritative and
//! masked values are stored as 0.

use crate::error::{Error, Result};
use crate::geometry::VolumeGrid;
use crate::scalar::{cst, Real};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MVOL";
const VERSION: u32 = 1;

pub fn write_mvol<T: Real>(path: &Path, vol: &VolumeGrid<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for d in vol.dims() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u32::<LittleEndian>(vol.channels() as u32)?;
    for s in vol.spacing() {
        w.write_f32::<LittleEndian>(s.to_f32().unwrap_or(1.0))?;
    }
    let n = vol.len();
    for d in 0..vol.channels() {
        for j in 0..n {
            let x = if vol.is_missing(j, d) {
                f32::NAN
            } else {
                vol.value(j, d).to_f32().unwrap_or(f32::NAN)
            };
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_mvol<T: Real>(path: &Path) -> Result<VolumeGrid<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not an MVOL file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MVOL version {version}")));
    }
    let dims = [
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
    ];
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let spacing = [
        cst::<T>(r.read_f32::<LittleEndian>()? as f64),
        cst::<T>(r.read_f32::<LittleEndian>()? as f64),
        cst::<T>(r.read_f32::<LittleEndian>()? as f64),
    ];
    let n = dims[0] * dims[1] * dims[2];
    let total = channels
        .checked_mul(n)
        .ok_or_else(|| Error::Format("MVOL size overflow".into()))?;
    let mut values = Vec::with_capacity(total);
    let mut missing = vec![false; total];
    let mut any_missing = false;
    for i in 0..total {
        let x = r.read_f32::<LittleEndian>()?;
        if x.is_nan() {
            missing[i] = true;
            any_missing = true;
            values.push(T::zero());
        } else {
            values.push(cst::<T>(x as f64));
        }
    }
    VolumeGrid::new(
        dims,
        spacing,
        channels,
        values,
        any_missing.then_some(missing),
    )
}
