//! Minimal single-file NIfTI-1 (`.nii`) support.
//!
//! Reader accepts datatypes 4 (i16), 8 (i32), 16 (f32) and 64 (f64),
//! applies `scl_slope`/`scl_inter`, handles byte-swapped headers, and
//! treats a fourth dimension as channels. Everything else is rejected
//! with a clear error. The writer always emits f32 data.

use crate::error::{Error, Result};
use crate::geometry::VolumeGrid;
use crate::scalar::{cst, Real};
use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const HDR_SIZE: usize = 348;

struct Header {
    dims: [usize; 3],
    channels: usize,
    pixdim: [f32; 3],
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    swapped: bool,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < HDR_SIZE {
        return Err(Error::Format("NIfTI header truncated".into()));
    }
    let le_size = LittleEndian::read_i32(&buf[0..4]);
    let swapped = match le_size {
        348 => false,
        _ if BigEndian::read_i32(&buf[0..4]) == 348 => true,
        _ => return Err(Error::Format("not a NIfTI-1 file (sizeof_hdr != 348)".into())),
    };
    let magic = &buf[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Format(
            "only single-file NIfTI-1 (magic n+1) is supported".into(),
        ));
    }
    let rd_i16 = |off: usize| -> i16 {
        if swapped {
            BigEndian::read_i16(&buf[off..off + 2])
        } else {
            LittleEndian::read_i16(&buf[off..off + 2])
        }
    };
    let rd_f32 = |off: usize| -> f32 {
        if swapped {
            BigEndian::read_f32(&buf[off..off + 4])
        } else {
            LittleEndian::read_f32(&buf[off..off + 4])
        }
    };
    let ndim = rd_i16(40);
    if !(1..=4).contains(&ndim) {
        return Err(Error::Format(format!(
            "unsupported NIfTI dimensionality {ndim} (expected 1..4)"
        )));
    }
    let dim = |i: usize| rd_i16(40 + 2 * i).max(1) as usize;
    let dims = [dim(1), dim(2), dim(3)];
    let channels = if ndim == 4 { dim(4) } else { 1 };
    let pd = |i: usize| {
        let p = rd_f32(76 + 4 * i);
        if p > 0.0 {
            p
        } else {
            1.0
        }
    };
    let datatype = rd_i16(70);
    let vox_offset = rd_f32(108).max(HDR_SIZE as f32) as usize;
    let scl_slope = rd_f32(112);
    let scl_inter = rd_f32(116);
    Ok(Header {
        dims,
        channels,
        pixdim: [pd(1), pd(2), pd(3)],
        datatype,
        vox_offset,
        scl_slope,
        scl_inter,
        swapped,
    })
}

pub fn read_nifti<T: Real>(path: &Path) -> Result<VolumeGrid<T>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let hdr = parse_header(&bytes)?;
    let n = hdr.dims[0] * hdr.dims[1] * hdr.dims[2];
    let total = n * hdr.channels;
    let elem = match hdr.datatype {
        4 => 2,  // int16
        8 => 4,  // int32
        16 => 4, // float32
        64 => 8, // float64
        other => {
            return Err(Error::Format(format!(
                "unsupported NIfTI datatype {other}; accepted: 4 (i16), 8 (i32), 16 (f32), 64 (f64)"
            )))
        }
    };
    let data = bytes
        .get(hdr.vox_offset..hdr.vox_offset + total * elem)
        .ok_or_else(|| Error::Format("NIfTI data section truncated".into()))?;
    let slope = if hdr.scl_slope == 0.0 { 1.0 } else { hdr.scl_slope } as f64;
    let inter = hdr.scl_inter as f64;
    let raw = |i: usize| -> f64 {
        let off = i * elem;
        let chunk = &data[off..off + elem];
        match (hdr.datatype, hdr.swapped) {
            (4, false) => LittleEndian::read_i16(chunk) as f64,
            (4, true) => BigEndian::read_i16(chunk) as f64,
            (8, false) => LittleEndian::read_i32(chunk) as f64,
            (8, true) => BigEndian::read_i32(chunk) as f64,
            (16, false) => LittleEndian::read_f32(chunk) as f64,
            (16, true) => BigEndian::read_f32(chunk) as f64,
            (64, false) => LittleEndian::read_f64(chunk),
            (64, true) => BigEndian::read_f64(chunk),
            _ => unreachable!(),
        }
    };
    let mut values = Vec::with_capacity(total);
    let mut missing = vec![false; total];
    let mut any_missing = false;
    for i in 0..total {
        let x = raw(i) * slope + inter;
        if x.is_nan() {
            missing[i] = true;
            any_missing = true;
            values.push(T::zero());
        } else {
            values.push(cst::<T>(x));
        }
    }
    VolumeGrid::new(
        hdr.dims,
        [
            cst::<T>(hdr.pixdim[0] as f64),
            cst::<T>(hdr.pixdim[1] as f64),
            cst::<T>(hdr.pixdim[2] as f64),
        ],
        hdr.channels,
        values,
        any_missing.then_some(missing),
    )
}

/// Write a volume as single-file NIfTI-1, float32, identity scaling.
pub fn write_nifti<T: Real>(path: &Path, vol: &VolumeGrid<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut hdr = [0u8; 352]; // header + 4 pad bytes, data at 352
    LittleEndian::write_i32(&mut hdr[0..4], 348);
    let ndim: i16 = if vol.channels() > 1 { 4 } else { 3 };
    LittleEndian::write_i16(&mut hdr[40..42], ndim);
    let dims = vol.dims();
    for i in 0..3 {
        LittleEndian::write_i16(&mut hdr[42 + 2 * i..44 + 2 * i], dims[i] as i16);
    }
    LittleEndian::write_i16(&mut hdr[48..50], vol.channels() as i16);
    for i in 4..7 {
        LittleEndian::write_i16(&mut hdr[42 + 2 * i..44 + 2 * i], 1);
    }
    LittleEndian::write_i16(&mut hdr[70..72], 16); // float32
    LittleEndian::write_i16(&mut hdr[72..74], 32); // bitpix
    LittleEndian::write_f32(&mut hdr[76..80], 1.0);
    let spacing = vol.spacing();
    for i in 0..3 {
        LittleEndian::write_f32(
            &mut hdr[80 + 4 * i..84 + 4 * i],
            spacing[i].to_f32().unwrap_or(1.0),
        );
    }
    LittleEndian::write_f32(&mut hdr[108..112], 352.0); // vox_offset
    LittleEndian::write_f32(&mut hdr[112..116], 1.0); // scl_slope
    LittleEndian::write_f32(&mut hdr[116..120], 0.0); // scl_inter
    hdr[344..348].copy_from_slice(b"n+1\0");
    w.write_all(&hdr)?;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let values: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let vol = VolumeGrid::new([2, 3, 2], [1.0, 1.5, 2.0], 2, values, None).unwrap();
        write_nifti(&path, &vol).unwrap();
        let back: VolumeGrid<f64> = read_nifti(&path).unwrap();
        assert_eq!(back.dims(), [2, 3, 2]);
        assert_eq!(back.channels(), 2);
        assert!((back.spacing()[1] - 1.5).abs() < 1e-6);
        for j in 0..12 {
            for d in 0..2 {
                assert!((back.value(j, d) - vol.value(j, d)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn applies_slope_and_inter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii");
        let vol = VolumeGrid::from_scalar([2, 1, 1], vec![10.0, 20.0]).unwrap();
        write_nifti(&path, &vol).unwrap();
        // patch slope=2, inter=5 into the written header
        let mut bytes = std::fs::read(&path).unwrap();
        LittleEndian::write_f32(&mut bytes[112..116], 2.0);
        LittleEndian::write_f32(&mut bytes[116..120], 5.0);
        std::fs::write(&path, bytes).unwrap();
        let back: VolumeGrid<f64> = read_nifti(&path).unwrap();
        assert!((back.value(0, 0) - 25.0).abs() < 1e-5);
        assert!((back.value(1, 0) - 45.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_unsupported_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.nii");
        let vol = VolumeGrid::from_scalar([2, 1, 1], vec![1.0, 2.0]).unwrap();
        write_nifti(&path, &vol).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 2); // uint8: not accepted
        std::fs::write(&path, bytes).unwrap();
        let err = read_nifti::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("datatype"));
    }
}
