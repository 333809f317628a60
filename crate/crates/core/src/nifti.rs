//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Reads uint8, int16, int32, float32 and float64 payloads in either byte
//! order, applying `scl_slope`/`scl_inter`. Writes little-endian float32.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Affine, Grid, Mask, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

struct Header {
    endian: Endian,
    dims: [usize; 3],
    spacing: [f64; 3],
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    affine: Option<Affine>,
}

fn read_i16(buf: &[u8], off: usize, e: Endian) -> i16 {
    match e {
        Endian::Little => LittleEndian::read_i16(&buf[off..]),
        Endian::Big => BigEndian::read_i16(&buf[off..]),
    }
}

fn read_i32(buf: &[u8], off: usize, e: Endian) -> i32 {
    match e {
        Endian::Little => LittleEndian::read_i32(&buf[off..]),
        Endian::Big => BigEndian::read_i32(&buf[off..]),
    }
}

fn read_f32(buf: &[u8], off: usize, e: Endian) -> f32 {
    match e {
        Endian::Little => LittleEndian::read_f32(&buf[off..]),
        Endian::Big => BigEndian::read_f32(&buf[off..]),
    }
}

fn read_f64(buf: &[u8], off: usize, e: Endian) -> f64 {
    match e {
        Endian::Little => LittleEndian::read_f64(&buf[off..]),
        Endian::Big => BigEndian::read_f64(&buf[off..]),
    }
}

fn parse_header(buf: &[u8], path: &Path) -> Result<Header> {
    let bad = |reason: String| Error::Nifti {
        path: path.to_path_buf(),
        reason,
    };
    if buf.len() < HEADER_SIZE {
        return Err(bad(format!("file too short ({} bytes)", buf.len())));
    }
    let endian = if LittleEndian::read_i32(buf) == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(buf) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(bad("sizeof_hdr is not 348".into()));
    };
    if &buf[344..347] != b"n+1" {
        return Err(bad("only single-file NIfTI-1 (magic n+1) is supported".into()));
    }

    let ndim = read_i16(buf, 40, endian);
    if !(1..=7).contains(&ndim) {
        return Err(bad(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for (k, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = read_i16(buf, 42 + 2 * k, endian);
        if v < 1 {
            return Err(bad(format!("dim[{}] = {v} must be >= 1", k + 1)));
        }
        *d = v as usize;
    }
    for k in 3..ndim as usize {
        let v = read_i16(buf, 42 + 2 * k, endian);
        if v > 1 {
            return Err(bad(format!("dimension {} has extent {v}; only 3D volumes are supported", k + 1)));
        }
    }

    let mut spacing = [1.0f64; 3];
    for (k, s) in spacing.iter_mut().enumerate() {
        let v = read_f32(buf, 80 + 4 * k, endian) as f64;
        *s = if k < ndim as usize && v.is_finite() && v > 0.0 {
            v
        } else if v.is_finite() && v < 0.0 {
            -v
        } else {
            1.0
        };
    }

    let datatype = read_i16(buf, 70, endian);
    let vox_offset = read_f32(buf, 108, endian);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(bad(format!("vox_offset {vox_offset} is invalid")));
    }
    let slope = read_f32(buf, 112, endian) as f64;
    let inter = read_f32(buf, 116, endian) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };

    let sform_code = read_i16(buf, 254, endian);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = read_f32(buf, 280 + 16 * r + 4 * c, endian) as f64;
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        Some(a)
    } else {
        None
    };

    Ok(Header {
        endian,
        dims,
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        slope,
        inter,
        affine,
    })
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads a NIfTI-1 volume, converting samples to `f64` with scaling applied.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_file_bytes(path)?;
    let h = parse_header(&bytes, path)?;
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let end = h.vox_offset + n * width;
    if bytes.len() < end {
        return Err(Error::Nifti {
            path: path.to_path_buf(),
            reason: format!("payload truncated: need {end} bytes, have {}", bytes.len()),
        });
    }
    let payload = &bytes[h.vox_offset..end];
    let e = h.endian;
    let raw: Vec<f64> = match h.datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        DT_INT16 => (0..n).map(|i| read_i16(payload, 2 * i, e) as f64).collect(),
        DT_INT32 => (0..n).map(|i| read_i32(payload, 4 * i, e) as f64).collect(),
        DT_FLOAT32 => (0..n).map(|i| read_f32(payload, 4 * i, e) as f64).collect(),
        DT_FLOAT64 => (0..n).map(|i| read_f64(payload, 8 * i, e)).collect(),
        _ => unreachable!(),
    };
    let data = if h.slope == 1.0 && h.inter == 0.0 {
        raw
    } else {
        raw.into_iter().map(|v| v * h.slope + h.inter).collect()
    };
    let grid = Grid::new(h.dims, h.spacing)?.with_affine(h.affine);
    Volume::new(grid, data).map_err(|e| Error::Nifti {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let v = load_volume(path)?;
    Mask::from_volume(&v).map_err(|e| Error::Nifti {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn build_header(grid: &Grid) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    LittleEndian::write_i16(&mut h[40..], 3);
    for (k, &d) in grid.dims.iter().enumerate() {
        let d = i16::try_from(d)
            .map_err(|_| Error::InvalidVolume(format!("dimension {d} exceeds NIfTI-1 limit")))?;
        LittleEndian::write_i16(&mut h[42 + 2 * k..], d);
    }
    for k in 3..7 {
        LittleEndian::write_i16(&mut h[42 + 2 * k..], 1);
    }
    LittleEndian::write_i16(&mut h[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[72..], 32);
    LittleEndian::write_f32(&mut h[76..], 1.0);
    for (k, &s) in grid.spacing.iter().enumerate() {
        LittleEndian::write_f32(&mut h[80 + 4 * k..], s as f32);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    // xyzt_units: mm
    h[123] = 2;
    if let Some(a) = &grid.affine {
        LittleEndian::write_i16(&mut h[254..], 1);
        for (r, row) in a.iter().take(3).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], v as f32);
            }
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

/// Writes `v` as little-endian float32. A `.gz` suffix selects gzip.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = build_header(v.grid())?;
    bytes.reserve(v.data().len() * 4);
    let mut word = [0u8; 4];
    for &s in v.data() {
        LittleEndian::write_f32(&mut word, s as f32);
        bytes.extend_from_slice(&word);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let res = if gz {
        let mut enc = GzEncoder::new(&mut out, Compression::fast());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        out.write_all(&bytes)
    };
    res.and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&m.to_volume(), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(dims: [i16; 3], datatype: i16, bitpix: i16, slope: f32, inter: f32) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        LittleEndian::write_i32(&mut h[0..], 348);
        LittleEndian::write_i16(&mut h[40..], 3);
        for k in 0..3 {
            LittleEndian::write_i16(&mut h[42 + 2 * k..], dims[k]);
        }
        LittleEndian::write_i16(&mut h[70..], datatype);
        LittleEndian::write_i16(&mut h[72..], bitpix);
        for k in 0..3 {
            LittleEndian::write_f32(&mut h[80 + 4 * k..], 1.0);
        }
        LittleEndian::write_f32(&mut h[108..], 352.0);
        LittleEndian::write_f32(&mut h[112..], slope);
        LittleEndian::write_f32(&mut h[116..], inter);
        h[344..348].copy_from_slice(b"n+1\0");
        h
    }

    #[test]
    fn reads_int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii");
        let mut bytes = header_bytes([2, 2, 1], DT_INT16, 16, 0.5, -1.0);
        for v in [2i16, 4, -6, 8] {
            let mut w = [0u8; 2];
            LittleEndian::write_i16(&mut w, v);
            bytes.extend_from_slice(&w);
        }
        std::fs::write(&path, bytes).unwrap();
        let v = load_volume(&path).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, -4.0, 3.0]);
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.nii");
        let mut bytes = header_bytes([3, 1, 1], DT_UINT8, 8, 0.0, 7.0);
        bytes.extend_from_slice(&[1, 2, 255]);
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(load_volume(&path).unwrap().data(), &[1.0, 2.0, 255.0]);
    }

    #[test]
    fn rejects_unsupported_datatype_and_bad_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nii");
        let mut bytes = header_bytes([1, 1, 1], 32, 64, 1.0, 0.0);
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::UnsupportedDatatype(32))));

        let mut bytes = header_bytes([0, 1, 1], DT_FLOAT32, 32, 1.0, 0.0);
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Nifti { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_volume("/nonexistent/definitely/missing.nii"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let mut bytes = header_bytes([4, 4, 4], DT_FLOAT32, 32, 1.0, 0.0);
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, bytes).unwrap();
        assert!(load_volume(&path).is_err());
    }

    #[test]
    fn mask_round_trip_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nii.gz");
        let g = Grid::new([3, 2, 2], [0.9, 0.9, 3.0]).unwrap();
        let m = Mask::new(g, (0..12).map(|i| (i % 5) as u32).collect()).unwrap();
        save_mask(&m, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap().data(), m.data());
    }
}
