//! Single-file NIfTI-1 subset: little-endian, uncompressed, no extensions.

use std::fs;
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

pub const NIFTI_HEADER_BYTES: usize = 348;
/// Header plus the four-byte extension flag.
pub const NIFTI_VOX_OFFSET: usize = 352;

mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn i16_at(b: &[u8], o: usize) -> i16 {
    i16::from_le_bytes([b[o], b[o + 1]])
}

fn i32_at(b: &[u8], o: usize) -> i32 {
    i32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    match datatype {
        DT_UINT8 => Ok(1),
        DT_INT16 => Ok(2),
        DT_FLOAT32 => Ok(4),
        DT_FLOAT64 => Ok(8),
        other => Err(Error::UnsupportedDatatype(other)),
    }
}

/// Parses an in-memory `.nii` image.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_BYTES {
        return Err(Error::Truncated {
            expected: NIFTI_HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let sizeof_hdr = i32_at(bytes, off::SIZEOF_HDR);
    if sizeof_hdr != NIFTI_HEADER_BYTES as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == NIFTI_HEADER_BYTES as i32 {
            return Err(Error::InvalidHeader("big-endian files are not supported".into()));
        }
        return Err(Error::InvalidHeader(format!(
            "sizeof_hdr is {sizeof_hdr}, expected 348"
        )));
    }
    let magic: [u8; 4] = bytes[off::MAGIC..off::MAGIC + 4].try_into().unwrap();
    if &magic != b"n+1\0" {
        return Err(Error::BadMagic(magic));
    }

    let ndim = i16_at(bytes, off::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::InvalidHeader(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for d in 1..=ndim as usize {
        let n = i16_at(bytes, off::DIM + 2 * d);
        if n <= 0 {
            return Err(Error::InvalidHeader(format!("dim[{d}] = {n} must be positive")));
        }
        if d <= 3 {
            dims[d - 1] = n as usize;
        } else if n != 1 {
            return Err(Error::InvalidHeader(format!(
                "only 3D volumes are supported (dim[{d}] = {n})"
            )));
        }
    }
    let mut spacing = [1.0f64; 3];
    for (d, s) in spacing.iter_mut().enumerate() {
        let p = f32_at(bytes, off::PIXDIM + 4 * (d + 1)) as f64;
        // pixdim is frequently left at zero for unused axes.
        if d < ndim as usize && p != 0.0 {
            *s = p.abs();
        }
    }

    let datatype = i16_at(bytes, off::DATATYPE);
    let bpv = bytes_per_voxel(datatype)?;
    let vox_offset = f32_at(bytes, off::VOX_OFFSET);
    if !(vox_offset >= NIFTI_HEADER_BYTES as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::InvalidHeader(format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let n = dims[0] * dims[1] * dims[2];
    let expected = n * bpv;
    let available = bytes.len().saturating_sub(start);
    if available < expected {
        return Err(Error::Truncated {
            expected,
            actual: available,
        });
    }
    let payload = &bytes[start..start + expected];
    let mut data: Vec<f64> = match datatype {
        DT_UINT8 => payload.iter().map(|&v| v as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };

    let slope = f32_at(bytes, off::SCL_SLOPE) as f64;
    let inter = f32_at(bytes, off::SCL_INTER) as f64;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Volume::new(dims, spacing, data)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

/// Reads a 0/1 volume; any nonzero voxel is inside the mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Vec<bool>> {
    Ok(read_nifti(path)?.data().iter().map(|&v| v != 0.0).collect())
}

/// Serializes a volume as float32 with an identity orientation scaled by the spacing.
pub fn encode_nifti(vol: &Volume) -> Result<Vec<u8>> {
    let dims = vol.dims();
    for (d, &n) in dims.iter().enumerate() {
        if n > i16::MAX as usize {
            return Err(Error::InvalidVolume(format!(
                "dim {d} = {n} exceeds the NIfTI-1 limit"
            )));
        }
    }
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());

    h[off::SIZEOF_HDR..4].copy_from_slice(&(NIFTI_HEADER_BYTES as i32).to_le_bytes());
    h[off::REGULAR] = b'r';
    put_i16(&mut h, off::DIM, 3);
    for (d, &n) in dims.iter().enumerate() {
        put_i16(&mut h, off::DIM + 2 * (d + 1), n as i16);
    }
    for d in 4..8 {
        put_i16(&mut h, off::DIM + 2 * d, 1);
    }
    put_i16(&mut h, off::DATATYPE, DT_FLOAT32);
    put_i16(&mut h, off::BITPIX, 32);
    let spacing = vol.spacing();
    put_f32(&mut h, off::PIXDIM, 1.0);
    for (d, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, off::PIXDIM + 4 * (d + 1), s as f32);
    }
    put_f32(&mut h, off::VOX_OFFSET, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, off::SCL_SLOPE, 1.0);
    put_f32(&mut h, off::SCL_INTER, 0.0);
    // millimetres + seconds
    h[off::XYZT_UNITS] = 2 | 8;
    let descrip = b"dmrimap";
    h[off::DESCRIP..off::DESCRIP + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, off::QFORM_CODE, 1);
    put_i16(&mut h, off::SFORM_CODE, 1);
    for (row, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, off::SROW_X + 16 * row + 4 * row, s as f32);
    }
    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");

    h.reserve(vol.len() * 4);
    for &v in vol.data() {
        h.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(h)
}

pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(vol)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
