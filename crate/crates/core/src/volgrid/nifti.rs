//! Minimal NIfTI-1 single-file (.nii) reader and writer.
//!
//! Supported subset: 348-byte header, magic "n+1\0", datatype 16 (float32),
//! bitpix 32, dim[0] = 3, vox_offset 352, scl_slope in {0, 1}, scl_inter 0,
//! little-endian throughout. Orientation is carried in the srow fields with
//! sform_code 1. Every other header field is written as zero and ignored on
//! read. Data bits round-trip exactly for float32-representable values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volgrid::{Grid3D, Volume3D};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const DT_FLOAT32: i16 = 16;

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn format_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Format { field: field.to_string(), detail: detail.into() }
}

/// Writes a volume as a .nii file. Data is stored as little-endian float32
/// in x-fastest order, matching the in-memory layout.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let g = vol.grid();
    let mut hdr = [0u8; HEADER_LEN];
    put_i32(&mut hdr, 0, HEADER_LEN as i32);
    put_i16(&mut hdr, 40, 3); // dim[0]
    for a in 0..3 {
        if g.dims[a] > i16::MAX as usize {
            return Err(format_err("dim", format!("dimension {} exceeds i16 range", g.dims[a])));
        }
        put_i16(&mut hdr, 42 + 2 * a, g.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut hdr, 42 + 2 * a, 1);
    }
    put_i16(&mut hdr, 70, DT_FLOAT32);
    put_i16(&mut hdr, 72, 32); // bitpix
    for a in 0..3 {
        put_f32(&mut hdr, 80 + 4 * a, g.spacing[a] as f32);
    }
    put_f32(&mut hdr, 108, VOX_OFFSET as f32);
    put_f32(&mut hdr, 112, 1.0); // scl_slope
    put_i16(&mut hdr, 254, 1); // sform_code
    // srow rows: world coordinate c as a function of voxel index, i.e.
    // column a holds axes[a][c] * spacing[a], fourth column the origin.
    for c in 0..3 {
        let off = 280 + 16 * c;
        for a in 0..3 {
            put_f32(&mut hdr, off + 4 * a, (g.axes[a][c] * g.spacing[a]) as f32);
        }
        put_f32(&mut hdr, off + 12, g.origin[c] as f32);
    }
    hdr[344..348].copy_from_slice(MAGIC);

    let mut bytes = Vec::with_capacity(VOX_OFFSET + 4 * vol.data().len());
    bytes.extend_from_slice(&hdr);
    bytes.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_LEN]);
    for &v in vol.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

/// Reads a .nii file written by [`write_volume`] (or any file within the
/// supported subset).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < VOX_OFFSET {
        return Err(format_err("sizeof_hdr", format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[344..348] != MAGIC {
        return Err(format_err("magic", format!("expected \"n+1\\0\", got {:?}", &bytes[344..348])));
    }
    let sizeof_hdr = get_i32(&bytes, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(format_err("sizeof_hdr", format!("expected 348, got {sizeof_hdr}")));
    }
    let ndim = get_i16(&bytes, 40);
    if ndim != 3 {
        return Err(format_err("dim[0]", format!("expected 3 dimensions, got {ndim}")));
    }
    let datatype = get_i16(&bytes, 70);
    if datatype != DT_FLOAT32 {
        return Err(format_err("datatype", format!("expected 16 (float32), got {datatype}")));
    }
    let bitpix = get_i16(&bytes, 72);
    if bitpix != 32 {
        return Err(format_err("bitpix", format!("expected 32, got {bitpix}")));
    }
    let scl_slope = get_f32(&bytes, 112);
    if scl_slope != 0.0 && scl_slope != 1.0 {
        return Err(format_err("scl_slope", format!("expected 0 or 1, got {scl_slope}")));
    }
    let scl_inter = get_f32(&bytes, 116);
    if scl_inter != 0.0 {
        return Err(format_err("scl_inter", format!("expected 0, got {scl_inter}")));
    }
    let vox_offset = get_f32(&bytes, 108);
    if vox_offset != VOX_OFFSET as f32 {
        return Err(format_err("vox_offset", format!("expected 352, got {vox_offset}")));
    }
    let sform_code = get_i16(&bytes, 254);
    if sform_code != 1 {
        return Err(format_err("sform_code", format!("expected 1, got {sform_code}")));
    }

    let mut dims = [0usize; 3];
    for a in 0..3 {
        let d = get_i16(&bytes, 42 + 2 * a);
        if d < 1 {
            return Err(format_err("dim", format!("dim[{}] = {d} is not positive", a + 1)));
        }
        dims[a] = d as usize;
    }
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let s = get_f32(&bytes, 80 + 4 * a);
        if !(s > 0.0) {
            return Err(format_err("pixdim", format!("pixdim[{}] = {s} is not positive", a + 1)));
        }
        spacing[a] = s as f64;
    }
    let mut origin = [0.0f64; 3];
    let mut axes = [[0.0f64; 3]; 3];
    for c in 0..3 {
        let off = 280 + 16 * c;
        for a in 0..3 {
            axes[a][c] = get_f32(&bytes, off + 4 * a) as f64 / spacing[a];
        }
        origin[c] = get_f32(&bytes, off + 12) as f64;
    }
    // Normalize to absorb float32 rounding of the srow entries.
    for ax in &mut axes {
        let norm = (ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2]).sqrt();
        if !(norm > 0.0) {
            return Err(format_err("srow", "orientation column has zero norm"));
        }
        for c in 0..3 {
            ax[c] /= norm;
        }
    }
    let grid = Grid3D::new(dims, spacing, origin, axes)
        .map_err(|e| format_err("srow", format!("invalid geometry: {e}")))?;

    let n = grid.len();
    let data_bytes = &bytes[VOX_OFFSET..];
    if data_bytes.len() < 4 * n {
        return Err(format_err(
            "data",
            format!("expected {} float32 values, file holds {}", n, data_bytes.len() / 4),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for c in data_bytes[..4 * n].chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(format_err("data", "non-finite voxel value"));
        }
        data.push(v as f64);
    }
    Volume3D::new(grid, data)
}
