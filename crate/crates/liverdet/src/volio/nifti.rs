//! Minimal NIfTI-1 reader/writer.
//!
//! Supported subset: single-file `.nii` / `.nii.gz`, little-endian, 348-byte
//! header with magic `n+1\0`, datatypes u8 (2), i16 (4), f32 (16), 3D volumes
//! or 4D channel stacks. Orientation matrices are ignored; inputs are assumed
//! pre-aligned. The on-disk voxel order (x fastest, z slowest) is exactly the
//! crate's canonical flat order for dims (Z, Y, X), so no data permutation
//! happens on read - only the dim/pixdim axes are reinterpreted.
//!
//! Files written here use scl_slope=1, scl_inter=0 and a fixed header, so a
//! write-read-write cycle reproduces the first file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::{Dims, ScalarGrid, Spacing, VoxelGrid};
use crate::prob::ProbMaps;

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_U8: i16 = 2;
const DT_I16: i16 = 4;
const DT_F32: i16 = 16;

/// A volume as stored on disk, preserving the native element type.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    U8(VoxelGrid<u8>),
    I16(VoxelGrid<i16>),
    F32(VoxelGrid<f32>),
}

impl Volume {
    pub fn dims(&self) -> Dims {
        match self {
            Volume::U8(g) => g.dims(),
            Volume::I16(g) => g.dims(),
            Volume::F32(g) => g.dims(),
        }
    }

    pub fn spacing(&self) -> Spacing {
        match self {
            Volume::U8(g) => g.spacing(),
            Volume::I16(g) => g.spacing(),
            Volume::F32(g) => g.spacing(),
        }
    }

    /// Converts to f32, whatever the stored type.
    pub fn into_scalar(self) -> ScalarGrid {
        match self {
            Volume::U8(g) => g.map(|v| v as f32),
            Volume::I16(g) => g.map(|v| v as f32),
            Volume::F32(g) => g,
        }
    }

    /// Requires a u8 label volume.
    pub fn into_labels(self) -> Result<VoxelGrid<u8>> {
        match self {
            Volume::U8(g) => Ok(g),
            Volume::I16(_) => Err(Error::NiftiHeader {
                field: "datatype",
                message: "label volume must be u8 (datatype 2), got i16".into(),
            }),
            Volume::F32(_) => Err(Error::NiftiHeader {
                field: "datatype",
                message: "label volume must be u8 (datatype 2), got f32".into(),
            }),
        }
    }
}

struct Header {
    dims: Dims,
    nt: usize,
    spacing: Spacing,
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
}

fn read_i16(bytes: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn read_i32(bytes: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_gzip(&raw) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::NiftiHeader {
            field: "sizeof_hdr",
            message: format!("file holds {} bytes, need at least {HEADER_LEN}", bytes.len()),
        });
    }
    let sizeof_hdr = read_i32(bytes, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        // 0x5c010000 read little-endian means a big-endian writer.
        let msg = if sizeof_hdr.swap_bytes() == HEADER_LEN as i32 {
            "big-endian file, only little-endian is supported".to_string()
        } else {
            format!("expected 348, got {sizeof_hdr}")
        };
        return Err(Error::NiftiHeader { field: "sizeof_hdr", message: msg });
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::NiftiHeader {
            field: "magic",
            message: format!("expected \"n+1\\0\", got {:?}", magic),
        });
    }
    let ndim = read_i16(bytes, 40);
    if ndim != 3 && ndim != 4 {
        return Err(Error::NiftiHeader {
            field: "dim[0]",
            message: format!("expected 3 or 4, got {ndim}"),
        });
    }
    let mut dim = [0i64; 5];
    for (i, d) in dim.iter_mut().enumerate().skip(1) {
        *d = read_i16(bytes, 40 + 2 * i) as i64;
    }
    if ndim == 3 {
        dim[4] = 1;
    }
    for (i, &d) in dim.iter().enumerate().skip(1) {
        if d < 1 {
            return Err(Error::NiftiHeader {
                field: "dim",
                message: format!("dim[{i}] = {d}, must be >= 1"),
            });
        }
    }
    let datatype = read_i16(bytes, 70);
    let bitpix = read_i16(bytes, 72);
    let expect_bitpix = match datatype {
        DT_U8 => 8,
        DT_I16 => 16,
        DT_F32 => 32,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if bitpix != expect_bitpix {
        return Err(Error::NiftiHeader {
            field: "bitpix",
            message: format!("datatype {datatype} implies bitpix {expect_bitpix}, got {bitpix}"),
        });
    }
    let (sx, sy, sz) =
        (read_f32(bytes, 80) as f64, read_f32(bytes, 84) as f64, read_f32(bytes, 88) as f64);
    let spacing = Spacing::new(sz, sy, sx).map_err(|e| Error::NiftiHeader {
        field: "pixdim",
        message: e.to_string(),
    })?;
    let vox_offset_f = read_f32(bytes, 108);
    if !vox_offset_f.is_finite() || vox_offset_f < HEADER_LEN as f32 || vox_offset_f.fract() != 0.0
    {
        return Err(Error::NiftiHeader {
            field: "vox_offset",
            message: format!("invalid data offset {vox_offset_f}"),
        });
    }
    Ok(Header {
        dims: Dims::new(dim[3] as usize, dim[2] as usize, dim[1] as usize),
        nt: dim[4] as usize,
        spacing,
        datatype,
        vox_offset: vox_offset_f as usize,
        scl_slope: read_f32(bytes, 112),
        scl_inter: read_f32(bytes, 116),
    })
}

fn check_payload(bytes: &[u8], header: &Header) -> Result<usize> {
    let elem = match header.datatype {
        DT_U8 => 1,
        DT_I16 => 2,
        _ => 4,
    };
    let expected = header.dims.len() * header.nt * elem;
    let actual = bytes.len().saturating_sub(header.vox_offset);
    if actual != expected {
        return Err(Error::PayloadMismatch { expected, actual });
    }
    Ok(elem)
}

fn decode_f32(payload: &[u8]) -> Vec<f32> {
    payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Reads a 3D volume (or a 4D file with a single frame).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = read_file_bytes(path.as_ref())?;
    let header = parse_header(&bytes)?;
    if header.nt != 1 {
        return Err(Error::NiftiHeader {
            field: "dim[4]",
            message: format!("expected a single frame, got {}", header.nt),
        });
    }
    check_payload(&bytes, &header)?;
    let payload = &bytes[header.vox_offset..];
    let scaled = header.scl_slope != 0.0 && (header.scl_slope != 1.0 || header.scl_inter != 0.0);
    let volume = match header.datatype {
        DT_U8 => {
            let data = payload.to_vec();
            if scaled {
                let f = data
                    .iter()
                    .map(|&v| v as f32 * header.scl_slope + header.scl_inter)
                    .collect();
                Volume::F32(VoxelGrid::new(header.dims, header.spacing, f)?)
            } else {
                Volume::U8(VoxelGrid::new(header.dims, header.spacing, data)?)
            }
        }
        DT_I16 => {
            let data: Vec<i16> =
                payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            if scaled {
                let f = data
                    .iter()
                    .map(|&v| v as f32 * header.scl_slope + header.scl_inter)
                    .collect();
                Volume::F32(VoxelGrid::new(header.dims, header.spacing, f)?)
            } else {
                Volume::I16(VoxelGrid::new(header.dims, header.spacing, data)?)
            }
        }
        _ => {
            let mut data = decode_f32(payload);
            if scaled {
                for v in &mut data {
                    *v = *v * header.scl_slope + header.scl_inter;
                }
            }
            Volume::F32(VoxelGrid::new(header.dims, header.spacing, data)?)
        }
    };
    Ok(volume)
}

/// Reads a 14-channel probability stack and applies ingest normalization.
pub fn read_probmaps(path: impl AsRef<Path>) -> Result<ProbMaps> {
    let bytes = read_file_bytes(path.as_ref())?;
    let header = parse_header(&bytes)?;
    if header.nt != crate::labels::ClassLabel::COUNT {
        return Err(Error::ChannelCount(header.nt));
    }
    if header.datatype != DT_F32 {
        return Err(Error::NiftiHeader {
            field: "datatype",
            message: format!("probability maps must be f32 (16), got {}", header.datatype),
        });
    }
    check_payload(&bytes, &header)?;
    let n = header.dims.len();
    let all = decode_f32(&bytes[header.vox_offset..]);
    let channels = (0..header.nt)
        .map(|c| ScalarGrid::new(header.dims, header.spacing, all[c * n..(c + 1) * n].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    ProbMaps::normalized(channels)
}

fn build_header(dims: Dims, nt: usize, spacing: Spacing, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    let ndim: i16 = if nt == 1 { 3 } else { 4 };
    let dim: [i16; 8] =
        [ndim, dims.x as i16, dims.y as i16, dims.z as i16, nt as i16, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] =
        [1.0, spacing.x as f32, spacing.y as f32, spacing.z as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    h[123] = 2; // xyzt_units: millimetres
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_bytes(path: &Path, header: Vec<u8>, payload: &[u8]) -> Result<()> {
    let mut raw = header;
    raw.extend_from_slice(&[0u8; 4]); // extension indicator: none
    debug_assert_eq!(raw.len(), VOX_OFFSET);
    raw.extend_from_slice(payload);
    let gz = path.extension().is_some_and(|e| e == "gz");
    let bytes = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        raw
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a volume as `.nii` (or gzip-compressed `.nii.gz`).
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (dims, spacing) = (volume.dims(), volume.spacing());
    match volume {
        Volume::U8(g) => {
            write_bytes(path, build_header(dims, 1, spacing, DT_U8, 8), g.data())
        }
        Volume::I16(g) => {
            let payload: Vec<u8> = g.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_bytes(path, build_header(dims, 1, spacing, DT_I16, 16), &payload)
        }
        Volume::F32(g) => {
            let payload: Vec<u8> = g.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_bytes(path, build_header(dims, 1, spacing, DT_F32, 32), &payload)
        }
    }
}

pub fn write_labels(grid: &VoxelGrid<u8>, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&Volume::U8(grid.clone()), path)
}

pub fn write_scalar(grid: &ScalarGrid, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&Volume::F32(grid.clone()), path)
}

/// Writes a 14-channel probability stack as 4D f32.
pub fn write_probmaps(prob: &ProbMaps, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header =
        build_header(prob.dims(), prob.channels().len(), prob.spacing(), DT_F32, 32);
    let mut payload = Vec::with_capacity(prob.dims().len() * prob.channels().len() * 4);
    for ch in prob.channels() {
        for v in ch.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, header, &payload)
}
