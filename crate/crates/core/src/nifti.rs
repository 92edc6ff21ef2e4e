//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Volumes are exchanged in C order (last axis fastest); the on-disk layout
//! is Fortran order (first axis fastest) as the format requires.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: f32 = 352.0;

/// On-disk element types supported for reading; writing uses
/// [`DataType::Uint8`] for label maps and [`DataType::Float32`] otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
    Int8,
    Uint16,
    Uint32,
    Int64,
    Uint64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Int32 => 8,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
            DataType::Int8 => 256,
            DataType::Uint16 => 512,
            DataType::Uint32 => 768,
            DataType::Int64 => 1024,
            DataType::Uint64 => 1280,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataType::Uint8,
            4 => DataType::Int16,
            8 => DataType::Int32,
            16 => DataType::Float32,
            64 => DataType::Float64,
            256 => DataType::Int8,
            512 => DataType::Uint16,
            768 => DataType::Uint32,
            1024 => DataType::Int64,
            1280 => DataType::Uint64,
            _ => return None,
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::Uint8 | DataType::Int8 => 1,
            DataType::Int16 | DataType::Uint16 => 2,
            DataType::Int32 | DataType::Uint32 | DataType::Float32 => 4,
            DataType::Float64 | DataType::Int64 | DataType::Uint64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, DataType::Float32 | DataType::Float64)
    }
}

/// Every field of the NIfTI-1 header.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p: [f32; 3],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Header for a scanner-aligned volume with the given voxel spacing.
    pub fn for_volume(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let mut h = NiftiHeader {
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p: [0.0; 3],
            intent_code: 0,
            datatype: DataType::Float32.code(),
            bitpix: 32,
            slice_start: 0,
            pixdim: [1.0; 8],
            vox_offset: VOX_OFFSET,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2, // millimetres
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 1,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
            intent_name: [0; 16],
            magic: *b"n+1\0",
        };
        for a in 0..3 {
            h.dim[a + 1] = dims[a] as i16;
            h.pixdim[a + 1] = spacing[a] as f32;
            h.srow[a][a] = spacing[a] as f32;
        }
        h
    }

    pub fn dims(&self) -> Vec<usize> {
        let n = self.dim[0].clamp(0, 7) as usize;
        self.dim[1..=n].iter().map(|&d| d.max(0) as usize).collect()
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.pixdim[1].abs() as f64, self.pixdim[2].abs() as f64, self.pixdim[3].abs() as f64]
    }

    /// Voxel-to-world rotation/scaling (3x3), from the sform when set, else
    /// the qform, else the voxel spacing.
    pub fn linear_part(&self) -> [[f64; 3]; 3] {
        if self.sform_code > 0 {
            return std::array::from_fn(|r| std::array::from_fn(|c| self.srow[r][c] as f64));
        }
        let sp = self.spacing();
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            return std::array::from_fn(|row| {
                std::array::from_fn(|col| {
                    let s = if col == 2 { sp[col] * qfac } else { sp[col] };
                    r[row][col] * s
                })
            });
        }
        std::array::from_fn(|r| std::array::from_fn(|c| if r == c { sp[r] } else { 0.0 }))
    }

    /// Voxel axis whose direction is closest to the world superior-inferior
    /// axis; slices perpendicular to it are axial.
    pub fn axial_axis(&self) -> usize {
        let m = self.linear_part();
        (0..3)
            .map(|col| {
                let norm = (0..3).map(|r| m[r][col] * m[r][col]).sum::<f64>().sqrt();
                let z = if norm > 0.0 { (m[2][col] / norm).abs() } else { 0.0 };
                (col, z)
            })
            .fold((2, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }

    fn parse<B: ByteOrder>(buf: &[u8]) -> Self {
        let mut r = Cursor::new(buf);
        let mut bytes = |n: usize| -> Vec<u8> {
            let mut v = vec![0; n];
            r.read_exact(&mut v).expect("header buffer is 348 bytes");
            v
        };
        let _sizeof = B::read_i32(&bytes(4));
        let data_type = bytes(10).try_into().unwrap();
        let db_name = bytes(18).try_into().unwrap();
        let extents = B::read_i32(&bytes(4));
        let session_error = B::read_i16(&bytes(2));
        let regular = bytes(1)[0];
        let dim_info = bytes(1)[0];
        let mut dim = [0i16; 8];
        B::read_i16_into(&bytes(16), &mut dim);
        let mut intent_p = [0f32; 3];
        B::read_f32_into(&bytes(12), &mut intent_p);
        let intent_code = B::read_i16(&bytes(2));
        let datatype = B::read_i16(&bytes(2));
        let bitpix = B::read_i16(&bytes(2));
        let slice_start = B::read_i16(&bytes(2));
        let mut pixdim = [0f32; 8];
        B::read_f32_into(&bytes(32), &mut pixdim);
        let vox_offset = B::read_f32(&bytes(4));
        let scl_slope = B::read_f32(&bytes(4));
        let scl_inter = B::read_f32(&bytes(4));
        let slice_end = B::read_i16(&bytes(2));
        let slice_code = bytes(1)[0];
        let xyzt_units = bytes(1)[0];
        let cal_max = B::read_f32(&bytes(4));
        let cal_min = B::read_f32(&bytes(4));
        let slice_duration = B::read_f32(&bytes(4));
        let toffset = B::read_f32(&bytes(4));
        let glmax = B::read_i32(&bytes(4));
        let glmin = B::read_i32(&bytes(4));
        let descrip = bytes(80).try_into().unwrap();
        let aux_file = bytes(24).try_into().unwrap();
        let qform_code = B::read_i16(&bytes(2));
        let sform_code = B::read_i16(&bytes(2));
        let mut q = [0f32; 6];
        B::read_f32_into(&bytes(24), &mut q);
        let mut srow = [[0f32; 4]; 3];
        for row in &mut srow {
            B::read_f32_into(&bytes(16), row);
        }
        let intent_name = bytes(16).try_into().unwrap();
        let magic = bytes(4).try_into().unwrap();
        NiftiHeader {
            data_type,
            db_name,
            extents,
            session_error,
            regular,
            dim_info,
            dim,
            intent_p,
            intent_code,
            datatype,
            bitpix,
            slice_start,
            pixdim,
            vox_offset,
            scl_slope,
            scl_inter,
            slice_end,
            slice_code,
            xyzt_units,
            cal_max,
            cal_min,
            slice_duration,
            toffset,
            glmax,
            glmin,
            descrip,
            aux_file,
            qform_code,
            sform_code,
            quatern: [q[0], q[1], q[2]],
            qoffset: [q[3], q[4], q[5]],
            srow,
            intent_name,
            magic,
        }
    }

    /// Little-endian 348-byte encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(HEADER_SIZE);
        type L = LittleEndian;
        let io = |r: std::io::Result<()>| r.expect("writing to a Vec cannot fail");
        io(w.write_i32::<L>(HEADER_SIZE as i32));
        w.extend_from_slice(&self.data_type);
        w.extend_from_slice(&self.db_name);
        io(w.write_i32::<L>(self.extents));
        io(w.write_i16::<L>(self.session_error));
        w.push(self.regular);
        w.push(self.dim_info);
        self.dim.iter().for_each(|&v| io(w.write_i16::<L>(v)));
        self.intent_p.iter().for_each(|&v| io(w.write_f32::<L>(v)));
        io(w.write_i16::<L>(self.intent_code));
        io(w.write_i16::<L>(self.datatype));
        io(w.write_i16::<L>(self.bitpix));
        io(w.write_i16::<L>(self.slice_start));
        self.pixdim.iter().for_each(|&v| io(w.write_f32::<L>(v)));
        io(w.write_f32::<L>(self.vox_offset));
        io(w.write_f32::<L>(self.scl_slope));
        io(w.write_f32::<L>(self.scl_inter));
        io(w.write_i16::<L>(self.slice_end));
        w.push(self.slice_code);
        w.push(self.xyzt_units);
        io(w.write_f32::<L>(self.cal_max));
        io(w.write_f32::<L>(self.cal_min));
        io(w.write_f32::<L>(self.slice_duration));
        io(w.write_f32::<L>(self.toffset));
        io(w.write_i32::<L>(self.glmax));
        io(w.write_i32::<L>(self.glmin));
        w.extend_from_slice(&self.descrip);
        w.extend_from_slice(&self.aux_file);
        io(w.write_i16::<L>(self.qform_code));
        io(w.write_i16::<L>(self.sform_code));
        self.quatern.iter().chain(&self.qoffset).for_each(|&v| io(w.write_f32::<L>(v)));
        self.srow.iter().flatten().for_each(|&v| io(w.write_f32::<L>(v)));
        w.extend_from_slice(&self.intent_name);
        w.extend_from_slice(&self.magic);
        debug_assert_eq!(w.len(), HEADER_SIZE);
        w
    }
}

/// A decoded image: header plus voxel values in C order.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NiftiImage {
    /// Spatial extent of a 3-D image (trailing singleton axes are accepted).
    pub fn dims3(&self) -> Option<[usize; 3]> {
        match self.dims.as_slice() {
            [x, y, z] => Some([*x, *y, *z]),
            [x, y, z, rest @ ..] if rest.iter().all(|&d| d == 1) => Some([*x, *y, *z]),
            _ => None,
        }
    }
}

fn fail(path: &Path, message: impl Into<String>) -> Error {
    Error::Nifti { path: path.to_path_buf(), message: message.into() }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(Error::io(path))?)
        .read_to_end(&mut raw)
        .map_err(Error::io(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(Error::io(path))?;
        return Ok(out);
    }
    Ok(raw)
}

/// Convert between Fortran-order index (first axis fastest) and C order.
fn fortran_to_c(dims: &[usize], src: Vec<f64>) -> Vec<f64> {
    let n = src.len();
    let mut out = vec![0.0; n];
    let nd = dims.len();
    let mut idx = vec![0usize; nd];
    let c_strides = segcls_tensor::contiguous_strides(dims);
    for v in src {
        let c: usize = idx.iter().zip(&c_strides).map(|(i, s)| i * s).sum();
        out[c] = v;
        for d in 0..nd {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(fail(path, "file shorter than a NIfTI-1 header"));
    }
    let header = match (LittleEndian::read_i32(&bytes[..4]), BigEndian::read_i32(&bytes[..4])) {
        (348, _) => NiftiHeader::parse::<LittleEndian>(&bytes[..HEADER_SIZE]),
        (_, 348) => NiftiHeader::parse::<BigEndian>(&bytes[..HEADER_SIZE]),
        _ => return Err(fail(path, "not a NIfTI-1 file (sizeof_hdr != 348)")),
    };
    let big = BigEndian::read_i32(&bytes[..4]) == 348 && LittleEndian::read_i32(&bytes[..4]) != 348;
    if &header.magic[..3] != b"n+1" {
        return Err(fail(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let dims = header.dims();
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(fail(path, format!("invalid dimensions {:?}", header.dim)));
    }
    let dtype = DataType::from_code(header.datatype)
        .ok_or_else(|| fail(path, format!("unsupported datatype code {}", header.datatype)))?;
    let count: usize = dims.iter().product();
    let offset = header.vox_offset.max(HEADER_SIZE as f32) as usize;
    let need = offset + count * dtype.bytes();
    if bytes.len() < need {
        return Err(fail(path, format!("truncated voxel data: {} bytes, need {need}", bytes.len())));
    }
    let mut rdr = Cursor::new(&bytes[offset..need]);
    let raw: Vec<f64> = if big { decode::<BigEndian>(&mut rdr, dtype, count) } else { decode::<LittleEndian>(&mut rdr, dtype, count) }
        .map_err(Error::io(path))?;
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    let scaled = if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        raw.into_iter().map(|v| v * slope + inter).collect()
    } else {
        raw
    };
    let data = fortran_to_c(&dims, scaled);
    Ok(NiftiImage { header, dims, data })
}

fn decode<B: ByteOrder>(r: &mut impl Read, dtype: DataType, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(match dtype {
            DataType::Uint8 => r.read_u8()? as f64,
            DataType::Int8 => r.read_i8()? as f64,
            DataType::Int16 => r.read_i16::<B>()? as f64,
            DataType::Uint16 => r.read_u16::<B>()? as f64,
            DataType::Int32 => r.read_i32::<B>()? as f64,
            DataType::Uint32 => r.read_u32::<B>()? as f64,
            DataType::Int64 => r.read_i64::<B>()? as f64,
            DataType::Uint64 => r.read_u64::<B>()? as f64,
            DataType::Float32 => r.read_f32::<B>()? as f64,
            DataType::Float64 => r.read_f64::<B>()?,
        });
    }
    Ok(out)
}

/// Write `data` (C order over `dims`, up to 4 axes) using `template` for
/// geometry. Paths ending in `.gz` are gzip-compressed.
pub fn write(path: impl AsRef<Path>, template: &NiftiHeader, dims: &[usize], data: &[f64], dtype: DataType) -> Result<()> {
    let path = path.as_ref();
    assert!(!dims.is_empty() && dims.len() <= 7, "unsupported rank");
    assert_eq!(dims.iter().product::<usize>(), data.len(), "data does not match dims");
    let mut header = template.clone();
    header.dim = [1; 8];
    header.dim[0] = dims.len() as i16;
    for (a, &d) in dims.iter().enumerate() {
        header.dim[a + 1] = i16::try_from(d).map_err(|_| fail(path, format!("extent {d} exceeds NIfTI-1 limit")))?;
    }
    for a in 3..dims.len() {
        header.pixdim[a + 1] = 1.0;
    }
    header.datatype = dtype.code();
    header.bitpix = (dtype.bytes() * 8) as i16;
    header.vox_offset = VOX_OFFSET;
    header.scl_slope = 1.0;
    header.scl_inter = 0.0;
    header.magic = *b"n+1\0";
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    header.cal_min = 0.0;
    header.cal_max = 0.0;
    if dtype.is_integer() {
        header.glmin = lo as i32;
        header.glmax = hi as i32;
    }

    let mut body = header.to_bytes();
    body.extend_from_slice(&[0, 0, 0, 0]);
    // C order in memory, Fortran order on disk.
    let c_strides = segcls_tensor::contiguous_strides(dims);
    let mut idx = vec![0usize; dims.len()];
    body.reserve(data.len() * dtype.bytes());
    for _ in 0..data.len() {
        let c: usize = idx.iter().zip(&c_strides).map(|(i, s)| i * s).sum();
        encode(&mut body, dtype, data[c]);
        for d in 0..dims.len() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }

    let file = File::create(path).map_err(Error::io(path))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&body).map_err(Error::io(path))?;
        enc.finish().map_err(Error::io(path))?.flush().map_err(Error::io(path))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&body).map_err(Error::io(path))?;
        w.flush().map_err(Error::io(path))?;
    }
    Ok(())
}

fn encode(out: &mut Vec<u8>, dtype: DataType, v: f64) {
    type L = LittleEndian;
    let r = match dtype {
        DataType::Uint8 => out.write_u8(v.round().clamp(0.0, 255.0) as u8),
        DataType::Int8 => out.write_i8(v.round() as i8),
        DataType::Int16 => out.write_i16::<L>(v.round() as i16),
        DataType::Uint16 => out.write_u16::<L>(v.round() as u16),
        DataType::Int32 => out.write_i32::<L>(v.round() as i32),
        DataType::Uint32 => out.write_u32::<L>(v.round() as u32),
        DataType::Int64 => out.write_i64::<L>(v.round() as i64),
        DataType::Uint64 => out.write_u64::<L>(v.round() as u64),
        DataType::Float32 => out.write_f32::<L>(v as f32),
        DataType::Float64 => out.write_f64::<L>(v),
    };
    r.expect("writing to a Vec cannot fail");
}

/// First existing path among `name` and its `.nii` / `.nii.gz` sibling.
pub fn resolve(path: &Path) -> Option<PathBuf> {
    if path.is_file() {
        return Some(path.to_path_buf());
    }
    let s = path.to_string_lossy();
    let alt = if let Some(stem) = s.strip_suffix(".nii.gz") {
        format!("{stem}.nii")
    } else if s.ends_with(".nii") {
        format!("{s}.gz")
    } else {
        return None;
    };
    let alt = PathBuf::from(alt);
    alt.is_file().then_some(alt)
}
