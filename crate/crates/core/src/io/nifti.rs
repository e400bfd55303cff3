//! Single-file NIfTI-1 (`n+1`) reader and writer, optionally gzipped.
//!
//! Voxels are returned as a tensor whose shape is the reversed `dim` list,
//! so a 3D image with `dim = [3, X, Y, Z]` becomes `[Z, Y, X]` (x fastest in
//! memory, matching the file layout).

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            c => return Err(Error::Nifti(format!("unsupported datatype code {c}"))),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Datatype::U8 => "uint8",
            Datatype::I16 => "int16",
            Datatype::I32 => "int32",
            Datatype::F32 => "float32",
            Datatype::F64 => "float64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub big_endian: bool,
}

impl NiftiHeader {
    /// Header for a volume whose tensor shape is `shape` (slowest axis
    /// first), with unit spacing and an identity affine.
    pub fn for_shape(shape: &[usize], datatype: Datatype) -> Result<Self> {
        if shape.is_empty() || shape.len() > 7 || shape.iter().any(|&s| s == 0 || s > i16::MAX as usize) {
            return Err(Error::Nifti(format!("cannot describe shape {shape:?}")));
        }
        let mut dim = [1i16; 8];
        dim[0] = shape.len() as i16;
        for (i, &s) in shape.iter().rev().enumerate() {
            dim[i + 1] = s as i16;
        }
        let mut pixdim = [1.0f32; 8];
        pixdim[0] = 1.0;
        Ok(NiftiHeader {
            dim,
            datatype,
            bitpix: (datatype.bytes() * 8) as i16,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            descrip: String::new(),
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            big_endian: false,
        })
    }

    /// Tensor shape implied by `dim` (reversed axis order).
    pub fn shape(&self) -> Vec<usize> {
        let n = self.dim[0].clamp(0, 7) as usize;
        self.dim[1..=n].iter().rev().map(|&d| d.max(0) as usize).collect()
    }

    fn has_scaling(&self) -> bool {
        self.scl_slope != 0.0 && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }

    /// Copies the spatial metadata (spacing, units, affines) of `other`.
    pub fn copy_geometry(&mut self, other: &NiftiHeader) {
        self.pixdim = other.pixdim;
        self.xyzt_units = other.xyzt_units;
        self.qform_code = other.qform_code;
        self.sform_code = other.sform_code;
        self.quatern = other.quatern;
        self.qoffset = other.qoffset;
        self.srow_x = other.srow_x;
        self.srow_y = other.srow_y;
        self.srow_z = other.srow_z;
    }

    /// Every parsed field as `key=value` lines.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sizeof_hdr={HEADER_SIZE}");
        let _ = writeln!(s, "endianness={}", if self.big_endian { "big" } else { "little" });
        let _ = writeln!(s, "dim={:?}", self.dim);
        let _ = writeln!(s, "datatype={} ({})", self.datatype.code(), self.datatype.name());
        let _ = writeln!(s, "bitpix={}", self.bitpix);
        let _ = writeln!(s, "pixdim={:?}", self.pixdim);
        let _ = writeln!(s, "vox_offset={}", self.vox_offset);
        let _ = writeln!(s, "scl_slope={}", self.scl_slope);
        let _ = writeln!(s, "scl_inter={}", self.scl_inter);
        let _ = writeln!(s, "xyzt_units={}", self.xyzt_units);
        let _ = writeln!(s, "descrip={}", self.descrip);
        let _ = writeln!(s, "qform_code={}", self.qform_code);
        let _ = writeln!(s, "sform_code={}", self.sform_code);
        let _ = writeln!(s, "quatern={:?}", self.quatern);
        let _ = writeln!(s, "qoffset={:?}", self.qoffset);
        let _ = writeln!(s, "srow_x={:?}", self.srow_x);
        let _ = writeln!(s, "srow_y={:?}", self.srow_y);
        let _ = writeln!(s, "srow_z={:?}", self.srow_z);
        let _ = writeln!(s, "magic=n+1");
        s
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    big: bool,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().expect("in bounds");
        if self.big {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
    fn f32s<const N: usize>(&self, at: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(at + 4 * i))
    }
}

fn decompress_if_gzip(raw: Vec<u8>) -> Result<Vec<u8>> {
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Nifti(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses a NIfTI-1 image from bytes (plain or gzipped).
pub fn parse_nifti(raw: Vec<u8>) -> Result<(NiftiHeader, Tensor)> {
    let buf = decompress_if_gzip(raw)?;
    if buf.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("file is {} bytes, shorter than the {HEADER_SIZE}-byte header", buf.len())));
    }
    let first = i32::from_le_bytes(buf[0..4].try_into().expect("4 bytes"));
    let big = match first {
        348 => false,
        x if x.swap_bytes() == 348 => true,
        x => return Err(Error::Nifti(format!("sizeof_hdr is {x}, expected 348"))),
    };
    let c = Cursor { buf: &buf, big };
    match &buf[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => return Err(Error::Nifti("two-file (ni1) form is not supported; convert to single-file .nii".into())),
        m => return Err(Error::Nifti(format!("bad magic {m:?}"))),
    }
    let dim: [i16; 8] = std::array::from_fn(|i| c.i16(40 + 2 * i));
    if !(1..=7).contains(&dim[0]) || dim[1..=dim[0] as usize].iter().any(|&d| d < 1) {
        return Err(Error::Nifti(format!("invalid dim {dim:?}")));
    }
    let datatype = Datatype::from_code(c.i16(70))?;
    let text = |range: std::ops::Range<usize>| {
        let b = &buf[range];
        let end = b.iter().position(|&x| x == 0).unwrap_or(b.len());
        String::from_utf8_lossy(&b[..end]).into_owned()
    };
    let header = NiftiHeader {
        dim,
        datatype,
        bitpix: c.i16(72),
        pixdim: c.f32s(76),
        vox_offset: c.f32(108),
        scl_slope: c.f32(112),
        scl_inter: c.f32(116),
        xyzt_units: buf[123],
        descrip: text(148..228),
        qform_code: c.i16(252),
        sform_code: c.i16(254),
        quatern: c.f32s(256),
        qoffset: c.f32s(268),
        srow_x: c.f32s(280),
        srow_y: c.f32s(296),
        srow_z: c.f32s(312),
        big_endian: big,
    };
    let offset = header.vox_offset;
    if !(offset >= HEADER_SIZE as f32) || offset.fract() != 0.0 {
        return Err(Error::Nifti(format!("vox_offset {offset} is inconsistent with a {HEADER_SIZE}-byte header")));
    }
    let shape = header.shape();
    let n: usize = shape.iter().product();
    let width = datatype.bytes();
    let start = offset as usize;
    let need = start + n * width;
    if buf.len() < need {
        return Err(Error::Nifti(format!("data section truncated: need {need} bytes, file has {}", buf.len())));
    }
    let dc = Cursor { buf: &buf[start..need], big };
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let at = i * width;
        data.push(match datatype {
            Datatype::U8 => dc.buf[at] as f64,
            Datatype::I16 => dc.i16(at) as f64,
            Datatype::I32 => dc.i32(at) as f64,
            Datatype::F32 => dc.f32(at) as f64,
            Datatype::F64 => f64::from_le_bytes(dc.bytes(at)),
        });
    }
    if header.has_scaling() {
        let (s, b) = (header.scl_slope as f64, header.scl_inter as f64);
        data.iter_mut().for_each(|v| *v = *v * s + b);
    }
    Ok((header, Tensor::new(shape, data)?))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<(NiftiHeader, Tensor)> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(raw).map_err(|e| match e {
        Error::Nifti(m) => Error::Nifti(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Serializes to an uncompressed single-file image.
pub fn encode_nifti(header: &NiftiHeader, voxels: &Tensor) -> Result<Vec<u8>> {
    if header.shape() != voxels.shape() {
        return Err(Error::Nifti(format!("header shape {:?} vs voxels {:?}", header.shape(), voxels.shape())));
    }
    let big = header.big_endian;
    let mut buf = vec![0u8; DATA_OFFSET];
    let put = |buf: &mut Vec<u8>, at: usize, mut b: Vec<u8>| {
        if big {
            b.reverse();
        }
        buf[at..at + b.len()].copy_from_slice(&b);
    };
    let f32_at = |buf: &mut Vec<u8>, at: usize, v: f32| put(buf, at, v.to_le_bytes().to_vec());
    let i16_at = |buf: &mut Vec<u8>, at: usize, v: i16| put(buf, at, v.to_le_bytes().to_vec());
    put(&mut buf, 0, (HEADER_SIZE as i32).to_le_bytes().to_vec());
    buf[38] = b'r';
    for (i, &d) in header.dim.iter().enumerate() {
        i16_at(&mut buf, 40 + 2 * i, d);
    }
    i16_at(&mut buf, 70, header.datatype.code());
    i16_at(&mut buf, 72, header.bitpix);
    for (i, &p) in header.pixdim.iter().enumerate() {
        f32_at(&mut buf, 76 + 4 * i, p);
    }
    f32_at(&mut buf, 108, DATA_OFFSET as f32);
    f32_at(&mut buf, 112, header.scl_slope);
    f32_at(&mut buf, 116, header.scl_inter);
    buf[123] = header.xyzt_units;
    let d = header.descrip.as_bytes();
    buf[148..148 + d.len().min(79)].copy_from_slice(&d[..d.len().min(79)]);
    i16_at(&mut buf, 252, header.qform_code);
    i16_at(&mut buf, 254, header.sform_code);
    for (i, &v) in header.quatern.iter().chain(&header.qoffset).enumerate() {
        f32_at(&mut buf, 256 + 4 * i, v);
    }
    for (r, row) in [header.srow_x, header.srow_y, header.srow_z].iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            f32_at(&mut buf, 280 + 16 * r + 4 * i, v);
        }
    }
    buf[344..348].copy_from_slice(b"n+1\0");

    let (s, b) = if header.has_scaling() { (header.scl_slope as f64, header.scl_inter as f64) } else { (1.0, 0.0) };
    let dt = header.datatype;
    buf.reserve(voxels.numel() * dt.bytes());
    for &v in voxels.data() {
        let raw = (v - b) / s;
        let integral = |lo: f64, hi: f64| -> Result<f64> {
            let r = raw.round();
            if (raw - r).abs() > 1e-6 || r < lo || r > hi {
                return Err(Error::Nifti(format!("value {v} is not representable as {}", dt.name())));
            }
            Ok(r)
        };
        let mut bytes = match dt {
            Datatype::U8 => vec![integral(0.0, 255.0)? as u8],
            Datatype::I16 => (integral(i16::MIN as f64, i16::MAX as f64)? as i16).to_le_bytes().to_vec(),
            Datatype::I32 => (integral(i32::MIN as f64, i32::MAX as f64)? as i32).to_le_bytes().to_vec(),
            Datatype::F32 => (raw as f32).to_le_bytes().to_vec(),
            Datatype::F64 => raw.to_le_bytes().to_vec(),
        };
        if big {
            bytes.reverse();
        }
        buf.extend_from_slice(&bytes);
    }
    Ok(buf)
}

pub fn write_nifti(path: impl AsRef<Path>, header: &NiftiHeader, voxels: &Tensor, gzip: bool) -> Result<()> {
    let path = path.as_ref();
    let plain = encode_nifti(header, voxels)?;
    let bytes = if gzip {
        // fixed header fields (no mtime/name) keep output byte-identical across runs
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&plain).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        plain
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
