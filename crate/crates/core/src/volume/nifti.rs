//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Vector3};

use super::{LabelVolume, ScalarVolume, Volume, VolumeGeometry, Voxel};
use crate::registration::{DisplacementField, FieldDirection};
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;
const XYZT_MM: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NiftiDatatype {
    Int8,
    Uint8,
    Int16,
    Uint16,
    Int32,
    Float32,
    Float64,
}

impl NiftiDatatype {
    pub const ALL: [NiftiDatatype; 7] = [
        NiftiDatatype::Int8,
        NiftiDatatype::Uint8,
        NiftiDatatype::Int16,
        NiftiDatatype::Uint16,
        NiftiDatatype::Int32,
        NiftiDatatype::Float32,
        NiftiDatatype::Float64,
    ];

    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Int32 => 8,
            NiftiDatatype::Float32 => 16,
            NiftiDatatype::Float64 => 64,
            NiftiDatatype::Int8 => 256,
            NiftiDatatype::Uint16 => 512,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.code() == code)
            .ok_or_else(|| Error::Unsupported(format!("NIfTI datatype code {code}")))
    }

    pub fn size(self) -> usize {
        match self {
            NiftiDatatype::Int8 | NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 | NiftiDatatype::Uint16 => 2,
            NiftiDatatype::Int32 | NiftiDatatype::Float32 => 4,
            NiftiDatatype::Float64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, NiftiDatatype::Float32 | NiftiDatatype::Float64)
    }

    /// Inclusive value range for integer types.
    pub fn int_range(self) -> Option<(f64, f64)> {
        match self {
            NiftiDatatype::Int8 => Some((i8::MIN as f64, i8::MAX as f64)),
            NiftiDatatype::Uint8 => Some((0.0, u8::MAX as f64)),
            NiftiDatatype::Int16 => Some((i16::MIN as f64, i16::MAX as f64)),
            NiftiDatatype::Uint16 => Some((0.0, u16::MAX as f64)),
            NiftiDatatype::Int32 => Some((i32::MIN as f64, i32::MAX as f64)),
            _ => None,
        }
    }

    fn decode<B: ByteOrder>(self, bytes: &[u8]) -> Vec<f64> {
        let n = bytes.len() / self.size();
        let mut out = Vec::with_capacity(n);
        match self {
            NiftiDatatype::Int8 => out.extend(bytes.iter().map(|&b| b as i8 as f64)),
            NiftiDatatype::Uint8 => out.extend(bytes.iter().map(|&b| b as f64)),
            NiftiDatatype::Int16 => out.extend(bytes.chunks_exact(2).map(|c| B::read_i16(c) as f64)),
            NiftiDatatype::Uint16 => {
                out.extend(bytes.chunks_exact(2).map(|c| B::read_u16(c) as f64))
            }
            NiftiDatatype::Int32 => out.extend(bytes.chunks_exact(4).map(|c| B::read_i32(c) as f64)),
            NiftiDatatype::Float32 => {
                out.extend(bytes.chunks_exact(4).map(|c| B::read_f32(c) as f64))
            }
            NiftiDatatype::Float64 => out.extend(bytes.chunks_exact(8).map(B::read_f64)),
        }
        out
    }

    fn encode(self, values: &[f64], out: &mut Vec<u8>) -> std::result::Result<(), String> {
        if let Some((lo, hi)) = self.int_range() {
            if let Some(v) = values
                .iter()
                .find(|&&v| v.fract() != 0.0 || v < lo || v > hi)
            {
                return Err(format!("value {v} is not representable as {self:?}"));
            }
        }
        out.reserve(values.len() * self.size());
        for &v in values {
            match self {
                NiftiDatatype::Int8 => out.push(v as i8 as u8),
                NiftiDatatype::Uint8 => out.push(v as u8),
                NiftiDatatype::Int16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
                NiftiDatatype::Uint16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
                NiftiDatatype::Int32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
                NiftiDatatype::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                NiftiDatatype::Float64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        Ok(())
    }
}

/// A decoded NIfTI volume: samples after slope/intercept scaling plus the
/// on-disk datatype.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub volume: ScalarVolume,
    pub datatype: NiftiDatatype,
}

impl NiftiImage {
    pub fn into_scalar(self) -> ScalarVolume {
        self.volume
    }

    /// Interpret the samples as non-negative integer labels.
    pub fn into_labels(self) -> Result<LabelVolume> {
        let vol = self.volume;
        let data = vol
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::Data(format!("sample {v} is not a label value")))
                }
            })
            .collect::<Result<Vec<u32>>>()?;
        Ok(Volume::from_parts(vol.geometry().clone(), data))
    }
}

struct RawNifti {
    dims: Vec<usize>,
    geom: VolumeGeometry,
    datatype: NiftiDatatype,
    intent_code: i16,
    intent_name: String,
    data: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn cstr(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

fn parse<B: ByteOrder>(bytes: &[u8]) -> Result<RawNifti> {
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected single-file NIfTI-1",
            String::from_utf8_lossy(magic)
        )));
    }
    let ndim = B::read_i16(&bytes[40..42]);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for d in 0..ndim as usize {
        let off = 42 + 2 * d;
        let v = B::read_i16(&bytes[off..off + 2]);
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v}", d + 1)));
        }
        dims.push(v as usize);
    }
    let intent_code = B::read_i16(&bytes[68..70]);
    let datatype = NiftiDatatype::from_code(B::read_i16(&bytes[70..72]))?;
    let f32_at = |off: usize| B::read_f32(&bytes[off..off + 4]) as f64;
    let pixdim: Vec<f64> = (0..8).map(|d| f32_at(76 + 4 * d)).collect();
    let vox_offset = f32_at(108);
    let slope = f32_at(112);
    let inter = f32_at(116);
    let qform_code = B::read_i16(&bytes[252..254]);
    let sform_code = B::read_i16(&bytes[254..256]);
    let intent_name = cstr(&bytes[328..344]);

    let spatial = [0, 1, 2].map(|a| dims.get(a).copied().unwrap_or(1));
    let spacing = [1, 2, 3].map(|a| {
        let s = pixdim[a].abs();
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });

    let (linear, offset) = if sform_code > 0 {
        let row = |off: usize| [f32_at(off), f32_at(off + 4), f32_at(off + 8), f32_at(off + 12)];
        let (x, y, z) = (row(280), row(296), row(312));
        (
            Matrix3::new(x[0], x[1], x[2], y[0], y[1], y[2], z[0], z[1], z[2]),
            Vector3::new(x[3], y[3], z[3]),
        )
    } else if qform_code > 0 {
        let rot = quaternion_to_rotation(f32_at(256), f32_at(260), f32_at(264));
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = Matrix3::from_diagonal(&Vector3::new(spacing[0], spacing[1], qfac * spacing[2]));
        (rot * scale, Vector3::new(f32_at(268), f32_at(272), f32_at(276)))
    } else {
        (
            Matrix3::from_diagonal(&Vector3::from(spacing)),
            Vector3::zeros(),
        )
    };
    let direction = orthonormal_direction(&linear)?;
    let geom = VolumeGeometry {
        dims: spatial,
        spacing,
        origin: [offset[0], offset[1], offset[2]],
        direction,
    };
    geom.validate()?;

    let count: usize = dims.iter().product();
    let start = if vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f64 {
        vox_offset as usize
    } else {
        VOX_OFFSET
    };
    let nbytes = count * datatype.size();
    if bytes.len() < start + nbytes {
        return Err(Error::Format(format!(
            "truncated data: need {} bytes, file has {}",
            start + nbytes,
            bytes.len()
        )));
    }
    let mut data = datatype.decode::<B>(&bytes[start..start + nbytes]);
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite sample at index {pos}")));
    }
    Ok(RawNifti {
        dims,
        geom,
        datatype,
        intent_code,
        intent_name,
        data,
    })
}

fn read_raw(path: &Path) -> Result<RawNifti> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "{}: {} bytes is shorter than a NIfTI-1 header",
            path.display(),
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(&bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(&bytes)
    } else {
        Err(Error::Format(format!(
            "{}: sizeof_hdr is not 348 in either byte order",
            path.display()
        )))
    }
}

/// Read a 3D NIfTI-1 volume (trailing singleton dimensions are accepted).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.dims.iter().skip(3).any(|&d| d != 1) {
        return Err(Error::Unsupported(format!(
            "{}: only 3D volumes are supported, dims {:?}",
            path.display(),
            raw.dims
        )));
    }
    Ok(NiftiImage {
        volume: Volume::new(raw.geom, raw.data)?,
        datatype: raw.datatype,
    })
}

/// Datatype chosen by [`write_nifti`] when none is given.
pub trait DefaultDatatype {
    fn default_datatype(&self) -> Result<NiftiDatatype>;
}

impl DefaultDatatype for ScalarVolume {
    /// float32 when every sample survives the narrowing exactly, else float64.
    fn default_datatype(&self) -> Result<NiftiDatatype> {
        let lossless = self.data().iter().all(|&v| (v as f32) as f64 == v);
        Ok(if lossless {
            NiftiDatatype::Float32
        } else {
            NiftiDatatype::Float64
        })
    }
}

impl DefaultDatatype for LabelVolume {
    fn default_datatype(&self) -> Result<NiftiDatatype> {
        let max = self.max_label();
        if max <= u8::MAX as u32 {
            Ok(NiftiDatatype::Uint8)
        } else if max <= u16::MAX as u32 {
            Ok(NiftiDatatype::Uint16)
        } else if max <= i32::MAX as u32 {
            Ok(NiftiDatatype::Int32)
        } else {
            Err(Error::Unsupported(format!("label {max} exceeds int32")))
        }
    }
}

pub fn write_nifti<T: Voxel>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()>
where
    Volume<T>: DefaultDatatype,
{
    write_nifti_as(vol, path, vol.default_datatype()?)
}

/// Write with an explicit on-disk datatype. Integer datatypes require every
/// sample to be an in-range integer; float32 narrows.
pub fn write_nifti_as<T: Voxel>(
    vol: &Volume<T>,
    path: impl AsRef<Path>,
    datatype: NiftiDatatype,
) -> Result<()> {
    let path = path.as_ref();
    let values: Vec<f64> = vol.data().iter().map(|v| v.to_f64()).collect();
    let dims = vol.dims().to_vec();
    let bytes = encode(vol.geometry(), &dims, datatype, 0, "", &values).map_err(|message| {
        Error::Write {
            path: path.to_path_buf(),
            message,
        }
    })?;
    write_bytes(path, &bytes)
}

/// Write a displacement field as a 5D vector NIfTI (x, y, z, 1, 3).
pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let geom = field.geometry();
    let n = geom.len();
    let mut values = vec![0.0; 3 * n];
    for (v, u) in field.vectors().iter().enumerate() {
        for c in 0..3 {
            values[c * n + v] = u[c];
        }
    }
    let dims = vec![geom.dims[0], geom.dims[1], geom.dims[2], 1, 3];
    let bytes = encode(
        geom,
        &dims,
        NiftiDatatype::Float64,
        INTENT_VECTOR,
        field.direction().tag(),
        &values,
    )
    .map_err(|message| Error::Write {
        path: path.to_path_buf(),
        message,
    })?;
    write_bytes(path, &bytes)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.dims.len() != 5 || raw.dims[3] != 1 || raw.dims[4] != 3 {
        return Err(Error::Format(format!(
            "{}: expected a (x, y, z, 1, 3) vector volume, dims {:?}",
            path.display(),
            raw.dims
        )));
    }
    if raw.intent_code != INTENT_VECTOR {
        return Err(Error::Format(format!(
            "{}: intent code {} is not a vector intent",
            path.display(),
            raw.intent_code
        )));
    }
    let direction = FieldDirection::from_tag(&raw.intent_name).ok_or_else(|| {
        Error::Format(format!("unknown field direction tag {:?}", raw.intent_name))
    })?;
    let n = raw.geom.len();
    let vectors = (0..n)
        .map(|v| [raw.data[v], raw.data[n + v], raw.data[2 * n + v]])
        .collect();
    DisplacementField::new(raw.geom, vectors, direction)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let write_err = |e: std::io::Error| Error::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let file = fs::File::create(path).map_err(write_err)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(write_err)?;
        enc.finish().map_err(write_err)?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(write_err)?;
    }
    Ok(())
}

fn encode(
    geom: &VolumeGeometry,
    dims: &[usize],
    datatype: NiftiDatatype,
    intent_code: i16,
    intent_name: &str,
    values: &[f64],
) -> std::result::Result<Vec<u8>, String> {
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(format!("dims {dims:?} exceed the NIfTI-1 limit"));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| LittleEndian::write_i16(&mut h[off..off + 2], v);
    let put_f32 = |h: &mut [u8], off: usize, v: f64| LittleEndian::write_f32(&mut h[off..off + 4], v as f32);

    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    put_i16(&mut h, 40, dims.len() as i16);
    for d in 0..7 {
        put_i16(&mut h, 42 + 2 * d, dims.get(d).copied().unwrap_or(1) as i16);
    }
    put_i16(&mut h, 68, intent_code);
    put_i16(&mut h, 70, datatype.code());
    put_i16(&mut h, 72, (datatype.size() * 8) as i16);

    let mut dir = geom.direction_matrix();
    let qfac = if dir.determinant() < 0.0 {
        dir.set_column(2, &(-dir.column(2)));
        -1.0
    } else {
        1.0
    };
    put_f32(&mut h, 76, qfac);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, geom.spacing[a]);
    }
    for a in 3..7 {
        put_f32(&mut h, 80 + 4 * a, 1.0);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f64);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = XYZT_MM;

    let (b, c, d) = rotation_to_quaternion(&dir);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 256, b);
    put_f32(&mut h, 260, c);
    put_f32(&mut h, 264, d);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, geom.origin[a]);
    }
    for r in 0..3 {
        for col in 0..3 {
            put_f32(&mut h, 280 + 16 * r + 4 * col, geom.direction[r][col] * geom.spacing[col]);
        }
        put_f32(&mut h, 280 + 16 * r + 12, geom.origin[r]);
    }
    let name = intent_name.as_bytes();
    let len = name.len().min(15);
    h[328..328 + len].copy_from_slice(&name[..len]);
    h[344..348].copy_from_slice(b"n+1\0");
    // 4-byte extension flag stays zero

    datatype.encode(values, &mut h)?;
    Ok(h)
}

fn quaternion_to_rotation(b: f64, c: f64, d: f64) -> Matrix3<f64> {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    Matrix3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a + c * c - b * b - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a + d * d - c * c - b * b,
    )
}

/// Quaternion (b, c, d) of a proper rotation, with a ≥ 0.
fn rotation_to_quaternion(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let (a, b, c, d);
    if trace > 0.0 {
        let s = 0.5 / (trace + 1.0).sqrt();
        a = 0.25 / s;
        b = (r[(2, 1)] - r[(1, 2)]) * s;
        c = (r[(0, 2)] - r[(2, 0)]) * s;
        d = (r[(1, 0)] - r[(0, 1)]) * s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
        a = (r[(2, 1)] - r[(1, 2)]) / s;
        b = 0.25 * s;
        c = (r[(0, 1)] + r[(1, 0)]) / s;
        d = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = 2.0 * (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt();
        a = (r[(0, 2)] - r[(2, 0)]) / s;
        b = (r[(0, 1)] + r[(1, 0)]) / s;
        c = 0.25 * s;
        d = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = 2.0 * (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt();
        a = (r[(1, 0)] - r[(0, 1)]) / s;
        b = (r[(0, 2)] + r[(2, 0)]) / s;
        c = (r[(1, 2)] + r[(2, 1)]) / s;
        d = 0.25 * s;
    }
    if a < 0.0 {
        (-b, -c, -d)
    } else {
        (b, c, d)
    }
}

/// Column-normalise a voxel-to-world linear map and snap it to the nearest
/// orthonormal matrix (stored affines are single precision).
fn orthonormal_direction(linear: &Matrix3<f64>) -> Result<[[f64; 3]; 3]> {
    let mut m = *linear;
    for c in 0..3 {
        let norm = m.column(c).norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Format("degenerate voxel-to-world affine".into()));
        }
        m.set_column(c, &(m.column(c) / norm));
    }
    if (m.transpose() * m - Matrix3::identity()).abs().max() > 1e-3 {
        return Err(Error::Unsupported(
            "sheared or non-orthogonal voxel axes".into(),
        ));
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let q = u * vt;
    Ok([
        [q[(0, 0)], q[(0, 1)], q[(0, 2)]],
        [q[(1, 0)], q[(1, 1)], q[(1, 2)]],
        [q[(2, 0)], q[(2, 1)], q[(2, 2)]],
    ])
}
