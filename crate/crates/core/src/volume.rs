//! Volumes, label masks, and NIfTI-1 reading and writing.
//!
//! The voxel grid is used exactly as stored. A NIfTI image with extents
//! `(nx, ny, nz)` becomes a tensor of shape `[nz, ny, nx]`, so the file's
//! fastest axis is the tensor's last axis and no data is reordered.
//! `spacing` keeps the file's `(x, y, z)` order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

/// NIfTI-1 datatype codes understood by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            256 => Datatype::I8,
            512 => Datatype::U16,
            768 => Datatype::U32,
            1024 => Datatype::I64,
            1280 => Datatype::U64,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
            Datatype::I8 => 256,
            Datatype::U16 => 512,
            Datatype::U32 => 768,
            Datatype::I64 => 1024,
            Datatype::U64 => 1280,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 | Datatype::I8 => 1,
            Datatype::I16 | Datatype::U16 => 2,
            Datatype::I32 | Datatype::U32 | Datatype::F32 => 4,
            Datatype::I64 | Datatype::U64 | Datatype::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Datatype::F32 | Datatype::F64)
    }
}

/// A scalar 3-D image with its grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[D, H, W]` = `[nz, ny, nx]`.
    pub data: Tensor,
    /// Voxel size in mm along `(x, y, z)`.
    pub spacing: [f64; 3],
    /// Voxel-to-world transform, row-major.
    pub affine: [[f64; 4]; 4],
    pub dtype: Datatype,
}

impl Volume {
    pub fn new(data: Tensor, spacing: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::NotThreeD(data.shape().to_vec()));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!(
                "affine last row must be (0,0,0,1), got {:?}",
                affine[3]
            )));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("affine contains non-finite values"));
        }
        Ok(Volume {
            data,
            spacing,
            affine,
            dtype: Datatype::F32,
        })
    }

    /// Unit spacing and an affine that scales voxel indices by nothing.
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        Self::new(data, [1.0; 3], identity_affine([1.0; 3]))
    }

    /// `[D, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Same geometry, new voxel values.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.data.shape().to_vec(),
                found: data.shape().to_vec(),
            });
        }
        Ok(Volume {
            data,
            spacing: self.spacing,
            affine: self.affine,
            dtype: self.dtype,
        })
    }

    /// The data as a single-channel `[1, D, H, W]` tensor.
    pub fn as_4d(&self) -> Tensor {
        let [d, h, w] = self.shape();
        self.data
            .clone()
            .reshape(&[1, d, h, w])
            .expect("same length")
    }
}

pub fn identity_affine(spacing: [f64; 3]) -> [[f64; 4]; 4] {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Integer tissue labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub data: Tensor,
    pub label_names: BTreeMap<u32, String>,
}

impl LabelMask {
    /// Validates that every voxel is a non-negative integer and that every
    /// non-zero label appears in `label_names`.
    pub fn new(data: Tensor, label_names: BTreeMap<u32, String>) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::NotThreeD(data.shape().to_vec()));
        }
        for (index, &value) in data.data().iter().enumerate() {
            if value < 0.0 || value.fract() != 0.0 || value > u32::MAX as f64 {
                return Err(Error::NonIntegerMask { index, value });
            }
            let label = value as u32;
            if label != 0 && !label_names.contains_key(&label) {
                return Err(Error::UnknownLabel(label));
            }
        }
        Ok(LabelMask { data, label_names })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn label_at(&self, i: usize) -> u32 {
        self.data.data()[i] as u32
    }

    pub fn count(&self, label: u32) -> usize {
        self.data
            .data()
            .iter()
            .filter(|&&v| v as u32 == label)
            .count()
    }

    /// Labels actually present, excluding background.
    pub fn present_labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self
            .label_names
            .keys()
            .copied()
            .filter(|&l| l != 0 && self.count(l) > 0)
            .collect();
        seen.sort_unstable();
        seen
    }

    pub fn name(&self, label: u32) -> String {
        self.label_names
            .get(&label)
            .cloned()
            .unwrap_or_else(|| format!("label{label}"))
    }

    pub fn check_matches(&self, volume: &Volume) -> Result<()> {
        if self.shape() != volume.shape() {
            return Err(Error::ShapeMismatch {
                expected: volume.shape().to_vec(),
                found: self.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if is_gzip(&raw) {
        let mut out = Vec::new();
        GzDecoder::new(Cursor::new(raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Decoded {
    dims: [usize; 3],
    values: Vec<f64>,
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
    dtype: Datatype,
}

fn decode<E: ByteOrder>(bytes: &[u8]) -> Result<Decoded> {
    let i16_at = |o: usize| E::read_i16(&bytes[o..o + 2]);
    let f32_at = |o: usize| E::read_f32(&bytes[o..o + 4]);

    if &bytes[344..348] != MAGIC_SINGLE {
        return Err(Error::MalformedHeader(format!(
            "unexpected magic {:?} (only single-file n+1 images are supported)",
            &bytes[344..348]
        )));
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("dim[0] = {ndim}")));
    }
    let dims: Vec<usize> = (1..=ndim as usize)
        .map(|k| i16_at(40 + 2 * k))
        .map(|v| if v < 1 { 0 } else { v as usize })
        .collect();
    if dims.contains(&0) {
        return Err(Error::MalformedHeader(format!(
            "non-positive extent in {dims:?}"
        )));
    }
    if dims.len() < 3 || dims[3..].iter().any(|&e| e != 1) {
        return Err(Error::NotThreeD(dims));
    }
    let dtype = Datatype::from_code(i16_at(70))?;
    let pix: Vec<f32> = (0..8).map(|k| f32_at(76 + 4 * k)).collect();
    let vox_offset = f32_at(108);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::MalformedHeader(format!("vox_offset = {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let (mut slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let n: usize = dims[..3].iter().product();
    let need = vox_offset + n * dtype.size();
    if bytes.len() < need {
        return Err(Error::MalformedHeader(format!(
            "file holds {} bytes, image needs {need}",
            bytes.len()
        )));
    }
    let raw = &bytes[vox_offset..need];
    let values: Vec<f64> = match dtype {
        Datatype::U8 => raw.iter().map(|&b| b as f64).collect(),
        Datatype::I8 => raw.iter().map(|&b| b as i8 as f64).collect(),
        Datatype::I16 => raw.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        Datatype::U16 => raw.chunks_exact(2).map(|c| E::read_u16(c) as f64).collect(),
        Datatype::I32 => raw.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
        Datatype::U32 => raw.chunks_exact(4).map(|c| E::read_u32(c) as f64).collect(),
        Datatype::I64 => raw.chunks_exact(8).map(|c| E::read_i64(c) as f64).collect(),
        Datatype::U64 => raw.chunks_exact(8).map(|c| E::read_u64(c) as f64).collect(),
        Datatype::F32 => raw.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        Datatype::F64 => raw.chunks_exact(8).map(|c| E::read_f64(c)).collect(),
    };
    let values = if slope != 1.0 || inter != 0.0 {
        values.into_iter().map(|v| v * slope + inter).collect()
    } else {
        values
    };

    let spacing = [pix[1] as f64, pix[2] as f64, pix[3] as f64];
    let sform_code = i16_at(254);
    let qform_code = i16_at(252);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c) as f64;
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        a
    } else if qform_code > 0 {
        let q = [f32_at(256), f32_at(260), f32_at(264)].map(|v| v as f64);
        let off = [f32_at(268), f32_at(272), f32_at(276)].map(|v| v as f64);
        quaternion_affine(q, off, spacing, pix[0] as f64)
    } else {
        identity_affine(spacing)
    };
    let spacing = spacing.map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });

    Ok(Decoded {
        dims: [dims[0], dims[1], dims[2]],
        values,
        spacing,
        affine,
        dtype,
    })
}

fn quaternion_affine(q: [f64; 3], offset: [f64; 3], spacing: [f64; 3], qfac: f64) -> [[f64; 4]; 4] {
    let [b, c, d] = q;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ];
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    let scale = [spacing[0], spacing[1], spacing[2] * qfac];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out[3] = [0.0, 0.0, 0.0, 1.0];
    out
}

fn read_decoded(path: &Path) -> Result<Decoded> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    if LittleEndian::read_i32(&bytes[..4]) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(&bytes)
    } else if BigEndian::read_i32(&bytes[..4]) == HEADER_SIZE as i32 {
        decode::<BigEndian>(&bytes)
    } else {
        Err(Error::MalformedHeader("sizeof_hdr is not 348".into()))
    }
}

/// Reads a scalar 3-D NIfTI-1 image (`.nii` or gzip-compressed `.nii.gz`).
/// `scl_slope`/`scl_inter` are applied.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let dec = read_decoded(path.as_ref())?;
    let [nx, ny, nz] = dec.dims;
    let data = Tensor::new(vec![nz, ny, nx], dec.values)?;
    let mut v = Volume::new(data, dec.spacing, dec.affine)?;
    v.dtype = dec.dtype;
    Ok(v)
}

/// Reads an integer label image and validates it against `label_names`
/// and, when given, the shape of `reference`.
pub fn read_mask(
    path: impl AsRef<Path>,
    label_names: &BTreeMap<u32, String>,
    reference: Option<&Volume>,
) -> Result<LabelMask> {
    let dec = read_decoded(path.as_ref())?;
    let [nx, ny, nz] = dec.dims;
    let data = Tensor::new(vec![nz, ny, nx], dec.values)?;
    let mask = LabelMask::new(data, label_names.clone())?;
    if let Some(r) = reference {
        mask.check_matches(r)?;
    }
    Ok(mask)
}

fn encode_header(
    shape: [usize; 3],
    spacing: [f64; 3],
    affine: &[[f64; 4]; 4],
    dtype: Datatype,
) -> Result<Vec<u8>> {
    let [nz, ny, nx] = shape;
    for e in [nx, ny, nz] {
        if e > i16::MAX as usize {
            return Err(Error::invalid(format!(
                "extent {e} exceeds the NIfTI-1 limit"
            )));
        }
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let mut w = Cursor::new(&mut h[..]);
    let io = |e: std::io::Error| Error::invalid(e.to_string());
    w.write_i32::<LittleEndian>(HEADER_SIZE as i32)
        .map_err(io)?;
    w.set_position(38);
    w.write_u8(b'r').map_err(io)?;
    w.set_position(40);
    for d in [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1] {
        w.write_i16::<LittleEndian>(d).map_err(io)?;
    }
    w.set_position(70);
    w.write_i16::<LittleEndian>(dtype.code()).map_err(io)?;
    w.write_i16::<LittleEndian>(8 * dtype.size() as i16)
        .map_err(io)?;
    w.set_position(76);
    for p in [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0] {
        w.write_f32::<LittleEndian>(p as f32).map_err(io)?;
    }
    w.write_f32::<LittleEndian>(VOX_OFFSET as f32).map_err(io)?;
    w.write_f32::<LittleEndian>(1.0).map_err(io)?;
    w.write_f32::<LittleEndian>(0.0).map_err(io)?;
    // mm, seconds
    w.set_position(123);
    w.write_u8(2 | 8).map_err(io)?;
    w.set_position(254);
    w.write_i16::<LittleEndian>(1).map_err(io)?;
    w.set_position(280);
    for row in affine.iter().take(3) {
        for &v in row {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    w.set_position(344);
    w.write_all(MAGIC_SINGLE).map_err(io)?;
    Ok(h)
}

fn write_file(path: &Path, header: Vec<u8>, payload: Vec<u8>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let result = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&header)
            .and_then(|_| enc.write_all(&payload))
            .and_then(|_| enc.finish()?.flush())
    } else {
        let mut out = BufWriter::new(file);
        out.write_all(&header)
            .and_then(|_| out.write_all(&payload))
            .and_then(|_| out.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

/// Writes a little-endian float32 NIfTI-1 image; gzip when the file name
/// ends in `.gz`. Geometry goes into `pixdim` and the sform rows.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let header = encode_header(
        volume.shape(),
        volume.spacing,
        &volume.affine,
        Datatype::F32,
    )?;
    let payload = volume
        .data
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    write_file(path.as_ref(), header, payload)
}

/// Writes a label image with the geometry of `like` (uint8 when labels
/// fit, int16 otherwise).
pub fn write_mask(mask: &LabelMask, like: &Volume, path: impl AsRef<Path>) -> Result<()> {
    mask.check_matches(like)?;
    let max = mask.data.max();
    let (dtype, payload): (Datatype, Vec<u8>) = if max <= u8::MAX as f64 {
        (
            Datatype::U8,
            mask.data.data().iter().map(|&v| v as u8).collect(),
        )
    } else if max <= i16::MAX as f64 {
        (
            Datatype::I16,
            mask.data
                .data()
                .iter()
                .flat_map(|&v| (v as i16).to_le_bytes())
                .collect(),
        )
    } else {
        return Err(Error::invalid(format!("label {max} too large for int16")));
    };
    let header = encode_header(mask.shape(), like.spacing, &like.affine, dtype)?;
    write_file(path.as_ref(), header, payload)
}
