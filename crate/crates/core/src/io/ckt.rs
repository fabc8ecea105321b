//! CKT binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CKT1" | version u8 = 1 | dtype u8 | ndim u8 | reserved u8 = 0
//! ndim x u32 dims | payload, row-major
//! ```
//!
//! dtype 0 is real f32, 1 is complex f32 stored as interleaved (re, im),
//! 2 is a u8 binary mask. An archive is a sequence of
//! `u16 name length | UTF-8 name | container` records.

use std::fs;
use std::path::Path;

use num_complex::{Complex32, Complex64};

use crate::cine::CineSequence;
use crate::corrupt::LineMask;
use crate::error::{Error, Result};
use crate::fourier::KSpaceSequence;
use crate::tensorlab::Tensor;

pub const MAGIC: &[u8; 4] = b"CKT1";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Real = 0,
    Complex = 1,
    Mask = 2,
}

impl DType {
    pub fn element_size(self) -> usize {
        match self {
            DType::Real => 4,
            DType::Complex => 8,
            DType::Mask => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::Real),
            1 => Some(DType::Complex),
            2 => Some(DType::Mask),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CktData {
    Real(Vec<f32>),
    Complex(Vec<Complex32>),
    Mask(Vec<u8>),
}

impl CktData {
    pub fn dtype(&self) -> DType {
        match self {
            CktData::Real(_) => DType::Real,
            CktData::Complex(_) => DType::Complex,
            CktData::Mask(_) => DType::Mask,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CktData::Real(v) => v.len(),
            CktData::Complex(v) => v.len(),
            CktData::Mask(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CktTensor {
    pub dims: Vec<usize>,
    pub data: CktData,
}

impl CktTensor {
    pub fn new(dims: Vec<usize>, data: CktData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid("CKT supports at most 255 dimensions"));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::invalid("CKT dimension exceeds u32"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "CKT dims {dims:?} imply {n} elements, payload has {}",
                data.len()
            )));
        }
        if let CktData::Mask(m) = &data {
            if m.iter().any(|&b| b > 1) {
                return Err(Error::invalid("mask payload must be binary"));
            }
        }
        Ok(CktTensor { dims, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + 4 * self.dims.len() + self.data.len() * self.dtype().element_size(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[VERSION, self.dtype() as u8, self.dims.len() as u8, 0]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            CktData::Real(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            CktData::Complex(v) => v.iter().for_each(|z| {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }),
            CktData::Mask(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decode one container starting at `base` within `bytes`; offsets in
    /// errors are absolute. Returns the tensor and the number of bytes read.
    pub fn decode_at(bytes: &[u8], base: usize) -> Result<(CktTensor, usize)> {
        let b = &bytes[base.min(bytes.len())..];
        let err = |field: &'static str, off: usize, message: String| Error::Parse {
            field,
            offset: (base + off) as u64,
            message,
        };
        if b.len() < 4 || &b[..4] != MAGIC {
            return Err(err("magic", 0, "expected \"CKT1\"".into()));
        }
        if b.len() < HEADER_LEN {
            return Err(err("header", b.len(), "truncated header".into()));
        }
        if b[4] != VERSION {
            return Err(err("version", 4, format!("unsupported version {}", b[4])));
        }
        let dtype = DType::from_code(b[5])
            .ok_or_else(|| err("dtype", 5, format!("unknown dtype code {}", b[5])))?;
        let ndim = b[6] as usize;
        if b[7] != 0 {
            return Err(err("reserved", 7, format!("reserved byte is {}", b[7])));
        }
        let dims_end = HEADER_LEN + 4 * ndim;
        if b.len() < dims_end {
            return Err(err("dims", b.len(), format!("truncated dims, need {ndim}")));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| {
                let o = HEADER_LEN + 4 * i;
                u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize
            })
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| err("dims", HEADER_LEN, "element count overflows".into()))?;
        let size = n
            .checked_mul(dtype.element_size())
            .ok_or_else(|| err("dims", HEADER_LEN, "payload size overflows".into()))?;
        let avail = b.len() - dims_end;
        if avail < size {
            return Err(err(
                "payload",
                b.len(),
                format!("truncated payload: expected {size} bytes, found {avail}"),
            ));
        }
        let p = &b[dims_end..dims_end + size];
        let f32_at = |i: usize| f32::from_le_bytes(p[4 * i..4 * i + 4].try_into().unwrap());
        let data = match dtype {
            DType::Real => CktData::Real((0..n).map(f32_at).collect()),
            DType::Complex => CktData::Complex(
                (0..n)
                    .map(|i| Complex32::new(f32_at(2 * i), f32_at(2 * i + 1)))
                    .collect(),
            ),
            DType::Mask => {
                if let Some(i) = p.iter().position(|&v| v > 1) {
                    return Err(err(
                        "payload",
                        dims_end + i,
                        format!("mask value {} is not binary", p[i]),
                    ));
                }
                CktData::Mask(p.to_vec())
            }
        };
        Ok((CktTensor { dims, data }, dims_end + size))
    }

    pub fn decode(bytes: &[u8]) -> Result<CktTensor> {
        let (t, used) = Self::decode_at(bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::Parse {
                field: "payload",
                offset: used as u64,
                message: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<CktTensor> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn expect(&self, dtype: DType, ndim: usize) -> Result<()> {
        if self.dtype() != dtype || self.dims.len() != ndim {
            return Err(Error::invalid(format!(
                "expected {ndim}-d {dtype:?} tensor, found {}-d {:?}",
                self.dims.len(),
                self.dtype()
            )));
        }
        Ok(())
    }

    pub fn to_cine(&self) -> Result<CineSequence> {
        self.expect(DType::Real, 3)?;
        let CktData::Real(v) = &self.data else {
            unreachable!()
        };
        CineSequence::new(
            self.dims[0],
            self.dims[1],
            self.dims[2],
            v.iter().map(|&x| x as f64).collect(),
        )
    }

    pub fn to_kspace(&self) -> Result<KSpaceSequence> {
        self.expect(DType::Complex, 3)?;
        let CktData::Complex(v) = &self.data else {
            unreachable!()
        };
        KSpaceSequence::new(
            self.dims[0],
            self.dims[1],
            self.dims[2],
            v.iter()
                .map(|z| Complex64::new(z.re as f64, z.im as f64))
                .collect(),
        )
    }

    pub fn to_mask(&self) -> Result<LineMask> {
        self.expect(DType::Mask, 2)?;
        let CktData::Mask(v) = &self.data else {
            unreachable!()
        };
        LineMask::from_flags(self.dims[0], self.dims[1], v.clone())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let CktData::Real(v) = &self.data else {
            return Err(Error::invalid("expected a real tensor"));
        };
        Tensor::new(&self.dims, v.iter().map(|&x| x as f64).collect())
    }
}

impl From<&CineSequence> for CktTensor {
    fn from(s: &CineSequence) -> Self {
        let (t, h, w) = s.dims();
        CktTensor {
            dims: vec![t, h, w],
            data: CktData::Real(s.data().iter().map(|&x| x as f32).collect()),
        }
    }
}

impl From<&KSpaceSequence> for CktTensor {
    fn from(k: &KSpaceSequence) -> Self {
        let (t, h, w) = k.dims();
        CktTensor {
            dims: vec![t, h, w],
            data: CktData::Complex(
                k.data()
                    .iter()
                    .map(|z| Complex32::new(z.re as f32, z.im as f32))
                    .collect(),
            ),
        }
    }
}

impl From<&LineMask> for CktTensor {
    fn from(m: &LineMask) -> Self {
        CktTensor {
            dims: vec![m.frames(), m.lines()],
            data: CktData::Mask(m.flags().to_vec()),
        }
    }
}

impl From<&Tensor> for CktTensor {
    fn from(t: &Tensor) -> Self {
        CktTensor {
            dims: t.shape().to_vec(),
            data: CktData::Real(t.data().iter().map(|&x| x as f32).collect()),
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_archive(entries: &[(String, CktTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("archive name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&t.encode());
    }
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, CktTensor)>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < 2 {
            return Err(Error::Parse {
                field: "name_len",
                offset: pos as u64,
                message: "truncated record header".into(),
            });
        }
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2;
        if bytes.len() - pos < len {
            return Err(Error::Parse {
                field: "name",
                offset: pos as u64,
                message: format!("truncated name, need {len} bytes"),
            });
        }
        let name = std::str::from_utf8(&bytes[pos..pos + len])
            .map_err(|e| Error::Parse {
                field: "name",
                offset: pos as u64,
                message: e.to_string(),
            })?
            .to_string();
        pos += len;
        let (t, used) = CktTensor::decode_at(bytes, pos)?;
        pos += used;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_archive(path: &Path, entries: &[(String, CktTensor)]) -> Result<()> {
    write_bytes(path, &encode_archive(entries)?)
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, CktTensor)>> {
    decode_archive(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
