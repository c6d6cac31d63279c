//! Reading and writing arrays in the numpy `.npy` v1.0 format.
//!
//! Only C-order arrays with the little-endian descriptors `<f4`, `<f8`, `<i2`,
//! `<i4`, `<u1` and `<u2` are accepted. Arrays are always written as `<f8` or
//! `<i4`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not an npy file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported npy version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed npy header: {0}")]
    Header(String),
    #[error("unsupported dtype descriptor {0:?}")]
    UnsupportedDescr(String),
    #[error("fortran-ordered arrays are not supported")]
    FortranOrder,
    #[error("payload has {actual} bytes, header implies {expected}")]
    Truncated { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
    I2,
    I4,
    U1,
    U2,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self, NpyError> {
        Ok(match descr {
            "<f4" => Dtype::F4,
            "<f8" => Dtype::F8,
            "<i2" => Dtype::I2,
            "<i4" => Dtype::I4,
            "|u1" | "<u1" => Dtype::U1,
            "<u2" => Dtype::U2,
            other => return Err(NpyError::UnsupportedDescr(other.to_string())),
        })
    }

    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::F8 => "<f8",
            Dtype::I2 => "<i2",
            Dtype::I4 => "<i4",
            Dtype::U1 => "|u1",
            Dtype::U2 => "<u2",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U1 => 1,
            Dtype::I2 | Dtype::U2 => 2,
            Dtype::F4 | Dtype::I4 => 4,
            Dtype::F8 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Dtype::F4 | Dtype::F8)
    }
}

/// A decoded array; values are widened to `f64` (lossless for every accepted dtype).
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Minimal parser for the python-literal dict in the header.
fn parse_header(text: &str) -> Result<Header, NpyError> {
    let bad = |m: &str| NpyError::Header(format!("{m} in {text:?}"));
    let body = text.trim().trim_end_matches(',').trim();
    let body =
        body.strip_prefix('{').and_then(|b| b.trim_end().strip_suffix('}')).ok_or_else(|| bad("expected a dict"))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let quote = rest.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| bad("expected a key"))?;
        let end = rest[1..].find(quote).ok_or_else(|| bad("unterminated key"))? + 1;
        let key = &rest[1..end];
        rest = rest[end + 1..].trim_start().strip_prefix(':').ok_or_else(|| bad("expected ':'"))?.trim_start();
        let value_end = if rest.starts_with('(') {
            rest.find(')').ok_or_else(|| bad("unterminated tuple"))? + 1
        } else if rest.starts_with('\'') || rest.starts_with('"') {
            let q = rest.chars().next().unwrap();
            rest[1..].find(q).ok_or_else(|| bad("unterminated string"))? + 2
        } else {
            rest.find(',').unwrap_or(rest.len())
        };
        let value = rest[..value_end].trim();
        match key {
            "descr" => descr = Some(value.trim_matches(|c| c == '\'' || c == '"').to_string()),
            "fortran_order" => {
                fortran = Some(match value {
                    "True" => true,
                    "False" => false,
                    _ => return Err(bad("fortran_order must be True or False")),
                })
            }
            "shape" => {
                let inner = value
                    .strip_prefix('(')
                    .and_then(|v| v.strip_suffix(')'))
                    .ok_or_else(|| bad("shape must be a tuple"))?;
                let dims = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>().map_err(|_| bad("bad shape entry")))
                    .collect::<Result<Vec<_>, _>>()?;
                shape = Some(dims);
            }
            _ => return Err(bad("unexpected key")),
        }
        rest = rest[value_end..].trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(Header {
        descr: descr.ok_or_else(|| bad("missing descr"))?,
        fortran_order: fortran.ok_or_else(|| bad("missing fortran_order"))?,
        shape: shape.ok_or_else(|| bad("missing shape"))?,
    })
}

pub fn read<R: Read>(reader: &mut R) -> Result<NpyArray, NpyError> {
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic).map_err(|_| NpyError::BadMagic)?;
    if magic != MAGIC {
        return Err(NpyError::BadMagic);
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version)?;
    let header_len = match (version[0], version[1]) {
        (1, 0) => {
            let mut b = [0u8; 2];
            reader.read_exact(&mut b)?;
            u16::from_le_bytes(b) as usize
        }
        (major, minor) => return Err(NpyError::UnsupportedVersion(major, minor)),
    };
    let mut header = vec![0u8; header_len];
    reader.read_exact(&mut header)?;
    let text = std::str::from_utf8(&header).map_err(|_| NpyError::Header("header is not ASCII".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(NpyError::FortranOrder);
    }
    let dtype = Dtype::parse(&header.descr)?;
    let count: usize = header.shape.iter().product();
    let expected = count * dtype.size();
    let mut payload = Vec::with_capacity(expected);
    reader.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(NpyError::Truncated { expected, actual: payload.len() });
    }
    let data = payload
        .chunks_exact(dtype.size())
        .map(|b| match dtype {
            Dtype::F4 => f64::from(f32::from_le_bytes(b.try_into().unwrap())),
            Dtype::F8 => f64::from_le_bytes(b.try_into().unwrap()),
            Dtype::I2 => f64::from(i16::from_le_bytes(b.try_into().unwrap())),
            Dtype::I4 => f64::from(i32::from_le_bytes(b.try_into().unwrap())),
            Dtype::U1 => f64::from(b[0]),
            Dtype::U2 => f64::from(u16::from_le_bytes(b.try_into().unwrap())),
        })
        .collect();
    Ok(NpyArray { dtype, shape: header.shape, data })
}

pub fn read_file(path: impl AsRef<Path>) -> Result<NpyArray, NpyError> {
    read(&mut BufReader::new(File::open(path)?))
}

fn write_header<W: Write>(writer: &mut W, dtype: Dtype, shape: &[usize]) -> io::Result<()> {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut dict = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}", dtype.descr());
    // Magic + version + length + dict + newline must be a multiple of 64.
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');
    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())
}

pub fn write_f64<W: Write>(writer: &mut W, shape: &[usize], data: &[f64]) -> io::Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "shape does not fit data");
    write_header(writer, Dtype::F8, shape)?;
    for v in data {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_i32<W: Write>(writer: &mut W, shape: &[usize], data: &[i32]) -> io::Result<()> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "shape does not fit data");
    write_header(writer, Dtype::I4, shape)?;
    for v in data {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f64_file(path: impl AsRef<Path>, shape: &[usize], data: &[f64]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_f64(&mut w, shape, data)?;
    w.flush()
}

pub fn write_i32_file(path: impl AsRef<Path>, shape: &[usize], data: &[i32]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_i32(&mut w, shape, data)?;
    w.flush()
}
