//! NPY container access on top of `npyz`.
//!
//! Reads any format version and writes 1.0. Only C-order little-endian
//! `f4`, `f8` and `u1` arrays are accepted; trailing bytes are rejected.

use std::io::{self, Read, Write};

use npyz::WriterBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn parse(descr: &str) -> Option<Self> {
        match descr {
            "<f4" => Some(Dtype::F32),
            "<f8" => Some(Dtype::F64),
            "|u1" | "<u1" | ">u1" => Some(Dtype::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl NpyData {
    pub fn dtype(&self) -> Dtype {
        match self {
            NpyData::F32(_) => Dtype::F32,
            NpyData::F64(_) => Dtype::F64,
            NpyData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_npy<R: Read>(reader: &mut R) -> io::Result<NpyArray> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut cursor = io::Cursor::new(bytes.as_slice());
    let file = npyz::NpyFile::new(&mut cursor)?;
    if file.order() != npyz::Order::C {
        return Err(invalid("fortran order is not supported"));
    }
    let dtype = match file.dtype() {
        npyz::DType::Plain(ty) => Dtype::parse(&ty.to_string()),
        _ => None,
    }
    .ok_or_else(|| invalid(format!("unsupported dtype {}", file.dtype().descr())))?;
    let shape = file
        .shape()
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| invalid("shape overflows")))
        .collect::<io::Result<Vec<_>>>()?;
    let data = match dtype {
        Dtype::F32 => NpyData::F32(file.into_vec()?),
        Dtype::F64 => NpyData::F64(file.into_vec()?),
        Dtype::U8 => NpyData::U8(file.into_vec()?),
    };
    if cursor.position() as usize != bytes.len() {
        return Err(invalid("trailing bytes after array data"));
    }
    Ok(NpyArray { shape, data })
}

fn write_values<T, W>(writer: &mut W, shape: &[u64], values: &[T]) -> io::Result<()>
where
    T: npyz::AutoSerialize + Copy,
    W: Write,
{
    let mut out = npyz::WriteOptions::new()
        .default_dtype()
        .shape(shape)
        .writer(writer)
        .begin_nd()?;
    out.extend(values.iter().copied())?;
    out.finish()
}

pub fn write_npy<W: Write>(writer: &mut W, shape: &[usize], data: &NpyData) -> io::Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(invalid(format!(
            "shape {shape:?} does not match {} values",
            data.len()
        )));
    }
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    match data {
        NpyData::F32(v) => write_values(writer, &shape, v),
        NpyData::F64(v) => write_values(writer, &shape, v),
        NpyData::U8(v) => write_values(writer, &shape, v),
    }
}
