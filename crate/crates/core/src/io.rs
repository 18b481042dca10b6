//! File readers and writers for logits, descriptors and label grids.
//!
//! Logits are `(H, W, N_c)` float arrays, descriptors `(D,)` float arrays and
//! label grids `(H, W)` `u8` arrays, all NPY. Floats are written as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::ClassSchema;
use crate::npy::{read_npy, write_npy, NpyArray, NpyData};
use crate::scalar::Scalar;
use crate::tensor::{ClassGrid, Descriptor, LabelGrid, LogitMap};

fn read_array(path: &Path) -> Result<NpyArray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_npy(&mut BufReader::new(file)).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData | std::io::ErrorKind::UnexpectedEof => Error::Npy {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
        _ => Error::io(path, e),
    })
}

fn write_array(path: &Path, shape: &[usize], data: &NpyData) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_npy(&mut w, shape, data).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn float_values<T: Scalar>(path: &Path, data: NpyData) -> Result<Vec<T>> {
    match data {
        NpyData::F32(v) => Ok(v.into_iter().map(T::widen_f32).collect()),
        NpyData::F64(v) => Ok(v
            .into_iter()
            .map(|x| <T as num_traits::NumCast>::from(x).unwrap_or_else(T::nan))
            .collect()),
        NpyData::U8(_) => Err(Error::Npy {
            path: path.to_path_buf(),
            msg: "expected a float array, found u8".into(),
        }),
    }
}

fn with_path(path: &Path, err: Error) -> Error {
    match err {
        Error::NonFinite { index, .. } => Error::NonFinite {
            what: path.display().to_string(),
            index,
        },
        Error::Shape { msg, .. } => Error::Shape {
            what: path.display().to_string(),
            msg,
        },
        other => other,
    }
}

pub fn read_logit_map<T: Scalar>(path: impl AsRef<Path>) -> Result<LogitMap<T>> {
    let path = path.as_ref();
    let array = read_array(path)?;
    let [h, w, nc] = array.shape[..] else {
        return Err(Error::shape(
            path.display().to_string(),
            format!("logits must have rank 3, found shape {:?}", array.shape),
        ));
    };
    let values = float_values(path, array.data)?;
    LogitMap::new(h, w, nc, values).map_err(|e| with_path(path, e))
}

pub fn write_logit_map<T: Scalar>(map: &LogitMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, nc) = map.dims();
    let data = NpyData::F32(map.values().iter().map(|v| v.narrow_f32()).collect());
    write_array(path.as_ref(), &[h, w, nc], &data)
}

pub fn read_descriptor<T: Scalar>(path: impl AsRef<Path>) -> Result<Descriptor<T>> {
    let path = path.as_ref();
    let array = read_array(path)?;
    if array.shape.len() != 1 {
        return Err(Error::shape(
            path.display().to_string(),
            format!("descriptor must have rank 1, found shape {:?}", array.shape),
        ));
    }
    let values = float_values(path, array.data)?;
    Descriptor::new(values).map_err(|e| with_path(path, e))
}

pub fn write_descriptor<T: Scalar>(desc: &Descriptor<T>, path: impl AsRef<Path>) -> Result<()> {
    let data = NpyData::F32(desc.values().iter().map(|v| v.narrow_f32()).collect());
    write_array(path.as_ref(), &[desc.dims()], &data)
}

fn read_u8_grid(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let array = read_array(path)?;
    let [h, w] = array.shape[..] else {
        return Err(Error::shape(
            path.display().to_string(),
            format!("grid must have rank 2, found shape {:?}", array.shape),
        ));
    };
    match array.data {
        NpyData::U8(v) => Ok((h, w, v)),
        other => Err(Error::Npy {
            path: path.to_path_buf(),
            msg: format!("expected u8 grid, found {:?}", other.dtype()),
        }),
    }
}

pub fn read_label_grid(path: impl AsRef<Path>, schema: &ClassSchema) -> Result<LabelGrid> {
    let path = path.as_ref();
    let (h, w, classes) = read_u8_grid(path)?;
    LabelGrid::new(h, w, classes, schema.num_classes(), schema.undefined_id)
        .map_err(|e| with_path(path, e))
}

pub fn write_label_grid(grid: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    write_class_grid(grid.grid(), path)
}

pub fn read_class_grid(path: impl AsRef<Path>) -> Result<ClassGrid> {
    let path = path.as_ref();
    let (h, w, classes) = read_u8_grid(path)?;
    ClassGrid::new(h, w, classes).map_err(|e| with_path(path, e))
}

pub fn write_class_grid(grid: &ClassGrid, path: impl AsRef<Path>) -> Result<()> {
    write_array(
        path.as_ref(),
        &[grid.height(), grid.width()],
        &NpyData::U8(grid.classes().to_vec()),
    )
}
