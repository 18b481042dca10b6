//! In-memory tensors: per-pixel class logits, retrieval descriptors and
//! integer class grids.

use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};

/// Largest class count representable in an 8-bit grid with 255 reserved.
pub const MAX_CLASSES: usize = 255;

/// Label value marking pixels outside the evaluation schema.
pub const UNDEFINED_ID: u8 = 255;

/// Pre-softmax class scores for one image, stored row-major with the class
/// axis last (`H x W x N_c`).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap<T> {
    height: usize,
    width: usize,
    num_classes: usize,
    values: Vec<T>,
}

impl<T: Scalar> LogitMap<T> {
    pub fn new(height: usize, width: usize, num_classes: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("logit map", "height and width must be at least 1"));
        }
        if !(2..=MAX_CLASSES).contains(&num_classes) {
            return Err(Error::shape(
                "logit map",
                format!("num_classes must be in 2..={MAX_CLASSES}, got {num_classes}"),
            ));
        }
        let expected = height * width * num_classes;
        if values.len() != expected {
            return Err(Error::shape(
                "logit map",
                format!("expected {expected} values, got {}", values.len()),
            ));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "logit map".into(),
                index,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            values,
        })
    }

    /// Builds a map by evaluating `f(row, col, class)` for every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        num_classes: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * num_classes);
        for r in 0..height {
            for c in 0..width {
                for n in 0..num_classes {
                    values.push(f(r, c, n));
                }
            }
        }
        Self::new(height, width, num_classes, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.num_classes)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize, class: usize) -> T {
        self.values[(row * self.width + col) * self.num_classes + class]
    }

    /// Class scores of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.num_classes;
        &self.values[start..start + self.num_classes]
    }

    /// Class scores of the pixel at flat index `p = row * width + col`.
    #[inline]
    pub fn pixel_flat(&self, p: usize) -> &[T] {
        &self.values[p * self.num_classes..(p + 1) * self.num_classes]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        self.values.chunks_exact(self.num_classes)
    }

    /// Per-pixel argmax; the lowest class index wins ties.
    pub fn argmax(&self) -> ClassGrid {
        let classes = self.pixels().map(|px| argmax(px) as u8).collect();
        ClassGrid {
            height: self.height,
            width: self.width,
            classes,
        }
    }

    pub fn cast<U: Scalar>(&self) -> LogitMap<U> {
        LogitMap {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            values: self
                .values
                .iter()
                .map(|&v| U::from(v).expect("finite value casts"))
                .collect(),
        }
    }

    /// Bilinear resampling of every class channel to `height x width`.
    ///
    /// Uses half-pixel centres with edge clamping. Returns a clone when the
    /// size already matches.
    pub fn resample_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("resample", "target size must be at least 1x1"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let rows = axis_weights::<T>(self.height, height);
        let cols = axis_weights::<T>(self.width, width);
        let nc = self.num_classes;
        let mut values = Vec::with_capacity(height * width * nc);
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let p00 = self.pixel(r0, c0);
                let p01 = self.pixel(r0, c1);
                let p10 = self.pixel(r1, c0);
                let p11 = self.pixel(r1, c1);
                for n in 0..nc {
                    let top = p00[n] + (p01[n] - p00[n]) * fc;
                    let bottom = p10[n] + (p11[n] - p10[n]) * fc;
                    values.push(top + (bottom - top) * fr);
                }
            }
        }
        Ok(Self {
            height,
            width,
            num_classes: nc,
            values,
        })
    }
}

/// Source index pair and interpolation fraction for each output coordinate.
fn axis_weights<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, T::lit(x - i0 as f64))
        })
        .collect()
}

/// Flat feature vector representing one image for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<T> {
    values: Vec<T>,
}

impl<T: Scalar> Descriptor<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("descriptor", "must have at least one dimension"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "descriptor".into(),
                index,
            });
        }
        Ok(Self { values })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        crate::scalar::dot(&self.values, &self.values).sqrt()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            values: self.values.iter().map(|&v| v * factor).collect(),
        }
    }
}

/// Integer class id per pixel, e.g. a prediction produced by argmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGrid {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl ClassGrid {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || classes.len() != height * width {
            return Err(Error::shape(
                "class grid",
                format!("{} values do not fill {height}x{width}", classes.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            classes: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }
}

/// Ground-truth class ids with a reserved undefined value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    grid: ClassGrid,
    undefined_id: u8,
}

impl LabelGrid {
    /// Validates every id against `num_classes`; `undefined_id` is always allowed.
    pub fn new(
        height: usize,
        width: usize,
        classes: Vec<u8>,
        num_classes: usize,
        undefined_id: u8,
    ) -> Result<Self> {
        let grid = ClassGrid::new(height, width, classes)?;
        if let Some(index) = grid
            .classes
            .iter()
            .position(|&id| id != undefined_id && id as usize >= num_classes)
        {
            return Err(Error::UnknownClassId {
                class_id: grid.classes[index],
                index,
                num_classes,
                undefined_id,
            });
        }
        Ok(Self { grid, undefined_id })
    }

    pub fn undefined_id(&self) -> u8 {
        self.undefined_id
    }

    pub fn grid(&self) -> &ClassGrid {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn classes(&self) -> &[u8] {
        &self.grid.classes
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.grid.get(row, col)
    }

    #[inline]
    pub fn is_undefined(&self, p: usize) -> bool {
        self.grid.classes[p] == self.undefined_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(h: usize, w: usize, nc: usize) -> LogitMap<f32> {
        LogitMap::new(h, w, nc, (0..h * w * nc).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn sequential_fill_indexing() {
        let m = seq(2, 2, 3);
        assert_eq!(m.value(1, 1, 2), 11.0);
        assert_eq!(m.pixel(0, 1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        let mut v: Vec<f32> = vec![0.0; 12];
        v[5] = f32::NAN;
        let err = LogitMap::new(2, 2, 3, v).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert!(LogitMap::<f32>::new(2, 2, 1, vec![0.0; 4]).is_err());
        assert!(LogitMap::<f32>::new(0, 2, 2, vec![]).is_err());
        assert!(LogitMap::<f32>::new(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn resample_same_size_is_identity() {
        let m = seq(3, 4, 2);
        assert_eq!(m.resample_bilinear(3, 4).unwrap(), m);
    }

    #[test]
    fn resample_constant_map_stays_constant() {
        let m = LogitMap::<f64>::from_fn(3, 5, 2, |_, _, n| n as f64 + 0.25).unwrap();
        let r = m.resample_bilinear(7, 2).unwrap();
        assert_eq!(r.dims(), (7, 2, 2));
        for px in r.pixels() {
            assert_eq!(px, &[0.25, 1.25]);
        }
    }

    #[test]
    fn resample_upsample_interpolates_linearly() {
        // 1x2 -> 1x4 with half-pixel centres: x = -0.25, 0.25, 0.75, 1.25.
        let m = LogitMap::<f64>::new(1, 2, 2, vec![0.0, 0.0, 4.0, 0.0]).unwrap();
        let r = m.resample_bilinear(1, 4).unwrap();
        let ch0: Vec<f64> = r.pixels().map(|p| p[0]).collect();
        assert_eq!(ch0, vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn resample_preserves_argmax_of_blocks_away_from_edges() {
        // Left half class 0, right half class 1, upsampled 2x.
        let m = LogitMap::<f64>::from_fn(4, 8, 2, |_, c, n| {
            if (c < 4) == (n == 0) {
                3.0
            } else {
                0.0
            }
        })
        .unwrap();
        let pred = m.resample_bilinear(8, 16).unwrap().argmax();
        for r in 0..8 {
            for c in 0..16 {
                if c < 6 {
                    assert_eq!(pred.get(r, c), 0);
                } else if c > 9 {
                    assert_eq!(pred.get(r, c), 1);
                }
            }
        }
    }

    #[test]
    fn label_grid_validates_ids() {
        let err = LabelGrid::new(1, 2, vec![3, 200], 19, UNDEFINED_ID).unwrap_err();
        assert!(err.to_string().contains("unknown class id"));
        assert!(LabelGrid::new(1, 2, vec![18, 255], 19, UNDEFINED_ID).is_ok());
    }

    #[test]
    fn descriptor_basics() {
        let d = Descriptor::new(vec![1.0f32, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.dims(), 4);
        assert_eq!(d.norm(), 1.0);
        assert!(Descriptor::<f32>::new(vec![f32::INFINITY]).is_err());
    }
}
