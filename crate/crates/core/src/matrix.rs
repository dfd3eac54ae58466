//! Dense row-major matrices and the per-image map types built on them.
//!
//! Every spatial map is flattened so that pixel `(h, w)` lives in row
//! `h * width + w`; an `H x W x d` feature map is therefore an `A x d`
//! matrix with `A = H * W`.

use crate::error::{CirkdError, Result};

/// Label sentinel for pixels excluded from supervision and metrics.
pub const DEFAULT_IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CirkdError::shape(
                "DenseMatrix::new",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &DenseMatrix, k: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CirkdError::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(CirkdError::shape(
                    "vstack",
                    format!("{} vs {} columns", m.cols, cols),
                ));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(DenseMatrix { rows, cols, data })
    }
}

/// A dense `H x W x d` embedding grid flattened to `A x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    flat: DenseMatrix,
    normalized: bool,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, flat: DenseMatrix) -> Result<Self> {
        if flat.rows() != height * width {
            return Err(CirkdError::shape(
                "FeatureMap::new",
                format!("{} rows for a {height}x{width} grid", flat.rows()),
            ));
        }
        Ok(Self {
            height,
            width,
            flat,
            normalized: false,
        })
    }

    /// Wraps a matrix whose rows the caller guarantees are unit length.
    pub(crate) fn new_normalized(height: usize, width: usize, flat: DenseMatrix) -> Self {
        debug_assert_eq!(flat.rows(), height * width);
        Self {
            height,
            width,
            flat,
            normalized: true,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.flat.cols()
    }

    #[inline]
    pub fn flat(&self) -> &DenseMatrix {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut DenseMatrix {
        self.normalized = false;
        &mut self.flat
    }

    pub fn into_flat(self) -> DenseMatrix {
        self.flat
    }

    #[inline]
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Returns the row-normalized map.
    pub fn normalized(&self) -> Result<FeatureMap> {
        if self.normalized {
            return Ok(self.clone());
        }
        let flat = crate::embedding::l2_normalize_rows(&self.flat)?;
        Ok(FeatureMap::new_normalized(self.height, self.width, flat))
    }
}

/// Per-pixel class labels with an ignore sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    ignore_index: u8,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, ignore_index: u8) -> Result<Self> {
        if labels.len() != height * width {
            return Err(CirkdError::shape(
                "LabelMap::new",
                format!("{} labels for a {height}x{width} grid", labels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
            ignore_index,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8, ignore_index: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
            ignore_index,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> u8 {
        self.labels[h * self.width + w]
    }

    #[inline]
    pub fn is_ignored(&self, idx: usize) -> bool {
        self.labels[idx] == self.ignore_index
    }

    /// Class id at flat index `idx`, or `None` for ignored pixels.
    #[inline]
    pub fn class_at(&self, idx: usize) -> Option<usize> {
        let l = self.labels[idx];
        (l != self.ignore_index).then_some(l as usize)
    }

    /// Checks that every non-ignored label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &l in &self.labels {
            if l != self.ignore_index && l as usize >= num_classes {
                return Err(CirkdError::ClassOutOfRange {
                    class_id: l as usize,
                    num_classes,
                });
            }
        }
        Ok(())
    }
}

/// An `H x W x C` logit map flattened to `A x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    flat: DenseMatrix,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, flat: DenseMatrix) -> Result<Self> {
        if flat.rows() != height * width {
            return Err(CirkdError::shape(
                "LogitMap::new",
                format!("{} rows for a {height}x{width} grid", flat.rows()),
            ));
        }
        if !flat.is_finite() {
            return Err(CirkdError::NumericOverflow("logit map".into()));
        }
        Ok(Self {
            height,
            width,
            flat,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.flat.cols()
    }

    #[inline]
    pub fn flat(&self) -> &DenseMatrix {
        &self.flat
    }

    /// Per-pixel argmax class.
    pub fn argmax(&self, ignore_index: u8) -> LabelMap {
        let labels = self
            .flat
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
            ignore_index,
        }
    }
}
