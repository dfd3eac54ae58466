//! Small convolutional encoders with hand-written reverse mode.

mod checkpoint;
mod layers;
mod model;
mod optim;
mod oracle;

pub use checkpoint::{load_tensors, save_tensors, StateTensor};
pub use layers::{BatchNorm, Conv2d, Layer, Relu, Sequential};
pub use model::{EncoderSpec, ProjectionHead, Segmenter};
pub use optim::{sgd_momentum_step, Sgd};
pub use oracle::OracleTeacher;

use crate::error::{CirkdError, Result};
use crate::matrix::{DenseMatrix, FeatureMap, LogitMap};

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// A batch of images or activations in NHWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_data(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(CirkdError::shape(
                "Tensor::from_data",
                format!("{} values for {n}x{h}x{w}x{c}", data.len()),
            ));
        }
        Ok(Self { n, h, w, c, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    #[inline]
    pub fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Stacks per-image `(H*W) x C` matrices into one batch.
    pub fn from_maps(h: usize, w: usize, maps: &[DenseMatrix]) -> Result<Self> {
        let c = maps.first().map_or(0, |m| m.cols());
        let mut data = Vec::with_capacity(maps.len() * h * w * c);
        for m in maps {
            if m.shape() != (h * w, c) {
                return Err(CirkdError::shape(
                    "Tensor::from_maps",
                    format!("{:?} for a {h}x{w}x{c} image", m.shape()),
                ));
            }
            data.extend_from_slice(m.data());
        }
        Tensor::from_data(maps.len(), h, w, c, data)
    }

    pub fn to_matrices(&self) -> Vec<DenseMatrix> {
        (0..self.n)
            .map(|i| {
                DenseMatrix::new(self.h * self.w, self.c, self.image(i).to_vec())
                    .expect("image slice matches its shape")
            })
            .collect()
    }

    pub fn to_feature_maps(&self) -> Vec<FeatureMap> {
        self.to_matrices()
            .into_iter()
            .map(|m| FeatureMap::new(self.h, self.w, m).expect("consistent shape"))
            .collect()
    }

    pub fn to_logit_maps(&self) -> Result<Vec<LogitMap>> {
        self.to_matrices()
            .into_iter()
            .map(|m| LogitMap::new(self.h, self.w, m))
            .collect()
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CirkdError::shape(
                "Tensor::add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CirkdError::NumericOverflow(what.to_string()))
        }
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
