//! Dense `f32` tensors and a reverse-mode tape over them.
//!
//! The networks run in single precision. Loss terms are evaluated in double
//! precision by `distill_math`; the trainer moves values across with
//! [`Tensor::to_array4`] and friends and seeds the tape with the resulting
//! gradients.

mod conv;
mod gemm;
mod ops;
mod tape;

pub use conv::{conv2d, conv_transpose2d, ConvSpec};
pub use ops::{
    add, batch_norm, concat_channels, global_avg_pool, linear, relu, BatchNormMode, BnStats,
};
pub use tape::{Backward, Gradients, Tape, Var};

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(Error::invalid(format!("expected a rank-4 tensor, got shape {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::invalid(format!("expected a rank-2 tensor, got shape {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn to_array4(&self) -> Result<Array4<f64>> {
        let (b, c, h, w) = self.dims4()?;
        Ok(Array4::from_shape_vec(
            (b, c, h, w),
            self.data.iter().map(|&x| x as f64).collect(),
        )
        .expect("shape checked"))
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let (r, c) = self.dims2()?;
        Ok(Array2::from_shape_vec((r, c), self.data.iter().map(|&x| x as f64).collect())
            .expect("shape checked"))
    }

    pub fn from_array4(a: &Array4<f64>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: a.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_array3(a: &Array3<f64>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: a.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: a.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Samples `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let b = *self.shape.first().ok_or_else(|| Error::invalid("empty shape"))?;
        if start > end || end > b {
            return Err(Error::invalid(format!("batch slice {start}..{end} of {b}")));
        }
        let per = self.data.len() / b.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        })
    }
}
