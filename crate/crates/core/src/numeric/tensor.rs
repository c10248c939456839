use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// A 3D scalar grid (depth, height, width).
pub type VoxelVolume = Tensor;

/// A 3D grid of probabilities or binary labels.
pub type VoxelMask = Tensor;

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} need {n} entries, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!("non-finite entry at {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn from_array2(a: Array2<f64>) -> Self {
        let dims = vec![a.nrows(), a.ncols()];
        let data = if a.is_standard_layout() {
            a.into_raw_vec_and_offset().0
        } else {
            a.iter().copied().collect()
        };
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::dims(dims, &self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn ensure_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dims(&self.dims, &other.dims));
        }
        Ok(())
    }

    /// Flat offset of a 3D index.
    pub fn offset3(&self, z: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 3);
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = self.matrix_shape();
        ArrayView2::from_shape((r, c), &self.data).expect("row-major layout")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = self.matrix_shape();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("row-major layout")
    }

    /// Treats the tensor as a matrix: rank-1 tensors become a single row,
    /// higher ranks fold every leading axis into rows.
    fn matrix_shape(&self) -> (usize, usize) {
        match self.dims.len() {
            0 => (1, 1),
            1 => (1, self.dims[0]),
            _ => {
                let c = *self.dims.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_dims(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<()> {
        self.ensure_same_dims(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += s * b);
        Ok(())
    }

    /// Order-fixed bit pattern of the contents, used for freeze checks.
    pub fn bit_pattern(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// Scalar loss plus its gradient with respect to named parameters.
#[derive(Debug, Clone, Default)]
pub struct LossWithGrad {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor>,
}

impl LossWithGrad {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_grad(mut self, name: impl Into<String>, grad: Tensor) -> Self {
        self.grads.insert(name.into(), grad);
        self
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Accumulates `scale * other` into `self`, merging gradient maps.
    pub fn accumulate(&mut self, other: &LossWithGrad, scale: f64) -> Result<()> {
        self.value += scale * other.value;
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.add_scaled(g, scale)?,
                None => {
                    let mut g = g.clone();
                    g.scale(scale);
                    self.grads.insert(k.clone(), g);
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(Tensor::is_finite)
    }
}
