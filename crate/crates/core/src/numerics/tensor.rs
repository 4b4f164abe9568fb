use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
///
/// `grad` is filled in by [`Graph::backward`](super::Graph::backward) for
/// tensors that were bound into a graph with `requires_grad` set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a matrix from nested rows, mainly for tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("tensor", "ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::lit(v)))
            .collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and nonnegative");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::lit(normal.sample(rng))).collect();
        Self::new(shape.to_vec(), data).expect("positive extents")
    }

    pub fn rand_uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..numel).map(|_| T::lit(dist.sample(rng))).collect()
        } else {
            vec![T::zero(); numel]
        };
        Self::new(shape.to_vec(), data).expect("positive extents")
    }

    /// Glorot-uniform initialisation for a `fan_in × fan_out` matrix.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::rand_uniform(&[fan_in, fan_out], bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(
                "tensor",
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
