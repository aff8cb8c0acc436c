use crate::error::{Error, Result};

use super::Real;

/// Dense `(n, c, d, h, w)` array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![T::default(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 5], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, [n, c, z, y, x]: [usize; 5]) -> usize {
        let [_, sc, sd, sh, sw] = self.shape;
        (((n * sc + c) * sd + z) * sh + y) * sw + x
    }

    #[inline]
    pub fn get(&self, idx: [usize; 5]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let s = self.spatial();
        let start = (n * self.shape[1] + c) * s;
        &self.data[start..start + s]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let s = self.spatial();
        let start = (n * self.shape[1] + c) * s;
        &mut self.data[start..start + s]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape[1] * self.spatial();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape[1] * self.spatial();
        &mut self.data[n * s..(n + 1) * s]
    }
}

impl<T: Real> Tensor5<T> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor5<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor5<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}
