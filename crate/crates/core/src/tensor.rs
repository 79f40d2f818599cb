//! Raster-ordered volumes.
//!
//! Elements are stored channel first: all channels of one pixel, then the
//! next pixel along a line, then the next line. For an element `(x, y, z)`
//! with `x` the line index, `y` the position within the line and `z` the
//! channel, the linear index is `((x * rows) + y) * depth + z`, where `rows`
//! is the line length (the image row size).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    /// Line length (row size, the `y` extent).
    pub rows: usize,
    /// Number of lines (the `x` extent).
    pub cols: usize,
    pub depth: usize,
}

impl Dims {
    pub const fn new(rows: usize, cols: usize, depth: usize) -> Self {
        Self { rows, cols, depth }
    }

    pub const fn square(size: usize, depth: usize) -> Self {
        Self::new(size, size, depth)
    }

    /// A flat vector of `len` values.
    pub const fn vector(len: usize) -> Self {
        Self::new(1, 1, len)
    }

    pub const fn len(self) -> usize {
        self.rows * self.cols * self.depth
    }

    pub const fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_square(self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn index(self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.cols && y < self.rows && z < self.depth);
        ((x * self.rows) + y) * self.depth + z
    }

    /// Inverse of [`Dims::index`].
    pub fn coords(self, index: usize) -> (usize, usize, usize) {
        let z = index % self.depth;
        let pixel = index / self.depth;
        (pixel / self.rows, pixel % self.rows, z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("tensor data has {got} elements but dims {dims:?} need {want}")]
pub struct ShapeError {
    pub dims: Dims,
    pub want: usize,
    pub got: usize,
}

impl<T> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self, ShapeError> {
        if data.len() != dims.len() {
            return Err(ShapeError {
                dims,
                want: dims.len(),
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.dims.index(x, y, z)]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Same data viewed as a flat vector.
    pub fn flatten(self) -> Self {
        Self {
            dims: Dims::vector(self.data.len()),
            data: self.data,
        }
    }
}

impl<T: Clone> Tensor<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }
}

impl<T> core::ops::Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}
