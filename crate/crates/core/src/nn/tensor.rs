use super::Scalar;
use crate::error::{Error, Result};

/// Dense `(n, h, w, c)` tensor, row-major with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn h(&self) -> usize {
        self.shape[1]
    }
    pub fn w(&self) -> usize {
        self.shape[2]
    }
    pub fn c(&self) -> usize {
        self.shape[3]
    }

    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, i: usize) -> &[T] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::of(v.f64()))
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks single items along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("cannot stack zero tensors"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::contract(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            shape[0] += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape, data })
    }

    /// Per-cell argmax over channels; ties go to the lowest index.
    pub fn argmax_channels(&self) -> Vec<u32> {
        self.data
            .chunks_exact(self.c())
            .map(|cell| {
                let mut best = 0;
                for (i, &v) in cell.iter().enumerate().skip(1) {
                    if v > cell[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}
