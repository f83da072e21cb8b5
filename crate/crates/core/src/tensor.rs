//! Dense row-major `f32` tensors and the binary retain mask.

use crate::error::{Error, Result};

/// N-dimensional row-major array of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    name: Option<String>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor needs at least one axis".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows usize")))?;
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            name: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::matrix(n, n, data).expect("square identity")
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub(crate) fn set_name(&mut self, name: Option<String>) {
        self.name = name;
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Shape(format!(
                "index {index:?} has {} axes, tensor has {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0;
        for ((&i, &d), s) in index.iter().zip(&self.shape).zip(self.strides()) {
            if i >= d {
                return Err(Error::Shape(format!(
                    "index {index:?} out of bounds for {:?}",
                    self.shape
                )));
            }
            flat += i * s;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f32> {
        Ok(self.data[self.flat_index(index)?])
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let mut out = Self::new(shape, self.data.clone())?;
        out.name = self.name.clone();
        Ok(out)
    }

    /// (rows, cols) of a 2-axis tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::Shape(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&x| x == 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of shape and data, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &DenseTensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Flattens a `(C_out, C_in, H, W)` convolution kernel to `(C_out, C_in*H*W)`.
pub fn flatten_conv(w: &DenseTensor) -> Result<DenseTensor> {
    match w.shape() {
        &[c_out, c_in, h, kw] => w.reshape(vec![c_out, c_in * h * kw]),
        other => Err(Error::Shape(format!(
            "flatten_conv expects 4 axes (C_out, C_in, H, W), got {other:?}"
        ))),
    }
}

/// Inverse of [`flatten_conv`].
pub fn unflatten_conv(w_f: &DenseTensor, original: &[usize]) -> Result<DenseTensor> {
    if original.len() != 4 {
        return Err(Error::Shape(format!(
            "original shape {original:?} is not 4-axis"
        )));
    }
    let (m, n) = w_f.dims2()?;
    if m != original[0] || n != original[1] * original[2] * original[3] {
        return Err(Error::Shape(format!(
            "matrix {m}x{n} does not flatten {original:?}"
        )));
    }
    w_f.reshape(original.to_vec())
}

/// View any 2- or 4-axis weight tensor as a matrix.
pub fn as_matrix(w: &DenseTensor) -> Result<DenseTensor> {
    match w.ndim() {
        2 => Ok(w.clone()),
        4 => flatten_conv(w),
        k => Err(Error::Shape(format!(
            "weights must have 2 or 4 axes, got {k} ({:?})",
            w.shape()
        ))),
    }
}

/// Binary keep (1) / prune (0) mask congruent to a weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl RetainMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != bits.len() {
            return Err(Error::Shape(format!(
                "mask shape {shape:?} does not match {} bits",
                bits.len()
            )));
        }
        Ok(Self { shape, bits })
    }

    pub fn all_retained(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            bits: vec![true; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn retained(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pruned(&self) -> usize {
        self.len() - self.retained()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned() as f64 / self.len() as f64
    }

    /// Zero every pruned entry of `w`.
    pub fn apply(&self, w: &DenseTensor) -> Result<DenseTensor> {
        if w.numel() != self.len() {
            return Err(Error::Shape(format!(
                "mask of {} elements cannot apply to shape {:?}",
                self.len(),
                w.shape()
            )));
        }
        let data = w
            .data()
            .iter()
            .zip(&self.bits)
            .map(|(&x, &keep)| if keep { x } else { 0.0 })
            .collect();
        DenseTensor::new(w.shape().to_vec(), data)
    }

    /// Same bits viewed under another shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.bits.clone())
    }

    pub fn to_tensor(&self) -> DenseTensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        DenseTensor::new(self.shape.clone(), data).expect("mask shape is valid")
    }

    /// Reads a 0/1 tensor back into a mask; any other value is rejected.
    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        let bits = t
            .data()
            .iter()
            .map(|&x| match x {
                1.0 => Ok(true),
                0.0 => Ok(false),
                v => Err(Error::InvalidArgument(format!(
                    "mask entry {v} is not 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(t.shape().to_vec(), bits)
    }
}
