//! Dense row-major `f64` arrays.
//!
//! Feature maps use the (batch, channel, height, width) layout throughout.
//! A tensor with an empty `data` buffer is a *meta* tensor: it carries a shape
//! only and is produced when a graph runs in shape-tracing mode.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub(crate) fn meta(shape: Vec<usize>) -> Self {
        Self {
            shape,
            data: Vec::new(),
        }
    }

    pub fn is_meta(&self) -> bool {
        self.data.is_empty() && self.numel() > 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
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

    /// Returns `(n, c, h, w)` or a shape error if the tensor is not 4-D.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected a 4-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `[start, start + len)` of a 4-D tensor.
    /// Per-pixel index of the largest channel; ties go to the lower index.
    pub fn argmax_channels(&self) -> Result<Labels> {
        let (n, c, h, w) = self.dims4()?;
        if c == 0 || c > 256 {
            return Err(shape_err!("argmax needs 1 to 256 channels, got {}", c));
        }
        let plane = h * w;
        let mut out = vec![0u8; n * plane];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut best = 0;
                let mut best_v = self.data[base + p];
                for ch in 1..c {
                    let v = self.data[base + ch * plane + p];
                    if v > best_v {
                        best = ch;
                        best_v = v;
                    }
                }
                out[b * plane + p] = best as u8;
            }
        }
        Labels::new([n, h, w], out)
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(items.len() * first.numel());
        let mut n = 0;
        for t in items {
            if t.shape.is_empty() || &t.shape[1..] != tail {
                return Err(shape_err!("cannot stack {:?} with {:?}", first.shape, t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(shape_err!(
                "channel range {}..{} out of bounds for {} channels",
                start,
                start + len,
                c
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor::from_parts(vec![n, len, h, w], out))
    }
}

/// Per-pixel class indices laid out as (N, H, W).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl Labels {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "label shape {:?} needs {} entries, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: u8) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Stacks single-image label maps of equal size into one batch.
    pub fn stack(items: &[&Labels]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err!("cannot stack zero label maps"))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * h * w);
        let mut n = 0;
        for l in items {
            if l.shape[1..] != [h, w] {
                return Err(shape_err!("label maps {:?} and {:?} differ", first.shape, l.shape));
            }
            data.extend_from_slice(&l.data);
            n += l.shape[0];
        }
        Ok(Self { shape: [n, h, w], data })
    }
}
