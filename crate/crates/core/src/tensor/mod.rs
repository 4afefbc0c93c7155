//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain value. Gradient tracking lives in [`Graph`], which
//! records every operation on [`Var`] handles and replays the tape backwards.
//! Storage is `f64` throughout.

mod graph;
mod io;

pub use graph::{Gradients, Graph, Var};
pub use io::{read_bkt, read_bkt_from, write_bkt, write_bkt_to, BKT_MAGIC};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// `(outer, len, inner)` for iterating along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid_shape(
                "tensor",
                &shape,
                "zero-sized dimension",
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                &shape,
                format!("expects {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn randn(shape: &[usize], rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: rng.normals(n),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::invalid_shape("item", &self.shape, "not a scalar"))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Generalized transpose: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid_shape(
                "permute",
                &self.shape,
                format!("bad axes {axes:?}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut in_strides = vec![1usize; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            in_strides[k] = in_strides[k + 1] * self.shape[k + 1];
        }
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[offset]);
            for k in (0..rank).rev() {
                idx[k] += 1;
                offset += strides[k];
                if idx[k] < out_shape[k] {
                    break;
                }
                offset -= strides[k] * out_shape[k];
                idx[k] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `Σ coeff_i · tensor_i`, all tensors of identical shape.
    pub fn lincomb(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("lincomb of no terms".into()))?;
        let mut out = vec![0.0; first.numel()];
        for (c, t) in terms {
            if t.shape != first.shape {
                return Err(Error::shape("lincomb", &first.shape, &t.shape));
            }
            for (o, &v) in out.iter_mut().zip(&t.data) {
                *o += c * v;
            }
        }
        Ok(Tensor {
            shape: first.shape.clone(),
            data: out,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("sub", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
