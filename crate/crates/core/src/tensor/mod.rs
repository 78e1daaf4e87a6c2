//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a plain value (shape plus row-major data). Differentiable
//! computation happens on a [`Graph`]: leaves are registered with
//! [`Graph::param`] (tracked) or [`Graph::constant`] (untracked), every op
//! appends a node, and [`Graph::backward`] walks the nodes in reverse to
//! produce [`Gradients`]. Backward never mutates the graph, so calling it twice
//! returns the same gradients rather than accumulating them.

mod check;
mod graph;
mod ops;

pub use check::finite_difference_check;
pub use graph::{Gradients, Graph, Var};
pub use ops::BatchStats;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::invalid(
                "tensor",
                format!("zero extent in {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `(rows, cols)` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Length of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Iterator over slices along the last axis.
    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.last_dim().max(1))
    }

    /// Index of the largest entry of each last-axis row (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }

    /// Selects rows along the leading axis.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let row = self.data.len() / self.shape[0].max(1);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One-hot `(n, k)` matrix from class indices.
    pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
        let mut data = vec![0.0; labels.len() * k];
        for (row, &c) in labels.iter().enumerate() {
            data[row * k + c] = 1.0;
        }
        Tensor {
            shape: vec![labels.len(), k],
            data,
        }
    }

    /// Concatenates along the leading axis. All trailing extents must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut lead = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax over the last axis of a plain tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let k = t.last_dim();
    for row in out.data.chunks_mut(k) {
        ops::softmax_in_place(row);
    }
    out
}
