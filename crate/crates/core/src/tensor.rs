//! Dense row-major tensors and flattened parameter vectors.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional `f64` array in row-major order.
///
/// The leading axis is the batch axis whenever a tensor carries examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidShape {
                shape,
                values: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// A trainable tensor.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, values)?;
        t.requires_grad = true;
        Ok(t)
    }

    /// Stack equal-length rows into an `[n, d]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], row_len: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * row_len);
        for r in rows {
            let r = r.as_ref();
            if r.len() != row_len {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![row_len],
                    rhs: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), row_len],
            values,
            requires_grad: false,
            grad: None,
        })
    }

    /// Empty batch with the given per-example shape.
    pub fn empty_rows(row_shape: &[usize]) -> Self {
        let mut shape = vec![0];
        shape.extend_from_slice(row_shape);
        Self {
            shape,
            values: Vec::new(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of examples along the leading axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of scalars per example.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.row_len();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.row_len();
        &mut self.values[i * d..(i + 1) * d]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        let d = self.row_len().max(1);
        self.values.chunks(d)
    }

    /// Gather rows by index into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let d = self.row_len();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// Concatenate along the leading axis. All parts must share a row shape.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyPool)?;
        let row_shape = first.row_shape().to_vec();
        let mut values = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.row_shape() != row_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            values.extend_from_slice(&p.values);
            n += p.rows();
        }
        let mut shape = vec![n];
        shape.extend(row_shape);
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::InvalidShape {
                shape,
                values: self.values.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Ordered description of where each parameter lives in a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl Layout {
    pub fn of(params: &[Parameter]) -> Self {
        let mut offset = 0;
        let entries = params
            .iter()
            .map(|p| {
                let e = LayoutEntry {
                    name: p.name.clone(),
                    offset,
                    shape: p.tensor.shape().to_vec(),
                };
                offset += p.tensor.len();
                e
            })
            .collect();
        Self {
            entries,
            len: offset,
        }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flattened parameters or gradients of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    entries: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != layout.len() {
            return Err(Error::ShapeMismatch {
                op: "ParamVector::new",
                lhs: vec![layout.len()],
                rhs: vec![entries.len()],
            });
        }
        Ok(Self { entries, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            entries: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|a| a * a).sum()
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.axpy(1.0, other)
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &ParamVector) -> Result<ParamVector> {
        self.check(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(ParamVector {
            entries,
            layout: self.layout.clone(),
        })
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector {
            entries: self.entries.iter().map(|a| a * alpha).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }
}

/// Inner product of two flattened vectors sharing a layout.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.dot(b)
}

/// Concatenate the values of `params` in layout order.
pub fn flatten_values(params: &[Parameter], layout: Arc<Layout>) -> Result<ParamVector> {
    let entries = params
        .iter()
        .flat_map(|p| p.tensor.values().iter().copied())
        .collect();
    ParamVector::new(layout, entries)
}

/// Concatenate the gradients of `params` in layout order.
pub fn flatten_grads(params: &[Parameter], layout: Arc<Layout>) -> Result<ParamVector> {
    let mut entries = Vec::with_capacity(layout.len());
    for p in params {
        let g = p
            .tensor
            .grad()
            .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
        entries.extend_from_slice(g);
    }
    ParamVector::new(layout, entries)
}

/// Split a flat vector back into named parameters.
pub fn unflatten(v: &ParamVector) -> Vec<Parameter> {
    v.layout
        .entries()
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let values = v.entries[e.offset..e.offset + n].to_vec();
            let mut tensor = Tensor::new(e.shape.clone(), values).expect("layout shape");
            tensor.requires_grad = true;
            Parameter {
                name: e.name.clone(),
                tensor,
            }
        })
        .collect()
}
