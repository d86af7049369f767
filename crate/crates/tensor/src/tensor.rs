use crate::error::{shape_err, Result};

/// Dense row-major array of `f64` values.
///
/// Tensors are plain values; participation in a differentiation graph is
/// tracked by [`crate::Var`] handles that point into a [`crate::Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("{} values for a positive shape", data.len()),
                shape,
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape is known to match `data`. Panics otherwise.
    pub fn from_parts(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape, data).expect("shape and data length agree")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(&[1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(&[n], data)
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// `[rows, cols]` view used by spectral norm, orthogonal init and the
    /// orthogonality penalty: the trailing axis is the column axis and all
    /// leading axes are flattened into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.numel() / cols, cols)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Concatenates tensors along axis 0. Trailing extents must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat0", "at least one part", &[]))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err("concat0", format!("[_, {tail:?}]"), &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Self::new(&shape, data)
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice0(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape[0] {
            return Err(shape_err("slice0", format!("at least {} rows", start + len), &self.shape));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(&shape, self.data[start * stride..(start + len) * stride].to_vec())
    }
}
