use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} elements, data has {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
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

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {} out of range on axis {}", ix, i);
            off = off * ext + ix;
        }
        off
    }

    /// Overflow-safe softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis, "softmax")?;
        let mut out = vec![0.0; self.data.len()];
        softmax_kernel(&self.data, &mut out, outer, len, inner);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Decompose `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_kernel(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(x[base + k * inner]);
            }
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                out[base + k * inner] /= total;
            }
        }
    }
}

pub(crate) fn log_softmax_kernel(
    x: &[f64],
    out: &mut [f64],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(x[base + k * inner]);
            }
            let mut total = 0.0;
            for k in 0..len {
                total += (x[base + k * inner] - max).exp();
            }
            let lse = max + total.ln();
            for k in 0..len {
                out[base + k * inner] = x[base + k * inner] - lse;
            }
        }
    }
}
