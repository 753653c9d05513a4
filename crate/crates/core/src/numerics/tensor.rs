use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// Tensors are immutable values: every operation allocates its result. Public
/// constructors and operations reject NaN/Inf so downstream code can rely on
/// finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Construct without the finite check; for internal kernels that
    /// validate their own output.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    /// Standard-normal samples drawn from `rng`, one per element.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::shape("Tensor::item", format!("shape {:?} is not scalar", self.shape)))
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                context,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, context: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, context)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    /// Euclidean norm over all elements.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of squared differences, `‖self − other‖²`.
    pub fn squared_distance(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "squared_distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Index of the largest element; ties resolve to the first.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {} vs {}", k, k2),
            ));
        }
        Ok(matmul_kernel(&self.data, &other.data, m, k, n))
    }

    pub(crate) fn dims2(&self, context: &str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::shape(context, format!("rank-2 required, got {:?}", self.shape)))
        }
    }

    pub(crate) fn row(&self, r: usize) -> &[f64] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[r * n..(r + 1) * n]
    }
}

/// C = A·B for row-major buffers, A: m×k, B: k×n.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

/// C = A·Bᵀ, A: m×n, B: k×n, result m×k.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor, m: usize, n: usize, k: usize) -> Tensor {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = a.row(i);
        for kk in 0..k {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            out[i * k + kk] = acc;
        }
    }
    Tensor::from_raw(vec![m, k], out)
}

/// C = Aᵀ·B, A: m×k, B: m×n, result k×n.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (kk, &av) in a_row.iter().enumerate() {
            let c_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
    Tensor::from_raw(vec![k, n], out)
}
