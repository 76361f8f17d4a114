//! Dense row-major `f64` tensors and the eager kernels the autodiff graph is
//! built from.
//!
//! Tensors are plain values: every kernel returns a fresh tensor and never
//! mutates its inputs. Broadcasting is limited to adding a bias vector over
//! the last dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;

/// Replacement value for masked attention scores. `exp` of anything this
/// negative underflows to exactly zero in `f64`.
pub const MASK_SENTINEL: f64 = -1.0e30;

type TResult<T> = Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TResult<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "new",
                shape,
                reason: "all dimensions must be positive",
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Dimension {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A `1×n` row vector.
    pub fn row(data: Vec<f64>) -> TResult<Self> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    /// A 1-D tensor of shape `[n]`.
    pub fn vector(data: Vec<f64>) -> TResult<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> TResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Shape {
                op: "from_rows",
                shape: vec![r, c],
                reason: "ragged rows",
            });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of slices along the last dimension.
    pub fn outer_len(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.last_dim() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> TResult<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::Shape {
                op: "item",
                shape: self.shape.clone(),
                reason: "expected a single element",
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> TResult<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn dims2(&self, op: &'static str) -> TResult<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(TensorError::Shape {
                op,
                shape: self.shape.clone(),
                reason: "expected a matrix",
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> TResult<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> TResult<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> TResult<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> TResult<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> TResult<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> TResult<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> TResult<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// Adds `bias` (length = last dimension) to every slice along the last
    /// dimension.
    pub fn add_bias(&self, bias: &Tensor) -> TResult<Tensor> {
        let c = self.last_dim();
        if bias.len() != c {
            return Err(TensorError::Dimension {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn softmax_lastdim(&self) -> TResult<Tensor> {
        let c = self.last_dim();
        let mut data = self.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Normalizes each last-dimension slice to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> TResult<Tensor> {
        Ok(self.layer_norm_parts(gain, bias, eps)?.0)
    }

    /// Layer norm plus the normalized activations and per-slice inverse
    /// standard deviations needed by the backward pass.
    pub(crate) fn layer_norm_parts(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> TResult<(Tensor, Vec<f64>, Vec<f64>)> {
        let c = self.last_dim();
        if gain.len() != c || bias.len() != c {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(self.len());
        let mut normed = Vec::with_capacity(self.len());
        let mut inv_std = Vec::with_capacity(self.outer_len());
        for row in self.data.chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let denom = (var + eps).sqrt();
            // Zero variance with eps = 0: every centered value is 0, keep it 0.
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv;
                normed.push(xhat);
                out.push(gain.data[j] * xhat + bias.data[j]);
            }
        }
        let out = Tensor {
            shape: self.shape.clone(),
            data: out,
        };
        Ok((out, normed, inv_std))
    }

    /// Replaces entries where `mask` is `true` with [`MASK_SENTINEL`].
    pub fn masked_fill(&self, mask: &[bool]) -> TResult<Tensor> {
        if mask.len() != self.len() {
            return Err(TensorError::Dimension {
                op: "masked_fill",
                lhs: self.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let data = self
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { MASK_SENTINEL } else { v })
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn concat_lastdim(parts: &[&Tensor]) -> TResult<Tensor> {
        let first = parts.first().ok_or(TensorError::Shape {
            op: "concat_lastdim",
            shape: vec![],
            reason: "nothing to concatenate",
        })?;
        let outer = first.outer_len();
        let lead = &first.shape[..first.shape.len() - 1];
        for p in parts {
            if p.outer_len() != outer || &p.shape[..p.shape.len() - 1] != lead {
                return Err(TensorError::Dimension {
                    op: "concat_lastdim",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for p in parts {
                data.extend_from_slice(p.row_slice(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(shape, data)
    }

    /// Stacks matrices with equal column counts along the first dimension.
    pub fn stack_rows(parts: &[&Tensor]) -> TResult<Tensor> {
        let first = parts.first().ok_or(TensorError::Shape {
            op: "stack_rows",
            shape: vec![],
            reason: "nothing to stack",
        })?;
        let c = first.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.dims2("stack_rows")?;
            if pc != c {
                return Err(TensorError::Dimension {
                    op: "stack_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, c], data)
    }

    pub fn slice_lastdim(&self, start: usize, len: usize) -> TResult<Tensor> {
        let c = self.last_dim();
        if len == 0 || start + len > c {
            return Err(TensorError::Shape {
                op: "slice_lastdim",
                shape: self.shape.clone(),
                reason: "slice out of range",
            });
        }
        let mut data = Vec::with_capacity(self.outer_len() * len);
        for row in self.data.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Tensor::new(shape, data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> TResult<Tensor> {
        let (r, c) = self.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::Shape {
                op: "slice_rows",
                shape: self.shape.clone(),
                reason: "row range out of bounds",
            });
        }
        Tensor::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    /// Mean over rows of a matrix, giving a `1×c` row vector.
    pub fn mean_rows(&self) -> TResult<Tensor> {
        let (r, c) = self.dims2("mean_rows")?;
        let mut data = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        Tensor::new(vec![1, c], data)
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// Gathers rows of a `V×E` table, giving `L×E`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> TResult<Tensor> {
        let (v, e) = self.dims2("embedding_lookup")?;
        if ids.is_empty() {
            return Err(TensorError::Shape {
                op: "embedding_lookup",
                shape: vec![0],
                reason: "no ids",
            });
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, size: v });
            }
            data.extend_from_slice(&self.data[id * e..(id + 1) * e]);
        }
        Tensor::new(vec![ids.len(), e], data)
    }

    /// Uniform initialization in ±√(6/(fan_in+fan_out)) for a `rows×cols`
    /// weight matrix.
    pub fn xavier(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor::new(vec![rows, cols], data).expect("positive shape")
    }

    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation (the GPT-2 variant).
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// Seeded pseudo-random source. The generator is ChaCha8 (`rand_chacha`),
/// whose output stream is fixed by the seed on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("valid std").sample(&mut self.rng)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(TensorError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::vector(vec![0.0, 0.0]).unwrap().softmax_lastdim().unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);

        let t = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().softmax_lastdim().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in t.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((t.data()[0] - 0.09003).abs() < 1e-5);
        assert!((t.data()[2] - 0.66524).abs() < 1e-5);

        let t = Tensor::vector(vec![1000.0, 0.0]).unwrap().softmax_lastdim().unwrap();
        assert!(t.is_finite());
        assert_eq!(t.data()[0], 1.0);
        assert!(t.data()[1] < 1e-300);
    }

    #[test]
    fn empty_tensor_is_a_shape_error() {
        assert!(matches!(Tensor::new(vec![0], vec![]), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let t = Tensor::vector(vec![5.0, 5.0, 5.0]).unwrap();
        assert_eq!(t.layer_norm(&one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0, 0.0]);

        let t = Tensor::vector(vec![1.0, 3.0]).unwrap();
        let out = t
            .layer_norm(&Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 0.0)
            .unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);

        let bias = Tensor::vector(vec![0.25, -2.0]).unwrap();
        let out = t.layer_norm(&Tensor::zeros(&[2]), &bias, 1e-5).unwrap();
        assert_eq!(out, bias);
    }

    #[test]
    fn masked_softmax_rows() {
        let l = 3;
        let mask: Vec<bool> = (0..l * l).map(|k| k % l > k / l).collect();
        let probs = Tensor::zeros(&[l, l]).masked_fill(&mask).unwrap().softmax_lastdim().unwrap();
        assert_eq!(probs.row_slice(0), &[1.0, 0.0, 0.0]);
        assert_eq!(probs.row_slice(1), &[0.5, 0.5, 0.0]);
        for v in probs.row_slice(2) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_and_lookup() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 5]);
        assert_eq!(Tensor::concat_lastdim(&[&a, &b]).unwrap().shape(), &[2, 8]);

        let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(table.embedding_lookup(&[0]).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(
            table.embedding_lookup(&[2]),
            Err(TensorError::Index { index: 2, size: 2 })
        );
    }

    #[test]
    fn activations_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        let xs: Vec<f64> = (0..16).map(|_| a.uniform(-1.0, 1.0)).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.uniform(-1.0, 1.0)).collect();
        assert_eq!(xs, ys);
        assert_ne!(SeededRng::new(8).next_u64(), SeededRng::new(7).next_u64());
    }
}
