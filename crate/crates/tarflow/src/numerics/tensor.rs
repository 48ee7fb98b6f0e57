//! Dense multi-dimensional real arrays in row-major layout.
//!
//! Values are stored as `f64`. A tensor carries a [`Precision`] mode: in
//! `F32` mode every operation result is rounded to the nearest
//! f32-representable value, so stored values are genuine 32-bit floats while
//! reductions still accumulate at 64 bits. All correctness oracles run in
//! `F64` mode.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

/// Float mode carried by every tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// The weaker of two modes wins, so mixed expressions degrade explicitly.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

/// An immutable dense tensor. Clones share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Broadcast shape under trailing-dimension alignment; a size-1 axis stretches.
pub(crate) fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for d in 0..nd {
        let da = if d < nd - a.len() { 1 } else { a[d - (nd - a.len())] };
        let db = if d < nd - b.len() { 1 } else { b[d - (nd - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[d] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Strides of `shape` aligned into an `nd`-dim frame, with stride 0 on
/// broadcast (missing or size-1) axes.
fn broadcast_strides(shape: &[usize], nd: usize) -> Vec<usize> {
    let own = strides_for(shape);
    let mut out = vec![0; nd];
    let off = nd - shape.len();
    for d in 0..shape.len() {
        out[off + d] = if shape[d] == 1 { 0 } else { own[d] };
    }
    out
}

/// Walks every element of `out_shape`, yielding the flat offsets into two
/// broadcast operands.
fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    let total = numel(out_shape);
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..total {
        f(oi, ai, bi);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
        }
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let mut t = Tensor {
            shape,
            data: Arc::new(data),
            precision,
        };
        t.quantize_in_place();
        Ok(t)
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Tensor {
        Tensor {
            data: Arc::new(vec![0.0; numel(shape)]),
            shape: shape.to_vec(),
            precision,
        }
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Tensor {
        let mut t = Tensor {
            data: Arc::new(vec![value; numel(shape)]),
            shape: shape.to_vec(),
            precision,
        };
        t.quantize_in_place();
        t
    }

    pub fn scalar(value: f64, precision: Precision) -> Tensor {
        Tensor::full(&[], value, precision)
    }

    /// I.i.d. normal draws with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng, precision: Precision) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be positive and finite");
        let data = (0..numel(shape)).map(|_| dist.sample(rng)).collect();
        Tensor::from_vec(shape.to_vec(), data, precision).expect("length matches by construction")
    }

    /// Truncated normal: resamples draws outside two standard deviations.
    pub fn trunc_normal(
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
        precision: Precision,
    ) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be positive and finite");
        let data = (0..numel(shape))
            .map(|_| loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data, precision).expect("length matches by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarSeed {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = strides_for(&self.shape);
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// Converts to the given precision mode, rounding stored values if needed.
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        let mut t = self.clone();
        t.precision = precision;
        t.quantize_in_place();
        t
    }

    fn quantize_in_place(&mut self) {
        if self.precision == Precision::F32 {
            let data = Arc::make_mut(&mut self.data);
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn new_unquantized(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Tensor {
        let mut t = Tensor {
            shape,
            data: Arc::new(data),
            precision,
        };
        t.quantize_in_place();
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ---- elementwise binary ops (broadcasting) ----

    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let precision = self.precision.join(other.precision);
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor::new_unquantized(self.shape.clone(), data, precision));
        }
        let out_shape = broadcast_shapes(op, &self.shape, &other.shape)?;
        let nd = out_shape.len();
        let sa = broadcast_strides(&self.shape, nd);
        let sb = broadcast_strides(&other.shape, nd);
        let mut data = vec![0.0; numel(&out_shape)];
        for_each_broadcast2(&out_shape, &sa, &sb, |oi, ai, bi| {
            data[oi] = f(self.data[ai], other.data[bi]);
        });
        Ok(Tensor::new_unquantized(out_shape, data, precision))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data.iter().any(|&b| b == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".to_string(),
            });
        }
        self.binary(other, "div", |a, b| a / b)
    }

    // ---- elementwise unary ops ----

    fn unary(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::new_unquantized(self.shape.clone(), data, self.precision)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|v| -v)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(|v| v + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.unary(|v| v * s)
    }

    /// Elementwise exponential; signals overflow instead of returning inf.
    pub fn exp(&self) -> Result<Tensor> {
        let out = self.unary(f64::exp);
        if !out.all_finite() {
            return Err(Error::Domain {
                op: "exp",
                detail: format!("overflow, max input {:.3e}", self.max_abs()),
            });
        }
        Ok(out)
    }

    /// Natural log; errors on non-positive inputs.
    pub fn ln(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        Ok(self.unary(f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {v}"),
            });
        }
        Ok(self.unary(f64::sqrt))
    }

    /// GELU, tanh approximation. Kept as a primitive so its derivative is
    /// analytic on the tape.
    pub fn gelu(&self) -> Tensor {
        self.unary(gelu_scalar)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|v| v.clamp(lo, hi))
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            precision: self.precision,
        })
    }

    pub fn swap_axes(&self, i: usize, j: usize) -> Result<Tensor> {
        let nd = self.shape.len();
        if i >= nd || j >= nd {
            return Err(Error::Parameter {
                what: "swap_axes",
                detail: format!("axes ({i}, {j}) out of range for rank {nd}"),
            });
        }
        if i == j {
            return Ok(self.clone());
        }
        let mut out_shape = self.shape.clone();
        out_shape.swap(i, j);
        let in_strides = strides_for(&self.shape);
        let mut src_strides = in_strides;
        src_strides.swap(i, j);
        let mut data = vec![0.0; self.data.len()];
        let out_strides = strides_for(&out_shape);
        for (oi, slot) in data.iter_mut().enumerate() {
            let mut rem = oi;
            let mut si = 0;
            for d in 0..nd {
                let c = rem / out_strides[d];
                rem %= out_strides[d];
                si += c * src_strides[d];
            }
            *slot = self.data[si];
        }
        Ok(Tensor {
            shape: out_shape,
            data: Arc::new(data),
            precision: self.precision,
        })
    }

    /// 2-D transpose (swap of the last two axes).
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.shape.len();
        if nd < 2 {
            return Err(Error::Parameter {
                what: "transpose",
                detail: format!("needs rank >= 2, got {nd}"),
            });
        }
        self.swap_axes(nd - 2, nd - 1)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let joined = broadcast_shapes("broadcast_to", &self.shape, shape)?;
        if joined != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let nd = shape.len();
        let sa = broadcast_strides(&self.shape, nd);
        let zeros = vec![0; nd];
        let mut data = vec![0.0; numel(shape)];
        for_each_broadcast2(shape, &sa, &zeros, |oi, ai, _| {
            data[oi] = self.data[ai];
        });
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            precision: self.precision,
        })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Parameter {
            what: "concat",
            detail: "empty input list".to_string(),
        })?;
        let nd = first.shape.len();
        if axis >= nd {
            return Err(Error::Parameter {
                what: "concat",
                detail: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = 0;
        let mut precision = first.precision;
        for p in parts {
            let mut expect = p.shape.clone();
            if expect.len() != nd {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            expect[axis] = first.shape[axis];
            if expect != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            out_shape[axis] += p.shape[axis];
            precision = precision.join(p.precision);
        }
        // outer = product of dims before axis, inner = product after
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; numel(&out_shape)];
        let out_block = out_shape[axis] * inner;
        let mut axis_off = 0;
        for p in parts {
            let p_block = p.shape[axis] * inner;
            for o in 0..outer {
                let src = &p.data[o * p_block..(o + 1) * p_block];
                let dst_start = o * out_block + axis_off * inner;
                data[dst_start..dst_start + p_block].copy_from_slice(src);
            }
            axis_off += p.shape[axis];
        }
        Ok(Tensor::new_unquantized(out_shape, data, precision))
    }

    /// Contiguous slice of `len` entries along `axis`, starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let nd = self.shape.len();
        if axis >= nd || start + len > self.shape[axis] {
            return Err(Error::Parameter {
                what: "narrow",
                detail: format!(
                    "range {start}..{} out of bounds for axis {axis} of {:?}",
                    start + len,
                    self.shape
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let src_block = self.shape[axis] * inner;
        let dst_block = len * inner;
        let mut data = vec![0.0; outer * dst_block];
        for o in 0..outer {
            let src = &self.data[o * src_block + start * inner..o * src_block + (start + len) * inner];
            data[o * dst_block..(o + 1) * dst_block].copy_from_slice(src);
        }
        Ok(Tensor {
            shape: out_shape,
            data: Arc::new(data),
            precision: self.precision,
        })
    }

    pub fn reverse_axis(&self, axis: usize) -> Result<Tensor> {
        let nd = self.shape.len();
        if axis >= nd {
            return Err(Error::Parameter {
                what: "reverse_axis",
                detail: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..n {
                let src = &self.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                let dst = (o * n + (n - 1 - i)) * inner;
                data[dst..dst + inner].copy_from_slice(src);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            precision: self.precision,
        })
    }

    /// Gathers rows of a rank >= 1 tensor along axis 0.
    pub fn index_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::Parameter {
                what: "index_rows",
                detail: "scalar has no rows".to_string(),
            });
        }
        let rows = self.shape[0];
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &idx in indices {
            if idx >= rows {
                return Err(Error::IndexOutOfRange { index: idx, rows });
            }
            data.extend_from_slice(&self.data[idx * inner..(idx + 1) * inner]);
        }
        let mut out_shape = self.shape.clone();
        out_shape[0] = indices.len();
        Ok(Tensor {
            shape: out_shape,
            data: Arc::new(data),
            precision: self.precision,
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data.iter().sum();
        Tensor::new_unquantized(vec![], vec![s], self.precision)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.data.len().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let nd = self.shape.len();
        if axis >= nd {
            return Err(Error::Parameter {
                what: "sum_axis",
                detail: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &self.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = self.shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::new_unquantized(out_shape, data, self.precision))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = self.shape.get(axis).copied().unwrap_or(1).max(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n))
    }

    // ---- fused neural ops ----

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let nd = self.shape.len();
        if axis >= nd {
            return Err(Error::Parameter {
                what: "softmax",
                detail: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            for j in 0..inner {
                let lane = |i: usize| (o * n + i) * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    max = max.max(self.data[lane(i)]);
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateMask);
                }
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (self.data[lane(i)] - max).exp();
                    data[lane(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    data[lane(i)] /= sum;
                }
            }
        }
        Ok(Tensor::new_unquantized(
            self.shape.clone(),
            data,
            self.precision,
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let nd = self.shape.len();
        if nd == 0 {
            return Err(Error::Parameter {
                what: "layer_norm",
                detail: "scalar input".to_string(),
            });
        }
        let n = self.shape[nd - 1];
        let lanes = self.data.len() / n;
        let mut data = vec![0.0; self.data.len()];
        for l in 0..lanes {
            let src = &self.data[l * n..(l + 1) * n];
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (d, s) in data[l * n..(l + 1) * n].iter_mut().zip(src) {
                *d = (s - mean) * inv_std;
            }
        }
        Ok(Tensor::new_unquantized(
            self.shape.clone(),
            data,
            self.precision,
        ))
    }

    // ---- matrix multiply ----

    /// Batched matrix multiply: `[..., m, k] @ [..., k, n] -> [..., m, n]`,
    /// broadcasting leading dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.rank() < 2 || b.rank() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, ka) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
        let (kb, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let k = ka;
        let batch_shape =
            broadcast_shapes("matmul", &a.shape[..a.rank() - 2], &b.shape[..b.rank() - 2])?;
        let batch: usize = batch_shape.iter().product();
        let nd = batch_shape.len();
        let sa = broadcast_strides(&a.shape[..a.rank() - 2], nd);
        let sb = broadcast_strides(&b.shape[..b.rank() - 2], nd);
        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; batch * m * n];

        // Flat offsets per batch entry, broadcast-aware.
        let mut offsets = Vec::with_capacity(batch);
        for_each_broadcast2(&batch_shape, &sa, &sb, |_, ai, bi| {
            offsets.push((ai * m * k, bi * k * n));
        });

        if batch == 1 {
            gemm(&a.data[offsets[0].0..], &b.data[offsets[0].1..], &mut data, m, k, n);
        } else if parallel::enabled() && batch * m * k * n >= parallel::GEMM_PAR_THRESHOLD {
            use rayon::prelude::*;
            data.par_chunks_mut(m * n).enumerate().for_each(|(bi, c)| {
                let (ao, bo) = offsets[bi];
                gemm_serial(&a.data[ao..], &b.data[bo..], c, m, k, n);
            });
        } else {
            for (bi, c) in data.chunks_mut(m * n).enumerate() {
                let (ao, bo) = offsets[bi];
                gemm_serial(&a.data[ao..], &b.data[bo..], c, m, k, n);
            }
        }
        Ok(Tensor::new_unquantized(
            out_shape,
            data,
            a.precision.join(b.precision),
        ))
    }
}

/// Single 2-D GEMM, row-parallel over chunks when large enough.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if parallel::enabled() && m * k * n >= parallel::GEMM_PAR_THRESHOLD && m >= 8 {
        use rayon::prelude::*;
        let threads = rayon::current_num_threads().max(1);
        let rows_per = m.div_ceil(threads);
        c.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let row0 = ci * rows_per;
                let rows = chunk.len() / n;
                gemm_serial(&a[row0 * k..], b, chunk, rows, k, n);
            });
    } else {
        gemm_serial(a, b, c, m, k, n);
    }
}

fn gemm_serial(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Sums `grad` (shaped `from`) down to `to`, undoing trailing-aligned
/// broadcasting. Used by every broadcasting op's backward pass.
pub(crate) fn reduce_to_shape(grad: &Tensor, to: &[usize]) -> Tensor {
    if grad.shape() == to {
        return grad.clone();
    }
    let nd = grad.rank();
    let st = broadcast_strides(to, nd);
    let zeros = vec![0; nd];
    let mut data = vec![0.0; numel(to)];
    for_each_broadcast2(grad.shape(), &st, &zeros, |gi, ti, _| {
        data[ti] += grad.data()[gi];
    });
    Tensor {
        shape: to.to_vec(),
        data: Arc::new(data),
        precision: grad.precision(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec(), Precision::F64).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let c = a.matmul(&eye).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let z = Tensor::zeros(&[3], Precision::F64);
        assert_eq!(z.exp().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reduce_sum_rows() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = a.sum_axis(1, false).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let a = t(&[2], &[0.0, 0.0]);
        assert_eq!(a.softmax(0).unwrap().data(), &[0.5, 0.5]);
        let big = t(&[2], &[1000.0, 1000.0]);
        let s = big.softmax(0).unwrap();
        assert!(s.all_finite());
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let a = t(&[2], &[0.0, 3.0_f64.ln()]);
        let s = a.softmax(0).unwrap();
        assert_relative_eq!(s.data()[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(s.data()[1], 0.75, max_relative = 1e-12);
    }

    #[test]
    fn softmax_degenerate_mask_errors() {
        let a = t(&[2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(a.softmax(0), Err(Error::DegenerateMask)));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let a = t(&[3, 4], &(0..12).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let s = a.softmax(1).unwrap();
        for r in 0..3 {
            let sum: f64 = s.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = a.add_scalar(12.75).softmax(1).unwrap();
        for (x, y) in s.data().iter().zip(shifted.data()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn broadcasting_trailing_alignment() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // middle size-1 axis
        let d = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let e = t(&[2, 3, 2], &[0.0; 12]).add(&d).unwrap();
        assert_eq!(e.shape(), &[2, 3, 2]);
        assert_eq!(&e.data()[..6], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[4], &[0.0; 4]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn log_and_div_domain_errors() {
        let a = t(&[2], &[1.0, -1.0]);
        assert!(a.ln().is_err());
        let b = t(&[2], &[1.0, 0.0]);
        assert!(a.div(&b).is_err());
    }

    #[test]
    fn reshape_transpose_roundtrip_exact() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = a
            .reshape(&[6])
            .unwrap()
            .reshape(&[2, 3])
            .unwrap()
            .transpose()
            .unwrap()
            .transpose()
            .unwrap();
        assert_eq!(back.data(), a.data());
        assert_eq!(back.shape(), a.shape());
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        // [2, 2, 2] @ [2, 2] applies the same rhs to both batch entries
        let a = t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(&c.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&c.data()[4..], &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn narrow_concat_reverse() {
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let head = a.narrow(0, 0, 1).unwrap();
        let tail = a.narrow(0, 1, 2).unwrap();
        let back = Tensor::concat(&[&head, &tail], 0).unwrap();
        assert_eq!(back.data(), a.data());
        let rev = a.reverse_axis(0).unwrap();
        assert_eq!(rev.data(), &[5.0, 6.0, 3.0, 4.0, 1.0, 2.0]);
        assert_eq!(rev.reverse_axis(0).unwrap().data(), a.data());
    }

    #[test]
    fn f32_mode_rounds_values() {
        let v = 0.1f64;
        let a = Tensor::from_vec(vec![1], vec![v], Precision::F32).unwrap();
        assert_eq!(a.data()[0], 0.1f32 as f64);
        let b = Tensor::from_vec(vec![1], vec![v], Precision::F64).unwrap();
        assert_eq!(b.data()[0], v);
        // joined precision degrades to F32
        assert_eq!(a.add(&b).unwrap().precision(), Precision::F32);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let a = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]);
        let y = a.layer_norm(1e-6).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert_relative_eq!(var, 1.0, max_relative = 1e-5);
        }
    }
}
