//! Dense row-major `f64` tensors and the eager kernels the tape is built on.
//!
//! Broadcasting is deliberately narrow: an operand may be a scalar, or a
//! rank-1 vector laid along one marked axis of the other operand (the
//! per-frequency weights of the normalization layers are the main user).
//! Anything else has to be spelled out with [`Tensor::expand`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// How the right-hand operand of an elementwise op is laid against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Shapes are identical.
    Same,
    /// Right operand holds a single value.
    Scalar,
    /// Right operand is a vector of length `lhs.shape[axis]`.
    Along(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ElementwiseOp {
    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
            ElementwiseOp::Div => a / b,
        }
    }
}

/// Number of elements in a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..numel(shape)).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::Shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let off = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "zip of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Work out how `rhs` lays against `self` for an elementwise op.
    pub fn broadcast_kind(&self, rhs: &Tensor, along: Option<usize>) -> Result<Broadcast> {
        match along {
            Some(axis) => {
                if axis >= self.rank() {
                    return Err(TensorError::Shape(format!(
                        "axis {axis} out of range for rank {}",
                        self.rank()
                    )));
                }
                if rhs.rank() != 1 || rhs.shape[0] != self.shape[axis] {
                    return Err(TensorError::Shape(format!(
                        "vector of shape {:?} cannot broadcast along axis {axis} of {:?}",
                        rhs.shape, self.shape
                    )));
                }
                Ok(Broadcast::Along(axis))
            }
            None if rhs.shape == self.shape => Ok(Broadcast::Same),
            None if rhs.data.len() == 1 => Ok(Broadcast::Scalar),
            None => Err(TensorError::Shape(format!(
                "shapes {:?} and {:?} do not broadcast",
                self.shape, rhs.shape
            ))),
        }
    }

    /// `result[i] = op(self[i], broadcast(rhs)[i])`.
    pub fn elementwise(&self, op: ElementwiseOp, rhs: &Tensor, bc: Broadcast) -> Tensor {
        let mut out = Vec::with_capacity(self.data.len());
        match bc {
            Broadcast::Same => {
                out.extend(self.data.iter().zip(&rhs.data).map(|(&a, &b)| op.apply(a, b)))
            }
            Broadcast::Scalar => {
                let b = rhs.data[0];
                out.extend(self.data.iter().map(|&a| op.apply(a, b)))
            }
            Broadcast::Along(axis) => {
                let (outer, len, inner) = split_axis(&self.shape, axis);
                for o in 0..outer {
                    for (k, &b) in rhs.data.iter().enumerate().take(len) {
                        let base = (o * len + k) * inner;
                        out.extend(self.data[base..base + inner].iter().map(|&a| op.apply(a, b)));
                    }
                }
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }

    /// Sum `self` (shaped like the lhs) down to the layout of a broadcast rhs.
    pub fn reduce_to_broadcast(&self, bc: Broadcast, rhs_shape: &[usize]) -> Tensor {
        match bc {
            Broadcast::Same => self.clone(),
            Broadcast::Scalar => Tensor { shape: rhs_shape.to_vec(), data: vec![self.sum_all()] },
            Broadcast::Along(axis) => {
                let (outer, len, inner) = split_axis(&self.shape, axis);
                let mut acc = vec![0.0; len];
                for o in 0..outer {
                    for (k, a) in acc.iter_mut().enumerate() {
                        let base = (o * len + k) * inner;
                        *a += self.data[base..base + inner].iter().sum::<f64>();
                    }
                }
                Tensor { shape: rhs_shape.to_vec(), data: acc }
            }
        }
    }

    fn check_axes(&self, axes: &[usize]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.rank()];
        for &a in axes {
            if a >= self.rank() {
                return Err(TensorError::Shape(format!(
                    "axis {a} out of range for rank {}",
                    self.rank()
                )));
            }
            mask[a] = true;
        }
        Ok(mask)
    }

    /// Shape after reducing `axes`, with or without size-1 placeholders.
    pub fn reduced_shape(&self, axes: &[usize], keep_dims: bool) -> Result<Vec<usize>> {
        let mask = self.check_axes(axes)?;
        Ok(self
            .shape
            .iter()
            .zip(&mask)
            .filter_map(|(&d, &m)| match (m, keep_dims) {
                (true, true) => Some(1),
                (true, false) => None,
                (false, _) => Some(d),
            })
            .collect())
    }

    fn reduce_sum_masked(&self, mask: &[bool], cells: usize) -> Vec<f64> {
        let mut acc = vec![0.0; cells];
        reduction_runs(&self.shape, mask, |start, len, off, kept| {
            let src = &self.data[start..start + len];
            if kept {
                acc[off..off + len].iter_mut().zip(src).for_each(|(a, v)| *a += v);
            } else {
                acc[off] += src.iter().sum::<f64>();
            }
        });
        acc
    }

    pub fn reduce_sum(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let mask = self.check_axes(axes)?;
        let shape = self.reduced_shape(axes, keep_dims)?;
        let data = self.reduce_sum_masked(&mask, numel(&shape));
        Ok(Tensor { shape, data })
    }

    /// Number of input cells folded into each reduced cell.
    pub fn reduction_count(&self, axes: &[usize]) -> Result<usize> {
        let mask = self.check_axes(axes)?;
        Ok(self.shape.iter().zip(&mask).filter(|(_, &m)| m).map(|(&d, _)| d).product())
    }

    pub fn reduce_mean(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let count = self.reduction_count(axes)?;
        if count == 0 {
            return Err(TensorError::Domain("mean over an empty extent".into()));
        }
        let mut s = self.reduce_sum(axes, keep_dims)?;
        let inv = 1.0 / count as f64;
        s.data.iter_mut().for_each(|v| *v *= inv);
        Ok(s)
    }

    /// Population variance (divides by the count, not count - 1), two-pass.
    pub fn reduce_var(&self, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let count = self.reduction_count(axes)?;
        if count == 0 {
            return Err(TensorError::Domain("variance over an empty extent".into()));
        }
        let mask = self.check_axes(axes)?;
        let shape = self.reduced_shape(axes, keep_dims)?;
        let inv = 1.0 / count as f64;
        let mut mean = self.reduce_sum_masked(&mask, numel(&shape));
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![0.0; mean.len()];
        reduction_runs(&self.shape, &mask, |start, len, off, kept| {
            let src = &self.data[start..start + len];
            if kept {
                for ((a, m), v) in var[off..off + len].iter_mut().zip(&mean[off..off + len]).zip(src) {
                    *a += (v - m) * (v - m);
                }
            } else {
                let m = mean[off];
                var[off] += src.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        });
        var.iter_mut().for_each(|m| *m *= inv);
        Ok(Tensor { shape, data: var })
    }

    /// Repeat a tensor whose size-1 dimensions are stretched to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.len() != self.rank()
            || self.shape.iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(TensorError::Shape(format!(
                "cannot expand {:?} to {:?}",
                self.shape, shape
            )));
        }
        let mask: Vec<bool> = self.shape.iter().zip(shape).map(|(&s, &t)| s == 1 && t != 1).collect();
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        reduction_runs(shape, &mask, |_, len, off, kept| {
            if kept {
                data.extend_from_slice(&self.data[off..off + len]);
            } else {
                data.extend(std::iter::repeat_n(self.data[off], len));
            }
        });
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Sum an expanded gradient back to the pre-expansion `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        let axes: Vec<usize> = self
            .shape
            .iter()
            .zip(shape)
            .enumerate()
            .filter(|(_, (&s, &t))| s != t)
            .map(|(i, _)| i)
            .collect();
        let mut r = self.reduce_sum(&axes, true)?;
        r.shape = shape.to_vec();
        Ok(r)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape[axis] || len == 0 {
            return Err(TensorError::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let (outer, full, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Scatter a gradient of a narrowed slice back into `full_shape`.
    pub fn unnarrow(&self, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
        let (outer, full, inner) = split_axis(full_shape, axis);
        let len = self.shape[axis];
        let mut data = vec![0.0; numel(full_shape)];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Tensor { shape: full_shape.to_vec(), data }
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::Shape(format!(
                    "stack of {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(TensorError::Shape(format!(
                "matmul of {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &rhs.data[p * m..(p + 1) * m];
                row.iter_mut().zip(b).for_each(|(o, &bv)| *o += a * bv);
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Shape(format!("transpose of rank {}", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Row-wise log-softmax of a `(n, s)` matrix.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Shape(format!("log_softmax of {:?}", self.shape)));
        }
        let s = self.shape[1];
        let mut out = self.data.clone();
        for row in out.chunks_mut(s) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(product before axis, shape[axis], product after axis)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Walk a row-major `shape` in runs along its last axis. For each run `f`
/// gets the flat start, the run length, the flat index of the run's cell
/// once the `mask`ed axes are reduced to size 1, and whether the last axis
/// is kept (cells then advance with the run).
fn reduction_runs(shape: &[usize], mask: &[bool], mut f: impl FnMut(usize, usize, usize, bool)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 1, 0, true);
        return;
    }
    let kept: Vec<usize> = shape.iter().zip(mask).map(|(&d, &m)| if m { 1 } else { d }).collect();
    let step: Vec<usize> =
        strides_of(&kept).iter().zip(mask).map(|(&s, &m)| if m { 0 } else { s }).collect();
    let run = shape[rank - 1];
    if run == 0 {
        return;
    }
    let last_kept = !mask[rank - 1];
    let rows = numel(shape) / run;
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for r in 0..rows {
        f(r * run, run, off, last_kept);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= step[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Geometry of a 2-D cross-correlation over the last two axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(TensorError::Shape(format!(
                "conv2d expects rank-4 input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(TensorError::Shape(format!(
                "conv2d input has {} channels but kernel expects {}",
                input[1], kernel[1]
            )));
        }
        if stride == 0 {
            return Err(TensorError::Shape("conv2d stride must be positive".into()));
        }
        let (h, w) = (input[2] + 2 * pad, input[3] + 2 * pad);
        if kernel[2] > h || kernel[3] > w {
            return Err(TensorError::Shape(format!(
                "kernel {}x{} does not fit padded input {h}x{w}",
                kernel[2], kernel[3]
            )));
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_ch: input[1],
            out_ch: kernel[0],
            in_h: input[2],
            in_w: input[3],
            k_h: kernel[2],
            k_w: kernel[3],
            stride,
            pad,
            out_h: (h - kernel[2]) / stride + 1,
            out_w: (w - kernel[3]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Output rows `ho` for which input row `ho*stride + k - pad` is in range.
    fn valid(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        // largest o with o*s + off <= in_len - 1
        let hi_num = in_len as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { ((hi_num / s) + 1).min(out_len as isize) as usize };
        (lo.min(hi), hi)
    }

    #[inline]
    fn src(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.pad
    }
}

/// Output positions per inner block of the convolution loops.
const CONV_TILE: usize = 256;

/// Unfold one `(c, h, w)` image into a `(c * kh * kw, out_h * out_w)`
/// patch matrix. Only in-range positions are written, so a zeroed `col`
/// reused across images of one geometry keeps its padding at zero.
fn im2col(g: &ConvGeometry, image: &[f64], col: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let src = &image[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for ki in 0..g.k_h {
            let (h_lo, h_hi) = g.valid(ki, g.out_h, g.in_h);
            for kj in 0..g.k_w {
                let (w_lo, w_hi) = g.valid(kj, g.out_w, g.in_w);
                let row = &mut col[((c * g.k_h + ki) * g.k_w + kj) * p..][..p];
                for ho in h_lo..h_hi {
                    let irow = &src[g.src(ho, ki) * g.in_w..][..g.in_w];
                    let orow = &mut row[ho * g.out_w..][..g.out_w];
                    for wo in w_lo..w_hi {
                        orow[wo] = irow[g.src(wo, kj)];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate patch gradients back into the image.
fn col2im(g: &ConvGeometry, col: &[f64], image: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let dst = &mut image[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for ki in 0..g.k_h {
            let (h_lo, h_hi) = g.valid(ki, g.out_h, g.in_h);
            for kj in 0..g.k_w {
                let (w_lo, w_hi) = g.valid(kj, g.out_w, g.in_w);
                let row = &col[((c * g.k_h + ki) * g.k_w + kj) * p..][..p];
                for ho in h_lo..h_hi {
                    let drow = &mut dst[g.src(ho, ki) * g.in_w..][..g.in_w];
                    let crow = &row[ho * g.out_w..][..g.out_w];
                    for wo in w_lo..w_hi {
                        drow[g.src(wo, kj)] += crow[wo];
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for k in 0..4 {
            acc[k] += a[k] * b[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cross-correlation of `(n, c, h, w)` input with `(o, c, kh, kw)` kernels.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, pad)?;
    let mut out = vec![0.0; numel(&g.out_shape())];
    let in_plane = g.in_ch * g.in_h * g.in_w;
    let p = g.out_h * g.out_w;
    let k = g.in_ch * g.k_h * g.k_w;
    let mut col = vec![0.0; k * p];
    for n in 0..g.batch {
        im2col(&g, &input.data[n * in_plane..][..in_plane], &mut col);
        let dst = &mut out[n * g.out_ch * p..][..g.out_ch * p];
        // tiles of output positions keep the accumulators in L1
        for t0 in (0..p).step_by(CONV_TILE) {
            let tl = CONV_TILE.min(p - t0);
            for kk in 0..k {
                let row = &col[kk * p + t0..][..tl];
                for (o, d) in dst.chunks_exact_mut(p).enumerate() {
                    axpy(kernel.data[o * k + kk], row, &mut d[t0..t0 + tl]);
                }
            }
        }
    }
    Ok(Tensor { shape: g.out_shape(), data: out })
}

/// Vector-Jacobian products of [`conv2d`] for the input and the kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, pad)?;
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let in_plane = g.in_ch * g.in_h * g.in_w;
    let p = g.out_h * g.out_w;
    let k = g.in_ch * g.k_h * g.k_w;
    let mut col = vec![0.0; k * p];
    let mut gcol = vec![0.0; k * p];
    for n in 0..g.batch {
        im2col(&g, &input.data[n * in_plane..][..in_plane], &mut col);
        let go_all = &grad_out.data[n * g.out_ch * p..][..g.out_ch * p];
        gcol.fill(0.0);
        for t0 in (0..p).step_by(CONV_TILE) {
            let tl = CONV_TILE.min(p - t0);
            for kk in 0..k {
                let row = &col[kk * p + t0..][..tl];
                let grow = &mut gcol[kk * p + t0..][..tl];
                for (o, go) in go_all.chunks_exact(p).enumerate() {
                    let go = &go[t0..t0 + tl];
                    gk[o * k + kk] += dot(go, row);
                    axpy(kernel.data[o * k + kk], go, grow);
                }
            }
        }
        col2im(&g, &gcol, &mut gin[n * in_plane..][..in_plane]);
    }
    Ok((
        Tensor { shape: input.shape.clone(), data: gin },
        Tensor { shape: kernel.shape.clone(), data: gk },
    ))
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
