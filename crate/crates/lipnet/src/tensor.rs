//! Dense n-dimensional tensors and the deterministic numeric kernels
//! (matrix multiply, 2-D convolution, transposed convolution, max pooling)
//! that every layer and norm computation is built on.
//!
//! Data is stored row-major (last axis fastest) in `f64`. All operations are
//! pure functions of their inputs and evaluate in a fixed order, so results
//! are bitwise reproducible.

use crate::error::{Error, Result};

/// Dense tensor of 64-bit reals.
///
/// Invariants: the shape is non-empty, every dimension is at least 1, and
/// `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data, validating both.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} must be non-empty with all dimensions >= 1"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} expects {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor. Panics on an invalid shape; use [`Tensor::new`] for
    /// externally supplied shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d >= 1),
            "invalid shape {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// 2-D tensor from nested rows (all rows must have equal length).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidShape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged rows in matrix literal".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by invariant every tensor holds at least one element
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

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Matrix dimensions `(rows, cols)`; errors unless rank 2.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::InvalidShape(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dims("tensor add", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dims("tensor sub", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dims("dot product", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Sum of absolute values of all elements.
    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    /// Euclidean norm over all elements.
    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute element.
    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Vector p-norm for p in {1, 2, inf}.
    pub fn norm_p(&self, p: VectorNorm) -> f64 {
        match p {
            VectorNorm::L1 => self.norm_l1(),
            VectorNorm::L2 => self.norm_l2(),
            VectorNorm::Linf => self.norm_linf(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// The three vector norms the crate works with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorNorm {
    L1,
    L2,
    Linf,
}

/// Stride, symmetric zero-padding and kernel extent of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    /// `(stride_h, stride_w)`, both >= 1.
    pub stride: (usize, usize),
    /// `(pad_h, pad_w)` symmetric zero padding.
    pub padding: (usize, usize),
    /// `(k_h, k_w)` kernel extent, both >= 1.
    pub kernel: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: (usize, usize), kernel: (usize, usize)) -> Self {
        ConvGeometry {
            stride,
            padding,
            kernel,
        }
    }

    /// Stride 1, no padding.
    pub fn unit(kernel: (usize, usize)) -> Self {
        ConvGeometry::new((1, 1), (0, 0), kernel)
    }

    /// Output spatial size for an input of `(h, w)`:
    /// `floor((in + 2*pad - kernel) / stride) + 1`, which must be >= 1.
    pub fn output_size(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let (h, w) = input;
        let axis = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            if k == 0 || s == 0 {
                return Err(Error::Geometry(format!(
                    "kernel and stride must be >= 1, got kernel {k}, stride {s}"
                )));
            }
            let padded = n + 2 * p;
            if padded < k {
                return Err(Error::Geometry(format!(
                    "kernel {k} larger than padded input {padded}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Matrix product `A * B` for `A (m,k)` and `B (k,n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.matrix_dims()?;
    let (kb, n) = b.matrix_dims()?;
    if ka != kb {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * ka..(i + 1) * ka];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o += a_it * b_tj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix-vector product treating a rank-1 tensor as a column vector.
pub fn matvec(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    if x.rank() != 1 || x.len() != k {
        return Err(Error::dims("matvec", a.shape(), x.shape()));
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        out[i] = row.iter().zip(x.data()).map(|(a, b)| a * b).sum();
    }
    Tensor::new(vec![m], out)
}

fn check_conv_inputs(input: &Tensor, filters: &Tensor, geom: &ConvGeometry) -> Result<()> {
    if input.rank() != 3 {
        return Err(Error::InvalidShape(format!(
            "conv input must be (C,H,W), got {:?}",
            input.shape()
        )));
    }
    if filters.rank() != 4 {
        return Err(Error::InvalidShape(format!(
            "conv filters must be (C_out,C_in,k_h,k_w), got {:?}",
            filters.shape()
        )));
    }
    let (kh, kw) = (filters.shape()[2], filters.shape()[3]);
    if (kh, kw) != geom.kernel {
        return Err(Error::Geometry(format!(
            "filter kernel ({kh},{kw}) does not match geometry kernel {:?}",
            geom.kernel
        )));
    }
    Ok(())
}

/// 2-D cross-correlation with zero padding and stride.
///
/// `input` is `(C_in, H, W)`, `filters` is `(C_out, C_in, k_h, k_w)` and the
/// optional `bias` has one entry per output channel:
///
/// `out[i,y,x] = sum_j sum_{u,v} filters[i,j,u,v] * padded[j, y*s_h+u, x*s_w+v] + bias[i]`
pub fn conv2d(
    input: &Tensor,
    filters: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    check_conv_inputs(input, filters, geom)?;
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, f_in) = (filters.shape()[0], filters.shape()[1]);
    if f_in != c_in {
        return Err(Error::dims("conv2d channels", input.shape(), filters.shape()));
    }
    if let Some(b) = bias {
        if b.rank() != 1 || b.len() != c_out {
            return Err(Error::dims("conv2d bias", &[c_out], b.shape()));
        }
    }
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (oh, ow) = geom.output_size((h, w))?;

    let mut out = vec![0.0; c_out * oh * ow];
    let fdat = filters.data();
    let idat = input.data();
    for i in 0..c_out {
        let b_i = bias.map_or(0.0, |b| b.data()[i]);
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for j in 0..c_in {
                    let fbase = ((i * c_in + j) * kh) * kw;
                    let ibase = j * h * w;
                    for u in 0..kh {
                        let iy = (y * sh + u) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = ibase + iy as usize * w;
                        let frow = fbase + u * kw;
                        for v in 0..kw {
                            let ix = (x * sw + v) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += fdat[frow + v] * idat[irow + ix as usize];
                        }
                    }
                }
                out[(i * oh + y) * ow + x] = acc + b_i;
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Transposed convolution: applies the exact adjoint of [`conv2d`]'s linear
/// map (no bias) under the same geometry.
///
/// `input` must have the shape `conv2d` would produce for a `(C_in,
/// target_h, target_w)` input; the result has that target shape.
pub fn conv2d_transpose(
    input: &Tensor,
    filters: &Tensor,
    geom: &ConvGeometry,
    target_hw: (usize, usize),
) -> Result<Tensor> {
    check_conv_inputs(input, filters, geom)?;
    let (c_out, c_in) = (filters.shape()[0], filters.shape()[1]);
    let (h, w) = target_hw;
    let (oh, ow) = geom.output_size((h, w))?;
    if input.shape() != [c_out, oh, ow] {
        return Err(Error::Geometry(format!(
            "transposed-conv input {:?} inconsistent with target ({c_in},{h},{w}) \
             which maps to ({c_out},{oh},{ow})",
            input.shape()
        )));
    }
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;

    let mut out = vec![0.0; c_in * h * w];
    let fdat = filters.data();
    let idat = input.data();
    for i in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let g = idat[(i * oh + y) * ow + x];
                if g == 0.0 {
                    continue;
                }
                for j in 0..c_in {
                    let fbase = ((i * c_in + j) * kh) * kw;
                    let obase = j * h * w;
                    for u in 0..kh {
                        let iy = (y * sh + u) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let orow = obase + iy as usize * w;
                        let frow = fbase + u * kw;
                        for v in 0..kw {
                            let ix = (x * sw + v) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[orow + ix as usize] += fdat[frow + v] * g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_in, h, w], out)
}

/// Max pooling over `(C, H, W)`.
///
/// Returns the pooled tensor and, per output cell, the flat index into the
/// input of the element that produced it (first occurrence wins on ties,
/// scanning windows in row-major order).
pub fn maxpool2d(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::InvalidShape(format!(
            "pool input must be (C,H,W), got {:?}",
            input.shape()
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
        return Err(Error::Geometry("pool window and stride must be >= 1".into()));
    }
    if wh > h || ww > w {
        return Err(Error::Geometry(format!(
            "pool window ({wh},{ww}) larger than input ({h},{w})"
        )));
    }
    let oh = (h - wh) / sh + 1;
    let ow = (w - ww) / sw + 1;

    let mut out = vec![0.0; c * oh * ow];
    let mut indices = vec![0usize; c * oh * ow];
    let idat = input.data();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for u in 0..wh {
                    let iy = y * sh + u;
                    for v in 0..ww {
                        let ix = x * sw + v;
                        let idx = (ch * h + iy) * w + ix;
                        let val = idat[idx];
                        if val > best {
                            best = val;
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out[o] = best;
                indices[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, indices))
}
