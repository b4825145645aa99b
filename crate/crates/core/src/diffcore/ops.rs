//! Forward kernels shared by the tape and by gradient-free inference.
//!
//! Every function here is pure and validates shapes. The tape wraps them and
//! adds the matching adjoint rules; inference calls them directly so that
//! recorded and unrecorded forwards produce bit-identical values.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied before every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(dim_err(format!("{what} expects a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn require_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(dim_err(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `c = alpha * op(a) * op(b) + beta * c` over strided row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views lying inside `a`, `b` and `c`,
    // which callers size from the same (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix(a, "matmul lhs")?;
    let (k2, n) = require_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(dim_err(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    require_same(a, b, what)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    a.map(|v| v * factor)
}

/// Adds a length-`cols` bias to every row of `a`.
pub fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, cols) = require_matrix(a, "bias add")?;
    if bias.len() != cols {
        return Err(dim_err(format!(
            "bias of {} values for {cols} columns",
            bias.len()
        )));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

/// `ln(max(x, LOG_EPS))`.
pub fn log_clamped(a: &Tensor) -> Tensor {
    a.map(|v| v.max(LOG_EPS).ln())
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.is_empty() {
        return Err(dim_err("mean of an empty tensor".into()));
    }
    Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (_, cols) = require_matrix(a, "softmax")?;
    let mut out = a.clone();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (rows, cols) = require_matrix(a, "slice_rows")?;
    if start > end || end > rows {
        return Err(dim_err(format!("row range {start}..{end} of {rows} rows")));
    }
    Tensor::new(
        vec![end - start, cols],
        a.data()[start * cols..end * cols].to_vec(),
    )
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = match parts.first() {
        Some(p) => require_matrix(p, "concat_rows")?.1,
        None => return Err(dim_err("concat_rows of nothing".into())),
    };
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = require_matrix(p, "concat_rows")?;
        if c != cols {
            return Err(dim_err(format!("concat_rows: {c} columns vs {cols}")));
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

pub fn index_select_rows(a: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (rows, cols) = require_matrix(a, "index_select")?;
    let mut data = Vec::with_capacity(index.len() * cols);
    for &i in index {
        if i >= rows {
            return Err(dim_err(format!("row index {i} out of {rows}")));
        }
        data.extend_from_slice(a.row(i));
    }
    Tensor::new(vec![index.len(), cols], data)
}

/// Channel-major image geometry of one flattened example row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageGeom {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pooled(&self) -> ImageGeom {
        ImageGeom {
            channels: self.channels,
            height: self.height / 2,
            width: self.width / 2,
        }
    }
}

/// Unrolls `[n, c*h*w]` into `[n*h*w, c*k*k]` patches with zero padding `k/2`.
pub(crate) fn im2col(input: &Tensor, geom: ImageGeom, k: usize) -> Vec<f64> {
    let ImageGeom {
        channels: c,
        height: h,
        width: w,
    } = geom;
    let pad = (k / 2) as isize;
    let patch = c * k * k;
    let n = input.rows();
    let mut cols = vec![0.0; n * h * w * patch];
    for s in 0..n {
        let img = input.row(s);
        for y in 0..h {
            for x in 0..w {
                let base = ((s * h + y) * w + x) * patch;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[base + (ch * k + ky) * k + kx] =
                                img[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col`], accumulating overlapping patches.
pub(crate) fn col2im(cols: &[f64], n: usize, geom: ImageGeom, k: usize) -> Vec<f64> {
    let ImageGeom {
        channels: c,
        height: h,
        width: w,
    } = geom;
    let pad = (k / 2) as isize;
    let patch = c * k * k;
    let mut out = vec![0.0; n * geom.len()];
    for s in 0..n {
        let img = &mut out[s * geom.len()..(s + 1) * geom.len()];
        for y in 0..h {
            for x in 0..w {
                let base = ((s * h + y) * w + x) * patch;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            img[(ch * h + iy as usize) * w + ix as usize] +=
                                cols[base + (ch * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn check_conv(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    geom: ImageGeom,
    k: usize,
) -> Result<usize> {
    let (_, d) = require_matrix(input, "conv2d input")?;
    let (out_ch, patch) = require_matrix(weight, "conv2d weight")?;
    if d != geom.len() {
        return Err(dim_err(format!(
            "conv2d input width {d} does not match image {geom:?}"
        )));
    }
    if k % 2 == 0 || patch != geom.channels * k * k {
        return Err(dim_err(format!(
            "conv2d weight {:?} incompatible with kernel {k} over {} channels",
            weight.shape(),
            geom.channels
        )));
    }
    if bias.len() != out_ch {
        return Err(dim_err(format!("conv2d bias of {} for {out_ch} maps", bias.len())));
    }
    Ok(out_ch)
}

/// Same-padded, stride-1 convolution. Weight is `[out_channels, in_channels*k*k]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, geom: ImageGeom, k: usize) -> Result<Tensor> {
    let out_ch = check_conv(input, weight, bias, geom, k)?;
    let n = input.rows();
    let hw = geom.height * geom.width;
    let patch = weight.cols();
    let cols = im2col(input, geom, k);
    // [n*hw, patch] x [patch, out_ch] with the weight read transposed.
    let mut tmp = vec![0.0; n * hw * out_ch];
    gemm(n * hw, patch, out_ch, &cols, (patch, 1), weight.data(), (1, patch), 0.0, &mut tmp);
    let mut out = vec![0.0; n * out_ch * hw];
    for s in 0..n {
        for p in 0..hw {
            for co in 0..out_ch {
                out[(s * out_ch + co) * hw + p] = tmp[(s * hw + p) * out_ch + co] + bias.data()[co];
            }
        }
    }
    Tensor::new(vec![n, out_ch * hw], out)
}

/// 2x2 stride-2 max pooling; also returns the flat source index of each output.
pub fn maxpool2d(input: &Tensor, geom: ImageGeom) -> Result<(Tensor, Vec<usize>)> {
    let (n, d) = require_matrix(input, "maxpool2d")?;
    if d != geom.len() {
        return Err(dim_err(format!("maxpool2d input width {d} vs image {geom:?}")));
    }
    let out_geom = geom.pooled();
    let (oh, ow) = (out_geom.height, out_geom.width);
    let mut out = Vec::with_capacity(n * out_geom.len());
    let mut source = Vec::with_capacity(n * out_geom.len());
    for s in 0..n {
        let row = input.row(s);
        for ch in 0..geom.channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = (ch * geom.height + 2 * y) * geom.width + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * geom.height + 2 * y + dy) * geom.width + 2 * x + dx;
                        if row[idx] > row[best] {
                            best = idx;
                        }
                    }
                    out.push(row[best]);
                    source.push(s * d + best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, out_geom.len()], out)?, source))
}
