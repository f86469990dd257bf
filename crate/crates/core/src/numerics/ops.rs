//! Differentiable primitives recorded on a [`Tape`], plus their plain
//! forward kernels.

use std::rc::Rc;

use crate::error::{ensure_arg, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{gemm, MatRef, Scalar, Tensor};

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    ensure_arg!(
        axis < x.ndim(),
        "softmax axis {axis} invalid for shape {:?}",
        x.shape()
    );
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(data[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                data[at(j)] = data[at(j)] / total;
            }
        }
    }
    Ok(out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax over contiguous rows of length `len`, in place.
pub(crate) fn softmax_rows_inplace<T: Scalar>(data: &mut [T], len: usize) {
    for row in data.chunks_mut(len) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = T::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Per-row layer normalisation statistics: `(mean, 1/sqrt(var + eps))`.
fn row_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let c = x.cols();
    let cf = T::lit(c as f64);
    let mut means = Vec::with_capacity(x.rows());
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        means.push(mean);
        inv_std.push(T::one() / (var + eps).sqrt());
    }
    (means, inv_std)
}

/// Layer normalisation over the trailing axis followed by the affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.cols();
    ensure_arg!(
        gamma.len() == c && beta.len() == c,
        "layer_norm affine extents {} / {} do not match channel count {c}",
        gamma.len(),
        beta.len()
    );
    let (means, inv_std) = row_stats(x, eps);
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - means[r]) * inv_std[r] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Im2col for a same-padded, stride-1 square kernel over an `h × w × c`
/// token map stored as `[h*w, c]`.
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, ks: usize) -> Vec<T> {
    let r = (ks / 2) as isize;
    let width = ks * ks * c;
    let mut cols = vec![T::zero(); h * w * width];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * width;
            for ky in 0..ks {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..ks {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = base + (ky * ks + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, ks: usize) -> Vec<T> {
    let r = (ks / 2) as isize;
    let width = ks * ks * c;
    let mut x = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * width;
            for ky in 0..ks {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..ks {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = base + (ky * ks + kx) * c;
                    for ch in 0..c {
                        x[dst + ch] += cols[src + ch];
                    }
                }
            }
        }
    }
    x
}

/// Same-padded stride-1 convolution of an `h × w` token map `[h*w, c_in]`
/// with weights laid out `[ks*ks*c_in, c_out]` (tap-major, then input
/// channel).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (ks, c_in, c_out) = conv_geometry(x, h, w, weight, bias)?;
    let cols = if ks == 1 {
        x.data().to_vec()
    } else {
        im2col(x.data(), h, w, c_in, ks)
    };
    Ok(conv_forward(&cols, h * w, ks * ks * c_in, c_out, weight, bias))
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    h: usize,
    w: usize,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    ensure_arg!(
        x.ndim() == 2 && x.rows() == h * w,
        "conv2d input {:?} is not a {h}x{w} token map",
        x.shape()
    );
    let c_in = x.cols();
    ensure_arg!(weight.ndim() == 2, "conv2d weight must be 2-D");
    let taps = weight.shape()[0];
    ensure_arg!(
        taps % c_in == 0,
        "conv2d weight rows {taps} incompatible with {c_in} input channels"
    );
    let ks = ((taps / c_in) as f64).sqrt().round() as usize;
    ensure_arg!(
        ks * ks * c_in == taps && ks % 2 == 1,
        "conv2d weight rows {taps} do not describe an odd square kernel over {c_in} channels"
    );
    let c_out = weight.cols();
    if let Some(b) = bias {
        ensure_arg!(b.len() == c_out, "conv2d bias extent {} != {c_out}", b.len());
    }
    Ok((ks, c_in, c_out))
}

fn conv_forward<T: Scalar>(
    cols: &[T],
    m: usize,
    k: usize,
    n: usize,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let mut out = vec![T::zero(); m * n];
    if let Some(b) = bias {
        for row in out.chunks_mut(n) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(
        m,
        k,
        n,
        T::one(),
        MatRef::rm(cols, 0, k),
        MatRef::rm(weight.data(), 0, n),
        beta,
        &mut out,
        0,
        n,
    );
    Tensor::from_parts(vec![m, n], out)
}

fn col_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let n = g.cols();
    let mut s = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::from_parts(vec![n], s)
}

/// `g · Wᵀ` for `g: [m, n]`, `W: [k, n]`.
fn times_transpose<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>) -> Vec<T> {
    let (m, n) = (g.rows(), g.cols());
    let k = w.shape()[0];
    let mut out = vec![T::zero(); m * k];
    gemm(
        m,
        n,
        k,
        T::one(),
        MatRef::rm(g.data(), 0, n),
        MatRef::rm(w.data(), 0, n).t(),
        T::zero(),
        &mut out,
        0,
        k,
    );
    out
}

/// `Xᵀ · g` for `X: [m, k]` given as raw row-major data, `g: [m, n]`.
fn transpose_times<T: Scalar>(x: &[T], m: usize, k: usize, g: &Tensor<T>) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); k * n];
    gemm(
        k,
        m,
        n,
        T::one(),
        MatRef::rm(x, 0, k).t(),
        MatRef::rm(g.data(), 0, n),
        T::zero(),
        &mut out,
        0,
        n,
    );
    out
}

/// Row-major permutation `out[i] = x[index[i]]` that turns an `h × w × (c·r²)`
/// map into `(h·r) × (w·r) × c`, channel `c·r² + i·r + j` landing at sub-pixel
/// `(i, j)`.
pub fn pixel_shuffle_index(h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let cin = c * r * r;
    let mut idx = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, i) = (oy / r, oy % r);
            let (x, j) = (ox / r, ox % r);
            for ch in 0..c {
                idx.push((y * w + x) * cin + ch * r * r + i * r + j);
            }
        }
    }
    idx
}

/// Sub-pixel rearrangement of `[h*w, c·r²]` tokens into `[(h·r)*(w·r), c]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, h: usize, w: usize, r: usize) -> Result<Tensor<T>> {
    ensure_arg!(r >= 1, "upscale factor must be positive");
    ensure_arg!(
        x.ndim() == 2 && x.rows() == h * w,
        "pixel_shuffle input {:?} is not a {h}x{w} token map",
        x.shape()
    );
    ensure_arg!(
        x.cols() % (r * r) == 0,
        "pixel_shuffle channels {} not divisible by r^2 = {}",
        x.cols(),
        r * r
    );
    let c = x.cols() / (r * r);
    let idx = pixel_shuffle_index(h, w, c, r);
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::from_parts(vec![h * r * w * r, c], data))
}

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// `x·W + b` for `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure_arg!(
            xs.len() == 2 && ws.len() == 2,
            "linear expects 2-D operands, got {xs:?} and {ws:?}"
        );
        ensure_arg!(
            xs[1] == ws[0],
            "linear: input width {} does not match weight rows {}",
            xs[1],
            ws[0]
        );
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            ensure_arg!(
                self.value(b).len() == n,
                "linear bias extent {} != {n}",
                self.value(b).len()
            );
        }
        let value = conv_forward(
            self.value(x).data(),
            m,
            k,
            n,
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let dx = ctx.needs[0]
                    .then(|| Tensor::from_parts(vec![m, k], times_transpose(g, ctx.inputs[1])));
                let dw = ctx.needs[1].then(|| {
                    Tensor::from_parts(vec![k, n], transpose_times(ctx.inputs[0].data(), m, k, g))
                });
                let mut out = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    out.push(ctx.needs[2].then(|| col_sums(g)));
                }
                out
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_arg!(
            self.shape(a) == self.shape(b),
            "add: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_arg!(
            self.shape(a) == self.shape(b),
            "sub: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]),
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, &[x], Box::new(move |ctx| vec![Some(ctx.grad.scale(c))]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_arg!(
            self.shape(a) == self.shape(b),
            "mul: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                    ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let orig = self.shape(x).to_vec();
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                vec![Some(Tensor::from_parts(orig.clone(), ctx.grad.data().to_vec()))]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.push(
            value,
            &[x],
            Box::new(move |ctx| vec![Some(Tensor::full(shape.clone(), ctx.grad.item()))]),
        )
    }

    /// `Σ wᵢ·xᵢ` against a fixed weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        ensure_arg!(
            self.shape(x) == weights.shape(),
            "weighted_sum: weight shape {:?} != {:?}",
            weights.shape(),
            self.shape(x)
        );
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            &[x],
            Box::new(move |ctx| vec![Some(weights.scale(ctx.grad.item()))]),
        ))
    }

    /// Mean absolute difference `mean |a − b|`.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_arg!(
            self.shape(a) == self.shape(b),
            "l1: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        let n = T::lit(self.value(a).len() as f64);
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            &[a, b],
            Box::new(move |ctx| {
                let s = ctx.grad.item() / n;
                let sign = ctx.inputs[0].zip_map(ctx.inputs[1], |x, y| {
                    let d = x - y;
                    if d > T::zero() {
                        s
                    } else if d < T::zero() {
                        -s
                    } else {
                        T::zero()
                    }
                });
                let neg = sign.map(|v| -v);
                vec![Some(sign), Some(neg)]
            }),
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(x), axis)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let (outer, len, inner) = axis_split(&shape, axis);
                let (y, g) = (ctx.out.data(), ctx.grad.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), dx))]
            }),
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let eps = T::lit(eps);
        let value = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (means, inv_std) = row_stats(self.value(x), eps);
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
                let c = x.cols();
                let cf = T::lit(c as f64);
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, (xr, gr)) in x.data().chunks(c).zip(ctx.grad.data().chunks(c)).enumerate() {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        xhat[j] = (xr[j] - means[r]) * inv_std[r];
                        dxhat[j] = gr[j] * gamma.data()[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat[j];
                    }
                    let (mean_d, mean_dx) = (sum_d / cf, sum_dx / cf);
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                    Some(Tensor::from_parts(vec![c], dgamma)),
                    Some(Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        ))
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push(
            value,
            &[x],
            Box::new(|ctx| vec![Some(ctx.inputs[0].zip_map(ctx.grad, |x, g| gelu_grad(x) * g))]),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope });
        self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                vec![Some(ctx.inputs[0].zip_map(ctx.grad, |x, g| {
                    if x >= T::zero() {
                        g
                    } else {
                        g * slope
                    }
                }))]
            }),
        )
    }

    /// See [`conv2d`].
    pub fn conv2d(&mut self, x: Var, h: usize, w: usize, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (ks, c_in, c_out) = conv_geometry(
            self.value(x),
            h,
            w,
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        if ks == 1 {
            return self.linear(x, weight, bias);
        }
        let k = ks * ks * c_in;
        let cols = im2col(self.value(x).data(), h, w, c_in, ks);
        let value = conv_forward(&cols, h * w, k, c_out, self.value(weight), bias.map(|b| self.value(b)));
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let dx = ctx.needs[0].then(|| {
                    let dcols = times_transpose(g, ctx.inputs[1]);
                    Tensor::from_parts(vec![h * w, c_in], col2im(&dcols, h, w, c_in, ks))
                });
                let dw = ctx.needs[1]
                    .then(|| Tensor::from_parts(vec![k, c_out], transpose_times(&cols, h * w, k, g)));
                let mut out = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    out.push(ctx.needs[2].then(|| col_sums(g)));
                }
                out
            }),
        ))
    }

    /// Row gather `out[i, :] = x[index[i], :]` on a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let src = self.value(x);
        ensure_arg!(src.ndim() == 2, "gather_rows expects a 2-D tensor");
        let (rows, c) = (src.rows(), src.cols());
        ensure_arg!(
            index.iter().all(|&i| i < rows),
            "gather_rows index out of range"
        );
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::from_parts(vec![index.len(), c], data);
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); rows * c];
                for (o, &i) in index.iter().enumerate() {
                    for (d, &g) in dx[i * c..(i + 1) * c].iter_mut().zip(ctx.grad.row(o)) {
                        *d += g;
                    }
                }
                vec![Some(Tensor::from_parts(vec![rows, c], dx))]
            }),
        ))
    }

    /// Element gather `out.flat[i] = x.flat[index[i]]` reshaped to `shape`.
    pub fn gather_elems(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        ensure_arg!(
            shape.iter().product::<usize>() == index.len(),
            "gather_elems: shape {shape:?} does not hold {} elements",
            index.len()
        );
        ensure_arg!(index.iter().all(|&i| i < n), "gather_elems index out of range");
        let src = self.value(x).data();
        let value = Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| src[i]).collect());
        let in_shape = self.shape(x).to_vec();
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); n];
                for (&i, &g) in index.iter().zip(ctx.grad.data()) {
                    dx[i] += g;
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
            }),
        ))
    }

    pub fn pixel_shuffle(&mut self, x: Var, h: usize, w: usize, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure_arg!(
            s.len() == 2 && s[0] == h * w,
            "pixel_shuffle input {s:?} is not a {h}x{w} token map"
        );
        ensure_arg!(
            r >= 1 && s[1] % (r * r) == 0,
            "pixel_shuffle channels {} not divisible by r^2 = {}",
            s[1],
            r * r
        );
        let c = s[1] / (r * r);
        let index: Rc<[usize]> = pixel_shuffle_index(h, w, c, r).into();
        self.gather_elems(x, index, &[h * r * w * r, c])
    }

    /// Column concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure_arg!(!parts.is_empty(), "concat_cols needs at least one input");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        ensure_arg!(
            parts.iter().all(|&p| self.value(p).ndim() == 2 && self.value(p).rows() == rows),
            "concat_cols: inputs must be 2-D with {rows} rows"
        );
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(
            value,
            parts,
            Box::new(move |ctx| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&wd| {
                        let mut d = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            d.extend_from_slice(&ctx.grad.row(r)[offset..offset + wd]);
                        }
                        offset += wd;
                        Some(Tensor::from_parts(vec![rows, wd], d))
                    })
                    .collect()
            }),
        ))
    }

    /// `W / σ` with `σ = uᵀ W v`, treating the power-iteration vectors as
    /// constants. `W` is viewed as `[rows, last extent]`.
    pub fn spectral_scale(&mut self, w: Var, u: &Tensor<T>, v: &Tensor<T>) -> Result<Var> {
        let wt = self.value(w);
        let (rows, cols) = (wt.rows(), wt.cols());
        ensure_arg!(
            u.len() == rows && v.len() == cols,
            "spectral vectors ({}, {}) do not fit a {rows}x{cols} matrix",
            u.len(),
            v.len()
        );
        let sigma = bilinear(wt.data(), u.data(), v.data(), cols);
        ensure_arg!(
            sigma.abs() > T::lit(1e-12),
            "spectral estimate vanished for a {rows}x{cols} matrix"
        );
        let value = wt.scale(T::one() / sigma);
        let (u, v) = (u.clone(), v.clone());
        Ok(self.push(
            value,
            &[w],
            Box::new(move |ctx| {
                let (w, g) = (ctx.inputs[0], ctx.grad);
                let inner: T = g.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
                let coef = inner / (sigma * sigma);
                let mut dw = g.scale(T::one() / sigma);
                for (r, row) in dw.data_mut().chunks_mut(cols).enumerate() {
                    for (c, d) in row.iter_mut().enumerate() {
                        *d -= coef * u.data()[r] * v.data()[c];
                    }
                }
                vec![Some(dw)]
            }),
        ))
    }
}

/// `uᵀ W v` for row-major `W` with `cols` columns.
pub(crate) fn bilinear<T: Scalar>(w: &[T], u: &[T], v: &[T], cols: usize) -> T {
    w.chunks(cols)
        .zip(u)
        .map(|(row, &ur)| ur * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[1, 2], &[0.0, 0.0]), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[1, 2], &[1000.0, 0.0]), 1).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = softmax(&t(&[1, 2], &[std::f64::consts::LN_2, 0.0]), 1).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(softmax(&t(&[1, 2], &[0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let s = softmax(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[2], &[1.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        let y = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
        let y = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &t(&[2], &[2.0, 2.0]), &t(&[2], &[3.0, 3.0]), 0.0)
            .unwrap();
        assert_eq!(y.data(), &[5.0, 1.0]);
        let y = layer_norm(&t(&[1, 3], &[4.0, 4.0, 4.0]), &t(&[3], &[1.0; 3]), &t(&[3], &[0.0; 3]), 1e-5)
            .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        assert!(layer_norm(&t(&[1, 3], &[1.0; 3]), &one, &zero, 1e-5).is_err());
    }

    #[test]
    fn gelu_zero_is_exact() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn([9, 2], |i| i as f64 * 0.5 - 3.0);
        let mut w = Tensor::zeros([18, 2]);
        // centre tap is index 4; identity across channels
        w.data_mut()[(4 * 2) * 2] = 1.0;
        w.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let y = conv2d(&x, 3, 3, &w, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_on_constant() {
        let x = Tensor::<f64>::full([25, 1], 0.7);
        let w = Tensor::full([9, 1], 1.0);
        let y = conv2d(&x, 5, 5, &w, None).unwrap();
        assert!((y.data()[2 * 5 + 2] - 9.0 * 0.7).abs() < 1e-12);
        // corners see four taps
        assert!((y.data()[0] - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f64>::zeros([9, 2]);
        let w = Tensor::<f64>::zeros([27, 1]);
        assert!(conv2d(&x, 3, 3, &w, None).is_err());
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 1, 1, 2).unwrap();
        assert_eq!(y.shape(), &[4, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 1, 1, 1).unwrap();
        assert_eq!(y, x);
        assert!(pixel_shuffle(&t(&[1, 3], &[1.0, 2.0, 3.0]), 1, 1, 2).is_err());
    }
}
