//! Tensor-level kernels.
//!
//! These are the forward computations (and the matching vector-Jacobian
//! products) that the autodiff graph records. They are usable on their own
//! for inference-only code and tests.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` zeros on every side; output is `ceil(H / stride)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn dims4(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, "rank-4 tensor", format!("{s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Matrix products

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        ref s => return Err(Error::shape("matmul", "[m, k]", format!("{s:?}"))),
    };
    let n = match *b.shape() {
        [k2, n] if k2 == k => n,
        ref s => return Err(Error::shape("matmul", format!("[{k}, n]"), format!("{s:?}"))),
    };
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k, 1),
        b.data(),
        (n, 1),
        T::zero(),
        out.data_mut(),
        (n, 1),
    );
    Ok(out)
}

/// Batched product of `[B, m, k]` and `[B, k, n]`; either operand may be
/// read transposed (its trailing two axes swapped).
pub fn bmm<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let [ba, ar, ac] = match *a.shape() {
        [x, y, z] => [x, y, z],
        ref s => return Err(Error::shape("bmm", "rank-3 lhs", format!("{s:?}"))),
    };
    let [bb, br, bc] = match *b.shape() {
        [x, y, z] => [x, y, z],
        ref s => return Err(Error::shape("bmm", "rank-3 rhs", format!("{s:?}"))),
    };
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if ba != bb || k != k2 {
        return Err(Error::shape(
            "bmm",
            format!("[{ba}, {m}, {k}] x [{ba}, {k}, n]"),
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let a_strides = if trans_a { (1, ac) } else { (ac, 1) };
    let b_strides = if trans_b { (1, bc) } else { (bc, 1) };
    let mut out = Tensor::zeros(&[ba, m, n]);
    let (asz, bsz) = (ar * ac, br * bc);
    out.data_mut()
        .par_chunks_mut(m * n)
        .enumerate()
        .for_each(|(i, c)| {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[i * asz..(i + 1) * asz],
                a_strides,
                &b.data()[i * bsz..(i + 1) * bsz],
                b_strides,
                T::zero(),
                c,
                (n, 1),
            )
        });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("kernel {kh}x{kw} must have odd sides")));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if height + 2 * pad_h < kh || width + 2 * pad_w < kw {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} larger than padded input {height}x{width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            out_h: (height + 2 * pad_h - kh) / stride + 1,
            out_w: (width + 2 * pad_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when a patch gather would reproduce the input unchanged.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Source coordinate for output index `o` and kernel tap `k` on one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < len).then_some(pos)
    }

    /// Gathers `[C, H, W]` into patch columns `[C*kh*kw, out_h*out_w]`.
    pub fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ol..(row + 1) * ol];
                    for oi in 0..self.out_h {
                        let line = &mut dst[oi * self.out_w..(oi + 1) * self.out_w];
                        match Self::src(oi, ki, self.stride, self.pad_h, self.height) {
                            None => line.fill(T::zero()),
                            Some(ii) => {
                                let src_row = &plane[ii * self.width..(ii + 1) * self.width];
                                for (oj, v) in line.iter_mut().enumerate() {
                                    *v = match Self::src(oj, kj, self.stride, self.pad_w, self.width)
                                    {
                                        Some(jj) => src_row[jj],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patch columns back into a `[C, H, W]` image gradient.
    pub fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ol..(row + 1) * ol];
                    for oi in 0..self.out_h {
                        let Some(ii) = Self::src(oi, ki, self.stride, self.pad_h, self.height)
                        else {
                            continue;
                        };
                        for oj in 0..self.out_w {
                            if let Some(jj) = Self::src(oj, kj, self.stride, self.pad_w, self.width)
                            {
                                plane[ii * self.width + jj] =
                                    plane[ii * self.width + jj] + src[oi * self.out_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    depthwise: bool,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, ConvGeom)> {
    let [b, c, h, wd] = dims4(op, x)?;
    let [co, ci, kh, kw] = dims4(op, w)?;
    if depthwise {
        if ci != 1 || co != c {
            return Err(Error::shape(op, format!("weight [{c}, 1, kh, kw]"), format!("{:?}", w.shape())));
        }
    } else if ci != c {
        return Err(Error::shape(
            op,
            format!("weight with {c} input channels"),
            format!("{:?}", w.shape()),
        ));
    }
    let geom = ConvGeom::new(if depthwise { 1 } else { c }, h, wd, kh, kw, stride, padding)?;
    Ok((b, co, geom))
}

/// Standard 2-D convolution, NCHW input and `[C_out, C_in, kh, kw]` weights.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (batch, c_out, g) = conv_geom("conv2d", x, w, false, stride, padding)?;
    let in_len = g.channels * g.height * g.width;
    let (pl, ol) = (g.patch_len(), g.out_len());
    let mut out = Tensor::zeros(&[batch, c_out, g.out_h, g.out_w]);
    out.data_mut()
        .par_chunks_mut(c_out * ol)
        .enumerate()
        .for_each_init(Vec::new, |cols, (b, y)| {
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                image
            } else {
                cols.resize(pl * ol, T::zero());
                g.im2col(image, cols);
                cols
            };
            T::gemm(c_out, pl, ol, T::one(), w.data(), (pl, 1), cols, (ol, 1), T::zero(), y, (ol, 1));
        });
    Ok(out)
}

/// Vector-Jacobian product of [`conv2d`]: returns `(dx, dw)`; `dx` is skipped
/// when `need_dx` is false.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (batch, c_out, g) = conv_geom("conv2d", x, w, false, stride, padding)?;
    let in_len = g.channels * g.height * g.width;
    let (pl, ol) = (g.patch_len(), g.out_len());
    let partials: Vec<(Option<Vec<T>>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let dyb = &dy.data()[b * c_out * ol..(b + 1) * c_out * ol];
            let mut gathered = Vec::new();
            let cols: &[T] = if g.is_pointwise() {
                image
            } else {
                gathered.resize(pl * ol, T::zero());
                g.im2col(image, &mut gathered);
                &gathered
            };
            let mut dw = vec![T::zero(); c_out * pl];
            // dW_b = dY_b * cols^T
            T::gemm(c_out, ol, pl, T::one(), dyb, (ol, 1), cols, (1, ol), T::zero(), &mut dw, (pl, 1));
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::zero(); pl * ol];
                // dcols = W^T * dY_b
                T::gemm(pl, c_out, ol, T::one(), w.data(), (1, pl), dyb, (ol, 1), T::zero(), &mut dcols, (ol, 1));
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dimg = vec![T::zero(); in_len];
                    g.col2im(&dcols, &mut dimg);
                    dimg
                }
            });
            (dx, dw)
        })
        .collect();
    let mut dw = vec![T::zero(); c_out * pl];
    let mut dx = need_dx.then(|| Vec::with_capacity(batch * in_len));
    for (pdx, pdw) in partials {
        for (acc, v) in dw.iter_mut().zip(pdw) {
            *acc = *acc + v;
        }
        if let (Some(dx), Some(p)) = (dx.as_mut(), pdx) {
            dx.extend(p);
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    Ok((dx, Tensor::new(w.shape(), dw)?))
}

/// Per-channel convolution with weights `[C, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (batch, c, g) = conv_geom("depthwise_conv2d", x, w, true, stride, padding)?;
    let (plane, ol, kk) = (g.height * g.width, g.out_len(), g.kh * g.kw);
    let mut out = Tensor::zeros(&[batch, c, g.out_h, g.out_w]);
    out.data_mut()
        .par_chunks_mut(ol)
        .enumerate()
        .for_each(|(bc, y)| {
            let ch = bc % c;
            let src = &x.data()[bc * plane..(bc + 1) * plane];
            let kernel = &w.data()[ch * kk..(ch + 1) * kk];
            for ki in 0..g.kh {
                for oi in 0..g.out_h {
                    let Some(ii) = ConvGeom::src(oi, ki, g.stride, g.pad_h, g.height) else {
                        continue;
                    };
                    let row = &src[ii * g.width..(ii + 1) * g.width];
                    for kj in 0..g.kw {
                        let k = kernel[ki * g.kw + kj];
                        for oj in 0..g.out_w {
                            if let Some(jj) = ConvGeom::src(oj, kj, g.stride, g.pad_w, g.width) {
                                let o = &mut y[oi * g.out_w + oj];
                                *o = *o + k * row[jj];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (batch, c, g) = conv_geom("depthwise_conv2d", x, w, true, stride, padding)?;
    let (plane, ol, kk) = (g.height * g.width, g.out_len(), g.kh * g.kw);
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..batch * c)
        .into_par_iter()
        .map(|bc| {
            let ch = bc % c;
            let src = &x.data()[bc * plane..(bc + 1) * plane];
            let kernel = &w.data()[ch * kk..(ch + 1) * kk];
            let dyp = &dy.data()[bc * ol..(bc + 1) * ol];
            let mut dw = vec![T::zero(); kk];
            let mut dx = if need_dx { vec![T::zero(); plane] } else { Vec::new() };
            for ki in 0..g.kh {
                for oi in 0..g.out_h {
                    let Some(ii) = ConvGeom::src(oi, ki, g.stride, g.pad_h, g.height) else {
                        continue;
                    };
                    for kj in 0..g.kw {
                        let k = kernel[ki * g.kw + kj];
                        let mut acc = T::zero();
                        for oj in 0..g.out_w {
                            if let Some(jj) = ConvGeom::src(oj, kj, g.stride, g.pad_w, g.width) {
                                let d = dyp[oi * g.out_w + oj];
                                acc = acc + d * src[ii * g.width + jj];
                                if need_dx {
                                    let t = &mut dx[ii * g.width + jj];
                                    *t = *t + d * k;
                                }
                            }
                        }
                        dw[ki * g.kw + kj] = dw[ki * g.kw + kj] + acc;
                    }
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dw = vec![T::zero(); c * kk];
    let mut dx = Vec::with_capacity(if need_dx { batch * c * plane } else { 0 });
    for (bc, (pdx, pdw)) in partials.into_iter().enumerate() {
        let ch = bc % c;
        for (acc, v) in dw[ch * kk..(ch + 1) * kk].iter_mut().zip(pdw) {
            *acc = *acc + v;
        }
        dx.extend(pdx);
    }
    let dx = need_dx.then(|| Tensor::new(x.shape(), dx)).transpose()?;
    Ok((dx, Tensor::new(w.shape(), dw)?))
}

// ---------------------------------------------------------------------------
// Batch normalisation

/// Result of a normalisation pass; `mean`/`inv_std` are the statistics that
/// were applied (batch statistics in train mode, running ones in eval mode).
#[derive(Clone, Debug)]
pub struct BatchNormOut<T> {
    pub y: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn batchnorm2d<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
) -> Result<BatchNormOut<T>> {
    let [b, c, h, w] = dims4("batchnorm2d", x)?;
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(Error::shape("batchnorm2d", format!("{name} of length {c}"), len.to_string()));
        }
    }
    let plane = h * w;
    let eps = T::of(BN_EPSILON);
    let (mean, var) = match mode {
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        Mode::Train => {
            let n = T::of((b * plane) as f64);
            let stats: Vec<(T, T)> = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut sum = T::zero();
                    for bi in 0..b {
                        let p = &x.data()[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                        sum = p.iter().fold(sum, |a, &v| a + v);
                    }
                    let mean = sum / n;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        let p = &x.data()[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
                        sq = p.iter().fold(sq, |a, &v| a + (v - mean) * (v - mean));
                    }
                    (mean, sq / n)
                })
                .collect();
            stats.into_iter().unzip()
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    y.data_mut()
        .par_chunks_mut(plane)
        .zip(x.data().par_chunks(plane))
        .enumerate()
        .for_each(|(i, (out, inp))| {
            let ch = i % c;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for (o, &v) in out.iter_mut().zip(inp) {
                *o = v * scale + shift;
            }
        });
    Ok(BatchNormOut { y, mean, var, inv_std })
}

/// Gradients `(dx, dgamma, dbeta)` of [`batchnorm2d`].
pub fn batchnorm2d_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    dy: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [b, c, h, w] = dims4("batchnorm2d", x)?;
    let plane = h * w;
    let n = T::of((b * plane) as f64);
    let sums: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut sdy, mut sdyx) = (T::zero(), T::zero());
            for bi in 0..b {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xhat = (x.data()[i] - mean[ch]) * inv_std[ch];
                    sdy = sdy + dy.data()[i];
                    sdyx = sdyx + dy.data()[i] * xhat;
                }
            }
            (sdy, sdyx)
        })
        .collect();
    let dbeta: Vec<T> = sums.iter().map(|s| s.0).collect();
    let dgamma: Vec<T> = sums.iter().map(|s| s.1).collect();
    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(i, out)| {
            let ch = i % c;
            let off = i * plane;
            let g = gamma[ch] * inv_std[ch];
            for (k, o) in out.iter_mut().enumerate() {
                let d = dy.data()[off + k];
                *o = match mode {
                    Mode::Eval => d * g,
                    Mode::Train => {
                        let xhat = (x.data()[off + k] - mean[ch]) * inv_std[ch];
                        g * (d - (dbeta[ch] + xhat * dgamma[ch]) / n)
                    }
                };
            }
        });
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Elementwise

/// `1 / (1 + e^-x)`; saturates cleanly to 0 or 1 when `e^-x` overflows.
#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const ELEMENTWISE_CHUNK: usize = 1 << 14;

pub fn activate<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut().par_chunks_mut(ELEMENTWISE_CHUNK).for_each(|chunk| {
        for v in chunk {
            *v = match kind {
                Activation::Relu => v.max(T::zero()),
                Activation::Silu => *v * sigmoid(*v),
                Activation::Sigmoid => sigmoid(*v),
            };
        }
    });
    out
}

pub fn activate_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut out = dy.clone();
    out.data_mut()
        .par_chunks_mut(ELEMENTWISE_CHUNK)
        .zip(x.data().par_chunks(ELEMENTWISE_CHUNK))
        .for_each(|(ds, xs)| {
            for (d, &v) in ds.iter_mut().zip(xs) {
                *d = match kind {
                    Activation::Relu => {
                        if v > T::zero() {
                            *d
                        } else {
                            T::zero()
                        }
                    }
                    Activation::Silu => {
                        let s = sigmoid(v);
                        *d * s * (T::one() + v * (T::one() - s))
                    }
                    Activation::Sigmoid => {
                        let s = sigmoid(v);
                        *d * s * (T::one() - s)
                    }
                };
            }
        });
    out
}

// ---------------------------------------------------------------------------
// Softmax

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!("softmax axis {axis} out of range for rank {}", x.rank())));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..n {
                let e = (d[idx(k)] - max).exp();
                d[idx(k)] = e;
                sum = sum + e;
            }
            for k in 0..n {
                d[idx(k)] = d[idx(k)] / sum;
            }
        }
    }
    Ok(out)
}

/// VJP of softmax given its output `y`.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), dy.data());
    let out = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let dot = (0..n).fold(T::zero(), |a, k| a + yd[idx(k)] * gd[idx(k)]);
            for k in 0..n {
                out[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Pooling

/// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("global_avg_pool", x)?;
    let n = T::of((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / n)
        .collect();
    Tensor::new(&[b, c], data)
}

/// Max pooling without padding. Returns the pooled map and the flat input
/// index of each selected maximum (first occurrence wins ties).
pub fn max_pool2d<T: Element>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = dims4("max_pool2d", x)?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::invalid(format!("max_pool2d window {window} invalid for {h}x{w}")));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..b * c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = p * h * w + oi * stride * w + oj * stride;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = p * h * w + (oi * stride + di) * w + oj * stride + dj;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, oh, ow], out)?, arg))
}

// ---------------------------------------------------------------------------
// Resampling

/// Per-axis bilinear taps `(i0, i1, frac)` for align-corners-false sampling.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn plane_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, "rank >= 2", format!("{shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

/// Bilinear resize of the trailing two axes (align-corners = false). Leading
/// axes are treated as independent planes.
pub fn upsample_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("upsample_bilinear: output dims must be >= 1"));
    }
    let (planes, h, w) = plane_dims("upsample_bilinear", x.shape())?;
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&shape, out)
}

pub fn upsample_bilinear_backward<T: Element>(in_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims("upsample_bilinear", in_shape)?;
    let (_, out_h, out_w) = plane_dims("upsample_bilinear", dy.shape())?;
    if (h, w) == (out_h, out_w) {
        return Ok(dy.clone());
    }
    let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[oi * out_w + oj];
                d[y0 * w + x0] = d[y0 * w + x0] + v * (T::one() - fy) * (T::one() - fx);
                d[y0 * w + x1] = d[y0 * w + x1] + v * (T::one() - fy) * fx;
                d[y1 * w + x0] = d[y1 * w + x0] + v * fy * (T::one() - fx);
                d[y1 * w + x1] = d[y1 * w + x1] + v * fy * fx;
            }
        }
    }
    Tensor::new(in_shape, dx)
}

// ---------------------------------------------------------------------------
// Layout

/// Generic axis permutation; output axis `i` is input axis `perm[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("invalid permutation {perm:?} for rank {rank}")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted-dropout multiplier mask: each entry is `0` with probability `p`,
/// otherwise `1 / (1 - p)`.
pub fn dropout_mask<T: Element>(len: usize, p: f64, rng: &mut impl rand::Rng) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout p = {p} outside [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect())
}

pub fn dropout<T: Element>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut impl rand::Rng,
) -> Result<Tensor<T>> {
    if mode == Mode::Eval || p == 0.0 {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout p = {p} outside [0, 1)")));
        }
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.numel(), p, rng)?;
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape(), data)
}
