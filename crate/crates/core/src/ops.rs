//! Forward kernels for every primitive the model is assembled from, plus the
//! matching backward kernels used by the autodiff tape.

use crate::error::TensorError;
use crate::tensor::{Axis, Element, Shape, Tensor4};

/// Stride, zero-padding and dilation of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with padding chosen so a `k`-wide kernel preserves extent.
    pub const fn same(k: usize, dilation: usize) -> Self {
        ConvGeometry::new(1, dilation * (k - 1) / 2, dilation)
    }

    pub fn output_extent(&self, input: usize, k: usize) -> Result<usize, TensorError> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(TensorError::ZeroStride);
        }
        let kernel_extent = self.dilation * (k - 1) + 1;
        let padded_extent = input + 2 * self.padding;
        if kernel_extent > padded_extent {
            return Err(TensorError::KernelTooLarge {
                kernel_extent,
                padded_extent,
            });
        }
        Ok((padded_extent - kernel_extent) / self.stride + 1)
    }
}

/// Weights `(out, in, k, k)`, bias `(1, out, 1, 1)` and geometry of one
/// convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Tensor4<T>,
    pub geometry: ConvGeometry,
}

/// One-hidden-layer perceptron applied to `(n, c, 1, 1)` vectors:
/// `w2 · relu(w1 · v + b1) + b2`. Matrices are stored `(1, 1, in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub w1: Tensor4<T>,
    pub b1: Tensor4<T>,
    pub w2: Tensor4<T>,
    pub b2: Tensor4<T>,
}

struct ConvDims {
    cin: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: Shape, w: Shape, bias_len: usize, g: ConvGeometry) -> Result<ConvDims, TensorError> {
    if w.h != w.w {
        return Err(TensorError::NonSquareKernel { kh: w.h, kw: w.w });
    }
    if x.c != w.c {
        return Err(TensorError::Dim {
            op: "conv2d",
            axis: Axis::Channel,
            expected: w.c,
            found: x.c,
        });
    }
    if bias_len != w.n {
        return Err(TensorError::Dim {
            op: "conv2d bias",
            axis: Axis::Channel,
            expected: w.n,
            found: bias_len,
        });
    }
    Ok(ConvDims {
        cin: w.c,
        cout: w.n,
        k: w.h,
        ho: g.output_extent(x.h, w.h)?,
        wo: g.output_extent(x.w, w.w)?,
    })
}

fn is_pointwise(d: &ConvDims, g: ConvGeometry) -> bool {
    d.k == 1 && g.stride == 1 && g.padding == 0
}

/// Unfolds one sample into a `(cin*k*k) x (ho*wo)` column matrix.
fn im2col<T: Element>(x: &[T], h: usize, w: usize, d: &ConvDims, g: ConvGeometry, cols: &mut [T]) {
    let p = d.ho * d.wo;
    let mut row = 0;
    for ci in 0..d.cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let dst = &mut out[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample's input gradient.
fn col2im<T: Element>(cols: &[T], h: usize, w: usize, d: &ConvDims, g: ConvGeometry, dx: &mut [T]) {
    let p = d.ho * d.wo;
    let mut row = 0;
    for ci in 0..d.cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Element>(x: &Tensor4<T>, p: &Conv2dParams<T>) -> Result<Tensor4<T>, TensorError> {
    conv2d_raw(x, &p.weight, p.bias.data(), p.geometry)
}

pub(crate) fn conv2d_raw<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    g: ConvGeometry,
) -> Result<Tensor4<T>, TensorError> {
    let xs = x.shape();
    let d = conv_dims(xs, weight.shape(), bias.len(), g)?;
    let ckk = d.cin * d.k * d.k;
    let p = d.ho * d.wo;
    let out_shape = Shape::new(xs.n, d.cout, d.ho, d.wo);
    let mut out = vec![T::zero(); out_shape.len()];
    let pointwise = is_pointwise(&d, g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * p] };
    for n in 0..xs.n {
        let y = &mut out[n * d.cout * p..(n + 1) * d.cout * p];
        for (co, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        let rhs: &[T] = if pointwise {
            x.sample(n)
        } else {
            im2col(x.sample(n), xs.h, xs.w, &d, g, &mut cols);
            &cols
        };
        T::gemm(
            d.cout,
            ckk,
            p,
            T::one(),
            weight.data(),
            (ckk as isize, 1),
            rhs,
            (p as isize, 1),
            T::one(),
            y,
            (p as isize, 1),
        );
    }
    Tensor4::new(out_shape, out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Tensor4<T>,
    pub db: Tensor4<T>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    g: ConvGeometry,
    dy: &Tensor4<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>, TensorError> {
    let xs = x.shape();
    let ws = weight.shape();
    let d = conv_dims(xs, ws, ws.n, g)?;
    let ckk = d.cin * d.k * d.k;
    let p = d.ho * d.wo;
    let pointwise = is_pointwise(&d, g);
    let mut dw = vec![T::zero(); ws.len()];
    let mut db = vec![T::zero(); d.cout];
    let mut dx = if need_dx { vec![T::zero(); xs.len()] } else { Vec::new() };
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * p] };
    let mut dcols = if need_dx && !pointwise { vec![T::zero(); ckk * p] } else { Vec::new() };
    let sample_len = xs.c * xs.plane();
    for n in 0..xs.n {
        let dy_n = dy.sample(n);
        for (co, row) in dy_n.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
        let rhs: &[T] = if pointwise {
            x.sample(n)
        } else {
            im2col(x.sample(n), xs.h, xs.w, &d, g, &mut cols);
            &cols
        };
        // dW += dY_n · cols^T
        T::gemm(
            d.cout,
            p,
            ckk,
            T::one(),
            dy_n,
            (p as isize, 1),
            rhs,
            (1, p as isize),
            T::one(),
            &mut dw,
            (ckk as isize, 1),
        );
        if need_dx {
            let dx_n = &mut dx[n * sample_len..(n + 1) * sample_len];
            // dcols = W^T · dY_n
            let target: &mut [T] = if pointwise { dx_n } else { &mut dcols };
            T::gemm(
                ckk,
                d.cout,
                p,
                T::one(),
                weight.data(),
                (1, ckk as isize),
                dy_n,
                (p as isize, 1),
                T::zero(),
                target,
                (p as isize, 1),
            );
            if !pointwise {
                col2im(&dcols, xs.h, xs.w, &d, g, &mut dx[n * sample_len..(n + 1) * sample_len]);
            }
        }
    }
    Ok(ConvGrads {
        dx: if need_dx { Some(Tensor4::new(xs, dx)?) } else { None },
        dw: Tensor4::new(ws, dw)?,
        db: Tensor4::new(Shape::new(1, d.cout, 1, 1), db)?,
    })
}

#[inline]
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn relu<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Per-channel spatial mean, shape `(n, c, 1, 1)`.
pub fn channel_pool_avg<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    let data = (0..s.n * s.c)
        .map(|i| x.data()[i * s.plane()..(i + 1) * s.plane()].iter().copied().sum::<T>() * inv)
        .collect();
    Tensor4::new(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape")
}

/// Position of the first maximal element in scan order.
fn argmax_first<T: Element>(v: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_val = T::neg_infinity();
    for (i, x) in v.enumerate() {
        if x > best_val || i == 0 {
            best = i;
            best_val = x;
        }
    }
    best
}

/// Per-channel spatial maximum, shape `(n, c, 1, 1)`.
pub fn channel_pool_max<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let data = (0..s.n * s.c)
        .map(|i| {
            let plane = &x.data()[i * p..(i + 1) * p];
            plane[argmax_first(plane.iter().copied())]
        })
        .collect();
    Tensor4::new(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape")
}

pub(crate) fn channel_pool_avg_backward<T: Element>(input: Shape, dy: &Tensor4<T>) -> Tensor4<T> {
    let inv = T::one() / T::from_usize(input.plane()).unwrap();
    let mut dx = Vec::with_capacity(input.len());
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, input.plane()));
    }
    Tensor4::new(input, dx).expect("pool grad shape")
}

pub(crate) fn channel_pool_max_backward<T: Element>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let mut dx = vec![T::zero(); s.len()];
    for (i, &g) in dy.data().iter().enumerate() {
        let plane = &x.data()[i * p..(i + 1) * p];
        dx[i * p + argmax_first(plane.iter().copied())] += g;
    }
    Tensor4::new(s, dx).expect("pool grad shape")
}

/// Per-pixel mean (plane 0) and max (plane 1) across channels, shape `(n, 2, h, w)`.
pub fn spatial_pool<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let inv = T::one() / T::from_usize(s.c).unwrap();
    let mut out = vec![T::zero(); s.n * 2 * p];
    for n in 0..s.n {
        let sample = x.sample(n);
        let (avg, max) = out[n * 2 * p..(n + 1) * 2 * p].split_at_mut(p);
        for i in 0..p {
            let col = (0..s.c).map(|c| sample[c * p + i]);
            let mut sum = T::zero();
            for v in col.clone() {
                sum += v;
            }
            avg[i] = sum * inv;
            max[i] = sample[argmax_first(col) * p + i];
        }
    }
    Tensor4::new(Shape::new(s.n, 2, s.h, s.w), out).expect("pool shape")
}

pub(crate) fn spatial_pool_backward<T: Element>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let inv = T::one() / T::from_usize(s.c).unwrap();
    let mut dx = vec![T::zero(); s.len()];
    for n in 0..s.n {
        let sample = x.sample(n);
        let dy_n = dy.sample(n);
        let base = n * s.c * p;
        for i in 0..p {
            let g_avg = dy_n[i] * inv;
            for c in 0..s.c {
                dx[base + c * p + i] += g_avg;
            }
            let c_max = argmax_first((0..s.c).map(|c| sample[c * p + i]));
            dx[base + c_max * p + i] += dy_n[p + i];
        }
    }
    Tensor4::new(s, dx).expect("pool grad shape")
}

/// 2x2 max pooling with stride 2.
pub fn max_pool2<T: Element>(x: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let s = check_even(x.shape())?;
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.n * s.c * ho * wo);
    for nc in 0..s.n * s.c {
        let plane = &x.data()[nc * s.plane()..(nc + 1) * s.plane()];
        for oy in 0..ho {
            for ox in 0..wo {
                let win = window(plane, s.w, oy, ox);
                out.push(win[argmax_first(win.iter().copied())]);
            }
        }
    }
    Tensor4::new(Shape::new(s.n, s.c, ho, wo), out)
}

fn check_even(s: Shape) -> Result<Shape, TensorError> {
    for (axis, extent) in [(Axis::Height, s.h), (Axis::Width, s.w)] {
        if extent % 2 != 0 {
            return Err(TensorError::OddExtent {
                op: "max_pool2",
                axis,
                extent,
            });
        }
    }
    Ok(s)
}

#[inline]
fn window<T: Element>(plane: &[T], w: usize, oy: usize, ox: usize) -> [T; 4] {
    let (y, x) = (2 * oy, 2 * ox);
    [
        plane[y * w + x],
        plane[y * w + x + 1],
        plane[(y + 1) * w + x],
        plane[(y + 1) * w + x + 1],
    ]
}

pub(crate) fn max_pool2_backward<T: Element>(x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut dx = vec![T::zero(); s.len()];
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        let plane = &x.data()[base..base + s.plane()];
        for oy in 0..ho {
            for ox in 0..wo {
                let k = argmax_first(window(plane, s.w, oy, ox).iter().copied());
                let (y, xx) = (2 * oy + k / 2, 2 * ox + k % 2);
                dx[base + y * s.w + xx] += dy.data()[nc * ho * wo + oy * wo + ox];
            }
        }
    }
    Tensor4::new(s, dx).expect("pool grad shape")
}

fn ensure_vector(op: &'static str, s: Shape) -> Result<(), TensorError> {
    if s.h != 1 || s.w != 1 {
        return Err(TensorError::NotVector { op, shape: s });
    }
    Ok(())
}

/// Affine map on `(n, in, 1, 1)` vectors with a `(1, 1, in, out)` matrix and
/// `(1, out, 1, 1)` bias.
pub fn linear<T: Element>(x: &Tensor4<T>, w: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    ensure_vector("linear", xs)?;
    if xs.c != ws.h {
        return Err(TensorError::Dim {
            op: "linear",
            axis: Axis::Channel,
            expected: ws.h,
            found: xs.c,
        });
    }
    if b.shape().len() != ws.w {
        return Err(TensorError::Dim {
            op: "linear bias",
            axis: Axis::Channel,
            expected: ws.w,
            found: b.shape().len(),
        });
    }
    let (n, fin, fout) = (xs.n, ws.h, ws.w);
    let mut out: Vec<T> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    T::gemm(
        n,
        fin,
        fout,
        T::one(),
        x.data(),
        (fin as isize, 1),
        w.data(),
        (fout as isize, 1),
        T::one(),
        &mut out,
        (fout as isize, 1),
    );
    Tensor4::new(Shape::new(n, fout, 1, 1), out)
}

/// Returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
    let ws = w.shape();
    let (n, fin, fout) = (x.shape().n, ws.h, ws.w);
    let mut dx = vec![T::zero(); n * fin];
    T::gemm(
        n,
        fout,
        fin,
        T::one(),
        dy.data(),
        (fout as isize, 1),
        w.data(),
        (1, fout as isize),
        T::zero(),
        &mut dx,
        (fin as isize, 1),
    );
    let mut dw = vec![T::zero(); fin * fout];
    T::gemm(
        fin,
        n,
        fout,
        T::one(),
        x.data(),
        (1, fin as isize),
        dy.data(),
        (fout as isize, 1),
        T::zero(),
        &mut dw,
        (fout as isize, 1),
    );
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks(fout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (
        Tensor4::new(x.shape(), dx).expect("linear grad"),
        Tensor4::new(ws, dw).expect("linear grad"),
        Tensor4::new(Shape::new(1, fout, 1, 1), db).expect("linear grad"),
    )
}

/// Shared MLP used by channel attention.
pub fn mlp_shared<T: Element>(v: &Tensor4<T>, p: &MlpParams<T>) -> Result<Tensor4<T>, TensorError> {
    let hidden = relu(&linear(v, &p.w1, &p.b1)?);
    linear(&hidden, &p.w2, &p.b2)
}

/// Output shape of a broadcasting binary op: each axis must match or be 1
/// on one side.
pub fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape, TensorError> {
    let mut out = [0; 4];
    for (i, (&ea, &eb)) in a.dims().iter().zip(b.dims().iter()).enumerate() {
        out[i] = if ea == eb || eb == 1 {
            ea
        } else if ea == 1 {
            eb
        } else {
            return Err(TensorError::Broadcast { op, lhs: a, rhs: b });
        };
    }
    Ok(Shape::from(out))
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let dims = s.dims();
    let mut strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = if dims[i] == 1 && out.dims()[i] != 1 { 0 } else { acc };
        acc *= dims[i];
    }
    strides
}

/// Visits every output index with the matching flat offsets into `a` and `b`.
fn for_each_broadcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut i = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for y in 0..out.h {
                let ra = n * sa[0] + c * sa[1] + y * sa[2];
                let rb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out.w {
                    f(i, ra + x * sa[3], rb + x * sb[3]);
                    i += 1;
                }
            }
        }
    }
}

fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>, TensorError> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let (sa, sb) = (broadcast_strides(a.shape(), out), broadcast_strides(b.shape(), out));
    let mut data = vec![T::zero(); out.len()];
    for_each_broadcast(out, sa, sb, |i, ia, ib| data[i] = f(a.data()[ia], b.data()[ib]));
    Tensor4::new(out, data)
}

/// Elementwise product with broadcasting over size-1 axes.
pub fn eltwise_mul<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    broadcast_binary("eltwise_mul", a, b, |x, y| x * y)
}

/// Elementwise sum with broadcasting over size-1 axes.
pub fn eltwise_add<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    broadcast_binary("eltwise_add", a, b, |x, y| x + y)
}

/// Sums `grad` (shaped like the broadcast output) down to `target`,
/// optionally weighting each element by the other operand.
pub(crate) fn reduce_broadcast_grad<T: Element>(
    grad: &Tensor4<T>,
    target: Shape,
    other: Option<(&Tensor4<T>, Shape)>,
) -> Tensor4<T> {
    let out = grad.shape();
    if other.is_none() && target == out {
        return grad.clone();
    }
    let st = broadcast_strides(target, out);
    let mut acc = vec![T::zero(); target.len()];
    match other {
        Some((o, os)) => {
            let so = broadcast_strides(os, out);
            for_each_broadcast(out, st, so, |i, it, io| acc[it] += grad.data()[i] * o.data()[io]);
        }
        None => for_each_broadcast(out, st, st, |i, it, _| acc[it] += grad.data()[i]),
    }
    Tensor4::new(target, acc).expect("broadcast grad shape")
}

/// Concatenates along the channel axis, preserving part order.
pub fn concat_channels<T: Element>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>, TensorError> {
    let first = parts.first().ok_or(TensorError::EmptyList("concat_channels"))?.shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        for (axis, a, b) in [
            (Axis::Batch, first.n, s.n),
            (Axis::Height, first.h, s.h),
            (Axis::Width, first.w, s.w),
        ] {
            if a != b {
                return Err(TensorError::Dim {
                    op: "concat_channels",
                    axis,
                    expected: a,
                    found: b,
                });
            }
        }
        channels += s.c;
    }
    let out = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out.len());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor4::new(out, data)
}

/// Per-sample channel means: `n` vectors of length `c`.
pub fn global_avg_pool<T: Element>(x: &Tensor4<T>) -> Vec<Vec<T>> {
    let pooled = channel_pool_avg(x);
    pooled.data().chunks(x.shape().c).map(<[T]>::to_vec).collect()
}

/// Row-wise softmax of `(n, k, 1, 1)` logits.
pub fn softmax_rows<T: Element>(logits: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let s = logits.shape();
    ensure_vector("softmax_rows", s)?;
    if s.c < 2 {
        return Err(TensorError::TooFewClasses(s.c));
    }
    let mut out = Vec::with_capacity(s.len());
    for row in logits.data().chunks(s.c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor4::new(s, out)
}

/// `log-sum-exp` of each row, computed with max subtraction.
pub(crate) fn logsumexp_rows<T: Element>(rows: &[T], k: usize) -> Vec<T> {
    rows.chunks(k)
        .map(|row| {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
        })
        .collect()
}

/// Mean negative log-likelihood of `labels` under softmax of `logits`.
pub fn cross_entropy<T: Element>(logits: &Tensor4<T>, labels: &[usize]) -> Result<T, TensorError> {
    let s = logits.shape();
    check_labels(s, labels)?;
    let lse = logsumexp_rows(logits.data(), s.c);
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| lse[i] - logits.data()[i * s.c + l])
        .sum();
    Ok(total / T::from_usize(s.n).unwrap())
}

pub(crate) fn check_labels(s: Shape, labels: &[usize]) -> Result<(), TensorError> {
    ensure_vector("cross_entropy", s)?;
    if labels.len() != s.n {
        return Err(TensorError::Dim {
            op: "cross_entropy labels",
            axis: Axis::Batch,
            expected: s.n,
            found: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= s.c) {
        return Err(TensorError::LabelOutOfRange { label, classes: s.c });
    }
    Ok(())
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows<T: Element>(logits: &Tensor4<T>) -> Vec<usize> {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .map(|row| argmax_first(row.iter().copied()))
        .collect()
}
