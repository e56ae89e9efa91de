//! Convolution, normalization and pooling kernels on raw NCHW buffers.
//!
//! Convolutions lower to im2col + GEMM per batch item. Weight gradients are
//! computed per item and summed in item order, so the parallel and
//! sequential builds produce identical bits.

use crate::par;
use crate::scalar::{gemm, ROW_MAJOR, TRANSPOSED};
use crate::Float;

/// Output extent of a strided, zero-padded convolution, or `None` when the
/// kernel does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 || output_pad >= stride {
        return None;
    }
    ((input - 1) * stride + kernel + output_pad).checked_sub(2 * pad)
}

/// Geometry of the image side (`c x h x w`) and patch grid (`oh x ow`) of a
/// convolution. A transposed convolution uses the same geometry with the
/// roles of input and output exchanged.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn patch_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn grid_len(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `o` in `0..n_out` whose input index
/// `o * stride + offset - pad` lands inside `0..size`.
fn valid_span(n_out: usize, stride: usize, offset: usize, pad: usize, size: usize) -> (usize, usize) {
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let hi = if size + pad > offset {
        ((size - 1 + pad - offset) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Float>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let grid = g.grid_len();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(g.oh, g.stride, ki, g.pad, g.h);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(g.ow, g.stride, kj, g.pad, g.w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * grid..(row + 1) * grid];
                if !(xlo == 0 && xhi == g.ow && ylo == 0 && yhi == g.oh) {
                    dst.fill(T::zero());
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if xlo == xhi {
                        continue;
                    }
                    let x0 = xlo * g.stride + kj - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                    } else {
                        for (v, &s) in line[xlo..xhi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch columns back onto the image.
fn col2im<T: Float>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let grid = g.grid_len();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(g.oh, g.stride, ki, g.pad, g.h);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(g.ow, g.stride, kj, g.pad, g.w);
                if xlo == xhi {
                    continue;
                }
                let x0 = xlo * g.stride + kj - g.pad;
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * grid..(row + 1) * grid];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &src[oy * g.ow + xlo..oy * g.ow + xhi];
                    let dst = &mut plane[iy * g.w + x0..(iy + 1) * g.w];
                    if g.stride == 1 {
                        dst.iter_mut().zip(line).for_each(|(d, &s)| *d += s);
                    } else {
                        for (d, &s) in dst.iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix of one image, borrowing the image itself for 1x1 kernels.
fn patches<'a, T: Float>(img: &'a [T], g: &ConvGeom, buf: &'a mut Vec<T>) -> &'a [T] {
    if g.is_pointwise() {
        img
    } else {
        buf.resize(g.patch_rows() * g.grid_len(), T::zero());
        im2col(img, g, buf);
        buf
    }
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad<T: Float>(gout: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let start = (i * c + ch) * plane;
            *d += gout[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}

fn sum_in_order<T: Float>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

/// Forward convolution. `x`: `n x g.c x g.h x g.w`, `w`: `cout x g.c x kh x kw`.
pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    n: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let out_len = cout * g.grid_len();
    let k = g.patch_rows();
    let mut out = vec![T::zero(); n * out_len];
    par::for_each_chunk_init(&mut out, out_len, Vec::new, |buf, i, dst| {
        let col = patches(&x[i * g.image_len()..(i + 1) * g.image_len()], g, buf);
        gemm(
            cout,
            k,
            g.grid_len(),
            T::one(),
            w,
            ROW_MAJOR(k),
            col,
            ROW_MAJOR(g.grid_len()),
            T::zero(),
            dst,
            ROW_MAJOR(g.grid_len()),
        );
        if let Some(b) = bias {
            add_channel_bias(dst, b, g.grid_len());
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    n: usize,
    w: &[T],
    cout: usize,
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let k = g.patch_rows();
    let grid = g.grid_len();
    let out_len = cout * grid;
    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); n * g.image_len()];
        par::for_each_chunk_init(&mut dx, g.image_len(), Vec::new, |dcol, i, dst| {
            let go = &gout[i * out_len..(i + 1) * out_len];
            if g.is_pointwise() {
                gemm(
                    k,
                    cout,
                    grid,
                    T::one(),
                    w,
                    TRANSPOSED(k),
                    go,
                    ROW_MAJOR(grid),
                    T::zero(),
                    dst,
                    ROW_MAJOR(grid),
                );
            } else {
                dcol.resize(k * grid, T::zero());
                gemm(
                    k,
                    cout,
                    grid,
                    T::one(),
                    w,
                    TRANSPOSED(k),
                    go,
                    ROW_MAJOR(grid),
                    T::zero(),
                    dcol,
                    ROW_MAJOR(grid),
                );
                col2im(dcol, g, dst);
            }
        });
        dx
    });
    let dw = need.1.then(|| {
        let parts = par::map_indices_init(n, Vec::new, |buf, i| {
            let col = patches(&x[i * g.image_len()..(i + 1) * g.image_len()], g, buf);
            let go = &gout[i * out_len..(i + 1) * out_len];
            let mut part = vec![T::zero(); cout * k];
            gemm(
                cout,
                grid,
                k,
                T::one(),
                go,
                ROW_MAJOR(grid),
                col,
                TRANSPOSED(grid),
                T::zero(),
                &mut part,
                ROW_MAJOR(k),
            );
            part
        });
        sum_in_order(parts, cout * k)
    });
    let db = need.2.then(|| channel_bias_grad(gout, n, cout, grid));
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `x`: `n x cin x g.oh x g.ow` (the patch grid),
/// `w`: `cin x g.c x kh x kw`; output `n x g.c x g.h x g.w`.
pub(crate) fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    n: usize,
    w: &[T],
    cin: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let k = g.patch_rows();
    let grid = g.grid_len();
    let in_len = cin * grid;
    let mut out = vec![T::zero(); n * g.image_len()];
    par::for_each_chunk_init(&mut out, g.image_len(), Vec::new, |col, i, dst| {
        let xi = &x[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            gemm(
                k,
                cin,
                grid,
                T::one(),
                w,
                TRANSPOSED(k),
                xi,
                ROW_MAJOR(grid),
                T::zero(),
                dst,
                ROW_MAJOR(grid),
            );
        } else {
            col.resize(k * grid, T::zero());
            gemm(
                k,
                cin,
                grid,
                T::one(),
                w,
                TRANSPOSED(k),
                xi,
                ROW_MAJOR(grid),
                T::zero(),
                col,
                ROW_MAJOR(grid),
            );
            col2im(col, g, dst);
        }
        if let Some(b) = bias {
            add_channel_bias(dst, b, g.h * g.w);
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    n: usize,
    w: &[T],
    cin: usize,
    gout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let k = g.patch_rows();
    let grid = g.grid_len();
    let in_len = cin * grid;
    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); n * in_len];
        par::for_each_chunk_init(&mut dx, in_len, Vec::new, |buf, i, dst| {
            let col = patches(&gout[i * g.image_len()..(i + 1) * g.image_len()], g, buf);
            gemm(
                cin,
                k,
                grid,
                T::one(),
                w,
                ROW_MAJOR(k),
                col,
                ROW_MAJOR(grid),
                T::zero(),
                dst,
                ROW_MAJOR(grid),
            );
        });
        dx
    });
    let dw = need.1.then(|| {
        let parts = par::map_indices_init(n, Vec::new, |buf, i| {
            let col = patches(&gout[i * g.image_len()..(i + 1) * g.image_len()], g, buf);
            let xi = &x[i * in_len..(i + 1) * in_len];
            let mut part = vec![T::zero(); cin * k];
            gemm(
                cin,
                grid,
                k,
                T::one(),
                xi,
                ROW_MAJOR(grid),
                col,
                TRANSPOSED(grid),
                T::zero(),
                &mut part,
                ROW_MAJOR(k),
            );
            part
        });
        sum_in_order(parts, cin * k)
    });
    let db = need.2.then(|| channel_bias_grad(gout, n, g.c, g.h * g.w));
    ConvGrads { dx, dw, db }
}

/// Per-(sample, channel) normalization. Returns the normalized values and
/// the inverse standard deviations.
pub(crate) fn instance_norm_forward<T: Float>(x: &[T], plane: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let planes = x.len() / plane;
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); planes];
    let count = T::of(plane as f64);
    for (p, (src, dst)) in x.chunks(plane).zip(y.chunks_mut(plane)).enumerate() {
        let mean = src.iter().copied().sum::<T>() / count;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let is = T::one() / (var + eps).sqrt();
        inv_std[p] = is;
        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = (s - mean) * is);
    }
    (y, inv_std)
}

pub(crate) fn instance_norm_backward<T: Float>(y: &[T], inv_std: &[T], gout: &[T], plane: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let count = T::of(plane as f64);
    for (p, ((yh, go), dst)) in y
        .chunks(plane)
        .zip(gout.chunks(plane))
        .zip(dx.chunks_mut(plane))
        .enumerate()
    {
        let mean_g = go.iter().copied().sum::<T>() / count;
        let mean_gy = go.iter().zip(yh).map(|(&g, &v)| g * v).sum::<T>() / count;
        for ((d, &g), &v) in dst.iter_mut().zip(go).zip(yh) {
            *d = inv_std[p] * (g - mean_g - v * mean_gy);
        }
    }
    dx
}

/// Non-overlapping `k x k` average pooling over `planes` planes of `h x w`.
pub(crate) fn avg_pool_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = s * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Float>(gout: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout[(p * oh + oy) * ow + ox] * scale;
                for dy in 0..k {
                    for dx_ in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dx_] = g;
                    }
                }
            }
        }
    }
    dx
}
