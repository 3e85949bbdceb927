//! Convolution kernels (NCHW) built on im2col/col2im and a strided GEMM.
//!
//! Column buffers hold every sample of the batch side by side: row `r` of the
//! buffer is one (channel, ky, kx) tap and column `s * positions + p` is spatial
//! position `p` of sample `s`. A whole batch then costs a single GEMM.

use serde::{Deserialize, Serialize};

use super::{Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }
}

/// `floor((extent + 2p - k) / s) + 1`.
pub fn conv_out_extent(extent: usize, g: ConvGeometry) -> Result<usize, TensorError> {
    if g.stride == 0 || g.kernel == 0 {
        return Err(TensorError::shape("conv2d", "kernel and stride must be positive"));
    }
    let padded = extent + 2 * g.padding;
    if padded < g.kernel {
        return Err(TensorError::shape(
            "conv2d",
            format!(
                "padded extent {padded} (in {extent}, p {}) smaller than kernel {}",
                g.padding, g.kernel
            ),
        ));
    }
    Ok((padded - g.kernel) / g.stride + 1)
}

/// `(extent - 1) * s - 2p + k + output_padding`.
pub fn conv_transpose_out_extent(extent: usize, g: ConvGeometry) -> Result<usize, TensorError> {
    if g.stride == 0 || g.kernel == 0 || extent == 0 {
        return Err(TensorError::shape(
            "conv_transpose2d",
            "kernel, stride and input extent must be positive",
        ));
    }
    if g.output_padding >= g.stride {
        return Err(TensorError::shape(
            "conv_transpose2d",
            format!(
                "output padding {} must be smaller than stride {}",
                g.output_padding, g.stride
            ),
        ));
    }
    let full = (extent - 1) * g.stride + g.kernel + g.output_padding;
    if full <= 2 * g.padding {
        return Err(TensorError::shape(
            "conv_transpose2d",
            format!("padding {} consumes the whole output", g.padding),
        ));
    }
    Ok(full - 2 * g.padding)
}

/// Output columns `ox` whose input column `ox * s + kj - p` lies in `0..w`.
fn valid_columns(w: usize, ow: usize, kj: usize, g: ConvGeometry) -> (usize, usize) {
    let s = g.stride;
    let lo = g.padding.saturating_sub(kj).div_ceil(s);
    let hi = if w + g.padding > kj { (w + g.padding - kj).div_ceil(s) } else { 0 };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    dst: &mut [T],
    ld: usize,
    off: usize,
) {
    let k = g.kernel;
    let s = g.stride;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * ld + off;
                let (lo, hi) = valid_columns(w, ow, kj, g);
                for oy in 0..oh {
                    let out = &mut dst[base + oy * ow..base + (oy + 1) * ow];
                    let iy = (oy * s + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * s + kj - g.padding;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                        } else {
                            for (o, &v) in out[lo..hi].iter_mut().zip(line[first..].iter().step_by(s)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    ld: usize,
    off: usize,
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let k = g.kernel;
    let s = g.stride;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let base = row * ld + off;
                let (lo, hi) = valid_columns(w, ow, kj, g);
                if lo >= hi {
                    continue;
                }
                let first = lo * s + kj - g.padding;
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[base + oy * ow + lo..base + oy * ow + hi];
                    let line = &mut plane[iy as usize * w + first..(iy as usize + 1) * w];
                    for (d, &v) in line.iter_mut().step_by(s).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// (n, c, p) -> (c, n * p)
fn to_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            let from = &src[(s * c + ch) * p..(s * c + ch + 1) * p];
            out[ch * n * p + s * p..ch * n * p + (s + 1) * p].copy_from_slice(from);
        }
    }
    out
}

/// (c, n * p) -> (n, c, p)
fn to_sample_major<T: Scalar>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * p..(s * c + ch + 1) * p]
                .copy_from_slice(&src[ch * n * p + s * p..ch * n * p + (s + 1) * p]);
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], p: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(p).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Scalar>(dy: &[T], c: usize, p: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for (i, chunk) in dy.chunks(p).enumerate() {
        sums[i % c] += chunk.iter().copied().sum::<T>();
    }
    sums
}

/// Cross-correlation of `x` (n, ci, h, w) with `weight` (co, ci, k, k).
/// Returns the output values and its spatial extent.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    bias: Option<&[T]>,
    g: ConvGeometry,
) -> Result<(Vec<T>, usize, usize), TensorError> {
    let oh = conv_out_extent(h, g)?;
    let ow = conv_out_extent(w, g)?;
    let kk = ci * g.kernel * g.kernel;
    let p = oh * ow;
    let ld = n * p;
    let mut cols = vec![T::zero(); kk * ld];
    for s in 0..n {
        im2col(&x[s * ci * h * w..(s + 1) * ci * h * w], ci, h, w, g, oh, ow, &mut cols, ld, s * p);
    }
    let mut tmp = vec![T::zero(); co * ld];
    T::gemm(
        co,
        kk,
        ld,
        T::one(),
        weight,
        kk as isize,
        1,
        &cols,
        ld as isize,
        1,
        T::zero(),
        &mut tmp,
        ld as isize,
        1,
    );
    let mut out = to_sample_major(&tmp, n, co, p);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, p);
    }
    Ok((out, oh, ow))
}

/// Gradients of [`conv2d_forward`]: `(dx, dweight, dbias)`, each computed only
/// when requested.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    g: ConvGeometry,
    dy: &[T],
    want: (bool, bool, bool),
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>), TensorError> {
    let oh = conv_out_extent(h, g)?;
    let ow = conv_out_extent(w, g)?;
    let kk = ci * g.kernel * g.kernel;
    let p = oh * ow;
    let ld = n * p;
    let dy_c = to_channel_major(dy, n, co, p);

    let dw = if want.1 {
        let mut cols = vec![T::zero(); kk * ld];
        for s in 0..n {
            im2col(&x[s * ci * h * w..(s + 1) * ci * h * w], ci, h, w, g, oh, ow, &mut cols, ld, s * p);
        }
        let mut dw = vec![T::zero(); co * kk];
        T::gemm(
            co,
            ld,
            kk,
            T::one(),
            &dy_c,
            ld as isize,
            1,
            &cols,
            1,
            ld as isize,
            T::zero(),
            &mut dw,
            kk as isize,
            1,
        );
        Some(dw)
    } else {
        None
    };

    let dx = if want.0 {
        let mut dcols = vec![T::zero(); kk * ld];
        T::gemm(
            kk,
            co,
            ld,
            T::one(),
            weight,
            1,
            kk as isize,
            &dy_c,
            ld as isize,
            1,
            T::zero(),
            &mut dcols,
            ld as isize,
            1,
        );
        let mut dx = vec![T::zero(); n * ci * h * w];
        for s in 0..n {
            col2im(
                &dcols,
                ld,
                s * p,
                ci,
                h,
                w,
                g,
                oh,
                ow,
                &mut dx[s * ci * h * w..(s + 1) * ci * h * w],
            );
        }
        Some(dx)
    } else {
        None
    };

    let db = want.2.then(|| channel_sums(dy, co, p));
    Ok((dx, dw, db))
}

/// Transposed convolution of `x` (n, ci, h, w) with `weight` (ci, co, k, k).
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    bias: Option<&[T]>,
    g: ConvGeometry,
) -> Result<(Vec<T>, usize, usize), TensorError> {
    let oh = conv_transpose_out_extent(h, g)?;
    let ow = conv_transpose_out_extent(w, g)?;
    let kk = co * g.kernel * g.kernel;
    let p = h * w;
    let ld = n * p;
    let x_c = to_channel_major(x, n, ci, p);
    let mut cols = vec![T::zero(); kk * ld];
    T::gemm(
        kk,
        ci,
        ld,
        T::one(),
        weight,
        1,
        kk as isize,
        &x_c,
        ld as isize,
        1,
        T::zero(),
        &mut cols,
        ld as isize,
        1,
    );
    let mut out = vec![T::zero(); n * co * oh * ow];
    for s in 0..n {
        col2im(
            &cols,
            ld,
            s * p,
            co,
            oh,
            ow,
            g,
            h,
            w,
            &mut out[s * co * oh * ow..(s + 1) * co * oh * ow],
        );
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, oh * ow);
    }
    Ok((out, oh, ow))
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    g: ConvGeometry,
    dy: &[T],
    want: (bool, bool, bool),
) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>), TensorError> {
    let oh = conv_transpose_out_extent(h, g)?;
    let ow = conv_transpose_out_extent(w, g)?;
    let kk = co * g.kernel * g.kernel;
    let p = h * w;
    let ld = n * p;
    let mut dcols = vec![T::zero(); kk * ld];
    if want.0 || want.1 {
        for s in 0..n {
            im2col(
                &dy[s * co * oh * ow..(s + 1) * co * oh * ow],
                co,
                oh,
                ow,
                g,
                h,
                w,
                &mut dcols,
                ld,
                s * p,
            );
        }
    }
    let dx = if want.0 {
        let mut dx_c = vec![T::zero(); ci * ld];
        T::gemm(
            ci,
            kk,
            ld,
            T::one(),
            weight,
            kk as isize,
            1,
            &dcols,
            ld as isize,
            1,
            T::zero(),
            &mut dx_c,
            ld as isize,
            1,
        );
        Some(to_sample_major(&dx_c, n, ci, p))
    } else {
        None
    };
    let dw = if want.1 {
        let x_c = to_channel_major(x, n, ci, p);
        let mut dw = vec![T::zero(); ci * kk];
        T::gemm(
            ci,
            ld,
            kk,
            T::one(),
            &x_c,
            ld as isize,
            1,
            &dcols,
            1,
            ld as isize,
            T::zero(),
            &mut dw,
            kk as isize,
            1,
        );
        Some(dw)
    } else {
        None
    };
    let db = want.2.then(|| channel_sums(dy, co, oh * ow));
    Ok((dx, dw, db))
}
