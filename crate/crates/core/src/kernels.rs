//! Convolution, pooling and dense kernels on raw slices, shared by the
//! forward and backward passes of the tape ops.
//!
//! Convolution is im2col + GEMM, one batch sample at a time so the column
//! scratch stays small and cache-resident. Every convolution in the network
//! has stride 1, so im2col/col2im have a contiguous-copy fast path for it.

use crate::scalar::Scalar;

/// Output extent of a 1-d convolution: `(size + 2*pad - k)/stride + 1`.
/// `None` when the window does not fit or the stride does not divide evenly.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 {
        return None;
    }
    let padded = size + 2 * pad;
    if k > padded {
        return None;
    }
    let span = padded - k;
    if !span.is_multiple_of(stride) {
        return None;
    }
    Some(span / stride + 1)
}

/// Validated geometry of one 2-d convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let oh = conv_out_dim(h, kh, stride, pad)?;
        let ow = conv_out_dim(w, kw, stride, pad)?;
        Some(Conv2dGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Rows of the column matrix: `cin * kh * kw`.
    #[inline]
    pub fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the column matrix: `oh * ow`.
    #[inline]
    pub fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1 stride-1 unpadded conv, whose column matrix aliases the input;
    /// such convs need no `cols` scratch.
    #[inline]
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c[m,n] = alpha*a[m,k]*b[k,n] + beta*c[m,n]`, all row-major contiguous.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] = a^T*b + beta*c` where `a` is stored as `[k,m]`.
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] = a*b^T + beta*c` where `b` is stored as `[n,k]`.
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], beta: S, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one sample `[cin,h,w]` into columns `[ckk, oh*ow]` with zero
/// padding.
pub fn im2col<S: Scalar>(x: &[S], g: &Conv2dGeom, cols: &mut [S]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(cols.len(), g.ckk() * g.ohw());
    let (h, w, ow) = (g.h as isize, g.w as isize, g.ow);
    let mut row = 0usize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst_base = row * g.ohw();
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[dst_base + oy * ow..dst_base + (oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad; copy the in-bounds span, zero the rest.
                        let ix0 = kx as isize - g.pad as isize;
                        let lo = (-ix0).max(0).min(ow as isize) as usize;
                        let hi = (w - ix0).max(0).min(ow as isize) as usize;
                        dst[..lo].fill(S::zero());
                        dst[lo..hi]
                            .copy_from_slice(&src_row[(lo as isize + ix0) as usize..(hi as isize + ix0) as usize]);
                        dst[hi..].fill(S::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < w {
                                src_row[ix as usize]
                            } else {
                                S::zero()
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds columns `[ckk, oh*ow]` back onto one sample `[cin,h,w]`;
/// the adjoint of [`im2col`].
pub fn col2im_add<S: Scalar>(cols: &[S], g: &Conv2dGeom, x: &mut [S]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(cols.len(), g.ckk() * g.ohw());
    let (h, w, ow) = (g.h as isize, g.w as isize, g.ow);
    let mut row = 0usize;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src_base = row * g.ohw();
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &cols[src_base + oy * ow..src_base + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = kx as isize - g.pad as isize;
                        let lo = (-ix0).max(0).min(ow as isize) as usize;
                        let hi = (w - ix0).max(0).min(ow as isize) as usize;
                        for ox in lo..hi {
                            dst_row[(ox as isize + ix0) as usize] += src[ox];
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched convolution: `out[i] = kernel * cols(x[i]) + bias`.
/// `cols` is caller-provided scratch of size `ckk * ohw`.
pub fn conv2d_forward<S: Scalar>(
    x: &[S],
    kernel: &[S],
    bias: &[S],
    g: &Conv2dGeom,
    cols: &mut [S],
    out: &mut [S],
) {
    let (in_sz, out_sz, ohw) = (g.cin * g.h * g.w, g.cout * g.ohw(), g.ohw());
    debug_assert_eq!(kernel.len(), g.cout * g.ckk());
    debug_assert_eq!(bias.len(), g.cout);
    debug_assert_eq!(out.len(), g.n * out_sz);
    for i in 0..g.n {
        let x_i = &x[i * in_sz..(i + 1) * in_sz];
        // A pointwise conv's column matrix is the input itself: [cin, h*w].
        let cols_i: &[S] = if g.is_pointwise() {
            x_i
        } else {
            im2col(x_i, g, cols);
            cols
        };
        let out_i = &mut out[i * out_sz..(i + 1) * out_sz];
        gemm_nn(g.cout, g.ckk(), ohw, kernel, cols_i, S::zero(), out_i);
        for co in 0..g.cout {
            let b = bias[co];
            for v in &mut out_i[co * ohw..(co + 1) * ohw] {
                *v += b;
            }
        }
    }
}

/// Accumulates convolution gradients: `dx += `, `dkernel += `, `dbias += `.
/// `cols`/`dcols` are caller scratch of size `ckk * ohw` each.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    kernel: &[S],
    dy: &[S],
    g: &Conv2dGeom,
    cols: &mut [S],
    dcols: &mut [S],
    dx: &mut [S],
    dkernel: &mut [S],
    dbias: &mut [S],
) {
    let (in_sz, out_sz, ohw, ckk) = (g.cin * g.h * g.w, g.cout * g.ohw(), g.ohw(), g.ckk());
    for i in 0..g.n {
        let x_i = &x[i * in_sz..(i + 1) * in_sz];
        let dy_i = &dy[i * out_sz..(i + 1) * out_sz];
        if g.is_pointwise() {
            // Columns alias the input, and col2im is the identity, so both
            // products accumulate directly without scratch.
            gemm_nt(g.cout, ohw, ckk, dy_i, x_i, S::one(), dkernel);
            gemm_tn(ckk, g.cout, ohw, kernel, dy_i, S::one(), &mut dx[i * in_sz..(i + 1) * in_sz]);
        } else {
            im2col(x_i, g, cols);
            // dkernel += dy_i * cols^T
            gemm_nt(g.cout, ohw, ckk, dy_i, cols, S::one(), dkernel);
            // dcols = kernel^T * dy_i
            gemm_tn(ckk, g.cout, ohw, kernel, dy_i, S::zero(), dcols);
            col2im_add(dcols, g, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
        for co in 0..g.cout {
            let mut acc = 0.0f64;
            for v in &dy_i[co * ohw..(co + 1) * ohw] {
                acc += v.as_f64();
            }
            dbias[co] += S::from_f64(acc);
        }
    }
}

/// 2x2/2 max pooling. Writes pooled values and, per output element, the flat
/// index of its argmax in `x` (first index in row-major window order on ties).
pub fn maxpool2_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [S],
    argmax: &mut [u32],
) {
    debug_assert!(h.is_multiple_of(2) && w.is_multiple_of(2));
    debug_assert_eq!(out.len(), n * c * (h / 2) * (w / 2));
    debug_assert_eq!(argmax.len(), out.len());
    let (oh, ow) = (h / 2, w / 2);
    let mut o = 0usize;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let p = base + (2 * oy) * w + 2 * ox;
                let window = [p, p + 1, p + w, p + w + 1];
                let mut best = window[0];
                let mut best_v = x[best];
                for &q in &window[1..] {
                    if x[q] > best_v {
                        best = q;
                        best_v = x[q];
                    }
                }
                out[o] = best_v;
                argmax[o] = best as u32;
                o += 1;
            }
        }
    }
}

/// Routes pooled gradients back to the recorded argmax positions: `dx += `.
pub fn maxpool2_backward<S: Scalar>(dy: &[S], argmax: &[u32], dx: &mut [S]) {
    debug_assert_eq!(dy.len(), argmax.len());
    for (g, &p) in dy.iter().zip(argmax.iter()) {
        dx[p as usize] += *g;
    }
}

/// 1-d convolution along the channel axis with zero padding `(k-1)/2` and no
/// bias: `out[n,c] = sum_j kernel[j] * v[n, c + j - (k-1)/2]`.
pub fn conv1d_channels_forward<S: Scalar>(v: &[S], kernel: &[S], n: usize, c: usize, out: &mut [S]) {
    let k = kernel.len();
    debug_assert!(k % 2 == 1 && k <= c);
    debug_assert_eq!(v.len(), n * c);
    debug_assert_eq!(out.len(), n * c);
    let off = (k / 2) as isize;
    for i in 0..n {
        let row = &v[i * c..(i + 1) * c];
        for cc in 0..c {
            let mut acc = S::zero();
            for (j, &kj) in kernel.iter().enumerate() {
                let idx = cc as isize + j as isize - off;
                if idx >= 0 && (idx as usize) < c {
                    acc += kj * row[idx as usize];
                }
            }
            out[i * c + cc] = acc;
        }
    }
}

/// Accumulates channel-convolution gradients: `dv += `, `dkernel += `.
pub fn conv1d_channels_backward<S: Scalar>(
    v: &[S],
    kernel: &[S],
    dy: &[S],
    n: usize,
    c: usize,
    dv: &mut [S],
    dkernel: &mut [S],
) {
    let k = kernel.len();
    let off = (k / 2) as isize;
    for i in 0..n {
        for cc in 0..c {
            let g = dy[i * c + cc];
            for j in 0..k {
                let idx = cc as isize + j as isize - off;
                if idx >= 0 && (idx as usize) < c {
                    dv[i * c + idx as usize] += kernel[j] * g;
                    dkernel[j] += v[i * c + idx as usize] * g;
                }
            }
        }
    }
}

/// `y[n,m] = x[n,d] * w[d,m] + b[m]`.
pub fn dense_forward<S: Scalar>(x: &[S], w: &[S], b: &[S], n: usize, d: usize, m: usize, y: &mut [S]) {
    gemm_nn(n, d, m, x, w, S::zero(), y);
    for i in 0..n {
        for (j, bv) in b.iter().enumerate() {
            y[i * m + j] += *bv;
        }
    }
}

/// Accumulates dense-layer gradients: `dx += dy*w^T`, `dw += x^T*dy`,
/// `db += column sums of dy`.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    n: usize,
    d: usize,
    m: usize,
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    gemm_nt(n, m, d, dy, w, S::one(), dx);
    gemm_tn(d, n, m, x, dy, S::one(), dw);
    for j in 0..m {
        let mut acc = 0.0f64;
        for i in 0..n {
            acc += dy[i * m + j].as_f64();
        }
        db[j] += S::from_f64(acc);
    }
}
