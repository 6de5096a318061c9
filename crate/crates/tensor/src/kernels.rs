//! Slice-level numeric kernels shared by the tape and by inference paths.
//!
//! Convolution goes through im2col so that every inner loop is a contiguous
//! axpy the compiler can vectorize. Reductions are written as sequential sums
//! so results are bit-reproducible.

use crate::Real;

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a, b, &mut out);
    out
}

pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Output size along one axis, or `None` when the kernel does not fit.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of a single-sample square-kernel 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ho = conv_out_dim(h, k, stride, pad)?;
        let wo = conv_out_dim(w, k, stride, pad)?;
        Some(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold `x[cin×h×w]` into a `(cin·k·k) × (ho·wo)` patch matrix.
pub fn im2col<T: Real>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch_len() * plane];
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back onto `dx[cin×h×w]`.
pub fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[cout×ho×wo]` for weights `w[cout×cin×k×k]`.
pub fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let cols = im2col(g, x);
    matmul(g.cout, g.patch_len(), g.out_plane(), w, &cols)
}

/// Gradients with respect to the input and the weights, each only if requested.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let dw = need_dw.then(|| {
        let cols_t = transpose(patch, plane, &im2col(g, x));
        matmul(g.cout, plane, patch, gout, &cols_t)
    });
    let dx = need_dx.then(|| {
        let w_t = transpose(g.cout, patch, w);
        let dcols = matmul(patch, g.cout, plane, &w_t, gout);
        let mut dx = vec![T::zero(); g.cin * g.h * g.w];
        col2im(g, &dcols, &mut dx);
        dx
    });
    (dx, dw)
}
