//! im2col convolution kernels. Column matrices have one row per
//! `(in_channel, ky, kx)` and one column per `(sample, out_y, out_x)`.

use super::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

pub fn im2col<T: Float>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let ncols = g.batch * p;
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst = &mut dst_row[n * p + oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_accumulate<T: Float>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let ncols = g.batch * p;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        let src = &src_row[n * p + oy * ow..][..ow];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns `(output NCHW, cols)`.
pub fn conv2d_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let p = g.positions();
    let ncols = g.batch * p;
    let kk = g.col_rows();
    let mut out = vec![T::zero(); g.batch * g.out_channels * p];
    for n in 0..g.batch {
        // SAFETY: strided views stay within `w`, `cols` and sample `n` of `out`.
        unsafe {
            T::gemm(
                g.out_channels,
                kk,
                p,
                T::one(),
                w.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr().add(n * p),
                ncols as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(n * g.out_channels * p),
                p as isize,
                1,
            );
        }
    }
    if let Some(b) = bias {
        for n in 0..g.batch {
            for (o, bo) in b.iter().enumerate() {
                for v in &mut out[(n * g.out_channels + o) * p..][..p] {
                    *v = *v + *bo;
                }
            }
        }
    }
    (out, cols)
}

/// Backward convolution. Accumulates into the provided gradient buffers.
pub fn conv2d_backward<T: Float>(
    dy: &[T],
    w: &[T],
    cols: &[T],
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let p = g.positions();
    let ncols = g.batch * p;
    let kk = g.col_rows();
    if let Some(dw) = dw {
        for n in 0..g.batch {
            // SAFETY: dy sample view is O x P; cols^T view is P x KK.
            unsafe {
                T::gemm(
                    g.out_channels,
                    p,
                    kk,
                    T::one(),
                    dy.as_ptr().add(n * g.out_channels * p),
                    p as isize,
                    1,
                    cols.as_ptr().add(n * p),
                    1,
                    ncols as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        }
    }
    if let Some(db) = db {
        for n in 0..g.batch {
            for (o, d) in db.iter_mut().enumerate() {
                let s: T = dy[(n * g.out_channels + o) * p..][..p].iter().copied().sum();
                *d = *d + s;
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); kk * ncols];
        for n in 0..g.batch {
            // SAFETY: W^T view is KK x O; dy sample is O x P; dcols view KK x P.
            unsafe {
                T::gemm(
                    kk,
                    g.out_channels,
                    p,
                    T::one(),
                    w.as_ptr(),
                    1,
                    kk as isize,
                    dy.as_ptr().add(n * g.out_channels * p),
                    p as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr().add(n * p),
                    ncols as isize,
                    1,
                );
            }
        }
        col2im_accumulate(&dcols, g, dx);
    }
}
