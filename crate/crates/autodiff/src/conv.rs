//! im2col based 2-D cross-correlation kernels. 1-D convolution is the
//! `h = 1` special case.

use rayon::prelude::*;

use crate::tensor::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        (c, h, w): (usize, usize, usize),
        (out_c, kh, kw): (usize, usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Option<Self> {
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            out_c,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.positions()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.positions();
    x.fill(T::zero());
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] = dst[iw as usize] + row[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = K · im2col(x[n])`, parallel over the batch.
pub(crate) fn forward<T: Scalar>(x: &[T], kernel: &[T], g: &ConvGeom, batch: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each_init(
            || vec![T::zero(); g.patch() * g.positions()],
            |col, (out_n, x_n)| {
                im2col(x_n, g, col);
                gemm(
                    g.out_c,
                    g.patch(),
                    g.positions(),
                    kernel,
                    false,
                    col,
                    false,
                    T::zero(),
                    out_n,
                );
            },
        );
    out
}

/// Gradient with respect to the kernel. Per-sample partials are summed in
/// batch order so the result does not depend on thread scheduling.
pub(crate) fn backward_kernel<T: Scalar>(
    x: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    batch: usize,
) -> Vec<T> {
    let k_len = g.out_c * g.patch();
    let partials: Vec<Vec<T>> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let mut col = vec![T::zero(); g.patch() * g.positions()];
            im2col(&x[n * g.in_len()..][..g.in_len()], g, &mut col);
            let mut dk = vec![T::zero(); k_len];
            gemm(
                g.out_c,
                g.positions(),
                g.patch(),
                &grad_out[n * g.out_len()..][..g.out_len()],
                false,
                &col,
                true,
                T::zero(),
                &mut dk,
            );
            dk
        })
        .collect();
    let mut total = vec![T::zero(); k_len];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t = *t + p;
        }
    }
    total
}

pub(crate) fn backward_input<T: Scalar>(
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    batch: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * g.in_len()];
    dx.par_chunks_mut(g.in_len())
        .zip(grad_out.par_chunks(g.out_len()))
        .for_each_init(
            || vec![T::zero(); g.patch() * g.positions()],
            |dcol, (dx_n, dy_n)| {
                gemm(
                    g.patch(),
                    g.out_c,
                    g.positions(),
                    kernel,
                    true,
                    dy_n,
                    false,
                    T::zero(),
                    dcol,
                );
                col2im(dcol, g, dx_n);
            },
        );
    dx
}
