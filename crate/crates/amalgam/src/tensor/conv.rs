//! im2col-based 2-D convolution and transposed convolution.
//!
//! Both directions share one `im2col`/`col2im` pair: a transposed convolution
//! is exactly the adjoint of a convolution with the same kernel geometry, so
//! its forward pass is the convolution's input-gradient and vice versa. The
//! unit tests pin this down with a loop oracle and an inner-product
//! adjointness identity.

use ndarray::{Array2, Array3, ArrayD, Ix3, Ix4};

use super::{Scalar, Var};

/// Patch matrix of `x: [C, SH*stride-ish source grid]`.
///
/// For every source position `(si, sj)` on an `sh x sw` grid, gathers the
/// `C * kh * kw` window rooted at `(si*stride - pad, sj*stride - pad)` in `x`
/// (zero for out-of-bounds taps). Output: `[sh*sw, C*kh*kw]`.
fn im2col<F: Scalar>(
    x: &Array3<F>,
    sh: usize,
    sw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: i64,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let kk = kh * kw;
    let mut p = Array2::zeros((sh * sw, c * kk));
    for si in 0..sh {
        for sj in 0..sw {
            let row = si * sw + sj;
            let (r0, c0) = (
                (si * stride) as i64 - pad,
                (sj * stride) as i64 - pad,
            );
            for ci in 0..c {
                for ki in 0..kh {
                    let ri = r0 + ki as i64;
                    if ri < 0 || ri as usize >= h {
                        continue;
                    }
                    for kj in 0..kw {
                        let cj = c0 + kj as i64;
                        if cj < 0 || cj as usize >= w {
                            continue;
                        }
                        p[[row, ci * kk + ki * kw + kj]] =
                            x[[ci, ri as usize, cj as usize]];
                    }
                }
            }
        }
    }
    p
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto a `[C, H, W]`
/// canvas.
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    sh: usize,
    sw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: i64,
) -> Array3<F> {
    let kk = kh * kw;
    debug_assert_eq!(cols.dim(), (sh * sw, c * kk));
    let mut x = Array3::zeros((c, h, w));
    for si in 0..sh {
        for sj in 0..sw {
            let row = si * sw + sj;
            let (r0, c0) = (
                (si * stride) as i64 - pad,
                (sj * stride) as i64 - pad,
            );
            for ci in 0..c {
                for ki in 0..kh {
                    let ri = r0 + ki as i64;
                    if ri < 0 || ri as usize >= h {
                        continue;
                    }
                    for kj in 0..kw {
                        let cj = c0 + kj as i64;
                        if cj < 0 || cj as usize >= w {
                            continue;
                        }
                        x[[ci, ri as usize, cj as usize]] +=
                            cols[[row, ci * kk + ki * kw + kj]];
                    }
                }
            }
        }
    }
    x
}

fn to_chw<F: Scalar>(mat: &Array2<F>, c: usize, h: usize, w: usize) -> Array3<F> {
    // mat is [h*w, c]; output [c, h, w].
    let mut y = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            for ci in 0..c {
                y[[ci, i, j]] = mat[[i * w + j, ci]];
            }
        }
    }
    y
}

fn from_chw<F: Scalar>(x: &ndarray::ArrayView3<F>) -> Array2<F> {
    // [c, h, w] -> [h*w, c]
    let (c, h, w) = x.dim();
    let mut m = Array2::zeros((h * w, c));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                m[[i * w + j, ci]] = x[[ci, i, j]];
            }
        }
    }
    m
}

impl<'t, F: Scalar> Var<'t, F> {
    /// 2-D convolution with bias.
    ///
    /// `self: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`, output
    /// `[Cout, Ho, Wo]` with `Ho = (H + 2*pad - kh) / stride + 1` (the
    /// division must be exact; asserted).
    pub fn conv2d(
        self,
        w: Var<'t, F>,
        b: Var<'t, F>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, F> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let x3 = x.view().into_dimensionality::<Ix3>().unwrap().to_owned();
        let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
        let (cout, cin, kh, kw) = w4.dim();
        let (xc, h, ww_) = x3.dim();
        assert_eq!(xc, cin, "conv2d: input channels");
        assert_eq!(bv.len(), cout, "conv2d: bias length");
        assert!(
            (h + 2 * pad - kh) % stride == 0 && (ww_ + 2 * pad - kw) % stride == 0,
            "conv2d: geometry must tile exactly"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (ww_ + 2 * pad - kw) / stride + 1;

        let p = im2col(&x3, ho, wo, kh, kw, stride, pad as i64);
        let w_mat = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let out_mat = p.dot(&w_mat.t()); // [HoWo, Cout]
        let mut y = to_chw(&out_mat, cout, ho, wo);
        for (mut ch, bi) in y.outer_iter_mut().zip(bv.iter()) {
            ch.mapv_inplace(|v| v + *bi);
        }

        let (pb, wb) = (p, w_mat);
        let in_dim = (cin, h, ww_);
        self.tape.push(
            y.into_dyn(),
            vec![self.idx, w.idx, b.idx],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let g_mat = from_chw(&g3); // [HoWo, Cout]
                let dw_mat = g_mat.t().dot(&pb); // [Cout, CinKK]
                let dp = g_mat.dot(&wb); // [HoWo, CinKK]
                let dx = col2im(
                    &dp, in_dim.0, in_dim.1, in_dim.2, ho, wo, kh, kw, stride,
                    pad as i64,
                );
                let db: Vec<F> = g3.outer_iter().map(|ch| ch.sum()).collect();
                vec![
                    Some(dx.into_dyn()),
                    Some(
                        dw_mat
                            .into_shape_with_order((cout, cin, kh, kw))
                            .unwrap()
                            .into_dyn(),
                    ),
                    Some(ArrayD::from_shape_vec(ndarray::IxDyn(&[cout]), db).unwrap()),
                ]
            })),
            None,
        )
    }

    /// Transposed 2-D convolution (deconvolution) with bias.
    ///
    /// `self: [Cin, H, W]`, `w: [Cin, Cout, kh, kw]`, `b: [Cout]`, output
    /// `[Cout, Ho, Wo]` with `Ho = (H - 1) * stride + kh - 2*pad`. This is
    /// the exact adjoint of [`Var::conv2d`] with the same geometry.
    pub fn deconv2d(
        self,
        w: Var<'t, F>,
        b: Var<'t, F>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, F> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
        let (cin, cout, kh, kw) = w4.dim();
        let (xc, h, ww_) = x3.dim();
        assert_eq!(xc, cin, "deconv2d: input channels");
        assert_eq!(bv.len(), cout, "deconv2d: bias length");
        let ho = (h - 1) * stride + kh;
        let wo = (ww_ - 1) * stride + kw;
        assert!(ho > 2 * pad && wo > 2 * pad, "deconv2d: geometry");
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);

        let x_mat = from_chw(&x3); // [HW, Cin]
        let w_mat = wv
            .view()
            .into_shape_with_order((cin, cout * kh * kw))
            .unwrap()
            .to_owned();
        let cols = x_mat.dot(&w_mat); // [HW, CoutKK]
        let mut y = col2im(&cols, cout, ho, wo, h, ww_, kh, kw, stride, pad as i64);
        for (mut ch, bi) in y.outer_iter_mut().zip(bv.iter()) {
            ch.mapv_inplace(|v| v + *bi);
        }

        let (xb, wb) = (x_mat, w_mat);
        self.tape.push(
            y.into_dyn(),
            vec![self.idx, w.idx, b.idx],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let g_cols = im2col(&g3, h, ww_, kh, kw, stride, pad as i64); // [HW, CoutKK]
                let dx_mat = g_cols.dot(&wb.t()); // [HW, Cin]
                let dx = {
                    let mut dx = Array3::zeros((cin, h, ww_));
                    for i in 0..h {
                        for j in 0..ww_ {
                            for ci in 0..cin {
                                dx[[ci, i, j]] = dx_mat[[i * ww_ + j, ci]];
                            }
                        }
                    }
                    dx
                };
                let dw_mat = xb.t().dot(&g_cols); // [Cin, CoutKK]
                let db: Vec<F> = g3.outer_iter().map(|ch| ch.sum()).collect();
                vec![
                    Some(dx.into_dyn()),
                    Some(
                        dw_mat
                            .into_shape_with_order((cin, cout, kh, kw))
                            .unwrap()
                            .into_dyn(),
                    ),
                    Some(ArrayD::from_shape_vec(ndarray::IxDyn(&[cout]), db).unwrap()),
                ]
            })),
            None,
        )
    }
}
