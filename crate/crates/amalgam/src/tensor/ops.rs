//! Differentiable operations on tape variables.
//!
//! Elementwise math, reductions, matrix products, softmax family, layer norm,
//! a fused LSTM cell, and the two attention-specific kernels (normalized
//! Gaussian heatmaps and window cropping). Each operation documents the shape
//! contract it asserts; public-facing validation with `Result` happens one
//! layer up, in the domain modules.
//!
//! Coordinate convention used by every spatial operation in this crate:
//! attention points are `[x, y]` pairs in `[0, 1]^2`, where `x` runs along
//! image columns and `y` along rows, and the cell `(row i, col j)` of an
//! `H x W` grid has center `((j + 0.5) / W, (i + 0.5) / H)`.

use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use super::{Scalar, Tape, Var};

/// Pixel-center coordinate matrix of an `h x w` grid, shape `[h*w, 2]`,
/// rows ordered row-major, columns `[x, y]`.
pub fn pixel_centers<F: Scalar>(h: usize, w: usize) -> Array2<F> {
    let mut m = Array2::zeros((h * w, 2));
    for i in 0..h {
        for j in 0..w {
            m[[i * w + j, 0]] = F::cast((j as f64 + 0.5) / w as f64);
            m[[i * w + j, 1]] = F::cast((i as f64 + 0.5) / h as f64);
        }
    }
    m
}

impl<'t, F: Scalar> Var<'t, F> {
    // ---------------------------------------------------------------- unary

    /// Elementwise negation.
    pub fn neg(self) -> Var<'t, F> {
        let v = self.value();
        self.tape.push(
            v.mapv(|x| -x),
            vec![self.idx],
            Some(Box::new(move |g| vec![Some(g.mapv(|x| -x))])),
            None,
        )
    }

    /// Multiply by a constant.
    pub fn scale(self, c: F) -> Var<'t, F> {
        let v = self.value();
        self.tape.push(
            v.mapv(|x| x * c),
            vec![self.idx],
            Some(Box::new(move |g| vec![Some(g.mapv(|x| x * c))])),
            None,
        )
    }

    /// Add a constant to every element.
    pub fn shift(self, c: F) -> Var<'t, F> {
        let v = self.value();
        self.tape.push(
            v.mapv(|x| x + c),
            vec![self.idx],
            Some(Box::new(move |g| vec![Some(g.clone())])),
            None,
        )
    }

    /// Elementwise square.
    pub fn sqr(self) -> Var<'t, F> {
        let v = self.value();
        let vb = v.clone();
        let two = F::cast(2.0);
        self.tape.push(
            v.mapv(|x| x * x),
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut d = (*vb).clone();
                d.zip_mut_with(g, |a, &b| *a = two * *a * b);
                vec![Some(d)]
            })),
            None,
        )
    }

    /// `sqrt(x + eps)`, with `eps > 0` keeping the derivative finite at 0.
    pub fn sqrt_eps(self, eps: F) -> Var<'t, F> {
        let v = self.value();
        let y = v.mapv(|x| (x + eps).sqrt());
        let yb = y.clone();
        let half = F::cast(0.5);
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut d = yb.mapv(|y| half / y);
                d.zip_mut_with(g, |a, &b| *a *= b);
                vec![Some(d)]
            })),
            None,
        )
    }

    /// Rectified linear unit.
    pub fn relu(self) -> Var<'t, F> {
        let v = self.value();
        let vb = v.clone();
        self.tape.push(
            v.mapv(|x| if x > F::zero() { x } else { F::zero() }),
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vb, |a, &x| {
                    if x <= F::zero() {
                        *a = F::zero();
                    }
                });
                vec![Some(d)]
            })),
            None,
        )
    }

    /// Logistic sigmoid.
    pub fn sigmoid(self) -> Var<'t, F> {
        let v = self.value();
        let y = v.mapv(|x| F::one() / (F::one() + (-x).exp()));
        let yb = y.clone();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut d = yb.mapv(|y| y * (F::one() - y));
                d.zip_mut_with(g, |a, &b| *a *= b);
                vec![Some(d)]
            })),
            None,
        )
    }

    /// Hyperbolic tangent.
    pub fn tanh(self) -> Var<'t, F> {
        let v = self.value();
        let y = v.mapv(|x| x.tanh());
        let yb = y.clone();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut d = yb.mapv(|y| F::one() - y * y);
                d.zip_mut_with(g, |a, &b| *a *= b);
                vec![Some(d)]
            })),
            None,
        )
    }

    /// Clamp to `[0, 1]` with pass-through gradient strictly inside the
    /// interval and zero outside (the usual clamp subgradient).
    pub fn clamp01(self) -> Var<'t, F> {
        let v = self.value();
        let vb = v.clone();
        self.tape.push(
            v.mapv(|x| x.max(F::zero()).min(F::one())),
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&vb, |a, &x| {
                    if x <= F::zero() || x >= F::one() {
                        *a = F::zero();
                    }
                });
                vec![Some(d)]
            })),
            None,
        )
    }

    // --------------------------------------------------------------- binary

    /// Elementwise sum of two same-shape tensors.
    pub fn add(self, rhs: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.tape.push(
            &*a + &*b,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| vec![Some(g.clone()), Some(g.clone())])),
            None,
        )
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(self, rhs: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.tape.push(
            &*a - &*b,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                vec![Some(g.clone()), Some(g.mapv(|x| -x))]
            })),
            None,
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(self, rhs: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let (ab, bb) = (a.clone(), b.clone());
        self.tape.push(
            &*a * &*b,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                let mut da = (*bb).clone();
                da.zip_mut_with(g, |x, &y| *x *= y);
                let mut db = (*ab).clone();
                db.zip_mut_with(g, |x, &y| *x *= y);
                vec![Some(da), Some(db)]
            })),
            None,
        )
    }

    /// Add a per-channel bias `[C]` to a `[C, H, W]` tensor.
    pub fn add_bias_chw(self, bias: Var<'t, F>) -> Var<'t, F> {
        let x = self.value();
        let b = bias.value();
        assert_eq!(x.ndim(), 3, "add_bias_chw: input must be [C,H,W]");
        assert_eq!(b.len(), x.shape()[0], "add_bias_chw: bias length");
        let mut y = (*x).clone();
        let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
        for (mut ch, &bv) in y
            .view_mut()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .outer_iter_mut()
            .zip(b1.iter())
        {
            ch.mapv_inplace(|v| v + bv);
        }
        self.tape.push(
            y,
            vec![self.idx, bias.idx],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let db = Array1::from_iter(g3.outer_iter().map(|ch| ch.sum()));
                vec![Some(g.clone()), Some(db.into_dyn())]
            })),
            None,
        )
    }

    /// Add a bias vector `[D]` to every row of a `[N, D]` matrix.
    pub fn add_bias_rows(self, bias: Var<'t, F>) -> Var<'t, F> {
        let x = self.value();
        let b = bias.value();
        assert_eq!(x.ndim(), 2, "add_bias_rows: input must be [N,D]");
        assert_eq!(b.len(), x.shape()[1], "add_bias_rows: bias length");
        let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        for mut row in y.outer_iter_mut() {
            row.zip_mut_with(&b1, |a, &v| *a += v);
        }
        self.tape.push(
            y.into_dyn(),
            vec![self.idx, bias.idx],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = g2.sum_axis(Axis(0));
                vec![Some(g.clone()), Some(db.into_dyn())]
            })),
            None,
        )
    }

    /// Multiply a `[C, H, W]` tensor by a `[1, H, W]` mask, broadcasting the
    /// mask across channels.
    pub fn mul_bcast0(self, mask: Var<'t, F>) -> Var<'t, F> {
        let x = self.value();
        let m = mask.value();
        assert_eq!(x.ndim(), 3, "mul_bcast0: input must be [C,H,W]");
        assert_eq!(
            m.shape(),
            &[1, x.shape()[1], x.shape()[2]],
            "mul_bcast0: mask must be [1,H,W]"
        );
        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let m2 = m
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .index_axis_move(Axis(0), 0);
        let mut y = x3.to_owned();
        for mut ch in y.outer_iter_mut() {
            ch.zip_mut_with(&m2, |a, &b| *a *= b);
        }
        let (xb, mb) = (x.clone(), m.clone());
        self.tape.push(
            y.into_dyn(),
            vec![self.idx, mask.idx],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let m2 = mb
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .index_axis_move(Axis(0), 0);
                let x3 = xb.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = g3.to_owned();
                for mut ch in dx.outer_iter_mut() {
                    ch.zip_mut_with(&m2, |a, &b| *a *= b);
                }
                let mut dm = Array2::zeros(m2.raw_dim());
                for (gch, xch) in g3.outer_iter().zip(x3.outer_iter()) {
                    dm.zip_mut_with(&(&gch * &xch), |a, &b| *a += b);
                }
                let dm = dm.insert_axis(Axis(0));
                vec![Some(dx.into_dyn()), Some(dm.into_dyn())]
            })),
            None,
        )
    }

    // ----------------------------------------------------------- reductions

    /// Sum over the leading axis, keeping it with length 1
    /// (`[C, H, W] -> [1, H, W]`).
    pub fn sum_axis0_keep(self) -> Var<'t, F> {
        let x = self.value();
        assert!(x.ndim() >= 2, "sum_axis0_keep: need at least 2 axes");
        let c = x.shape()[0];
        let y = x.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let g0 = g.index_axis(Axis(0), 0);
                let mut d = ArrayD::zeros(
                    IxDyn(&[c]
                        .iter()
                        .chain(g0.shape())
                        .copied()
                        .collect::<Vec<_>>()),
                );
                for mut ch in d.outer_iter_mut() {
                    ch.assign(&g0);
                }
                vec![Some(d)]
            })),
            None,
        )
    }

    /// Sum of all elements, as a 0-d array.
    pub fn sum_all(self) -> Var<'t, F> {
        let x = self.value();
        let shape = x.raw_dim();
        self.tape.push(
            super::scalar_array(x.sum()),
            vec![self.idx],
            Some(Box::new(move |g| {
                let gv = g.iter().copied().next().unwrap();
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            })),
            None,
        )
    }

    /// Mean of all elements, as a 0-d array.
    pub fn mean_all(self) -> Var<'t, F> {
        let x = self.value();
        let n = F::cast(x.len() as f64);
        let shape = x.raw_dim();
        self.tape.push(
            super::scalar_array(x.sum() / n),
            vec![self.idx],
            Some(Box::new(move |g| {
                let gv = g.iter().copied().next().unwrap() / n;
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            })),
            None,
        )
    }

    // -------------------------------------------------------------- linear

    /// Matrix product with optional transposes: `op(self) . op(rhs)` where
    /// `op` is transpose when the corresponding flag is set. Both operands
    /// must be rank 2.
    pub fn matmul(self, rhs: Var<'t, F>, ta: bool, tb: bool) -> Var<'t, F> {
        let a = self.value();
        let b = rhs.value();
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        let av = if ta { a2.t() } else { a2.view() };
        let bv = if tb { b2.t() } else { b2.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims");
        let y = av.dot(&bv);
        let (ab, bb) = (a.clone(), b.clone());
        self.tape.push(
            y.into_dyn(),
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = ab.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bb.view().into_dimensionality::<Ix2>().unwrap();
                let av = if ta { a2.t() } else { a2.view() };
                let bv = if tb { b2.t() } else { b2.view() };
                let da = if ta {
                    bv.dot(&g2.t())
                } else {
                    g2.dot(&bv.t())
                };
                let db = if tb {
                    g2.t().dot(&av)
                } else {
                    av.t().dot(&g2)
                };
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            })),
            None,
        )
    }

    /// Fused affine map of a vector: `w . x + b` with `w: [O, I]`, `x: [I]`
    /// (self), `b: [O]`.
    pub fn linear(self, w: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let x1 = x.view().into_dimensionality::<Ix1>().unwrap();
        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(w2.ncols(), x1.len(), "linear: w/x dims");
        assert_eq!(w2.nrows(), b1.len(), "linear: w/b dims");
        let y = w2.dot(&x1) + &b1;
        let (xb, wb) = (x.clone(), wv.clone());
        self.tape.push(
            y.into_dyn(),
            vec![self.idx, w.idx, b.idx],
            Some(Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let x1 = xb.view().into_dimensionality::<Ix1>().unwrap();
                let w2 = wb.view().into_dimensionality::<Ix2>().unwrap();
                let dx = w2.t().dot(&g1);
                let mut dw = Array2::zeros((g1.len(), x1.len()));
                for (i, &gi) in g1.iter().enumerate() {
                    for (j, &xj) in x1.iter().enumerate() {
                        dw[[i, j]] = gi * xj;
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_dyn()),
                    Some(g.clone()),
                ]
            })),
            None,
        )
    }

    // --------------------------------------------------------------- shape

    /// Copy into a new shape with the same number of elements.
    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape: element count"
        );
        let old = x.shape().to_vec();
        let y = ArrayD::from_shape_vec(IxDyn(shape), x.iter().copied().collect())
            .expect("reshape: shape mismatch");
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                vec![Some(
                    ArrayD::from_shape_vec(
                        IxDyn(&old),
                        g.iter().copied().collect(),
                    )
                    .unwrap(),
                )]
            })),
            None,
        )
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, F> {
        let x = self.value();
        assert!(axis < x.ndim() && start + len <= x.shape()[axis], "narrow: range");
        let y = x
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let shape = x.raw_dim();
        self.tape.push(
            y,
            vec![self.idx],
            Some(Box::new(move |g| {
                let mut d = ArrayD::zeros(shape.clone());
                d.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![Some(d)]
            })),
            None,
        )
    }

    // ------------------------------------------------------------- softmax

    /// Per-channel softmax over the spatial axes of a `[C, H, W]` tensor,
    /// with temperature `tau > 0`: `softmax(x / tau)` per channel.
    pub fn spatial_softmax(self, tau: F) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "spatial_softmax: input must be [C,H,W]");
        assert!(tau > F::zero(), "spatial_softmax: temperature must be > 0");
        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let mut y = x3.to_owned();
        for mut ch in y.outer_iter_mut() {
            let mx = ch.fold(F::neg_infinity(), |m, &v| m.max(v));
            ch.mapv_inplace(|v| ((v - mx) / tau).exp());
            let s = ch.sum();
            ch.mapv_inplace(|v| v / s);
        }
        let yb = y.clone();
        self.tape.push(
            y.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut d = g3.to_owned();
                for (mut dch, ych) in d.outer_iter_mut().zip(yb.outer_iter()) {
                    let dot = (&dch * &ych).sum();
                    dch.zip_mut_with(&ych, |gv, &yv| *gv = yv * (*gv - dot) / tau);
                }
                vec![Some(d.into_dyn())]
            })),
            None,
        )
    }

    /// Row-wise softmax of a `[N, K]` matrix with temperature `tau > 0`.
    pub fn softmax_rows(self, tau: F) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "softmax_rows: input must be [N,K]");
        assert!(tau > F::zero(), "softmax_rows: temperature must be > 0");
        let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x2.to_owned();
        for mut row in y.outer_iter_mut() {
            let mx = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| ((v - mx) / tau).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let yb = y.clone();
        self.tape.push(
            y.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = g2.to_owned();
                for (mut drow, yrow) in d.outer_iter_mut().zip(yb.outer_iter()) {
                    let dot = (&drow * &yrow).sum();
                    drow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot) / tau);
                }
                vec![Some(d.into_dyn())]
            })),
            None,
        )
    }

    /// Per-row layer normalization of a `[N, D]` matrix with learnable gain
    /// and bias (both `[D]`).
    pub fn layer_norm_rows(
        self,
        gain: Var<'t, F>,
        bias: Var<'t, F>,
        eps: F,
    ) -> Var<'t, F> {
        let x = self.value();
        let gm = gain.value();
        let bm = bias.value();
        assert_eq!(x.ndim(), 2, "layer_norm_rows: input must be [N,D]");
        let d = x.shape()[1];
        assert_eq!(gm.len(), d, "layer_norm_rows: gain length");
        assert_eq!(bm.len(), d, "layer_norm_rows: bias length");
        let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
        let g1 = gm.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bm.view().into_dimensionality::<Ix1>().unwrap();
        let dn = F::cast(d as f64);

        let mut xhat = x2.to_owned();
        let mut sigmas = Array1::zeros(x2.nrows());
        for (mut row, sg) in xhat.outer_iter_mut().zip(sigmas.iter_mut()) {
            let mu = row.sum() / dn;
            row.mapv_inplace(|v| v - mu);
            let var = row.fold(F::zero(), |a, &v| a + v * v) / dn;
            let sigma = (var + eps).sqrt();
            row.mapv_inplace(|v| v / sigma);
            *sg = sigma;
        }
        let mut y = xhat.clone();
        for mut row in y.outer_iter_mut() {
            row.zip_mut_with(&g1, |v, &gv| *v *= gv);
            row.zip_mut_with(&b1, |v, &bv| *v += bv);
        }
        let gb = gm.clone();
        self.tape.push(
            y.into_dyn(),
            vec![self.idx, gain.idx, bias.idx],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let g1 = gb.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array2::zeros(g2.raw_dim());
                let mut dgain = Array1::zeros(g1.len());
                let mut dbias = Array1::zeros(g1.len());
                for ((grow, xrow), (mut dxrow, &sigma)) in g2
                    .outer_iter()
                    .zip(xhat.outer_iter())
                    .zip(dx.outer_iter_mut().zip(sigmas.iter()))
                {
                    // ghat = gain .* g ; dx = (ghat - mean(ghat) - xhat * mean(ghat .* xhat)) / sigma
                    let ghat = &grow.to_owned() * &g1;
                    let m1 = ghat.sum() / dn;
                    let m2 = (&ghat * &xrow).sum() / dn;
                    for ((dv, &gh), &xh) in
                        dxrow.iter_mut().zip(ghat.iter()).zip(xrow.iter())
                    {
                        *dv = (gh - m1 - xh * m2) / sigma;
                    }
                    dgain.zip_mut_with(&(&grow * &xrow), |a, &b| *a += b);
                    dbias.zip_mut_with(&grow, |a, &b| *a += b);
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgain.into_dyn()),
                    Some(dbias.into_dyn()),
                ]
            })),
            None,
        )
    }

    // ------------------------------------------------------------ recurrent

    /// Fused LSTM cell step.
    ///
    /// Inputs: `x: [I]` (self), previous hidden `h: [Hd]`, previous cell
    /// `c: [Hd]`, packed gate weights `w: [4*Hd, I+Hd]` (gate row order
    /// input/forget/candidate/output), bias `b: [4*Hd]`.
    ///
    /// Output: `[2, Hd]`, row 0 the new hidden state, row 1 the new cell
    /// state. Split with [`Var::narrow`].
    pub fn lstm_cell(
        self,
        h: Var<'t, F>,
        c: Var<'t, F>,
        w: Var<'t, F>,
        b: Var<'t, F>,
    ) -> Var<'t, F> {
        let xv = self.value();
        let hv = h.value();
        let cv = c.value();
        let wv = w.value();
        let bv = b.value();
        let i_len = xv.len();
        let h_len = hv.len();
        assert_eq!(cv.len(), h_len, "lstm_cell: c length");
        assert_eq!(
            wv.shape(),
            &[4 * h_len, i_len + h_len],
            "lstm_cell: weight shape"
        );
        assert_eq!(bv.len(), 4 * h_len, "lstm_cell: bias length");

        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
        let mut z = Array1::zeros(i_len + h_len);
        z.slice_mut(s![..i_len])
            .assign(&xv.view().into_dimensionality::<Ix1>().unwrap());
        z.slice_mut(s![i_len..])
            .assign(&hv.view().into_dimensionality::<Ix1>().unwrap());
        let mut pre = w2.dot(&z);
        pre.zip_mut_with(
            &bv.view().into_dimensionality::<Ix1>().unwrap(),
            |a, &b| *a += b,
        );

        let sig = |v: F| F::one() / (F::one() + (-v).exp());
        let ig = pre.slice(s![0..h_len]).mapv(sig);
        let fg = pre.slice(s![h_len..2 * h_len]).mapv(sig);
        let cg = pre.slice(s![2 * h_len..3 * h_len]).mapv(|v| v.tanh());
        let og = pre.slice(s![3 * h_len..4 * h_len]).mapv(sig);

        let c1 = cv.view().into_dimensionality::<Ix1>().unwrap();
        let c_new = &fg * &c1 + &ig * &cg;
        let tanh_c = c_new.mapv(|v| v.tanh());
        let h_new = &og * &tanh_c;

        let mut out = Array2::zeros((2, h_len));
        out.row_mut(0).assign(&h_new);
        out.row_mut(1).assign(&c_new);

        let (zb, wvb, cvb) = (z, wv.clone(), cv.clone());
        let (igb, fgb, cgb, ogb, tcb) = (ig, fg, cg, og, tanh_c);
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, h.idx, c.idx, w.idx, b.idx],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let gh = g2.row(0);
                let gc = g2.row(1);
                let c1 = cvb.view().into_dimensionality::<Ix1>().unwrap();

                // Total gradient wrt the new cell state.
                let mut dc_tot = gc.to_owned();
                for k in 0..dc_tot.len() {
                    dc_tot[k] += gh[k] * ogb[k] * (F::one() - tcb[k] * tcb[k]);
                }
                let mut dpre = Array1::zeros(4 * dc_tot.len());
                let hn = dc_tot.len();
                for k in 0..hn {
                    let dig = dc_tot[k] * cgb[k];
                    let dfg = dc_tot[k] * c1[k];
                    let dcg = dc_tot[k] * igb[k];
                    let dog = gh[k] * tcb[k];
                    dpre[k] = dig * igb[k] * (F::one() - igb[k]);
                    dpre[hn + k] = dfg * fgb[k] * (F::one() - fgb[k]);
                    dpre[2 * hn + k] = dcg * (F::one() - cgb[k] * cgb[k]);
                    dpre[3 * hn + k] = dog * ogb[k] * (F::one() - ogb[k]);
                }
                let w2 = wvb.view().into_dimensionality::<Ix2>().unwrap();
                let dz = w2.t().dot(&dpre);
                let i_len = zb.len() - hn;
                let dx = dz.slice(s![..i_len]).to_owned();
                let dh = dz.slice(s![i_len..]).to_owned();
                let dc = &dc_tot * &fgb;
                let mut dw = Array2::zeros(w2.raw_dim());
                for (i, &gi) in dpre.iter().enumerate() {
                    for (j, &zj) in zb.iter().enumerate() {
                        dw[[i, j]] = gi * zj;
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dh.into_dyn()),
                    Some(dc.into_dyn()),
                    Some(dw.into_dyn()),
                    Some(dpre.into_dyn()),
                ]
            })),
            None,
        )
    }

    // ------------------------------------------------------------ attention

    /// Normalized Gaussian heatmaps from attention points: maps `[K, 2]`
    /// points (columns `[x, y]`, units of `[0,1]^2`) to `[K, h, w]` maps,
    /// each non-negative and summing to one.
    ///
    /// Points are clamped into `[0, 1]` first (with the clamp subgradient);
    /// the number of clamped coordinates is reported through `log::warn!`.
    pub fn gaussian_heatmap(self, h: usize, w: usize, sigma: F) -> Var<'t, F> {
        let p = self.value();
        assert_eq!(p.ndim(), 2, "gaussian_heatmap: points must be [K,2]");
        assert_eq!(p.shape()[1], 2, "gaussian_heatmap: points must be [K,2]");
        assert!(sigma > F::zero(), "gaussian_heatmap: sigma must be > 0");
        let p2 = p.view().into_dimensionality::<Ix2>().unwrap();
        let k = p2.nrows();

        let clamped = p2.mapv(|v| v.max(F::zero()).min(F::one()));
        let n_clamped = p2
            .iter()
            .zip(clamped.iter())
            .filter(|(a, b)| *a != *b)
            .count();
        if n_clamped > 0 {
            log::warn!(
                "gaussian_heatmap: clamped {n_clamped} out-of-range coordinates into [0,1]"
            );
        }

        let centers = pixel_centers::<F>(h, w);
        let inv = F::one() / (F::cast(2.0) * sigma * sigma);
        let mut maps = ndarray::Array3::zeros((k, h, w));
        for ki in 0..k {
            let (px, py) = (clamped[[ki, 0]], clamped[[ki, 1]]);
            let mut s = F::zero();
            for i in 0..h {
                for j in 0..w {
                    let dx = centers[[i * w + j, 0]] - px;
                    let dy = centers[[i * w + j, 1]] - py;
                    let u = (-(dx * dx + dy * dy) * inv).exp();
                    maps[[ki, i, j]] = u;
                    s += u;
                }
            }
            maps.slice_mut(s![ki, .., ..]).mapv_inplace(|v| v / s);
        }
        let mb = maps.clone();
        let pb = p2.to_owned();
        let cb = clamped;
        let sig2 = sigma * sigma;
        self.tape.push(
            maps.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let centers = pixel_centers::<F>(g3.shape()[1], g3.shape()[2]);
                let (hh, ww) = (g3.shape()[1], g3.shape()[2]);
                let mut dp = Array2::zeros((g3.shape()[0], 2));
                for ki in 0..g3.shape()[0] {
                    // For m = u / sum(u):
                    //   d/dp = sum(g*m*a) - sum(g*m) * sum(m*a),
                    //   a_ij = (coord_ij - p) / sigma^2.
                    let (px, py) = (cb[[ki, 0]], cb[[ki, 1]]);
                    let mut gm = F::zero();
                    let mut gma = [F::zero(); 2];
                    let mut ma = [F::zero(); 2];
                    for i in 0..hh {
                        for j in 0..ww {
                            let m = mb[[ki, i, j]];
                            let gv = g3[[ki, i, j]];
                            let ax = (centers[[i * ww + j, 0]] - px) / sig2;
                            let ay = (centers[[i * ww + j, 1]] - py) / sig2;
                            gm += gv * m;
                            gma[0] += gv * m * ax;
                            gma[1] += gv * m * ay;
                            ma[0] += m * ax;
                            ma[1] += m * ay;
                        }
                    }
                    // Clamp subgradient: no flow where the point was clamped.
                    for d in 0..2 {
                        let raw = pb[[ki, d]];
                        dp[[ki, d]] = if raw < F::zero() || raw > F::one() {
                            F::zero()
                        } else {
                            gma[d] - gm * ma[d]
                        };
                    }
                }
                vec![Some(dp.into_dyn())]
            })),
            None,
        )
    }

    /// Extract `p x p` windows from a `[C, H, W]` tensor centered at the
    /// given grid cells `(row, col)`, zero-padding out-of-bounds cells.
    /// Output shape `[K, C, p, p]`. Gradients scatter back into the tensor;
    /// the window locations themselves are fixed integers (detached).
    pub fn crop_cells(self, centers: &[(i64, i64)], p: usize) -> Var<'t, F> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "crop_cells: input must be [C,H,W]");
        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let (c, hh, ww) = x3.dim();
        let half = (p / 2) as i64;
        let k = centers.len();
        let mut out = ndarray::Array4::zeros((k, c, p, p));
        for (ki, &(row, col)) in centers.iter().enumerate() {
            let (r0, c0) = (row - half, col - half);
            for ci in 0..c {
                for pi in 0..p {
                    for pj in 0..p {
                        let (ri, cj) = (r0 + pi as i64, c0 + pj as i64);
                        if ri >= 0 && cj >= 0 && (ri as usize) < hh && (cj as usize) < ww {
                            out[[ki, ci, pi, pj]] = x3[[ci, ri as usize, cj as usize]];
                        }
                    }
                }
            }
        }
        let centers_b = centers.to_vec();
        let in_shape = x.raw_dim();
        self.tape.push(
            out.into_dyn(),
            vec![self.idx],
            Some(Box::new(move |g| {
                let g4 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let mut d = ArrayD::<F>::zeros(in_shape.clone());
                let (hh, ww) = (in_shape[1], in_shape[2]);
                for (ki, &(row, col)) in centers_b.iter().enumerate() {
                    let (r0, c0) = (row - half, col - half);
                    for ci in 0..in_shape[0] {
                        for pi in 0..g4.shape()[2] {
                            for pj in 0..g4.shape()[3] {
                                let (ri, cj) = (r0 + pi as i64, c0 + pj as i64);
                                if ri >= 0
                                    && cj >= 0
                                    && (ri as usize) < hh
                                    && (cj as usize) < ww
                                {
                                    d[[ci, ri as usize, cj as usize]] +=
                                        g4[[ki, ci, pi, pj]];
                                }
                            }
                        }
                    }
                }
                vec![Some(d)]
            })),
            None,
        )
    }
}

/// Concatenate variables along `axis`.
pub fn concat<'t, F: Scalar>(
    tape: &'t Tape<F>,
    axis: usize,
    parts: &[Var<'t, F>],
) -> Var<'t, F> {
    assert!(!parts.is_empty(), "concat: need at least one part");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let y = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    tape.push(
        y,
        parts.iter().map(|p| p.idx).collect(),
        Some(Box::new(move |g| {
            let mut out = Vec::with_capacity(lens.len());
            let mut start = 0;
            for &l in &lens {
                out.push(Some(
                    g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + l))
                        .to_owned(),
                ));
                start += l;
            }
            out
        })),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::super::{scalar_array, ParamSet, Tape};
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, arr3};

    /// Frozen oracle: softmax of [[1,2],[3,4]] computed independently by
    /// direct exp/normalize (see tests for the exact expected digits).
    const SOFTMAX_2X2: [f64; 4] = [
        0.032058603280084988,
        0.087144318742032573,
        0.23688281808991013,
        0.64391425988797224,
    ];

    #[test]
    fn spatial_softmax_matches_hand_computed_values() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(arr3(&[[[1.0, 2.0], [3.0, 4.0]]]).into_dyn());
        let y = x.spatial_softmax(1.0);
        let v = y.to_array();
        for (got, want) in v.iter().zip(SOFTMAX_2X2.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(v.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spatial_softmax_halved_temperature_sharpens() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(arr3(&[[[1.0, 2.0], [3.0, 4.0]]]).into_dyn());
        let m1 = x.spatial_softmax(1.0).to_array();
        let m2 = x.spatial_softmax(0.5).to_array();
        let max1 = m1.iter().cloned().fold(f64::MIN, f64::max);
        let max2 = m2.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max2 > max1, "lower temperature must concentrate mass");
        assert_abs_diff_eq!(max2, 0.86495487679937555, epsilon = 1e-15);
    }

    #[test]
    fn lstm_cell_matches_hand_computed_values() {
        // Frozen oracle: single step with fixed weights, evaluated by the
        // textbook gate equations on a calculator-style script.
        let tape: Tape<f64> = Tape::new();
        let w = arr2(&[
            [0.1, -0.2, 0.3, 0.05],
            [0.0, 0.25, -0.1, 0.2],
            [0.15, 0.1, -0.3, 0.0],
            [0.2, -0.05, 0.1, 0.1],
            [-0.1, 0.3, 0.2, -0.2],
            [0.05, 0.05, 0.0, 0.3],
            [0.3, -0.1, 0.1, 0.2],
            [-0.2, 0.2, 0.25, -0.05],
        ]);
        let b = arr1(&[0.01, -0.02, 0.03, 0.0, 0.05, -0.01, 0.02, 0.04]);
        let x = tape.constant(arr1(&[0.5, -1.0]).into_dyn());
        let h = tape.constant(arr1(&[0.1, -0.2]).into_dyn());
        let c = tape.constant(arr1(&[0.3, 0.2]).into_dyn());
        let wv = tape.constant(w.into_dyn());
        let bv = tape.constant(b.into_dyn());
        let out = x.lstm_cell(h, c, wv, bv).to_array();
        assert_abs_diff_eq!(out[[0, 0]], 0.0078351337610947057, epsilon = 1e-15);
        assert_abs_diff_eq!(out[[0, 1]], 0.029766367112361022, epsilon = 1e-15);
        assert_abs_diff_eq!(out[[1, 0]], 0.013999382746756966, epsilon = 1e-15);
        assert_abs_diff_eq!(out[[1, 1]], 0.067144186174046855, epsilon = 1e-15);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transposes() {
        let tape: Tape<f64> = Tape::new();
        let a = arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = arr2(&[[1.0, -1.0], [0.5, 2.0], [3.0, 0.0]]);
        let av = tape.constant(a.clone().into_dyn());
        let bv = tape.constant(b.clone().into_dyn());
        let c1 = av.matmul(bv, false, false).to_array();
        let expect = a.dot(&b);
        for (g, w) in c1.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
        let at = tape.constant(a.t().to_owned().into_dyn());
        let c2 = at.matmul(bv, true, false).to_array();
        let expect2 = a.dot(&b); // (a^T)^T . b == a . b
        for (g, w) in c2.iter().zip(expect2.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_heatmap_is_normalized_and_centers_mass() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(arr2(&[[0.5, 0.5]]).into_dyn());
        let m = p.gaussian_heatmap(4, 4, 0.05).to_array();
        assert_abs_diff_eq!(m.sum(), 1.0, epsilon = 1e-12);
        // Frozen oracle value for one central cell.
        assert_abs_diff_eq!(m[[0, 1, 1]], 0.249999999993056, epsilon = 1e-12);
        // Soft-argmax of the map must return the point itself.
        let centers = pixel_centers::<f64>(4, 4);
        let flat = m.view().into_shape_with_order((16,)).unwrap();
        let x = flat.dot(&centers.column(0));
        let y = flat.dot(&centers.column(1));
        assert_abs_diff_eq!(x, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(y, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn crop_cells_center_patch_and_corner_padding() {
        let tape: Tape<f64> = Tape::new();
        let mut x = ndarray::Array3::<f64>::zeros((1, 16, 16));
        for i in 0..16 {
            for j in 0..16 {
                x[[0, i, j]] = (i * 16 + j) as f64;
            }
        }
        let xv = tape.constant(x.clone().into_dyn());
        // Center cell (8, 8): the patch must equal rows/cols 6..11.
        let patch = xv.crop_cells(&[(8, 8)], 5).to_array();
        for pi in 0..5 {
            for pj in 0..5 {
                assert_eq!(patch[[0, 0, pi, pj]], x[[0, 6 + pi, 6 + pj]]);
            }
        }
        // Corner cell (0, 0): two zero-padded rows and columns at top/left.
        let corner = xv.crop_cells(&[(0, 0)], 5).to_array();
        for pi in 0..5 {
            for pj in 0..5 {
                let expect = if pi < 2 || pj < 2 {
                    0.0
                } else {
                    x[[0, pi - 2, pj - 2]]
                };
                assert_eq!(corner[[0, 0, pi, pj]], expect);
            }
        }
    }

    #[test]
    fn backward_through_simple_graph_matches_hand_gradient() {
        // f(w) = mean((w * 2 + 1)^2), df/dw = 4*(2w+1)/n
        let mut ps: ParamSet<f64> = ParamSet::new();
        let wid = ps.register("w", arr1(&[0.5, -1.0, 2.0]).into_dyn());
        let tape = Tape::new();
        let w = tape.param(&ps, wid);
        let loss = w.scale(2.0).shift(1.0).sqr().mean_all();
        assert_abs_diff_eq!(
            loss.scalar(),
            (4.0f64 + 1.0 + 25.0) / 3.0,
            epsilon = 1e-12
        );
        tape.backward(loss, &mut ps);
        let g = ps.grad(wid);
        for (i, &wv) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert_abs_diff_eq!(g[i], 4.0 * (2.0 * wv + 1.0) / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = tape.constant(arr1(&[3.0]).into_dyn());
        let c = concat(&tape, 0, &[a, b]);
        assert_eq!(c.to_array().as_slice().unwrap(), &[1.0, 2.0, 3.0]);
        let back = c.narrow(0, 2, 1);
        assert_eq!(back.to_array().as_slice().unwrap(), &[3.0]);
    }

    #[test]
    fn scalar_array_roundtrip() {
        let s = scalar_array(2.5f64);
        assert_eq!(s.len(), 1);
        assert_eq!(s.sum(), 2.5);
    }
}
