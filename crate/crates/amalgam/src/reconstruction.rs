//! Reconstruction pathways: peripheral (whole-frame) and foveal (patch).
//!
//! Both pathways decode from the high-level feature map `f_td`, gated by
//! attention points, and both produce sigmoid RGB in `[0, 1]`:
//!
//! * **Peripheral** — predicted BU points are rendered back into heatmaps
//!   (the inverse of the spatial softmax), summed and clipped into a single
//!   soft mask, which gates `f_td` before a small deconvolution stack
//!   upsamples to the full frame. The network can only reconstruct what its
//!   predicted attention covers, which is what makes this a training signal
//!   for attention rather than a generic autoencoder.
//! * **Foveal** — small feature windows are cropped at TD attention points
//!   and decoded to image-resolution patches. One decoder is shared between
//!   the encoding side (crop at the current attention point, reconstruct
//!   the current view) and the prediction side (crop at the *predicted*
//!   next point, reconstruct the next view), so the two losses constrain
//!   the same weights.
//!
//! Crop windows are placed on the grid cell containing the point
//! (`col = clamp(floor(x * W), 0, W - 1)`) and are not differentiated
//! through; gradients flow through feature values only.

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;

use crate::tensor::ops::concat;
use crate::tensor::{xavier_uniform, Leaves, ParamId, ParamSet, Scalar, Var};

/// Spatial size of the feature-grid crop window (cells per side).
pub const FOVEA_FEAT_WINDOW: usize = 5;
/// Spatial size of the decoded foveal patch (pixels per side).
pub const FOVEA_PATCH: usize = 16;
/// Sharpness of the rendered attention Gaussians, in normalized units.
pub const HEATMAP_SIGMA: f64 = 0.05;

/// Render points `[N, 2]` back into per-point normalized heatmaps
/// `[N, h, w]` — the inverse of the spatial softmax + soft-argmax readout.
/// A round trip `soft_argmax(inverse_spatial_softmax(p))` recovers interior
/// points to sub-cell accuracy.
pub fn inverse_spatial_softmax<'t, F: Scalar>(
    points: Var<'t, F>,
    h: usize,
    w: usize,
) -> Var<'t, F> {
    points.gaussian_heatmap(h, w, F::cast(HEATMAP_SIGMA))
}

/// Grid cell containing each point, `(row, col)` per point, with the point
/// coordinate convention `[x, y]` in `[0, 1]^2`. Points outside the unit
/// square land on the border cell.
pub fn points_to_cells<F: Scalar>(points: &Array2<F>, h: usize, w: usize) -> Vec<(i64, i64)> {
    let clampi = |v: f64, hi: usize| -> i64 { (v.floor() as i64).clamp(0, hi as i64 - 1) };
    points
        .rows()
        .into_iter()
        .map(|p| {
            let x = p[0].as_f64();
            let y = p[1].as_f64();
            (clampi(y * h as f64, h), clampi(x * w as f64, w))
        })
        .collect()
}

/// Crop a `p x p` window centered on `center = (row, col)` out of a plain
/// `[C, H, W]` array, zero-padding outside the bounds. Mirrors the taped
/// `crop_cells` op; used to cut reconstruction targets out of frames.
pub fn crop_patch<F: Scalar>(img: &Array3<F>, center: (i64, i64), p: usize) -> Array3<F> {
    let (c, h, w) = img.dim();
    let half = p as i64 / 2;
    let (r0, c0) = (center.0 - half, center.1 - half);
    let mut out = Array3::zeros((c, p, p));
    for ch in 0..c {
        for i in 0..p {
            let src_i = r0 + i as i64;
            if src_i < 0 || src_i >= h as i64 {
                continue;
            }
            for j in 0..p {
                let src_j = c0 + j as i64;
                if src_j < 0 || src_j >= w as i64 {
                    continue;
                }
                out[[ch, i, j]] = img[[ch, src_i as usize, src_j as usize]];
            }
        }
    }
    out
}

/// Peripheral decoder: BU-point mask over `f_td`, then a fixed x4
/// upsampling stack to RGB.
pub struct PeripheralDecoder {
    d1_w: ParamId,
    d1_b: ParamId,
    d2_w: ParamId,
    d2_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    mid: usize,
    narrow: usize,
}

impl PeripheralDecoder {
    /// Register parameters. `c_in` is the `f_td` channel count; the stack is
    /// `deconv k2s2 (c_in -> mid) -> relu -> deconv k2s2 (mid -> narrow) ->
    /// relu -> conv 1x1 (narrow -> 3) -> sigmoid`.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        c_in: usize,
        mid: usize,
        narrow: usize,
        prefix: &str,
    ) -> Self {
        let d1_w = ps.register(
            &format!("{prefix}.d1.w"),
            xavier_uniform(rng, &[c_in, mid, 2, 2], c_in * 4, mid),
        );
        let d1_b = ps.register(&format!("{prefix}.d1.b"), ArrayD::zeros(ndarray::IxDyn(&[mid])));
        let d2_w = ps.register(
            &format!("{prefix}.d2.w"),
            xavier_uniform(rng, &[mid, narrow, 2, 2], mid * 4, narrow),
        );
        let d2_b = ps.register(
            &format!("{prefix}.d2.b"),
            ArrayD::zeros(ndarray::IxDyn(&[narrow])),
        );
        let head_w = ps.register(
            &format!("{prefix}.head.w"),
            xavier_uniform(rng, &[3, narrow, 1, 1], narrow, 3),
        );
        let head_b = ps.register(&format!("{prefix}.head.b"), ArrayD::zeros(ndarray::IxDyn(&[3])));
        PeripheralDecoder {
            d1_w,
            d1_b,
            d2_w,
            d2_b,
            head_w,
            head_b,
            mid,
            narrow,
        }
    }

    /// Decode a frame prediction from `f_td ([C, h, w])` gated by predicted
    /// BU points (`[N_BU, 2]`). Returns `(rgb [3, 4h, 4w], mask [1, h, w])`.
    pub fn forward<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        pt_bu_hat: Var<'t, F>,
        f_td: Var<'t, F>,
    ) -> (Var<'t, F>, Var<'t, F>) {
        let shape = f_td.shape();
        let (h, w) = (shape[1], shape[2]);
        let heat = inverse_spatial_softmax(pt_bu_hat, h, w);
        // Overlapping Gaussians may stack above 1; clip to keep the gate a
        // soft mask rather than an amplifier.
        let mask = heat.sum_axis0_keep().clamp01();
        let gated = f_td.mul_bcast0(mask);
        let y = gated
            .deconv2d(lv.get(self.d1_w), lv.get(self.d1_b), 2, 0)
            .relu()
            .deconv2d(lv.get(self.d2_w), lv.get(self.d2_b), 2, 0)
            .relu()
            .conv2d(lv.get(self.head_w), lv.get(self.head_b), 1, 0)
            .sigmoid();
        let _ = (self.mid, self.narrow);
        (y, mask)
    }
}

/// Foveal codec: decodes `FOVEA_FEAT_WINDOW`-cell feature crops to
/// `FOVEA_PATCH`-pixel RGB patches. The same parameters serve the encoding
/// and prediction sides.
pub struct FovealCodec {
    d1_w: ParamId,
    d1_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    mid: usize,
}

impl FovealCodec {
    /// Register parameters. The stack is `deconv k4s3 (c_in -> mid), 5 -> 16
    /// -> relu -> conv k3p1 (mid -> 3) -> sigmoid`.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        c_in: usize,
        mid: usize,
        prefix: &str,
    ) -> Self {
        let d1_w = ps.register(
            &format!("{prefix}.d1.w"),
            xavier_uniform(rng, &[c_in, mid, 4, 4], c_in * 16, mid),
        );
        let d1_b = ps.register(&format!("{prefix}.d1.b"), ArrayD::zeros(ndarray::IxDyn(&[mid])));
        let head_w = ps.register(
            &format!("{prefix}.head.w"),
            xavier_uniform(rng, &[3, mid, 3, 3], mid * 9, 3),
        );
        let head_b = ps.register(&format!("{prefix}.head.b"), ArrayD::zeros(ndarray::IxDyn(&[3])));
        FovealCodec {
            d1_w,
            d1_b,
            head_w,
            head_b,
            mid,
        }
    }

    /// Decode feature crops `[K, C, 5, 5]` to patches `[K, 3, 16, 16]`.
    pub fn decode<'t, F: Scalar>(&self, lv: &Leaves<'t, F>, cells: Var<'t, F>) -> Var<'t, F> {
        let shape = cells.shape();
        let (k, c) = (shape[0], shape[1]);
        assert_eq!(
            &shape[2..],
            &[FOVEA_FEAT_WINDOW, FOVEA_FEAT_WINDOW],
            "foveal decode: crop window size"
        );
        let tape = cells.tape();
        let mut patches = Vec::with_capacity(k);
        for i in 0..k {
            let cell = cells
                .narrow(0, i, 1)
                .reshape(&[c, FOVEA_FEAT_WINDOW, FOVEA_FEAT_WINDOW]);
            let y = cell
                .deconv2d(lv.get(self.d1_w), lv.get(self.d1_b), 3, 0)
                .relu()
                .conv2d(lv.get(self.head_w), lv.get(self.head_b), 1, 1)
                .sigmoid();
            let _ = self.mid;
            patches.push(y.reshape(&[1, 3, FOVEA_PATCH, FOVEA_PATCH]));
        }
        concat(tape, 0, &patches)
    }

    /// Crop `f_td` at the given points (window placement is detached from
    /// the graph) and decode to patches `[N, 3, 16, 16]`.
    pub fn crop_and_decode<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        f_td: Var<'t, F>,
        points: &Array2<F>,
    ) -> Var<'t, F> {
        let shape = f_td.shape();
        let cells = points_to_cells(points, shape[1], shape[2]);
        self.decode(lv, f_td.crop_cells(&cells, FOVEA_FEAT_WINDOW))
    }
}

/// Image-space target patches for the foveal losses: crops of `frame`
/// (`[3, H, W]`) at each point, `[N, 3, 16, 16]`, placed with the same cell
/// convention as the feature crops.
pub fn foveal_targets<F: Scalar>(frame: &Array3<F>, points: &Array2<F>) -> ndarray::Array4<F> {
    let (_, h, w) = frame.dim();
    let cells = points_to_cells(points, h, w);
    let mut out = ndarray::Array4::zeros((cells.len(), 3, FOVEA_PATCH, FOVEA_PATCH));
    for (n, cell) in cells.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n)
            .assign(&crop_patch(frame, *cell, FOVEA_PATCH));
    }
    out
}
