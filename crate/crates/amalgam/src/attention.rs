//! Amalgamated attention: bottom-up saliency meets top-down prediction.
//!
//! The attention core turns a pair of encoder feature stacks into two small
//! sets of image points:
//!
//! 1. Per-channel spatial softmax over the bottom-up stack `f_bu` yields
//!    saliency maps `m_bu`; their hard argmaxes are the *BU points*.
//! 2. Each saliency map also acts as a spatial weighting over the top-down
//!    stack `f_td`, producing one *pseudo-query* per BU channel — "what the
//!    salient spot looks like" in query space.
//! 3. An MLP on the previous shared recurrent state proposes *TD queries* —
//!    "what the task expects to see next".
//! 4. A fusion block (transformer encoder over pseudo-queries, decoder
//!    cross-attending from TD queries; or an MLP; or nothing) amalgamates the
//!    two sets into queries `q_a`.
//! 5. Scaled dot-product similarity between `q_a` and every `f_td` column,
//!    followed by a spatial softmax and soft-argmax, yields the *TD points*.
//!
//! All points live in `[0, 1]^2` with `[x, y]` ordering and pixel-center
//! convention (see [`crate::tensor::ops`]). The fusion block uses no
//! positional encoding, so it is invariant to permutations of the
//! pseudo-query set — bottom-up saliency is a *set* of observations, not a
//! sequence.

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{concat, pixel_centers};
use crate::tensor::{xavier_uniform, Leaves, ParamId, ParamSet, Scalar, Tape, Var};

/// Per-channel normalization tolerance enforced by [`AttentionMaps`].
pub const MAP_SUM_TOL: f64 = 1e-5;

fn ensure_finite<F: Scalar, D: ndarray::Dimension>(
    context: &'static str,
    a: &ndarray::ArrayBase<impl ndarray::Data<Elem = F>, D>,
) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

/// Encoder output stacks over one frame: bottom-up saliency features
/// `f_bu: [N_BU, H, W]` and top-down key features `f_td: [D_TD, H, W]` on
/// the same spatial grid.
#[derive(Debug, Clone)]
pub struct FeatureMaps<F: Scalar> {
    /// Bottom-up feature stack, one channel per saliency head.
    pub f_bu: Array3<F>,
    /// Top-down key/feature stack used for similarity and reconstruction.
    pub f_td: Array3<F>,
}

impl<F: Scalar> FeatureMaps<F> {
    /// Validate that both stacks are finite and share a spatial grid.
    pub fn new(f_bu: Array3<F>, f_td: Array3<F>) -> Result<Self> {
        if f_bu.dim().1 != f_td.dim().1 || f_bu.dim().2 != f_td.dim().2 {
            return Err(Error::ShapeMismatch {
                context: "FeatureMaps",
                expected: format!("f_td on grid {}x{}", f_bu.dim().1, f_bu.dim().2),
                got: format!("{}x{}", f_td.dim().1, f_td.dim().2),
            });
        }
        ensure_finite("FeatureMaps.f_bu", &f_bu)?;
        ensure_finite("FeatureMaps.f_td", &f_td)?;
        Ok(FeatureMaps { f_bu, f_td })
    }
}

/// A stack of `[N, H, W]` attention maps, each channel non-negative and
/// summing to one (within [`MAP_SUM_TOL`]). Constructed only through
/// validation, so downstream code can rely on the invariant.
#[derive(Debug, Clone)]
pub struct AttentionMaps<F: Scalar>(Array3<F>);

impl<F: Scalar> AttentionMaps<F> {
    /// Validate non-negativity and per-channel normalization.
    pub fn new(maps: Array3<F>) -> Result<Self> {
        ensure_finite("AttentionMaps", &maps)?;
        for (k, ch) in maps.outer_iter().enumerate() {
            if ch.iter().any(|&v| v < F::zero()) {
                return Err(Error::Config(format!(
                    "attention map channel {k} has negative values"
                )));
            }
            let s = ch.sum().as_f64();
            if (s - 1.0).abs() > MAP_SUM_TOL {
                return Err(Error::Config(format!(
                    "attention map channel {k} sums to {s}, expected 1"
                )));
            }
        }
        Ok(AttentionMaps(maps))
    }

    /// Read-only view of the underlying `[N, H, W]` array.
    pub fn maps(&self) -> &Array3<F> {
        &self.0
    }

    /// Consume into the underlying array.
    pub fn into_inner(self) -> Array3<F> {
        self.0
    }
}

// --------------------------------------------------------------------------
// Pure operations (validated, array-in/array-out). Each one routes through
// the same taped kernel the model uses, so tests exercise the real path.
// --------------------------------------------------------------------------

/// Per-channel spatial softmax with temperature `tau > 0`.
pub fn spatial_softmax<F: Scalar>(x: &Array3<F>, tau: f64) -> Result<AttentionMaps<F>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!(
            "spatial softmax temperature must be positive and finite, got {tau}"
        )));
    }
    ensure_finite("spatial_softmax", x)?;
    let tape: Tape<F> = Tape::new();
    let y = tape
        .constant(x.clone().into_dyn())
        .spatial_softmax(F::cast(tau))
        .to_array()
        .into_dimensionality::<Ix3>()
        .unwrap();
    AttentionMaps::new(y)
}

/// Spatially weighted average of `f_td` under each attention map:
/// `q[k, d] = sum_hw m[k, h, w] * f_td[d, h, w]`. Output `[N_BU, D_TD]`.
pub fn extract_pseudo_queries<F: Scalar>(
    maps: &AttentionMaps<F>,
    f_td: &Array3<F>,
) -> Result<Array2<F>> {
    let (_, h, w) = maps.maps().dim();
    if f_td.dim().1 != h || f_td.dim().2 != w {
        return Err(Error::ShapeMismatch {
            context: "extract_pseudo_queries",
            expected: format!("f_td on grid {h}x{w}"),
            got: format!("{}x{}", f_td.dim().1, f_td.dim().2),
        });
    }
    ensure_finite("extract_pseudo_queries", f_td)?;
    let tape: Tape<F> = Tape::new();
    let m = tape.constant(maps.maps().clone().into_dyn());
    let f = tape.constant(f_td.clone().into_dyn());
    Ok(pseudo_queries_t(m, f)
        .to_array()
        .into_dimensionality::<Ix2>()
        .unwrap())
}

/// Hard spatial argmax of each map, as pixel-center coordinates in
/// `[0, 1]^2`. Ties resolve to the first maximum in row-major order.
pub fn extract_bu_points<F: Scalar>(maps: &AttentionMaps<F>) -> Array2<F> {
    let (n, h, w) = maps.maps().dim();
    let mut pts = Array2::zeros((n, 2));
    for k in 0..n {
        let mut best = F::neg_infinity();
        let (mut bi, mut bj) = (0usize, 0usize);
        for i in 0..h {
            for j in 0..w {
                let v = maps.maps()[[k, i, j]];
                if v > best {
                    best = v;
                    bi = i;
                    bj = j;
                }
            }
        }
        pts[[k, 0]] = F::cast((bj as f64 + 0.5) / w as f64);
        pts[[k, 1]] = F::cast((bi as f64 + 0.5) / h as f64);
    }
    pts
}

/// Expected pixel-center coordinate under each map (soft argmax), in
/// `[0, 1]^2`.
pub fn soft_argmax<F: Scalar>(maps: &AttentionMaps<F>) -> Array2<F> {
    let tape: Tape<F> = Tape::new();
    let m = tape.constant(maps.maps().clone().into_dyn());
    soft_argmax_t(m)
        .to_array()
        .into_dimensionality::<Ix2>()
        .unwrap()
}

/// Scaled dot-product similarity of amalgamated queries against every
/// spatial column of `f_td`, softmaxed into TD attention maps, plus their
/// soft-argmax points.
pub fn estimate_td_points<F: Scalar>(
    q_a: &Array2<F>,
    f_td: &Array3<F>,
    tau: f64,
) -> Result<(AttentionMaps<F>, Array2<F>)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!(
            "TD similarity temperature must be positive and finite, got {tau}"
        )));
    }
    if q_a.ncols() != f_td.dim().0 {
        return Err(Error::ShapeMismatch {
            context: "estimate_td_points",
            expected: format!("queries with D = {}", f_td.dim().0),
            got: format!("D = {}", q_a.ncols()),
        });
    }
    ensure_finite("estimate_td_points.q_a", q_a)?;
    ensure_finite("estimate_td_points.f_td", f_td)?;
    let tape: Tape<F> = Tape::new();
    let q = tape.constant(q_a.clone().into_dyn());
    let f = tape.constant(f_td.clone().into_dyn());
    let (m, p) = td_points_t(q, f, F::cast(tau));
    let maps = AttentionMaps::new(
        m.to_array().into_dimensionality::<Ix3>().unwrap(),
    )?;
    Ok((
        maps,
        p.to_array().into_dimensionality::<Ix2>().unwrap(),
    ))
}

// --------------------------------------------------------------------------
// Taped kernels shared by the pure wrappers above and the full model.
// --------------------------------------------------------------------------

/// Taped pseudo-query extraction: `[N,H,W] x [D,H,W] -> [N,D]`.
pub fn pseudo_queries_t<'t, F: Scalar>(m_bu: Var<'t, F>, f_td: Var<'t, F>) -> Var<'t, F> {
    let (n, h, w) = {
        let s = m_bu.shape();
        (s[0], s[1], s[2])
    };
    let d = f_td.shape()[0];
    let m2 = m_bu.reshape(&[n, h * w]);
    let f2 = f_td.reshape(&[d, h * w]);
    m2.matmul(f2, false, true)
}

/// Taped soft argmax: `[N,H,W] -> [N,2]` expected pixel-center coordinates.
pub fn soft_argmax_t<'t, F: Scalar>(maps: Var<'t, F>) -> Var<'t, F> {
    let s = maps.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    let coords = maps
        .tape()
        .constant(pixel_centers::<F>(h, w).into_dyn());
    maps.reshape(&[n, h * w]).matmul(coords, false, false)
}

/// Taped TD point estimation: similarity `q_a . f_td / sqrt(D)`, spatial
/// softmax with temperature `tau`, soft argmax. Returns `(maps, points)`.
pub fn td_points_t<'t, F: Scalar>(
    q_a: Var<'t, F>,
    f_td: Var<'t, F>,
    tau: F,
) -> (Var<'t, F>, Var<'t, F>) {
    let (d, h, w) = {
        let s = f_td.shape();
        (s[0], s[1], s[2])
    };
    let n = q_a.shape()[0];
    let f2 = f_td.reshape(&[d, h * w]);
    let sim = q_a
        .matmul(f2, false, false)
        .scale(F::cast(1.0 / (d as f64).sqrt()))
        .reshape(&[n, h, w]);
    let maps = sim.spatial_softmax(tau);
    let pts = soft_argmax_t(maps);
    (maps, pts)
}

// --------------------------------------------------------------------------
// Parameterized blocks
// --------------------------------------------------------------------------

/// Two-layer MLP mapping the previous shared recurrent state to `N_TD`
/// top-down queries of width `D_TD`.
#[derive(Debug, Clone)]
pub struct TdQueryMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    n_td: usize,
    d_td: usize,
}

impl TdQueryMlp {
    /// Register parameters under `prefix`.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        in_dim: usize,
        hidden: usize,
        n_td: usize,
        d_td: usize,
        prefix: &str,
    ) -> Self {
        let out = n_td * d_td;
        TdQueryMlp {
            w1: ps.register(
                &format!("{prefix}.w1"),
                xavier_uniform(rng, &[hidden, in_dim], in_dim, hidden),
            ),
            b1: ps.register(&format!("{prefix}.b1"), ArrayD::zeros(ndarray::IxDyn(&[hidden]))),
            w2: ps.register(
                &format!("{prefix}.w2"),
                xavier_uniform(rng, &[out, hidden], hidden, out),
            ),
            b2: ps.register(&format!("{prefix}.b2"), ArrayD::zeros(ndarray::IxDyn(&[out]))),
            n_td,
            d_td,
        }
    }

    /// `h_shared: [H]` to TD queries `[N_TD, D_TD]`.
    pub fn forward<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        h_shared: Var<'t, F>,
    ) -> Var<'t, F> {
        h_shared
            .linear(lv.get(self.w1), lv.get(self.b1))
            .relu()
            .linear(lv.get(self.w2), lv.get(self.b2))
            .reshape(&[self.n_td, self.d_td])
    }
}

/// Multi-head scaled dot-product attention (no projection biases, no
/// positional encoding).
#[derive(Debug, Clone)]
struct MultiHeadAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    heads: usize,
    d: usize,
}

impl MultiHeadAttention {
    fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        d: usize,
        heads: usize,
        prefix: &str,
    ) -> Self {
        assert!(d % heads == 0, "model width must divide into heads");
        let mk = |ps: &mut ParamSet<F>, rng: &mut R, name: String| {
            ps.register(&name, xavier_uniform(rng, &[d, d], d, d))
        };
        MultiHeadAttention {
            wq: mk(ps, rng, format!("{prefix}.wq")),
            wk: mk(ps, rng, format!("{prefix}.wk")),
            wv: mk(ps, rng, format!("{prefix}.wv")),
            wo: mk(ps, rng, format!("{prefix}.wo")),
            heads,
            d,
        }
    }

    /// `q: [Nq, D]` attends over `kv: [Nk, D]`.
    fn forward<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        q: Var<'t, F>,
        kv: Var<'t, F>,
    ) -> Var<'t, F> {
        let qp = q.matmul(lv.get(self.wq), false, true);
        let kp = kv.matmul(lv.get(self.wk), false, true);
        let vp = kv.matmul(lv.get(self.wv), false, true);
        let dh = self.d / self.heads;
        let scale = F::cast(1.0 / (dh as f64).sqrt());
        let mut ctxs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = qp.narrow(1, hd * dh, dh);
            let kh = kp.narrow(1, hd * dh, dh);
            let vh = vp.narrow(1, hd * dh, dh);
            let attn = qh
                .matmul(kh, false, true)
                .scale(scale)
                .softmax_rows(F::one());
            ctxs.push(attn.matmul(vh, false, false));
        }
        let tape = q.tape();
        concat(tape, 1, &ctxs).matmul(lv.get(self.wo), false, true)
    }
}

/// Position-wise feed-forward block `[N,D] -> [N,D]` with ReLU hidden layer.
#[derive(Debug, Clone)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        d: usize,
        hidden: usize,
        prefix: &str,
    ) -> Self {
        FeedForward {
            w1: ps.register(
                &format!("{prefix}.w1"),
                xavier_uniform(rng, &[hidden, d], d, hidden),
            ),
            b1: ps.register(&format!("{prefix}.b1"), ArrayD::zeros(ndarray::IxDyn(&[hidden]))),
            w2: ps.register(
                &format!("{prefix}.w2"),
                xavier_uniform(rng, &[d, hidden], hidden, d),
            ),
            b2: ps.register(&format!("{prefix}.b2"), ArrayD::zeros(ndarray::IxDyn(&[d]))),
        }
    }

    fn forward<'t, F: Scalar>(&self, lv: &Leaves<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.matmul(lv.get(self.w1), false, true)
            .add_bias_rows(lv.get(self.b1))
            .relu()
            .matmul(lv.get(self.w2), false, true)
            .add_bias_rows(lv.get(self.b2))
    }
}

/// Learnable per-feature layer norm.
#[derive(Debug, Clone)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new<F: Scalar>(ps: &mut ParamSet<F>, d: usize, prefix: &str) -> Self {
        LayerNorm {
            gain: ps.register(
                &format!("{prefix}.gain"),
                ArrayD::from_elem(ndarray::IxDyn(&[d]), F::one()),
            ),
            bias: ps.register(&format!("{prefix}.bias"), ArrayD::zeros(ndarray::IxDyn(&[d]))),
        }
    }

    fn forward<'t, F: Scalar>(&self, lv: &Leaves<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.layer_norm_rows(lv.get(self.gain), lv.get(self.bias), F::cast(1e-5))
    }
}

/// Transformer fusion: one encoder layer self-attending over pseudo-queries,
/// one decoder layer cross-attending from TD queries into the encoded set.
/// With `cross_only`, the encoder layer is skipped and the decoder attends
/// over raw pseudo-queries.
#[derive(Debug, Clone)]
pub struct FusionTransformer {
    enc_attn: MultiHeadAttention,
    enc_ln1: LayerNorm,
    enc_ff: FeedForward,
    enc_ln2: LayerNorm,
    dec_attn: MultiHeadAttention,
    dec_ln1: LayerNorm,
    dec_ff: FeedForward,
    dec_ln2: LayerNorm,
    cross_only: bool,
}

impl FusionTransformer {
    /// Register parameters. `d` is the query width, `heads` the attention
    /// head count for both layers.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        d: usize,
        heads: usize,
        cross_only: bool,
        prefix: &str,
    ) -> Self {
        FusionTransformer {
            enc_attn: MultiHeadAttention::new(ps, rng, d, heads, &format!("{prefix}.enc.attn")),
            enc_ln1: LayerNorm::new(ps, d, &format!("{prefix}.enc.ln1")),
            enc_ff: FeedForward::new(ps, rng, d, 2 * d, &format!("{prefix}.enc.ff")),
            enc_ln2: LayerNorm::new(ps, d, &format!("{prefix}.enc.ln2")),
            dec_attn: MultiHeadAttention::new(ps, rng, d, heads, &format!("{prefix}.dec.attn")),
            dec_ln1: LayerNorm::new(ps, d, &format!("{prefix}.dec.ln1")),
            dec_ff: FeedForward::new(ps, rng, d, 2 * d, &format!("{prefix}.dec.ff")),
            dec_ln2: LayerNorm::new(ps, d, &format!("{prefix}.dec.ln2")),
            cross_only,
        }
    }

    /// Fuse TD queries `[N_TD, D]` with pseudo-queries `[N_BU, D]`.
    pub fn forward<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        q_td: Var<'t, F>,
        q_bu: Var<'t, F>,
    ) -> Var<'t, F> {
        let memory = if self.cross_only {
            q_bu
        } else {
            let x = q_bu;
            let x = self
                .enc_ln1
                .forward(lv, x.add(self.enc_attn.forward(lv, x, x)));
            self.enc_ln2.forward(lv, x.add(self.enc_ff.forward(lv, x)))
        };
        let y = q_td;
        let y = self
            .dec_ln1
            .forward(lv, y.add(self.dec_attn.forward(lv, y, memory)));
        self.dec_ln2.forward(lv, y.add(self.dec_ff.forward(lv, y)))
    }
}

/// MLP fusion baseline: mean-pool the pseudo-queries, concatenate the pooled
/// vector to each TD query, and map back to width `D` with a two-layer MLP.
#[derive(Debug, Clone)]
pub struct FusionMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FusionMlp {
    /// Register parameters; hidden width is `2 * d`.
    pub fn new<F: Scalar, R: Rng>(
        ps: &mut ParamSet<F>,
        rng: &mut R,
        d: usize,
        prefix: &str,
    ) -> Self {
        FusionMlp {
            w1: ps.register(
                &format!("{prefix}.w1"),
                xavier_uniform(rng, &[2 * d, 2 * d], 2 * d, 2 * d),
            ),
            b1: ps.register(
                &format!("{prefix}.b1"),
                ArrayD::zeros(ndarray::IxDyn(&[2 * d])),
            ),
            w2: ps.register(
                &format!("{prefix}.w2"),
                xavier_uniform(rng, &[d, 2 * d], 2 * d, d),
            ),
            b2: ps.register(&format!("{prefix}.b2"), ArrayD::zeros(ndarray::IxDyn(&[d]))),
        }
    }

    /// Fuse TD queries `[N_TD, D]` with pseudo-queries `[N_BU, D]`.
    pub fn forward<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        q_td: Var<'t, F>,
        q_bu: Var<'t, F>,
    ) -> Var<'t, F> {
        let tape = q_td.tape();
        let n_td = q_td.shape()[0];
        let n_bu = q_bu.shape()[0];
        let d = q_bu.shape()[1];
        // Mean pool over the BU set, then tile to one row per TD query.
        let pool_w = tape.constant(
            Array2::from_elem((1, n_bu), F::cast(1.0 / n_bu as f64)).into_dyn(),
        );
        let pool = pool_w.matmul(q_bu, false, false); // [1, D]
        let tile = tape.constant(Array2::from_elem((n_td, 1), F::one()).into_dyn());
        let pooled = tile.matmul(pool, false, false); // [N_TD, D]
        let x = concat(tape, 1, &[q_td, pooled]); // [N_TD, 2D]
        let _ = d;
        x.matmul(lv.get(self.w1), false, true)
            .add_bias_rows(lv.get(self.b1))
            .relu()
            .matmul(lv.get(self.w2), false, true)
            .add_bias_rows(lv.get(self.b2))
    }
}

/// Query fusion strategy. `Off` feeds TD queries straight to point
/// estimation, which is the ablation baseline without any bottom-up
/// influence on the top-down stream.
pub enum Fusion {
    /// Transformer encoder/decoder fusion (the full model).
    Transformer(FusionTransformer),
    /// MLP pooling fusion (ablation variant).
    Mlp(FusionMlp),
    /// No fusion (baseline).
    Off,
}

impl Fusion {
    /// Apply the fusion strategy.
    pub fn forward<'t, F: Scalar>(
        &self,
        lv: &Leaves<'t, F>,
        q_td: Var<'t, F>,
        q_bu: Var<'t, F>,
    ) -> Var<'t, F> {
        match self {
            Fusion::Transformer(t) => t.forward(lv, q_td, q_bu),
            Fusion::Mlp(m) => m.forward(lv, q_td, q_bu),
            Fusion::Off => q_td,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, arr3, Array1};
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps_2x2() -> AttentionMaps<f64> {
        spatial_softmax(&arr3(&[[[1.0, 2.0], [3.0, 4.0]]]), 1.0).unwrap()
    }

    #[test]
    fn pseudo_queries_match_loop_oracle() {
        // Frozen oracle: mask = softmax([[1,2],[3,4]]), f_td rows as below;
        // expected weighted averages computed independently.
        let maps = maps_2x2();
        let f_td = arr3(&[
            [[0.5, -1.0], [2.0, 0.25]],
            [[1.0, 1.0], [1.0, 1.0]],
            [[-2.0, 3.0], [0.0, 4.0]],
        ]);
        let q = extract_pseudo_queries(&maps, &f_td).unwrap();
        assert_abs_diff_eq!(q[[0, 0]], 0.56362918404982321, epsilon = 1e-14);
        assert_abs_diff_eq!(q[[0, 1]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q[[0, 2]], 2.7729727892178166, epsilon = 1e-14);
    }

    #[test]
    fn pseudo_query_of_constant_channel_is_that_constant() {
        // A channel that is constant v must pool to exactly v under any
        // normalized mask.
        let maps = maps_2x2();
        let f_td = arr3(&[[[7.25, 7.25], [7.25, 7.25]]]);
        let q = extract_pseudo_queries(&maps, &f_td).unwrap();
        assert_abs_diff_eq!(q[[0, 0]], 7.25, epsilon = 1e-12);
    }

    #[test]
    fn bu_points_one_hot_hits_cell_center() {
        let mut m = ndarray::Array3::<f64>::zeros((1, 8, 8));
        m[[0, 2, 3]] = 1.0;
        let maps = AttentionMaps::new(m).unwrap();
        let pts = extract_bu_points(&maps);
        assert_abs_diff_eq!(pts[[0, 0]], 0.4375, epsilon = 1e-15); // (3+0.5)/8
        assert_abs_diff_eq!(pts[[0, 1]], 0.3125, epsilon = 1e-15); // (2+0.5)/8
    }

    #[test]
    fn bu_points_tie_breaks_to_first_row_major() {
        let mut m = ndarray::Array3::<f64>::zeros((1, 4, 4));
        m[[0, 1, 2]] = 0.5;
        m[[0, 3, 0]] = 0.5;
        let maps = AttentionMaps::new(m).unwrap();
        let pts = extract_bu_points(&maps);
        assert_abs_diff_eq!(pts[[0, 0]], (2.0 + 0.5) / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pts[[0, 1]], (1.0 + 0.5) / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn dominant_similarity_converges_to_column_coordinate() {
        // One f_td column is a strong match for the query; at low softmax
        // temperature the TD point must collapse onto that cell's center.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let mut f = ndarray::Array3::<f64>::zeros((d, 4, 4));
        for v in f.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let strong = [3.0, -3.0, 3.0, -3.0];
        for (di, &v) in strong.iter().enumerate() {
            f[[di, 2, 1]] = v;
        }
        let q = arr2(&[strong]);
        let (_, pts) = estimate_td_points(&q, &f, 0.05).unwrap();
        assert_abs_diff_eq!(pts[[0, 0]], (1.0 + 0.5) / 4.0, epsilon = 1e-2);
        assert_abs_diff_eq!(pts[[0, 1]], (2.0 + 0.5) / 4.0, epsilon = 1e-2);
    }

    #[test]
    fn soft_and_hard_argmax_agree_at_low_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut x = ndarray::Array3::<f64>::from_shape_fn((3, 16, 16), |_| {
                rng.gen_range(-2.0..2.0)
            });
            // Plant a strictly dominant maximum per channel; with near-ties
            // between distant cells the soft argmax is legitimately ambiguous.
            for k in 0..3 {
                let (i, j) = (rng.gen_range(0..16), rng.gen_range(0..16));
                x[[k, i, j]] = 3.0;
            }
            let sharp = spatial_softmax(&x, 0.01).unwrap();
            let hard = extract_bu_points(&sharp);
            let soft = soft_argmax(&sharp);
            for k in 0..3 {
                // Within one pixel: 1/16 in normalized units.
                assert!((hard[[k, 0]] - soft[[k, 0]]).abs() < 1.0 / 16.0);
                assert!((hard[[k, 1]] - soft[[k, 1]]).abs() < 1.0 / 16.0);
            }
        }
    }

    #[test]
    fn fusion_transformer_is_invariant_to_bu_permutation() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fusion = FusionTransformer::new(&mut ps, &mut rng, 16, 2, false, "fuse");
        let q_td = Array2::from_shape_fn((4, 16), |_| rng.gen_range(-1.0..1.0));
        let q_bu = Array2::from_shape_fn((8, 16), |_| rng.gen_range(-1.0..1.0));
        // A fixed non-trivial permutation of the BU rows.
        let perm = [5usize, 0, 7, 2, 6, 1, 4, 3];
        let mut q_bu_p = Array2::zeros((8, 16));
        for (dst, &src) in perm.iter().enumerate() {
            q_bu_p.row_mut(dst).assign(&q_bu.row(src));
        }

        let run = |q_bu: &Array2<f64>| -> ArrayD<f64> {
            let tape: Tape<f64> = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            let a = tape.constant(q_td.clone().into_dyn());
            let b = tape.constant(q_bu.clone().into_dyn());
            fusion.forward(&lv, a, b).to_array()
        };
        let out1 = run(&q_bu);
        let out2 = run(&q_bu_p);
        for (a, b) in out1.iter().zip(out2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn fusion_off_returns_td_queries_unchanged() {
        let ps: ParamSet<f64> = ParamSet::new();
        let tape: Tape<f64> = Tape::new();
        let lv = Leaves::new(&tape, &ps);
        let q_td = tape.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let q_bu = tape.constant(arr2(&[[9.0, 9.0]]).into_dyn());
        let out = Fusion::Off.forward(&lv, q_td, q_bu);
        assert_eq!(out.to_array(), q_td.to_array());
    }

    #[test]
    fn fusion_mlp_pool_matches_loop_oracle() {
        // With w1 = [I 0; 0 I] pass-through impossible to arrange simply, so
        // check the pooling part: a zero second-layer weight and a bias
        // reveal nothing; instead make the MLP identity-free and verify the
        // pooled input by direct construction of tiny weights.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fusion = FusionMlp::new(&mut ps, &mut rng, 2, "fm");
        // Overwrite w1 so row 0 picks concat[0] (q_td dim 0) and row 1 picks
        // concat[2] (pool dim 0); w2 selects those back.
        let w1 = ps.value_mut(fusion.w1);
        w1.fill(0.0);
        w1[[0, 0]] = 1.0; // hidden0 = q_td[0]
        w1[[1, 2]] = 1.0; // hidden1 = pool[0]
        let w2 = ps.value_mut(fusion.w2);
        w2.fill(0.0);
        w2[[0, 0]] = 1.0;
        w2[[1, 1]] = 1.0;

        let q_td = arr2(&[[0.5, 0.0]]);
        let q_bu = arr2(&[[1.0, 0.0], [3.0, 0.0], [5.0, 0.0]]);
        let tape: Tape<f64> = Tape::new();
        let lv = Leaves::new(&tape, &ps);
        let a = tape.constant(q_td.into_dyn());
        let b = tape.constant(q_bu.into_dyn());
        let out = fusion.forward(&lv, a, b).to_array();
        // hidden = relu([0.5, mean(1,3,5)]) = [0.5, 3.0]
        assert_abs_diff_eq!(out[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[0, 1]], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn td_query_mlp_is_deterministic_for_fixed_seed() {
        let build = || {
            let mut ps: ParamSet<f64> = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mlp = TdQueryMlp::new(&mut ps, &mut rng, 8, 16, 4, 8, "q");
            let tape: Tape<f64> = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            let h = tape.constant(Array1::linspace(-1.0, 1.0, 8).into_dyn());
            mlp.forward(&lv, h).to_array()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn spatial_softmax_rejects_bad_inputs() {
        let x = arr3(&[[[1.0, f64::NAN], [0.0, 0.0]]]);
        assert!(matches!(
            spatial_softmax(&x, 1.0),
            Err(Error::NonFinite { .. })
        ));
        let y = arr3(&[[[1.0, 2.0], [0.0, 0.0]]]);
        assert!(matches!(spatial_softmax(&y, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn estimate_td_points_rejects_width_mismatch() {
        let q = arr2(&[[1.0, 2.0]]);
        let f = ndarray::Array3::<f64>::zeros((3, 4, 4));
        assert!(matches!(
            estimate_td_points(&q, &f, 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn td_points_stay_inside_unit_square(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Array2::from_shape_fn((2, 6), |_| rng.gen_range(-3.0..3.0));
            let f = ndarray::Array3::from_shape_fn((6, 5, 7), |_| rng.gen_range(-3.0..3.0));
            let (maps, pts) = estimate_td_points(&q, &f, 1.0).unwrap();
            for ch in maps.maps().outer_iter() {
                prop_assert!((ch.sum() - 1.0f64).abs() < 1e-6);
            }
            for p in pts.iter() {
                prop_assert!(*p >= 0.0 && *p <= 1.0);
            }
        }

        #[test]
        fn spatial_softmax_normalizes_any_finite_input(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = ndarray::Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(-30.0..30.0));
            let maps = spatial_softmax(&x, 1.0).unwrap();
            for ch in maps.maps().outer_iter() {
                prop_assert!((ch.sum() - 1.0f64).abs() < 1e-6);
                prop_assert!(ch.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
