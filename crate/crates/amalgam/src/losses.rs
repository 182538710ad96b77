//! Composite training objective.
//!
//! The total loss is `L = L_body + alpha * L_rec + beta * L_reg` where
//!
//! * `L_body` — MSE between predicted and ground-truth joint vectors, with a
//!   one-step shift: the prediction made at `t` is the command for `t + 1`.
//! * `L_rec` — three reconstruction terms: the peripheral frame prediction
//!   (targets the *next* frame), the encoder-side foveal patches (target the
//!   current frame at the current TD points) and the decoder-side foveal
//!   patches (target the next frame at the predicted TD points).
//! * `L_reg` — four regularizers: BU coordinate consistency (the BU point
//!   the encoder extracts at `t + 1` should match what the decoder predicted
//!   at `t`), foveal consistency (ditto for patch reconstructions, which
//!   enforces perceptual agreement without pinning coordinates), a hinge on
//!   per-step TD point displacement (a penalty only when an attention point
//!   jumps more than 10% of the frame per step), and an out-of-bounds
//!   penalty on predicted TD points (squared distance to their clamp into
//!   the unit square).
//!
//! Every term is a mean over all of its axes (time, points, channels,
//! pixels), so the weights are scale-free across grid sizes. All terms are
//! built on the tape; the scalar breakdown for logging is read back from the
//! evaluated nodes, so training and reporting cannot diverge.

use serde::{Deserialize, Serialize};

use crate::tensor::{scalar_array, Scalar, Tape, Var};
use crate::{Error, Result};

/// Per-step TD displacement above this fraction of the frame is penalized.
pub const DISPLACEMENT_LIMIT: f64 = 0.1;

/// Loss weights: `total = body + alpha * rec + beta * reg`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the reconstruction terms.
    pub alpha: f64,
    /// Weight on the regularization terms.
    pub beta: f64,
}

impl LossWeights {
    /// Validated constructor; weights must be non-negative.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(LossWeights { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

/// Scalar values of every loss component, for logging. Terms disabled by
/// the model variant report 0.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    /// Joint prediction MSE.
    pub body: f64,
    /// Peripheral frame reconstruction MSE.
    pub rec_per: f64,
    /// Encoder-side foveal reconstruction MSE.
    pub rec_fov_enc: f64,
    /// Decoder-side foveal reconstruction MSE.
    pub rec_fov_dec: f64,
    /// BU point coordinate consistency MSE.
    pub reg_bu_consist: f64,
    /// Foveal encoder/decoder consistency MSE.
    pub reg_fov_consist: f64,
    /// Hinge on per-step TD point displacement.
    pub reg_displacement: f64,
    /// Out-of-bounds penalty on predicted TD points.
    pub reg_bounds: f64,
    /// Weighted sum of all of the above.
    pub total: f64,
}

impl LossBreakdown {
    /// Recompute the weighted sum from the components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.body
            + w.alpha * (self.rec_per + self.rec_fov_enc + self.rec_fov_dec)
            + w.beta
                * (self.reg_bu_consist
                    + self.reg_fov_consist
                    + self.reg_displacement
                    + self.reg_bounds)
    }

    /// Accumulate another breakdown (for averaging across episodes).
    pub fn add_assign(&mut self, other: &LossBreakdown) {
        self.body += other.body;
        self.rec_per += other.rec_per;
        self.rec_fov_enc += other.rec_fov_enc;
        self.rec_fov_dec += other.rec_fov_dec;
        self.reg_bu_consist += other.reg_bu_consist;
        self.reg_fov_consist += other.reg_fov_consist;
        self.reg_displacement += other.reg_displacement;
        self.reg_bounds += other.reg_bounds;
        self.total += other.total;
    }

    /// Scale every component (for averaging across episodes).
    pub fn scale(&mut self, c: f64) {
        self.body *= c;
        self.rec_per *= c;
        self.rec_fov_enc *= c;
        self.rec_fov_dec *= c;
        self.reg_bu_consist *= c;
        self.reg_fov_consist *= c;
        self.reg_displacement *= c;
        self.reg_bounds *= c;
        self.total *= c;
    }
}

/// Mean squared error between `pred[t]` and `target[t + shift]`, averaged
/// over all pairs and all element axes. `shift` is 0 for aligned sequences
/// and 1 when predictions target the next step. Sequences shorter than
/// `shift + 1` contribute 0.
pub fn seq_mse<'t, F: Scalar>(
    tape: &'t Tape<F>,
    pred: &[Var<'t, F>],
    target: &[Var<'t, F>],
    shift: usize,
) -> Var<'t, F> {
    assert_eq!(
        pred.len(),
        target.len(),
        "seq_mse: sequence lengths differ"
    );
    let pairs = pred.len().saturating_sub(shift);
    if pairs == 0 {
        return tape.constant(scalar_array(F::zero()));
    }
    let mut acc: Option<Var<'t, F>> = None;
    for t in 0..pairs {
        let term = pred[t].sub(target[t + shift]).sqr().mean_all();
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.unwrap().scale(F::cast(1.0 / pairs as f64))
}

/// Hinge penalty on per-step point displacement: mean over the (T-1) x N
/// step/point pairs of `max(0, ||p_t - p_{t-1}||_2 - DISPLACEMENT_LIMIT)`.
/// Each entry of `points` is `[N, 2]`.
pub fn hinge_displacement<'t, F: Scalar>(
    tape: &'t Tape<F>,
    points: &[Var<'t, F>],
) -> Var<'t, F> {
    if points.len() < 2 {
        return tape.constant(scalar_array(F::zero()));
    }
    let n = points[0].shape()[0];
    let ones = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2, 1]), F::one()));
    let mut acc: Option<Var<'t, F>> = None;
    for t in 1..points.len() {
        let delta = points[t].sub(points[t - 1]);
        let norms = delta
            .sqr()
            .matmul(ones, false, false)
            .reshape(&[n])
            .sqrt_eps(F::cast(1e-12));
        let hinged = norms.shift(F::cast(-DISPLACEMENT_LIMIT)).relu().sum_all();
        acc = Some(match acc {
            Some(a) => a.add(hinged),
            None => hinged,
        });
    }
    let count = (points.len() - 1) * n;
    acc.unwrap().scale(F::cast(1.0 / count as f64))
}

/// Out-of-bounds penalty: mean over all coordinate axes of the squared
/// distance between each point and its clamp into `[0, 1]`. Points inside
/// the unit square contribute exactly 0.
pub fn bounds_penalty<'t, F: Scalar>(
    tape: &'t Tape<F>,
    points: &[Var<'t, F>],
) -> Var<'t, F> {
    if points.is_empty() {
        return tape.constant(scalar_array(F::zero()));
    }
    let mut acc: Option<Var<'t, F>> = None;
    let mut count = 0usize;
    for &p in points {
        let overshoot = p.sub(p.clamp01());
        count += p.shape().iter().product::<usize>();
        let term = overshoot.sqr().sum_all();
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.unwrap().scale(F::cast(1.0 / count as f64))
}

/// Taped loss terms for one episode. `None` means the term is disabled by
/// the model variant (reported as 0 and absent from the total).
pub struct TermVars<'t, F: Scalar> {
    /// Joint prediction MSE (always present).
    pub body: Var<'t, F>,
    /// Peripheral reconstruction MSE.
    pub rec_per: Option<Var<'t, F>>,
    /// Encoder-side foveal reconstruction MSE.
    pub rec_fov_enc: Option<Var<'t, F>>,
    /// Decoder-side foveal reconstruction MSE.
    pub rec_fov_dec: Option<Var<'t, F>>,
    /// BU coordinate consistency.
    pub reg_bu_consist: Option<Var<'t, F>>,
    /// Foveal enc/dec consistency.
    pub reg_fov_consist: Option<Var<'t, F>>,
    /// TD displacement hinge.
    pub reg_displacement: Option<Var<'t, F>>,
    /// TD bounds penalty.
    pub reg_bounds: Option<Var<'t, F>>,
}

/// Weighted total on the tape plus the scalar breakdown for logging.
pub struct ComposedLoss<'t, F: Scalar> {
    /// Differentiable total.
    pub total: Var<'t, F>,
    /// Evaluated component values.
    pub breakdown: LossBreakdown,
}

/// Assemble the weighted total. The breakdown is read back from the same
/// tape nodes that form the total, and the weighted-sum invariant is
/// checked before returning.
pub fn compose<'t, F: Scalar>(
    terms: &TermVars<'t, F>,
    weights: &LossWeights,
) -> Result<ComposedLoss<'t, F>> {
    if weights.alpha < 0.0 || weights.beta < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got alpha={}, beta={}",
            weights.alpha, weights.beta
        )));
    }
    let value = |v: Option<Var<'t, F>>| v.map(|x| x.scalar().as_f64()).unwrap_or(0.0);
    let sum_opt = |parts: &[Option<Var<'t, F>>]| -> Option<Var<'t, F>> {
        let mut acc: Option<Var<'t, F>> = None;
        for p in parts.iter().flatten() {
            acc = Some(match acc {
                Some(a) => a.add(*p),
                None => *p,
            });
        }
        acc
    };

    let rec = sum_opt(&[terms.rec_per, terms.rec_fov_enc, terms.rec_fov_dec]);
    let reg = sum_opt(&[
        terms.reg_bu_consist,
        terms.reg_fov_consist,
        terms.reg_displacement,
        terms.reg_bounds,
    ]);
    let mut total = terms.body;
    if let Some(r) = rec {
        total = total.add(r.scale(F::cast(weights.alpha)));
    }
    if let Some(r) = reg {
        total = total.add(r.scale(F::cast(weights.beta)));
    }

    let breakdown = LossBreakdown {
        body: terms.body.scalar().as_f64(),
        rec_per: value(terms.rec_per),
        rec_fov_enc: value(terms.rec_fov_enc),
        rec_fov_dec: value(terms.rec_fov_dec),
        reg_bu_consist: value(terms.reg_bu_consist),
        reg_fov_consist: value(terms.reg_fov_consist),
        reg_displacement: value(terms.reg_displacement),
        reg_bounds: value(terms.reg_bounds),
        total: total.scalar().as_f64(),
    };
    let expect = breakdown.weighted_sum(weights);
    if (breakdown.total - expect).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "loss total {} deviates from weighted sum {} by more than 1e-6",
            breakdown.total, expect
        )));
    }
    Ok(ComposedLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn consts<'t>(tape: &'t Tape<f64>, seqs: &[ArrayD<f64>]) -> Vec<Var<'t, f64>> {
        seqs.iter().map(|a| tape.constant(a.clone())).collect()
    }

    fn rand_seq(rng: &mut ChaCha8Rng, t: usize, shape: &[usize]) -> Vec<ArrayD<f64>> {
        (0..t)
            .map(|_| ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn body_loss_zero_for_identical_shifted_sequences() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = rand_seq(&mut rng, 5, &[4]);
        // Prediction at t equals ground truth at t+1: perfect predictor.
        let mut pred = truth[1..].to_vec();
        pred.push(truth[0].clone()); // last prediction has no target pair
        let v = seq_mse(&tape, &consts(&tape, &pred), &consts(&tape, &truth), 1);
        assert!(v.scalar() < 1e-30);
    }

    #[test]
    fn body_loss_constant_offset_gives_delta_squared() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = rand_seq(&mut rng, 4, &[3]);
        let delta = 0.37;
        let pred: Vec<_> = (0..4)
            .map(|t| &truth[(t + 1).min(3)] + delta)
            .collect();
        let v = seq_mse(&tape, &consts(&tape, &pred), &consts(&tape, &truth), 1);
        assert!((v.scalar() - delta * delta).abs() < 1e-12);
    }

    #[test]
    fn seq_mse_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = rand_seq(&mut rng, 6, &[2, 3]);
        let truth = rand_seq(&mut rng, 6, &[2, 3]);
        for shift in [0usize, 1] {
            let tape = Tape::new();
            let v = seq_mse(&tape, &consts(&tape, &pred), &consts(&tape, &truth), shift);
            let pairs = 6 - shift;
            let mut oracle = 0.0;
            for t in 0..pairs {
                let d = &pred[t] - &truth[t + shift];
                oracle += d.mapv(|x| x * x).mean().unwrap();
            }
            oracle /= pairs as f64;
            assert!(
                (v.scalar() - oracle).abs() < 1e-12,
                "shift {shift}: {} vs {}",
                v.scalar(),
                oracle
            );
        }
    }

    #[test]
    fn seq_mse_with_one_step_is_zero_for_single_frame() {
        let tape = Tape::new();
        let a = vec![tape.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0))];
        let b = vec![tape.constant(ArrayD::from_elem(IxDyn(&[3]), 2.0))];
        assert_eq!(seq_mse(&tape, &a, &b, 1).scalar(), 0.0);
    }

    #[test]
    fn displacement_hinge_is_zero_up_to_the_limit() {
        let tape: Tape<f64> = Tape::new();
        // Static trajectory.
        let static_pts: Vec<_> = (0..4)
            .map(|_| tape.constant(ndarray::arr2(&[[0.5, 0.5], [0.2, 0.8]]).into_dyn()))
            .collect();
        assert_eq!(hinge_displacement(&tape, &static_pts).scalar(), 0.0);

        // Displacement of exactly the limit: hinge still contributes 0.
        let at_limit = vec![
            tape.constant(ndarray::arr2(&[[0.3, 0.5]]).into_dyn()),
            tape.constant(ndarray::arr2(&[[0.3 + DISPLACEMENT_LIMIT, 0.5]]).into_dyn()),
        ];
        assert!(hinge_displacement(&tape, &at_limit).scalar() < 1e-9);

        // Just past the limit: strictly positive.
        let past = vec![
            tape.constant(ndarray::arr2(&[[0.3, 0.5]]).into_dyn()),
            tape.constant(ndarray::arr2(&[[0.45, 0.5]]).into_dyn()),
        ];
        let v = hinge_displacement(&tape, &past).scalar();
        assert!((v - 0.05).abs() < 1e-9, "hinge past limit: {v}");
    }

    #[test]
    fn displacement_hinge_averages_over_steps_and_points() {
        let tape: Tape<f64> = Tape::new();
        // Two points, three steps. Point 0 jumps 0.3 per step (hinge 0.2),
        // point 1 stays put (hinge 0).
        let pts: Vec<_> = (0..3)
            .map(|t| {
                tape.constant(
                    ndarray::arr2(&[[0.1 + 0.3 * t as f64, 0.5], [0.9, 0.9]]).into_dyn(),
                )
            })
            .collect();
        let v = hinge_displacement(&tape, &pts).scalar();
        // Mean over 2 steps x 2 points = (0.2 + 0 + 0.2 + 0) / 4.
        assert!((v - 0.1).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn bounds_penalty_matches_clamp_distance() {
        let tape: Tape<f64> = Tape::new();
        // In-bounds points contribute exactly 0.
        let inside = vec![tape.constant(ndarray::arr2(&[[0.0, 1.0], [0.5, 0.25]]).into_dyn())];
        assert_eq!(bounds_penalty(&tape, &inside).scalar(), 0.0);

        // Single point (1.2, 0.5): squared overshoot 0.04 averaged over the
        // 2 coordinate axes.
        let out = vec![tape.constant(ndarray::arr2(&[[1.2, 0.5]]).into_dyn())];
        let v = bounds_penalty(&tape, &out).scalar();
        assert!((v - 0.02).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn perfect_prediction_fixture_zeroes_every_term() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_len = 4;
        let joints = rand_seq(&mut rng, t_len, &[3]);
        let frames = rand_seq(&mut rng, t_len, &[3, 8, 8]);
        // TD points drift slowly (within the hinge limit) and stay inside.
        let td_pts: Vec<ArrayD<f64>> = (0..t_len)
            .map(|t| ndarray::arr2(&[[0.3 + 0.05 * t as f64, 0.4]]).into_dyn())
            .collect();
        let bu_pts = rand_seq(&mut rng, t_len, &[2, 2])
            .into_iter()
            .map(|a| a.mapv(|v: f64| 0.5 + 0.4 * v.abs().min(1.0)))
            .collect::<Vec<_>>();
        let patches = rand_seq(&mut rng, t_len, &[1, 3, 4, 4]);

        let shift_pred = |seq: &[ArrayD<f64>]| -> Vec<ArrayD<f64>> {
            let mut p = seq[1..].to_vec();
            p.push(seq[0].clone());
            p
        };

        let joints_v = consts(&tape, &joints);
        let joint_hat_v = consts(&tape, &shift_pred(&joints));
        let frames_v = consts(&tape, &frames);
        let per_pred_v = consts(&tape, &shift_pred(&frames));
        let td_v = consts(&tape, &td_pts);
        let td_hat_v = consts(&tape, &shift_pred(&td_pts));
        let bu_v = consts(&tape, &bu_pts);
        let bu_hat_v = consts(&tape, &shift_pred(&bu_pts));
        let fov_enc_v = consts(&tape, &patches);
        let fov_dec_v = consts(&tape, &shift_pred(&patches));

        let terms = TermVars {
            body: seq_mse(&tape, &joint_hat_v, &joints_v, 1),
            rec_per: Some(seq_mse(&tape, &per_pred_v, &frames_v, 1)),
            rec_fov_enc: Some(seq_mse(&tape, &fov_enc_v, &fov_enc_v, 0)),
            rec_fov_dec: Some(seq_mse(&tape, &fov_dec_v, &fov_dec_v, 0)),
            reg_bu_consist: Some(seq_mse(&tape, &bu_hat_v, &bu_v, 1)),
            reg_fov_consist: Some(seq_mse(&tape, &fov_dec_v, &fov_enc_v, 1)),
            reg_displacement: Some(hinge_displacement(&tape, &td_v)),
            reg_bounds: Some(bounds_penalty(&tape, &td_hat_v)),
        };
        let composed = compose(&terms, &LossWeights::default()).unwrap();
        let b = composed.breakdown;
        for (name, v) in [
            ("body", b.body),
            ("rec_per", b.rec_per),
            ("rec_fov_enc", b.rec_fov_enc),
            ("rec_fov_dec", b.rec_fov_dec),
            ("reg_bu_consist", b.reg_bu_consist),
            ("reg_fov_consist", b.reg_fov_consist),
            ("reg_displacement", b.reg_displacement),
            ("reg_bounds", b.reg_bounds),
            ("total", b.total),
        ] {
            assert!(v.abs() < 1e-12, "{name} = {v} on perfect fixture");
        }
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let tape: Tape<f64> = Tape::new();
        let one = || Some(tape.constant(scalar_array(1.0)));
        let terms = TermVars {
            body: tape.constant(scalar_array(1.0)),
            rec_per: one(),
            rec_fov_enc: one(),
            rec_fov_dec: one(),
            reg_bu_consist: one(),
            reg_fov_consist: one(),
            reg_displacement: one(),
            reg_bounds: one(),
        };
        // All components 1 with unit weights: 1 + 3 + 4 = 8.
        let w = LossWeights::new(1.0, 1.0).unwrap();
        let c = compose(&terms, &w).unwrap();
        assert!((c.breakdown.total - 8.0).abs() < 1e-12);

        // Zero weights: total = body.
        let w0 = LossWeights::new(0.0, 0.0).unwrap();
        let c0 = compose(&terms, &w0).unwrap();
        assert!((c0.breakdown.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_components_match_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape: Tape<f64> = Tape::new();
        let vals: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0)).collect();
        let c = |v: f64| Some(tape.constant(scalar_array(v)));
        let terms = TermVars {
            body: tape.constant(scalar_array(vals[0])),
            rec_per: c(vals[1]),
            rec_fov_enc: c(vals[2]),
            rec_fov_dec: c(vals[3]),
            reg_bu_consist: c(vals[4]),
            reg_fov_consist: c(vals[5]),
            reg_displacement: c(vals[6]),
            reg_bounds: c(vals[7]),
        };
        let w = LossWeights::new(0.3, 0.7).unwrap();
        let composed = compose(&terms, &w).unwrap();
        let hand = vals[0]
            + 0.3 * (vals[1] + vals[2] + vals[3])
            + 0.7 * (vals[4] + vals[5] + vals[6] + vals[7]);
        assert!((composed.breakdown.total - hand).abs() < 1e-9);
    }

    #[test]
    fn disabled_terms_report_zero_and_skip_the_total() {
        let tape: Tape<f64> = Tape::new();
        let terms = TermVars {
            body: tape.constant(scalar_array(2.0)),
            rec_per: None,
            rec_fov_enc: None,
            rec_fov_dec: None,
            reg_bu_consist: None,
            reg_fov_consist: None,
            reg_displacement: Some(tape.constant(scalar_array(0.5))),
            reg_bounds: Some(tape.constant(scalar_array(0.25))),
        };
        let c = compose(&terms, &LossWeights::default()).unwrap();
        assert_eq!(c.breakdown.rec_per, 0.0);
        assert_eq!(c.breakdown.reg_bu_consist, 0.0);
        assert!((c.breakdown.total - (2.0 + 0.1 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights::new(-0.1, 0.1).is_err());
        assert!(LossWeights::new(0.1, -0.1).is_err());
        let tape: Tape<f64> = Tape::new();
        let terms = TermVars {
            body: tape.constant(scalar_array(1.0)),
            rec_per: None,
            rec_fov_enc: None,
            rec_fov_dec: None,
            reg_bu_consist: None,
            reg_fov_consist: None,
            reg_displacement: None,
            reg_bounds: None,
        };
        let bad = LossWeights {
            alpha: -1.0,
            beta: 0.0,
        };
        assert!(compose(&terms, &bad).is_err());
    }

    #[test]
    fn loss_gradients_flow_through_hinge_and_bounds() {
        use crate::tensor::{fd, Leaves, ParamSet};
        let mut ps: ParamSet<f64> = ParamSet::new();
        // Trajectory with one big jump (0.34 > limit) and a point outside
        // the unit square, so both regularizers are active away from their
        // kinks.
        ps.register(
            "pts.0",
            ndarray::arr2(&[[0.2, 0.3], [1.15, 0.5]]).into_dyn(),
        );
        ps.register(
            "pts.1",
            ndarray::arr2(&[[0.54, 0.3], [1.15, 0.62]]).into_dyn(),
        );
        let build = fd::objective(move |tape: &Tape<f64>, ps: &ParamSet<f64>| {
            let lv = Leaves::new(tape, ps);
            let ids: Vec<_> = ps.ids().collect();
            let pts: Vec<_> = ids.iter().map(|&id| lv.get(id)).collect();
            hinge_displacement(tape, &pts)
                .add(bounds_penalty(tape, &pts))
                .scale(3.0)
        });
        let max_rel = fd::max_param_rel_error(build, &mut ps, 1e-6, 8, 7);
        assert!(max_rel < 1e-6, "loss rel error {max_rel}");
    }
}
